import enum
from typing import Optional


class DroidPilotError(Exception):
    """Base class for every error raised by droidpilot"""


class ConfigError(DroidPilotError):
    pass


# Decision grammar


class ParseErrorKind(enum.Enum):
    NO_ACTION_TAG = "no_action_tag"
    MISSING_ARGUMENT = "missing_argument"
    UNKNOWN_ACTION = "unknown_action"
    UNKNOWN_DIRECTION = "unknown_direction"


class ParseError(DroidPilotError):
    def __init__(self, kind: ParseErrorKind, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)


# Trace files


class TraceFormatError(DroidPilotError):
    SCHEMA_VERSION_MISMATCH = "schema_version_mismatch"
    MALFORMED_RECORD = "malformed_record"

    def __init__(self, kind: str, line: int, detail: str = ""):
        self.kind = kind
        self.line = line
        self.detail = detail
        super().__init__(f"{kind} at line {line}: {detail}")


# Model gateway


class GatewayError(DroidPilotError):
    pass


class TransportError(GatewayError):
    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class ModelRefusal(GatewayError):
    pass


class UnparseableDecision(GatewayError):
    def __init__(self, attempts: int, last_error: Optional[ParseError] = None):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"no parseable action after {attempts} prompt attempts: {last_error}")


class AppSelectionError(GatewayError):
    pass


class MalformedBox(GatewayError):
    pass


class MissingPlaceholder(GatewayError):
    def __init__(self, template: str, placeholder: str):
        self.template = template
        self.placeholder = placeholder
        super().__init__(f"template '{template}' is missing placeholder {{{placeholder}}}")


# Devices


class DeviceError(DroidPilotError):
    pass


class DeviceUnreachable(DeviceError):
    pass


class EmptyCapture(DeviceError):
    pass


class NoFocusedField(DeviceError):
    pass


class UnknownApp(DeviceError):
    pass


class UnsafeText(DeviceError):
    pass


class AdbCommandError(DeviceError):
    pass


# Simulated world


class SimError(DroidPilotError):
    pass


class WorldFileError(SimError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ElementNotFound(SimError):
    pass


class Unreachable(SimError):
    pass


# Agent loop


class LoopError(DroidPilotError):
    pass


class ReplayDivergence(LoopError):
    def __init__(self, step: int, expected: str, actual: str):
        self.step = step
        self.expected = expected
        self.actual = actual
        super().__init__(f"replay diverged at step {step}: expected {expected}, got {actual}")


class ReplayUnsupported(LoopError):
    pass


# Evaluation harness


class HarnessError(DroidPilotError):
    pass


class TaskFileError(HarnessError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateTaskId(HarnessError):
    pass


class AttributionUnavailable(HarnessError):
    pass


class UnknownTaskId(HarnessError):
    pass


class ConflictingLabel(HarnessError):
    pass


class EmptyResults(HarnessError):
    pass


class ResultsFileError(HarnessError):
    pass
