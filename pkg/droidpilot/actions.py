"""Action grammar, observations, episode traces and the pure operations shared by
every other module.

All types are frozen dataclasses; they are safe to share between concurrent episodes.
"""
import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from droidpilot.errors import ParseError, ParseErrorKind
from droidpilot.utils import clamp, sha256_hex

# Module-level logger
log = logging.getLogger(__name__)

EMPTY_HISTORY = "No actions taken yet."

GENERAL = "General"
WEBSHOPPING = "WebShopping"

MAX_SEED = 2**64 - 1


class Direction(enum.Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


class ActionKind(enum.Enum):
    CLICK = "CLICK"
    TYPE = "TYPE"
    OPEN_APP = "OPEN_APP"
    SWIPE = "SWIPE"


# Argument key for every action tag of the decision grammar
ARGUMENT_KEYS = {
    ActionKind.CLICK: "TARGET",
    ActionKind.TYPE: "TEXT",
    ActionKind.OPEN_APP: "APP",
    ActionKind.SWIPE: "DIRECTION",
}


def _single_line(value: str, what: str) -> None:
    if "\n" in value or "\r" in value:
        raise ValueError(f"{what} must be a single line: {value!r}")


@dataclass(frozen=True)
class Click:
    ui_command: str
    kind = ActionKind.CLICK

    def __post_init__(self):
        object.__setattr__(self, "ui_command", self.ui_command.strip())
        if not self.ui_command:
            raise ValueError("Click.ui_command must not be empty")
        _single_line(self.ui_command, "Click.ui_command")

    @property
    def argument(self) -> str:
        return self.ui_command


@dataclass(frozen=True)
class Type:
    text: str
    kind = ActionKind.TYPE

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("Type.text must not be empty")
        _single_line(self.text, "Type.text")

    @property
    def argument(self) -> str:
        return self.text


@dataclass(frozen=True)
class OpenApp:
    app_id: str
    kind = ActionKind.OPEN_APP

    def __post_init__(self):
        object.__setattr__(self, "app_id", self.app_id.strip())
        if not self.app_id:
            raise ValueError("OpenApp.app_id must not be empty")
        _single_line(self.app_id, "OpenApp.app_id")

    @property
    def argument(self) -> str:
        return self.app_id


@dataclass(frozen=True)
class Swipe:
    direction: Direction
    kind = ActionKind.SWIPE

    def __post_init__(self):
        if not isinstance(self.direction, Direction):
            raise ValueError(f"Swipe.direction must be a Direction, got {self.direction!r}")

    @property
    def argument(self) -> str:
        return self.direction.value


Action = Union[Click, Type, OpenApp, Swipe]


@dataclass(frozen=True)
class BoundingBox:
    """Normalized box, all coordinates in [0, 1]. Zero-area boxes are valid."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise ValueError(f"BoundingBox.{name} out of range: {value!r}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"BoundingBox is inverted: {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2

    def dumps(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Point:
    x: int
    y: int
    screen_w: int
    screen_h: int

    def __post_init__(self):
        if self.screen_w <= 0 or self.screen_h <= 0:
            raise ValueError(f"screen size must be positive: {self.screen_w}x{self.screen_h}")
        if not (0 <= self.x < self.screen_w and 0 <= self.y < self.screen_h):
            raise ValueError(f"Point ({self.x},{self.y}) outside {self.screen_w}x{self.screen_h}")

    def dumps(self) -> list:
        return [self.x, self.y, self.screen_w, self.screen_h]


@dataclass(frozen=True)
class Observation:
    image_bytes: bytes
    format_tag: str
    screen_w: int
    screen_h: int
    captured_at: float

    def __post_init__(self):
        if not self.image_bytes:
            raise ValueError("Observation payload must not be empty")
        if self.screen_w <= 0 or self.screen_h <= 0:
            raise ValueError("Observation dimensions must be positive")

    @property
    def digest(self) -> str:
        return sha256_hex(self.image_bytes)


class VerdictStatus(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass(frozen=True)
class Verdict:
    status: VerdictStatus
    rationale: str = ""

    @property
    def success(self) -> bool:
        return self.status is VerdictStatus.SUCCESS


@dataclass(frozen=True)
class TaskSpec:
    id: str
    subset: str
    instruction: str
    sim_goal: Optional[str] = None

    def __post_init__(self):
        if not self.id.strip():
            raise ValueError("TaskSpec.id must not be empty")
        if not self.instruction.strip():
            raise ValueError(f"TaskSpec {self.id}: instruction must not be empty")
        if not self.subset.strip():
            raise ValueError(f"TaskSpec {self.id}: subset must not be empty")


@dataclass(frozen=True)
class Step:
    index: int
    pre_obs: Observation
    decision_raw: str
    action: Action
    post_obs: Observation
    verdict: Verdict
    decide_ms: float
    locate_ms: float
    execute_ms: float
    reflect_ms: float
    locator_box: Optional[BoundingBox] = None
    tap_point: Optional[Point] = None
    launched_app: Optional[str] = None
    note: Optional[str] = None
    decide_attempts: int = 1
    reflect_attempts: int = 1

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"Step index must be >= 0, got {self.index}")
        has_box = self.locator_box is not None
        has_point = self.tap_point is not None
        if isinstance(self.action, Click):
            locate_failed = self.note is not None and self.note.startswith("locate:")
            if has_box != has_point:
                raise ValueError(f"Step {self.index}: locator_box and tap_point go together")
            if not has_box and not locate_failed:
                raise ValueError(f"Step {self.index}: Click step without locator output")
        elif has_box or has_point:
            raise ValueError(f"Step {self.index}: locator output on a non-Click step")
        if self.launched_app is not None and not isinstance(self.action, OpenApp):
            raise ValueError(f"Step {self.index}: launched_app on a non-OpenApp step")

    @property
    def phase_ms(self) -> float:
        return self.decide_ms + self.locate_ms + self.execute_ms + self.reflect_ms


class OutcomeKind(enum.Enum):
    SUCCESS = "success"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ERROR = "error"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    message: str = ""
    phase: Optional[str] = None

    @classmethod
    def error(cls, phase: str, message: str) -> "Outcome":
        return cls(OutcomeKind.ERROR, message, phase)

    def __str__(self):
        if self.kind is OutcomeKind.ERROR:
            return f"error({self.phase}: {self.message})"
        return self.kind.value


@dataclass(frozen=True)
class TraceDevice:
    """What a trace needs to know about the device it was recorded on"""

    driver: str
    device_id: str
    world_path: Optional[str] = None
    cache_reset: bool = False


@dataclass(frozen=True)
class EpisodeTrace:
    task: TaskSpec
    steps: tuple
    outcome: Outcome
    config_fingerprint: str
    seed: int
    total_ms: float
    device: TraceDevice = field(default_factory=lambda: TraceDevice("sim", "unknown"))

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not 0 <= self.seed <= MAX_SEED:
            raise ValueError(f"seed {self.seed} is not a 64-bit unsigned integer")
        for expected, step in enumerate(self.steps):
            if step.index != expected:
                raise ValueError(f"step indices must be 0..n-1 without gaps, found {step.index} at {expected}")
        last_success = bool(self.steps) and self.steps[-1].verdict.success
        if (self.outcome.kind is OutcomeKind.SUCCESS) != last_success:
            raise ValueError(f"outcome {self.outcome} disagrees with the final verdict")

    @property
    def succeeded(self) -> bool:
        return self.outcome.kind is OutcomeKind.SUCCESS


# Decision grammar

_ACTION_LINE = re.compile(r"^\s*ACTION\s*:\s*([A-Za-z_ ]+?)\s*$", re.IGNORECASE)
_ARGUMENT_LINE = re.compile(r"^\s*(TARGET|TEXT|APP|DIRECTION)\s*:(.*)$", re.IGNORECASE)


def _clean_keyword_line(line: str) -> str:
    # models like to bold or code-quote the tag
    return line.replace("*", "").replace("`", "")


def _action_kind(tag: str) -> Optional[ActionKind]:
    normalized = re.sub(r"[\s_]+", "_", tag.strip().upper())
    if normalized == "OPENAPP":
        normalized = "OPEN_APP"
    try:
        return ActionKind(normalized)
    except ValueError:
        return None


def _parse_block(lines: list, start: int, tag: str) -> Action:
    kind = _action_kind(tag)
    if kind is None:
        raise ParseError(ParseErrorKind.UNKNOWN_ACTION, tag)

    # the argument is the next non-empty line
    argument_line = None
    for line in lines[start + 1:]:
        if line.strip():
            argument_line = line
            break
    if argument_line is None:
        raise ParseError(ParseErrorKind.MISSING_ARGUMENT, f"{kind.value} without argument line")

    match = _ARGUMENT_LINE.match(_clean_keyword_line(argument_line).rstrip("\r"))
    if match is None or match.group(1).upper() != ARGUMENT_KEYS[kind]:
        raise ParseError(ParseErrorKind.MISSING_ARGUMENT, f"expected {ARGUMENT_KEYS[kind]}: line")

    # keep the argument verbatim after the single space that follows the colon
    raw_value = argument_line.rstrip("\r")
    raw_match = _ARGUMENT_LINE.match(raw_value)
    value = raw_match.group(2) if raw_match else match.group(2)
    if value.startswith(" "):
        value = value[1:]
    if not value.strip():
        raise ParseError(ParseErrorKind.MISSING_ARGUMENT, f"empty {ARGUMENT_KEYS[kind]}")

    if kind is ActionKind.CLICK:
        return Click(value)
    if kind is ActionKind.TYPE:
        return Type(value)
    if kind is ActionKind.OPEN_APP:
        return OpenApp(value)
    try:
        return Swipe(Direction(value.strip().lower()))
    except ValueError:
        raise ParseError(ParseErrorKind.UNKNOWN_DIRECTION, value.strip())


def parse_decision(raw: str) -> Action:
    """Parse a decision completion; the first well-formed ACTION block wins."""
    lines = raw.split("\n")
    first_error: Optional[ParseError] = None
    for i, line in enumerate(lines):
        match = _ACTION_LINE.match(_clean_keyword_line(line))
        if match is None:
            continue
        try:
            return _parse_block(lines, i, match.group(1))
        except ParseError as e:
            log.debug(f"Skipping malformed action block at line {i + 1}: {e}")
            if first_error is None:
                first_error = e
    if first_error is not None:
        raise first_error
    raise ParseError(ParseErrorKind.NO_ACTION_TAG)


def render_action(action: Action) -> str:
    """Canonical grammar text; parse_decision(render_action(a)) == a."""
    return f"ACTION: {action.kind.value}\n{ARGUMENT_KEYS[action.kind]}: {action.argument}"


def action_dumps(action: Action) -> dict:
    return {"kind": action.kind.value, "argument": action.argument}


def action_loads(data: dict) -> Action:
    kind = ActionKind(data["kind"])
    argument = data["argument"]
    if kind is ActionKind.CLICK:
        return Click(argument)
    if kind is ActionKind.TYPE:
        return Type(argument)
    if kind is ActionKind.OPEN_APP:
        return OpenApp(argument)
    return Swipe(Direction(argument))


def bbox_center(box: BoundingBox, screen_w: int, screen_h: int) -> Point:
    """Pixel midpoint of a normalized box, clamped onto the screen."""
    if screen_w <= 0 or screen_h <= 0:
        raise ValueError(f"screen size must be positive: {screen_w}x{screen_h}")
    x = round((box.x1 + box.x2) / 2 * screen_w)
    y = round((box.y1 + box.y2) / 2 * screen_h)
    return Point(
        x=int(clamp(x, 0, screen_w - 1)),
        y=int(clamp(y, 0, screen_h - 1)),
        screen_w=screen_w,
        screen_h=screen_h,
    )


def summarize_history(steps) -> str:
    """Numbered action history given to the models.

    Accepts an EpisodeTrace or a plain sequence of steps.
    """
    if isinstance(steps, EpisodeTrace):
        steps = steps.steps
    if not steps:
        return EMPTY_HISTORY
    lines = []
    for step in steps:
        rendered = render_action(step.action).replace("\n", " | ")
        lines.append(f"{step.index + 1}. {rendered} | verdict: {step.verdict.status.value}")
    return "\n".join(lines)
