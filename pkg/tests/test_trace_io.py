import json

import pytest

from droidpilot.actions import (
    BoundingBox,
    Click,
    Direction,
    EpisodeTrace,
    Observation,
    OpenApp,
    Outcome,
    OutcomeKind,
    Point,
    Step,
    Swipe,
    TaskSpec,
    TraceDevice,
    Type,
    Verdict,
    VerdictStatus,
    render_action,
)
from droidpilot.errors import TraceFormatError
from droidpilot.simworld import SplitMix64
from droidpilot.trace_io import (
    OBS_DIR,
    TRACE_FILE_NAME,
    deserialize_trace,
    observation_blobs,
    read_trace,
    serialize_trace,
    write_trace,
)

TASK = TaskSpec("shop-003", "WebShopping", "Search for a usb-c cable", "search_usb_cable")


def obs(n: int) -> Observation:
    return Observation(f"screen {n}".encode(), "simdesc", 1080, 1920, float(n))


def generated_trace(rng: SplitMix64) -> EpisodeTrace:
    steps = []
    count = rng.randrange(6)
    for index in range(count):
        kind = rng.randrange(4)
        last = index == count - 1
        status = VerdictStatus.SUCCESS if last and rng.randrange(2) else VerdictStatus.FAILURE
        extra = {}
        if kind == 0:
            action = Click(f"tap on element 'item {rng.randrange(100)}'")
            extra = {"locator_box": BoundingBox(0.1, 0.2, 0.3, 0.4), "tap_point": Point(216, 576, 1080, 1920)}
        elif kind == 1:
            action = Type(f"query {rng.randrange(1000)}")
        elif kind == 2:
            action = OpenApp("com.android.chrome")
            extra = {"launched_app": "com.android.chrome"}
        else:
            action = Swipe(rng.choice(list(Direction)))
        steps.append(Step(
            index, obs(2 * index), render_action(action), action, obs(2 * index + 1),
            Verdict(status, f"rationale {index}"),
            rng.random() * 100, rng.random() * 100, rng.random() * 100, rng.random() * 100,
            decide_attempts=1 + rng.randrange(3), **extra,
        ))
    succeeded = bool(steps) and steps[-1].verdict.success
    outcome = Outcome(OutcomeKind.SUCCESS) if succeeded else Outcome(OutcomeKind.BUDGET_EXHAUSTED, "budget")
    return EpisodeTrace(TASK, steps, outcome, "0123456789abcdef", rng.next_u64(), 12.5,
                        TraceDevice("sim", "shopping", "/worlds/shopping.yaml", bool(rng.randrange(2))))


def test_generated_traces_survive_serialization():
    rng = SplitMix64(99)
    for _ in range(200):
        trace = generated_trace(rng)
        blobs = observation_blobs(trace)
        assert deserialize_trace(serialize_trace(trace), blobs.__getitem__) == trace


def test_serialization_is_byte_deterministic():
    trace = generated_trace(SplitMix64(5))
    assert serialize_trace(trace) == serialize_trace(trace)


def test_layout_header_steps_outcome():
    trace = generated_trace(SplitMix64(3))
    lines = serialize_trace(trace).decode().splitlines()
    assert len(lines) == len(trace.steps) + 2
    header = json.loads(lines[0])
    assert header["schema_version"] == "1"
    assert header["config_fingerprint"] == "0123456789abcdef"
    assert "outcome" in json.loads(lines[-1])


def test_write_and_read_directory(tmp_path):
    trace = generated_trace(SplitMix64(11))
    path = write_trace(trace, tmp_path / "t" / "0")
    assert path.name == TRACE_FILE_NAME
    for step in trace.steps:
        assert (tmp_path / "t" / "0" / OBS_DIR / f"{step.pre_obs.digest}.simdesc").exists()
    assert read_trace(tmp_path / "t" / "0") == trace
    assert read_trace(path) == trace


def test_schema_version_mismatch():
    trace = generated_trace(SplitMix64(1))
    lines = serialize_trace(trace).decode().splitlines()
    header = json.loads(lines[0])
    header["schema_version"] = "2"
    data = "\n".join([json.dumps(header)] + lines[1:]).encode()
    with pytest.raises(TraceFormatError) as info:
        deserialize_trace(data, observation_blobs(trace).__getitem__)
    assert info.value.kind == TraceFormatError.SCHEMA_VERSION_MISMATCH
    assert info.value.line == 1


def test_truncated_step_reports_its_line():
    rng = SplitMix64(0)
    trace = generated_trace(rng)
    while len(trace.steps) < 2:
        trace = generated_trace(rng)
    lines = serialize_trace(trace).decode().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    with pytest.raises(TraceFormatError) as info:
        deserialize_trace("\n".join(lines).encode(), observation_blobs(trace).__getitem__)
    assert info.value.kind == TraceFormatError.MALFORMED_RECORD
    assert info.value.line == 3


def test_missing_payload_is_malformed():
    rng = SplitMix64(0)
    trace = generated_trace(rng)
    while not trace.steps:
        trace = generated_trace(rng)
    with pytest.raises(TraceFormatError):
        deserialize_trace(serialize_trace(trace), {}.__getitem__)


def test_invalid_utf8_reports_its_line():
    trace = generated_trace(SplitMix64(0))
    lines = serialize_trace(trace).split(b"\n")
    lines[1] = lines[1][:20] + b"\xff" + lines[1][20:]
    with pytest.raises(TraceFormatError) as info:
        deserialize_trace(b"\n".join(lines), observation_blobs(trace).__getitem__)
    assert info.value.kind == TraceFormatError.MALFORMED_RECORD
    assert info.value.line == 2
