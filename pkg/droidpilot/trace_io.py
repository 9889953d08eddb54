"""JSON Lines trace files.

Layout of a trace file:
    line 1      header  {"schema_version": "1", "task": ..., "config_fingerprint": ...,
                         "seed": ..., "device": ...}
    lines 2..n  one record per step
    last line   {"outcome": ..., "total_ms": ...}

Observation payloads are stored next to the trace as obs/<sha256>.<format_tag> and
referenced by digest.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict

from droidpilot.actions import (
    BoundingBox,
    EpisodeTrace,
    Observation,
    Outcome,
    OutcomeKind,
    Point,
    Step,
    TaskSpec,
    TraceDevice,
    Verdict,
    VerdictStatus,
    action_dumps,
    action_loads,
)
from droidpilot.errors import TraceFormatError
from droidpilot.utils import canonical_json, sha256_hex

# Module-level logger
log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
TRACE_FILE_NAME = "trace.jsonl"
OBS_DIR = "obs"


def obs_blob_name(obs: Observation) -> str:
    return f"{OBS_DIR}/{obs.digest}.{obs.format_tag}"


def _obs_ref(obs: Observation) -> dict:
    return {
        "digest": obs.digest,
        "format_tag": obs.format_tag,
        "screen_w": obs.screen_w,
        "screen_h": obs.screen_h,
        "captured_at": obs.captured_at,
    }


def _task_dumps(task: TaskSpec) -> dict:
    return {
        "id": task.id,
        "subset": task.subset,
        "instruction": task.instruction,
        "sim_goal": task.sim_goal,
    }


def _step_dumps(step: Step) -> dict:
    return {
        "step": step.index,
        "pre_obs": _obs_ref(step.pre_obs),
        "decision_raw": step.decision_raw,
        "action": action_dumps(step.action),
        "locator_box": step.locator_box.dumps() if step.locator_box else None,
        "tap_point": step.tap_point.dumps() if step.tap_point else None,
        "launched_app": step.launched_app,
        "post_obs": _obs_ref(step.post_obs),
        "verdict": {"status": step.verdict.status.value, "rationale": step.verdict.rationale},
        "note": step.note,
        "decide_ms": step.decide_ms,
        "locate_ms": step.locate_ms,
        "execute_ms": step.execute_ms,
        "reflect_ms": step.reflect_ms,
        "decide_attempts": step.decide_attempts,
        "reflect_attempts": step.reflect_attempts,
    }


def serialize_trace(trace: EpisodeTrace) -> bytes:
    """Byte-deterministic JSON Lines encoding of a trace (payloads not included)."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "task": _task_dumps(trace.task),
        "config_fingerprint": trace.config_fingerprint,
        "seed": trace.seed,
        "device": {
            "driver": trace.device.driver,
            "device_id": trace.device.device_id,
            "world_path": trace.device.world_path,
            "cache_reset": trace.device.cache_reset,
        },
    }
    records = [header]
    records.extend(_step_dumps(step) for step in trace.steps)
    records.append(
        {
            "outcome": {
                "kind": trace.outcome.kind.value,
                "message": trace.outcome.message,
                "phase": trace.outcome.phase,
            },
            "total_ms": trace.total_ms,
        }
    )
    return "".join(canonical_json(record) + "\n" for record in records).encode("utf-8")


def observation_blobs(trace: EpisodeTrace) -> Dict[str, bytes]:
    """Content-addressed observation payloads referenced by the trace."""
    blobs = {}
    for step in trace.steps:
        for obs in (step.pre_obs, step.post_obs):
            blobs[obs_blob_name(obs)] = obs.image_bytes
    return blobs


def _load_obs(ref: dict, load_blob: Callable[[str], bytes], line: int) -> Observation:
    name = f"{OBS_DIR}/{ref['digest']}.{ref['format_tag']}"
    try:
        payload = load_blob(name)
    except (OSError, KeyError) as e:
        raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, line, f"missing payload {name}: {e}")
    if sha256_hex(payload) != ref["digest"]:
        raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, line, f"payload digest mismatch for {name}")
    return Observation(
        image_bytes=payload,
        format_tag=ref["format_tag"],
        screen_w=ref["screen_w"],
        screen_h=ref["screen_h"],
        captured_at=ref["captured_at"],
    )


def _step_loads(record: dict, load_blob: Callable[[str], bytes], line: int) -> Step:
    box = record.get("locator_box")
    point = record.get("tap_point")
    return Step(
        index=record["step"],
        pre_obs=_load_obs(record["pre_obs"], load_blob, line),
        decision_raw=record["decision_raw"],
        action=action_loads(record["action"]),
        post_obs=_load_obs(record["post_obs"], load_blob, line),
        verdict=Verdict(VerdictStatus(record["verdict"]["status"]), record["verdict"]["rationale"]),
        decide_ms=record["decide_ms"],
        locate_ms=record["locate_ms"],
        execute_ms=record["execute_ms"],
        reflect_ms=record["reflect_ms"],
        locator_box=BoundingBox(*box) if box is not None else None,
        tap_point=Point(*point) if point is not None else None,
        launched_app=record.get("launched_app"),
        note=record.get("note"),
        decide_attempts=record.get("decide_attempts", 1),
        reflect_attempts=record.get("reflect_attempts", 1),
    )


def deserialize_trace(data: bytes, load_blob: Callable[[str], bytes]) -> EpisodeTrace:
    """Inverse of serialize_trace; load_blob resolves obs/<digest>.<tag> names to payloads."""
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, 1, "empty trace")

    records = []
    for number, raw in enumerate(lines, start=1):
        try:
            record = json.loads(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, number, f"invalid UTF-8 at byte {e.start}")
        except json.JSONDecodeError as e:
            raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, number, str(e))
        if not isinstance(record, dict):
            raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, number, "record is not an object")
        records.append(record)

    header = records[0]
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise TraceFormatError(
            TraceFormatError.SCHEMA_VERSION_MISMATCH, 1, f"expected {SCHEMA_VERSION}, got {version!r}"
        )
    final = records[-1]
    if len(records) < 2 or "outcome" not in final:
        raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, len(records), "missing final outcome record")

    try:
        task = TaskSpec(**header["task"])
        device = TraceDevice(**header["device"])
    except (KeyError, TypeError, ValueError) as e:
        raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, 1, f"invalid header: {e}")

    steps = []
    for number, record in enumerate(records[1:-1], start=2):
        try:
            steps.append(_step_loads(record, load_blob, number))
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, number, f"invalid step: {e}")

    try:
        outcome = Outcome(
            OutcomeKind(final["outcome"]["kind"]),
            final["outcome"]["message"],
            final["outcome"]["phase"],
        )
        return EpisodeTrace(
            task=task,
            steps=steps,
            outcome=outcome,
            config_fingerprint=header["config_fingerprint"],
            seed=header["seed"],
            total_ms=final["total_ms"],
            device=device,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise TraceFormatError(TraceFormatError.MALFORMED_RECORD, len(records), f"invalid trace content: {e}")


def write_trace(trace: EpisodeTrace, directory: Path) -> Path:
    """Write trace.jsonl and its observation payloads into directory."""
    directory = Path(directory)
    (directory / OBS_DIR).mkdir(parents=True, exist_ok=True)
    for name, payload in observation_blobs(trace).items():
        blob_path = directory / name
        if not blob_path.exists():
            blob_path.write_bytes(payload)
    trace_path = directory / TRACE_FILE_NAME
    trace_path.write_bytes(serialize_trace(trace))
    log.debug(f"Trace written to {trace_path}")
    return trace_path


def read_trace(path: Path) -> EpisodeTrace:
    """Read a trace file (or a directory holding trace.jsonl)."""
    path = Path(path)
    if path.is_dir():
        path = path / TRACE_FILE_NAME
    base = path.parent
    return deserialize_trace(path.read_bytes(), lambda name: (base / name).read_bytes())
