"""The episode loop: observe, decide, locate and execute, observe, reflect, repeat."""
import itertools
import logging
import time
from pathlib import Path
from typing import Callable, List, Optional

from droidpilot.actions import (
    Click,
    EpisodeTrace,
    OpenApp,
    Outcome,
    OutcomeKind,
    Step,
    Swipe,
    TaskSpec,
    Type,
    bbox_center,
    render_action,
    summarize_history,
)
from droidpilot.agent_logger import AgentLogger
from droidpilot.config import LoopConfig
from droidpilot.device import Device, SimDevice
from droidpilot.errors import (
    AppSelectionError,
    DroidPilotError,
    ElementNotFound,
    MalformedBox,
    NoFocusedField,
    ReplayDivergence,
    ReplayUnsupported,
    TransportError,
    UnknownApp,
    UnsafeText,
)
from droidpilot.gateway import (
    LocatorBackend,
    MllmBackend,
    PromptBundle,
    decide,
    locate,
    reflect,
    select_app,
)
from droidpilot.simworld import World, WorldState, apply_launch, apply_swipe, apply_tap, apply_type, load_world
from droidpilot.trace_io import read_trace, write_trace
from droidpilot.utils import ns_to_ms

# Module-level logger
log = logging.getLogger(__name__)

STEP_TIMEOUT = "step_timeout"

# Nanoseconds a logical clock advances per reading
LOGICAL_TICK_NS = 1_000_000


class _EpisodeAbort(Exception):
    def __init__(self, phase: str, error: Exception):
        self.phase = phase
        self.error = error


def _history_with(steps: List[Step], action) -> str:
    """History including the action that was just executed, verdict still pending."""
    lines = [] if not steps else summarize_history(steps).split("\n")
    rendered = render_action(action).replace("\n", " | ")
    lines.append(f"{len(steps) + 1}. {rendered} | verdict: pending")
    return "\n".join(lines)


def logical_clock(tick_ns: int = LOGICAL_TICK_NS) -> Callable[[], int]:
    """Clock that advances a fixed tick per reading; timings of fully simulated runs repeat exactly."""
    counter = itertools.count(step=tick_ns)
    return lambda: next(counter)


def is_transport_failure(outcome: Outcome) -> bool:
    return outcome.kind is OutcomeKind.ERROR and outcome.message.startswith(TransportError.__name__)


def _phase(phase: str, fn, *args):
    try:
        return fn(*args)
    except DroidPilotError as e:
        raise _EpisodeAbort(phase, e)


def run_episode(
    task: TaskSpec,
    device: Device,
    mllm: MllmBackend,
    locator: LocatorBackend,
    loop_cfg: LoopConfig,
    prompts: PromptBundle,
    *,
    seed: int = 0,
    run_index: int = 0,
    config_fingerprint: str = "",
    logger: Optional[AgentLogger] = None,
    on_step_start: Optional[Callable[[int], None]] = None,
    on_step: Optional[Callable[[Step], None]] = None,
    clock: Callable[[], int] = time.perf_counter_ns,
) -> EpisodeTrace:
    """Run one task until a success verdict, the step budget or an unrecoverable error."""
    logger = logger or AgentLogger()
    steps: List[Step] = []
    logger.log_episode_start(task.id, run_index, device.info())
    outcome = Outcome(OutcomeKind.BUDGET_EXHAUSTED, f"no success verdict within {loop_cfg.max_steps} steps")
    started = clock()

    for index in range(loop_cfg.max_steps):
        if on_step_start:
            on_step_start(index)
        try:
            step = _run_step(index, task, device, mllm, locator, prompts, steps, logger, clock)
        except _EpisodeAbort as abort:
            outcome = Outcome.error(abort.phase, f"{type(abort.error).__name__}: {abort.error}")
            logger.log_error(f"Episode {task.id} aborted in {abort.phase}: {abort.error}")
            break

        steps.append(step)
        if on_step:
            on_step(step)
        if step.verdict.success:
            outcome = Outcome(OutcomeKind.SUCCESS)
            break
        if step.phase_ms > loop_cfg.per_step_timeout_ms:
            outcome = Outcome.error(STEP_TIMEOUT, f"step {index} took {step.phase_ms:.0f} ms")
            break

    total_ms = ns_to_ms(clock() - started)
    trace = EpisodeTrace(
        task=task,
        steps=steps,
        outcome=outcome,
        config_fingerprint=config_fingerprint,
        seed=seed,
        total_ms=total_ms,
        device=device.trace_device(),
    )
    logger.log_episode(task.id, run_index, outcome, len(steps), total_ms)
    if loop_cfg.record_dir:
        write_trace(trace, Path(loop_cfg.record_dir) / task.id / str(run_index))
    return trace


def _run_step(index, task, device, mllm, locator, prompts, steps, logger, clock) -> Step:
    t_start = clock()
    pre_obs = _phase("capture", device.capture_screenshot)
    decision = _phase("decide", decide, mllm, task, summarize_history(steps), pre_obs, prompts)
    action = decision.action
    logger.log_decision(task.id, index, action, decision.attempts, decision.raw)
    t_decided = clock()

    box = point = launched_app = note = None
    t_located = t_decided
    if isinstance(action, Click):
        try:
            box = locate(locator, pre_obs, action.ui_command)
            point = bbox_center(box, pre_obs.screen_w, pre_obs.screen_h)
        except (MalformedBox, ElementNotFound) as e:
            box, note = None, f"locate: {type(e).__name__}: {e}"
        except DroidPilotError as e:
            raise _EpisodeAbort("locate", e)
        t_located = clock()
        logger.log_locate(index, action.ui_command, box, point)

    try:
        if isinstance(action, Click):
            if point is not None:
                device.tap(point)
        elif isinstance(action, Type):
            device.type_text(action.text)
        elif isinstance(action, OpenApp):
            apps = device.list_apps()
            if not apps:
                note = "select_app: device reports no apps"
            else:
                launched_app = select_app(mllm, task, apps, pre_obs, prompts)
                device.launch_app(launched_app)
        elif isinstance(action, Swipe):
            device.swipe(action.direction)
    except (NoFocusedField, UnsafeText) as e:
        note = f"execute: {type(e).__name__}: {e}"
    except AppSelectionError as e:
        note = f"select_app: {e}"
    except UnknownApp as e:
        launched_app, note = None, f"execute: UnknownApp: {e}"
    except DroidPilotError as e:
        raise _EpisodeAbort("execute", e)
    logger.log_execute(index, render_action(action).replace("\n", " | "), note)
    t_executed = clock()

    post_obs = _phase("capture", device.capture_screenshot)
    reflection = _phase("reflect", reflect, mllm, task, _history_with(steps, action), post_obs, prompts)
    logger.log_reflect(index, reflection.verdict, reflection.attempts)
    t_end = clock()

    return Step(
        index=index,
        pre_obs=pre_obs,
        decision_raw=decision.raw,
        action=action,
        post_obs=post_obs,
        verdict=reflection.verdict,
        decide_ms=ns_to_ms(t_decided - t_start),
        locate_ms=ns_to_ms(t_located - t_decided),
        execute_ms=ns_to_ms(t_executed - t_located),
        reflect_ms=ns_to_ms(t_end - t_executed),
        locator_box=box,
        tap_point=point,
        launched_app=launched_app,
        note=note,
        decide_attempts=decision.attempts,
        reflect_attempts=reflection.attempts,
    )


# Replay


def apply_recorded_step(world: World, state: WorldState, step: Step) -> WorldState:
    """Re-apply the device effect of a recorded step to a world state."""
    action = step.action
    if isinstance(action, Click):
        return apply_tap(world, state, step.tap_point) if step.tap_point is not None else state
    if isinstance(action, Type):
        try:
            return apply_type(world, state, action.text)
        except NoFocusedField:
            return state
    if isinstance(action, OpenApp):
        return apply_launch(world, state, step.launched_app) if step.launched_app else state
    return apply_swipe(world, state, action.direction)


def replay(trace_or_path, world_path=None) -> EpisodeTrace:
    """Re-execute a sim trace on a fresh world and check every observation digest."""
    trace = trace_or_path if isinstance(trace_or_path, EpisodeTrace) else read_trace(trace_or_path)
    if trace.device.driver != "sim":
        raise ReplayUnsupported(f"only sim traces can be replayed, got driver '{trace.device.driver}'")
    path = world_path or trace.device.world_path
    if not path:
        raise ReplayUnsupported("trace does not name its world file")
    device = SimDevice(load_world(path), trace.seed)
    if trace.device.cache_reset:
        device.reset_cache(())

    steps = []
    for step in trace.steps:
        t_start = time.perf_counter_ns()
        pre_obs = device.capture_screenshot()
        if pre_obs.digest != step.pre_obs.digest:
            raise ReplayDivergence(step.index, step.pre_obs.digest, pre_obs.digest)
        device.state = apply_recorded_step(device.world, device.state, step)
        post_obs = device.capture_screenshot()
        if post_obs.digest != step.post_obs.digest:
            raise ReplayDivergence(step.index, step.post_obs.digest, post_obs.digest)
        elapsed = ns_to_ms(time.perf_counter_ns() - t_start)
        steps.append(
            Step(
                index=step.index,
                pre_obs=pre_obs,
                decision_raw=step.decision_raw,
                action=step.action,
                post_obs=post_obs,
                verdict=step.verdict,
                decide_ms=0.0,
                locate_ms=0.0,
                execute_ms=elapsed,
                reflect_ms=0.0,
                locator_box=step.locator_box,
                tap_point=step.tap_point,
                launched_app=step.launched_app,
                note=step.note,
                decide_attempts=step.decide_attempts,
                reflect_attempts=step.reflect_attempts,
            )
        )
    log.info(f"Replayed {len(steps)} steps of {trace.task.id} without divergence")
    return EpisodeTrace(
        task=trace.task,
        steps=steps,
        outcome=trace.outcome,
        config_fingerprint=trace.config_fingerprint,
        seed=trace.seed,
        total_ms=sum(step.phase_ms for step in steps),
        device=trace.device,
    )
