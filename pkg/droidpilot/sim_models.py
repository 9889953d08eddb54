"""Scripted models for simulated worlds: the BFS oracle, the perfect locator and
seeded error injectors for the decision, locator and reflection components.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from droidpilot.actions import (
    ActionKind,
    BoundingBox,
    Click,
    Direction,
    Observation,
    OpenApp,
    Swipe,
    Type,
    parse_decision,
    render_action,
)
from droidpilot.errors import ParseError
from droidpilot.gateway import LocatorBackend, MllmBackend, Purpose, parse_reflection
from droidpilot.simworld import (
    SIMDESC,
    ErrorInjectionConfig,
    SimGoal,
    SplitMix64,
    dead_space_box,
    goal_check,
    oracle_policy,
    parse_screen,
    perfect_locate,
)
from droidpilot.utils import derive_seed

# Module-level logger
log = logging.getLogger(__name__)

DECISION = "decision"
LOCATOR = "locator"
REFLECTION = "reflection"
COMPONENTS = (DECISION, LOCATOR, REFLECTION)

WRONG_TEXTS = ("hello", "42", "zzz")


@dataclass(frozen=True)
class InjectionEntry:
    step: int
    component: str
    kind: str
    draw: float


class InjectionLog:
    """Ground truth of every injected error in one episode"""

    def __init__(self):
        self.entries: List[InjectionEntry] = []
        self.step = 0

    def start_step(self, index: int):
        self.step = index

    def record(self, component: str, kind: str, draw: float):
        entry = InjectionEntry(self.step, component, kind, draw)
        self.entries.append(entry)
        log.debug(f"[INJECTION] step={entry.step} component={component} kind={kind} draw={draw:.6f}")

    def first(self) -> Optional[InjectionEntry]:
        return self.entries[0] if self.entries else None

    def __len__(self):
        return len(self.entries)


def component_stream(injection: ErrorInjectionConfig, episode_seed: int, component: str) -> SplitMix64:
    return SplitMix64(derive_seed(injection.seed, f"{episode_seed}/{component}"))


class OracleMllm(MllmBackend):
    """Perfect decision and reflection model reading the simulated device state."""

    def __init__(self, device, goal: SimGoal):
        self.device = device
        self.goal = goal
        self.last_app: Optional[str] = None

    def complete(self, purpose: Purpose, system: str, prompt: str, obs: Observation) -> str:
        world, state = self.device.world, self.device.state
        if purpose is Purpose.DECISION:
            action = oracle_policy(world, state, self.goal)
            if isinstance(action, OpenApp):
                self.last_app = action.app_id
            return render_action(action)
        if purpose is Purpose.REFLECTION:
            if goal_check(world, state, self.goal):
                return f"STATUS: SUCCESS\nGoal '{self.goal.id}' is satisfied."
            return f"STATUS: FAILURE\nGoal '{self.goal.id}' is not satisfied yet."
        return self.last_app or ""


class PerfectLocator(LocatorBackend):
    def locate(self, obs: Observation, ui_command: str) -> BoundingBox:
        return perfect_locate(obs, ui_command)


class NoisyLocator(LocatorBackend):
    """Replaces the located box by a dead-space box with probability miss_prob."""

    def __init__(self, inner: LocatorBackend, stream: SplitMix64, injections: InjectionLog, miss_prob: float):
        self.inner = inner
        self.stream = stream
        self.injections = injections
        self.miss_prob = miss_prob

    def locate(self, obs: Observation, ui_command: str) -> BoundingBox:
        # draw before delegating so the stream advances once per call
        draw = self.stream.random()
        if draw < self.miss_prob:
            self.injections.record(LOCATOR, "miss", draw)
            return dead_space_box(obs)
        return self.inner.locate(obs, ui_command)


class NoisyReflection(MllmBackend):
    """Flips reflection verdicts with the configured probabilities."""

    def __init__(self, inner: MllmBackend, stream: SplitMix64, injections: InjectionLog,
                 false_success_prob: float, false_failure_prob: float):
        self.inner = inner
        self.stream = stream
        self.injections = injections
        self.false_success_prob = false_success_prob
        self.false_failure_prob = false_failure_prob

    def complete(self, purpose: Purpose, system: str, prompt: str, obs: Observation) -> str:
        raw = self.inner.complete(purpose, system, prompt, obs)
        if purpose is not Purpose.REFLECTION:
            return raw
        verdict = parse_reflection(raw)
        draw = self.stream.random()
        if verdict is None:
            return raw
        if verdict.success and draw < self.false_failure_prob:
            self.injections.record(REFLECTION, "false_failure", draw)
            return "STATUS: FAILURE\nThe task does not look complete."
        if not verdict.success and draw < self.false_success_prob:
            self.injections.record(REFLECTION, "false_success", draw)
            return "STATUS: SUCCESS\nThe task looks complete."
        return raw


class NoisyDecision(MllmBackend):
    """Substitutes a uniformly random action of a different type with probability wrong_prob."""

    def __init__(self, inner: MllmBackend, stream: SplitMix64, injections: InjectionLog,
                 wrong_prob: float, apps: Sequence[str]):
        self.inner = inner
        self.stream = stream
        self.injections = injections
        self.wrong_prob = wrong_prob
        self.apps = sorted(apps)
        self._pending_app: Optional[str] = None

    def _wrong_action(self, kind: ActionKind, obs: Observation):
        if kind is ActionKind.CLICK:
            elements = parse_screen(obs).get("elements", []) if obs.format_tag == SIMDESC else []
            if not elements:
                return Click("tap on element 'nothing'")
            element = self.stream.choice(sorted(elements, key=lambda e: e["id"]))
            return Click(f"tap on element '{element['id']}'")
        if kind is ActionKind.TYPE:
            return Type(self.stream.choice(WRONG_TEXTS))
        if kind is ActionKind.OPEN_APP and self.apps:
            app_id = self.stream.choice(self.apps)
            self._pending_app = app_id
            return OpenApp(app_id)
        return Swipe(self.stream.choice(list(Direction)))

    def complete(self, purpose: Purpose, system: str, prompt: str, obs: Observation) -> str:
        if purpose is Purpose.APP_SELECT and self._pending_app is not None:
            app_id, self._pending_app = self._pending_app, None
            return app_id
        raw = self.inner.complete(purpose, system, prompt, obs)
        if purpose is not Purpose.DECISION:
            return raw
        draw = self.stream.random()
        if draw >= self.wrong_prob:
            return raw
        try:
            intended = parse_decision(raw).kind
        except ParseError:
            return raw
        kinds = [kind for kind in ActionKind if kind is not intended]
        if not self.apps:
            kinds = [kind for kind in kinds if kind is not ActionKind.OPEN_APP]
        action = self._wrong_action(self.stream.choice(kinds), obs)
        self.injections.record(DECISION, f"wrong_{action.kind.value.lower()}", draw)
        return render_action(action)


def wrap_with_injection(mllm: MllmBackend, locator: LocatorBackend, injection: Optional[ErrorInjectionConfig],
                        episode_seed: int, apps: Sequence[str]):
    """Wrap backends with the configured injectors; returns (mllm, locator, log)."""
    injections = InjectionLog()
    if injection is None or not injection.active:
        return mllm, locator, injections
    if injection.locator_miss_prob > 0:
        locator = NoisyLocator(
            locator, component_stream(injection, episode_seed, LOCATOR), injections, injection.locator_miss_prob
        )
    if injection.reflection_false_success_prob > 0 or injection.reflection_false_failure_prob > 0:
        mllm = NoisyReflection(
            mllm,
            component_stream(injection, episode_seed, REFLECTION),
            injections,
            injection.reflection_false_success_prob,
            injection.reflection_false_failure_prob,
        )
    if injection.decision_wrong_action_prob > 0:
        mllm = NoisyDecision(
            mllm,
            component_stream(injection, episode_seed, DECISION),
            injections,
            injection.decision_wrong_action_prob,
            apps,
        )
    return mllm, locator, injections
