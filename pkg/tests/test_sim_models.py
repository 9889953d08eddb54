import pytest

from droidpilot.actions import ActionKind, BoundingBox, OpenApp, parse_decision
from droidpilot.device import SimDevice
from droidpilot.gateway import Purpose, ScriptedMllm, parse_reflection
from droidpilot.sim_models import (
    DECISION,
    LOCATOR,
    REFLECTION,
    InjectionLog,
    NoisyDecision,
    NoisyLocator,
    NoisyReflection,
    OracleMllm,
    PerfectLocator,
    component_stream,
    wrap_with_injection,
)
from droidpilot.simworld import ErrorInjectionConfig, SplitMix64, dead_space_box, initial_state, render_screen

SETTINGS_BOX = BoundingBox(0.05, 0.80, 0.25, 0.90)


@pytest.fixture
def home_obs(general_world):
    return render_screen(general_world, initial_state(general_world))


class TestNoisyLocator:
    def test_misses_follow_the_stream(self, home_obs):
        # seed 0 draws: 0.883, 0.431, 0.026, 0.971
        injections = InjectionLog()
        locator = NoisyLocator(PerfectLocator(), SplitMix64(0), injections, 0.5)
        boxes = []
        for step in range(4):
            injections.start_step(step)
            boxes.append(locator.locate(home_obs, "tap on element 'Settings'"))
        dead = dead_space_box(home_obs)
        assert boxes == [SETTINGS_BOX, dead, dead, SETTINGS_BOX]
        assert [(e.step, e.component, e.kind) for e in injections.entries] == [
            (1, LOCATOR, "miss"),
            (2, LOCATOR, "miss"),
        ]
        assert injections.first().draw == pytest.approx(0.431, abs=1e-3)
        assert len(injections) == 2

    def test_zero_probability_never_misses(self, home_obs):
        injections = InjectionLog()
        locator = NoisyLocator(PerfectLocator(), SplitMix64(7), injections, 0.0)
        for _ in range(50):
            assert locator.locate(home_obs, "tap on element 'Settings'") == SETTINGS_BOX
        assert injections.first() is None


class TestNoisyReflection:
    def test_false_failure(self, home_obs):
        inner = ScriptedMllm(["STATUS: SUCCESS\ndone"] * 3)
        injections = InjectionLog()
        mllm = NoisyReflection(inner, SplitMix64(0), injections, 0.0, 0.5)
        verdicts = [parse_reflection(mllm.complete(Purpose.REFLECTION, "", "", home_obs)) for _ in range(3)]
        assert [v.success for v in verdicts] == [True, False, False]
        assert [e.kind for e in injections.entries] == ["false_failure", "false_failure"]
        assert all(e.component == REFLECTION for e in injections.entries)

    def test_false_success(self, home_obs):
        inner = ScriptedMllm(["STATUS: FAILURE\nnot yet"])
        injections = InjectionLog()
        mllm = NoisyReflection(inner, SplitMix64(0), injections, 1.0, 0.0)
        assert parse_reflection(mllm.complete(Purpose.REFLECTION, "", "", home_obs)).success
        assert injections.entries[0].kind == "false_success"

    def test_decisions_pass_through(self, home_obs):
        inner = ScriptedMllm(["ACTION: SWIPE\nDIRECTION: up"])
        mllm = NoisyReflection(inner, SplitMix64(0), InjectionLog(), 1.0, 1.0)
        assert mllm.complete(Purpose.DECISION, "", "", home_obs) == "ACTION: SWIPE\nDIRECTION: up"


class TestNoisyDecision:
    def test_substitutes_a_different_kind(self, home_obs):
        apps = ["com.android.settings", "com.google.android.gm"]
        for seed in range(40):
            inner = ScriptedMllm(["ACTION: CLICK\nTARGET: tap on element 'Settings'"])
            injections = InjectionLog()
            mllm = NoisyDecision(inner, SplitMix64(seed), injections, 1.0, apps)
            action = parse_decision(mllm.complete(Purpose.DECISION, "", "", home_obs))
            assert action.kind is not ActionKind.CLICK
            assert injections.entries[0].component == DECISION
            assert injections.entries[0].kind == f"wrong_{action.kind.value.lower()}"
            if isinstance(action, OpenApp):
                assert action.app_id in apps
                assert mllm.complete(Purpose.APP_SELECT, "", "", home_obs) == action.app_id

    def test_no_apps_means_no_open_app(self, home_obs):
        for seed in range(40):
            inner = ScriptedMllm(["ACTION: SWIPE\nDIRECTION: up"])
            mllm = NoisyDecision(inner, SplitMix64(seed), InjectionLog(), 1.0, [])
            kind = parse_decision(mllm.complete(Purpose.DECISION, "", "", home_obs)).kind
            assert kind not in (ActionKind.SWIPE, ActionKind.OPEN_APP)


class TestOracle:
    def test_decision_and_reflection(self, general_world, home_obs):
        device = SimDevice(general_world)
        oracle = OracleMllm(device, general_world.goal("open_settings"))
        decision = oracle.complete(Purpose.DECISION, "", "", home_obs)
        assert decision == "ACTION: CLICK\nTARGET: tap on element 'Settings'"
        assert oracle.complete(Purpose.REFLECTION, "", "", home_obs).startswith("STATUS: FAILURE")
        device.launch_app("com.android.settings")
        assert oracle.complete(Purpose.REFLECTION, "", "", home_obs) == (
            "STATUS: SUCCESS\nGoal 'open_settings' is satisfied."
        )

    def test_app_select_repeats_last_open_app(self, general_world, home_obs):
        oracle = OracleMllm(SimDevice(general_world), general_world.goal("open_gmail"))
        assert oracle.complete(Purpose.APP_SELECT, "", "", home_obs) == ""


class TestWrapping:
    def test_inactive_returns_backends_unchanged(self):
        mllm, locator = ScriptedMllm([]), PerfectLocator()
        wrapped_mllm, wrapped_locator, injections = wrap_with_injection(
            mllm, locator, ErrorInjectionConfig(), 1, []
        )
        assert wrapped_mllm is mllm and wrapped_locator is locator
        assert len(injections) == 0

    def test_each_component_gets_its_own_stream(self):
        injection = ErrorInjectionConfig(
            locator_miss_prob=0.2,
            reflection_false_failure_prob=0.2,
            decision_wrong_action_prob=0.2,
            seed=99,
        )
        mllm, locator, injections = wrap_with_injection(ScriptedMllm([]), PerfectLocator(), injection, 5, [])
        assert isinstance(locator, NoisyLocator)
        assert isinstance(mllm, NoisyDecision)
        assert isinstance(mllm.inner, NoisyReflection)
        assert locator.injections is injections is mllm.injections is mllm.inner.injections
        firsts = {
            name: component_stream(injection, 5, name).next_u64() for name in (DECISION, LOCATOR, REFLECTION)
        }
        assert len(set(firsts.values())) == 3
        assert locator.stream.next_u64() == firsts[LOCATOR]
