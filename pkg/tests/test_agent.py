import logging
import time
from dataclasses import replace

import pytest

from droidpilot.actions import GENERAL, WEBSHOPPING, OutcomeKind, TaskSpec, TraceDevice
from droidpilot.agent import STEP_TIMEOUT, is_transport_failure, logical_clock, replay, run_episode
from droidpilot.config import LoopConfig
from droidpilot.device import SimDevice, bundled_worlds, open_sim_device
from droidpilot.errors import ReplayDivergence, ReplayUnsupported
from droidpilot.gateway import Purpose, ScriptedLocator, ScriptedMllm
from droidpilot.sim_models import OracleMllm, PerfectLocator
from droidpilot.simworld import goal_check, initial_state, shortest_distance
from droidpilot.trace_io import TRACE_FILE_NAME, write_trace
from droidpilot.utils import ns_to_ms

SWIPE_UP = "ACTION: SWIPE\nDIRECTION: up"
FAILURE = "STATUS: FAILURE\nnot done"
SUCCESS = "STATUS: SUCCESS\ndone"


def oracle_episode(world, goal_id, prompts, max_steps=12, reset=False, **kwargs):
    device = SimDevice(world, seed=11)
    if reset:
        device.reset_cache(["com.android.chrome"])
    subset = WEBSHOPPING if world.world_id == "shopping" else GENERAL
    task = TaskSpec(goal_id, subset, f"reach {goal_id}", goal_id)
    trace = run_episode(
        task,
        device,
        OracleMllm(device, world.goal(goal_id)),
        PerfectLocator(),
        LoopConfig(max_steps=max_steps),
        prompts,
        seed=11,
        **kwargs,
    )
    return trace, device


def scripted_episode(world, prompts, mllm, locator=None, max_steps=1, **kwargs):
    device = SimDevice(world)
    task = TaskSpec("scripted", GENERAL, "do something")
    return run_episode(
        task, device, mllm, locator or PerfectLocator(), LoopConfig(max_steps=max_steps), prompts, **kwargs
    )


class TestOracleEpisodes:
    @pytest.mark.parametrize("goal_id", ["open_settings", "network_settings", "send_to_bob", "usb_debugging"])
    def test_steps_equal_shortest_distance(self, general_world, prompts, goal_id):
        trace, device = oracle_episode(general_world, goal_id, prompts)
        goal = general_world.goal(goal_id)
        assert trace.succeeded
        assert len(trace.steps) == shortest_distance(general_world, initial_state(general_world), goal)
        assert goal_check(device.world, device.state, goal)
        assert [step.verdict.success for step in trace.steps][-1]
        assert not any(step.verdict.success for step in trace.steps[:-1])

    @pytest.mark.parametrize("name", bundled_worlds())
    def test_bundled_world_episode(self, name, prompts):
        device = open_sim_device(name, seed=3)
        goal_id = sorted(device.world.goals)[0]
        task = TaskSpec(goal_id, GENERAL, f"reach {goal_id}", goal_id)
        trace = run_episode(task, device, OracleMllm(device, device.world.goal(goal_id)), PerfectLocator(),
                            LoopConfig(max_steps=12), prompts, seed=3)
        assert trace.succeeded
        assert goal_check(device.world, device.state, device.world.goal(goal_id))

    def test_episode_start_names_the_device(self, general_world, prompts, caplog):
        caplog.set_level(logging.INFO, logger="droidpilot.agent_logger")
        oracle_episode(general_world, "open_settings", prompts)
        info = SimDevice(general_world).info()
        started = [r.getMessage() for r in caplog.records if "device=" in r.getMessage()]
        assert started == [
            f"[EPISODE] task=open_settings run=0 device=sim:{general_world.world_id} "
            f"screen={info.screen_w}x{info.screen_h}"
        ]

    def test_cookie_popup_costs_a_step(self, shopping_world, prompts):
        fresh, _ = oracle_episode(shopping_world, "open_webshop", prompts)
        reset, _ = oracle_episode(shopping_world, "open_webshop", prompts, reset=True)
        assert (len(fresh.steps), len(reset.steps)) == (2, 3)
        assert reset.device.cache_reset
        assert "chrome_cookie_popup" in reset.steps[0].post_obs.image_bytes.decode()

    def test_clicks_carry_box_and_point(self, general_world, prompts):
        trace, _ = oracle_episode(general_world, "open_settings", prompts)
        step = trace.steps[0]
        assert (step.tap_point.x, step.tap_point.y) == (162, 1632)
        assert step.locator_box is not None
        assert step.note is None

    def test_phase_timings(self, general_world, prompts):
        trace, _ = oracle_episode(general_world, "network_settings", prompts, clock=logical_clock())
        for step in trace.steps:
            assert (step.decide_ms, step.locate_ms, step.execute_ms, step.reflect_ms) == (1.0, 1.0, 1.0, 1.0)
        assert trace.total_ms == 11.0
        assert sum(step.phase_ms for step in trace.steps) <= trace.total_ms

    @pytest.mark.parametrize("make_clock", [logical_clock, lambda: time.perf_counter_ns])
    def test_phases_tile_each_step(self, general_world, prompts, make_clock):
        base = make_clock()
        readings, starts, totals = [], {}, {}

        def clock():
            readings.append(base())
            return readings[-1]

        def step_started(index):
            starts[index] = len(readings)

        def step_done(step):
            totals[step.index] = ns_to_ms(readings[-1] - readings[starts[step.index]])

        trace, _ = oracle_episode(general_world, "send_to_bob", prompts, clock=clock,
                                  on_step_start=step_started, on_step=step_done)
        assert len(totals) == len(trace.steps) == 5
        for step in trace.steps:
            assert abs(step.phase_ms - totals[step.index]) <= 1.0

    def test_step_timeout(self, general_world, prompts):
        device = SimDevice(general_world)
        task = TaskSpec("slow", GENERAL, "open network settings", "network_settings")
        trace = run_episode(
            task,
            device,
            OracleMllm(device, general_world.goal("network_settings")),
            PerfectLocator(),
            LoopConfig(max_steps=5, per_step_timeout_ms=2),
            prompts,
            clock=logical_clock(),
        )
        assert trace.outcome.kind is OutcomeKind.ERROR
        assert trace.outcome.phase == STEP_TIMEOUT
        assert len(trace.steps) == 1

    def test_record_dir(self, general_world, prompts, tmp_path):
        device = SimDevice(general_world)
        task = TaskSpec("rec", GENERAL, "open settings", "open_settings")
        run_episode(
            task,
            device,
            OracleMllm(device, general_world.goal("open_settings")),
            PerfectLocator(),
            LoopConfig(record_dir=str(tmp_path)),
            prompts,
            run_index=2,
        )
        assert (tmp_path / "rec" / "2" / TRACE_FILE_NAME).exists()


class TestRecoverableFailures:
    def test_locator_failure_is_noted(self, general_world, prompts):
        mllm = ScriptedMllm({
            Purpose.DECISION: ["ACTION: CLICK\nTARGET: tap on element 'Nowhere'"],
            Purpose.REFLECTION: [FAILURE],
        })
        trace = scripted_episode(general_world, prompts, mllm, ScriptedLocator({}))
        step = trace.steps[0]
        assert step.note.startswith("locate: MalformedBox")
        assert step.tap_point is None and step.locator_box is None
        assert step.pre_obs.digest == step.post_obs.digest
        assert trace.outcome.kind is OutcomeKind.BUDGET_EXHAUSTED

    def test_typing_without_focus_is_noted(self, general_world, prompts):
        mllm = ScriptedMllm({Purpose.DECISION: ["ACTION: TYPE\nTEXT: hello"], Purpose.REFLECTION: [FAILURE]})
        trace = scripted_episode(general_world, prompts, mllm)
        assert trace.steps[0].note.startswith("execute: NoFocusedField")

    def test_unmatched_app_is_noted(self, general_world, prompts):
        mllm = ScriptedMllm({
            Purpose.DECISION: ["ACTION: OPEN_APP\nAPP: camera"],
            Purpose.APP_SELECT: ["com.example.camera"],
            Purpose.REFLECTION: [FAILURE],
        })
        trace = scripted_episode(general_world, prompts, mllm)
        assert trace.steps[0].note.startswith("select_app:")
        assert trace.steps[0].launched_app is None

    def test_app_selection_launches(self, general_world, prompts):
        mllm = ScriptedMllm({
            Purpose.DECISION: ["ACTION: OPEN_APP\nAPP: mail"],
            Purpose.APP_SELECT: ["com.google.android.gm"],
            Purpose.REFLECTION: [SUCCESS],
        })
        trace = scripted_episode(general_world, prompts, mllm)
        assert trace.steps[0].launched_app == "com.google.android.gm"
        assert "gmail_inbox" in trace.steps[0].post_obs.image_bytes.decode()
        assert trace.succeeded

    def test_reprompt_after_unparseable_decision(self, general_world, prompts):
        mllm = ScriptedMllm({Purpose.DECISION: ["I would tap settings", SWIPE_UP], Purpose.REFLECTION: [SUCCESS]})
        trace = scripted_episode(general_world, prompts, mllm)
        assert trace.steps[0].decide_attempts == 2
        assert trace.succeeded


class TestAbortsAndBudget:
    def test_transport_failure_aborts(self, general_world, prompts):
        trace = scripted_episode(general_world, prompts, ScriptedMllm([]), max_steps=5)
        assert trace.outcome.kind is OutcomeKind.ERROR
        assert trace.outcome.phase == "decide"
        assert is_transport_failure(trace.outcome)
        assert trace.steps == ()

    def test_budget_exhausted(self, general_world, prompts):
        mllm = ScriptedMllm({Purpose.DECISION: [SWIPE_UP] * 3, Purpose.REFLECTION: [FAILURE] * 3})
        trace = scripted_episode(general_world, prompts, mllm, max_steps=3)
        assert trace.outcome.kind is OutcomeKind.BUDGET_EXHAUSTED
        assert len(trace.steps) == 3
        assert not is_transport_failure(trace.outcome)

    def test_history_reaches_the_models(self, general_world, prompts):
        mllm = ScriptedMllm({Purpose.DECISION: [SWIPE_UP] * 2, Purpose.REFLECTION: [FAILURE] * 2})
        scripted_episode(general_world, prompts, mllm, max_steps=2)
        decisions = [prompt for purpose, _, prompt, _ in mllm.calls if purpose is Purpose.DECISION]
        reflections = [prompt for purpose, _, prompt, _ in mllm.calls if purpose is Purpose.REFLECTION]
        assert "No actions taken yet." in decisions[0]
        assert "1. ACTION: SWIPE | DIRECTION: up | verdict: failure" in decisions[1]
        assert "1. ACTION: SWIPE | DIRECTION: up | verdict: pending" in reflections[0]

    def test_step_hooks(self, general_world, prompts):
        started, finished = [], []
        oracle_episode(general_world, "network_settings", prompts,
                       on_step_start=started.append, on_step=finished.append)
        assert started == [0, 1]
        assert [step.index for step in finished] == [0, 1]


class TestReplay:
    def test_replay_reproduces_digests(self, general_world, prompts):
        trace, _ = oracle_episode(general_world, "send_to_bob", prompts)
        replayed = replay(trace)
        assert [s.post_obs.digest for s in replayed.steps] == [s.post_obs.digest for s in trace.steps]

    def test_replay_from_disk_with_cache_reset(self, shopping_world, prompts, tmp_path):
        trace, _ = oracle_episode(shopping_world, "search_usb_cable", prompts, reset=True)
        write_trace(trace, tmp_path)
        assert len(replay(tmp_path).steps) == len(trace.steps)

    def test_tampered_tap_diverges(self, general_world, prompts):
        trace, _ = oracle_episode(general_world, "network_settings", prompts)
        first = replace(trace.steps[0], tap_point=None, locator_box=None, note="locate: dropped")
        tampered = replace(trace, steps=(first,) + trace.steps[1:])
        with pytest.raises(ReplayDivergence) as e:
            replay(tampered)
        assert e.value.step == 0

    def test_adb_traces_are_not_replayable(self, general_world, prompts):
        trace, _ = oracle_episode(general_world, "open_settings", prompts)
        with pytest.raises(ReplayUnsupported):
            replay(replace(trace, device=TraceDevice("adb", "emulator-5554")))
