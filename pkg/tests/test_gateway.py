from unittest.mock import MagicMock

import pytest
import requests

from droidpilot.actions import BoundingBox, Click, Swipe, Direction, TaskSpec, VerdictStatus
from droidpilot.config import EndpointConfig
from droidpilot.errors import (
    AppSelectionError,
    MalformedBox,
    MissingPlaceholder,
    ModelRefusal,
    TransportError,
    UnparseableDecision,
)
from droidpilot.gateway import (
    UNPARSEABLE,
    LocatorClient,
    MllmClient,
    PromptBundle,
    Purpose,
    ScriptedMllm,
    decide,
    load_prompts,
    match_app,
    parse_locator_response,
    parse_reflection,
    reflect,
    render_decision_prompt,
    select_app,
)

TASK = TaskSpec("gen-008", "General", "Open the email with the subject 'Meeting Agenda'")


class TestPrompts:
    def test_anchoring_sentence_toggles(self, prompts):
        with_anchor = render_decision_prompt(prompts, TASK, "No actions taken yet.")
        without = render_decision_prompt(load_prompts(ocr_anchoring=False), TASK, "No actions taken yet.")
        assert prompts.anchoring_sentence in with_anchor
        assert prompts.anchoring_sentence not in without
        assert TASK.instruction in without and "{" + "history}" not in without

    def test_braces_in_task_text_survive(self, prompts):
        task = TaskSpec("x", "General", "Type {name} into the field")
        assert "Type {name} into the field" in render_decision_prompt(prompts, task, "")

    def test_missing_placeholder_rejected(self, prompts):
        with pytest.raises(MissingPlaceholder) as info:
            PromptBundle(
                prompts.system, "Task: {task}", prompts.reflection_template, prompts.app_select_template,
                prompts.correction_template, prompts.anchoring_sentence,
            )
        assert info.value.template == "decision"
        assert info.value.placeholder == "history"


class TestDecide:
    def test_first_reply_parses(self, prompts, png_obs):
        mllm = ScriptedMllm(["ACTION: SWIPE\nDIRECTION: up"])
        out = decide(mllm, TASK, "No actions taken yet.", png_obs, prompts)
        assert out.action == Swipe(Direction.UP)
        assert out.attempts == 1

    def test_reprompts_with_correction(self, prompts, png_obs):
        mllm = ScriptedMllm(["I am not sure", "ACTION: CLICK\nTARGET: the Meeting Agenda email"])
        out = decide(mllm, TASK, "No actions taken yet.", png_obs, prompts)
        assert out.action == Click("the Meeting Agenda email")
        assert out.attempts == 2
        second_prompt = mllm.calls[1][2]
        assert second_prompt.startswith(mllm.calls[0][2])
        assert "no_action_tag" in second_prompt

    def test_three_bad_replies(self, prompts, png_obs):
        mllm = ScriptedMllm(["nope", "ACTION: JUMP\nTARGET: x", "still nope"])
        with pytest.raises(UnparseableDecision) as info:
            decide(mllm, TASK, "", png_obs, prompts)
        assert info.value.attempts == 3

    def test_empty_reply_is_refusal(self, prompts, png_obs):
        with pytest.raises(ModelRefusal):
            decide(ScriptedMllm(["   "]), TASK, "", png_obs, prompts)


class TestReflect:
    def test_parse_status_and_rationale(self):
        verdict = parse_reflection("STATUS: SUCCESS\nThe Meeting Agenda email is open.")
        assert verdict.status is VerdictStatus.SUCCESS
        assert verdict.rationale == "The Meeting Agenda email is open."

    def test_markdown_and_case(self):
        assert parse_reflection("**Status:** failure - the inbox is still shown").status is VerdictStatus.FAILURE

    def test_no_status_line(self):
        assert parse_reflection("Looks good to me") is None

    def test_unparseable_after_retries_is_failure(self, prompts, png_obs):
        mllm = ScriptedMllm(["hmm", "maybe", "who knows"])
        out = reflect(mllm, TASK, "1. ACTION: SWIPE | DIRECTION: up | verdict: pending", png_obs, prompts)
        assert out.verdict.status is VerdictStatus.FAILURE
        assert out.verdict.rationale == UNPARSEABLE
        assert out.attempts == 3

    def test_retry_then_success(self, prompts, png_obs):
        mllm = ScriptedMllm({Purpose.REFLECTION: ["hmm", "STATUS: SUCCESS\ndone"]})
        out = reflect(mllm, TASK, "", png_obs, prompts)
        assert out.verdict.success and out.attempts == 2


class TestAppSelection:
    APPS = ["com.android.chrome", "com.android.settings", "com.google.android.gm"]

    @pytest.mark.parametrize(
        "reply, expected",
        [
            ("com.android.settings", "com.android.settings"),
            ("`com.google.android.gm`", "com.google.android.gm"),
            ("Gmail", "com.google.android.gm"),
            ("Chrome.", "com.android.chrome"),
            ("I would open Settings\nbecause the task is about settings", "com.android.settings"),
        ],
    )
    def test_matches(self, reply, expected):
        assert match_app(reply, self.APPS) == expected

    @pytest.mark.parametrize("reply", ["", "Calculator", "android"])
    def test_no_unique_match(self, reply):
        with pytest.raises(AppSelectionError):
            match_app(reply, self.APPS)

    def test_select_app_uses_app_select_purpose(self, prompts, png_obs):
        mllm = ScriptedMllm({Purpose.APP_SELECT: ["Chrome"]})
        assert select_app(mllm, TASK, self.APPS, png_obs, prompts) == "com.android.chrome"
        purpose, _system, prompt, _obs = mllm.calls[0]
        assert purpose is Purpose.APP_SELECT
        assert "com.google.android.gm" in prompt

    def test_empty_app_list(self, prompts, png_obs):
        with pytest.raises(ValueError):
            select_app(ScriptedMllm([]), TASK, [], png_obs, prompts)


class TestLocatorResponses:
    def test_norm_box(self, png_obs):
        body = {"x1": 0.1, "y1": 0.2, "x2": 0.3, "y2": 0.4}
        assert parse_locator_response(body, "norm_box", png_obs) == BoundingBox(0.1, 0.2, 0.3, 0.4)

    def test_pixel_box(self, png_obs):
        box = parse_locator_response({"bbox": [108, 192, 540, 960]}, "pixel_box", png_obs)
        assert box == BoundingBox(0.1, 0.1, 0.5, 0.5)

    def test_norm_point_is_zero_area(self, png_obs):
        assert parse_locator_response({"x": 0.5, "y": 0.25}, "norm_point", png_obs) == BoundingBox(0.5, 0.25, 0.5, 0.25)

    @pytest.mark.parametrize(
        "body",
        [{"x1": 0.1}, {"x1": 0.5, "y1": 0.2, "x2": 0.3, "y2": 0.4}, {"x1": 1.5, "y1": 0, "x2": 2, "y2": 1}, ["x"]],
    )
    def test_malformed(self, body, png_obs):
        with pytest.raises(MalformedBox):
            parse_locator_response(body, "norm_box", png_obs)


class TestMllmRetries:
    def endpoint(self, **kwargs):
        return EndpointConfig(base_url="http://mllm.test/v1", model_name="m", **kwargs)

    def test_backoff_doubles_then_raises(self, png_obs):
        session = MagicMock()
        session.post.side_effect = requests.exceptions.ConnectionError("refused")
        delays = []
        client = MllmClient(self.endpoint(max_retries=2, retry_backoff_ms=500), session, delays.append)
        with pytest.raises(TransportError) as info:
            client.complete(Purpose.DECISION, "sys", "prompt", png_obs)
        assert session.post.call_count == 3
        assert delays == [0.5, 1.0]
        assert info.value.attempts == 3

    def test_recovers_on_second_attempt(self, png_obs):
        good = MagicMock()
        good.json.return_value = {"choices": [{"message": {"content": "ACTION: SWIPE\nDIRECTION: up"}}]}
        session = MagicMock()
        session.post.side_effect = [requests.exceptions.Timeout("slow"), good]
        client = MllmClient(self.endpoint(), session, lambda _s: None)
        assert client.complete(Purpose.DECISION, "sys", "p", png_obs) == "ACTION: SWIPE\nDIRECTION: up"

    def test_missing_base_url(self):
        with pytest.raises(TransportError):
            MllmClient(EndpointConfig())


class TestSessions:
    def test_owned_session_closed(self):
        client = LocatorClient(EndpointConfig(base_url="http://locator.test"))
        client.session.close = MagicMock()
        client.close()
        client.session.close.assert_called_once_with()

    def test_shared_session_left_open(self):
        session = MagicMock()
        MllmClient(EndpointConfig(base_url="http://mllm.test/v1"), session).close()
        session.close.assert_not_called()
