"""Model interaction: prompt rendering, the chat-completions MLLM client, the locator
client and scripted backends for tests.
"""
import abc
import base64
import enum
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import requests

from droidpilot.actions import (
    Action,
    BoundingBox,
    Observation,
    TaskSpec,
    Verdict,
    VerdictStatus,
    parse_decision,
)
from droidpilot.config import EndpointConfig
from droidpilot.errors import (
    AppSelectionError,
    MalformedBox,
    MissingPlaceholder,
    ModelRefusal,
    ParseError,
    TransportError,
    UnparseableDecision,
)

# Module-level logger
log = logging.getLogger(__name__)

BUNDLED_PROMPTS_DIR = Path(__file__).resolve().parent / "prompts" / "v1"
MAX_PROMPT_ATTEMPTS = 3
UNPARSEABLE = "unparseable"


class Purpose(enum.Enum):
    DECISION = "decision"
    REFLECTION = "reflection"
    APP_SELECT = "app_select"


# Prompts

REQUIRED_PLACEHOLDERS = {
    "decision": ("task", "history", "anchoring"),
    "reflection": ("task", "history"),
    "app_select": ("task", "app_list"),
    "correction": ("error",),
}


@dataclass(frozen=True)
class PromptBundle:
    system: str
    decision_template: str
    reflection_template: str
    app_select_template: str
    correction_template: str
    anchoring_sentence: str
    ocr_anchoring: bool = True

    def __post_init__(self):
        templates = {
            "decision": self.decision_template,
            "reflection": self.reflection_template,
            "app_select": self.app_select_template,
            "correction": self.correction_template,
        }
        for name, placeholders in REQUIRED_PLACEHOLDERS.items():
            for placeholder in placeholders:
                if "{" + placeholder + "}" not in templates[name]:
                    raise MissingPlaceholder(name, placeholder)


def load_prompts(prompts_dir=None, ocr_anchoring: bool = True) -> PromptBundle:
    """Load system/decision/reflection/app_select/correction/anchoring templates."""
    directory = Path(prompts_dir) if prompts_dir else BUNDLED_PROMPTS_DIR

    def read(name: str) -> str:
        return (directory / f"{name}.txt").read_text(encoding="utf-8")

    return PromptBundle(
        system=read("system").strip(),
        decision_template=read("decision"),
        reflection_template=read("reflection"),
        app_select_template=read("app_select"),
        correction_template=read("correction"),
        anchoring_sentence=read("anchoring").strip(),
        ocr_anchoring=ocr_anchoring,
    )


def _fill(template: str, values: Dict[str, str]) -> str:
    # plain replacement keeps braces in task text intact
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def render_decision_prompt(prompts: PromptBundle, task: TaskSpec, history: str) -> str:
    anchoring = prompts.anchoring_sentence if prompts.ocr_anchoring else ""
    return _fill(prompts.decision_template, {"task": task.instruction, "history": history, "anchoring": anchoring})


def render_reflection_prompt(prompts: PromptBundle, task: TaskSpec, history: str) -> str:
    return _fill(prompts.reflection_template, {"task": task.instruction, "history": history})


def render_app_select_prompt(prompts: PromptBundle, task: TaskSpec, app_list: Sequence[str]) -> str:
    return _fill(prompts.app_select_template, {"task": task.instruction, "app_list": "\n".join(app_list)})


def render_correction(prompts: PromptBundle, error: Exception) -> str:
    return _fill(prompts.correction_template, {"error": str(error)})


# Backends


class MllmBackend(abc.ABC):
    @abc.abstractmethod
    def complete(self, purpose: Purpose, system: str, prompt: str, obs: Observation) -> str:
        """Return the completion text for one prompt plus one screenshot."""

    def close(self) -> None:
        """Release connections held by the backend."""


class LocatorBackend(abc.ABC):
    @abc.abstractmethod
    def locate(self, obs: Observation, ui_command: str) -> BoundingBox:
        """Return the normalized box of the element the command refers to."""

    def close(self) -> None:
        """Release connections held by the backend."""


def _post_with_retries(session, url: str, payload: dict, headers: dict, endpoint: EndpointConfig,
                       what: str, sleep: Callable[[float], None]) -> dict:
    """POST with bounded retries and exponential backoff; returns the decoded JSON body."""
    attempts = 1 + endpoint.max_retries
    retry_delay = endpoint.retry_backoff_ms / 1000
    last_error = None
    for attempt in range(attempts):
        try:
            response = session.post(url, json=payload, headers=headers, timeout=endpoint.timeout_ms / 1000)
            response.raise_for_status()
            return response.json()
        except (requests.exceptions.RequestException, ValueError) as e:
            last_error = e
            log.error(f"{what} request failed (attempt {attempt + 1}/{attempts}): {e}")
            if attempt < attempts - 1:
                sleep(retry_delay)
                retry_delay *= 2  # Exponential backoff
    raise TransportError(f"{what} at {url} failed: {last_error}", attempts)


class MllmClient(MllmBackend):
    """OpenAI-compatible chat-completions client"""

    def __init__(self, endpoint: EndpointConfig, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        if not endpoint.base_url:
            raise TransportError("MLLM base_url is not configured (set MLLM_BASE_URL)", 0)
        self.endpoint = endpoint
        self._owns_session = session is None
        self.session = session or requests.Session()
        self.sleep = sleep

    def close(self) -> None:
        if self._owns_session:
            self.session.close()

    def build_payload(self, system: str, prompt: str, obs: Observation) -> dict:
        image = base64.b64encode(obs.image_bytes).decode("ascii")
        return {
            "model": self.endpoint.model_name,
            "temperature": self.endpoint.temperature,
            "messages": [
                {"role": "system", "content": system},
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": f"data:image/{obs.format_tag};base64,{image}"}},
                    ],
                },
            ],
        }

    def complete(self, purpose: Purpose, system: str, prompt: str, obs: Observation) -> str:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        url = f"{self.endpoint.base_url.rstrip('/')}/chat/completions"
        body = _post_with_retries(
            self.session, url, self.build_payload(system, prompt, obs), headers, self.endpoint,
            f"MLLM {purpose.value}", self.sleep,
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TransportError(f"MLLM response has no choices[0].message.content: {body!r}")
        if isinstance(content, list):
            content = "\n".join(
                str(part.get("text", "")) for part in content
                if isinstance(part, dict) and part.get("type") in ("text", "output_text")
            )
        if not isinstance(content, str) or not content.strip():
            raise ModelRefusal(f"empty {purpose.value} completion")
        return content


def parse_locator_response(body, response_format: str, obs: Observation) -> BoundingBox:
    """Turn a locator response into a normalized BoundingBox."""
    try:
        if response_format == "norm_box":
            values = [float(body[key]) for key in ("x1", "y1", "x2", "y2")]
        elif response_format == "pixel_box":
            x1, y1, x2, y2 = (float(v) for v in body["bbox"])
            values = [x1 / obs.screen_w, y1 / obs.screen_h, x2 / obs.screen_w, y2 / obs.screen_h]
        elif response_format == "norm_point":
            x, y = float(body["x"]), float(body["y"])
            values = [x, y, x, y]
        else:
            raise MalformedBox(f"unknown locator response format {response_format!r}")
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedBox(f"locator response {body!r} does not match {response_format}: {e}")
    try:
        return BoundingBox(*values)
    except ValueError as e:
        raise MalformedBox(str(e))


class LocatorClient(LocatorBackend):
    """Client for a UI location endpoint: POST {base_url}/locate"""

    def __init__(self, endpoint: EndpointConfig, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        if not endpoint.base_url:
            raise TransportError("locator base_url is not configured (set LOCATOR_BASE_URL)", 0)
        self.endpoint = endpoint
        self._owns_session = session is None
        self.session = session or requests.Session()
        self.sleep = sleep

    def close(self) -> None:
        if self._owns_session:
            self.session.close()

    def locate(self, obs: Observation, ui_command: str) -> BoundingBox:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        payload = {"image_b64": base64.b64encode(obs.image_bytes).decode("ascii"), "command": ui_command}
        url = f"{self.endpoint.base_url.rstrip('/')}/locate"
        body = _post_with_retries(self.session, url, payload, headers, self.endpoint, "Locator", self.sleep)
        return parse_locator_response(body, self.endpoint.response_format, obs)


Scripted = Union[str, Exception]


class ScriptedMllm(MllmBackend):
    """Replays canned completions; an Exception entry is raised instead of returned.

    script is either one list shared by all purposes or a dict keyed by Purpose.
    """

    def __init__(self, script: Union[Iterable[Scripted], Dict[Purpose, Iterable[Scripted]]]):
        if isinstance(script, dict):
            self.queues = {purpose: list(items) for purpose, items in script.items()}
            self.shared = None
        else:
            self.queues = {}
            self.shared = list(script)
        self.calls: List[tuple] = []

    def complete(self, purpose: Purpose, system: str, prompt: str, obs: Observation) -> str:
        self.calls.append((purpose, system, prompt, obs))
        queue = self.shared if self.shared is not None else self.queues.get(purpose, [])
        if not queue:
            raise TransportError(f"scripted MLLM has no {purpose.value} response left")
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        if not item.strip():
            raise ModelRefusal(f"empty {purpose.value} completion")
        return item


class ScriptedLocator(LocatorBackend):
    def __init__(self, boxes: Dict[str, BoundingBox]):
        self.boxes = dict(boxes)
        self.calls: List[str] = []

    def locate(self, obs: Observation, ui_command: str) -> BoundingBox:
        self.calls.append(ui_command)
        try:
            return self.boxes[ui_command]
        except KeyError:
            raise MalformedBox(f"no scripted box for command {ui_command!r}")


# Operations


@dataclass(frozen=True)
class DecisionOutput:
    action: Action
    raw: str
    attempts: int = 1


@dataclass(frozen=True)
class ReflectionOutput:
    verdict: Verdict
    raw: str
    attempts: int = 1


def decide(mllm: MllmBackend, task: TaskSpec, history: str, obs: Observation,
           prompts: PromptBundle) -> DecisionOutput:
    """Ask for the next action, re-prompting with a correction after unparseable replies."""
    base = render_decision_prompt(prompts, task, history)
    prompt = base
    last_error: Optional[ParseError] = None
    for attempt in range(1, MAX_PROMPT_ATTEMPTS + 1):
        raw = mllm.complete(Purpose.DECISION, prompts.system, prompt, obs)
        try:
            return DecisionOutput(parse_decision(raw), raw, attempt)
        except ParseError as e:
            last_error = e
            log.warning(f"Unparseable decision (attempt {attempt}/{MAX_PROMPT_ATTEMPTS}): {e}")
            prompt = f"{base}\n\n{render_correction(prompts, e)}"
    raise UnparseableDecision(MAX_PROMPT_ATTEMPTS, last_error)


_STATUS_LINE = re.compile(r"^\s*STATUS\s*:\s*(SUCCESS|FAILURE)\b[\s.!]*(.*)$", re.IGNORECASE)


def parse_reflection(raw: str) -> Optional[Verdict]:
    lines = raw.split("\n")
    for i, line in enumerate(lines):
        match = _STATUS_LINE.match(line.replace("*", "").replace("`", ""))
        if match is None:
            continue
        status = VerdictStatus(match.group(1).lower())
        rest = [match.group(2).strip()] + [other.strip() for j, other in enumerate(lines) if j != i]
        return Verdict(status, "\n".join(part for part in rest if part))
    return None


def reflect(mllm: MllmBackend, task: TaskSpec, history: str, obs: Observation,
            prompts: PromptBundle) -> ReflectionOutput:
    """Ask whether the task is complete; unparseable after all attempts means failure."""
    prompt = render_reflection_prompt(prompts, task, history)
    raw = ""
    for attempt in range(1, MAX_PROMPT_ATTEMPTS + 1):
        raw = mllm.complete(Purpose.REFLECTION, prompts.system, prompt, obs)
        verdict = parse_reflection(raw)
        if verdict is not None:
            return ReflectionOutput(verdict, raw, attempt)
        log.warning(f"Reflection without STATUS line (attempt {attempt}/{MAX_PROMPT_ATTEMPTS})")
    return ReflectionOutput(Verdict(VerdictStatus.FAILURE, UNPARSEABLE), raw, MAX_PROMPT_ATTEMPTS)


# dot-segments too common to identify an app
_SEGMENT_STOPLIST = {"com", "org", "net", "android", "google", "app", "apps"}


def _clean_reply(raw: str) -> str:
    for line in raw.split("\n"):
        if line.strip():
            return line.strip().strip("`'\"*.,:; ").strip()
    return ""


def match_app(reply: str, app_list: Sequence[str]) -> str:
    """Exact id match, else a unique fuzzy match of the reply against the ids."""
    cleaned = _clean_reply(reply)
    if cleaned in app_list:
        return cleaned
    lowered = cleaned.lower()
    if not lowered:
        raise AppSelectionError("empty app selection reply")

    matches = []
    for app_id in app_list:
        candidate = app_id.lower()
        segments = [s for s in candidate.split(".") if len(s) >= 2 and s not in _SEGMENT_STOPLIST]
        if candidate in lowered or lowered in candidate or any(s in lowered for s in segments):
            matches.append(app_id)
    if len(matches) != 1:
        raise AppSelectionError(f"reply {cleaned!r} matches {len(matches)} apps: {matches}")
    return matches[0]


def select_app(mllm: MllmBackend, task: TaskSpec, app_list: Sequence[str], obs: Observation,
               prompts: PromptBundle) -> str:
    if not app_list:
        raise ValueError("select_app needs a non-empty app list")
    raw = mllm.complete(Purpose.APP_SELECT, prompts.system, render_app_select_prompt(prompts, task, app_list), obs)
    return match_app(raw, app_list)


def locate(locator: LocatorBackend, obs: Observation, ui_command: str) -> BoundingBox:
    box = locator.locate(obs, ui_command)
    if not isinstance(box, BoundingBox):
        raise MalformedBox(f"locator returned {box!r}")
    return box
