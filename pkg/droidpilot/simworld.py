"""Deterministic simulated GUI device.

A world is a declarative YAML document of screens, elements, transition rules, apps and
goals. WorldState is an immutable value; every apply_* function returns a new state.
"""
import enum
import json
import logging
import re
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import yaml

from droidpilot.actions import (
    Action,
    BoundingBox,
    Click,
    Direction,
    Observation,
    OpenApp,
    Point,
    Swipe,
    Type,
    bbox_center,
    render_action,
)
from droidpilot.errors import (
    ElementNotFound,
    NoFocusedField,
    UnknownApp,
    Unreachable,
    WorldFileError,
)
from droidpilot.utils import canonical_json

# Module-level logger
log = logging.getLogger(__name__)

WORLD_SCHEMA_VERSION = "1"
SIMDESC = "simdesc"
BUNDLED_WORLDS_DIR = Path(__file__).resolve().parent / "worlds"

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood; reference constants from Vigna's splitmix64.c).

    state += 0x9E3779B97F4A7C15; z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs a positive bound")
        return self.next_u64() % n

    def choice(self, items):
        return items[self.randrange(len(items))]


@dataclass(frozen=True)
class ErrorInjectionConfig:
    # Probabilities, each in [0, 1]
    locator_miss_prob: float = 0.0  # locator answers with a dead-space box
    reflection_false_success_prob: float = 0.0  # failure verdict flipped to success
    reflection_false_failure_prob: float = 0.0  # success verdict flipped to failure
    decision_wrong_action_prob: float = 0.0  # decision replaced by a wrong-typed action

    seed: int = 0

    def __post_init__(self):
        for name in (
            "locator_miss_prob",
            "reflection_false_success_prob",
            "reflection_false_failure_prob",
            "decision_wrong_action_prob",
        ):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value!r}")
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"injection seed {self.seed} is not a 64-bit unsigned integer")

    @property
    def active(self) -> bool:
        return any(
            (
                self.locator_miss_prob,
                self.reflection_false_success_prob,
                self.reflection_false_failure_prob,
                self.decision_wrong_action_prob,
            )
        )


class Role(enum.Enum):
    BUTTON = "button"
    LINK = "link"
    TEXT_FIELD = "text_field"
    ICON = "icon"
    LIST_ITEM = "list_item"


@dataclass(frozen=True)
class Element:
    id: str
    box: BoundingBox
    text_label: str
    role: Role


@dataclass(frozen=True)
class ScreenNode:
    id: str
    pages: tuple
    app: Optional[str] = None
    focused_field: Optional[str] = None

    @property
    def page_count(self) -> int:
        return len(self.pages)

    def element(self, element_id: str) -> Optional[Element]:
        for page in self.pages:
            for element in page:
                if element.id == element_id:
                    return element
        return None

    def page_of(self, element_id: str) -> Optional[int]:
        for index, page in enumerate(self.pages):
            if any(element.id == element_id for element in page):
                return index
        return None


class TriggerKind(enum.Enum):
    TAP = "tap"
    TYPE_SUBMIT = "type_submit"
    SWIPE = "swipe"
    LAUNCH = "launch"


@dataclass(frozen=True)
class Guard:
    cache_cleared: Optional[bool] = None

    def holds(self, state: "WorldState") -> bool:
        return self.cache_cleared is None or state.cache_cleared == self.cache_cleared


@dataclass(frozen=True)
class Target:
    screen: Optional[str] = None
    focus: Optional[str] = None
    set_buffers: tuple = ()
    set_cache_cleared: Optional[bool] = None


@dataclass(frozen=True)
class TransitionRule:
    trigger: TriggerKind
    subject: str
    target: Target
    on: Optional[str] = None
    guard: Guard = Guard()
    equals: Optional[str] = None
    contains: Optional[str] = None

    def text_matches(self, text: str) -> bool:
        if self.equals is not None:
            return text == self.equals
        if self.contains is not None:
            return self.contains.lower() in text.lower()
        return True


class GoalKind(enum.Enum):
    REACH = "reach"
    BUFFER = "buffer"
    FOREGROUND = "foreground"
    ALL = "all"


@dataclass(frozen=True)
class GoalPredicate:
    kind: GoalKind
    screen: Optional[str] = None
    element: Optional[str] = None
    equals: Optional[str] = None
    app: Optional[str] = None
    parts: tuple = ()


@dataclass(frozen=True)
class SimGoal:
    id: str
    predicate: GoalPredicate


@dataclass(frozen=True)
class World:
    world_id: str
    screen_w: int
    screen_h: int
    home: str
    screens: Dict[str, ScreenNode]
    apps: Dict[str, str]
    rules: tuple
    goals: Dict[str, SimGoal]
    initial_cache_cleared: bool = False
    path: Optional[str] = None

    def __hash__(self):
        return hash((self.world_id, self.path))

    def goal(self, goal_id: str) -> SimGoal:
        try:
            return self.goals[goal_id]
        except KeyError:
            raise KeyError(f"world '{self.world_id}' has no goal '{goal_id}'")


@dataclass(frozen=True)
class WorldState:
    current_screen: str
    scroll_page: int = 0
    buffers: tuple = ()
    installed_apps: tuple = ()
    cache_cleared: bool = False
    rng_seed: int = 0
    focused_field: Optional[str] = None

    def buffer(self, element_id: str) -> str:
        for key, text in self.buffers:
            if key == element_id:
                return text
        return ""

    def with_buffer(self, element_id: str, text: str) -> "WorldState":
        buffers = dict(self.buffers)
        buffers[element_id] = text
        return replace(self, buffers=tuple(sorted(buffers.items())))


# Transitions


def initial_state(world: World, seed: int = 0) -> WorldState:
    home = world.screens[world.home]
    return WorldState(
        current_screen=world.home,
        installed_apps=tuple(sorted(world.apps.items())),
        cache_cleared=world.initial_cache_cleared,
        rng_seed=seed,
        focused_field=home.focused_field,
    )


def visible_elements(world: World, state: WorldState) -> tuple:
    return world.screens[state.current_screen].pages[state.scroll_page]


def _enter_screen(world: World, state: WorldState, screen_id: str) -> WorldState:
    screen = world.screens[screen_id]
    return replace(state, current_screen=screen_id, scroll_page=0, focused_field=screen.focused_field)


def _apply_target(world: World, state: WorldState, target: Target) -> WorldState:
    if target.screen is not None:
        state = _enter_screen(world, state, target.screen)
    if target.focus is not None:
        state = replace(state, focused_field=target.focus)
    for element_id, text in target.set_buffers:
        state = state.with_buffer(element_id, text)
    if target.set_cache_cleared is not None:
        state = replace(state, cache_cleared=target.set_cache_cleared)
    return state


def _first_rule(world: World, state: WorldState, trigger: TriggerKind, subject: str,
                on: Optional[str]) -> Optional[TransitionRule]:
    for rule in world.rules:
        if rule.trigger is trigger and rule.subject == subject and rule.on == on and rule.guard.holds(state):
            return rule
    return None


def hit_element(world: World, state: WorldState, point: Point) -> Optional[Element]:
    """Smallest visible element under the point (ties by id)."""
    nx = point.x / point.screen_w
    ny = point.y / point.screen_h
    hits = [element for element in visible_elements(world, state) if element.box.contains(nx, ny)]
    if not hits:
        return None

    def area(element: Element) -> float:
        return (element.box.x2 - element.box.x1) * (element.box.y2 - element.box.y1)

    return min(hits, key=lambda element: (area(element), element.id))


def apply_tap(world: World, state: WorldState, point: Point) -> WorldState:
    element = hit_element(world, state, point)
    if element is None:
        return state
    rule = _first_rule(world, state, TriggerKind.TAP, element.id, state.current_screen)
    if rule is None:
        return state
    return _apply_target(world, state, rule.target)


def apply_swipe(world: World, state: WorldState, direction: Direction) -> WorldState:
    rule = _first_rule(world, state, TriggerKind.SWIPE, direction.value, state.current_screen)
    if rule is not None:
        return _apply_target(world, state, rule.target)
    if direction not in (Direction.UP, Direction.DOWN):
        return state

    page_count = world.screens[state.current_screen].page_count
    step = 1 if direction is Direction.UP else -1
    page = max(0, min(page_count - 1, state.scroll_page + step))
    if page == state.scroll_page:
        return state
    focused = state.focused_field
    if focused is not None and world.screens[state.current_screen].page_of(focused) != page:
        focused = None
    return replace(state, scroll_page=page, focused_field=focused)


def apply_type(world: World, state: WorldState, text: str) -> WorldState:
    focused = state.focused_field
    if focused is None:
        raise NoFocusedField(f"no focused text field on screen '{state.current_screen}'")
    state = state.with_buffer(focused, state.buffer(focused) + text)
    for rule in world.rules:
        if (
            rule.trigger is TriggerKind.TYPE_SUBMIT
            and rule.on == state.current_screen
            and rule.subject == focused
            and rule.guard.holds(state)
            and rule.text_matches(state.buffer(focused))
        ):
            return _apply_target(world, state, rule.target)
    return state


def apply_launch(world: World, state: WorldState, app_id: str) -> WorldState:
    if app_id not in dict(state.installed_apps):
        raise UnknownApp(f"app '{app_id}' is not installed in world '{world.world_id}'")
    rule = _first_rule(world, state, TriggerKind.LAUNCH, app_id, None)
    if rule is not None:
        return _apply_target(world, state, rule.target)
    return _enter_screen(world, state, dict(state.installed_apps)[app_id])


def reset_cache(state: WorldState) -> WorldState:
    """Clearing app caches re-enables first-run screens."""
    return replace(state, cache_cleared=True)


def foreground_app(world: World, state: WorldState) -> Optional[str]:
    return world.screens[state.current_screen].app


# Observations


def render_screen(world: World, state: WorldState, captured_at: float = 0.0) -> Observation:
    """Canonical serialization of the visible page, elements sorted by id."""
    elements = []
    for element in sorted(visible_elements(world, state), key=lambda e: e.id):
        entry = {
            "id": element.id,
            "box": element.box.dumps(),
            "text": element.text_label,
            "role": element.role.value,
        }
        if element.role is Role.TEXT_FIELD:
            entry["value"] = state.buffer(element.id)
        elements.append(entry)
    description = {
        "world": world.world_id,
        "screen": state.current_screen,
        "app": foreground_app(world, state),
        "page": state.scroll_page,
        "page_count": world.screens[state.current_screen].page_count,
        "focused": state.focused_field,
        "elements": elements,
    }
    return Observation(
        image_bytes=canonical_json(description).encode("utf-8"),
        format_tag=SIMDESC,
        screen_w=world.screen_w,
        screen_h=world.screen_h,
        captured_at=captured_at,
    )


def parse_screen(obs: Observation) -> dict:
    if obs.format_tag != SIMDESC:
        raise ValueError(f"not a simulated screen: format_tag={obs.format_tag}")
    return json.loads(obs.image_bytes.decode("utf-8"))


# Goals


def check_predicate(world: World, state: WorldState, predicate: GoalPredicate) -> bool:
    if predicate.kind is GoalKind.REACH:
        return state.current_screen == predicate.screen
    if predicate.kind is GoalKind.BUFFER:
        return state.buffer(predicate.element) == predicate.equals
    if predicate.kind is GoalKind.FOREGROUND:
        return foreground_app(world, state) == predicate.app
    return all(check_predicate(world, state, part) for part in predicate.parts)


def goal_check(world: World, state: WorldState, goal: SimGoal) -> bool:
    return check_predicate(world, state, goal.predicate)


def _buffer_targets(predicate: GoalPredicate) -> Iterable[Tuple[str, str]]:
    if predicate.kind is GoalKind.BUFFER:
        yield predicate.element, predicate.equals
    for part in predicate.parts:
        yield from _buffer_targets(part)


# Oracle


def click_command(element: Element, page: Iterable[Element]) -> str:
    """UI command naming an element by its label, or by id when the label is ambiguous."""
    page = list(page)
    label = element.text_label.strip()
    ids = {other.id for other in page}
    same_label = [other for other in page if other.text_label.strip() == label]
    if label and len(same_label) == 1 and (label not in ids or label == element.id):
        return f"tap on element '{label}'"
    return f"tap on element '{element.id}'"


def successors(world: World, state: WorldState, goal: Optional[SimGoal] = None) -> List[Tuple[Action, WorldState]]:
    """Every state-changing action from state, sorted by rendered action text."""
    found: Dict[str, Tuple[Action, WorldState]] = {}

    def offer(action: Action, next_state: WorldState):
        if next_state != state:
            found.setdefault(render_action(action), (action, next_state))

    page = visible_elements(world, state)
    for element in page:
        point = bbox_center(element.box, world.screen_w, world.screen_h)
        offer(Click(click_command(element, page)), apply_tap(world, state, point))

    focused = state.focused_field
    if focused is not None:
        current = state.buffer(focused)
        wanted = []
        for rule in world.rules:
            if rule.trigger is TriggerKind.TYPE_SUBMIT and rule.on == state.current_screen and rule.subject == focused:
                if rule.equals is not None:
                    wanted.append(rule.equals)
                elif rule.contains is not None:
                    wanted.append(current + rule.contains)
        if goal is not None:
            wanted.extend(text for element_id, text in _buffer_targets(goal.predicate) if element_id == focused)
        for text in wanted:
            if text.startswith(current):
                remainder = text[len(current):]
                if remainder.strip() and "\n" not in remainder:
                    offer(Type(remainder), apply_type(world, state, remainder))

    for direction in Direction:
        offer(Swipe(direction), apply_swipe(world, state, direction))

    for app_id, _root in state.installed_apps:
        offer(OpenApp(app_id), apply_launch(world, state, app_id))

    return [found[key] for key in sorted(found)]


def shortest_path(world: World, state: WorldState, goal: SimGoal, max_depth: int = 64) -> List[Action]:
    """Lexicographically first shortest action sequence reaching the goal."""
    if goal_check(world, state, goal):
        return []
    queue = deque([(state, [])])
    visited = {state}
    while queue:
        current, path = queue.popleft()
        if len(path) >= max_depth:
            continue
        for action, next_state in successors(world, current, goal):
            if next_state in visited:
                continue
            next_path = path + [action]
            if goal_check(world, next_state, goal):
                return next_path
            visited.add(next_state)
            queue.append((next_state, next_path))
    raise Unreachable(f"goal '{goal.id}' is unreachable from screen '{state.current_screen}'")


def shortest_distance(world: World, state: WorldState, goal: SimGoal) -> int:
    return len(shortest_path(world, state, goal))


def oracle_policy(world: World, state: WorldState, goal: SimGoal) -> Action:
    """First action of the lexicographically first shortest path to the goal."""
    if goal_check(world, state, goal):
        options = successors(world, state, goal)
        if not options:
            raise Unreachable(f"no action available on screen '{state.current_screen}'")
        for action, next_state in options:
            if goal_check(world, next_state, goal):
                return action
        return options[0][0]
    return shortest_path(world, state, goal)[0]


# Locating elements on simulated screens

_QUOTED = re.compile(r"'(.*)'")


def _screen_elements(description: dict) -> List[dict]:
    return sorted(description.get("elements", []), key=lambda e: e["id"])


def perfect_locate(obs: Observation, ui_command: str) -> BoundingBox:
    """Box of the element a command names, by id or exact label on the visible page."""
    elements = _screen_elements(parse_screen(obs))
    quoted = _QUOTED.search(ui_command)
    if quoted:
        name = quoted.group(1).strip()
        for key in ("id", "text"):
            for element in elements:
                if element[key] and element[key] == name:
                    return BoundingBox(*element["box"])

    # fall back to the longest label or id mentioned in the command
    lowered = ui_command.lower()
    best = None
    for element in elements:
        for name in (element["text"], element["id"]):
            if name and name.lower() in lowered:
                if best is None or len(name) > best[0]:
                    best = (len(name), element)
    if best is not None:
        return BoundingBox(*best[1]["box"])
    raise ElementNotFound(f"no visible element matches command {ui_command!r}")


DEAD_SPACE_GRID = 20


def dead_space_box(obs: Observation) -> BoundingBox:
    """Zero-area box whose tap point lands on no visible element."""
    boxes = [BoundingBox(*element["box"]) for element in _screen_elements(parse_screen(obs))]
    for row in range(DEAD_SPACE_GRID):
        for col in range(DEAD_SPACE_GRID):
            x = (col + 0.5) / DEAD_SPACE_GRID
            y = (row + 0.5) / DEAD_SPACE_GRID
            candidate = BoundingBox(x, y, x, y)
            point = bbox_center(candidate, obs.screen_w, obs.screen_h)
            nx = point.x / point.screen_w
            ny = point.y / point.screen_h
            if not any(box.contains(nx, ny) for box in boxes):
                return candidate
    log.warning("No dead space found on screen; returning the top-left corner")
    return BoundingBox(0.0, 0.0, 0.0, 0.0)


# World files


def _require(condition: bool, path: str, message: str):
    if not condition:
        raise WorldFileError(path, message)


def _parse_box(raw, path: str) -> BoundingBox:
    _require(isinstance(raw, list) and len(raw) == 4, path, "box must be a list of four numbers")
    _require(all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw), path,
             "box values must be numbers")
    try:
        return BoundingBox(*(float(v) for v in raw))
    except ValueError as e:
        raise WorldFileError(path, str(e))


def _parse_screen(screen_id: str, raw, path: str, apps: dict) -> ScreenNode:
    _require(isinstance(raw, dict), path, "screen must be a mapping")
    unknown = set(raw) - {"app", "focused_field", "pages", "elements"}
    _require(not unknown, path, f"unknown keys {sorted(str(key) for key in unknown)}")
    if "elements" in raw:
        _require("pages" not in raw, path, "use either 'pages' or 'elements', not both")
        raw_pages = [raw["elements"]]
        pages_path = f"{path}.elements"
    else:
        raw_pages = raw.get("pages")
        pages_path = f"{path}.pages"
    _require(isinstance(raw_pages, list) and len(raw_pages) >= 1, pages_path, "at least one page is required")

    seen = set()
    pages = []
    for page_index, raw_page in enumerate(raw_pages):
        page_path = f"{pages_path}[{page_index}]" if "pages" in raw else pages_path
        _require(isinstance(raw_page, list), page_path, "a page is a list of elements")
        elements = []
        for element_index, raw_element in enumerate(raw_page):
            element_path = f"{page_path}[{element_index}]"
            _require(isinstance(raw_element, dict), element_path, "element must be a mapping")
            element_id = raw_element.get("id")
            _require(isinstance(element_id, str) and element_id, f"{element_path}.id", "element id is required")
            _require(element_id not in seen, f"{element_path}.id", f"duplicate element id '{element_id}'")
            seen.add(element_id)
            try:
                role = Role(raw_element.get("role", "button"))
            except ValueError:
                raise WorldFileError(f"{element_path}.role", f"unknown role {raw_element.get('role')!r}")
            elements.append(
                Element(
                    id=element_id,
                    box=_parse_box(raw_element.get("box"), f"{element_path}.box"),
                    text_label=str(raw_element.get("text", "") or ""),
                    role=role,
                )
            )
        pages.append(tuple(elements))

    app = raw.get("app")
    _require(app is None or app in apps, f"{path}.app", f"unknown app '{app}'")
    screen = ScreenNode(id=screen_id, pages=tuple(pages), app=app, focused_field=raw.get("focused_field"))
    if screen.focused_field is not None:
        field_element = screen.element(screen.focused_field)
        _require(
            field_element is not None and field_element.role is Role.TEXT_FIELD and screen.page_of(screen.focused_field) == 0,
            f"{path}.focused_field",
            f"'{screen.focused_field}' is not a text_field on the first page",
        )
    return screen


_TRIGGER_KEYS = {kind.value: kind for kind in TriggerKind}
_RULE_KEYS = {"screen", "guard", "to", "focus", "set_buffers", "set_cache_cleared", "equals", "contains"} | set(_TRIGGER_KEYS)


def _parse_rule(raw, path: str, screens: Dict[str, ScreenNode], apps: dict) -> TransitionRule:
    _require(isinstance(raw, dict), path, "transition must be a mapping")
    unknown = set(raw) - _RULE_KEYS
    _require(not unknown, path, f"unknown keys {sorted(str(key) for key in unknown)}")
    triggers = [key for key in _TRIGGER_KEYS if key in raw]
    _require(len(triggers) == 1, path, "exactly one of tap, type_submit, swipe, launch is required")
    trigger = _TRIGGER_KEYS[triggers[0]]
    subject = raw[triggers[0]]
    subject_path = f"{path}.{triggers[0]}"

    on = raw.get("screen")
    if trigger is TriggerKind.LAUNCH:
        _require(on is None, f"{path}.screen", "launch rules are global and take no 'screen'")
        _require(subject in apps, subject_path, f"unknown app '{subject}'")
    else:
        _require(on in screens, f"{path}.screen", f"unknown screen '{on}'")
        screen = screens[on]
        if trigger is TriggerKind.SWIPE:
            _require(subject in {d.value for d in Direction}, subject_path, f"unknown direction '{subject}'")
        else:
            element = screen.element(subject)
            _require(element is not None, subject_path, f"screen '{on}' has no element '{subject}'")
            if trigger is TriggerKind.TYPE_SUBMIT:
                _require(element.role is Role.TEXT_FIELD, subject_path, f"'{subject}' is not a text_field")

    equals = raw.get("equals")
    contains = raw.get("contains")
    if trigger is not TriggerKind.TYPE_SUBMIT:
        _require(equals is None and contains is None, path, "equals/contains only apply to type_submit")
    else:
        _require((equals is None) != (contains is None), path, "type_submit needs exactly one of equals, contains")

    guard_raw = raw.get("guard") or {}
    _require(isinstance(guard_raw, dict) and set(guard_raw) <= {"cache_cleared"}, f"{path}.guard",
             "guard supports only cache_cleared")
    guard = Guard(cache_cleared=guard_raw.get("cache_cleared"))

    to = raw.get("to")
    _require(to is None or to in screens, f"{path}.to", f"unknown screen '{to}'")
    focus = raw.get("focus")
    if focus is not None:
        focus_screen = screens[to] if to is not None else screens.get(on)
        field_element = focus_screen.element(focus) if focus_screen else None
        _require(field_element is not None and field_element.role is Role.TEXT_FIELD, f"{path}.focus",
                 f"'{focus}' is not a text_field on the target screen")
    set_buffers = raw.get("set_buffers") or {}
    _require(isinstance(set_buffers, dict), f"{path}.set_buffers", "set_buffers must be a mapping")
    set_cache_cleared = raw.get("set_cache_cleared")
    _require(set_cache_cleared is None or isinstance(set_cache_cleared, bool), f"{path}.set_cache_cleared",
             "set_cache_cleared must be a boolean")
    target = Target(
        screen=to,
        focus=focus,
        set_buffers=tuple(sorted((str(k), str(v)) for k, v in set_buffers.items())),
        set_cache_cleared=set_cache_cleared,
    )
    _require(target != Target(), path, "transition has no effect")
    return TransitionRule(
        trigger=trigger,
        subject=str(subject),
        target=target,
        on=on,
        guard=guard,
        equals=equals,
        contains=contains,
    )


def _parse_predicate(raw, path: str, screens: Dict[str, ScreenNode], apps: dict) -> GoalPredicate:
    _require(isinstance(raw, dict) and len(raw) == 1, path, "a goal predicate has exactly one key")
    key, value = next(iter(raw.items()))
    if key == "reach":
        _require(value in screens, f"{path}.reach", f"unknown screen '{value}'")
        return GoalPredicate(GoalKind.REACH, screen=value)
    if key == "foreground":
        _require(value in apps, f"{path}.foreground", f"unknown app '{value}'")
        return GoalPredicate(GoalKind.FOREGROUND, app=value)
    if key == "buffer":
        _require(isinstance(value, dict) and "element" in value and "equals" in value, f"{path}.buffer",
                 "buffer needs element and equals")
        element_id = value["element"]
        _require(any(screen.element(element_id) for screen in screens.values()), f"{path}.buffer.element",
                 f"unknown element '{element_id}'")
        return GoalPredicate(GoalKind.BUFFER, element=element_id, equals=str(value["equals"]))
    if key == "all":
        _require(isinstance(value, list) and value, f"{path}.all", "all needs a non-empty list")
        parts = tuple(_parse_predicate(part, f"{path}.all[{i}]", screens, apps) for i, part in enumerate(value))
        return GoalPredicate(GoalKind.ALL, parts=parts)
    raise WorldFileError(path, f"unknown goal predicate '{key}'")


def parse_world(doc, source: str = "<world>") -> World:
    """Build a World from a parsed document; dangling references raise WorldFileError."""
    _require(isinstance(doc, dict), "$", "world document must be a mapping")
    version = str(doc.get("schema_version"))
    _require(version == WORLD_SCHEMA_VERSION, "$.schema_version",
             f"unsupported schema_version {doc.get('schema_version')!r}")
    world_id = doc.get("world_id")
    _require(isinstance(world_id, str) and world_id, "$.world_id", "world_id is required")

    size = doc.get("screen_size", [1080, 1920])
    _require(isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) and v > 0 for v in size),
             "$.screen_size", "screen_size must be [width, height] in positive pixels")

    apps_raw = doc.get("apps") or {}
    _require(isinstance(apps_raw, dict), "$.apps", "apps must be a mapping")
    screens_raw = doc.get("screens")
    _require(isinstance(screens_raw, dict) and screens_raw, "$.screens", "screens must be a non-empty mapping")

    screens = {
        screen_id: _parse_screen(screen_id, raw, f"$.screens.{screen_id}", apps_raw)
        for screen_id, raw in screens_raw.items()
    }
    for app_id, root in apps_raw.items():
        _require(root in screens, f"$.apps.{app_id}", f"unknown root screen '{root}'")
    home = doc.get("home")
    _require(home in screens, "$.home", f"unknown screen '{home}'")

    rules_raw = doc.get("transitions") or []
    _require(isinstance(rules_raw, list), "$.transitions", "transitions must be a list")
    rules = tuple(_parse_rule(raw, f"$.transitions[{i}]", screens, apps_raw) for i, raw in enumerate(rules_raw))

    goals_raw = doc.get("goals") or {}
    _require(isinstance(goals_raw, dict), "$.goals", "goals must be a mapping")
    goals = {
        goal_id: SimGoal(goal_id, _parse_predicate(raw, f"$.goals.{goal_id}", screens, apps_raw))
        for goal_id, raw in goals_raw.items()
    }

    initial = doc.get("initial") or {}
    _require(isinstance(initial, dict) and set(initial) <= {"cache_cleared"}, "$.initial",
             "initial supports only cache_cleared")

    return World(
        world_id=world_id,
        screen_w=size[0],
        screen_h=size[1],
        home=home,
        screens=screens,
        apps=dict(apps_raw),
        rules=rules,
        goals=goals,
        initial_cache_cleared=bool(initial.get("cache_cleared", False)),
        path=source,
    )


def load_world(path) -> World:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise WorldFileError(str(path), f"invalid YAML: {e}")
    except UnicodeDecodeError as e:
        raise WorldFileError(str(path), f"invalid UTF-8 at byte {e.start}")
    world = parse_world(doc, str(path))
    log.debug(f"Loaded world '{world.world_id}' from {path}: {len(world.screens)} screens, "
              f"{len(world.rules)} rules, {len(world.goals)} goals")
    return world


def bundled_worlds() -> List[Path]:
    return sorted(BUNDLED_WORLDS_DIR.glob("*.yaml"))


def bundled_world(name: str) -> Path:
    path = BUNDLED_WORLDS_DIR / f"{name}.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no bundled world named '{name}'")
    return path
