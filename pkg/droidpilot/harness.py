"""Evaluation harness: task files, suite runs, success rates, failure attribution and reports."""
import asyncio
import csv
import enum
import io
import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from droidpilot.actions import (
    GENERAL,
    WEBSHOPPING,
    Click,
    EpisodeTrace,
    OpenApp,
    OutcomeKind,
    Swipe,
    TaskSpec,
    Type,
    bbox_center,
)
from droidpilot.agent import apply_recorded_step, is_transport_failure, logical_clock, run_episode
from droidpilot.agent_logger import AgentLogger
from droidpilot.config import RunConfig, Scenario, config_fingerprint
from droidpilot.device import AdbDevice, Device, SimDevice
from droidpilot.device import bundled_worlds as bundled_world_names
from droidpilot.errors import (
    AttributionUnavailable,
    ConfigError,
    ConflictingLabel,
    DroidPilotError,
    DuplicateTaskId,
    ElementNotFound,
    EmptyResults,
    NoFocusedField,
    ResultsFileError,
    TaskFileError,
    UnknownApp,
    UnknownTaskId,
    Unreachable,
)
from droidpilot.gateway import LocatorClient, MllmClient, PromptBundle, load_prompts
from droidpilot.sim_models import (
    DECISION,
    LOCATOR,
    REFLECTION,
    InjectionLog,
    OracleMllm,
    PerfectLocator,
    wrap_with_injection,
)
from droidpilot.simworld import (
    SimGoal,
    World,
    WorldState,
    apply_launch,
    apply_swipe,
    apply_tap,
    apply_type,
    bundled_world,
    goal_check,
    hit_element,
    initial_state,
    load_world,
    oracle_policy,
    perfect_locate,
    reset_cache,
    shortest_distance,
)
from droidpilot.utils import canonical_json, derive_seed

# Module-level logger
log = logging.getLogger(__name__)

SUITE_FILE = "suite.json"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
LATENCY_CSV = "latency.csv"
TRACES_DIR = "traces"

# Report headers of the two standard subsets
SUBSET_COLUMNS = {GENERAL: "AITW General", WEBSHOPPING: "AITW WebShopping"}

_SUBSET_ALIASES = {"general": GENERAL, "webshopping": WEBSHOPPING}


class FailureCategory(enum.Enum):
    REFLECTION = "reflection"
    LOCATOR = "locator"
    DECISION = "decision"
    BUDGET_ONLY = "budget_only"


# Component categories in phase order within a step
COMPONENT_CATEGORIES = (FailureCategory.DECISION, FailureCategory.LOCATOR, FailureCategory.REFLECTION)
_PHASE_ORDER = {category: order for order, category in enumerate(COMPONENT_CATEGORIES)}
_INJECTED_CATEGORY = {
    DECISION: FailureCategory.DECISION,
    LOCATOR: FailureCategory.LOCATOR,
    REFLECTION: FailureCategory.REFLECTION,
}


# Task files


def normalize_subset(subset: str) -> str:
    return _SUBSET_ALIASES.get(subset.strip().lower(), subset.strip())


def _read_text(path) -> str:
    """UTF-8 text of a task or label file; undecodable bytes raise TaskFileError with their line."""
    data = Path(path).read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise TaskFileError(data.count(b"\n", 0, e.start) + 1, f"invalid UTF-8 at byte {e.start}")


def ingest_tasks(path) -> List[TaskSpec]:
    """Read a tab-separated task file: id, subset, instruction and an optional sim goal."""
    tasks: List[TaskSpec] = []
    seen: Dict[str, int] = {}
    for line_no, line in enumerate(_read_text(path).split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise TaskFileError(line_no, f"expected 3 or 4 tab-separated fields, got {len(fields)}")
        task_id, subset, instruction = (value.strip() for value in fields[:3])
        sim_goal = fields[3].strip() if len(fields) == 4 and fields[3].strip() else None
        if not task_id:
            raise TaskFileError(line_no, "empty task id")
        if not subset:
            raise TaskFileError(line_no, "empty subset")
        if not instruction:
            raise TaskFileError(line_no, "empty instruction")
        if task_id in seen:
            raise DuplicateTaskId(f"task id '{task_id}' on line {line_no} already defined on line {seen[task_id]}")
        seen[task_id] = line_no
        tasks.append(TaskSpec(task_id, normalize_subset(subset), instruction, sim_goal))
    log.debug(f"Ingested {len(tasks)} tasks from {path}")
    return tasks


# Results


@dataclass(frozen=True)
class EpisodeResult:
    task_id: str
    subset: str
    run: int
    outcome: OutcomeKind
    achieved: bool
    steps: int = 0
    seconds: float = 0.0
    category: Optional[FailureCategory] = None
    injected: Tuple[str, ...] = ()
    message: str = ""
    trace: Optional[str] = None  # relative to the results directory
    labeled: bool = False

    @property
    def key(self) -> Tuple[str, int]:
        return self.task_id, self.run

    def dumps(self) -> dict:
        return {
            "task_id": self.task_id,
            "subset": self.subset,
            "run": self.run,
            "outcome": self.outcome.value,
            "achieved": self.achieved,
            "steps": self.steps,
            "seconds": self.seconds,
            "category": self.category.value if self.category else None,
            "injected": list(self.injected),
            "message": self.message,
            "trace": self.trace,
            "labeled": self.labeled,
        }

    @classmethod
    def loads(cls, record: dict) -> "EpisodeResult":
        category = record.get("category")
        return cls(
            task_id=record["task_id"],
            subset=record["subset"],
            run=int(record["run"]),
            outcome=OutcomeKind(record["outcome"]),
            achieved=bool(record["achieved"]),
            steps=int(record.get("steps", 0)),
            seconds=float(record.get("seconds", 0.0)),
            category=FailureCategory(category) if category else None,
            injected=tuple(record.get("injected", ())),
            message=record.get("message", ""),
            trace=record.get("trace"),
            labeled=bool(record.get("labeled", False)),
        )


def success_rate(outcomes: Iterable) -> float:
    """Percentage of successful outcomes; accepts booleans or EpisodeResults."""
    flags = [o.achieved if isinstance(o, EpisodeResult) else bool(o) for o in outcomes]
    if not flags:
        raise EmptyResults("no outcomes to rate")
    return 100.0 * sum(flags) / len(flags)


def pooled_rate(rates: Sequence[Tuple[float, int]]) -> float:
    """Episode-weighted mean of (rate, episode count) pairs."""
    total = sum(n for _rate, n in rates)
    if total <= 0:
        raise EmptyResults("no episodes to pool")
    return sum(rate * n for rate, n in rates) / total


@dataclass(frozen=True)
class SuiteResult:
    episodes: Tuple[EpisodeResult, ...]
    label: str = ""
    config_fingerprint: str = ""

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(sorted(self.episodes, key=lambda e: e.key)))

    @property
    def subsets(self) -> List[str]:
        return sorted({episode.subset for episode in self.episodes})

    @property
    def subset_rates(self) -> Dict[str, float]:
        return {
            subset: success_rate(e for e in self.episodes if e.subset == subset)
            for subset in self.subsets
        }

    @property
    def overall(self) -> float:
        return success_rate(self.episodes)

    @property
    def mean_task_seconds(self) -> float:
        if not self.episodes:
            return 0.0
        return sum(e.seconds for e in self.episodes) / len(self.episodes)

    @property
    def failed(self) -> List[EpisodeResult]:
        return [e for e in self.episodes if not e.achieved]

    @property
    def failure_counts(self) -> Dict[FailureCategory, int]:
        counts = {category: 0 for category in FailureCategory}
        for episode in self.failed:
            if episode.category is not None:
                counts[episode.category] += 1
        return counts

    def to_json(self) -> str:
        return canonical_json({
            "label": self.label,
            "config_fingerprint": self.config_fingerprint,
            "episodes": [e.dumps() for e in self.episodes],
        })

    @classmethod
    def from_json(cls, text: str) -> "SuiteResult":
        doc = json.loads(text)
        return cls(
            episodes=tuple(EpisodeResult.loads(record) for record in doc["episodes"]),
            label=doc.get("label", ""),
            config_fingerprint=doc.get("config_fingerprint", ""),
        )

    def merge(self, *others: "SuiteResult") -> "SuiteResult":
        episodes = {e.key: e for e in self.episodes}
        for other in others:
            for episode in other.episodes:
                episodes[episode.key] = episode
        return replace(self, episodes=tuple(episodes.values()))


# Failure attribution


@dataclass(frozen=True, order=True)
class Divergence:
    step: int
    order: int
    category: FailureCategory = field(compare=False)


def _intended_successor(world: World, state: WorldState, step) -> Optional[WorldState]:
    """State the decided action leads to with a perfect locator, None if it cannot run."""
    action = step.action
    try:
        if isinstance(action, Click):
            box = perfect_locate(step.pre_obs, action.ui_command)
            return apply_tap(world, state, bbox_center(box, world.screen_w, world.screen_h))
        if isinstance(action, Type):
            return apply_type(world, state, action.text)
        if isinstance(action, OpenApp):
            if not step.launched_app:
                return None
            return apply_launch(world, state, step.launched_app)
        if isinstance(action, Swipe):
            return apply_swipe(world, state, action.direction)
    except (ElementNotFound, NoFocusedField, UnknownApp):
        return None
    return None


def _decision_diverges(world: World, state: WorldState, goal: SimGoal, step) -> bool:
    try:
        if step.action == oracle_policy(world, state, goal):
            return False
        next_state = _intended_successor(world, state, step)
        if next_state is None:
            return True
        if goal_check(world, state, goal):
            return not goal_check(world, next_state, goal)
        remaining = shortest_distance(world, state, goal)
    except Unreachable:
        # no ground truth from here
        return False
    try:
        return shortest_distance(world, next_state, goal) != remaining - 1
    except Unreachable:
        return True


def _locator_diverges(world: World, state: WorldState, step) -> bool:
    if not isinstance(step.action, Click):
        return False
    try:
        expected = perfect_locate(step.pre_obs, step.action.ui_command)
    except ElementNotFound:
        return False
    if step.tap_point is None:
        return True
    expected_hit = hit_element(world, state, bbox_center(expected, world.screen_w, world.screen_h))
    return hit_element(world, state, step.tap_point) != expected_hit


def oracle_divergences(trace: EpisodeTrace, world: World, goal: SimGoal) -> List[Divergence]:
    """First divergence from the oracle per component, replaying the trace on the world."""
    state = initial_state(world, trace.seed)
    if trace.device.cache_reset:
        state = reset_cache(state)
    found: Dict[FailureCategory, Divergence] = {}

    def note(step_index: int, category: FailureCategory):
        if category not in found:
            found[category] = Divergence(step_index, _PHASE_ORDER[category], category)

    for step in trace.steps:
        if _decision_diverges(world, state, goal, step):
            note(step.index, FailureCategory.DECISION)
        if _locator_diverges(world, state, step):
            note(step.index, FailureCategory.LOCATOR)
        state = apply_recorded_step(world, state, step)
        if step.verdict.success != goal_check(world, state, goal):
            note(step.index, FailureCategory.REFLECTION)
    return sorted(found.values())


def attribute_failure(
    trace: EpisodeTrace,
    world: Optional[World] = None,
    goal: Optional[SimGoal] = None,
    injections: Optional[InjectionLog] = None,
) -> FailureCategory:
    """Category of the earliest component divergence; budget_only when none diverged."""
    has_oracle = world is not None and goal is not None
    if not has_oracle and injections is None:
        raise AttributionUnavailable(f"no ground truth for task '{trace.task.id}'")

    candidates: List[Divergence] = []
    if injections is not None:
        for entry in injections.entries:
            category = _INJECTED_CATEGORY[entry.component]
            candidates.append(Divergence(entry.step, _PHASE_ORDER[category], category))
    if has_oracle:
        candidates.extend(oracle_divergences(trace, world, goal))
    if not candidates:
        return FailureCategory.BUDGET_ONLY
    return min(candidates).category


# Human labels


@dataclass(frozen=True)
class HumanLabel:
    task_id: str
    run: int
    success: bool
    category: Optional[FailureCategory] = None


_VERDICTS = {"success": True, "failure": False}


def import_human_labels(path) -> List[HumanLabel]:
    """Read a task_id,run,verdict[,category] CSV of manual evaluations."""
    labels: Dict[Tuple[str, int], HumanLabel] = {}
    reader = csv.DictReader(io.StringIO(_read_text(path), newline=""))
    if reader.fieldnames is None:
        return []
    missing = {"task_id", "run", "verdict"} - set(reader.fieldnames)
    if missing:
        raise TaskFileError(1, f"label file lacks columns {sorted(missing)}")
    for line_no, row in enumerate(reader, start=2):
        task_id = (row["task_id"] or "").strip()
        verdict = (row["verdict"] or "").strip().lower()
        raw_category = (row.get("category") or "").strip().lower()
        try:
            run = int(row["run"])
        except (TypeError, ValueError):
            raise TaskFileError(line_no, f"run must be an integer, got {row['run']!r}")
        if verdict not in _VERDICTS:
            raise TaskFileError(line_no, f"verdict must be success or failure, got {verdict!r}")
        try:
            category = FailureCategory(raw_category) if raw_category else None
        except ValueError:
            raise TaskFileError(line_no, f"unknown failure category {raw_category!r}")
        label = HumanLabel(task_id, run, _VERDICTS[verdict], category)
        previous = labels.get((task_id, run))
        if previous is not None and previous != label:
            raise ConflictingLabel(f"conflicting labels for {task_id} run {run} (line {line_no})")
        labels[(task_id, run)] = label
    return list(labels.values())


def apply_human_labels(suite: SuiteResult, labels: Iterable[HumanLabel]) -> SuiteResult:
    """Override automatic outcomes with manual evaluations."""
    episodes = {e.key: e for e in suite.episodes}
    task_ids = {e.task_id for e in suite.episodes}
    for label in labels:
        if label.task_id not in task_ids:
            raise UnknownTaskId(f"label for unknown task '{label.task_id}'")
        episode = episodes.get((label.task_id, label.run))
        if episode is None:
            raise UnknownTaskId(f"label for unknown run {label.run} of task '{label.task_id}'")
        if label.success:
            category = None
        else:
            category = label.category or (episode.category if not episode.achieved else None)
        episodes[episode.key] = replace(episode, achieved=label.success, category=category, labeled=True)
    return replace(suite, episodes=tuple(episodes.values()))


# Suite runs


def _resolve_world(device_spec: str) -> World:
    name = device_spec[len("sim:"):]
    path = bundled_world(name) if name in bundled_world_names() else name
    return load_world(path)


def _check_backends(tasks: Sequence[TaskSpec], config: RunConfig, world: Optional[World]):
    if config.mllm_backend == "oracle":
        if world is None:
            raise ConfigError("the oracle mllm backend needs a sim device")
        for task in tasks:
            if not task.sim_goal:
                raise ConfigError(f"task '{task.id}' has no sim goal for the oracle backend")
    if config.locator_backend == "perfect" and world is None:
        raise ConfigError("the perfect locator backend needs a sim device")
    if world is not None:
        for task in tasks:
            if task.sim_goal and task.sim_goal not in world.goals:
                raise ConfigError(f"task '{task.id}': world '{world.world_id}' has no goal '{task.sim_goal}'")


def _close_all(clients) -> None:
    for client in clients:
        client.close()


@dataclass
class _EpisodeRun:
    result: EpisodeResult
    trace: Optional[EpisodeTrace] = None


class SuiteRunner:
    """Runs every task `repeats` times, tasks in parallel up to `config.parallel`."""

    def __init__(self, config: RunConfig, out_dir=None, logger: Optional[AgentLogger] = None,
                 prompts: Optional[PromptBundle] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.logger = logger or AgentLogger()
        self.prompts = prompts or load_prompts(config.prompts_dir, config.ocr_anchoring)
        self.fingerprint = config_fingerprint(config)
        self.world = _resolve_world(config.device) if config.device.startswith("sim:") else None
        # mock backends on a sim device: no wall time enters the results
        self.simulated = (
            self.world is not None and config.mllm_backend == "oracle" and config.locator_backend == "perfect"
        )
        loop_cfg = config.loop
        if self.out_dir is not None:
            loop_cfg = replace(loop_cfg, record_dir=str(self.out_dir / TRACES_DIR))
        self.loop_cfg = loop_cfg

    def _open_device(self, seed: int) -> Device:
        if self.world is not None:
            return SimDevice(self.world, seed)
        return AdbDevice(self.config.device[len("adb:"):], self.config.adb_path)

    def _backends(self, device: Device, goal: Optional[SimGoal]):
        mllm = OracleMllm(device, goal) if self.config.mllm_backend == "oracle" else MllmClient(self.config.mllm)
        if self.config.locator_backend == "perfect":
            locator = PerfectLocator()
        else:
            locator = LocatorClient(self.config.locator)
        return mllm, locator

    def run_one(self, task: TaskSpec, run: int) -> _EpisodeRun:
        seed = derive_seed(self.config.seed, f"{task.id}/{run}")
        goal = self.world.goal(task.sim_goal) if self.world is not None and task.sim_goal else None
        clients = []
        try:
            device = self._open_device(seed)
            if self.config.scenario is Scenario.CACHE_REMOVAL:
                device.reset_cache(self.config.cache_scope)
            mllm, locator = self._backends(device, goal)
            clients = [mllm, locator]
            injections = None
            if self.world is not None and self.config.injection is not None and self.config.injection.active:
                mllm, locator, injections = wrap_with_injection(
                    mllm, locator, self.config.injection, seed, device.list_apps()
                )
        except DroidPilotError as e:
            _close_all(clients)
            message = f"{type(e).__name__}: {e}"
            self.logger.log_error(f"Episode {task.id}/{run} could not start: {message}")
            return _EpisodeRun(EpisodeResult(task.id, task.subset, run, OutcomeKind.ERROR, False, message=message))

        try:
            trace = run_episode(
                task,
                device,
                mllm,
                locator,
                self.loop_cfg,
                self.prompts,
                seed=seed,
                run_index=run,
                config_fingerprint=self.fingerprint,
                logger=self.logger,
                on_step_start=injections.start_step if injections is not None else None,
                clock=logical_clock() if self.simulated else time.perf_counter_ns,
            )
        finally:
            _close_all(clients)
        achieved = goal_check(self.world, device.state, goal) if goal is not None else trace.succeeded

        category = None
        if not achieved:
            try:
                category = attribute_failure(trace, self.world, goal, injections)
            except AttributionUnavailable as e:
                log.debug(f"No attribution for {task.id}/{run}: {e}")
        if injections is not None:
            for entry in injections.entries:
                self.logger.log_injection(entry.step, entry.component, entry.kind, entry.draw)

        result = EpisodeResult(
            task_id=task.id,
            subset=task.subset,
            run=run,
            outcome=trace.outcome.kind,
            achieved=achieved,
            steps=len(trace.steps),
            seconds=round(trace.total_ms / 1000.0, 3),
            category=category,
            injected=tuple(sorted({e.component for e in injections.entries})) if injections else (),
            message=trace.outcome.message,
            trace=f"{TRACES_DIR}/{task.id}/{run}" if self.out_dir is not None else None,
        )
        return _EpisodeRun(result, trace)

    def run_task(self, task: TaskSpec) -> List[_EpisodeRun]:
        runs: List[_EpisodeRun] = []
        aborted: Optional[str] = None
        for run in range(self.config.repeats):
            if aborted is not None:
                runs.append(_EpisodeRun(EpisodeResult(
                    task.id, task.subset, run, OutcomeKind.ERROR, False,
                    message=f"skipped after transport failure: {aborted}",
                )))
                continue
            episode = self.run_one(task, run)
            runs.append(episode)
            result = episode.result
            if result.outcome is OutcomeKind.ERROR and result.message.startswith("TransportError"):
                aborted = result.message
                self.logger.log_warning(f"Aborting remaining repeats of {task.id}: {aborted}")
            elif episode.trace is not None and is_transport_failure(episode.trace.outcome):
                aborted = episode.trace.outcome.message
                self.logger.log_warning(f"Aborting remaining repeats of {task.id}: {aborted}")
        return runs

    async def _run_all(self, tasks: Sequence[TaskSpec]) -> List[List[_EpisodeRun]]:
        # one adb device cannot serve episodes concurrently
        limit = self.config.parallel if self.world is not None else 1
        semaphore = asyncio.Semaphore(limit)

        async def guarded(task: TaskSpec):
            async with semaphore:
                return await asyncio.to_thread(self.run_task, task)

        return await asyncio.gather(*(asyncio.create_task(guarded(task)) for task in tasks))

    def validate(self, tasks: Sequence[TaskSpec]):
        _check_backends(tasks, self.config, self.world)

    def run(self, tasks: Sequence[TaskSpec], label: str = "") -> SuiteResult:
        if not tasks:
            raise EmptyResults("no tasks to run")
        self.validate(tasks)
        self.logger.log_suite(
            f"Running {len(tasks)} tasks x {self.config.repeats} repeats "
            f"(scenario={self.config.scenario.value}, config={self.fingerprint})"
        )
        per_task = asyncio.run(self._run_all(tasks))
        runs = sorted((run for task_runs in per_task for run in task_runs), key=lambda r: r.result.key)
        suite = SuiteResult(
            episodes=tuple(run.result for run in runs),
            label=label or f"{self.config.mllm_backend}/{self.config.locator_backend}",
            config_fingerprint=self.fingerprint,
        )
        self.logger.log_suite(f"Overall success {suite.overall:.1f}% over {len(suite.episodes)} episodes")
        if self.out_dir is not None:
            self._write_outputs(suite, runs)
        return suite

    def _write_outputs(self, suite: SuiteResult, runs: List[_EpisodeRun]):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / SUITE_FILE).write_text(suite.to_json() + "\n", encoding="utf-8")
        text, table = generate_report([(suite.label, suite)])
        (self.out_dir / REPORT_TXT).write_text(text, encoding="utf-8")
        (self.out_dir / REPORT_CSV).write_text(table, encoding="utf-8")

        latency = AgentLogger(self.logger.verbose)
        latency.setup_csv_logging(self.out_dir / LATENCY_CSV, {
            "config_fingerprint": self.fingerprint,
            "scenario": self.config.scenario.value,
            "repeats": self.config.repeats,
            "seed": self.config.seed,
        })
        for run in runs:
            if run.trace is not None:
                latency.write_latency_rows(run.result.task_id, run.result.run, run.trace.steps)
        log.info(f"Wrote suite results to {self.out_dir}")


def run_suite(tasks: Sequence[TaskSpec], config: RunConfig, out_dir=None,
              logger: Optional[AgentLogger] = None, label: str = "") -> SuiteResult:
    return SuiteRunner(config, out_dir, logger).run(tasks, label)


def load_suite(path) -> SuiteResult:
    """SuiteResult from a suite.json file or a results directory holding one."""
    path = Path(path)
    if path.is_dir():
        path = path / SUITE_FILE
    try:
        return SuiteResult.from_json(path.read_bytes().decode("utf-8"))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise ResultsFileError(f"{path}: unreadable suite results: {e}")


def combine_results(results: Sequence[Tuple[str, SuiteResult]]) -> List[Tuple[str, SuiteResult]]:
    """Pool suites sharing a label and config fingerprint into one row, in first-seen order."""
    combined: Dict[Tuple[str, str], SuiteResult] = {}
    for label, suite in results:
        key = (label, suite.config_fingerprint)
        combined[key] = combined[key].merge(suite) if key in combined else suite
    return [(label, suite) for (label, _fingerprint), suite in combined.items()]


def _variant_dir(index: int, label: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9._-]+", "-", label).strip("-")
    return f"{index:02d}_{slug or 'variant'}"


def run_matrix(tasks: Sequence[TaskSpec], variants: Sequence[Tuple[str, RunConfig]], out_dir=None,
               logger: Optional[AgentLogger] = None) -> List[Tuple[str, SuiteResult]]:
    """Run the task suite once per labeled configuration; the report gets one row per label.

    Each variant writes its own results directory under out_dir; the combined report sits at
    the top. Every variant is validated before the first episode starts.
    """
    if not tasks:
        raise EmptyResults("no tasks to run")
    if not variants:
        raise EmptyResults("no configurations to run")
    logger = logger or AgentLogger()
    out_dir = Path(out_dir) if out_dir is not None else None
    runners = []
    for index, (label, config) in enumerate(variants):
        variant_out = out_dir / _variant_dir(index, label) if out_dir is not None else None
        runner = SuiteRunner(config, variant_out, logger)
        runner.validate(tasks)
        runners.append((label, runner))

    results = []
    for label, runner in runners:
        logger.log_suite(f"Configuration '{label}' ({runner.fingerprint})")
        results.append((label, runner.run(tasks, label)))

    if out_dir is not None:
        text, table = generate_report(results)
        (out_dir / REPORT_TXT).write_text(text, encoding="utf-8")
        (out_dir / REPORT_CSV).write_text(table, encoding="utf-8")
    return results


# Reports


def _rate_cell(suite: SuiteResult, subset: str) -> str:
    rates = suite.subset_rates
    return f"{rates[subset]:.1f}" if subset in rates else "n/a"


def _breakdown_cells(suite: SuiteResult) -> List[str]:
    counts = suite.failure_counts
    attributed = sum(counts[category] for category in COMPONENT_CATEGORIES)
    if attributed == 0:
        cells = ["n/a"] * len(COMPONENT_CATEGORIES)
    else:
        cells = [f"{100.0 * counts[category] / attributed:.1f}" for category in COMPONENT_CATEGORIES]
    return cells + [str(counts[FailureCategory.BUDGET_ONLY])]


def generate_report(results: Sequence[Tuple[str, SuiteResult]]) -> Tuple[str, str]:
    """Aligned text table and CSV, one row per configuration label."""
    if not results or any(not suite.episodes for _label, suite in results):
        raise EmptyResults("nothing to report")

    custom = sorted({s for _label, suite in results for s in suite.subsets} - set(SUBSET_COLUMNS))
    subsets = list(SUBSET_COLUMNS) + custom
    header = (
        ["Configuration"]
        + [SUBSET_COLUMNS.get(subset, subset) for subset in subsets]
        + ["Overall", "Reflection %", "Locator %", "Decision %", "Budget-only", "Mean task s"]
    )

    rows = []
    for label, suite in results:
        # report order is reflection, locator, decision
        decision, locator, reflection, budget = _breakdown_cells(suite)
        rows.append(
            [label]
            + [_rate_cell(suite, subset) for subset in subsets]
            + [f"{suite.overall:.1f}", reflection, locator, decision, budget, f"{suite.mean_task_seconds:.1f}"]
        )

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)

    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]

    def line(cells: List[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [cell.rjust(width) for cell, width in zip(cells[1:], widths[1:])]
        return "  ".join([first] + rest).rstrip()

    lines = [line(header), "  ".join("-" * width for width in widths)]
    lines.extend(line(row) for row in rows)
    return "\n".join(lines) + "\n", buffer.getvalue()
