"""Command-line entry point: run, eval, replay, report, worlds and devices."""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from droidpilot.actions import GENERAL, OutcomeKind, TaskSpec
from droidpilot.agent import replay
from droidpilot.agent_logger import AgentLogger
from droidpilot.config import RunConfig, Scenario, load_config, load_matrix
from droidpilot.device import bundled_worlds, list_devices
from droidpilot.errors import (
    ConfigError,
    ConflictingLabel,
    DeviceError,
    DroidPilotError,
    DuplicateTaskId,
    EmptyResults,
    MissingPlaceholder,
    ReplayDivergence,
    ReplayUnsupported,
    ResultsFileError,
    TaskFileError,
    TraceFormatError,
    UnknownTaskId,
    WorldFileError,
)
from droidpilot.harness import (
    REPORT_CSV,
    SuiteRunner,
    apply_human_labels,
    combine_results,
    generate_report,
    import_human_labels,
    ingest_tasks,
    load_suite,
    run_matrix,
)
from droidpilot.simworld import load_world

# Module-level logger
log = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_DIVERGENCE = 1
EXIT_BUDGET = 2
EXIT_EPISODE_ERROR = 3
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NO_INPUT = 66
EXIT_INTERNAL = 70

_RUN_EXIT = {
    OutcomeKind.SUCCESS: EXIT_OK,
    OutcomeKind.BUDGET_EXHAUSTED: EXIT_BUDGET,
    OutcomeKind.ERROR: EXIT_EPISODE_ERROR,
}

_DATA_ERRORS = (
    TaskFileError,
    DuplicateTaskId,
    TraceFormatError,
    WorldFileError,
    ReplayUnsupported,
    UnknownTaskId,
    ConflictingLabel,
    EmptyResults,
    MissingPlaceholder,
    ResultsFileError,
)


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def _seed(value: str) -> int:
    number = int(value, 0)
    if not 0 <= number < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {value}")
    return number


def _add_run_options(parser: argparse.ArgumentParser):
    parser.add_argument("--device", help="sim:<world name or path> or adb:<serial>")
    parser.add_argument("--mllm", choices=["oracle", "endpoint"], help="decision and reflection backend")
    parser.add_argument("--locator", choices=["perfect", "endpoint"], help="locator backend")
    parser.add_argument("--scenario", choices=[s.value for s in Scenario])
    parser.add_argument("--max-steps", type=_positive_int, help="step budget per episode")
    parser.add_argument("--seed", type=_seed, help="seed for every stochastic component")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="droidpilot", description="Autonomous Android GUI agent")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging (default: False)")
    parser.add_argument("--quiet", "-q", action="store_true", help="Disable verbose logging (default: False)")
    parser.add_argument("--config", "-c", help="YAML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one task")
    run.add_argument("task", nargs="?", help="task instruction")
    run.add_argument("--task-id", help="take the task from --tasks by id")
    run.add_argument("--tasks", help="task file for --task-id")
    run.add_argument("--goal", help="sim goal id the task aims for")
    run.add_argument("--out", default="runs", help="directory for the trace (default: runs)")
    _add_run_options(run)

    ev = sub.add_parser("eval", help="run a task suite")
    ev.add_argument("--tasks", required=True, help="task file")
    ev.add_argument("--repeats", type=_positive_int, help="episodes per task (default: 3)")
    ev.add_argument("--parallel", type=_positive_int, help="tasks run concurrently")
    ev.add_argument("--out", default="results", help="results directory (default: results)")
    ev.add_argument("--label", default="", help="configuration label in the report")
    ev.add_argument("--matrix", help="YAML file of labeled config variants, one report row each")
    _add_run_options(ev)

    rp = sub.add_parser("replay", help="replay a sim trace and check determinism")
    rp.add_argument("trace", help="trace directory or trace.jsonl")
    rp.add_argument("--world", help="world file overriding the one named in the trace")

    rep = sub.add_parser("report", help="merge results directories into one table; runs sharing a label and config pool into one row")
    rep.add_argument("results", nargs="+", help="results directories or suite.json files")
    rep.add_argument("--labels", help="human label CSV applied to a single results directory")
    rep.add_argument("--csv", help=f"write the CSV table here (default: none; eval writes {REPORT_CSV})")

    worlds = sub.add_parser("worlds", help="world file tools")
    worlds_sub = worlds.add_subparsers(dest="worlds_command", required=True)
    validate = worlds_sub.add_parser("validate", help="check world files against the schema")
    validate.add_argument("paths", nargs="+")

    sub.add_parser("devices", help="list adb devices and bundled sim worlds")
    return parser


def _configure(args) -> RunConfig:
    config = load_config(args.config)
    changes = {}
    if getattr(args, "device", None):
        changes["device"] = args.device
    if getattr(args, "mllm", None):
        changes["mllm_backend"] = args.mllm
    if getattr(args, "locator", None):
        changes["locator_backend"] = args.locator
    if getattr(args, "scenario", None):
        changes["scenario"] = Scenario(args.scenario)
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "repeats", None):
        changes["repeats"] = args.repeats
    if getattr(args, "parallel", None):
        changes["parallel"] = args.parallel
    if getattr(args, "max_steps", None):
        changes["loop"] = replace(config.loop, max_steps=args.max_steps)
    return replace(config, **changes)


def cmd_run(args, logger: AgentLogger) -> int:
    if args.task_id:
        if not args.tasks:
            raise ConfigError("--task-id needs --tasks")
        matches = [task for task in ingest_tasks(args.tasks) if task.id == args.task_id]
        if not matches:
            raise UnknownTaskId(f"no task '{args.task_id}' in {args.tasks}")
        task = matches[0]
        if args.goal:
            task = replace(task, sim_goal=args.goal)
    elif args.task:
        task = TaskSpec("adhoc", GENERAL, args.task, args.goal)
    else:
        raise ConfigError("give a task instruction or --task-id")

    config = replace(_configure(args), repeats=1)
    runner = SuiteRunner(config, args.out, logger)
    runner.validate([task])
    episode = runner.run_one(task, 0)
    result = episode.result
    if episode.trace is not None:
        print(Path(args.out) / result.trace)
    print(f"{task.id}: {result.outcome.value} after {result.steps} steps")
    if result.message and result.outcome is not OutcomeKind.SUCCESS:
        print(result.message)
    return _RUN_EXIT[result.outcome]


def cmd_eval(args, logger: AgentLogger) -> int:
    config = _configure(args)
    tasks = ingest_tasks(args.tasks)
    if args.matrix:
        if args.label:
            raise ConfigError("--label does not apply to --matrix; variants carry their own labels")
        results = run_matrix(tasks, load_matrix(args.matrix, config), args.out, logger)
    else:
        suite = SuiteRunner(config, args.out, logger).run(tasks, args.label)
        results = [(suite.label, suite)]
    text, _table = generate_report(results)
    print(text, end="")
    return EXIT_OK


def cmd_replay(args, logger: AgentLogger) -> int:
    try:
        trace = replay(args.trace, args.world)
    except ReplayDivergence as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGENCE
    print(f"{trace.task.id}: replayed {len(trace.steps)} steps without divergence")
    return EXIT_OK


def cmd_report(args, logger: AgentLogger) -> int:
    suites = [load_suite(path) for path in args.results]
    if args.labels:
        if len(suites) != 1:
            raise ConfigError("--labels applies to exactly one results directory")
        suites = [apply_human_labels(suites[0], import_human_labels(args.labels))]
    results = [(suite.label or Path(path).name, suite) for path, suite in zip(args.results, suites)]
    text, table = generate_report(combine_results(results))
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(table, encoding="utf-8")
    return EXIT_OK


def cmd_worlds(args, logger: AgentLogger) -> int:
    status = EXIT_OK
    for path in args.paths:
        try:
            world = load_world(path)
        except WorldFileError as e:
            print(f"{path}: {e}")
            status = EXIT_DATA
            continue
        print(f"{path}: ok ({world.world_id}, {len(world.screens)} screens, {len(world.goals)} goals)")
    return status


def cmd_devices(args, logger: AgentLogger) -> int:
    config = load_config(args.config)
    try:
        for serial in list_devices(config.adb_path):
            print(f"adb:{serial}")
    except DeviceError as e:
        logger.log_warning(f"adb unavailable: {e}")
    for name in bundled_worlds():
        print(f"sim:{name}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "eval": cmd_eval,
    "replay": cmd_replay,
    "report": cmd_report,
    "worlds": cmd_worlds,
    "devices": cmd_devices,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    verbose = args.verbose and not args.quiet
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)
    logger = AgentLogger(verbose)

    try:
        return COMMANDS[args.command](args, logger)
    except FileNotFoundError as e:
        print(f"droidpilot: {e.filename or e}: no such file", file=sys.stderr)
        return EXIT_NO_INPUT
    except ConfigError as e:
        print(f"droidpilot: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as e:
        print(f"droidpilot: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        log.info("Stopped by user")
        return EXIT_INTERNAL
    except DroidPilotError as e:
        log.error(f"{type(e).__name__}: {e}", exc_info=verbose)
        return EXIT_INTERNAL
    except Exception:
        log.exception("Internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
