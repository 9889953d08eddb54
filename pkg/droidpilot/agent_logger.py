import csv
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional

# Module-level logger
log = logging.getLogger(__name__)

LATENCY_COLUMNS = [
    "task_id", "run", "step", "action", "decide_ms", "locate_ms", "execute_ms",
    "reflect_ms", "verdict", "note",
]


class AgentLogger:
    """Dedicated logging class for the agent loop and the evaluation harness"""

    def __init__(self, verbose: bool = False):
        self.verbose = verbose
        self.log_path: Optional[Path] = None

    def _payload(self, message: str, detail: str = ""):
        # payloads go to INFO only in verbose mode
        if self.verbose and detail:
            log.info(f"{message} {detail}")
        elif detail:
            log.debug(f"{message} {detail}")
        elif self.verbose:
            log.info(message)
        else:
            log.debug(message)

    def log_decision(self, task_id: str, step: int, action, attempts: int, raw: str):
        self._payload(
            f"[DECISION] task={task_id} step={step} attempts={attempts} action={action}",
            f"raw={raw!r}",
        )

    def log_locate(self, step: int, command: str, box, point):
        self._payload(f"[LOCATE] step={step} command={command!r}", f"box={box} point={point}")

    def log_execute(self, step: int, action, note: Optional[str] = None):
        if note:
            log.warning(f"[EXECUTE] step={step} {action}: {note}")
        else:
            self._payload(f"[EXECUTE] step={step} {action}")

    def log_reflect(self, step: int, verdict, attempts: int):
        self._payload(
            f"[REFLECT] step={step} status={verdict.status.value} attempts={attempts}",
            f"rationale={verdict.rationale!r}",
        )

    def log_episode_start(self, task_id: str, run: int, info):
        log.info(f"[EPISODE] task={task_id} run={run} device={info.driver}:{info.serial_or_world_id} "
                 f"screen={info.screen_w}x{info.screen_h}")

    def log_episode(self, task_id: str, run: int, outcome, steps: int, total_ms: float):
        log.info(f"[EPISODE] task={task_id} run={run} outcome={outcome} steps={steps} "
                 f"total={total_ms / 1000:.2f}s")

    def log_suite(self, message: str):
        log.info(f"[SUITE] {message}")

    def log_injection(self, step: int, component: str, kind: str, draw: float):
        self._payload(f"[INJECTION] step={step} component={component} kind={kind}", f"draw={draw:.6f}")

    def log_error(self, message: str, exc_info: bool = False):
        log.error(message, exc_info=exc_info)

    def log_warning(self, message: str):
        log.warning(message)

    def setup_csv_logging(self, path, parameters: Mapping[str, object]):
        """Create a latency CSV with a parameter preamble followed by the data header"""
        self.log_path = Path(path)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["Parameter", "Value"])
            for key, value in parameters.items():
                writer.writerow([key, value])
            writer.writerow(["start_time", datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S")])
            writer.writerow([])
            writer.writerow(LATENCY_COLUMNS)

    def write_latency_rows(self, task_id: str, run: int, steps: Iterable):
        """Append one row per step of an episode"""
        if self.log_path is None:
            return
        try:
            with self.log_path.open("a", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                for step in steps:
                    writer.writerow([
                        task_id,
                        run,
                        step.index,
                        step.action.kind.value,
                        f"{step.decide_ms:.3f}",
                        f"{step.locate_ms:.3f}",
                        f"{step.execute_ms:.3f}",
                        f"{step.reflect_ms:.3f}",
                        step.verdict.status.value,
                        step.note or "",
                    ])
        except OSError as e:
            log.error(f"Error writing to latency CSV: {e}")
