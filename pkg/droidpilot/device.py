"""Device contract and its two drivers: adb and the simulated world."""
import abc
import logging
import os
import re
import subprocess
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

from droidpilot.actions import Direction, Observation, Point, TraceDevice
from droidpilot.errors import (
    AdbCommandError,
    DeviceUnreachable,
    EmptyCapture,
    UnknownApp,
    UnsafeText,
)
from droidpilot import simworld
from droidpilot.simworld import World, WorldState

# Module-level logger
log = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
SWIPE_DURATION_MS = 300
ADB_TIMEOUT_S = 20

# Rejected rather than escaped: the remote shell would interpret them
UNSAFE_TEXT_CHARS = set("`$\\\"';&|<>()*?~#!{}[]\n\r")


@dataclass(frozen=True)
class DeviceInfo:
    driver: str  # adb | sim
    screen_w: int
    screen_h: int
    serial_or_world_id: str

    def __post_init__(self):
        if self.screen_w <= 0 or self.screen_h <= 0:
            raise ValueError(f"screen size must be positive: {self.screen_w}x{self.screen_h}")


@dataclass(frozen=True)
class GestureSpec:
    start: Point
    end: Point
    duration_ms: int = SWIPE_DURATION_MS

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError("gesture duration must be positive")


def swipe_geometry(direction: Direction, screen_w: int, screen_h: int,
                   duration_ms: int = SWIPE_DURATION_MS) -> GestureSpec:
    """Finger path for a swipe, centred on the screen.

    Vertical swipes travel a third of the height, horizontal ones two thirds of the width.
    Swipe up moves the finger from lower-centre to upper-centre.
    """
    cx, cy = screen_w // 2, screen_h // 2
    dy, dx = screen_h // 6, screen_w // 3
    if direction is Direction.UP:
        start, end = (cx, cy + dy), (cx, cy - dy)
    elif direction is Direction.DOWN:
        start, end = (cx, cy - dy), (cx, cy + dy)
    elif direction is Direction.LEFT:
        start, end = (cx + dx, cy), (cx - dx, cy)
    else:
        start, end = (cx - dx, cy), (cx + dx, cy)
    return GestureSpec(
        start=Point(start[0], start[1], screen_w, screen_h),
        end=Point(end[0], end[1], screen_w, screen_h),
        duration_ms=duration_ms,
    )


def escape_adb_text(text: str) -> List[str]:
    """Arguments for successive `input text` calls: spaces become %s, each chunk is double-quoted.

    `input text` reads every %s as a space, so a literal "%s" is split across two calls.
    """
    if not text:
        raise UnsafeText("cannot type empty text")
    unsafe = sorted(set(text) & UNSAFE_TEXT_CHARS)
    if unsafe:
        raise UnsafeText(f"text contains shell metacharacters {unsafe}: {text!r}")
    head, *rest = text.split("%s")
    chunks = [head]
    for part in rest:
        chunks[-1] += "%"
        chunks.append("s" + part)
    return ['"' + chunk.replace(" ", "%s") + '"' for chunk in chunks]


class Device(abc.ABC):
    """One exclusive session on a device; not safe for concurrent use."""

    @abc.abstractmethod
    def info(self) -> DeviceInfo: ...

    @abc.abstractmethod
    def capture_screenshot(self) -> Observation: ...

    @abc.abstractmethod
    def tap(self, point: Point) -> None: ...

    @abc.abstractmethod
    def swipe(self, direction: Direction) -> None: ...

    @abc.abstractmethod
    def type_text(self, text: str) -> None: ...

    @abc.abstractmethod
    def list_apps(self) -> List[str]: ...

    @abc.abstractmethod
    def launch_app(self, app_id: str) -> None: ...

    @abc.abstractmethod
    def reset_cache(self, scope: Sequence[str]) -> None: ...

    @abc.abstractmethod
    def trace_device(self) -> TraceDevice: ...


# adb driver

Runner = Callable[[List[str], float], subprocess.CompletedProcess]

_UNREACHABLE_MARKERS = ("not found", "offline", "unauthorized", "no devices", "device still connecting")


def run_subprocess(args: List[str], timeout: float) -> subprocess.CompletedProcess:
    return subprocess.run(args, capture_output=True, timeout=timeout)


def _adb_executable(adb_path: Optional[str]) -> str:
    return adb_path or os.environ.get("ADB_PATH") or "adb"


def _run(runner: Runner, args: List[str], serial: str) -> bytes:
    try:
        proc = runner(args, ADB_TIMEOUT_S)
    except FileNotFoundError as e:
        raise DeviceUnreachable(f"adb executable not found: {e}")
    except subprocess.TimeoutExpired:
        raise DeviceUnreachable(f"adb timed out for {serial}: {' '.join(args)}")
    if proc.returncode != 0:
        stderr = (proc.stderr or b"").decode("utf-8", errors="replace").strip()
        if any(marker in stderr.lower() for marker in _UNREACHABLE_MARKERS):
            raise DeviceUnreachable(f"device {serial}: {stderr}")
        raise AdbCommandError(f"{' '.join(args)} exited {proc.returncode}: {stderr}")
    return proc.stdout or b""


def list_devices(adb_path: Optional[str] = None, runner: Runner = run_subprocess) -> List[str]:
    """Serials of attached devices in the 'device' state."""
    out = _run(runner, [_adb_executable(adb_path), "devices"], "-").decode("utf-8", errors="replace")
    serials = []
    for line in out.splitlines()[1:]:
        parts = line.split()
        if len(parts) >= 2 and parts[1] == "device":
            serials.append(parts[0])
    return sorted(serials)


_WM_SIZE = re.compile(r"(Physical|Override) size:\s*(\d+)x(\d+)")


class AdbDevice(Device):
    def __init__(self, serial: str, adb_path: Optional[str] = None, runner: Runner = run_subprocess,
                 screen_size: Optional[tuple] = None, clock: Optional[Callable[[], float]] = None):
        self.serial = serial
        self.adb = _adb_executable(adb_path)
        self.runner = runner
        self.clock = clock or time.monotonic
        self.cache_reset = False
        self._apps: Optional[List[str]] = None
        if screen_size is None:
            screen_size = self._screen_size()
        self._info = DeviceInfo("adb", screen_size[0], screen_size[1], serial)
        log.info(f"adb device {serial}: {self._info.screen_w}x{self._info.screen_h}")

    def _shell(self, *args: str) -> bytes:
        return _run(self.runner, [self.adb, "-s", self.serial, "shell", *args], self.serial)

    def _screen_size(self) -> tuple:
        out = self._shell("wm", "size").decode("utf-8", errors="replace")
        sizes = {kind: (int(w), int(h)) for kind, w, h in _WM_SIZE.findall(out)}
        size = sizes.get("Override") or sizes.get("Physical")
        if size is None:
            raise AdbCommandError(f"cannot read screen size from {out!r}")
        return size

    def info(self) -> DeviceInfo:
        return self._info

    def capture_screenshot(self) -> Observation:
        payload = _run(self.runner, [self.adb, "-s", self.serial, "exec-out", "screencap", "-p"], self.serial)
        if not payload:
            raise EmptyCapture(f"empty screenshot from {self.serial}")
        if not payload.startswith(PNG_SIGNATURE):
            raise EmptyCapture(f"screenshot from {self.serial} is not a PNG")
        return Observation(payload, "png", self._info.screen_w, self._info.screen_h, self.clock())

    def tap(self, point: Point) -> None:
        self._shell("input", "tap", str(point.x), str(point.y))

    def swipe(self, direction: Direction) -> None:
        gesture = swipe_geometry(direction, self._info.screen_w, self._info.screen_h)
        self._shell(
            "input", "swipe",
            str(gesture.start.x), str(gesture.start.y),
            str(gesture.end.x), str(gesture.end.y),
            str(gesture.duration_ms),
        )

    def type_text(self, text: str) -> None:
        for chunk in escape_adb_text(text):
            self._shell("input", "text", chunk)

    def list_apps(self) -> List[str]:
        out = self._shell("pm", "list", "packages").decode("utf-8", errors="replace")
        apps = {line.strip()[len("package:"):] for line in out.splitlines() if line.strip().startswith("package:")}
        self._apps = sorted(app for app in apps if app)
        return list(self._apps)

    def launch_app(self, app_id: str) -> None:
        known = self._apps if self._apps is not None else self.list_apps()
        if app_id not in known:
            raise UnknownApp(f"{app_id} is not installed on {self.serial}")
        out = self._shell("monkey", "-p", app_id, "-c", "android.intent.category.LAUNCHER", "1")
        if b"No activities found" in out:
            raise UnknownApp(f"{app_id} has no launcher activity")

    def reset_cache(self, scope: Sequence[str]) -> None:
        for package in scope:
            self._shell("pm", "clear", package)
        self.cache_reset = True

    def trace_device(self) -> TraceDevice:
        return TraceDevice("adb", self.serial, None, self.cache_reset)


# Simulated driver


class SimDevice(Device):
    """Session on a simulated world; every operation is a pure WorldState transition."""

    def __init__(self, world: World, seed: int = 0):
        self.world = world
        self.state: WorldState = simworld.initial_state(world, seed)
        self.cache_reset = False
        self._captures = 0
        self._info = DeviceInfo("sim", world.screen_w, world.screen_h, world.world_id)

    def info(self) -> DeviceInfo:
        return self._info

    def capture_screenshot(self) -> Observation:
        # logical clock keeps sim traces reproducible
        obs = simworld.render_screen(self.world, self.state, captured_at=float(self._captures))
        self._captures += 1
        return obs

    def tap(self, point: Point) -> None:
        self.state = simworld.apply_tap(self.world, self.state, point)

    def swipe(self, direction: Direction) -> None:
        self.state = simworld.apply_swipe(self.world, self.state, direction)

    def type_text(self, text: str) -> None:
        self.state = simworld.apply_type(self.world, self.state, text)

    def list_apps(self) -> List[str]:
        return sorted(app_id for app_id, _root in self.state.installed_apps)

    def launch_app(self, app_id: str) -> None:
        self.state = simworld.apply_launch(self.world, self.state, app_id)

    def reset_cache(self, scope: Sequence[str]) -> None:
        self.state = simworld.reset_cache(self.state)
        self.cache_reset = True

    def trace_device(self) -> TraceDevice:
        return TraceDevice("sim", self.world.world_id, self.world.path, self.cache_reset)


def bundled_worlds() -> List[str]:
    """Names of the world files shipped with the package."""
    return [path.stem for path in simworld.bundled_worlds()]


def open_sim_device(spec: str, seed: int = 0) -> SimDevice:
    """SimDevice for a bundled world name or a world file path."""
    path = spec
    if spec in bundled_worlds():
        path = simworld.bundled_world(spec)
    return SimDevice(simworld.load_world(path), seed)
