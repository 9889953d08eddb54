import subprocess

import pytest

from droidpilot.actions import Direction, Point
from droidpilot.device import (
    PNG_SIGNATURE,
    AdbDevice,
    SimDevice,
    bundled_worlds,
    escape_adb_text,
    list_devices,
    open_sim_device,
    swipe_geometry,
)
from droidpilot.errors import AdbCommandError, DeviceUnreachable, EmptyCapture, UnknownApp, UnsafeText
from droidpilot.simworld import SIMDESC, parse_screen


class FakeAdb:
    """Records adb invocations and answers from a table of (argument tail, stdout) pairs"""

    def __init__(self, answers=None, returncode=0, stderr=b""):
        self.calls = []
        self.answers = answers or {}
        self.returncode = returncode
        self.stderr = stderr

    def __call__(self, args, timeout):
        self.calls.append(args)
        tail = tuple(args[3:]) if args[1] == "-s" else tuple(args[1:])
        if tail[:1] == ("shell",):
            tail = tail[1:]
        stdout = b""
        for key, value in self.answers.items():
            if tail[: len(key)] == key:
                stdout = value
        return subprocess.CompletedProcess(args, self.returncode, stdout, self.stderr)


def adb_device():
    fake = FakeAdb({("wm", "size"): b"Physical size: 1080x1920\n"})
    return AdbDevice("emulator-5554", "adb", runner=fake, clock=lambda: 1.0), fake


class TestSwipeGeometry:
    def test_up_on_portrait(self):
        gesture = swipe_geometry(Direction.UP, 1080, 1920)
        assert (gesture.start.x, gesture.start.y, gesture.end.x, gesture.end.y) == (540, 1280, 540, 640)
        assert gesture.duration_ms == 300

    def test_left_on_portrait(self):
        gesture = swipe_geometry(Direction.LEFT, 1080, 1920)
        assert (gesture.start.x, gesture.start.y, gesture.end.x, gesture.end.y) == (900, 960, 180, 960)

    def test_down_and_right_mirror(self):
        down = swipe_geometry(Direction.DOWN, 1080, 1920)
        right = swipe_geometry(Direction.RIGHT, 1080, 1920)
        assert (down.start.y, down.end.y) == (640, 1280)
        assert (right.start.x, right.end.x) == (180, 900)


class TestEscapeText:
    def test_spaces(self):
        assert escape_adb_text("hello world") == ['"hello%sworld"']

    def test_plain(self):
        assert escape_adb_text("bob@example.com") == ['"bob@example.com"']

    def test_literal_percent_s_is_split(self):
        assert escape_adb_text("use %s here") == ['"use%s%"', '"s%shere"']
        assert escape_adb_text("%s") == ['"%"', '"s"']

    def test_lone_percent_kept(self):
        assert escape_adb_text("50% off") == ['"50%%soff"']

    @pytest.mark.parametrize("text", ["rm -rf $HOME", "a;b", "quote\"d", "back`tick`", "two\nlines", ""])
    def test_unsafe(self, text):
        with pytest.raises(UnsafeText):
            escape_adb_text(text)


class TestAdbDevice:
    def test_screen_size_prefers_override(self):
        fake = FakeAdb({("wm", "size"): b"Physical size: 1440x3040\nOverride size: 1080x2280\n"})
        device = AdbDevice("S", "adb", runner=fake)
        assert (device.info().screen_w, device.info().screen_h) == (1080, 2280)

    def test_tap_swipe_and_text_commands(self):
        device, fake = adb_device()
        device.tap(Point(540, 1152, 1080, 1920))
        device.swipe(Direction.UP)
        device.type_text("hello world")
        assert fake.calls[-3:] == [
            ["adb", "-s", "emulator-5554", "shell", "input", "tap", "540", "1152"],
            ["adb", "-s", "emulator-5554", "shell", "input", "swipe", "540", "1280", "540", "640", "300"],
            ["adb", "-s", "emulator-5554", "shell", "input", "text", '"hello%sworld"'],
        ]

    def test_literal_percent_s_typed_in_two_calls(self):
        device, fake = adb_device()
        device.type_text("a%sb")
        assert fake.calls[-2:] == [
            ["adb", "-s", "emulator-5554", "shell", "input", "text", '"a%"'],
            ["adb", "-s", "emulator-5554", "shell", "input", "text", '"sb"'],
        ]

    def test_screenshot(self):
        payload = PNG_SIGNATURE + b"data"
        device, fake = adb_device()
        fake.answers[("exec-out",)] = payload
        obs = device.capture_screenshot()
        assert obs.image_bytes == payload
        assert obs.format_tag == "png"
        assert (obs.screen_w, obs.screen_h, obs.captured_at) == (1080, 1920, 1.0)
        assert fake.calls[-1] == ["adb", "-s", "emulator-5554", "exec-out", "screencap", "-p"]

    def test_empty_screenshot(self):
        device, _fake = adb_device()
        with pytest.raises(EmptyCapture):
            device.capture_screenshot()

    def test_list_and_launch_apps(self):
        device, fake = adb_device()
        fake.answers[("pm", "list", "packages")] = b"package:com.android.chrome\npackage:com.android.settings\n"
        assert device.list_apps() == ["com.android.chrome", "com.android.settings"]
        device.launch_app("com.android.chrome")
        assert fake.calls[-1][4:7] == ["monkey", "-p", "com.android.chrome"]
        with pytest.raises(UnknownApp):
            device.launch_app("com.example.missing")

    def test_reset_cache_clears_each_package(self):
        device, fake = adb_device()
        device.reset_cache(["com.android.chrome"])
        assert fake.calls[-1] == ["adb", "-s", "emulator-5554", "shell", "pm", "clear", "com.android.chrome"]
        assert device.trace_device().cache_reset

    def test_unreachable_device(self):
        fake = FakeAdb(returncode=1, stderr=b"error: device 'emulator-5554' not found")
        with pytest.raises(DeviceUnreachable):
            AdbDevice("emulator-5554", "adb", runner=fake)

    def test_other_failures(self):
        device, fake = adb_device()
        fake.returncode, fake.stderr = 255, b"Exception occurred while executing 'tap'"
        with pytest.raises(AdbCommandError):
            device.tap(Point(1, 1, 1080, 1920))

    def test_missing_executable(self):
        def runner(args, timeout):
            raise FileNotFoundError(args[0])

        with pytest.raises(DeviceUnreachable):
            list_devices("/nonexistent/adb", runner)

    def test_list_devices(self):
        fake = FakeAdb({("devices",): b"List of devices attached\nemulator-5554\tdevice\nABC\toffline\n\n"})
        assert list_devices("adb", fake) == ["emulator-5554"]


class TestSimDevice:
    def test_bundled_worlds(self):
        assert bundled_worlds() == ["general", "shopping"]

    def test_capture_uses_logical_clock(self, general_world):
        device = SimDevice(general_world, seed=3)
        first, second = device.capture_screenshot(), device.capture_screenshot()
        assert (first.captured_at, second.captured_at) == (0.0, 1.0)
        assert first.format_tag == SIMDESC
        assert first.digest == second.digest

    def test_tap_opens_app(self):
        device = open_sim_device("general")
        device.tap(Point(162, 1632, 1080, 1920))
        assert parse_screen(device.capture_screenshot())["screen"] == "settings_root"

    def test_launch_and_list(self):
        device = open_sim_device("general")
        assert device.list_apps() == ["com.android.clock", "com.android.settings", "com.google.android.gm"]
        device.launch_app("com.google.android.gm")
        assert device.state.current_screen == "gmail_inbox"
        with pytest.raises(UnknownApp):
            device.launch_app("com.example.none")

    def test_trace_device(self):
        device = open_sim_device("shopping")
        device.reset_cache(["com.android.chrome"])
        info = device.trace_device()
        assert (info.driver, info.device_id, info.cache_reset) == ("sim", "shopping", True)
        assert info.world_path.endswith("shopping.yaml")
