#!/usr/bin/env python3
"""
Connection check for the configured MLLM endpoint, locator endpoint and adb device
"""

import argparse
import base64
import logging
import sys
import time

from droidpilot.actions import Observation
from droidpilot.config import load_config
from droidpilot.device import AdbDevice, list_devices
from droidpilot.errors import DroidPilotError
from droidpilot.gateway import LocatorClient, MllmClient, Purpose

# Set up logging
logging.basicConfig(
    level=logging.DEBUG,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
log = logging.getLogger(__name__)

# 1x1 white PNG
PING_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAIAAACQd1PeAAAADElEQVR4nGP4//8/AAX+Av4N70a4AAAAAElFTkSuQmCC"
)


def ping_observation() -> Observation:
    return Observation(PING_PNG, "png", 1, 1, time.time())


def check_mllm(cfg) -> bool:
    log.info(f"Testing MLLM endpoint {cfg.mllm.base_url} (model {cfg.mllm.model_name!r})...")
    try:
        client = MllmClient(cfg.mllm)
        try:
            reply = client.complete(Purpose.DECISION, "You are a test.", "Reply with OK.", ping_observation())
        finally:
            client.close()
        log.info(f"✓ MLLM replied: {reply[:80]!r}")
        return True
    except DroidPilotError as e:
        log.error(f"MLLM check failed: {e}")
        return False


def check_locator(cfg) -> bool:
    log.info(f"Testing locator endpoint {cfg.locator.base_url}...")
    try:
        client = LocatorClient(cfg.locator)
        try:
            box = client.locate(ping_observation(), "tap on element 'OK'")
        finally:
            client.close()
        log.info(f"✓ Locator answered with box {box}")
        return True
    except DroidPilotError as e:
        log.error(f"Locator check failed: {e}")
        return False


def check_adb(cfg, serial=None) -> bool:
    log.info("Testing adb...")
    try:
        serials = list_devices(cfg.adb_path)
        log.info(f"✓ Attached devices: {serials or 'none'}")
        if serial is None and not serials:
            log.warning("No device attached (this might be normal for sim-only setups)")
            return True
        device = AdbDevice(serial or serials[0], cfg.adb_path)
        info = device.info()
        log.info(f"✓ {info.serial_or_world_id}: {info.screen_w}x{info.screen_h}")
        obs = device.capture_screenshot()
        log.info(f"✓ Screenshot captured ({len(obs.image_bytes)} bytes)")
        return True
    except DroidPilotError as e:
        log.error(f"adb check failed: {e}")
        return False


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Check droidpilot endpoints and devices')
    parser.add_argument('--config', '-c', help='YAML config file')
    parser.add_argument('--serial', help='adb serial to check (default: first attached)')
    parser.add_argument('--skip-adb', action='store_true', help='Do not check adb')
    args = parser.parse_args()

    print("droidpilot endpoint check")
    print("=" * 40)

    cfg = load_config(args.config)
    results = {
        "mllm": check_mllm(cfg) if cfg.mllm_backend == "endpoint" else None,
        "locator": check_locator(cfg) if cfg.locator_backend == "endpoint" else None,
        "adb": None if args.skip_adb else check_adb(cfg, args.serial),
    }
    for name, ok in results.items():
        status = "skipped" if ok is None else ("PASSED" if ok else "FAILED")
        print(f"{name:8} {status}")

    if any(ok is False for ok in results.values()):
        sys.exit(1)
