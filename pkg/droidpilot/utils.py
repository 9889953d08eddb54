import hashlib
import json
import logging
from typing import Any

# Module-level logger
log = logging.getLogger(__name__)


def clamp(value: float, min_val: float, max_val: float) -> float:
    """Clamp a value between min and max."""
    return max(min(value, max_val), min_val)


def sha256_hex(payload: bytes) -> str:
    """Hex SHA-256 digest of a byte payload."""
    return hashlib.sha256(payload).hexdigest()


def canonical_json(obj: Any) -> str:
    """Sorted-key, whitespace-free JSON; identical input always yields identical text."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent 64-bit seed for a named sub-stream."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def ns_to_ms(ns: int) -> float:
    """Convert a perf_counter_ns delta to milliseconds."""
    return ns / 1_000_000
