import dataclasses
import enum
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from droidpilot.errors import ConfigError
from droidpilot.simworld import ErrorInjectionConfig
from droidpilot.utils import canonical_json, sha256_hex

# Module-level logger
log = logging.getLogger(__name__)

LOCATOR_FORMATS = ("norm_box", "pixel_box", "norm_point")
MLLM_BACKENDS = ("oracle", "endpoint")
LOCATOR_BACKENDS = ("perfect", "endpoint")

# Environment variables overlaid onto the config file
ENV_OVERLAY = {
    "MLLM_BASE_URL": ("mllm", "base_url"),
    "MLLM_API_KEY": ("mllm", "api_key"),
    "LOCATOR_BASE_URL": ("locator", "base_url"),
    "ADB_PATH": (None, "adb_path"),
}


class Scenario(enum.Enum):
    CACHE_REMOVAL = "cache_removal"
    NO_CACHE_REMOVAL = "no_cache_removal"


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = ""
    api_key: Optional[str] = None
    model_name: str = ""

    # Transport
    timeout_ms: int = 60_000
    max_retries: int = 2  # extra attempts after the first
    retry_backoff_ms: int = 500  # first backoff delay, doubled per retry

    temperature: float = 0.0
    response_format: str = "norm_box"  # locator endpoints only

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.retry_backoff_ms < 0:
            raise ConfigError(f"retry_backoff_ms must be >= 0, got {self.retry_backoff_ms}")
        if self.response_format not in LOCATOR_FORMATS:
            raise ConfigError(f"response_format must be one of {LOCATOR_FORMATS}, got {self.response_format!r}")


@dataclass(frozen=True)
class LoopConfig:
    max_steps: int = 20
    stop_on: str = "success_verdict"
    per_step_timeout_ms: int = 120_000
    record_dir: Optional[str] = None  # traces go to <record_dir>/<task_id>/<run>/

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.stop_on != "success_verdict":
            raise ConfigError(f"stop_on only supports 'success_verdict', got {self.stop_on!r}")
        if self.per_step_timeout_ms <= 0:
            raise ConfigError(f"per_step_timeout_ms must be positive, got {self.per_step_timeout_ms}")


@dataclass(frozen=True)
class RunConfig:
    # Models
    mllm: EndpointConfig = field(default_factory=EndpointConfig)
    locator: EndpointConfig = field(default_factory=EndpointConfig)
    mllm_backend: str = "oracle"  # oracle | endpoint
    locator_backend: str = "perfect"  # perfect | endpoint
    prompts_dir: Optional[str] = None  # defaults to the bundled prompts/v1
    ocr_anchoring: bool = True

    # Device
    device: str = "sim:general"  # sim:<world name or path> | adb:<serial>
    adb_path: Optional[str] = None
    cache_scope: tuple = ("com.android.chrome",)

    # Protocol
    scenario: Scenario = Scenario.CACHE_REMOVAL
    repeats: int = 3
    parallel: int = 4
    loop: LoopConfig = field(default_factory=LoopConfig)
    injection: Optional[ErrorInjectionConfig] = None
    seed: int = 0

    def __post_init__(self):
        if self.mllm_backend not in MLLM_BACKENDS:
            raise ConfigError(f"mllm backend must be one of {MLLM_BACKENDS}, got {self.mllm_backend!r}")
        if self.locator_backend not in LOCATOR_BACKENDS:
            raise ConfigError(f"locator backend must be one of {LOCATOR_BACKENDS}, got {self.locator_backend!r}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.parallel < 1:
            raise ConfigError(f"parallel must be >= 1, got {self.parallel}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed {self.seed} is not a 64-bit unsigned integer")
        if not (self.device.startswith("sim:") or self.device.startswith("adb:")):
            raise ConfigError(f"device must be sim:<world> or adb:<serial>, got {self.device!r}")
        object.__setattr__(self, "cache_scope", tuple(self.cache_scope))


def _fingerprint_view(config: RunConfig) -> dict:
    def convert(value):
        if isinstance(value, enum.Enum):
            return value.value
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        return value

    view = convert(dataclasses.asdict(config))
    # secrets and settings without effect on results stay out of the fingerprint
    view["mllm"].pop("api_key", None)
    view["locator"].pop("api_key", None)
    view["loop"].pop("record_dir", None)
    view.pop("parallel", None)
    return view


def config_fingerprint(config: RunConfig) -> str:
    """First 16 hex chars of the SHA-256 of the canonical, secret-free config."""
    return sha256_hex(canonical_json(_fingerprint_view(config)).encode("utf-8"))[:16]


def _section(doc: Mapping, key: str, allowed: set) -> dict:
    section = doc.get(key) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(str(k) for k in unknown)}")
    return dict(section)


_ENDPOINT_KEYS = {f.name for f in dataclasses.fields(EndpointConfig)}
_LOOP_KEYS = {f.name for f in dataclasses.fields(LoopConfig)}
_INJECTION_KEYS = {f.name for f in dataclasses.fields(ErrorInjectionConfig)}
_TOP_KEYS = {
    "mllm", "locator", "backends", "prompts_dir", "ocr_anchoring", "device", "adb_path",
    "cache_scope", "scenario", "repeats", "parallel", "loop", "injection", "seed",
}


def _merged(section: Optional[dict], base) -> dict:
    values = dataclasses.asdict(base) if base is not None else {}
    values.update(section or {})
    return values


def apply_overrides(config: RunConfig, doc: Mapping) -> RunConfig:
    """Overlay a partial config document onto config; keys it leaves out keep their values."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(str(k) for k in unknown)}")

    mllm = _section(doc, "mllm", _ENDPOINT_KEYS)
    locator = _section(doc, "locator", _ENDPOINT_KEYS)
    backends = _section(doc, "backends", {"mllm", "locator"})
    loop = _section(doc, "loop", _LOOP_KEYS)
    top = {key: doc[key] for key in _TOP_KEYS - {"mllm", "locator", "backends", "loop", "injection"} if key in doc}

    try:
        if "scenario" in top:
            top["scenario"] = Scenario(top["scenario"])
        if "cache_scope" in top:
            top["cache_scope"] = tuple(top["cache_scope"])
        if "injection" in doc:
            injection = doc["injection"]
            if injection is None:
                top["injection"] = None
            else:
                if not isinstance(injection, dict) or set(injection) - _INJECTION_KEYS:
                    raise ConfigError(f"'injection' accepts only {sorted(_INJECTION_KEYS)}")
                top["injection"] = ErrorInjectionConfig(**_merged(injection, config.injection))
        return dataclasses.replace(
            config,
            mllm=dataclasses.replace(config.mllm, **mllm),
            locator=dataclasses.replace(config.locator, **locator),
            mllm_backend=backends.get("mllm", config.mllm_backend),
            locator_backend=backends.get("locator", config.locator_backend),
            loop=dataclasses.replace(config.loop, **loop),
            **top,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}")


def config_from_mapping(doc: Mapping, env: Optional[Mapping] = None) -> RunConfig:
    """Build a RunConfig from a parsed config document with the environment overlaid."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a mapping")
    doc = dict(doc)
    env = os.environ if env is None else env
    for variable, (section, key) in ENV_OVERLAY.items():
        value = env.get(variable)
        if not value:
            continue
        if section is None:
            doc[key] = value
        else:
            doc[section] = {**_section(doc, section, _ENDPOINT_KEYS), key: value}
    return apply_overrides(cfg, doc)


def load_config(path=None, env: Optional[Mapping] = None) -> RunConfig:
    """Read a YAML config file (optional), overlay .env and environment variables."""
    load_dotenv()
    doc = {}
    if path is not None:
        doc = _read_yaml(path) or {}
        log.debug(f"Loaded config from {path}")
    config = config_from_mapping(doc, env)
    log.debug(f"Config fingerprint {config_fingerprint(config)}")
    return config


def _read_yaml(path):
    path = Path(path)
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: invalid UTF-8 at byte {e.start}")


def load_matrix(path, base: RunConfig) -> List[Tuple[str, RunConfig]]:
    """Labeled run configurations from a matrix file, each a set of overrides on base.

    The file holds a `variants` list; every entry names its `label` and lists the config
    keys it changes, e.g. `{label: miss-25, injection: {locator_miss_prob: 0.25}}`.
    """
    doc = _read_yaml(path)
    if not isinstance(doc, dict) or set(doc) != {"variants"}:
        raise ConfigError(f"{path}: a matrix file holds exactly one key, 'variants'")
    variants = doc["variants"]
    if not isinstance(variants, list) or not variants:
        raise ConfigError(f"{path}: 'variants' must be a non-empty list")

    configs: List[Tuple[str, RunConfig]] = []
    for index, variant in enumerate(variants):
        where = f"{path}: variants[{index}]"
        if not isinstance(variant, dict):
            raise ConfigError(f"{where} must be a mapping")
        overrides = dict(variant)
        label = overrides.pop("label", None)
        if not isinstance(label, str) or not label.strip():
            raise ConfigError(f"{where} needs a non-empty 'label'")
        if any(label == seen for seen, _config in configs):
            raise ConfigError(f"{where}: duplicate label {label!r}")
        try:
            configs.append((label, apply_overrides(base, overrides)))
        except ConfigError as e:
            raise ConfigError(f"{where}: {e}")
    log.debug(f"Loaded {len(configs)} matrix variants from {path}")
    return configs


# Global configuration instance
cfg = RunConfig()
