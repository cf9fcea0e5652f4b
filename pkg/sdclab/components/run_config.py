#!/usr/bin/env python3
"""
Run Configuration Component

Strict JSON configuration for one experiment run. Values are layered
flag > config file > shipped defaults (sdclab/config.json); every key is
validated and unknown keys are rejected with their dotted path.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .abft import RoundoffConvention
from .error_handler import ConfigError
from .inject import SdcProfile, preset_document, profile_from_dict
from .lockstep import TrainingSettings
from .metrics import SeverityAverage
from .model import ModelConfig, Params, init_params
from .optimizer import AdamHyper, LrSchedule

logger = logging.getLogger(__name__)

PROTOCOLS: Tuple[str, ...] = ("rq1", "rq2", "rq3", "shadow", "abft", "gradcheck", "calibrate")
LOG_LEVELS: Tuple[str, ...] = ("DEBUG", "INFO", "WARNING", "ERROR")
DEFAULTS_FILE = Path(__file__).resolve().parent.parent / "config.json"
OUT_ENV = "SDCLAB_OUT"
DEFAULT_OUT_ROOT = "runs"

_TOP_KEYS = {"protocol", "seed", "steps", "global_batch", "profile", "out_dir", "snapshot_steps",
             "snapshot_every", "init_snapshot", "workers", "log_level"}
_SECTIONS: Dict[str, Tuple[str, ...]] = {
    "model": ("layers", "hidden", "heads", "kv_heads", "seq_len", "vocab", "tp_degree", "micro_batch",
              "grad_accum", "dtype", "ffn_multiplier", "init_scheme"),
    "optimizer": ("lr", "beta1", "beta2", "eps", "weight_decay", "max_grad_norm", "warmup_fraction",
                  "min_lr_ratio"),
    "metrics": ("severity_average", "smoothing"),
    "abft": ("roundoff",),
    "calibrate": ("microsteps", "start_step"),
    "gradcheck": ("step_size", "tolerance", "max_elements_per_tensor"),
    "rq3": ("seed_baseline", "baseline_seed_offset", "loss_spike_ratio"),
}
# Keys that cannot change any metric file and so stay out of the config hash
_UNHASHED = ("out_dir", "workers", "log_level")


def _integer(value: Any, key_path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key_path, f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key_path, f"must be >= {minimum}, got {value}")
    return value


def _number(value: Any, key_path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key_path, f"must be a number, got {value!r}")
    return float(value)


def _boolean(value: Any, key_path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(key_path, f"must be true or false, got {value!r}")
    return value


def _choice(value: Any, key_path: str, choices) -> str:
    if value not in choices:
        raise ConfigError(key_path, f"must be one of {list(choices)}, got {value!r}")
    return value


def _check_keys(document: Any, origin: str):
    if not isinstance(document, dict):
        raise ConfigError(origin, "configuration must be a JSON object")
    for key, value in document.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "must be an object")
            unknown = sorted(set(value) - set(_SECTIONS[key]))
            if unknown:
                raise ConfigError(f"{key}.{unknown[0]}", "unknown key")
        elif key not in _TOP_KEYS:
            raise ConfigError(key, "unknown key")


def _merge(base: Dict[str, Any], layer: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in layer.items():
        if key in _SECTIONS and isinstance(value, dict):
            merged.setdefault(key, {}).update(copy.deepcopy(value))
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_json(path: Union[str, Path], key_path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise ConfigError(key_path, f"file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(key_path, f"cannot read {path}: {e}") from None


@dataclass(frozen=True)
class MetricsConfig:
    severity_average: SeverityAverage = SeverityAverage.MISMATCHING
    smoothing: float = 0.1


@dataclass(frozen=True)
class CalibrateConfig:
    microsteps: int = 100
    start_step: int = 0


@dataclass(frozen=True)
class GradCheckConfig:
    step_size: float = 1e-5
    tolerance: float = 1e-2
    max_elements_per_tensor: Optional[int] = None


@dataclass(frozen=True)
class Rq3Config:
    seed_baseline: bool = False
    baseline_seed_offset: int = 1
    loss_spike_ratio: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    """One fully validated run. `document` is the merged JSON the run was built from."""
    protocol: str
    seed: int
    steps: int
    global_batch: int
    profile: SdcProfile
    model: ModelConfig
    hyper: AdamHyper
    schedule: LrSchedule
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    roundoff: RoundoffConvention = RoundoffConvention.FRAMEWORK_EPS
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    gradcheck: GradCheckConfig = field(default_factory=GradCheckConfig)
    rq3: Rq3Config = field(default_factory=Rq3Config)
    out_dir: Optional[str] = None
    snapshot_steps: Tuple[int, ...] = ()
    snapshot_every: int = 0
    init_snapshot: Optional[str] = None
    workers: int = 1
    log_level: str = "INFO"
    document: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def replicas(self) -> int:
        """Data-parallel replicas contributing to one optimizer step."""
        return 2 if self.protocol == "shadow" else 1

    def to_dict(self) -> Dict[str, Any]:
        """Resolved configuration echoed into the manifest (profile expanded)."""
        resolved = copy.deepcopy(self.document)
        resolved["profile"] = self.profile.to_dict()
        resolved["global_batch"] = self.global_batch
        return resolved

    def config_hash(self) -> str:
        hashed = {key: value for key, value in self.to_dict().items() if key not in _UNHASHED}
        canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        """Explicit out_dir, else <SDCLAB_OUT or runs>/<protocol>-<hash prefix>."""
        if self.out_dir:
            return Path(self.out_dir)
        root = os.environ.get(OUT_ENV) or DEFAULT_OUT_ROOT
        return Path(root) / f"{self.protocol}-{self.config_hash()[:12]}"

    def should_snapshot(self, step: int) -> bool:
        if step in self.snapshot_steps:
            return True
        return self.snapshot_every > 0 and (step + 1) % self.snapshot_every == 0

    def training_settings(self, initial: Optional[Params] = None, progress: bool = False) -> TrainingSettings:
        if initial is not None:
            expected = init_params(self.model, self.seed)
            if set(initial) != set(expected):
                raise ConfigError("init_snapshot", "snapshot tensors do not match the model's parameters")
            for name, value in expected.items():
                if initial[name].shape != value.shape:
                    raise ConfigError("init_snapshot", f"shape mismatch for {name}: "
                                                       f"{initial[name].shape} vs {value.shape}")
        return TrainingSettings(model=self.model, hyper=self.hyper, schedule=self.schedule, seed=self.seed,
                                workers=self.workers, severity_average=self.metrics.severity_average,
                                initial=initial, progress=progress)


def resolve_profile(value: Any, seed: int) -> SdcProfile:
    """Preset name or inline object; a profile without its own seed injects with the run seed."""
    if isinstance(value, str):
        body = preset_document(value)
        key_path = f"profiles.{value}"
    elif isinstance(value, dict):
        body = dict(value)
        key_path = "profile"
    else:
        raise ConfigError("profile", "must be a preset name or a profile object")
    explicit_seed = "seed" in body
    profile = profile_from_dict(body, key_path=key_path)
    return profile if explicit_seed else replace(profile, seed=seed)


def _build(doc: Dict[str, Any]) -> RunConfig:
    protocol = _choice(doc.get("protocol"), "protocol", PROTOCOLS)
    seed = _integer(doc.get("seed", 0), "seed", 0)
    steps = _integer(doc.get("steps"), "steps", 1)
    workers = _integer(doc.get("workers", 1), "workers", 1)
    log_level = _choice(str(doc.get("log_level", "INFO")).upper(), "log_level", LOG_LEVELS)

    model_doc = doc.get("model", {})
    try:
        model = ModelConfig(**model_doc)
    except TypeError as e:
        raise ConfigError("model", str(e)) from None

    opt = {key: _number(value, f"optimizer.{key}") for key, value in doc.get("optimizer", {}).items()}
    schedule_keys = ("warmup_fraction", "min_lr_ratio")
    hyper = AdamHyper(**{k: v for k, v in opt.items() if k not in schedule_keys})
    schedule = LrSchedule(total_steps=steps, **{k: v for k, v in opt.items() if k in schedule_keys})

    metrics_doc = doc.get("metrics", {})
    try:
        average = SeverityAverage(metrics_doc.get("severity_average", SeverityAverage.MISMATCHING.value))
    except ValueError:
        raise ConfigError("metrics.severity_average",
                          f"must be one of {[a.value for a in SeverityAverage]}") from None
    smoothing = _number(metrics_doc.get("smoothing", 0.1), "metrics.smoothing")
    if not 0.0 < smoothing <= 1.0:
        raise ConfigError("metrics.smoothing", f"must lie in (0, 1], got {smoothing}")

    try:
        roundoff = RoundoffConvention(doc.get("abft", {}).get("roundoff", RoundoffConvention.FRAMEWORK_EPS.value))
    except ValueError:
        raise ConfigError("abft.roundoff", f"must be one of {[c.value for c in RoundoffConvention]}") from None

    cal_doc = doc.get("calibrate", {})
    calibrate = CalibrateConfig(microsteps=_integer(cal_doc.get("microsteps", 100), "calibrate.microsteps", 1),
                                start_step=_integer(cal_doc.get("start_step", 0), "calibrate.start_step", 0))

    gc_doc = doc.get("gradcheck", {})
    limit = gc_doc.get("max_elements_per_tensor")
    gradcheck = GradCheckConfig(
        step_size=_number(gc_doc.get("step_size", 1e-5), "gradcheck.step_size"),
        tolerance=_number(gc_doc.get("tolerance", 1e-2), "gradcheck.tolerance"),
        max_elements_per_tensor=None if limit is None else _integer(limit, "gradcheck.max_elements_per_tensor", 1),
    )
    if not gradcheck.step_size > 0:
        raise ConfigError("gradcheck.step_size", "must be > 0")

    rq3_doc = doc.get("rq3", {})
    rq3 = Rq3Config(
        seed_baseline=_boolean(rq3_doc.get("seed_baseline", False), "rq3.seed_baseline"),
        baseline_seed_offset=_integer(rq3_doc.get("baseline_seed_offset", 1), "rq3.baseline_seed_offset", 1),
        loss_spike_ratio=_number(rq3_doc.get("loss_spike_ratio", 2.0), "rq3.loss_spike_ratio"),
    )
    if not rq3.loss_spike_ratio > 1.0:
        raise ConfigError("rq3.loss_spike_ratio", "must be > 1")

    snapshot_steps = doc.get("snapshot_steps", [])
    if not isinstance(snapshot_steps, list):
        raise ConfigError("snapshot_steps", "must be a list of step indices")
    snapshot_steps = tuple(sorted({_integer(s, "snapshot_steps", 0) for s in snapshot_steps}))
    snapshot_every = _integer(doc.get("snapshot_every", 0), "snapshot_every", 0)
    for key in ("out_dir", "init_snapshot"):
        if doc.get(key) is not None and not isinstance(doc[key], str):
            raise ConfigError(key, "must be a path string or null")

    profile = resolve_profile(doc.get("profile", "healthy"), seed)
    replicas = 2 if protocol == "shadow" else 1
    expected_batch = model.micro_batch * model.grad_accum * replicas
    global_batch = doc.get("global_batch")
    if global_batch is None:
        global_batch = expected_batch
    elif _integer(global_batch, "global_batch", 1) != expected_batch:
        raise ConfigError("global_batch", f"must equal micro_batch * grad_accum * replicas = {expected_batch}, "
                                          f"got {global_batch}")

    return RunConfig(protocol=protocol, seed=seed, steps=steps, global_batch=global_batch, profile=profile,
                     model=model, hyper=hyper, schedule=schedule,
                     metrics=MetricsConfig(severity_average=average, smoothing=smoothing),
                     roundoff=roundoff, calibrate=calibrate, gradcheck=gradcheck, rq3=rq3,
                     out_dir=doc.get("out_dir"), snapshot_steps=snapshot_steps, snapshot_every=snapshot_every,
                     init_snapshot=doc.get("init_snapshot"), workers=workers, log_level=log_level,
                     document=doc)


def parse_config(source: Union[str, Path, Mapping[str, Any], None] = None,
                 overrides: Optional[Mapping[str, Any]] = None,
                 defaults_path: Optional[Path] = None) -> RunConfig:
    """
    Build a RunConfig from a file path or an already-loaded mapping.

    `overrides` uses the same nested layout as the file and wins over it;
    None values in overrides are ignored (unset CLI flags).
    """
    defaults = _read_json(defaults_path or DEFAULTS_FILE, "defaults")
    _check_keys(defaults, "defaults")
    if source is None:
        document: Dict[str, Any] = {}
    elif isinstance(source, Mapping):
        document = dict(source)
    else:
        document = _read_json(source, "config")
    _check_keys(document, "config")

    merged = _merge(defaults, document)
    if overrides:
        layer = {key: value for key, value in overrides.items() if value is not None}
        _check_keys(layer, "overrides")
        merged = _merge(merged, layer)

    config = _build(merged)
    logger.debug(f"Parsed {config.protocol} config, hash {config.config_hash()[:12]}")
    return config
