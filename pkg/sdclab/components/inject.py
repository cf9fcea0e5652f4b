#!/usr/bin/env python3
"""
SDC Injection Component

Perturbs tensors of the unhealthy node according to a statistical profile:
which sites and ranks are affected, how often an element is hit (with a
temporal pattern over optimizer steps) and how strongly (severity
distribution). Every draw is seeded from the profile seed plus the tensor's
coordinates, so a run can be replayed exactly and the event log is the
ground truth for detector scoring.

Key responsibilities:
- Profile types, validation and the preset library (profiles.json)
- Temporal rate schedule (constant, initial spike, rare burst, scheduled)
- Output corruption at hook sites and accumulator corruption inside matmul
- Thread-safe event log with deterministic ordering and exact replay
- Calibration of observed corruption rate against its binomial interval
"""

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .error_handler import ConfigError, ContractViolation
from .model import HOOK_KINDS, HookKind, MatmulSite, Microstep, ModelConfig
from .tensor import DType, Rng, finish, matmul, matmul_accumulator

logger = logging.getLogger(__name__)

MATMUL_INTERNAL = "matmul_internal"
HOOK_SITES: Tuple[str, ...] = tuple(kind.value for kind in HOOK_KINDS)
INJECTION_SITES: Tuple[str, ...] = HOOK_SITES + (MATMUL_INTERNAL,)

PROFILES_FILE = Path(__file__).resolve().parent.parent / "profiles.json"


def _probability(value: float, key_path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise ConfigError(key_path, f"must be a probability in [0, 1], got {value!r}")
    return float(value)


def _positive(value: float, key_path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0 or not math.isfinite(value):
        raise ConfigError(key_path, f"must be a positive finite number, got {value!r}")
    return float(value)


# ---------------------------------------------------------------------------
# Temporal patterns
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    kind = "constant"

    def rate(self, base_rate: float, seed: int, step: int) -> float:
        return base_rate

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class InitialSpike:
    """p_hi for the first spike_steps optimizer steps, p_lo afterwards."""
    p_hi: float
    spike_steps: int
    p_lo: float
    kind = "initial_spike"

    def __post_init__(self):
        _probability(self.p_hi, "profile.temporal.p_hi")
        _probability(self.p_lo, "profile.temporal.p_lo")
        if isinstance(self.spike_steps, bool) or not isinstance(self.spike_steps, int) or self.spike_steps < 0:
            raise ConfigError("profile.temporal.spike_steps", f"must be an integer >= 0, got {self.spike_steps!r}")

    def rate(self, base_rate: float, seed: int, step: int) -> float:
        return self.p_hi if step < self.spike_steps else self.p_lo

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "p_hi": self.p_hi, "spike_steps": self.spike_steps, "p_lo": self.p_lo}


@dataclass(frozen=True)
class RareBurst:
    """Each optimizer step is a burst step with probability burst_prob (seeded); p_burst there, else 0."""
    burst_prob: float
    p_burst: float
    kind = "rare_burst"

    def __post_init__(self):
        _probability(self.burst_prob, "profile.temporal.burst_prob")
        _probability(self.p_burst, "profile.temporal.p_burst")

    def is_burst(self, seed: int, step: int) -> bool:
        return bool(Rng.for_stream(seed, "burst").generator(step).random() < self.burst_prob)

    def rate(self, base_rate: float, seed: int, step: int) -> float:
        return self.p_burst if self.is_burst(seed, step) else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "burst_prob": self.burst_prob, "p_burst": self.p_burst}


@dataclass(frozen=True)
class Scheduled:
    """Rate p on the listed optimizer steps only."""
    steps: Tuple[int, ...]
    p: float
    kind = "scheduled"

    def __post_init__(self):
        steps = tuple(sorted(set(self.steps)))
        if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in steps):
            raise ConfigError("profile.temporal.steps", f"must be integers >= 0, got {self.steps!r}")
        object.__setattr__(self, "steps", steps)
        _probability(self.p, "profile.temporal.p")

    def rate(self, base_rate: float, seed: int, step: int) -> float:
        return self.p if step in self.steps else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "steps": list(self.steps), "p": self.p}


TemporalPattern = Union[Constant, InitialSpike, RareBurst, Scheduled]


# ---------------------------------------------------------------------------
# Severity distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedFactor:
    alpha: float
    kind = "fixed_factor"

    def __post_init__(self):
        _positive(self.alpha, "profile.severity.alpha")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "alpha": self.alpha}


@dataclass(frozen=True)
class LogUniformFactor:
    alpha_lo: float
    alpha_hi: float
    kind = "log_uniform_factor"

    def __post_init__(self):
        _positive(self.alpha_lo, "profile.severity.alpha_lo")
        _positive(self.alpha_hi, "profile.severity.alpha_hi")
        if self.alpha_lo > self.alpha_hi:
            raise ConfigError("profile.severity.alpha_hi", "must be >= alpha_lo")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "alpha_lo": self.alpha_lo, "alpha_hi": self.alpha_hi}


@dataclass(frozen=True)
class BitFlip:
    """Flip one bit, drawn uniformly from [bit_lo, bit_hi] of the 32-bit pattern."""
    bit_lo: int = 0
    bit_hi: int = 30
    kind = "bit_flip"

    def __post_init__(self):
        for key in ("bit_lo", "bit_hi"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 31:
                raise ConfigError(f"profile.severity.{key}", f"must be a bit index in [0, 31], got {value!r}")
        if self.bit_lo > self.bit_hi:
            raise ConfigError("profile.severity.bit_hi", "must be >= bit_lo")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "bit_lo": self.bit_lo, "bit_hi": self.bit_hi}


Severity = Union[FixedFactor, LogUniformFactor, BitFlip]


# ---------------------------------------------------------------------------
# Profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SdcProfile:
    """Statistical description of an unhealthy node; affected_ranks None means every rank."""
    name: str = "healthy"
    sites: FrozenSet[str] = frozenset()
    affected_ranks: Optional[FrozenSet[int]] = None
    rate: float = 0.0
    severity: Severity = field(default_factory=lambda: FixedFactor(2.0))
    temporal: TemporalPattern = field(default_factory=Constant)
    seed: int = 0

    def __post_init__(self):
        sites = frozenset(self.sites)
        unknown = sorted(sites - set(INJECTION_SITES))
        if unknown:
            raise ConfigError("profile.sites", f"unknown injection sites {unknown}")
        object.__setattr__(self, "sites", sites)
        if self.affected_ranks is not None:
            ranks = frozenset(self.affected_ranks)
            if any(isinstance(r, bool) or not isinstance(r, int) or r < 0 for r in ranks):
                raise ConfigError("profile.affected_ranks", f"must be rank indices >= 0, got {sorted(ranks)!r}")
            object.__setattr__(self, "affected_ranks", ranks)
        _probability(self.rate, "profile.rate")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("profile.seed", f"must be an integer, got {self.seed!r}")

    def affects(self, site: str, rank: int) -> bool:
        if site not in self.sites:
            return False
        return self.affected_ranks is None or rank in self.affected_ranks

    @property
    def hook_sites(self) -> Tuple[str, ...]:
        return tuple(site for site in HOOK_SITES if site in self.sites)

    def is_null(self) -> bool:
        """True when no element can ever be corrupted."""
        if not self.sites:
            return True
        temporal = self.temporal
        if isinstance(temporal, Constant):
            return self.rate == 0.0
        if isinstance(temporal, InitialSpike):
            return temporal.p_lo == 0.0 and (temporal.p_hi == 0.0 or temporal.spike_steps == 0)
        if isinstance(temporal, RareBurst):
            return temporal.p_burst == 0.0 or temporal.burst_prob == 0.0
        return temporal.p == 0.0 or not temporal.steps

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "sites": sorted(self.sites),
            "affected_ranks": "all" if self.affected_ranks is None else sorted(self.affected_ranks),
            "rate": self.rate,
            "severity": self.severity.to_dict(),
            "temporal": self.temporal.to_dict(),
            "seed": self.seed,
        }


_TEMPORAL_KEYS = {
    "constant": (Constant, ()),
    "initial_spike": (InitialSpike, ("p_hi", "spike_steps", "p_lo")),
    "rare_burst": (RareBurst, ("burst_prob", "p_burst")),
    "scheduled": (Scheduled, ("steps", "p")),
}

_SEVERITY_KEYS = {
    "fixed_factor": (FixedFactor, ("alpha",)),
    "log_uniform_factor": (LogUniformFactor, ("alpha_lo", "alpha_hi")),
    "bit_flip": (BitFlip, ("bit_lo", "bit_hi")),
}


def _variant_from_dict(data: Any, table: Mapping[str, Tuple[type, Tuple[str, ...]]], key_path: str,
                       optional: Tuple[str, ...] = ()):
    if not isinstance(data, dict):
        raise ConfigError(key_path, "must be an object with a 'kind' key")
    kind = data.get("kind")
    if kind not in table:
        raise ConfigError(f"{key_path}.kind", f"must be one of {sorted(table)}, got {kind!r}")
    cls, keys = table[kind]
    unknown = sorted(set(data) - set(keys) - {"kind"})
    if unknown:
        raise ConfigError(f"{key_path}.{unknown[0]}", "unknown key")
    missing = [key for key in keys if key not in data and key not in optional]
    if missing:
        raise ConfigError(f"{key_path}.{missing[0]}", "missing required key")
    kwargs = {key: data[key] for key in keys if key in data}
    if cls is Scheduled:
        if not isinstance(kwargs["steps"], list):
            raise ConfigError(f"{key_path}.steps", "must be a list of step indices")
        kwargs["steps"] = tuple(kwargs["steps"])
    return cls(**kwargs)


_PROFILE_KEYS = {"name", "sites", "affected_ranks", "rate", "severity", "temporal", "seed"}


def profile_from_dict(data: Any, key_path: str = "profile") -> SdcProfile:
    """Strictly parse a profile object; errors carry the dotted key path."""
    if not isinstance(data, dict):
        raise ConfigError(key_path, "must be a preset name or a profile object")
    unknown = sorted(set(data) - _PROFILE_KEYS)
    if unknown:
        raise ConfigError(f"{key_path}.{unknown[0]}", "unknown key")
    sites = data.get("sites", [])
    if not isinstance(sites, list):
        raise ConfigError(f"{key_path}.sites", "must be a list")
    ranks = data.get("affected_ranks", "all")
    if ranks != "all" and not isinstance(ranks, list):
        raise ConfigError(f"{key_path}.affected_ranks", "must be 'all' or a list of ranks")
    try:
        kwargs: Dict[str, Any] = {
            "name": data.get("name", "custom"),
            "sites": frozenset(sites),
            "affected_ranks": None if ranks == "all" else frozenset(ranks),
            "rate": data.get("rate", 0.0),
            "seed": data.get("seed", 0),
        }
        if "severity" in data:
            kwargs["severity"] = _variant_from_dict(data["severity"], _SEVERITY_KEYS, "profile.severity",
                                                    optional=("bit_lo", "bit_hi"))
        if "temporal" in data:
            kwargs["temporal"] = _variant_from_dict(data["temporal"], _TEMPORAL_KEYS, "profile.temporal")
        return SdcProfile(**kwargs)
    except ConfigError as e:
        if key_path != "profile" and e.key_path.startswith("profile"):
            message = e.message.split(": ", 1)[-1]
            raise ConfigError(key_path + e.key_path[len("profile"):], message) from None
        raise
    except TypeError as e:
        raise ConfigError(key_path, f"invalid profile entry: {e}") from None


def _read_library(path: Optional[Path]) -> Dict[str, Dict[str, Any]]:
    path = Path(path) if path else PROFILES_FILE
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("profile", f"cannot read preset library {path}: {e}") from e
    profiles = raw.get("profiles") if isinstance(raw, dict) else None
    if not isinstance(profiles, dict):
        raise ConfigError("profiles", f"{path} has no 'profiles' object")
    return profiles


def preset_document(name: str, path: Optional[Path] = None) -> Dict[str, Any]:
    """Raw body of one preset with its name filled in."""
    library = _read_library(path)
    if name not in library:
        raise ConfigError("profile", f"unknown preset {name!r}; available: {sorted(library)}")
    body = dict(library[name])
    body.setdefault("name", name)
    return body


def load_presets(path: Optional[Path] = None) -> Dict[str, SdcProfile]:
    """Parse every preset of the shipped library (or another file of the same layout)."""
    presets = {}
    for name, body in _read_library(path).items():
        body = dict(body)
        body.setdefault("name", name)
        presets[name] = profile_from_dict(body, key_path=f"profiles.{name}")
    return presets


def load_preset(name: str, path: Optional[Path] = None) -> SdcProfile:
    return profile_from_dict(preset_document(name, path), key_path=f"profiles.{name}")


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultEvent:
    """One corrupted element; bit is -1 for multiplicative corruption."""
    step: int
    microstep: int
    site: str
    layer: int
    rank: int
    index: int
    factor: float
    bit: int = -1
    target: str = ""

    def sort_key(self) -> Tuple:
        return (self.microstep, INJECTION_SITES.index(self.site), self.layer, self.rank, self.target, self.index)


class EventLog:
    """Append-only, thread-safe record of every injected fault."""

    def __init__(self):
        self._events: List[FaultEvent] = []
        self._lock = threading.Lock()

    def extend(self, events: Iterable[FaultEvent]):
        events = list(events)
        if not events:
            return
        with self._lock:
            self._events.extend(events)

    def events(self) -> List[FaultEvent]:
        with self._lock:
            return sorted(self._events, key=FaultEvent.sort_key)

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def steps_with_events(self, sites: Optional[Iterable[str]] = None) -> List[int]:
        wanted = None if sites is None else set(sites)
        with self._lock:
            return sorted({e.step for e in self._events if wanted is None or e.site in wanted})

    def microsteps_with_events(self, sites: Optional[Iterable[str]] = None) -> List[int]:
        wanted = None if sites is None else set(sites)
        with self._lock:
            return sorted({e.microstep for e in self._events if wanted is None or e.site in wanted})

    def first_step(self) -> Optional[int]:
        steps = self.steps_with_events()
        return steps[0] if steps else None


def replay(tensor: np.ndarray, events: Iterable[FaultEvent]) -> np.ndarray:
    """Re-apply logged corruption to a clean tensor."""
    out = np.array(tensor, dtype=np.float32, copy=True)
    flat = out.reshape(-1)
    for event in events:
        if event.bit >= 0:
            bits = flat[event.index:event.index + 1].view(np.uint32)
            bits ^= np.uint32(1 << event.bit)
        else:
            flat[event.index] = flat[event.index] * np.float32(event.factor)
    return out


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

def temporal_rate(profile: SdcProfile, step: int) -> float:
    """Per-element corruption probability in effect during optimizer step `step`."""
    if step < 0:
        raise ContractViolation("step must be >= 0", step=step)
    return profile.temporal.rate(profile.rate, profile.seed, step)


def burst_steps(profile: SdcProfile, horizon: int) -> List[int]:
    """Steps in [0, horizon) whose effective rate is nonzero (the burst schedule for rare_burst)."""
    temporal = profile.temporal
    if isinstance(temporal, RareBurst):
        return [s for s in range(horizon) if temporal.is_burst(profile.seed, s)]
    return [s for s in range(horizon) if temporal_rate(profile, s) > 0.0]


def _apply_severity(flat: np.ndarray, rate: float, severity: Severity,
                    gen: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt selected elements of flat in place; returns (indices, factors, bits) of changed elements."""
    mask = gen.random(flat.size) < rate
    idx = np.flatnonzero(mask)
    empty = (idx[:0], np.zeros(0), np.zeros(0, dtype=np.int64))
    if idx.size == 0:
        return empty
    old = flat[idx].astype(np.float32)
    bits = np.full(idx.size, -1, dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if isinstance(severity, FixedFactor):
            factors = np.full(idx.size, np.float32(severity.alpha), dtype=np.float32)
            new = old * factors
        elif isinstance(severity, LogUniformFactor):
            draws = gen.uniform(math.log(severity.alpha_lo), math.log(severity.alpha_hi), size=idx.size)
            factors = np.exp(draws).astype(np.float32)
            new = old * factors
        else:
            bits = gen.integers(severity.bit_lo, severity.bit_hi + 1, size=idx.size, dtype=np.int64)
            new = (old.view(np.uint32) ^ (np.uint32(1) << bits.astype(np.uint32))).view(np.float32)
            factors = new.astype(np.float64) / old.astype(np.float64)
    changed = new.view(np.uint32) != old.view(np.uint32)
    if not np.any(changed):
        return empty
    flat[idx[changed]] = new[changed]
    return idx[changed], np.asarray(factors)[changed], bits[changed]


def _events(idx, factors, bits, microstep: Microstep, site: str, layer: int, rank: int,
            target: str = "") -> List[FaultEvent]:
    return [
        FaultEvent(step=microstep.step, microstep=microstep.index, site=site, layer=layer, rank=rank,
                   index=int(i), factor=float(f), bit=int(b), target=target)
        for i, f, b in zip(idx, factors, bits)
    ]


@dataclass
class CorruptionResult:
    tensor: np.ndarray
    events: List[FaultEvent]


def corrupt(tensor: np.ndarray, profile: SdcProfile, site: str, layer: int, rank: int,
            microstep: Microstep) -> CorruptionResult:
    """Corrupt one hook tensor; unaffected (site, rank) pairs pass through untouched."""
    if not profile.affects(site, rank):
        return CorruptionResult(tensor=tensor, events=[])
    rate = temporal_rate(profile, microstep.step)
    if rate <= 0.0:
        return CorruptionResult(tensor=tensor, events=[])
    gen = Rng.for_stream(profile.seed, "inject", site).generator(layer, rank, microstep.index)
    out = np.array(tensor, dtype=np.float32, copy=True)
    idx, factors, bits = _apply_severity(out.reshape(-1), rate, profile.severity, gen)
    if idx.size == 0:
        return CorruptionResult(tensor=tensor, events=[])
    return CorruptionResult(tensor=out, events=_events(idx, factors, bits, microstep, site, layer, rank))


def matmul_target(site: MatmulSite) -> str:
    return f"{site.name}/{site.direction.value}"


def corrupt_matmul_accumulator(a: np.ndarray, b: np.ndarray, profile: SdcProfile, site: MatmulSite,
                               microstep: Microstep, dtype: DType = DType.F32) -> CorruptionResult:
    """Matmul whose finished accumulator values are perturbed at seeded (i, j) before storage."""
    if not site.linear or not profile.affects(MATMUL_INTERNAL, site.rank):
        return CorruptionResult(tensor=matmul(a, b, dtype), events=[])
    rate = temporal_rate(profile, microstep.step)
    if rate <= 0.0:
        return CorruptionResult(tensor=matmul(a, b, dtype), events=[])
    target = matmul_target(site)
    gen = Rng.for_stream(profile.seed, "inject", MATMUL_INTERNAL, target).generator(
        site.layer, site.rank, microstep.index)
    acc = matmul_accumulator(a, b)
    idx, factors, bits = _apply_severity(acc.reshape(-1), rate, profile.severity, gen)
    events = _events(idx, factors, bits, microstep, MATMUL_INTERNAL, site.layer, site.rank, target)
    return CorruptionResult(tensor=finish(acc, dtype, "matmul"), events=events)


class Injector:
    """
    Binds a profile to one node.

    Call begin() with the current microstep, then use corrupt_hook and matmul
    as the node's hook and matmul functions. Every event lands in the log.
    """

    def __init__(self, profile: SdcProfile, dtype: DType = DType.F32, log: Optional[EventLog] = None):
        self.profile = profile
        self.dtype = dtype
        self.log = log if log is not None else EventLog()
        self._microstep: Optional[Microstep] = None

    @property
    def microstep(self) -> Microstep:
        if self._microstep is None:
            raise ContractViolation("injector used before begin()")
        return self._microstep

    def begin(self, microstep: Microstep):
        self._microstep = microstep

    @property
    def corrupts_matmuls(self) -> bool:
        return MATMUL_INTERNAL in self.profile.sites

    def corrupt_hook(self, kind: HookKind, layer: int, tensors: List[np.ndarray]) -> List[np.ndarray]:
        out = []
        for rank, tensor in enumerate(tensors):
            result = corrupt(tensor, self.profile, kind.value, layer, rank, self.microstep)
            self.log.extend(result.events)
            out.append(result.tensor)
        return out

    def matmul(self, a: np.ndarray, b: np.ndarray, site: MatmulSite) -> np.ndarray:
        result = corrupt_matmul_accumulator(a, b, self.profile, site, self.microstep, self.dtype)
        self.log.extend(result.events)
        return result.tensor


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationReport:
    profile: str
    microsteps: int
    start_step: int
    elements: int
    corrupted: int
    expected: float
    ci_low: float
    ci_high: float
    confidence: float

    @property
    def observed_rate(self) -> float:
        return self.corrupted / self.elements if self.elements else 0.0

    @property
    def expected_rate(self) -> float:
        return self.expected / self.elements if self.elements else 0.0

    @property
    def within(self) -> bool:
        return self.ci_low <= self.corrupted <= self.ci_high

    def to_row(self) -> Dict[str, Any]:
        return {
            "profile": self.profile,
            "microsteps": self.microsteps,
            "elements": self.elements,
            "corrupted": self.corrupted,
            "observed_rate": self.observed_rate,
            "expected_rate": self.expected_rate,
            "ci_low_rate": self.ci_low / self.elements if self.elements else 0.0,
            "ci_high_rate": self.ci_high / self.elements if self.elements else 0.0,
            "within": int(self.within),
        }


def calibrate(profile: SdcProfile, config: ModelConfig, microsteps: int = 100, start_step: int = 0,
              confidence: float = 0.99) -> CalibrationReport:
    """Corrupt all-ones hook-sized tensors and compare the hit count with its binomial interval.

    The interval is the normal approximation around the summed expectation
    sum_j rate_j * N_j with variance sum_j N_j * rate_j * (1 - rate_j).
    """
    if microsteps < 1:
        raise ContractViolation("calibration needs at least one microstep", microsteps=microsteps)
    sites = profile.hook_sites
    if not sites:
        raise ContractViolation("calibration needs at least one hook site in the profile",
                                profile=profile.name)
    ranks = [r for r in range(config.tp_degree) if profile.affected_ranks is None or r in profile.affected_ranks]
    shape = (config.micro_batch, config.seq_len, config.hidden)
    clean = np.ones(shape, dtype=np.float32)
    per_tensor = int(clean.size)

    first = start_step * config.grad_accum
    elements = corrupted = 0
    mean = variance = 0.0
    for j in range(first, first + microsteps):
        microstep = Microstep.of(j // config.grad_accum, j % config.grad_accum, config.grad_accum)
        rate = temporal_rate(profile, microstep.step)
        n = per_tensor * len(sites) * config.layers * len(ranks)
        elements += n
        mean += n * rate
        variance += n * rate * (1.0 - rate)
        for site in sites:
            for layer in range(config.layers):
                for rank in ranks:
                    corrupted += len(corrupt(clean, profile, site, layer, rank, microstep).events)

    z = NormalDist().inv_cdf(0.5 + confidence / 2.0)
    half_width = z * math.sqrt(variance)
    report = CalibrationReport(profile=profile.name, microsteps=microsteps, start_step=start_step,
                               elements=elements, corrupted=corrupted, expected=mean,
                               ci_low=mean - half_width, ci_high=mean + half_width, confidence=confidence)
    logger.info(f"Calibration {profile.name}: observed rate {report.observed_rate:.6g}, "
                f"expected {report.expected_rate:.6g} ({'within' if report.within else 'OUTSIDE'} "
                f"{confidence:.0%} interval)")
    return report
