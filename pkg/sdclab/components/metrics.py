#!/usr/bin/env python3
"""
Metrics Component

Mismatch frequency and severity between paired healthy/unhealthy tensors,
plus the gradient noise-to-signal ratio and its running worst case.

A mismatch is any element whose stored bit pattern differs. Frequency per
layer is the mismatch count over TP*MBS*L*H and is averaged over layers;
severity is the mean relative difference per (rank, layer), maxed over ranks
and then over layers. All arithmetic is float64 with ascending-index sums.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .error_handler import ContractViolation
from .model import HookKind, HookSite, Microstep, ModelConfig
from .tensor import sequential_sum

logger = logging.getLogger(__name__)


class SeverityAverage(str, Enum):
    """Which entries the relative-difference average runs over"""
    MISMATCHING = "mismatching"
    REFERENCE_NONZERO = "reference_nonzero"


@dataclass(frozen=True)
class SubmoduleCapture:
    """Healthy and unhealthy tensors seen at one hook site, captured before overwrite."""
    site: HookSite
    microstep: Microstep
    healthy: np.ndarray
    unhealthy: np.ndarray

    def __post_init__(self):
        if self.healthy.shape != self.unhealthy.shape or self.healthy.dtype != self.unhealthy.dtype:
            raise ContractViolation("capture pair differs in layout", site=self.site,
                                    healthy=self.healthy.shape, unhealthy=self.unhealthy.shape)


@dataclass(frozen=True)
class SeverityResult:
    sev: float
    zero_reference_count: int
    nonfinite_count: int


@dataclass(frozen=True)
class LayerMismatch:
    layer: int
    mismatches: int
    freq: float
    sev: float
    zero_reference_count: int
    nonfinite_count: int


@dataclass(frozen=True)
class MismatchReport:
    """One row per (site kind, microstep)."""
    step: int
    microstep: int
    site: HookKind
    freq: float
    sev: float
    zero_reference_count: int
    nonfinite_count: int
    layers: Tuple[LayerMismatch, ...]


def _bit_view(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.itemsize == 4:
        return a.view(np.uint32)
    if a.dtype.itemsize == 8:
        return a.view(np.uint64)
    raise ContractViolation("unsupported element width for bit comparison", dtype=str(a.dtype))


def mismatch_mask(healthy: np.ndarray, unhealthy: np.ndarray) -> np.ndarray:
    return _bit_view(healthy) != _bit_view(unhealthy)


def count_mismatches(healthy: np.ndarray, unhealthy: np.ndarray) -> int:
    if healthy.shape != unhealthy.shape or healthy.dtype != unhealthy.dtype:
        raise ContractViolation("mismatch count needs equal layouts")
    return int(np.count_nonzero(mismatch_mask(healthy, unhealthy)))


def relative_severity(healthy: np.ndarray, unhealthy: np.ndarray,
                      average: SeverityAverage = SeverityAverage.MISMATCHING) -> SeverityResult:
    """Mean of |f' - f| / |f| over positions with f != 0 and finite f'.

    MISMATCHING averages over the nonzero entries of the relative-difference
    tensor, REFERENCE_NONZERO over every position with f != 0. Positions with
    f == 0 and f' != 0 are only counted; so are non-finite f'.
    """
    f = np.asarray(healthy, dtype=np.float64).reshape(-1)
    g = np.asarray(unhealthy, dtype=np.float64).reshape(-1)
    finite = np.isfinite(g)
    nonfinite = int(np.count_nonzero(~finite))
    reference = f != 0.0
    zero_reference = int(np.count_nonzero(~reference & finite & (g != 0.0)))

    valid = reference & finite
    rel = np.abs(g[valid] - f[valid]) / np.abs(f[valid])
    if average == SeverityAverage.MISMATCHING:
        rel = rel[rel != 0.0]
    if rel.size == 0:
        return SeverityResult(0.0, zero_reference, nonfinite)
    return SeverityResult(float(sequential_sum(rel, axis=0)) / rel.size, zero_reference, nonfinite)


def _by_layer(captures: Sequence[SubmoduleCapture], config: ModelConfig) -> List[List[SubmoduleCapture]]:
    """Group captures by layer in rank order; every (layer, rank) must be present exactly once."""
    table: Dict[Tuple[int, int], SubmoduleCapture] = {}
    for capture in captures:
        key = (capture.site.layer, capture.site.rank)
        if key in table:
            raise ContractViolation("duplicate capture", layer=key[0], rank=key[1])
        table[key] = capture
    grouped = []
    for layer in range(config.layers):
        row = []
        for rank in range(config.tp_degree):
            if (layer, rank) not in table:
                raise ContractViolation("missing capture", layer=layer, rank=rank)
            row.append(table[(layer, rank)])
        grouped.append(row)
    if len(table) != config.layers * config.tp_degree:
        raise ContractViolation("capture outside the configured layers or ranks")
    return grouped


def layer_mismatches(captures: Sequence[SubmoduleCapture], config: ModelConfig,
                     average: SeverityAverage = SeverityAverage.MISMATCHING) -> List[LayerMismatch]:
    denominator = config.hook_elements
    out = []
    for layer, row in enumerate(_by_layer(captures, config)):
        mismatches = 0
        sev = 0.0
        zero_ref = nonfinite = 0
        for capture in row:
            count = count_mismatches(capture.healthy, capture.unhealthy)
            mismatches += count
            if count:
                result = relative_severity(capture.healthy, capture.unhealthy, average)
                sev = max(sev, result.sev)
                zero_ref += result.zero_reference_count
                nonfinite += result.nonfinite_count
        out.append(LayerMismatch(layer=layer, mismatches=mismatches, freq=mismatches / denominator,
                                 sev=sev, zero_reference_count=zero_ref, nonfinite_count=nonfinite))
    return out


def mismatch_frequency(captures: Sequence[SubmoduleCapture], config: ModelConfig) -> float:
    """Per-layer mismatch fraction over TP*MBS*L*H, averaged over layers."""
    layers = layer_mismatches(captures, config)
    total = 0.0
    for entry in layers:
        total += entry.freq
    return total / len(layers)


def mismatch_severity(captures: Sequence[SubmoduleCapture], config: ModelConfig,
                      average: SeverityAverage = SeverityAverage.MISMATCHING) -> float:
    """Max over layers of the max over ranks of the mean relative difference."""
    return max(entry.sev for entry in layer_mismatches(captures, config, average))


class Referee:
    """
    Does all metric arithmetic for a lock-step pair.

    Lives on the healthy side of the comparison and is never handed to an
    injector, so corrupted hardware cannot touch the numbers it reports.
    """

    def __init__(self, config: ModelConfig, average: SeverityAverage = SeverityAverage.MISMATCHING):
        self.config = config
        self.average = SeverityAverage(average)

    def report(self, kind: HookKind, microstep: Microstep,
               captures: Sequence[SubmoduleCapture]) -> MismatchReport:
        for capture in captures:
            if capture.site.kind != kind or capture.microstep != microstep:
                raise ContractViolation("capture belongs to another site or microstep", site=capture.site)
        layers = layer_mismatches(captures, self.config, self.average)
        freq = 0.0
        for entry in layers:
            freq += entry.freq
        freq /= len(layers)
        sev = max(entry.sev for entry in layers)
        report = MismatchReport(
            step=microstep.step,
            microstep=microstep.index,
            site=kind,
            freq=freq,
            sev=sev,
            zero_reference_count=sum(entry.zero_reference_count for entry in layers),
            nonfinite_count=sum(entry.nonfinite_count for entry in layers),
            layers=tuple(layers),
        )
        if report.freq > 0:
            logger.debug(f"{kind.value} microstep {microstep.index}: freq={report.freq:.3e} sev={report.sev:.3e}")
        return report


# ---------------------------------------------------------------------------
# Gradient noise-to-signal
# ---------------------------------------------------------------------------

def gradient_ratio(diff_l2: float, truth_l2: float) -> Tuple[float, bool]:
    """(ratio, degenerate): a zero truth norm with a nonzero difference is degenerate (ratio inf)."""
    if truth_l2 == 0.0:
        if diff_l2 == 0.0:
            return 0.0, False
        return math.inf, True
    return diff_l2 / truth_l2, False


def wcnts(ratios: Sequence[float], degenerate: Optional[Sequence[bool]] = None) -> float:
    """Worst-case noise-to-signal ratio: max of the non-degenerate ratios (0 if none)."""
    worst = 0.0
    for i, ratio in enumerate(ratios):
        if degenerate is not None and degenerate[i]:
            continue
        if not math.isfinite(ratio):
            continue
        worst = max(worst, ratio)
    return worst
