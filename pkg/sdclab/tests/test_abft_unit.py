#!/usr/bin/env python3
"""
Unit tests for the ABFT component

Tests cover:
- Unit roundoff conventions and the datatype gate
- Checksum verdicts for clean and corrupted products
- The matmul monitor, flag-rate aggregation and flag frequency under injection
- Row-sum shift estimate
- A monitored training run: accumulator faults are flagged, output faults are not
"""

import math
import sys
from decimal import Decimal
from pathlib import Path
from statistics import NormalDist

import numpy as np
import pytest

# Add parent directory to path for imports
parent_dir = Path(__file__).parent.parent.parent
sys.path.append(str(parent_dir))

from sdclab.components.abft import (
    AbftCheck,
    AbftMonitor,
    AbftRecord,
    RoundoffConvention,
    checked_matmul,
    estimate_row_sum_shift,
    flag_rate_report,
    precision_gate,
    run_abft,
    unit_roundoff,
)
from sdclab.components.error_handler import ContractViolation, PrecisionUnsupported
from sdclab.components.inject import HOOK_SITES, FixedFactor, Injector, SdcProfile
from sdclab.components.lockstep import TrainingSettings
from sdclab.components.model import MatmulDirection, MatmulSite, Microstep, ModelConfig
from sdclab.components.optimizer import LrSchedule
from sdclab.components.tensor import DType, matmul

LINEAR = MatmulSite(layer=0, rank=1, name="attn.wq", direction=MatmulDirection.FWD)
SCORES = MatmulSite(layer=0, rank=1, name="attn.scores", direction=MatmulDirection.FWD, linear=False)


def tiny_settings(steps: int = 2) -> TrainingSettings:
    model = ModelConfig(layers=1, hidden=16, heads=4, kv_heads=2, seq_len=8, vocab=16,
                        tp_degree=2, grad_accum=2)
    return TrainingSettings(model=model, schedule=LrSchedule(total_steps=steps), seed=0)


def random_pair(seed: int, m: int, k: int, n: int):
    gen = np.random.Generator(np.random.PCG64(seed))
    return (gen.standard_normal((m, k)).astype(np.float32),
            gen.standard_normal((k, n)).astype(np.float32))


class TestRoundoffAndGate:
    """Test the datatype gate"""

    def test_framework_eps(self):
        assert unit_roundoff(DType.F32) == 2.0 ** -23
        assert unit_roundoff("bf16emu") == 2.0 ** -7
        assert unit_roundoff(DType.F16) == 2.0 ** -10

    def test_classical_is_half(self):
        assert unit_roundoff(DType.F32, RoundoffConvention.CLASSICAL) == 2.0 ** -24

    def test_unknown_dtype(self):
        with pytest.raises(ContractViolation):
            unit_roundoff("f64")

    @pytest.mark.parametrize("dtype,passes", [
        (DType.F32, True),
        (DType.BF16EMU, False),
        (DType.F16, False),
    ])
    def test_gate_at_4096(self, dtype, passes):
        assert precision_gate(4096, unit_roundoff(dtype)) is passes

    def test_gate_products(self):
        assert 4096 * unit_roundoff(DType.F32) == pytest.approx(0.000488, rel=1e-3)
        assert 4096 * unit_roundoff(DType.BF16EMU) == 32.0
        assert 4096 * unit_roundoff(DType.F16) == 4.0

    def test_gate_needs_positive_length(self):
        with pytest.raises(ContractViolation):
            precision_gate(0, 2.0 ** -23)

    def test_checked_matmul_refuses_bf16_at_4096(self):
        a = np.ones((1, 4096), dtype=np.float32)
        b = np.ones((4096, 1), dtype=np.float32)
        with pytest.raises(PrecisionUnsupported):
            checked_matmul(a, b, dtype=DType.BF16EMU)


class TestCheckedMatmul:
    """Test checksum verdicts"""

    def test_identity_has_zero_residual(self):
        _, b = random_pair(0, 8, 8, 5)
        c, check = checked_matmul(np.eye(8, dtype=np.float32), b)
        assert check.lhs == 0.0
        assert not check.flagged
        assert c.tobytes() == matmul(np.eye(8, dtype=np.float32), b).tobytes()

    def test_arithmetic_of_bound(self):
        a, b = random_pair(1, 4, 64, 3)
        _, check = checked_matmul(a, b)
        assert (check.m, check.k, check.n) == (4, 64, 3)
        assert check.tau == 64 * 2.0 ** -23
        assert check.rhs > 0.0
        assert check.gate_ok

    def test_corrupted_element_is_flagged(self):
        a, b = random_pair(2, 6, 32, 6)
        _, clean = checked_matmul(a, b)

        def faulty(x, y):
            c = matmul(x, y)
            c[2, 3] += np.float32(10.0 * clean.rhs)
            return c

        _, check = checked_matmul(a, b, compute=faulty)
        assert check.flagged
        assert check.lhs > check.rhs

    def test_nan_output_is_flagged(self):
        a, b = random_pair(3, 2, 8, 2)

        def faulty(x, y):
            c = matmul(x, y)
            c[0, 0] = np.nan
            return c

        assert checked_matmul(a, b, compute=faulty)[1].flagged

    def test_contracts(self):
        a, b = random_pair(4, 2, 3, 2)
        with pytest.raises(ContractViolation):
            checked_matmul(a, a)
        with pytest.raises(ContractViolation):
            checked_matmul(a.astype(np.float64), b)


class TestMonitor:
    """Test the matmul wrapper"""

    def test_requires_begin(self):
        a, b = random_pair(5, 2, 4, 2)
        with pytest.raises(ContractViolation):
            AbftMonitor().matmul(a, b, LINEAR)

    def test_non_linear_products_pass_unchecked(self):
        a, b = random_pair(5, 2, 4, 2)
        monitor = AbftMonitor()
        out = monitor.matmul(a, b, SCORES)
        assert out.tobytes() == matmul(a, b).tobytes()
        assert monitor.drain() == []

    def test_records_and_drain(self):
        a, b = random_pair(6, 2, 4, 2)
        monitor = AbftMonitor()
        monitor.begin(Microstep(1, 0, 2))
        monitor.matmul(a, b, LINEAR)
        monitor.matmul(a, b, MatmulSite(layer=0, rank=0, name="attn.wq", direction=MatmulDirection.FWD))
        records = monitor.drain()
        assert [r.rank for r in records] == [0, 1]
        assert all(r.site == "attn.wq/fwd" and r.step == 1 and r.microstep == 2 for r in records)
        assert monitor.drain() == []

    def test_inner_function_computes_product(self):
        a, b = random_pair(7, 2, 4, 2)
        calls = []

        def inner(x, y, site):
            calls.append(site)
            return matmul(x, y)

        monitor = AbftMonitor(inner=inner)
        monitor.begin(Microstep(0, 0, 0))
        monitor.matmul(a, b, LINEAR)
        assert calls == [LINEAR]


class TestFlagRateReport:
    """Test aggregation of checks"""

    def test_rows_pool_ranks_and_microsteps(self):
        def record(step, microstep, rank, site, flagged, lhs):
            check = AbftCheck(m=1, k=1, n=1, u=1.0, tau=1.0, lhs=lhs, rhs=1.0, flagged=flagged, gate_ok=True)
            return AbftRecord(step=step, microstep=microstep, layer=0, rank=rank, site=site, check=check)

        rows = flag_rate_report([
            record(0, 0, 0, "ffn.w_up/fwd", False, 0.5),
            record(0, 1, 1, "ffn.w_up/fwd", True, 3.0),
            record(0, 1, 0, "attn.wq/fwd", False, 0.1),
            record(1, 2, 0, "ffn.w_up/fwd", False, 0.2),
        ])
        assert [(r.step, r.site, r.checks, r.flags) for r in rows] == [
            (0, "attn.wq/fwd", 1, 0),
            (0, "ffn.w_up/fwd", 2, 1),
            (1, "ffn.w_up/fwd", 1, 0),
        ]
        assert rows[1].max_lhs == 3.0

    def test_empty(self):
        assert flag_rate_report([]) == []


class TestFlagFrequency:
    """Flag counts follow the per-matmul probability of at least one accumulator fault"""

    def setup_method(self):
        gen = np.random.Generator(np.random.PCG64(21))
        self.a = gen.uniform(0.5, 1.5, (4, 4)).astype(np.float32)
        self.b = gen.uniform(0.5, 1.5, (4, 4)).astype(np.float32)
        self.site = MatmulSite(layer=0, rank=0, name="ffn.w_up", direction=MatmulDirection.FWD)

    def test_flag_rate_within_binomial_interval(self):
        rate, trials = 0.022, 400
        profile = SdcProfile(name="mm", sites=frozenset({"matmul_internal"}), rate=rate,
                             severity=FixedFactor(10000.0), seed=7)
        injector = Injector(profile)
        monitor = AbftMonitor(inner=injector.matmul)
        for step in range(trials):
            microstep = Microstep.of(step, 0, 1)
            injector.begin(microstep)
            monitor.begin(microstep)
            monitor.matmul(self.a, self.b, self.site)

        rows = flag_rate_report(monitor.drain())
        flags = sum(row.flags for row in rows)
        assert sum(row.checks for row in rows) == trials
        assert flags == len({event.microstep for event in injector.log.events()})

        outputs = self.a.shape[0] * self.b.shape[1]
        per_matmul = 1.0 - (1.0 - rate) ** outputs
        mean = trials * per_matmul
        z = NormalDist().inv_cdf(0.9995)
        half_width = z * math.sqrt(trials * per_matmul * (1.0 - per_matmul))
        assert mean - half_width <= flags <= mean + half_width


class TestRowSumShift:
    """Test the worst-case row-sum estimate"""

    def test_published_example(self):
        shift = estimate_row_sum_shift(4.78e-3, 1120)
        assert shift.exact == Decimal("5.3536")
        assert shift.rounded == Decimal("5.35")

    def test_node10_factor(self):
        assert estimate_row_sum_shift(0.00478, 1121.0).rounded == Decimal("5.36")


class TestMonitoredTraining:
    """Accumulator faults are visible to the checksums; hook-output faults are not"""

    def test_accumulator_faults_are_flagged(self):
        profile = SdcProfile(name="mm", sites=frozenset({"matmul_internal"}), rate=0.01,
                             severity=FixedFactor(10000.0), seed=3)
        run = run_abft(tiny_settings(), profile)
        rows = list(run)
        assert run.outcome["status"] == "completed"
        assert run.outcome["flagged_steps"]
        injected = {(e.step, e.layer, e.target) for e in run.events.events()}
        flagged = {(r.step, r.layer, r.site) for r in rows if r.flags}
        assert flagged
        assert flagged <= injected

    def test_hook_output_faults_are_invisible(self):
        profile = SdcProfile(name="hooks", sites=frozenset(HOOK_SITES), rate=0.05,
                             severity=FixedFactor(1000.0), seed=3)
        run = run_abft(tiny_settings(), profile)
        rows = list(run)
        assert len(run.events) > 0
        assert sum(r.flags for r in rows) == 0
        assert run.outcome["flagged_steps"] == []
        assert run.checks == sum(r.checks for r in rows) > 0

    def test_healthy_run_has_no_flags(self):
        run = run_abft(tiny_settings(steps=1), SdcProfile())
        assert sum(r.flags for r in run) == 0
        assert run.outcome["events"] == 0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
