#!/usr/bin/env python3
"""
Unit tests for the SDC injection component

Tests cover:
- Profile parsing, validation errors with key paths and the preset library
- Temporal rate patterns
- Hook-output and matmul-accumulator corruption
- Event log ordering and exact replay
- Rate calibration against the binomial interval
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path for imports
parent_dir = Path(__file__).parent.parent.parent
sys.path.append(str(parent_dir))

from sdclab.components.error_handler import ConfigError, ContractViolation
from sdclab.components.inject import (
    MATMUL_INTERNAL,
    BitFlip,
    Constant,
    EventLog,
    FaultEvent,
    FixedFactor,
    InitialSpike,
    Injector,
    LogUniformFactor,
    RareBurst,
    Scheduled,
    SdcProfile,
    burst_steps,
    calibrate,
    corrupt,
    corrupt_matmul_accumulator,
    load_preset,
    load_presets,
    preset_document,
    profile_from_dict,
    replay,
    temporal_rate,
)
from sdclab.components.model import HookKind, MatmulDirection, MatmulSite, Microstep, ModelConfig
from sdclab.components.tensor import matmul

MS0 = Microstep(step=0, accum=0, index=0)


def profile(**kwargs) -> SdcProfile:
    base = dict(name="test", sites=frozenset({"fwd_attn"}), rate=1.0, severity=FixedFactor(2.0), seed=1)
    base.update(kwargs)
    return SdcProfile(**base)


class TestProfiles:
    """Test profile parsing and the preset library"""

    def test_default_profile_is_null(self):
        assert SdcProfile().is_null()

    def test_presets_parse(self):
        presets = load_presets()
        assert {"healthy", "node10-like", "node11-like", "node14-like"} <= set(presets)
        node10 = presets["node10-like"]
        assert node10.rate == 0.00478
        assert node10.sites == frozenset({"fwd_attn"})
        assert node10.severity == FixedFactor(1121.0)
        assert node10.seed == 1
        assert presets["node11-like"].rate == 0.0289
        assert isinstance(presets["node14-like"].temporal, RareBurst)
        assert presets["healthy"].is_null()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as info:
            load_preset("node99")
        assert info.value.key_path == "profile"

    def test_preset_document_fills_name(self):
        assert preset_document("node10-like")["name"] == "node10-like"

    def test_full_profile_dict(self):
        parsed = profile_from_dict({
            "name": "x",
            "sites": ["fwd_ffn", "matmul_internal"],
            "affected_ranks": [0, 2],
            "rate": 0.01,
            "severity": {"kind": "log_uniform_factor", "alpha_lo": 2.0, "alpha_hi": 8.0},
            "temporal": {"kind": "initial_spike", "p_hi": 0.1, "spike_steps": 3, "p_lo": 0.001},
            "seed": 4,
        })
        assert parsed.affected_ranks == frozenset({0, 2})
        assert parsed.severity == LogUniformFactor(2.0, 8.0)
        assert parsed.temporal == InitialSpike(0.1, 3, 0.001)
        assert parsed.hook_sites == ("fwd_ffn",)
        assert profile_from_dict(parsed.to_dict()) == parsed

    @pytest.mark.parametrize("data,key_path", [
        ({"bogus": 1}, "profile.bogus"),
        ({"sites": ["fwd_mlp"]}, "profile.sites"),
        ({"rate": 1.5}, "profile.rate"),
        ({"severity": {"kind": "gaussian"}}, "profile.severity.kind"),
        ({"severity": {"kind": "fixed_factor"}}, "profile.severity.alpha"),
        ({"severity": {"kind": "fixed_factor", "alpha": -1.0}}, "profile.severity.alpha"),
        ({"temporal": {"kind": "rare_burst", "burst_prob": 2.0, "p_burst": 0.1}}, "profile.temporal.burst_prob"),
        ({"temporal": {"kind": "initial_spike", "p_hi": 0.1, "spike_steps": -1, "p_lo": 0.0}},
         "profile.temporal.spike_steps"),
        ({"affected_ranks": "some"}, "profile.affected_ranks"),
    ])
    def test_invalid_profiles(self, data, key_path):
        with pytest.raises(ConfigError) as info:
            profile_from_dict(data)
        assert info.value.key_path == key_path

    def test_preset_errors_carry_preset_path(self):
        with pytest.raises(ConfigError) as info:
            profile_from_dict({"rate": 2.0}, key_path="profiles.broken")
        assert info.value.key_path == "profiles.broken.rate"

    def test_bit_flip_bounds(self):
        with pytest.raises(ConfigError):
            BitFlip(bit_lo=5, bit_hi=40)
        with pytest.raises(ConfigError):
            BitFlip(bit_lo=10, bit_hi=3)

    @pytest.mark.parametrize("temporal,null", [
        (Constant(), False),
        (InitialSpike(0.0, 5, 0.0), True),
        (InitialSpike(0.1, 0, 0.0), True),
        (RareBurst(0.0, 0.5), True),
        (Scheduled((), 0.5), True),
        (Scheduled((3,), 0.5), False),
    ])
    def test_is_null(self, temporal, null):
        assert profile(temporal=temporal).is_null() is null

    def test_zero_rate_constant_is_null(self):
        assert profile(rate=0.0).is_null()


class TestTemporalRate:
    """Test temporal patterns"""

    def test_constant(self):
        p = profile(rate=1e-3)
        assert temporal_rate(p, 0) == 1e-3
        assert temporal_rate(p, 12345) == 1e-3

    def test_initial_spike(self):
        p = profile(temporal=InitialSpike(1e-2, 5, 1e-6))
        assert temporal_rate(p, 3) == 1e-2
        assert temporal_rate(p, 10) == 1e-6

    def test_scheduled(self):
        p = profile(temporal=Scheduled((7, 2, 7), 0.25))
        assert p.temporal.steps == (2, 7)
        assert [temporal_rate(p, s) for s in range(8)] == [0, 0, 0.25, 0, 0, 0, 0, 0.25]

    def test_rare_burst_count_and_repeatability(self):
        p = profile(temporal=RareBurst(0.1, 1e-3), seed=13)
        steps = burst_steps(p, 1000)
        # 3 sigma around 100 for Bernoulli(0.1) over 1000 steps
        assert abs(len(steps) - 100) <= 3 * np.sqrt(1000 * 0.1 * 0.9)
        assert steps == burst_steps(p, 1000)
        assert all(temporal_rate(p, s) == 1e-3 for s in steps)
        assert temporal_rate(p, next(s for s in range(1000) if s not in steps)) == 0.0

    def test_negative_step_rejected(self):
        with pytest.raises(ContractViolation):
            temporal_rate(profile(), -1)


class TestCorrupt:
    """Test hook-output corruption"""

    def test_rate_zero_is_noop(self):
        x = np.arange(8, dtype=np.float32)
        result = corrupt(x, profile(rate=0.0), "fwd_attn", 0, 0, MS0)
        assert result.tensor.tobytes() == x.tobytes()
        assert result.events == []

    def test_saturated_fixed_factor(self):
        ones = np.ones((2, 4), dtype=np.float32)
        result = corrupt(ones, profile(), "fwd_attn", 0, 0, MS0)
        assert np.all(result.tensor == 2.0)
        assert sorted(e.index for e in result.events) == list(range(8))
        assert all(e.factor == 2.0 and e.bit == -1 for e in result.events)
        assert np.all(ones == 1.0)

    def test_unaffected_site_or_rank_passes_through(self):
        x = np.ones(8, dtype=np.float32)
        assert corrupt(x, profile(), "fwd_ffn", 0, 0, MS0).tensor is x
        restricted = profile(affected_ranks=frozenset({1}))
        assert corrupt(x, restricted, "fwd_attn", 0, 0, MS0).events == []
        assert len(corrupt(x, restricted, "fwd_attn", 0, 1, MS0).events) == 8

    def test_selection_repeatable(self):
        x = np.ones(8, dtype=np.float32)
        p = profile(rate=0.5, seed=21)
        first = [e.index for e in corrupt(x, p, "fwd_attn", 1, 0, MS0).events]
        second = [e.index for e in corrupt(x, p, "fwd_attn", 1, 0, MS0).events]
        assert first == second

    def test_coordinates_select_independent_draws(self):
        x = np.ones(256, dtype=np.float32)
        p = profile(rate=0.5, seed=21)
        base = [e.index for e in corrupt(x, p, "fwd_attn", 0, 0, MS0).events]
        other_layer = [e.index for e in corrupt(x, p, "fwd_attn", 1, 0, MS0).events]
        other_microstep = [e.index for e in corrupt(x, p, "fwd_attn", 0, 0, Microstep(0, 1, 1)).events]
        assert base != other_layer
        assert base != other_microstep

    def test_zero_elements_produce_no_events(self):
        x = np.zeros(16, dtype=np.float32)
        result = corrupt(x, profile(), "fwd_attn", 0, 0, MS0)
        assert result.events == []
        assert result.tensor.tobytes() == x.tobytes()

    def test_log_uniform_factors_in_range(self):
        x = np.ones(64, dtype=np.float32)
        result = corrupt(x, profile(severity=LogUniformFactor(10.0, 1000.0)), "fwd_attn", 0, 0, MS0)
        assert len(result.events) == 64
        assert all(9.99 <= e.factor <= 1000.1 for e in result.events)

    def test_bit_flip_changes_one_bit(self):
        gen = np.random.Generator(np.random.PCG64(0))
        x = gen.standard_normal(32).astype(np.float32)
        result = corrupt(x, profile(severity=BitFlip(0, 22)), "fwd_attn", 0, 0, MS0)
        assert len(result.events) == 32
        old_bits = x.view(np.uint32)
        new_bits = result.tensor.view(np.uint32)
        for event in result.events:
            assert 0 <= event.bit <= 22
            assert old_bits[event.index] ^ new_bits[event.index] == (1 << event.bit)

    @pytest.mark.parametrize("severity", [FixedFactor(3.0), LogUniformFactor(0.2, 4.8), BitFlip(0, 30)])
    def test_replay_reconstructs(self, severity):
        gen = np.random.Generator(np.random.PCG64(3))
        x = gen.standard_normal((2, 8, 4)).astype(np.float32)
        result = corrupt(x, profile(rate=0.3, severity=severity, seed=8), "fwd_attn", 0, 0, MS0)
        assert result.events
        assert replay(x, result.events).tobytes() == result.tensor.tobytes()


class TestMatmulCorruption:
    """Test accumulator corruption inside matmul"""

    def setup_method(self):
        self.a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        self.b = np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32)
        self.site = MatmulSite(layer=0, rank=0, name="ffn.w_up", direction=MatmulDirection.FWD)

    def test_hand_oracle(self):
        assert matmul(self.a, self.b).tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_saturated_factor_two(self):
        p = profile(sites=frozenset({MATMUL_INTERNAL}))
        result = corrupt_matmul_accumulator(self.a, self.b, p, self.site, MS0)
        assert result.tensor[0, 0] == 38.0
        assert result.tensor.tolist() == [[38.0, 44.0], [86.0, 100.0]]
        assert {e.target for e in result.events} == {"ffn.w_up/fwd"}
        assert all(e.site == MATMUL_INTERNAL for e in result.events)

    def test_empty_site_set_is_plain_matmul(self):
        result = corrupt_matmul_accumulator(self.a, self.b, profile(sites=frozenset()), self.site, MS0)
        assert result.tensor.tobytes() == matmul(self.a, self.b).tobytes()
        assert result.events == []

    def test_non_linear_products_untouched(self):
        p = profile(sites=frozenset({MATMUL_INTERNAL}))
        scores = MatmulSite(0, 0, "attn.scores", MatmulDirection.FWD, linear=False)
        assert corrupt_matmul_accumulator(self.a, self.b, p, scores, MS0).events == []


class TestInjectorAndLog:
    """Test the injector binding and the event log"""

    def test_injector_requires_begin(self):
        injector = Injector(profile())
        with pytest.raises(ContractViolation):
            injector.corrupt_hook(HookKind.FWD_ATTN, 0, [np.ones(4, dtype=np.float32)])

    def test_injector_logs_per_rank(self):
        injector = Injector(profile())
        injector.begin(Microstep(2, 1, 5))
        out = injector.corrupt_hook(HookKind.FWD_ATTN, 1, [np.ones(4, dtype=np.float32)] * 2)
        assert all(np.all(t == 2.0) for t in out)
        events = injector.log.events()
        assert len(events) == 8
        assert {e.rank for e in events} == {0, 1}
        assert {(e.step, e.microstep, e.layer) for e in events} == {(2, 5, 1)}
        assert not injector.corrupts_matmuls

    def test_event_log_order_and_queries(self):
        log = EventLog()
        log.extend([
            FaultEvent(step=1, microstep=3, site="bwd_ffn", layer=0, rank=0, index=4, factor=2.0),
            FaultEvent(step=0, microstep=1, site="fwd_ffn", layer=1, rank=1, index=0, factor=2.0),
            FaultEvent(step=0, microstep=1, site="fwd_attn", layer=1, rank=0, index=9, factor=2.0),
        ])
        assert [e.site for e in log.events()] == ["fwd_attn", "fwd_ffn", "bwd_ffn"]
        assert log.steps_with_events() == [0, 1]
        assert log.steps_with_events(["bwd_ffn"]) == [1]
        assert log.microsteps_with_events(["fwd_attn"]) == [1]
        assert log.first_step() == 0
        assert len(log) == 3

    def test_empty_log(self):
        log = EventLog()
        log.extend([])
        assert log.first_step() is None
        assert log.events() == []


class TestCalibration:
    """Test observed rate against the binomial interval"""

    def test_node10_like_within_interval(self):
        report = calibrate(load_preset("node10-like"), ModelConfig(), microsteps=100)
        assert report.within
        assert report.expected_rate == pytest.approx(0.00478)
        assert report.elements == 100 * 2 * 4 * 128 * 64
        row = report.to_row()
        assert row["ci_low_rate"] < row["observed_rate"] < row["ci_high_rate"]
        assert row["within"] == 1

    def test_spike_window_raises_expected_rate(self):
        p = profile(rate=0.0, temporal=InitialSpike(0.05, 1, 0.001), seed=2)
        config = ModelConfig(layers=1, hidden=16, heads=4, kv_heads=2, seq_len=8, vocab=16, tp_degree=2,
                             grad_accum=2)
        report = calibrate(p, config, microsteps=4)
        expected = (2 * 0.05 + 2 * 0.001) / 4
        assert report.expected_rate == pytest.approx(expected)

    def test_requires_hook_site(self):
        with pytest.raises(ContractViolation):
            calibrate(load_preset("matmul-accumulator"), ModelConfig())

    def test_requires_microsteps(self):
        with pytest.raises(ContractViolation):
            calibrate(load_preset("node10-like"), ModelConfig(), microsteps=0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
