#!/usr/bin/env python3
"""
Integration tests for the sdclab command line

Every protocol is driven through main() on a tiny model; the tests check
exit codes, the files a run leaves behind and byte-level reproducibility.
"""

import json
import sys
from pathlib import Path

import pytest

# Add parent directory to path for imports
parent_dir = Path(__file__).parent.parent.parent
sys.path.append(str(parent_dir))

from sdclab.cli import main
from sdclab.components.artifacts import load_manifest, read_csv

TINY_MODEL = {"layers": 1, "hidden": 16, "heads": 4, "kv_heads": 2, "seq_len": 8, "vocab": 16,
              "tp_degree": 2, "micro_batch": 1, "grad_accum": 2}

ALL_HOOKS = ["fwd_attn", "fwd_ffn", "bwd_attn", "bwd_ffn"]


def write_config(directory: Path, name: str = "config.json", **document) -> str:
    body = {"steps": 3, "model": dict(TINY_MODEL)}
    body.update(document)
    path = directory / name
    path.write_text(json.dumps(body))
    return str(path)


class TestProtocolRuns:
    """Test complete runs through the CLI"""

    def test_rq3_is_byte_reproducible(self, tmp_path):
        config = write_config(tmp_path, profile="node11-like")
        assert main(["rq3", "--config", config, "--out", str(tmp_path / "a"), "--quiet"]) == 0
        assert main(["rq3", "--config", config, "--out", str(tmp_path / "b"), "--quiet"]) == 0
        for name in ("rq3.csv", "events.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        first, second = load_manifest(tmp_path / "a"), load_manifest(tmp_path / "b")
        assert first["config_hash"] == second["config_hash"]
        assert "rq3.csv" in first["files"]
        assert "run.log" in first["files"]

    def test_workers_do_not_change_output(self, tmp_path):
        config = write_config(tmp_path, profile="node11-like", steps=2)
        assert main(["rq3", "--config", config, "--out", str(tmp_path / "one"), "--quiet"]) == 0
        assert main(["rq3", "--config", config, "--out", str(tmp_path / "two"), "--workers", "2",
                     "--quiet"]) == 0
        assert (tmp_path / "one" / "rq3.csv").read_bytes() == (tmp_path / "two" / "rq3.csv").read_bytes()

    def test_rq1_contains_corruption_and_exports(self, tmp_path):
        config = write_config(tmp_path, profile="node11-like", snapshot_steps=[1])
        out = tmp_path / "rq1"
        assert main(["rq1", "--config", config, "--out", str(out), "--quiet"]) == 0

        rows = read_csv(out / "rq1.csv")
        assert len(rows) == 3 * 2 * 4
        assert any(float(row["freq"]) > 0 for row in rows)
        assert (out / "rq1_layers.csv").is_file()
        assert json.loads((out / "rq1_summary.json").read_text())["fwd_attn"]["microsteps"] == 6

        healthy = (out / "snapshots" / "healthy_step000001.bin").read_bytes()
        unhealthy = (out / "snapshots" / "unhealthy_step000001.bin").read_bytes()
        assert healthy == unhealthy

        assert main(["export", str(out), "--plot", "--quiet"]) == 0
        assert (out / "plotdata.csv").is_file()
        assert (out / "plotdata.png").is_file()
        series = {row["series"] for row in read_csv(out / "plotdata.csv")}
        assert "freq/fwd_attn" in series

    def test_rq2_scheduled_fault_and_wcnts(self, tmp_path):
        profile = {"name": "step-one", "sites": ALL_HOOKS, "rate": 0.0,
                   "severity": {"kind": "fixed_factor", "alpha": 64.0},
                   "temporal": {"kind": "scheduled", "steps": [1], "p": 0.05}}
        config = write_config(tmp_path, profile=profile)
        out = tmp_path / "rq2"
        assert main(["rq2", "--config", config, "--out", str(out), "--quiet"]) == 0

        rows = read_csv(out / "rq2.csv")
        assert [float(row["diff_l2"]) > 0 for row in rows] == [False, True, False]
        worst = 0.0
        for row in rows:
            if row["degenerate"] == "0":
                worst = max(worst, float(row["ratio"]))
            assert float(row["wcnts"]) == worst
        events = read_csv(out / "events.csv")
        assert events and {row["step"] for row in events} == {"1"}

    def test_shadow_run(self, tmp_path):
        config = write_config(tmp_path, profile="healthy")
        out = tmp_path / "shadow"
        assert main(["shadow", "--config", config, "--out", str(out), "--quiet"]) == 0
        rows = read_csv(out / "shadow.csv")
        assert [row["alarm"] for row in rows] == ["0", "0", "0"]
        assert load_manifest(out)["config"]["global_batch"] == 4

    def test_abft_run(self, tmp_path):
        config = write_config(tmp_path, profile="healthy", steps=1)
        out = tmp_path / "abft"
        assert main(["abft", "--config", config, "--out", str(out), "--quiet"]) == 0
        rows = read_csv(out / "abft.csv")
        assert rows and all(row["flags"] == "0" for row in rows)

    def test_gradcheck(self, tmp_path):
        model = dict(TINY_MODEL, tp_degree=1)
        config = write_config(tmp_path, model=model, gradcheck={"max_elements_per_tensor": 2})
        out = tmp_path / "gradcheck"
        assert main(["gradcheck", "--config", config, "--out", str(out), "--quiet"]) == 0
        assert json.loads((out / "gradcheck.json").read_text())["passed"] is True

    def test_calibrate(self, tmp_path):
        # rate 1 corrupts every element, so the count equals its expectation
        profile = {"name": "every-element", "sites": ["fwd_attn"], "rate": 1.0,
                   "severity": {"kind": "fixed_factor", "alpha": 2.0}}
        config = write_config(tmp_path, profile=profile, calibrate={"microsteps": 2})
        out = tmp_path / "calibrate"
        assert main(["calibrate", "--config", config, "--out", str(out), "--quiet"]) == 0
        rows = read_csv(out / "calibrate.csv")
        assert rows[0]["profile"] == "every-element"
        assert rows[0]["corrupted"] == rows[0]["elements"] == str(2 * 8 * 16 * 2)
        assert load_manifest(out)["outcome"]["within"] is True

    def test_calibration_outside_interval_fails(self, tmp_path):
        # a factor of 1 never changes a stored bit, so no corruption is observed
        profile = {"name": "inert", "sites": ["fwd_attn"], "rate": 0.5,
                   "severity": {"kind": "fixed_factor", "alpha": 1.0}}
        config = write_config(tmp_path, profile=profile, calibrate={"microsteps": 2})
        out = tmp_path / "inert"
        assert main(["calibrate", "--config", config, "--out", str(out), "--quiet"]) == 2
        assert read_csv(out / "calibrate.csv")[0]["within"] == "0"
        manifest = load_manifest(out)
        assert manifest["status"] == "failed"
        assert manifest["error"]["category"] == "invariant_violation"


class TestExitCodes:
    """Test the exit-code contract"""

    def test_unknown_config_key(self, tmp_path):
        config = write_config(tmp_path, bogus=1)
        assert main(["rq3", "--config", config, "--out", str(tmp_path / "x"), "--quiet"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["rq3", "--config", str(tmp_path / "absent.json"), "--quiet"]) == 1

    def test_export_of_empty_directory(self, tmp_path):
        assert main(["export", str(tmp_path), "--quiet"]) == 1

    def test_contract_violation(self, tmp_path):
        config = write_config(tmp_path, profile="matmul-accumulator")
        out = tmp_path / "bad"
        assert main(["calibrate", "--config", config, "--out", str(out), "--quiet"]) == 2
        manifest = load_manifest(out)
        assert manifest["status"] == "failed"
        assert manifest["error"]["category"] == "contract_violation"

    def test_numerical_failure(self, tmp_path):
        config = write_config(tmp_path, optimizer={"lr": 1e30})
        out = tmp_path / "overflow"
        assert main(["rq3", "--config", config, "--out", str(out), "--quiet"]) == 3
        assert load_manifest(out)["exit_code"] == 3

    def test_argument_errors(self):
        with pytest.raises(SystemExit) as info:
            main(["rq4"])
        assert info.value.code == 2


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
