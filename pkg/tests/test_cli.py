import json

import numpy as np
import pytest
import yaml

from kalmis.cli import main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture
def ar1_traj_dir(tmp_path):
    out = tmp_path / "traj"
    code = run_cli("simulate", "--preset", "ar1-mse", "--n", "120",
                   "--out", str(out))
    assert code == 0
    return out


class TestSimulate:
    def test_writes_trajectory_files(self, ar1_traj_dir):
        obs = (ar1_traj_dir / "observations.csv").read_text().splitlines()
        states = (ar1_traj_dir / "states.csv").read_text().splitlines()
        assert obs[0] == "t,y1"
        assert len(obs) == 121  # header + 120 rows
        assert len(states) == 122  # header + x_0..x_120
        manifest = json.loads((ar1_traj_dir / "manifest.json").read_text())
        assert manifest["subcommand"] == "simulate"
        assert manifest["config"]["n_steps"] == 120

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("simulate", "--preset", "ar1-mse", "--n", "60",
                           "--out", str(out)) == 0
        assert (a / "observations.csv").read_bytes() == \
               (b / "observations.csv").read_bytes()

    def test_manifest_replay(self, ar1_traj_dir, tmp_path):
        replay = tmp_path / "replay"
        code = run_cli("simulate", "--config",
                       str(ar1_traj_dir / "manifest.json"),
                       "--out", str(replay))
        assert code == 0
        assert (replay / "observations.csv").read_bytes() == \
               (ar1_traj_dir / "observations.csv").read_bytes()

    def test_heston_includes_spot_path(self, tmp_path):
        out = tmp_path / "hes"
        code = run_cli("simulate", "--preset", "heston-gamma", "--n", "5",
                       "--out", str(out))
        assert code == 0
        exog = (out / "exog.csv").read_text().splitlines()
        assert exog[0] == "t,s1"
        assert len(exog) == 7
        obs_header = (out / "observations.csv").read_text().splitlines()[0]
        assert obs_header == "t," + ",".join(f"y{j+1}" for j in range(9))


class TestFilterAndDetect:
    def test_filter_writes_residual_series(self, ar1_traj_dir, tmp_path):
        out = tmp_path / "filt"
        code = run_cli("filter", "--traj", str(ar1_traj_dir),
                       "--theta", "0.8,2.8", "--out", str(out))
        assert code == 0
        for name in ("interpolation", "innovation", "state_estimate"):
            assert (out / f"{name}.csv").exists()
        interp = (out / "interpolation.csv").read_text().splitlines()
        assert len(interp) == 121

    def test_detect_reports_flags(self, ar1_traj_dir, tmp_path, capsys):
        out = tmp_path / "det"
        code = run_cli("detect", "--traj", str(ar1_traj_dir),
                       "--theta", "0.8,2.8", "--hstar", "3",
                       "--out", str(out))
        assert code == 0
        assert "flagged" in capsys.readouterr().out
        assert (out / "whiteness.csv").exists()
        assert (out / "autocov.csv").exists()
        rows = (out / "autocorr_coord1.csv").read_text().splitlines()
        assert rows[0] == "lag,rho,band,flagged"
        assert len(rows) == 4

    def test_detect_needs_valid_hstar(self, ar1_traj_dir, tmp_path, capsys):
        code = run_cli("detect", "--traj", str(ar1_traj_dir),
                       "--hstar", "0", "--out", str(tmp_path / "x"))
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_corrupt_observations_are_a_numerical_failure(
        self, ar1_traj_dir, tmp_path, capsys
    ):
        path = ar1_traj_dir / "observations.csv"
        rows = path.read_text().splitlines()
        rows[3] = "3,nan"
        path.write_text("\n".join(rows) + "\n")
        code = run_cli("filter", "--traj", str(ar1_traj_dir),
                       "--out", str(tmp_path / "f"))
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err


class TestEstimate:
    def test_writes_result_json(self, tmp_path, capsys):
        out = tmp_path / "est"
        code = run_cli("estimate", "--preset", "ar1-mse", "--n", "150",
                       "--out", str(out))
        assert code == 0
        payload = json.loads((out / "estimate.json").read_text())
        assert payload["labels"] == ["gamma", "alpha"]
        assert len(payload["theta_hat"]) == 2
        assert "theta_hat" in capsys.readouterr().out


class TestMcSweepCompare:
    def test_mc_writes_replicates(self, tmp_path, capsys):
        out = tmp_path / "mc"
        code = run_cli("mc", "--preset", "ar1-mse", "--n", "80", "--mc", "3",
                       "--out", str(out))
        assert code == 0
        rows = (out / "replicates.csv").read_text().splitlines()
        assert len(rows) == 4
        assert "kept 3/3" in (out / "summary.txt").read_text()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["mc_runs"] == 3

    def test_sweep_two_values(self, tmp_path):
        out = tmp_path / "sw"
        code = run_cli("sweep", "--preset", "ar1-mse", "--n", "80", "--mc", "2",
                       "--axis", "lag", "--values", "1,2", "--out", str(out))
        assert code == 0
        rows = (out / "sweep.csv").read_text().splitlines()
        assert rows[0].startswith("lag,mse_gamma")
        assert len(rows) == 3

    def test_compare_writes_both_arms(self, tmp_path):
        out = tmp_path / "cmp"
        code = run_cli("compare", "--preset", "compare-ar1", "--n", "60",
                       "--mc", "2", "--out", str(out))
        assert code == 0
        assert (out / "comparison.csv").exists()


class TestConfigHandling:
    def test_print_config_is_valid_yaml(self, capsys):
        assert run_cli("print-config", "--preset", "heston-gamma") == 0
        data = yaml.safe_load(capsys.readouterr().out)
        assert data["model"]["family"] == "heston"
        assert data["experiment"]["mc_runs"] == 10
        assert data["model"]["options"]["obs_noise_sd"] == 0.01

    def test_printed_config_round_trips(self, tmp_path, capsys):
        assert run_cli("print-config", "--preset", "ar1-mse") == 0
        text = capsys.readouterr().out
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(text)
        out = tmp_path / "sim"
        assert run_cli("simulate", "--config", str(cfg_path), "--n", "30",
                       "--out", str(out)) == 0
        assert (out / "observations.csv").exists()

    def test_unknown_preset(self, capsys):
        assert run_cli("print-config", "--preset", "nope") == 2
        assert "unknown preset" in capsys.readouterr().err

    def test_unknown_experiment_key_rejected(self, tmp_path, capsys):
        cfg = {
            "model": {"family": "ar1", "theta_true": [0.9, 3.0]},
            "experiment": {"n_steps": 50, "mc_runs": 1, "horizon": 4},
        }
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert run_cli("print-config", "--config", str(path)) == 2
        assert "unknown [experiment] keys" in capsys.readouterr().err

    def test_feller_violation_is_config_error(self, tmp_path, capsys):
        cfg = {
            "model": {"family": "heston",
                      "theta_true": [1.0, 0.02, 0.4, -0.5],
                      "options": {"obs_noise_sd": 0.02}},
            "experiment": {"n_steps": 10, "mc_runs": 1, "seed": 5},
        }
        path = tmp_path / "feller.yaml"
        path.write_text(yaml.safe_dump(cfg))
        code = run_cli("simulate", "--config", str(path),
                       "--out", str(tmp_path / "out"))
        assert code == 2
        assert "Feller" in capsys.readouterr().err

    def test_override_precedence(self, capsys):
        assert run_cli("print-config", "--preset", "ar1-mse",
                       "--seed", "99", "--hstar", "4") == 0
        data = yaml.safe_load(capsys.readouterr().out)
        assert data["experiment"]["seed"] == 99
        assert data["experiment"]["h_star"] == 4
