"""Command-line runner: config handling, reproducibility, file outputs."""

import numpy as np
import pytest

from bdisim import io
from bdisim.cli import ConfigError, load_config, main


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config("simulate", None, [])
        assert cfg["model"]["preset"] == "binary-spread"
        assert cfg["dt"] == 0.01

    def test_file_then_set_precedence(self, tmp_path):
        p = tmp_path / "cfg.yaml"
        p.write_text("horizon: 5.0\nmodel:\n  preset: pure-death-static\n")
        cfg = load_config("simulate", p, ["horizon=2.5", "model.c=3.0"])
        assert cfg["horizon"] == 2.5
        assert cfg["model"] == {"preset": "pure-death-static", "c": 3.0}

    def test_bad_set_syntax(self):
        with pytest.raises(ConfigError):
            load_config("simulate", None, ["horizon"])

    def test_negative_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config("simulate", None, ["dt=-0.1"])

    def test_lam_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            load_config("reconstruct", None, ["lam=0.6"])

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        code = run(tmp_path, "simulate", "--set", "dt=0")
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert run(tmp_path, "simulate", "--config", "/no/such/file.yaml") == 2


class TestCsvRoundTrip:
    def test_format_parse_inverse(self, tmp_path):
        rows = [{"a": 1, "b": 2.5, "c": "x y", "d": True, "e": None},
                {"a": 2, "b": float(np.float64(0.1)), "c": "", "d": False,
                 "e": 7}]
        path = tmp_path / "t.csv"
        io.write_csv(path, rows, {"seed": 0, "note": "hello"})
        header, back = io.read_csv(path)
        assert header == {"seed": 0, "note": "hello"}
        assert back[0] == {"a": 1, "b": 2.5, "c": "x y", "d": True, "e": None}
        assert back[1]["b"] == 0.1 and back[1]["d"] is False


class TestReproducibility:
    def test_simulate_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        args = ["simulate", "--seed", "5", "--set", "horizon=5.0",
                "--set", "dt=0.05"]
        assert main([*args, "--out", str(d1)]) == 0
        assert main([*args, "--out", str(d2)]) == 0
        assert (d1 / "trajectory.csv").read_bytes() == \
            (d2 / "trajectory.csv").read_bytes()
        assert (d1 / "events.csv").read_bytes() == \
            (d2 / "events.csv").read_bytes()

    def test_seed_changes_output(self, tmp_path):
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        main(["simulate", "--seed", "1", "--set", "horizon=5.0",
              "--out", str(d1)])
        main(["simulate", "--seed", "2", "--set", "horizon=5.0",
              "--out", str(d2)])
        assert (d1 / "trajectory.csv").read_bytes() != \
            (d2 / "trajectory.csv").read_bytes()


class TestRunners:
    def test_simulate_no_immigration_stays_void(self, tmp_path):
        code = run(tmp_path, "simulate", "--set",
                   "model.preset=pure-death-static", "--set", "model.c=1e-12",
                   "--set", "horizon=2.0")
        assert code == 0
        _, rows = io.read_csv(tmp_path / "trajectory.csv")
        assert all(r["l"] == 0 for r in rows)
        assert (tmp_path / "simulate.png").stat().st_size > 0

    def test_occupation_outputs(self, tmp_path):
        code = run(tmp_path, "occupation", "--set", "total_time=200.0",
                   "--set", "dt=0.2", "--set", "bin_width=0.25")
        assert code == 0
        header, rows = io.read_csv(tmp_path / "occupation.csv")
        assert header["accumulated_time"] >= 200.0
        assert all("analytic" in r for r in rows)
        dens = np.array([r["density"] for r in rows])
        assert np.all(dens >= 0) and dens.max() > 0
        assert (tmp_path / "occupation.png").stat().st_size > 0

    def test_moments_outputs(self, tmp_path):
        code = run(tmp_path, "moments", "--set", "n_cycles=150",
                   "--set", "dt=0.5", "--seed", "3")
        assert code == 0
        _, rows = io.read_csv(tmp_path / "moments.csv")
        assert [r["p"] for r in rows] == [1, 2]
        for r in rows:
            assert abs(r["estimate"] - r["analytic"]) <= 5 * r["std_error"]

    def test_reconstruct_outputs(self, tmp_path):
        code = run(tmp_path, "reconstruct", "--set", "n_pairs=1500",
                   "--set", "delta_list=[0.02]", "--set", "warmup_time=5.0",
                   "--set", "warmup_dt=0.05", "--set", "dt_ratio=1.0")
        assert code == 0
        _, rows = io.read_csv(tmp_path / "reconstruct.csv")
        assert len(rows) == 1
        r = rows[0]
        assert 0 <= r["prop_identifiable"] <= 1
        assert r["n_ci_not_identified"] == 0 and r["n_ci_wrong"] == 0
        assert (tmp_path / "reconstruct.png").stat().st_size > 0

    def test_scheme_outputs(self, tmp_path):
        code = run(tmp_path, "scheme", "--set", "model.preset=relocate",
                   "--set", "delta=0.005", "--set", "a_lo=-0.4",
                   "--set", "a_hi=0.4", "--set", "dt_ratio=1.0",
                   "--set", "warmup_time=5.0", "--set", "warmup_dt=0.05",
                   "--set", "max_pairs=400000")
        assert code == 0
        header, rows = io.read_csv(tmp_path / "scheme.csv")
        assert len(rows) == header["n"]
        filled = [r for r in rows if r["filled"]]
        assert filled, "no cell ever filled"
        taus = [r["tau"] for r in filled]
        assert header["tau_star"] == max(taus)
        assert (tmp_path / "scheme.png").stat().st_size > 0

    def test_estimate_outputs(self, tmp_path):
        code = run(tmp_path, "estimate", "--set", "model.preset=relocate",
                   "--set", "delta=0.004", "--set", "a_lo=-1.5",
                   "--set", "a_hi=1.5", "--set", "a=0.0",
                   "--set", "dt_ratio=1.0", "--set", "warmup_time=5.0",
                   "--set", "warmup_dt=0.05", "--set", "max_pairs=600000",
                   "--seed", "11")
        assert code == 0
        _, rows = io.read_csv(tmp_path / "estimate.csv")
        r = rows[0]
        assert r["true_value"] == pytest.approx(0.09)
        assert r["estimate"] > 0
        assert r["squared_error"] == pytest.approx(
            (r["estimate"] - r["true_value"]) ** 2)
        assert (tmp_path / "estimate.png").stat().st_size > 0

    def test_sweep_outputs(self, tmp_path):
        code = run(tmp_path, "sweep", "--set", "model.preset=relocate",
                   "--set", "delta_list=[0.004]", "--set", "replicates=2",
                   "--set", "a_lo=-1.5", "--set", "a_hi=1.5",
                   "--set", "a=0.0", "--set", "dt_ratio=1.0",
                   "--set", "lam=0.48", "--set", "warmup_time=5.0",
                   "--set", "warmup_dt=0.05", "--set", "max_pairs=600000")
        assert code == 0
        _, rows = io.read_csv(tmp_path / "sweep.csv")
        assert rows[0]["replicates"] + rows[0]["dropped"] == 2
        assert (tmp_path / "sweep.png").stat().st_size > 0

    def test_verify_passes(self, tmp_path):
        code = run(tmp_path, "verify", "--set", "n_cycles=400",
                   "--set", "dt=0.5", "--set", "n_direct=2000",
                   "--set", "n_fk=200", "--seed", "7")
        assert code == 0
        _, rows = io.read_csv(tmp_path / "verify.csv")
        assert len(rows) == 4
        assert all(r["passed"] is True for r in rows)
        assert (tmp_path / "verify.png").stat().st_size > 0
