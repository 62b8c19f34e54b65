import os
import shutil

import numpy as np
import pytest

from cbic.cli import run
from cbic.config import ConfigError, load_config, parse_measure
from cbic.ergodicity import wv_exact_discrete

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.fixture()
def ergodic_cfg(tmp_path):
    dst = tmp_path / "model.cfg"
    shutil.copy(os.path.join(CONFIGS, "ergodic_v1.cfg"), dst)
    return str(dst)


class TestConfigParsing:
    def test_roundtrip_of_shipped_configs(self):
        for name in ("ergodic_v1.cfg", "critical_cbi.cfg", "neveu_xlog.cfg",
                     "stable_power_vlog.cfg"):
            run_cfg = load_config(os.path.join(CONFIGS, name))
            assert run_cfg.sim.n_paths >= 1
            assert run_cfg.weight.kind in ("v1", "vlog")

    def test_measure_grammar(self):
        m = parse_measure("atoms 2.0:1.0 + uniform rate=1.0 lo=0.0 hi=1.0", "test")
        assert m.kind == "sum"
        assert m.atoms() == ((2.0, 1.0),)
        with pytest.raises(ConfigError, match="unknown measure kind"):
            parse_measure("gaussian mean=0", "test")
        with pytest.raises(ConfigError, match="stable needs"):
            parse_measure("stable alpha=1.5", "test")

    def test_missing_section_is_diagnosed(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[immigration]\nbeta = 1.0\n")
        with pytest.raises(ConfigError, match=r"\[branching\]"):
            load_config(str(bad))

    def test_bad_field_is_diagnosed(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[branching]\nb = two\n")
        with pytest.raises(ConfigError, match="'b'"):
            load_config(str(bad))


class TestExitCodes:
    def test_simulate_success(self, ergodic_cfg, tmp_path):
        out = tmp_path / "out"
        code = run([
            "simulate", "--model", ergodic_cfg, "--out", str(out),
            "--paths", "64", "--t-end", "0.25",
        ])
        assert code == 0
        assert (out / "simulate.csv").exists()

    def test_zero_paths_is_usage_error(self, ergodic_cfg, capsys):
        code = run(["simulate", "--model", ergodic_cfg, "--paths", "0"])
        assert code == 2
        assert "paths" in capsys.readouterr().err

    def test_malformed_config_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[branching]\nmu = martian\n")
        code = run(["simulate", "--model", str(bad)])
        assert code == 2
        assert "mu" in capsys.readouterr().err

    def test_unknown_subcommand_is_usage_error(self):
        assert run(["transmogrify"]) == 2

    def test_lyapunov_failure_exits_one(self, capsys):
        code = run([
            "lyapunov", "--model", os.path.join(CONFIGS, "critical_cbi.cfg"),
            "--weight", "v1",
        ])
        assert code == 1
        assert "margin" in capsys.readouterr().err

    def test_lyapunov_success(self, ergodic_cfg, capsys):
        code = run(["lyapunov", "--model", ergodic_cfg, "--weight", "v1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "C0" in out and "C1" in out


class TestSubcommands:
    def test_rate_writes_report_and_margins(self, ergodic_cfg, tmp_path, capsys):
        out = tmp_path / "rate"
        code = run(["rate", "--model", ergodic_cfg, "--out", str(out), "--grid", "15"])
        assert code == 0
        text = (out / "certificate.txt").read_text()
        assert "lambda" in text and "PASS" in text
        header = (out / "certificate_margins.csv").read_text().splitlines()[0]
        assert header == "x,y,lhs,rhs,margin"

    def test_rate_failure_exits_one(self, tmp_path, capsys):
        code = run([
            "rate", "--model", os.path.join(CONFIGS, "critical_cbi.cfg"), "--out",
            str(tmp_path), "--grid", "9",
        ])
        assert code == 1
        assert "lyapunov" in capsys.readouterr().err

    def test_couple_writes_summary(self, ergodic_cfg, tmp_path):
        out = tmp_path / "couple"
        code = run([
            "couple", "--model", ergodic_cfg, "--out", str(out),
            "--paths", "64", "--t-end", "0.5",
        ])
        assert code == 0
        lines = (out / "couple.csv").read_text().splitlines()
        assert lines[0] == "time,mean_x,mean_y,uncoupled_frac"

    def test_check_generator(self, ergodic_cfg, tmp_path):
        out = tmp_path / "chk"
        code = run(["check-generator", "--model", ergodic_cfg, "--out", str(out)])
        assert code == 0
        assert (out / "check_generator.csv").exists()

    def test_wv_subcommand(self, tmp_path, capsys):
        g = tmp_path / "g.csv"
        e = tmp_path / "e.csv"
        g.write_text("atom,prob\n0.0,0.25\n1.0,0.75\n")
        e.write_text("atom,prob\n0.0,0.75\n1.0,0.25\n")
        code = run(["wv", "--gamma", str(g), "--eta", str(e), "--weight", "v1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "wv_exact = 1.5" in out
        assert "wv_transport" in out

    def test_stationary_subcommand(self, ergodic_cfg, tmp_path, capsys):
        out = tmp_path / "st"
        code = run([
            "stationary", "--model", ergodic_cfg, "--out", str(out),
            "--burn-in", "4.0", "--samples", "600", "--dt", "5e-3",
        ])
        assert code == 0
        atoms, probs = [], []
        for line in (out / "stationary.csv").read_text().splitlines()[1:]:
            a, p = line.split(",")
            atoms.append(float(a))
            probs.append(float(p))
        assert abs(sum(probs) - 1.0) < 1e-9
        # sanity: usable as a discrete law
        wv_exact_discrete((np.array(atoms), np.array(probs)),
                          (np.array(atoms), np.array(probs)),
                          load_config(ergodic_cfg).weight)

    def test_reruns_are_byte_identical(self, ergodic_cfg, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = run([
                "simulate", "--model", ergodic_cfg, "--out", str(out),
                "--paths", "128", "--t-end", "0.5", "--seed", "99",
            ])
            assert code == 0
            outs.append((out / "simulate.csv").read_bytes())
        assert outs[0] == outs[1]
