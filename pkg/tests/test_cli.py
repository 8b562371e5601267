import json
import subprocess
import sys
import time

import numpy as np
import pytest

from bartree import config as C
from bartree.cli import main
from bartree.treeio import read_tree

REF = """
[model]
p = 1
a = [1.0, 0.5]
b = [1.0, 0.5]

[noise]
family = "gaussian_pair"
sigma2 = 1.0
rho = 0.3

[experiment]
n = {n}
n_min = {n_min}
replicates = {R}
master_seed = 12345
"""


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _ref(tmp_path, n=5, n_min=None, R=50):
    text = REF.format(n=n, n_min=n if n_min is None else n_min, R=R)
    return _write(tmp_path, text)


def test_simulate_writes_full_tree(tmp_path, capsys):
    cfg = _ref(tmp_path)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["size"] == 2**6 - 1 and summary["seed"] == 12345
    lines = (tmp_path / "a" / "tree.csv").read_text().splitlines()
    assert len(lines) == 2 + 2**6 - 1
    assert lines[1] == "label,generation,X,eps"


def test_simulate_seed_and_noise_flags(tmp_path):
    cfg = _ref(tmp_path)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "c"), "--no-record-noise"])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")])
    a, b, c = (read_tree(tmp_path / d / "tree.csv") for d in "abc")
    assert not np.array_equal(a.eps[2:], b.eps[2:])
    assert c.eps is None and "eps" not in (tmp_path / "c" / "tree.csv").read_text()
    assert (tmp_path / "a" / "tree.csv").read_bytes() == (tmp_path / "d" / "tree.csv").read_bytes()


ZERO = """
[model]
p = 2
a = [0.5, 0.3, 0.2]
b = [-0.4, 0.2, 0.1]

[noise]
family = "none"

[init]
kind = "{kind}"

[experiment]
n = 6
master_seed = 3
"""


def test_estimate_zero_noise_fixture(tmp_path, capsys):
    cfg = _write(tmp_path, ZERO.format(kind="gaussian"))
    main(["simulate", "--config", cfg, "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["estimate", "--tree", str(tmp_path / "tree.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert np.allclose(out["theta_hat"], [0.5, 0.3, 0.2, -0.4, 0.2, 0.1], rtol=0, atol=1e-8)


def test_estimate_without_noise_columns(tmp_path, capsys):
    cfg = _ref(tmp_path, n=6)
    main(["simulate", "--config", cfg, "--out", str(tmp_path), "--no-record-noise"])
    capsys.readouterr()
    assert main(["estimate", "--tree", str(tmp_path / "tree.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["sigma2_bar"] is None and out["rho_bar"] is None
    assert out["sigma2_hat"] > 0


def test_estimate_from_config(tmp_path, capsys):
    assert main(["estimate", "--config", _ref(tmp_path, n=6), "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["sigma2_bar"] is not None and len(out["M"]) == 4
    assert json.loads((tmp_path / "estimate.json").read_text()) == out


def test_estimate_corrupted_file(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("# bartree-tree p=1 n=2 seed=0\nlabel,generation,X\n1,0,zero\n")
    assert main(["estimate", "--tree", str(bad)]) == 1
    assert main(["estimate"]) == 1


def test_estimate_singular_exit_code(tmp_path):
    cfg = _write(tmp_path, ZERO.format(kind="zero").replace("0.5, 0.3", "0.0, 0.3").replace("-0.4", "0.0"))
    assert main(["estimate", "--config", cfg]) == 2


def test_limits_reference(tmp_path, capsys):
    assert main(["limits", "--config", _ref(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["Lambda"][0][0] == pytest.approx(16 / 3, abs=1e-12)
    assert out["Xi"] == [2.0]
    assert out["fixed_point"]["residual"] < 1e-12
    for key in ("L", "asymp_cov", "rates"):
        assert key in out


def test_limits_centered_and_unstable(tmp_path, capsys):
    text = REF.format(n=5, n_min=5, R=5).replace("a = [1.0, 0.5]", "a = [-1.0, 0.5]")
    assert main(["limits", "--config", _write(tmp_path, text)]) == 0
    assert json.loads(capsys.readouterr().out)["Xi"] == [0.0]
    text = REF.format(n=5, n_min=5, R=5).replace("a = [1.0, 0.5]", "a = [1.0, 1.2]")
    assert main(["limits", "--config", _write(tmp_path, text, "bad.toml")]) == 2
    assert "beta" in capsys.readouterr().err


def test_montecarlo_smoke(tmp_path):
    cfg = _ref(tmp_path, n=6, n_min=3, R=50)
    start = time.perf_counter()
    assert main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "mc")]) == 0
    assert time.perf_counter() - start < 10
    report = json.loads((tmp_path / "mc" / "report.json").read_text())
    header = (tmp_path / "mc" / "tails.csv").read_text().splitlines()[0]
    assert header == "n,delta,count,R,p_hat,ci_lo,ci_hi"
    header = (tmp_path / "mc" / "rates.csv").read_text().splitlines()[0]
    assert header == "stat,x,b_N,p_hat,R_hat,censored,I_theory"
    assert len(report["records"]) == 50
    for row in report["tails"]:
        assert 0 <= row["ci_lo"] <= row["p_hat"] <= row["ci_hi"] <= 1


def test_montecarlo_assert_mode(tmp_path):
    # 50 replicates are too few for the covariance check, which then fails
    cfg = _ref(tmp_path, n=6, n_min=3, R=50)
    assert main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "mc"), "--assert"]) == 3


def test_config_echo_round_trip(tmp_path):
    cfg = _ref(tmp_path, n=5, n_min=4, R=20)
    main(["montecarlo", "--config", cfg, "--out", str(tmp_path / "mc"), "--workers", "2"])
    echo = json.loads((tmp_path / "mc" / "report.json").read_text())["config"]
    again = C.from_dict(echo)
    assert again.to_dict() == C.load(cfg).to_dict() == echo


def test_empty_config_usage(tmp_path, capsys):
    assert main(["montecarlo", "--config", _write(tmp_path, "")]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["montecarlo"]) == 1
    assert main([]) == 1


def test_config_diagnostics_name_the_line(tmp_path, capsys):
    text = REF.format(n=5, n_min=5, R=5).replace("rho = 0.3", "rho = 1.5")
    assert main(["limits", "--config", _write(tmp_path, text)]) == 1
    err = capsys.readouterr().err
    assert "rho" in err and "line 10" in err
    assert main(["limits", "--config", _write(tmp_path, "[model\np=1", "x.toml")]) == 1
    text = REF.format(n=5, n_min=5, R=5).replace("n = 5", "n = 5\nalpha = 0.7", 1)
    assert main(["limits", "--config", _write(tmp_path, text, "y.toml")]) == 1
    assert "alpha" in capsys.readouterr().err


def test_check_scales_matches_examples(tmp_path, capsys):
    text = "[model]\np = 1\na = [0, 0.1]\nb = [0, 0.1]\n[scales]\ncases = [1]\nbetas = [0.4, 0.8]\nalphas = [0.1, 0.25]\n"
    assert main(["check-scales", "--config", _write(tmp_path, text), "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "scales.json").read_text())
    table = {(r["beta"], r["alpha"]): r["pass"] for r in rows}
    assert table == {(0.4, 0.1): True, (0.4, 0.25): True, (0.8, 0.1): True, (0.8, 0.25): False}
    assert "fail" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bartree", "check-scales"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.count("\n") == 18
    proc = subprocess.run([sys.executable, "-m", "bartree", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1
