import csv
import json

import pytest

from flurlab.cli import build_config, main
from flurlab.errors import DomainError
from flurlab.kernel_regression import asymptotic_variance, get_kernel


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_writes_rows(tmp_path):
    out = tmp_path / "path.csv"
    assert main(["simulate", "--d", "0.3", "--lambda", "0.025", "--n", "1024", "--seed", "7",
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["index", "value"]
    assert len(rows) == 1025


def test_seed_determines_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for target in (a, b):
        main(["simulate", "--d", "0.3", "--lambda", "0.025", "--n", "256", "--seed", "7", "--out", str(target)])
    assert a.read_bytes() == b.read_bytes()
    value = _rows(a)[1][1]
    assert float(value) == float(repr(float(value)))


def test_simulate_then_fit_kernel(tmp_path):
    path, fitted = tmp_path / "path.csv", tmp_path / "fit.csv"
    main(["simulate", "--d", "0.3", "--lambda", "0.025", "--n", "2000", "--seed", "1", "--out", str(path)])
    assert main(["fit-kernel", "--input", str(path), "--out", str(fitted)]) == 0
    rows = _rows(fitted)
    assert rows[0] == ["x", "estimate"]
    assert len(rows) == 10


def test_variance_json(capsys):
    assert main(["variance", "--case", "moderate", "--d", "0.3", "--lambda-star", "1",
                 "--kernel", "epanechnikov"]) == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob == {"sigma2": asymptotic_variance("moderate", 0.3, 1.0, 1.0, get_kernel("epanechnikov"))}


def test_variance_knot_json(capsys):
    assert main(["variance", "--case", "weak", "--d", "0.3", "--q", "1", "--p", "2", "--eta", "0.5",
                 "--a", "1,2"]) == 0
    blob = json.loads(capsys.readouterr().out)
    assert len(blob["covariance"]) == 3
    assert blob["rate_exponent"] == pytest.approx(0.2)


def test_fit_knot_json(tmp_path, capsys):
    src = tmp_path / "y.csv"
    n = 400
    src.write_text("index,value\n" + "".join(
        f"{j},{1 + 2 * j / n + 3 * max(j / n - 0.5, 0)!r}\n" for j in range(1, n + 1)))
    assert main(["fit-knot", "--input", str(src), "--q", "2", "--p", "3"]) == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob["eta_hat"] == pytest.approx(0.5, abs=1e-5)


def test_missing_config(capsys):
    assert main(["experiment", "--config", "missing.toml"]) == 1
    assert "code=config_not_found" in capsys.readouterr().err


def test_missing_input(capsys):
    assert main(["fit-knot", "--input", "nope.csv", "--q", "1", "--p", "2"]) == 1
    assert "code=input_not_found" in capsys.readouterr().err


def test_bad_arguments_exit_one(capsys):
    assert main(["simulate", "--d", "0.3", "--n", "0"]) == 1
    assert main(["simulate", "--d", "0.7", "--n", "100"]) == 1  # lambda = 0 needs |d| < 1/2
    assert "code=" in capsys.readouterr().err


def test_numerical_failure_exit_two(tmp_path, capsys):
    src = tmp_path / "flat.csv"
    src.write_text("value\n" + "1.0\n" * 200)
    assert main(["fit-knot", "--input", str(src), "--q", "2", "--p", "3"]) == 2
    assert "code=not_identifiable" in capsys.readouterr().err


def test_config_rejects_unknown_keys():
    with pytest.raises(DomainError):
        build_config({"kind": "kernel_fdd", "d": 0.0, "n": 4096, "replications": 200, "colour": 1})
    with pytest.raises(DomainError):
        build_config({"kind": "kernel_fdd", "d": 0.0, "n": 4096})


def test_experiment_overrides_and_exit_codes(tmp_path, monkeypatch):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('kind = "kernel_fdd"\nd = 0.0\nregime = "fixed"\nregime_lambda = 0.5\n'
                   'n = 4096\nreplications = 300\nseed = 3\nx_points = [0.3, 0.7]\n')
    out = tmp_path / "r.json"
    flat = tmp_path / "r.csv"
    assert main(["experiment", "--config", str(cfg), "--out-json", str(out), "--out-csv", str(flat),
                 "--threads", "1"]) == 0
    blob = json.loads(out.read_text())
    assert blob["config"]["replications"] == 300
    assert _rows(flat)[0] == ["test", "statistic", "target", "threshold", "pass"]
    # an impossible tolerance forces a failed check
    assert main(["experiment", "--config", str(cfg), "--set", "variance_tol=1e-9", "--replications", "200",
                 "--out-json", str(out)]) == 3
    assert json.loads(out.read_text())["config"]["replications"] == 200


def test_experiment_thread_count_does_not_change_bytes(tmp_path, monkeypatch):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('kind = "kernel_variance"\nd = 0.3\nregime = "window"\nregime_c = 1.0\n'
                   'n = 4096\nreplications = 200\nseed = 11\n')
    outs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("FLURLAB_THREADS", threads)
        target = tmp_path / f"r{threads}.json"
        main(["experiment", "--config", str(cfg), "--out-json", str(target)])
        outs.append(target.read_bytes())
    assert outs[0] == outs[1]


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
