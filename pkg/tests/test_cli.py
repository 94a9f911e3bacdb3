import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mcuq.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from mcuq.csvio import CsvFormatError, read_table, write_table
from mcuq.synthgen import SimConfig, gen_instance


def write_obs(path, M, mask=None):
    mask = np.ones(M.shape, dtype=bool) if mask is None else mask
    i, j = np.nonzero(mask)
    write_table(path, ("i", "j", "value"), (i, j, M[i, j]))
    return path


@pytest.fixture
def poisson_csv(tmp_path):
    inst = gen_instance(SimConfig(m=30, n=25, r=2, p=0.7, mean_target=10.0, seed=3))
    write_obs(tmp_path / "obs.csv", inst.O, inst.mask)
    return tmp_path / "obs.csv"


@pytest.fixture
def sim_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(m=40, n=35, r=2, p=0.6, mean_target=20.0, trials=3, seed=1)))
    return path


def test_complete_rank_one_toy(tmp_path):
    inp = tmp_path / "toy.csv"
    write_table(inp, ("i", "j", "value"), ([0, 0, 1, 1], [0, 1, 0, 1], [1.0, 2.0, 2.0, 4.0]))
    out = tmp_path / "out.csv"
    assert main(["complete", str(inp), "--rank", "1", "--lambda", "0", "-o", str(out)]) == EXIT_OK
    t = read_table(out, ("i", "j", "value"))
    np.testing.assert_allclose(t["value"], [1.0, 2.0, 2.0, 4.0], atol=1e-6)
    manifest = json.loads((tmp_path / "out.manifest.json").read_text())
    assert manifest["command"] == "complete"
    assert str(out) in manifest["outputs"] and str(inp) in manifest["inputs"]


def test_missing_rank_is_usage_error(tmp_path, capsys):
    assert main(["complete", "x.csv", "-o", str(tmp_path / "o.csv")]) == EXIT_USAGE
    assert "--rank" in capsys.readouterr().err


def test_infeasible_rank(poisson_csv, tmp_path):
    assert main(["complete", str(poisson_csv), "--rank", "99", "-o", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_malformed_csv_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("i,j,value\n0,0,1.0\n0,1,abc\n")
    assert main(["complete", str(bad), "--rank", "1", "-o", str(tmp_path / "o.csv")]) == EXIT_USAGE
    assert "bad.csv:3:" in capsys.readouterr().err
    with pytest.raises(CsvFormatError):
        read_table(tmp_path / "bad.csv", ("i", "j", "value"))


def test_wrong_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("row,col,value\n0,0,1.0\n")
    assert main(["complete", str(bad), "--rank", "1", "-o", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_missing_input_file(tmp_path):
    assert main(["complete", str(tmp_path / "nope.csv"), "--rank", "1", "-o", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_complete_is_byte_identical(poisson_csv, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["complete", str(poisson_csv), "--rank", "2", "-o", str(out)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_replay_complete(poisson_csv, tmp_path, capsys):
    out = tmp_path / "c.csv"
    assert main(["complete", str(poisson_csv), "--rank", "2", "-o", str(out)]) == EXIT_OK
    assert main(["replay", str(tmp_path / "c.manifest.json")]) == EXIT_OK
    assert "byte-for-byte" in capsys.readouterr().out


def test_replay_detects_tampering(poisson_csv, tmp_path):
    out = tmp_path / "c.csv"
    main(["complete", str(poisson_csv), "--rank", "2", "-o", str(out)])
    man = tmp_path / "c.manifest.json"
    data = json.loads(man.read_text())
    data["outputs"][str(out)] = "0" * 64
    man.write_text(json.dumps(data))
    assert main(["replay", str(man)]) == EXIT_NUMERIC


def test_divergence_exit_code(poisson_csv, tmp_path, capsys):
    code = main(["complete", str(poisson_csv), "--rank", "2", "--eta", "50", "-o", str(tmp_path / "o.csv")])
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_intervals_width(poisson_csv, tmp_path):
    out = tmp_path / "iv.csv"
    assert main(["intervals", str(poisson_csv), "--rank", "2", "--model", "poisson", "-o", str(out)]) == EXIT_OK
    t = read_table(out, ("i", "j", "md", "s", "lo", "hi"))
    assert t["i"].size == 30 * 25
    live = t["s"] > 1e-6
    np.testing.assert_allclose((t["hi"] - t["lo"])[live], 2 * 1.959964 * t["s"][live], rtol=1e-6)
    np.testing.assert_allclose((t["hi"] + t["lo"])[live] / 2, t["md"][live], rtol=1e-12)


def test_intervals_models_differ(poisson_csv, tmp_path):
    widths = {}
    for model in ("gaussian", "poisson", "residual"):
        out = tmp_path / f"{model}.csv"
        assert main(["intervals", str(poisson_csv), "--rank", "2", "--model", model, "-o", str(out)]) == EXIT_OK
        widths[model] = read_table(out, ("i", "j", "md", "s", "lo", "hi"))["s"]
    assert not np.allclose(widths["gaussian"], widths["poisson"])


def test_intervals_subset_and_level(poisson_csv, tmp_path):
    ent = tmp_path / "ent.csv"
    write_table(ent, ("i", "j"), ([0, 5], [3, 7]))
    out = tmp_path / "iv.csv"
    args = ["intervals", str(poisson_csv), "--rank", "2", "--entries", str(ent), "--level", "0.5", "-o", str(out)]
    assert main(args) == EXIT_OK
    t = read_table(out, ("i", "j", "md", "s", "lo", "hi"))
    assert t["i"].tolist() == [0, 5] and t["j"].tolist() == [3, 7]
    np.testing.assert_allclose(t["hi"] - t["lo"], 2 * 0.6744898 * t["s"], rtol=1e-6)
    bad = ["intervals", str(poisson_csv), "--rank", "2", "--level", "1.5", "-o", str(out)]
    assert main(bad) == EXIT_USAGE


def test_binary_clamp_warning(tmp_path, capsys):
    rng = np.random.default_rng(0)
    O = (rng.random((20, 20)) < 0.2).astype(float)
    inp = write_obs(tmp_path / "b.csv", O)
    args = ["intervals", str(inp), "--rank", "8", "--lambda", "0", "--model", "binary", "-o", str(tmp_path / "o.csv")]
    assert main(args) == EXIT_OK
    assert "clamped" in capsys.readouterr().err


def test_simulate_outputs(sim_config, tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(sim_config), "-o", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["trials_completed"] == 3 and len(report["coverage"]) == 3
    assert (out / "coverage.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "mean coverage" in capsys.readouterr().out
    z = read_table(out / "z.csv", ("trial", "i", "j", "z"), int_cols=3)
    assert z["trial"].tolist() == [0, 1, 2]


def test_simulate_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"m": 10, "n": 10, "r": 2, "p": 2.0}))
    assert main(["simulate", "--config", str(cfg), "-o", str(tmp_path)]) == EXIT_USAGE
    assert "'p'" in capsys.readouterr().err
    cfg.write_text("[1, 2]")
    assert main(["simulate", "--config", str(cfg), "-o", str(tmp_path)]) == EXIT_USAGE


def test_simulate_threads_and_replay(sim_config, tmp_path):
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}"
        assert main(["simulate", "--config", str(sim_config), "--threads", threads, "-o", str(out)]) == EXIT_OK
        outs.append(out)
    for name in ("report.json", "z.csv", "coverage.png"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert main(["replay", str(outs[0] / "simulate.manifest.json"), "--threads", "2"]) == EXIT_OK


def test_distcheck_outputs(sim_config, tmp_path):
    out = tmp_path / "dc"
    assert main(["distcheck", "--config", str(sim_config), "--entry", "2,3", "-o", str(out)]) == EXIT_OK
    hist = read_table(out / "hist.csv", ("bin_left", "bin_right", "count"), int_cols=0)
    assert hist["count"].sum() == 3 and hist["bin_left"].size == 32
    summary = json.loads((out / "distcheck.json").read_text())
    assert summary["entry"] == [2, 3] and summary["samples"] == 3
    assert (out / "hist.png").exists()


def test_bad_entry_argument(sim_config, tmp_path):
    assert main(["distcheck", "--config", str(sim_config), "--entry", "2", "-o", str(tmp_path)]) == EXIT_USAGE


def test_covmax_zero_budget(tmp_path):
    inp = tmp_path / "a.csv"
    write_table(inp, ("i", "j", "md", "s"), ([0, 1], [0, 0], [1.5, -2.0], [1.0, 0.5]))
    out = tmp_path / "alloc.csv"
    assert main(["covmax", str(inp), "--budget", "0", "-o", str(out)]) == EXIT_OK
    t = read_table(out, ("i", "j", "a", "b"))
    np.testing.assert_array_equal(t["a"], [1.5, -2.0])
    np.testing.assert_array_equal(t["b"], [1.5, -2.0])
    assert json.loads((tmp_path / "alloc.json").read_text())["expected_coverage"] == 0.0


def test_covmax_with_truth(tmp_path, capsys):
    inp = tmp_path / "a.csv"
    write_table(inp, ("i", "j", "md", "s"), ([0, 1], [0, 0], [0.0, 0.0], [1.0, 1.0]))
    truth = tmp_path / "t.csv"
    write_table(truth, ("i", "j", "value"), ([0, 1], [0, 0], [0.5, 9.0]))
    out = tmp_path / "alloc.csv"
    assert main(["covmax", str(inp), "--budget", "4", "--truth", str(truth), "-o", str(out)]) == EXIT_OK
    result = json.loads((tmp_path / "alloc.json").read_text())
    assert result["realized_coverage"] == 0.5
    assert result["total_length"] <= 4.0
    assert "realized" in capsys.readouterr().out


def test_covmax_errors(tmp_path):
    inp = tmp_path / "a.csv"
    write_table(inp, ("i", "j", "md", "s"), ([0, 1], [0, 0], [0.0, 0.0], [1.0, 1.0]))
    out = str(tmp_path / "alloc.csv")
    assert main(["covmax", str(inp), "--budget", "-1", "-o", out]) == EXIT_USAGE
    truth = tmp_path / "t.csv"
    write_table(truth, ("i", "j", "value"), ([0], [0], [0.5]))
    assert main(["covmax", str(inp), "--budget", "1", "--truth", str(truth), "-o", out]) == EXIT_USAGE
    neg = tmp_path / "n.csv"
    write_table(neg, ("i", "j", "md", "s"), ([0], [0], [0.0], [-1.0]))
    assert main(["covmax", str(neg), "--budget", "1", "-o", out]) == EXIT_USAGE


def test_compare(poisson_csv, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", str(poisson_csv), "--rank", "2", "--budgets", "10,50", "-o", str(out)]) == EXIT_OK
    with open(out / "coverage_vs_budget.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["model"] for r in rows] == ["gaussian", "poisson", "gaussian", "poisson"]
    assert all(0 <= float(r["realized_coverage"]) <= 1 for r in rows)
    assert (out / "coverage_vs_budget.png").exists()
    assert "budgets" in capsys.readouterr().out


def test_csv_round_trip(tmp_path):
    vals = np.array([0.1, 1 / 3, -2.5e-300, 1e300, 0.0])
    write_table(tmp_path / "r.csv", ("i", "j", "value"), (np.arange(5), np.zeros(5, int), vals))
    t = read_table(tmp_path / "r.csv", ("i", "j", "value"))
    assert np.array_equal(t["value"], vals)
    assert b"\r" not in (tmp_path / "r.csv").read_bytes()


def test_png_is_deterministic(tmp_path):
    from mcuq import plotting

    edges = np.linspace(-4, 4, 33)
    counts = np.arange(32)
    plotting.zscore_histogram(edges, counts, tmp_path / "a.png", "x")
    plotting.zscore_histogram(edges, counts, tmp_path / "b.png", "x")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mcuq", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "mcuq" in res.stdout
    res = subprocess.run([sys.executable, "-m", "mcuq", "bogus"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE
