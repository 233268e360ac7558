import csv
import json

import numpy as np
import pytest

from tubedmpc.cli import main
from tubedmpc.model import DEFAULT_X0, PUBLISHED_X0, load_config, network_from_dict, validate
from tubedmpc.synth import SynthesisBundle

SCALE = str(DEFAULT_X0[0] / PUBLISHED_X0[0])  # the emitted config carries the published x0


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["benchmark", "--out", str(d / "msd.json")]) == 0
    assert main(["synth", "--config", str(d / "msd.json"), "--out", str(d)]) == 0
    return d


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- benchmark

def test_benchmark_config(work):
    net, cfg = load_config(work / "msd.json")
    assert validate(net).ok
    np.testing.assert_array_equal(net.agents[2].Q_N[2:, 2:], np.diag([2.5, 2.5]))
    assert net.agents[2].R[0, 0] == 0.05
    np.testing.assert_array_equal(cfg.x0, [-5, -3, 1.2, 1, -1, -2])
    assert cfg.horizon == 5


# ---------------------------------------------------------------- synth

def test_synth_writes_bundle_and_report(work):
    b = SynthesisBundle.load(work / "bundle.json")
    assert b.mode == "GLOBAL_K" and b.N == 5
    text = (work / "bundle_report.txt").read_text()
    assert "spectral radius" in text and "trace" in text


def test_synth_local_gains(work, tmp_path):
    assert main(["synth", "--config", str(work / "msd.json"), "--out", str(tmp_path / "b.json"), "--local-gains"]) == 0
    assert SynthesisBundle.load(tmp_path / "b.json").mode == "LOCAL_K"


def test_synth_inflated_disturbance_exit_2(work, tmp_path, capsys):
    d = json.loads((work / "msd.json").read_text())
    for ag in d["agents"]:
        ag["dist_box"] = {k: [10 * v for v in vs] for k, vs in ag["dist_box"].items()}
    network_from_dict(d)  # still a well-formed model
    (tmp_path / "big.json").write_text(json.dumps(d))
    assert main(["synth", "--config", str(tmp_path / "big.json"), "--out", str(tmp_path)]) == 2
    assert "EMPTY_TIGHTENED_SET" in capsys.readouterr().err


def test_synth_missing_config_is_usage_error(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.json")]) == 64


# ---------------------------------------------------------------- simulate

def test_simulate_seed_42(work, tmp_path):
    out = tmp_path / "run"
    args = ["simulate", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
            "--out", str(out), "--seed", "42", "--x0-scale", SCALE]
    assert main(args) == 0
    r = rows(out / "trajectory.csv")
    assert len(r) == 61
    feas = r[0].index("feasible")
    assert all(row[feas] == "1" for row in r[1:])
    assert (out / "trajectory.svg").is_file()
    meta = json.loads((out / "trajectory.json").read_text())
    assert meta["seed"] == 42 and meta["feasible"]
    # idempotent: a second run produces identical bytes
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(args) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_simulate_zero_steps(work, tmp_path):
    assert main(["simulate", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--out", str(tmp_path), "--steps", "0", "--x0-scale", SCALE]) == 0
    assert len(rows(tmp_path / "trajectory.csv")) == 1


def test_simulate_published_x0_exit_3(work, tmp_path):
    assert main(["simulate", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--out", str(tmp_path), "--steps", "2"]) == 3


def test_simulate_bad_x0_usage(work, tmp_path):
    assert main(["simulate", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--out", str(tmp_path), "--x0", "1,2"]) == 64


@pytest.mark.slow
def test_simulate_admm_matches_central(work, tmp_path):
    base = ["simulate", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
            "--seed", "42", "--steps", "3", "--x0-scale", SCALE]
    assert main(base + ["--out", str(tmp_path / "c")]) == 0
    assert main(base + ["--out", str(tmp_path / "a"), "--solver", "admm"]) == 0
    c, a = rows(tmp_path / "c" / "trajectory.csv"), rows(tmp_path / "a" / "trajectory.csv")
    k = c[0].index("objective")
    for rc, ra in zip(c[1:], a[1:]):
        oc, oa = float(rc[k]), float(ra[k])
        assert abs(oa - oc) / max(1.0, abs(oc)) <= 1e-4


# ---------------------------------------------------------------- compare / report

def test_compare_single_zero_trial(work, tmp_path, capsys):
    assert main(["compare", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--out", str(tmp_path), "--trials", "1", "--steps", "5", "--mode", "ZERO", "--x0-scale", SCALE]) == 0
    rep = json.loads((tmp_path / "compare.json").read_text())
    for c in ("ROBUST", "NOMINAL"):
        assert rep["controllers"][c]["infeasibility_rate"] == 0.0
        assert rep["controllers"][c]["mean_cost"] > 0
    assert (tmp_path / "compare.csv").is_file() and (tmp_path / "compare.svg").is_file()
    assert "ROBUST" in capsys.readouterr().out


def test_compare_unknown_controller_exit_64(work, tmp_path):
    assert main(["compare", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--out", str(tmp_path), "--controllers", "robust,foo"]) == 64


def test_unknown_subcommand_exit_64(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 64


def test_report_rerenders(work, tmp_path):
    assert main(["simulate", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--out", str(tmp_path / "run"), "--steps", "3", "--x0-scale", SCALE]) == 0
    assert main(["report", "--config", str(work / "msd.json"), "--bundle", str(work / "bundle.json"),
                 "--csv", str(tmp_path / "run" / "trajectory.csv"), "--out", str(tmp_path / "rep")]) == 0
    svg = (tmp_path / "rep" / "trajectory.svg").read_text()
    assert svg.count('id="alpha_trace_') == 3 and svg.count('id="terminal_ellipse_') == 3


def test_report_needs_inputs(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 64
