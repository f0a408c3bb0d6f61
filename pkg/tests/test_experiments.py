import csv
import json
import math

import numpy as np
import pytest

from atomicdso.cli import main
from atomicdso.dynamics import Trace
from atomicdso.experiments import (
    ExperimentConfig, ExperimentError, apply_preset, read_profile, run_experiment, scaled, trace_stats,
)
from atomicdso.game import Game
from atomicdso.network import bundled_scenario, parse_scenario, scale_document
from conftest import sbpr1_doc


def small_doc(n=4, seed=3):
    return sbpr1_doc(np.random.default_rng(seed), n, 2)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- slot statistics -----------------------------------------------------------

def _trace(tcs, nbr=None):
    tr = Trace((0,), 0)
    for k, c in enumerate(tcs):
        tr.append(c, -1 if k == 0 else 0, 0, False, -1 if nbr is None else nbr[k])
    return tr


def test_trace_stats_constant_trace():
    s = trace_stats(_trace([5.0] * 11, [0] * 11), 3)
    assert list(s.slot) == [0, 1, 2, 3]
    assert np.all(s.mean_tc == 5.0) and np.all(s.mean_nbr == 0)


def test_trace_stats_slot_boundaries():
    s = trace_stats(_trace([100.0, 1, 2, 3, 4, 5], [9, -1, 2, -1, 4, -1]), 2)
    assert list(s.mean_tc) == [1.5, 3.5, 5.0]
    assert s.mean_nbr[0] == 2 and s.mean_nbr[1] == 4 and math.isnan(s.mean_nbr[2])


def test_trace_stats_errors_and_single_row():
    with pytest.raises(ExperimentError):
        trace_stats(_trace([1.0]), 0)
    with pytest.raises(ExperimentError):
        trace_stats(Trace((0,), 0), 1)
    s = trace_stats(_trace([7.0]), 5)
    assert list(s.mean_tc) == [7.0]


# --- configuration ---------------------------------------------------------------

def test_config_validation():
    for bad in (dict(slot=0), dict(samples=0), dict(iters=0), dict(mode="x"), dict(scale=0),
                dict(dynamics="logit")):
        with pytest.raises(ExperimentError):
            ExperimentConfig(scenario="x", **bad)


def test_scale_semantics():
    cfg = ExperimentConfig(scenario="simple_two_route.json", dynamics="logit", schedule="linear:5000",
                           iters=20000, slot=500, burn_in=1000, scale=0.1)
    eff, doc = scaled(cfg)
    assert (eff.iters, eff.slot, eff.burn_in, eff.schedule) == (2000, 50, 100, "linear:500")
    assert sum(d["count"] for d in doc["demand"]) == 40


def test_presets():
    p = apply_preset("paper-nd", {"iters": 10, "samples": None})
    assert p["iters"] == 10 and p["samples"] == 50 and p["scenario"] == "nguyen_dupuis.json"
    with pytest.raises(ExperimentError):
        apply_preset("nope", {})


def test_read_profile(tmp_path):
    (tmp_path / "a.json").write_text("[0, 1, 1]")
    (tmp_path / "b.txt").write_text("0,1 1\n")
    assert read_profile(tmp_path / "a.json") == read_profile(tmp_path / "b.txt") == (0, 1, 1)


# --- batches ---------------------------------------------------------------------

def test_one_sample_one_step(tmp_path):
    cfg = ExperimentConfig(scenario=small_doc(), dynamics="logit", schedule="fixed:1", iters=1, samples=1,
                           slot=1)
    run_experiment(cfg, tmp_path, plots=False)
    assert len(rows(tmp_path / "slots.csv")) == 1
    assert len(rows(tmp_path / "samples.csv")) == 1


def test_outputs_byte_identical_and_summary_recomputes(tmp_path):
    cfg = ExperimentConfig(scenario=small_doc(5), dynamics="logit", schedule="linear:30", iters=80,
                           samples=4, slot=20, seed=11)
    run_experiment(cfg, tmp_path / "a", plots=False)
    run_experiment(cfg, tmp_path / "b", plots=False)
    for name in ("samples.csv", "slots.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    samples = rows(tmp_path / "a" / "samples.csv")
    summary = rows(tmp_path / "a" / "summary.csv")[0]
    best = np.array([float(r["best_tc_s"]) for r in samples])
    assert float(summary["best_tc_min"]) == best.min()
    assert float(summary["best_tc_mean"]) == pytest.approx(best.mean(), abs=1e-12)
    assert float(summary["std_tc_mean"]) == pytest.approx(np.mean([float(r["std_tc_s"]) for r in samples]))
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["seeds"] == [11, 12, 13, 14]


def test_workers_match_serial(tmp_path):
    base = dict(scenario=small_doc(4), dynamics="better", iters=200, samples=3, slot=50)
    run_experiment(ExperimentConfig(**base), tmp_path / "s", plots=False)
    run_experiment(ExperimentConfig(**base, workers=2), tmp_path / "p", plots=False)
    assert (tmp_path / "s" / "slots.csv").read_bytes() == (tmp_path / "p" / "slots.csv").read_bytes()


def test_converged_traces_are_padded(tmp_path):
    cfg = ExperimentConfig(scenario=small_doc(3), dynamics="better", iters=300, samples=2, slot=100)
    evo, = run_experiment(cfg, tmp_path, plots=False)
    for s in evo.samples:
        assert s.converged and len(s.slots.slot) == 3
        assert s.slots.mean_nbr[-1] == 0


def test_compare_best_response_from_target_is_frozen(tmp_path):
    cfg = ExperimentConfig(scenario=small_doc(4), mode="compare", dynamics="best", iters=120, samples=3,
                           slot=40, initial="target", margin=0.1)
    evo, fixed = run_experiment(cfg, tmp_path, plots=False)
    for a, b in zip(evo.samples, fixed.samples):
        assert a.std_tc == pytest.approx(0, abs=1e-9) and b.std_tc == pytest.approx(0, abs=1e-9)
        assert np.array_equal(a.slots.mean_tc, b.slots.mean_tc)
    assert {p.name for p in tmp_path.iterdir()} >= {"evolutionary", "fixed", "paired.csv", "summary.csv",
                                                     "meta.json"}
    assert len(rows(tmp_path / "summary.csv")) == 2
    target = json.loads((tmp_path / "fixed" / "target.json").read_text())
    assert tuple(target) == fixed.target


def test_fcp_mode_with_target_file(tmp_path):
    doc = small_doc(3)
    (tmp_path / "t.json").write_text("[1, 0, 1]")
    cfg = ExperimentConfig(scenario=doc, mode="fcp", dynamics="better", iters=100, samples=2, slot=10,
                           target=str(tmp_path / "t.json"), margin=0.2)
    rep, = run_experiment(cfg, tmp_path / "out", plots=False)
    # the target is the unique Nash state of the tolled game
    tc = Game(parse_scenario(doc)).total_cost((1, 0, 1))
    assert all(s.converged and s.final_tc == tc for s in rep.samples)
    bad = ExperimentConfig(**{**cfg.__dict__, "target": str(tmp_path / "t.json")})
    (tmp_path / "t.json").write_text("[1, 0]")
    with pytest.raises(ExperimentError):
        run_experiment(bad)


def test_ripple_effect_under_best_response():
    # the count of users off their best response rises from zero and TC later drops
    doc = scale_document(bundled_scenario("simple_two_route"), 0.1)
    cfg = ExperimentConfig(scenario=doc, dynamics="best", iters=3000, samples=20, slot=5)
    rep, = run_experiment(cfg)
    seen = False
    for s in rep.samples:
        nbr, tc = s.slots.mean_nbr, s.slots.mean_tc
        for j in range(1, len(nbr)):
            if nbr[j - 1] == 0 and nbr[j] > 0 and np.nanmin(tc[j:]) < tc[j - 1] - 1e-9:
                seen = True
    assert seen


# --- command line --------------------------------------------------------------

def test_cli_run_and_figures(tmp_path):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps(small_doc(4)))
    rc = main(["run", "--scenario", str(scen), "--dynamics", "logit", "--schedule", "linear:20",
               "--iters", "60", "--samples", "2", "--slot", "20", "--out", str(tmp_path / "o")])
    assert rc == 0
    for name in ("samples.csv", "slots.csv", "summary.csv", "meta.json", "slots.png", "best_tc.png",
                 "mean_std.png"):
        assert (tmp_path / "o" / name).stat().st_size > 0


def test_cli_exit_codes(tmp_path):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps(bundled_scenario("simple_two_route")))
    assert main(["run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--scenario", str(scen), "--slot", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--scenario", str(scen), "--dynamics", "logit", "--out", str(tmp_path / "x")]) == 2
    rc = main(["run", "--scenario", str(scen), "--dynamics", "best", "--iters", "3", "--samples", "1",
               "--scale", "0.1", "--no-plots", "--out", str(tmp_path / "y")])
    assert rc == 3


def test_cli_load_tolls_chain(tmp_path, capsys):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps(small_doc(3)))
    assert main(["load", "--scenario", str(scen), "--out", str(tmp_path / "traj.csv")]) == 0
    assert "total_cost_s=" in capsys.readouterr().out
    (tmp_path / "t.json").write_text("[0, 1, 0]")
    assert main(["tolls", "--scenario", str(scen), "--target", str(tmp_path / "t.json"), "--margin", "0.5",
                 "--out", str(tmp_path / "tolls.csv")]) == 0
    assert "nash=True strict=True" in capsys.readouterr().out
    assert main(["chain", "--scenario", str(scen), "--beta", "60", "--tolls", str(tmp_path / "tolls.csv"),
                 "--out", str(tmp_path / "ch")]) == 0
    assert "mode=0-1-0" in capsys.readouterr().out
    assert (tmp_path / "ch" / "pi.csv").exists()
