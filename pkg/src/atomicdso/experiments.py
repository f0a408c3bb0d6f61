"""Batches of sample paths, slot statistics and scheme comparisons with CSV output."""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .algorithms import RunConfig, RunResult, run, run_deterministic, streams, initial_profile
from .dynamics import BETTER, LOGIT, BetaSchedule, Trace
from .game import Game, TollSchedule, derive_tolls, is_nash
from .network import Scenario, bundled_scenario, parse_scenario, scale_document

PRESETS = {
    "paper-simple": dict(scenario="simple_two_route.json", iters=20_000, samples=1000,
                         schedule="linear:5000", slot=500),
    "paper-nd": dict(scenario="nguyen_dupuis.json", iters=200_000, samples=50,
                     schedule="linear:100000", slot=500),
}


class ExperimentError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """One batch of sample paths.

    ``target`` is only used by the fixed-toll scheme: ``"run-dso-first"`` or
    a path to a profile file.  ``burn_in`` rows are dropped before the
    per-sample mean and std of TC are taken.
    """

    scenario: Any  # path, bundled name or scenario document
    mode: str = "dso"
    dynamics: str = BETTER
    schedule: str | None = None
    iters: int = 2000
    samples: int = 10
    seed: int = 0
    slot: int = 100
    initial: Any = "random"
    target: str = "run-dso-first"
    margin: float = 1e-6
    burn_in: int = 0
    scale: float = 1.0
    workers: int = 1
    improvers_only: bool = False

    def __post_init__(self):
        if self.mode not in ("dso", "fcp", "compare"):
            raise ExperimentError(f"unknown mode {self.mode!r}")
        if self.slot < 1:
            raise ExperimentError("slot width must be >= 1")
        if self.samples < 1:
            raise ExperimentError("sample count must be >= 1")
        if self.iters < 1:
            raise ExperimentError("iteration count must be >= 1")
        if not self.scale > 0:
            raise ExperimentError("scale must be positive")
        if self.dynamics == LOGIT and not self.schedule:
            raise ExperimentError("logit dynamics need --schedule")

    def sample_seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.samples)]


def apply_preset(name: str, overrides: dict) -> dict:
    if name not in PRESETS:
        raise ExperimentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    out = dict(PRESETS[name])
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def scaled(config: ExperimentConfig) -> tuple[ExperimentConfig, dict]:
    """Apply ``scale``: users, iterations, slot width and linear-schedule constants all shrink by it."""
    doc = scenario_document(config.scenario)
    if config.scale == 1.0:
        return config, doc
    f = config.scale
    doc = scale_document(doc, f)
    sched = config.schedule
    if sched:
        s = BetaSchedule.parse(sched)
        if s.kind == "linear":
            sched = str(BetaSchedule("linear", s.param * f))
    cfg = ExperimentConfig(**{**asdict(config), "iters": max(1, round(config.iters * f)),
                              "slot": max(1, round(config.slot * f)), "schedule": sched,
                              "burn_in": round(config.burn_in * f), "scale": 1.0})
    return cfg, doc


def scenario_document(src) -> dict:
    if isinstance(src, dict):
        return src
    p = Path(src)
    if p.exists():
        return json.loads(p.read_text())
    if p.parent == Path("."):
        try:
            return bundled_scenario(p.name)
        except FileNotFoundError:
            pass
    raise ExperimentError(f"scenario not found: {src}")


def read_profile(path) -> tuple[int, ...]:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return tuple(int(x) for x in json.loads(text))
    return tuple(int(x) for x in text.replace(",", " ").split())


# --- statistics --------------------------------------------------------------

@dataclass
class SlotSeries:
    slot: np.ndarray
    mean_tc: np.ndarray
    mean_nbr: np.ndarray  # NaN where the count was never computed in a slot


def trace_stats(trace: Trace, slot_width: int) -> SlotSeries:
    """Per-slot mean TC and mean non-best-response count over steps ``1..N``.

    Slot ``j`` covers steps ``j*W+1 .. (j+1)*W``; a trace with no steps gives
    one slot holding the initial state.
    """
    if slot_width < 1:
        raise ExperimentError("slot width must be >= 1")
    if len(trace) == 0:
        raise ExperimentError("empty trace")
    tc = np.asarray(trace.tc, dtype=float)
    nbr = np.asarray(trace.nbr, dtype=float)
    if len(tc) == 1:
        rows = [slice(0, 1)]
    else:
        n = len(tc) - 1
        rows = [slice(1 + j * slot_width, 1 + min(n, (j + 1) * slot_width))
                for j in range(math.ceil(n / slot_width))]
    m_tc, m_nbr = [], []
    for r in rows:
        m_tc.append(tc[r].mean())
        v = nbr[r][nbr[r] >= 0]
        m_nbr.append(v.mean() if v.size else math.nan)
    return SlotSeries(np.arange(len(rows)), np.array(m_tc), np.array(m_nbr))


def pad_trace(trace: Trace, iters: int, nbr_every: int) -> Trace:
    """Extend a converged trace to ``iters`` steps holding the final state."""
    last = trace.tc[-1]
    for t in range(len(trace), iters + 1):
        trace.append(last, -1, -1, False, 0 if nbr_every and t % nbr_every == 0 else -1)
    return trace


@dataclass
class SampleResult:
    sample_id: int
    seed: int
    best_tc: float
    mean_tc: float
    std_tc: float
    converged: bool
    final_tc: float
    slots: SlotSeries
    best_profile: tuple


@dataclass
class ExperimentReport:
    scheme: str
    samples: list = field(default_factory=list)
    target: tuple | None = None
    tolls: TollSchedule | None = None

    def summary_row(self) -> dict:
        best = np.array([s.best_tc for s in self.samples])
        return {"scheme": self.scheme, "n_samples": len(self.samples),
                "best_tc_min": best.min(), "best_tc_mean": best.mean(),
                "best_tc_std": best.std(),
                "mean_tc_mean": float(np.mean([s.mean_tc for s in self.samples])),
                "std_tc_mean": float(np.mean([s.std_tc for s in self.samples])),
                "n_converged": sum(s.converged for s in self.samples)}

    @property
    def all_converged(self) -> bool:
        return all(s.converged for s in self.samples)


# --- running -------------------------------------------------------------------

def _sample_job(args) -> SampleResult:
    scenario, mode, tolls, cfg, k, seed, init = args
    game = Game(scenario, mode, tolls)
    sched = BetaSchedule.parse(cfg.schedule) if cfg.dynamics == LOGIT else None
    rc = RunConfig(game, cfg.dynamics, sched, init, cfg.iters, seed,
                   improvers_only=cfg.improvers_only, nbr_every=cfg.slot)
    res: RunResult = run(rc)
    trace = res.trace
    if cfg.dynamics != LOGIT and res.converged:
        pad_trace(trace, cfg.iters, cfg.slot)
    tc = np.asarray(trace.tc[cfg.burn_in:] or trace.tc[-1:], dtype=float)
    return SampleResult(k, seed, res.best_tc, float(tc.mean()), float(tc.std()),
                        res.converged if cfg.dynamics != LOGIT else True, trace.tc[-1],
                        trace_stats(trace, cfg.slot), res.best_profile)


def _initial_for(cfg, game, seed, target):
    if cfg.initial == "target":
        if target is None:
            raise ExperimentError("initial profile 'target' needs a target")
        return target
    if isinstance(cfg.initial, str):
        return initial_profile(game, cfg.initial, streams(seed)[0])
    return tuple(cfg.initial)


def run_batch(scenario: Scenario, mode: str, cfg: ExperimentConfig, tolls=None, target=None,
              scheme: str | None = None) -> ExperimentReport:
    game = Game(scenario, mode, tolls)
    jobs = [(scenario, mode, tolls, cfg, k, s, _initial_for(cfg, game, s, target))
            for k, s in enumerate(cfg.sample_seeds())]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_sample_job, jobs))
    else:
        results = [_sample_job(j) for j in jobs]
    return ExperimentReport(scheme or mode, results, target, tolls)


def find_target(scenario: Scenario, cfg: ExperimentConfig) -> tuple:
    """Target for the fixed scheme.

    ``run-dso-first``: the best profile of a DSO logit run (or of a
    better-response run when the dynamics are not logit), then better
    response from there until Nash.
    """
    if cfg.target != "run-dso-first":
        target = read_profile(cfg.target)
        if len(target) != scenario.n_users:
            raise ExperimentError("target profile does not match the scenario")
        return target
    game = Game(scenario, "dso")
    if cfg.dynamics == LOGIT:
        first = run(RunConfig(game, LOGIT, BetaSchedule.parse(cfg.schedule), "random", cfg.iters, cfg.seed))
        start = first.best_profile
    else:
        start = "random"
    polish = run_deterministic(RunConfig(game, BETTER, None, start, max(cfg.iters, 100 * scenario.n_users),
                                         cfg.seed))
    if not is_nash(polish.final, game):
        raise ExperimentError("preliminary run did not reach a Nash state")
    return polish.final


def run_experiment(config: ExperimentConfig, out: str | Path | None = None, plots: bool = True
                   ) -> list[ExperimentReport]:
    """Run the batch (both schemes in ``compare`` mode) and write the outputs."""
    t0 = time.perf_counter()
    cfg, doc = scaled(config)
    scenario = parse_scenario(doc)
    reports = []
    if cfg.mode == "dso":
        reports.append(run_batch(scenario, "dso", cfg))
    else:
        target = find_target(scenario, cfg)
        tolls = derive_tolls(Game(scenario, "dso"), target, cfg.margin)
        if not is_nash(target, Game(scenario, "fcp", tolls), strict=cfg.margin > 0):
            raise ExperimentError("derived tolls do not make the target a Nash state")
        if cfg.mode == "compare":
            reports.append(run_batch(scenario, "dso", cfg, target=target, scheme="evolutionary"))
            reports.append(run_batch(scenario, "fcp", cfg, tolls, target, scheme="fixed"))
        else:
            reports.append(run_batch(scenario, "fcp", cfg, tolls, target))
    wall = time.perf_counter() - t0
    if out is not None:
        write_outputs(Path(out), cfg, config, reports, wall, plots)
    return reports


def compare_schemes(config: ExperimentConfig, out=None, plots: bool = True) -> tuple[ExperimentReport, ExperimentReport]:
    """Evolutionary (DSO) versus fixed-toll scheme with identical seeds and initial profiles."""
    cfg = ExperimentConfig(**{**asdict(config), "mode": "compare"})
    evo, fixed = run_experiment(cfg, out, plots)
    return evo, fixed


# --- output ------------------------------------------------------------------

def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


def write_report(report: ExperimentReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "samples.csv", ["sample_id", "best_tc_s", "mean_tc_s", "std_tc_s"],
               [[s.sample_id, _fmt(s.best_tc), _fmt(s.mean_tc), _fmt(s.std_tc)] for s in report.samples])
    rows = []
    for s in report.samples:
        for j, mt, mn in zip(s.slots.slot, s.slots.mean_tc, s.slots.mean_nbr):
            rows.append([s.sample_id, int(j), _fmt(mt), "" if math.isnan(mn) else _fmt(mn)])
    _write_csv(out / "slots.csv", ["sample_id", "slot", "mean_tc_s", "mean_nbr"], rows)
    row = report.summary_row()
    _write_csv(out / "summary.csv", list(row), [[_fmt(v) if isinstance(v, float) else v for v in row.values()]])
    if report.tolls is not None:
        report.tolls.write_csv(out / "tolls.csv")
    if report.target is not None:
        (out / "target.json").write_text(json.dumps(list(report.target)) + "\n")


def write_outputs(out: Path, cfg: ExperimentConfig, original: ExperimentConfig, reports, wall, plots):
    out.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1:
        write_report(reports[0], out)
    else:
        for r in reports:
            write_report(r, out / r.scheme)
        evo, fixed = reports
        _write_csv(out / "summary.csv", list(evo.summary_row()),
                   [[_fmt(v) if isinstance(v, float) else v for v in r.summary_row().values()] for r in reports])
        _write_csv(out / "paired.csv",
                   ["sample_id", "evo_mean_tc_s", "evo_std_tc_s", "fixed_mean_tc_s", "fixed_std_tc_s"],
                   [[a.sample_id, _fmt(a.mean_tc), _fmt(a.std_tc), _fmt(b.mean_tc), _fmt(b.std_tc)]
                    for a, b in zip(evo.samples, fixed.samples)])
    meta = {"config": _jsonable(asdict(original)), "effective_config": _jsonable(asdict(cfg)),
            "seeds": cfg.sample_seeds(), "converged": {r.scheme: r.all_converged for r in reports},
            "wall_time_s": round(wall, 3),
            "versions": {"atomicdso": __version__, "python": platform.python_version(),
                         "numpy": np.__version__}}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    if plots:
        from .plotting import render_figures
        render_figures(reports, out)


def _jsonable(d):
    return {k: (v if isinstance(v, (str, int, float, bool, type(None), list)) else
                list(v) if isinstance(v, tuple) else str(v)) for k, v in d.items()
            if k != "scenario" or not isinstance(v, dict)}
