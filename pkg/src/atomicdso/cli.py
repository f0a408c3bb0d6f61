"""Command line: ``dso run | load | tolls | chain``.

Exit codes: 0 success, 2 validation error, 3 non-convergence of
better/best response runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dynamics import KINDS, LOGIT, build_chain_matrix, stationary_distribution, write_distribution_csv
from .experiments import ExperimentConfig, apply_preset, read_profile, run_experiment, scenario_document
from .game import Game, TollSchedule, derive_tolls, is_nash
from .loading import LoadingError, write_records_csv
from .network import parse_scenario, scale_document

log = logging.getLogger("atomicdso")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3


def _scenario(path, scale=1.0):
    doc = scenario_document(path)
    if scale != 1.0:
        doc = scale_document(doc, scale)
    return parse_scenario(doc)


def _profile(arg, game):
    if arg == "shortest":
        from .algorithms import initial_profile
        return initial_profile(game, "shortest")
    return read_profile(arg)


def cmd_run(a) -> int:
    given = dict(scenario=a.scenario, iters=a.iters, samples=a.samples, schedule=a.schedule, slot=a.slot)
    if a.preset:
        given = apply_preset(a.preset, given)
    defaults = dict(iters=2000, samples=10, slot=100)
    for k, v in defaults.items():
        if given.get(k) is None:
            given[k] = v
    if given.get("scenario") is None:
        raise ValueError("--scenario or --preset is required")
    initial = a.initial
    if initial not in ("random", "shortest", "target"):
        initial = read_profile(initial)
    cfg = ExperimentConfig(scenario=given["scenario"], mode=a.mode, dynamics=a.dynamics,
                           schedule=given.get("schedule") if a.dynamics == LOGIT else None,
                           iters=given["iters"], samples=given["samples"], seed=a.seed, slot=given["slot"],
                           initial=initial, target=a.target, margin=a.margin, burn_in=a.burn_in,
                           scale=a.scale, workers=a.workers, improvers_only=a.improvers_only)
    reports = run_experiment(cfg, a.out, plots=not a.no_plots)
    for r in reports:
        row = r.summary_row()
        print(f"{r.scheme}: samples={row['n_samples']} best_tc_min={row['best_tc_min']:.3f} "
              f"best_tc_mean={row['best_tc_mean']:.3f} std_tc_mean={row['std_tc_mean']:.3f}")
    if a.dynamics != LOGIT and not all(r.all_converged for r in reports):
        print("some samples did not converge within the iteration limit", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_load(a) -> int:
    sc = _scenario(a.scenario, a.scale)
    game = Game(sc)
    res = game.loading(_profile(a.profile, game))
    if a.out:
        write_records_csv(res, a.out, sc)
    print(f"total_cost_s={res.total_cost!r}")
    return EXIT_OK


def cmd_tolls(a) -> int:
    sc = _scenario(a.scenario, a.scale)
    game = Game(sc)
    target = _profile(a.target, game)
    tolls = derive_tolls(game, target, a.margin)
    report = is_nash(target, game.with_tolls(tolls), strict=a.margin > 0)
    tolls.write_csv(a.out)
    print(f"target nash={report.nash} strict={report.strict}")
    return EXIT_OK


def cmd_chain(a) -> int:
    sc = _scenario(a.scenario)
    game = Game(sc, cache_size=0)
    if a.tolls:
        game = game.with_tolls(TollSchedule.read_csv(a.tolls, sc.n_users))
    chain = build_chain_matrix(game, a.dynamics, a.beta, cap=a.cap)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    chain.write_csv(out / "chain.csv")
    if a.dynamics == LOGIT:
        pi = stationary_distribution(chain)
        write_distribution_csv(chain, pi, out / "pi.csv", game.as_dso())
        k = int(pi.argmax())
        print(f"profiles={chain.size} mode={'-'.join(map(str, chain.profiles[k]))} mass={pi[k]:.6f}")
    else:
        print(f"profiles={chain.size}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dso", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="batch of sample paths with CSV and figure output")
    r.add_argument("--scenario")
    r.add_argument("--preset", choices=["paper-simple", "paper-nd"])
    r.add_argument("--mode", choices=["dso", "fcp", "compare"], default="dso")
    r.add_argument("--dynamics", choices=KINDS, default="better")
    r.add_argument("--schedule", help="linear:C, log:C, fixed:B or theoretical")
    r.add_argument("--iters", type=int)
    r.add_argument("--samples", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--slot", type=int)
    r.add_argument("--scale", type=float, default=1.0,
                   help="multiply user counts, iterations, slot width and linear schedule constants")
    r.add_argument("--initial", default="random", help="random, shortest, target or a profile file")
    r.add_argument("--target", default="run-dso-first", help="run-dso-first or a profile file")
    r.add_argument("--margin", type=float, default=1e-6, help="toll strictness margin [s]")
    r.add_argument("--burn-in", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--improvers-only", action="store_true",
                   help="draw the revising user among those who can improve")
    r.add_argument("--no-plots", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    ld = sub.add_parser("load", help="load one profile and write the trajectory CSV")
    ld.add_argument("--scenario", required=True)
    ld.add_argument("--profile", default="shortest")
    ld.add_argument("--scale", type=float, default=1.0)
    ld.add_argument("--out")
    ld.set_defaults(func=cmd_load)

    t = sub.add_parser("tolls", help="fixed tolls that make a target profile Nash")
    t.add_argument("--scenario", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--margin", type=float, default=0.0)
    t.add_argument("--scale", type=float, default=1.0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tolls)

    c = sub.add_parser("chain", help="exact transition matrix and stationary distribution")
    c.add_argument("--scenario", required=True)
    c.add_argument("--dynamics", choices=KINDS, default="logit")
    c.add_argument("--beta", type=float)
    c.add_argument("--tolls", help="toll CSV; plays the fixed-toll game")
    c.add_argument("--cap", type=int, default=20_000)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_chain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, LoadingError, json.JSONDecodeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
