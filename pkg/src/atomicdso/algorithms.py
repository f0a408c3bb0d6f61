"""Deterministic and stochastic solution algorithms and departure-order equilibration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import BEST, BETTER, LOGIT, BetaSchedule, DynamicsError, Trace, non_best_count, revise
from .game import EPS_U, Game, is_nash
from .network import Scenario


class NotSBPR1(ValueError):
    pass


def streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the initial profile and for the dynamics."""
    a, b = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.PCG64(a)), np.random.Generator(np.random.PCG64(b))


def initial_profile(game: Game, policy, rng: np.random.Generator | None = None) -> tuple:
    """``"shortest"`` (minimum free-flow time, lowest index on ties), ``"random"`` or an explicit profile."""
    sc = game.scenario
    if isinstance(policy, str):
        if policy == "shortest":
            return tuple(int(np.argmin([sc.network.route_fftt(r) for r in rs.routes]))
                         for rs in sc.route_sets)
        if policy == "random":
            if rng is None:
                raise ValueError("random initial profile needs a generator")
            return tuple(int(rs.choices[rng.integers(len(rs.choices))]) for rs in sc.route_sets)
        raise ValueError(f"unknown initial profile policy {policy!r}")
    p = tuple(int(r) for r in policy)
    if len(p) != sc.n_users:
        raise ValueError(f"initial profile has {len(p)} entries for {sc.n_users} users")
    for i, r in enumerate(p):
        if r not in game.choices(i):
            raise ValueError(f"route {r} not available to user {i}")
    return p


@dataclass
class RunConfig:
    """Settings for one sample path.

    ``window`` is the best-response convergence window (default ``10 * n``).
    ``nbr_every`` sets how often the non-best-response count is recorded in
    the trace (0 = never).
    """

    game: Game
    kind: str = BETTER
    schedule: BetaSchedule | None = None
    initial: object = "random"
    max_iters: int = 20_000
    seed: int = 0
    window: int | None = None
    improvers_only: bool = False
    weighting: str = "uniform"
    nbr_every: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.kind not in (BETTER, BEST, LOGIT):
            raise ValueError(f"unknown dynamics {self.kind!r}")
        if self.kind == LOGIT and self.schedule is None:
            raise ValueError("logit dynamics need a beta schedule")


@dataclass
class RunResult:
    trace: Trace
    initial: tuple
    final: tuple
    converged: bool
    best_profile: tuple
    best_tc: float
    iterations: int

    @property
    def initial_tc(self) -> float:
        return self.trace.tc[0]

    @property
    def final_tc(self) -> float:
        return self.trace.tc[-1]


def _start(config: RunConfig):
    init_rng, dyn_rng = streams(config.seed)
    p = initial_profile(config.game, config.initial, init_rng)
    trace = Trace(p, config.seed)
    tc = config.game.total_cost(p)
    trace.append(tc, -1, -1, False, non_best_count(config.game, p) if config.nbr_every else -1)
    return p, tc, trace, dyn_rng


def _record(config, trace, t, p, step):
    tc = config.game.total_cost(p)
    nbr = non_best_count(config.game, p) if config.nbr_every and t % config.nbr_every == 0 else -1
    trace.append(tc, step.user, step.route, step.changed, nbr)
    return tc


def run_deterministic(config: RunConfig) -> RunResult:
    """Better or best response until convergence or ``max_iters``.

    Better: stops once no user has a better response at the current profile.
    Users who drew and stayed are remembered; after ``n`` quiet steps the rest
    are scanned directly.
    Best: stops when TC has been constant for ``window`` steps and every
    profile visited in that stretch is Nash.
    """
    if config.kind not in (BETTER, BEST):
        raise DynamicsError("run_deterministic takes better or best response")
    game = config.game
    n = game.n_users
    window = config.window or 10 * n
    p, tc, trace, rng = _start(config)
    best_p, best_tc = p, tc
    converged = False

    stable: set = set()
    quiet = 0
    scanned = False
    nash_memo: dict = {}
    streak_tc, streak_len, streak = tc, 0, {p}

    def nash(q):
        if q not in nash_memo:
            nash_memo[q] = bool(is_nash(q, game))
        return nash_memo[q]

    if config.kind == BETTER and nash(p):
        return RunResult(trace, p, p, True, p, tc, 0)

    t = 0
    for t in range(1, config.max_iters + 1):
        step = revise(p, game, rng, config.kind, improvers_only=config.improvers_only,
                      weighting=config.weighting)
        if step.changed:
            p = step.profile
            stable, quiet, scanned = set(), 0, False
        else:
            quiet += 1
            if step.user >= 0:
                stable.add(step.user)
        tc = _record(config, trace, t, p, step)
        if tc < best_tc:
            best_p, best_tc = p, tc

        if config.kind == BETTER:
            if step.user < 0 or len(stable) == n:
                converged = True
            elif quiet >= n and not scanned:
                report = is_nash(p, game)
                converged = report.nash
                stable = {i for i in range(n) if report.gaps[i] <= EPS_U}
                scanned = True
            if converged:
                break
        else:
            if abs(tc - streak_tc) <= EPS_U:
                streak_len += 1
                streak.add(p)
            else:
                streak_tc, streak_len, streak = tc, 0, {p}
            if streak_len >= window:
                if all(nash(q) for q in streak):
                    converged = True
                    break
                streak_len, streak = 0, {p}
    return RunResult(trace, trace.initial, p, converged, best_p, best_tc, t)


def run_stochastic(config: RunConfig) -> RunResult:
    """Logit response with ``beta = schedule(tau)``, tracking the best profile visited."""
    if config.kind != LOGIT:
        raise DynamicsError("run_stochastic takes logit dynamics")
    game = config.game
    n = game.n_users
    p, tc, trace, rng = _start(config)
    best_p, best_tc = p, tc
    for t in range(1, config.max_iters + 1):
        beta = config.schedule(t - 1, n)
        step = revise(p, game, rng, LOGIT, beta=beta, improvers_only=config.improvers_only)
        p = step.profile
        tc = _record(config, trace, t, p, step)
        if tc < best_tc:
            best_p, best_tc = p, tc
    return RunResult(trace, trace.initial, p, False, best_p, best_tc, config.max_iters)


def run(config: RunConfig) -> RunResult:
    return run_stochastic(config) if config.kind == LOGIT else run_deterministic(config)


# --- departure-order equilibration ------------------------------------------

def check_sbpr1(scenario: Scenario) -> None:
    """Single origin, and every route has exactly one capacitated link."""
    origins = {u.origin for u in scenario.users}
    if len(origins) != 1:
        raise NotSBPR1(f"{len(origins)} origins; a single origin is required")
    links = scenario.network.links
    for rs in scenario.route_sets:
        for route in rs.routes:
            k = sum(1 for l in route if links[l].capacitated)
            if k != 1:
                ids = scenario.network.route_ids(route)
                raise NotSBPR1(f"route {ids} has {k} capacitated links")


def is_sbpr1(scenario: Scenario) -> bool:
    try:
        check_sbpr1(scenario)
    except NotSBPR1:
        return False
    return True


@dataclass(frozen=True)
class Move:
    user: int
    old: int
    new: int
    u_old: float
    u_new: float


@dataclass
class EquilibrationResult:
    profile: tuple
    path: list = field(default_factory=list)
    iterations: int = 0

    def valid_path(self, game: Game, initial: Sequence[int]) -> bool:
        """Replay the moves; each must change one user's route and strictly raise its utility."""
        p = list(initial)
        for m in self.path:
            if p[m.user] != m.old or m.old == m.new:
                return False
            u = game.relative_utilities(p, m.user)
            ch = game.choices(m.user)
            if not u[ch.index(m.new)] > u[ch.index(m.old)] + EPS_U:
                return False
            p[m.user] = m.new
        return tuple(p) == tuple(self.profile)


def departure_order_equilibration(game: Game, initial: Sequence[int]) -> EquilibrationResult:
    """Visit users in departure order, moving each to a best response.

    With fixed tolls on an SBPR-1 network a user's utilities do not depend on
    later departures, so one pass of ``n`` iterations ends at a Nash state.
    A user already at a best response stays; ties otherwise go to the lowest
    choice index.
    """
    if game.mode != "fcp":
        raise ValueError("departure-order equilibration needs a fixed-toll game")
    check_sbpr1(game.scenario)
    p = list(initial)
    n = game.n_users
    order = sorted(range(n), key=lambda i: (game.scenario.users[i].departure, i))
    out = EquilibrationResult(tuple(p))
    for i in order:
        out.iterations += 1
        u = game.relative_utilities(p, i)
        ch = game.choices(i)
        cur = ch.index(p[i])
        if u[cur] >= u.max() - EPS_U:
            continue
        k = int(np.argmax(u))
        out.path.append(Move(i, p[i], ch[k], float(u[cur]), float(u[k])))
        p[i] = ch[k]
    out.profile = tuple(p)
    return out
