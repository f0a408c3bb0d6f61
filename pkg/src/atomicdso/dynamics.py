"""Revision dynamics (better, best, logit response) and exact chain oracles.

One user, drawn uniformly, revises per step.  Every step consumes exactly
two uniforms from the generator (user draw, then route draw), so two games
with the same choice sets driven by the same seed see identical random
streams.
"""

from __future__ import annotations

import csv
import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .game import EPS_U, Game, is_nash

BETTER, BEST, LOGIT = "better", "best", "logit"
KINDS = (BETTER, BEST, LOGIT)
DEFAULT_CHAIN_CAP = 20_000


class DynamicsError(ValueError):
    pass


class ChainTooLarge(DynamicsError):
    pass


class NonErgodicChain(DynamicsError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator from a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


# --- choice rules ---------------------------------------------------------

def choice_probabilities(kind: str, utilities: np.ndarray, current: int, beta: float | None = None,
                         weighting: str = "uniform") -> np.ndarray:
    """Route-choice distribution of a revising user.

    Parameters
    ----------
    kind : {"better", "best", "logit"}
    utilities : array
        Utilities of the user's choices, any constant offset.
    current : int
        Position of the current route in ``utilities``.
    beta : float
        Logit noise parameter; ``inf`` gives best response.
    weighting : {"uniform", "gain"}
        Better response only: uniform over improving routes, or weighted by
        the utility gain.
    """
    u = np.asarray(utilities, dtype=float)
    p = np.zeros(u.size)
    if kind == BETTER:
        better = u > u[current] + EPS_U
        if not better.any():
            p[current] = 1.0
        elif weighting == "gain":
            w = np.where(better, u - u[current], 0.0)
            p = w / w.sum()
        elif weighting == "uniform":
            p[better] = 1.0 / better.sum()
        else:
            raise DynamicsError(f"unknown weighting {weighting!r}")
        return p
    if kind == LOGIT:
        if beta is None or not beta >= 0:
            raise DynamicsError(f"logit needs beta >= 0, got {beta}")
        if math.isinf(beta):
            return choice_probabilities(BEST, u, current)
        e = np.exp(beta * (u - u.max()))
        return e / e.sum()
    if kind == BEST:
        best = u >= u.max() - EPS_U
        p[best] = 1.0 / best.sum()
        return p
    raise DynamicsError(f"unknown dynamics {kind!r}")


def _pick(p: np.ndarray, x: float) -> int:
    # inverse-CDF draw; guards against cdf[-1] < 1 by rounding
    k = int(np.searchsorted(np.cumsum(p), x, side="right"))
    k = min(k, p.size - 1)
    while p[k] == 0.0:
        k -= 1
    return k


@dataclass(frozen=True)
class Step:
    profile: tuple
    user: int       # -1 when no user was eligible
    route: int
    changed: bool
    utilities: np.ndarray | None = None


def revise(profile: Sequence[int], game: Game, rng: np.random.Generator, kind: str,
           beta: float | None = None, improvers_only: bool = False, weighting: str = "uniform") -> Step:
    """One revision: draw a user, then a route from its choice distribution.

    With ``improvers_only`` the user is drawn among those who have a better
    (or different best) response; if nobody does the step is a no-op.
    """
    profile = tuple(profile)
    n = len(profile)
    xu, xr = rng.random(2)
    if improvers_only:
        eligible = [i for i in range(n) if _can_move(game, profile, i, kind)]
        if not eligible:
            return Step(profile, -1, -1, False)
        user = eligible[min(int(xu * len(eligible)), len(eligible) - 1)]
    else:
        user = min(int(xu * n), n - 1)
    choices = game.choices(user)
    u = game.relative_utilities(profile, user)
    cur = choices.index(profile[user])
    k = _pick(choice_probabilities(kind, u, cur, beta, weighting), xr)
    route = choices[k]
    if route == profile[user]:
        return Step(profile, user, route, False, u)
    new = list(profile)
    new[user] = route
    return Step(tuple(new), user, route, True, u)


def _can_move(game, profile, user, kind):
    u = game.relative_utilities(profile, user)
    cur = game.choices(user).index(profile[user])
    if kind == BEST:
        return bool(np.sum(u >= u.max() - EPS_U) > 1 or u.max() > u[cur] + EPS_U)
    return bool(u.max() > u[cur] + EPS_U)


def better_response_step(profile, game: Game, rng, **kw) -> tuple:
    return revise(profile, game, rng, BETTER, **kw).profile


def best_response_step(profile, game: Game, rng, **kw) -> tuple:
    return revise(profile, game, rng, BEST, **kw).profile


def logit_step(profile, game: Game, beta: float, rng, **kw) -> tuple:
    if not beta > 0:
        raise DynamicsError("logit_step needs beta > 0")
    return revise(profile, game, rng, LOGIT, beta=beta, **kw).profile


# --- beta schedules --------------------------------------------------------

@dataclass(frozen=True)
class BetaSchedule:
    """``theoretical``: ln(t+1)/ceil(n/2); ``log``: ln(t+1)/c; ``linear``: (t+1)/c; ``fixed``: c."""

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in ("theoretical", "log", "linear", "fixed"):
            raise DynamicsError(f"unknown schedule {self.kind!r}")
        if self.kind == "theoretical":
            return
        p = self.param
        if p is None or not p >= 0 or (p == 0 and self.kind != "fixed"):
            raise DynamicsError(f"schedule {self.kind} needs a positive parameter, got {p}")

    def __call__(self, tau: int, n_users: int | None = None) -> float:
        return beta_schedule(self.kind, tau, self.param, n_users)

    @classmethod
    def parse(cls, spec: str) -> "BetaSchedule":
        """``linear:5000``, ``log:200``, ``fixed:0.5``, ``fixed:inf`` or ``theoretical``."""
        m = re.fullmatch(r"\s*([a-z]+)\s*(?:[:(]\s*([^)\s]+)\s*\)?)?\s*", spec.lower())
        if not m:
            raise DynamicsError(f"cannot parse schedule {spec!r}")
        param = None
        if m.group(2) is not None:
            try:
                param = float(m.group(2))
            except ValueError:
                raise DynamicsError(f"bad schedule parameter in {spec!r}") from None
        return cls(m.group(1), param)

    def __str__(self):
        return self.kind if self.param is None else f"{self.kind}:{self.param:g}"


def beta_schedule(kind: str, tau: int, param: float | None = None, n_users: int | None = None) -> float:
    if tau < 0:
        raise DynamicsError("iteration must be >= 0")
    if kind == "theoretical":
        if not n_users or n_users < 1:
            raise DynamicsError("theoretical schedule needs the number of users")
        return math.log(tau + 1) / math.ceil(n_users / 2)
    if param is None or param < 0 or (param == 0 and kind != "fixed"):
        raise DynamicsError(f"schedule {kind} needs a positive parameter")
    if kind == "log":
        return math.log(tau + 1) / param
    if kind == "linear":
        return (tau + 1) / param
    if kind == "fixed":
        return float(param)
    raise DynamicsError(f"unknown schedule {kind!r}")


# --- traces ----------------------------------------------------------------

@dataclass
class Trace:
    """Sample path stored as the initial profile plus one move per step.

    Row 0 is the initial state; row ``t`` is the state after step ``t``.
    ``nbr`` holds the number of users off their best response where it was
    computed and -1 elsewhere.
    """

    initial: tuple
    seed: int | None = None
    tc: list = field(default_factory=list)
    user: list = field(default_factory=list)
    route: list = field(default_factory=list)
    changed: list = field(default_factory=list)
    nbr: list = field(default_factory=list)

    def append(self, tc, user, route, changed, nbr=-1):
        self.tc.append(tc)
        self.user.append(user)
        self.route.append(route)
        self.changed.append(changed)
        self.nbr.append(nbr)

    def __len__(self):
        return len(self.tc)

    @property
    def n_steps(self) -> int:
        return len(self.tc) - 1

    def profiles(self):
        """Yield the profile at every row."""
        p = list(self.initial)
        yield tuple(p)
        for t in range(1, len(self.tc)):
            if self.changed[t]:
                p[self.user[t]] = self.route[t]
            yield tuple(p)

    def profile_at(self, t: int) -> tuple:
        for k, p in enumerate(self.profiles()):
            if k == t:
                return p
        raise IndexError(t)

    @property
    def final(self) -> tuple:
        return self.profile_at(len(self.tc) - 1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "tc_s", "revising_user", "changed", "nbr_count"])
            for t in range(len(self.tc)):
                w.writerow([t, repr(float(self.tc[t])), self.user[t], int(self.changed[t]), self.nbr[t]])


def non_best_count(game: Game, profile) -> int:
    return is_nash(profile, game).n_non_best


# --- exact chains ----------------------------------------------------------

@dataclass
class ChainMatrix:
    matrix: np.ndarray
    profiles: list
    index: dict

    @property
    def size(self) -> int:
        return len(self.profiles)

    def write_csv(self, path) -> None:
        labels = ["-".join(map(str, p)) for p in self.profiles]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["profile"] + labels)
            for lab, row in zip(labels, self.matrix):
                w.writerow([lab] + [repr(float(x)) for x in row])


def enumerate_profiles(game: Game, cap: int = DEFAULT_CHAIN_CAP) -> list[tuple]:
    size = game.profile_space_size()
    if size > cap:
        raise ChainTooLarge(f"{size} profiles exceed the cap of {cap}")
    return list(itertools.product(*(game.choices(i) for i in range(game.n_users))))


def utility_table(game: Game, profiles: list, index: dict) -> list[list[np.ndarray]]:
    """``table[s][i]`` = relative utilities of user ``i``'s choices at profile ``s``."""
    n = game.n_users
    tc = np.empty(len(profiles))
    cost = np.empty((len(profiles), n))
    for s, p in enumerate(profiles):
        tc[s], cost[s] = game.total_cost(p), [game.travel_time(p, i) for i in range(n)]
    out = []
    for p in profiles:
        rows = []
        for i in range(n):
            nb = []
            for r in game.choices(i):
                q = p[:i] + (r,) + p[i + 1:]
                if game.mode == "dso":
                    nb.append(-tc[index[q]])
                else:
                    nb.append(-cost[index[q], i] - game.tolls.toll(i, r))
            rows.append(np.array(nb))
        out.append(rows)
    return out


def build_chain_matrix(game: Game, kind: str, beta: float | None = None,
                       cap: int = DEFAULT_CHAIN_CAP, weighting: str = "uniform") -> ChainMatrix:
    """Exact one-step transition matrix over the whole profile space."""
    profiles = enumerate_profiles(game, cap)
    index = {p: s for s, p in enumerate(profiles)}
    table = utility_table(game, profiles, index)
    n = game.n_users
    P = np.zeros((len(profiles), len(profiles)))
    for s, p in enumerate(profiles):
        for i in range(n):
            ch = game.choices(i)
            probs = choice_probabilities(kind, table[s][i], ch.index(p[i]), beta, weighting)
            for r, pr in zip(ch, probs):
                if pr:
                    P[s, index[p[:i] + (r,) + p[i + 1:]]] += pr / n
    return ChainMatrix(P, profiles, index)


def chain_period(matrix: np.ndarray) -> int:
    """Period of an irreducible chain (gcd of cycle lengths via BFS levels)."""
    adj = matrix > 0
    level = np.full(adj.shape[0], -1)
    level[0] = 0
    frontier = [0]
    g = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    for u, v in zip(*np.nonzero(adj)):
        g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


def stationary_distribution(chain: ChainMatrix | np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Unique stationary distribution of an irreducible aperiodic chain."""
    P = chain.matrix if isinstance(chain, ChainMatrix) else np.asarray(chain, dtype=float)
    m = P.shape[0]
    n_comp, _ = csgraph.connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    if n_comp != 1:
        raise NonErgodicChain(f"chain is reducible ({n_comp} communicating classes)")
    if chain_period(P) != 1:
        raise NonErgodicChain("chain is periodic")
    A = P.T - np.eye(m)
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    for _ in range(100):
        if np.abs(pi @ P - pi).max() <= tol:
            break
        pi = pi @ P
    resid = np.abs(pi @ P - pi).max()
    if resid > tol:
        raise DynamicsError(f"stationary solve residual {resid:.2e} above {tol:.0e}")
    return pi


def uniform_mutation_pattern(sizes: Sequence[int]) -> np.ndarray:
    """Support of the zero-noise logit chain: profiles differing in at most one user."""
    profiles = list(itertools.product(*(range(k) for k in sizes)))
    a = np.array(profiles)
    return (a[:, None, :] != a[None, :, :]).sum(axis=2) <= 1


def scrambling_exponent(pattern: np.ndarray, cap: int = 64) -> int:
    """Smallest ``n`` with ``pattern**n`` scrambling (every row pair shares a column)."""
    B = np.asarray(pattern, dtype=bool).astype(np.int64)
    M = B.copy()
    for n in range(1, cap + 1):
        Mb = (M > 0).astype(np.int64)
        if ((Mb @ Mb.T) > 0).all():
            return n
        M = ((Mb @ B) > 0).astype(np.int64)
    raise DynamicsError(f"pattern is not scrambling up to power {cap}")


def write_distribution_csv(chain: ChainMatrix, pi: np.ndarray, path, game: Game | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["profile", "pi"] + (["tc_s"] if game is not None else []))
        for p, x in zip(chain.profiles, pi):
            row = ["-".join(map(str, p)), repr(float(x))]
            if game is not None:
                row.append(repr(game.total_cost(p)))
            w.writerow(row)
