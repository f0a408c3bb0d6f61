"""Utilities, total cost, tolls and Nash checks for the DSO and DUE-FCP games.

In the DSO game user ``i`` pays its marginal social cost: its own travel
time plus the delay it adds to everyone else, so that
``U_i(r, r_-i) = TC(phi_i, r_-i) - TC(r, r_-i)``.  In the DUE-FCP game the
external part is replaced by a fixed toll, ``U^F_i = -C_i - T_i(r)``.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .loading import LoadingResult, load
from .network import NULL_ROUTE, Scenario

EPS_U = 1e-9


class GameError(ValueError):
    pass


@dataclass(frozen=True)
class TollSchedule:
    """Per-user, per-route tolls in seconds, aligned with ``RouteSet.routes``."""

    values: tuple[tuple[float, ...], ...]

    def toll(self, user: int, route: int) -> float:
        if route == NULL_ROUTE:
            return 0.0
        try:
            return self.values[user][route]
        except IndexError:
            raise GameError(f"no toll for user {user}, route {route}") from None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "route_index", "toll_s"])
            for i, row in enumerate(self.values):
                for r, t in enumerate(row):
                    w.writerow([i, r, repr(float(t))])

    @classmethod
    def read_csv(cls, path, n_users: int) -> "TollSchedule":
        rows: list[dict] = [dict() for _ in range(n_users)]
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows[int(rec["user"])][int(rec["route_index"])] = float(rec["toll_s"])
        values = []
        for i, d in enumerate(rows):
            if sorted(d) != list(range(len(d))):
                raise GameError(f"toll file has gaps for user {i}")
            values.append(tuple(d[r] for r in range(len(d))))
        return cls(tuple(values))

    @classmethod
    def zeros(cls, scenario: Scenario) -> "TollSchedule":
        return cls(tuple((0.0,) * len(rs.routes) for rs in scenario.route_sets))


@dataclass(frozen=True)
class UtilityBreakdown:
    private: float   # C_i
    external: float  # E_i in the DSO game, T_i in the DUE-FCP game
    utility: float


class Game:
    """A DSO or DUE-FCP game over a scenario, with a memo of loadings.

    Parameters
    ----------
    scenario : Scenario
    mode : {"dso", "fcp"}
    tolls : TollSchedule, optional
        Required in ``fcp`` mode.
    cache_size : int
        Maximum number of memoised loadings (0 disables the memo).
    """

    def __init__(self, scenario: Scenario, mode: str = "dso", tolls: TollSchedule | None = None,
                 cache_size: int = 4096):
        if mode not in ("dso", "fcp"):
            raise GameError(f"unknown game mode {mode!r}")
        if mode == "fcp":
            if tolls is None:
                raise GameError("the DUE-FCP game needs a toll schedule")
            if len(tolls.values) != scenario.n_users or any(
                    len(t) != len(rs.routes) for t, rs in zip(tolls.values, scenario.route_sets)):
                raise GameError("toll schedule does not cover every user and route")
        self.scenario = scenario
        self.mode = mode
        self.tolls = tolls
        self.cache_size = cache_size
        self._memo: OrderedDict = OrderedDict()
        self.n_loadings = 0
        self._null_costs = [rs.null_cost if rs.include_null else 0.0 for rs in scenario.route_sets]

    @property
    def n_users(self) -> int:
        return self.scenario.n_users

    def with_tolls(self, tolls: TollSchedule) -> "Game":
        return Game(self.scenario, "fcp", tolls, self.cache_size)

    def as_dso(self) -> "Game":
        return Game(self.scenario, "dso", None, self.cache_size)

    def choices(self, user: int) -> tuple[int, ...]:
        return self.scenario.route_sets[user].choices

    def profile_space_size(self) -> int:
        return math.prod(len(rs) for rs in self.scenario.route_sets)

    def _evaluate(self, profile: tuple) -> tuple[float, np.ndarray]:
        hit = self._memo.get(profile)
        if hit is not None:
            self._memo.move_to_end(profile)
            return hit
        res = load(self.scenario, profile, record=False)
        self.n_loadings += 1
        tc = res.total_cost
        if any(r == NULL_ROUTE for r in profile):
            extra = [self._null_costs[i] for i, r in enumerate(profile) if r == NULL_ROUTE]
            tc = math.fsum([tc] + extra)
        out = (tc, res.travel_time)
        if self.cache_size:
            self._memo[profile] = out
            if len(self._memo) > self.cache_size:
                self._memo.popitem(last=False)
        return out

    def loading(self, profile: Sequence[int]) -> LoadingResult:
        """Full loading with per-link records (not memoised)."""
        return load(self.scenario, tuple(profile), record=True)

    def total_cost(self, profile: Sequence[int]) -> float:
        """Sum of travel times; users who opt out (null route in the choice set) add its cost."""
        return self._evaluate(tuple(profile))[0]

    def travel_times(self, profile: Sequence[int]) -> np.ndarray:
        return self._evaluate(tuple(profile))[1]

    def travel_time(self, profile: Sequence[int], user: int) -> float:
        p = tuple(profile)
        if p[user] == NULL_ROUTE:
            return self._null_costs[user]
        return float(self._evaluate(p)[1][user])

    def relative_utilities(self, profile: Sequence[int], user: int) -> np.ndarray:
        """Utilities of every choice of ``user`` up to a constant.

        DSO: ``-TC(r, r_-i)``, which differs from ``U_i`` by ``TC(phi_i, r_-i)``
        and so ranks routes, measures gaps and drives logit choice exactly as
        ``U_i`` does.  DUE-FCP: the exact ``U^F_i``.
        """
        p = list(profile)
        out = []
        for r in self.choices(user):
            p[user] = r
            q = tuple(p)
            if self.mode == "dso":
                out.append(-self.total_cost(q))
            else:
                out.append(-self.travel_time(q, user) - self.tolls.toll(user, r))
        return np.array(out)

    def utility(self, profile: Sequence[int], user: int, route: int | None = None) -> UtilityBreakdown:
        if self.mode == "dso":
            return dso_utility(self, profile, user, route)
        return fcp_utility(self, profile, user, route, self.tolls)

    def potential(self, profile: Sequence[int]) -> float:
        """Potential of the DSO game, ``-TC``."""
        return -self.total_cost(profile)


def total_cost(loading: LoadingResult) -> float:
    """Sum of every travelling user's ``C_i``; null-route users add nothing."""
    return loading.total_cost


def _with(profile, user, route):
    p = list(profile)
    p[user] = route
    return tuple(p)


def dso_utility(game: Game, profile: Sequence[int], user: int, route: int | None = None) -> UtilityBreakdown:
    """Private cost, external cost and marginal-cost utility of ``user`` on ``route``.

    ``route`` defaults to the user's current route.  Two loadings: with the
    user on ``route`` and with the user removed.
    """
    route = profile[user] if route is None else route
    if route != NULL_ROUTE and route not in game.choices(user) and not 0 <= route < len(
            game.scenario.route_sets[user].routes):
        raise GameError(f"route {route} not available to user {user}")
    if route == NULL_ROUTE:
        c = game._null_costs[user]
        return UtilityBreakdown(c, 0.0, -c)
    with_user = _with(profile, user, route)
    without = _with(profile, user, NULL_ROUTE)
    c_with = game.travel_times(with_user)
    c_without = game.travel_times(without)
    c_i = float(c_with[user])
    others = [k for k in range(game.n_users) if k != user and not math.isnan(c_with[k])]
    ext = math.fsum([float(c_with[k]) for k in others] + [-float(c_without[k]) for k in others])
    return UtilityBreakdown(c_i, ext, -(c_i + ext))


def fcp_utility(game: Game, profile: Sequence[int], user: int, route: int | None = None,
                tolls: TollSchedule | None = None) -> UtilityBreakdown:
    """``U^F_i = -C_i - T_i(route)`` under a fixed toll schedule."""
    tolls = tolls if tolls is not None else game.tolls
    if tolls is None:
        raise GameError("no toll schedule")
    route = profile[user] if route is None else route
    toll = tolls.toll(user, route)
    c = game.travel_time(_with(profile, user, route), user)
    return UtilityBreakdown(c, toll, -(c + toll))


@dataclass(frozen=True)
class NashReport:
    nash: bool
    strict: bool
    gaps: np.ndarray  # best attainable utility minus current, per user

    def __bool__(self):
        return self.nash

    @property
    def n_non_best(self) -> int:
        return int(np.sum(self.gaps > EPS_U))


def user_gap(game: Game, profile: Sequence[int], user: int) -> tuple[float, bool]:
    """(best utility minus current utility, current route is the unique best)."""
    u = game.relative_utilities(profile, user)
    cur = game.choices(user).index(profile[user])
    gap = float(u.max() - u[cur])
    others = np.delete(u, cur)
    unique = bool(others.size == 0 or np.all(others < u[cur] - EPS_U))
    return gap, unique


def is_nash(profile: Sequence[int], game: Game, strict: bool = False) -> NashReport:
    """Scan every unilateral deviation of every user."""
    gaps = np.empty(game.n_users)
    all_unique = True
    for i in range(game.n_users):
        gaps[i], unique = user_gap(game, profile, i)
        all_unique &= unique
    nash = bool(np.all(gaps <= EPS_U))
    is_strict = nash and all_unique
    return NashReport(is_strict if strict else nash, is_strict, gaps)


def derive_tolls(game: Game, target: Sequence[int], margin: float = 0.0) -> TollSchedule:
    """Fixed tolls that make ``target`` a Nash state of the DUE-FCP game.

    Each route's toll is the external cost the user would impose there with
    everybody else held at the target, ``T_i(r) = E_i(r, target_-i)``.  Routes
    that would still beat the target route are raised just enough to tie it,
    every non-target route gets ``margin`` on top (``margin > EPS_U`` makes the
    target strict), and each user's tolls are shifted by a constant so the
    smallest is zero when any would be negative.
    """
    if game.mode != "dso":
        game = game.as_dso()
    target = tuple(target)
    scenario = game.scenario
    if len(target) != scenario.n_users:
        raise GameError("target profile has the wrong length")
    values = []
    for i, rs in enumerate(scenario.route_sets):
        if target[i] == NULL_ROUTE:
            raise GameError("target profiles must route every user")
        br = [dso_utility(game, target, i, r) for r in range(len(rs.routes))]
        u_star = br[target[i]].utility
        row = []
        for r, b in enumerate(br):
            t = b.external
            if r != target[i]:
                t += max(0.0, b.utility - u_star) + margin
            row.append(t)
        low = min(row)
        if low < 0:
            row = [t - low for t in row]
        values.append(tuple(row))
    return TollSchedule(tuple(values))


def potential_identity_check(game: Game, profile: Sequence[int], user: int, route_a: int, route_b: int) -> float:
    """``|[U_i(a) - U_i(b)] + [TC(a) - TC(b)]|`` for a unilateral switch in the DSO game."""
    dso = game if game.mode == "dso" else game.as_dso()
    ua = dso_utility(dso, profile, user, route_a).utility
    ub = dso_utility(dso, profile, user, route_b).utility
    tca = dso.total_cost(_with(profile, user, route_a))
    tcb = dso.total_cost(_with(profile, user, route_b))
    return abs((ua - ub) + (tca - tcb))
