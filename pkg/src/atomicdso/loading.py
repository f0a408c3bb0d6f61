"""Atomic dynamic network loading with Newell's car-following link model.

Each link keeps the entry and exit times of the vehicles that used it.  The
earliest admissible entry of the next vehicle follows from the leader's
trajectory ``x_n(t) = min(v (t - t_a), x_{n-1}(t - tau) - d)``; unrolling that
recursion along the platoon gives a closed form that only needs the entry
time of the last vehicle and the exit time of the vehicle ``K`` places ahead
of it, where ``K`` is the number of jam spacings that fit in the link.  The
explicit piecewise-linear trajectories are rebuilt on demand by
:func:`link_trajectories` for dumps, plots and feasibility checks.

Nodes resolve moves with ``t_d = max(t_PD, t_PA)``.  The loader admits the
globally earliest feasible move; exact ties for the same downstream link are
broken by :func:`merge_priority`.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import NULL_ROUTE, Link, Network, Scenario, derived_link_params

NEG_INF = -math.inf
SINK = -1


class LoadingError(RuntimeError):
    pass


class GridlockError(LoadingError):
    """No vehicle can advance although some are still in the network."""

    def __init__(self, message, links=()):
        super().__init__(message)
        self.links = tuple(links)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear position of one vehicle on one link.

    Outside the breakpoint range the vehicle moves at ``speed`` (the link's
    free-flow speed): before entry it is approaching, after the last
    breakpoint it has left the link.
    """

    times: tuple[float, ...]
    positions: tuple[float, ...]
    speed: float

    def __post_init__(self):
        if len(self.times) != len(self.positions) or not self.times:
            raise ValueError("trajectory needs matching, non-empty breakpoints")

    @property
    def arrival(self) -> float:
        return self.times[0]

    @property
    def end(self) -> float:
        return self.times[-1]

    def position(self, t: float) -> float:
        ts, xs = self.times, self.positions
        if t <= ts[0]:
            return xs[0] - self.speed * (ts[0] - t)
        if t >= ts[-1]:
            return xs[-1] + self.speed * (t - ts[-1])
        j = bisect.bisect_right(ts, t)
        t0, t1, x0, x1 = ts[j - 1], ts[j], xs[j - 1], xs[j]
        if t1 == t0:
            return x1
        return x0 + (x1 - x0) * (t - t0) / (t1 - t0)

    def last_time_at(self, y: float) -> float:
        """``max {t : x(t) <= y}``; the latest instant the vehicle is at or before ``y``."""
        ts, xs = self.times, self.positions
        j = bisect.bisect_right(xs, y)
        if j == 0:
            return ts[0] - (xs[0] - y) / self.speed
        if j == len(xs):
            return ts[-1] + (y - xs[-1]) / self.speed
        x0, x1, t0, t1 = xs[j - 1], xs[j], ts[j - 1], ts[j]
        return t0 + (t1 - t0) * (y - x0) / (x1 - x0)

    def hold_until(self, t_depart: float, length: float) -> "Trajectory":
        """Append the wait at the link end until the vehicle departs."""
        if self.positions[-1] != length:
            raise ValueError("trajectory does not end at the link end")
        if t_depart < self.times[-1]:
            raise ValueError(f"departure {t_depart} precedes reaching the link end {self.times[-1]}")
        if t_depart == self.times[-1]:
            return self
        return Trajectory(self.times + (t_depart,), self.positions + (length,), self.speed)


def free_flow_trajectory(arrival: float, link: Link) -> Trajectory:
    return Trajectory((arrival, arrival + link.length / link.vff), (0.0, link.length), link.vff)


def follower_trajectory(leader: Trajectory | None, arrival: float, link: Link) -> Trajectory:
    """Trajectory of a vehicle entering ``link`` at ``arrival`` behind ``leader``.

    Pointwise ``min(v (t - arrival), leader(t - tau) - d)`` (never below the
    entrance), followed until the link end is reached.
    """
    if leader is None:
        return free_flow_trajectory(arrival, link)
    p = derived_link_params(link)
    v, L, tau, d = link.vff, link.length, p.reaction_time, p.jam_spacing
    gts = [t + tau for t in leader.times]
    gxs = [x - d for x in leader.positions]
    shifted = Trajectory(tuple(gts), tuple(gxs), leader.speed)

    def f(t):
        return v * (t - arrival)

    # f - g is nondecreasing (slopes of g lie in [0, v]); find the first crossing
    tc = math.inf
    prev_t = arrival
    prev_h = f(arrival) - shifted.position(arrival)
    if prev_h >= 0:
        tc = arrival
    else:
        for t in gts:
            if t <= arrival:
                continue
            h = f(t) - shifted.position(t)
            if h >= 0:
                tc = prev_t + (t - prev_t) * (-prev_h) / (h - prev_h)
                break
            prev_t, prev_h = t, h
    t_ff_end = arrival + L / v
    if tc >= t_ff_end:
        return free_flow_trajectory(arrival, link)

    times = [arrival]
    xs = [0.0]
    g_c = shifted.position(tc)
    if g_c < 0:
        # constrained from the start with the leader still within d of the entrance
        t0 = shifted.last_time_at(0.0)
        if t0 > arrival:
            times.append(t0)
            xs.append(0.0)
        tc = max(tc, t0)
        g_c = 0.0
    elif tc > arrival:
        times.append(tc)
        xs.append(g_c)
    t_reach = shifted.last_time_at(L) if g_c < L else tc
    for t, x in zip(gts, gxs):
        if tc < t < t_reach and x < L:
            times.append(t)
            xs.append(x)
    if t_reach > times[-1]:
        times.append(t_reach)
        xs.append(L)
    else:
        xs[-1] = L
    return Trajectory(tuple(times), tuple(xs), v)


def possible_arrival(leader: Trajectory | None, link: Link) -> float:
    """Earliest time a follower may enter ``link`` behind ``leader``.

    ``x_leader^{-1}(d) + tau`` using the latest instant the leader is at ``d``;
    ``-inf`` on an empty link.
    """
    p = derived_link_params(link)
    if link.length < p.jam_spacing:
        raise LoadingError(f"link {link.id!r} is shorter than its jam spacing")
    if leader is None:
        return NEG_INF
    return leader.last_time_at(p.jam_spacing) + p.reaction_time


def possible_departure(prev_departure: float | None, arrival: float, link: Link) -> float:
    """``max(t_d_prev + 1/mu, t_a + L/v)``."""
    t = arrival + link.length / link.vff
    if prev_departure is None:
        return t
    return max(prev_departure + 1.0 / link.capacity, t)


# ---------------------------------------------------------------------------
# node model
# ---------------------------------------------------------------------------

class MergeLedger:
    """Vehicles admitted so far, per (node, downstream link, upstream link)."""

    def __init__(self):
        self.counts: dict = {}

    def count(self, node, down, up) -> int:
        return self.counts.get((node, down), {}).get(up, 0)

    def admit(self, node, down, up) -> None:
        per = self.counts.setdefault((node, down), {})
        per[up] = per.get(up, 0) + 1

    def passed(self, node) -> int:
        return sum(sum(c.values()) for (n, _), c in self.counts.items() if n == node)


def merge_priority(counts: Sequence[int], capacities: Sequence[float], ids: Sequence | None = None):
    """Upstream link that is most under-served relative to its capacity share.

    Returns the id (or position when ``ids`` is omitted) with the smallest
    ``count / capacity``; ties go to the smallest id.
    """
    if len(counts) != len(capacities):
        raise ValueError("counts and capacities differ in length")
    ids = list(range(len(counts))) if ids is None else list(ids)
    best = min(range(len(counts)), key=lambda k: (counts[k] / capacities[k], ids[k]))
    return ids[best]


def resolve_node(pending: Sequence[tuple], possible_arrivals: dict, capacities: dict,
                 ledger: MergeLedger, node=None):
    """Admit one vehicle at a node.

    Parameters
    ----------
    pending : sequence of ``(vehicle, upstream link, t_PD, downstream link)``
        Head vehicles of the upstream links with their possible departure
        times and the next link on their route (``SINK`` when the route ends).
    possible_arrivals : dict
        Downstream link -> possible arrival time of its next entrant.
    capacities : dict
        Upstream link -> capacity, used for merge priority.

    Returns
    -------
    (vehicle, upstream link, downstream link, t_d)
    """
    if not pending:
        raise ValueError("no pending vehicle")
    cands = []
    for veh, up, t_pd, down in pending:
        if down is None:
            raise LoadingError(f"vehicle {veh} has no outgoing link at node {node!r}")
        t_pa = NEG_INF if down == SINK else possible_arrivals.get(down, NEG_INF)
        cands.append((max(t_pd, t_pa), down, up, veh))
    t_min = min(c[0] for c in cands)
    tied = [c for c in cands if c[0] == t_min]
    down = min(c[1] for c in tied)
    tied = [c for c in tied if c[1] == down]
    if len(tied) > 1:
        ups = [c[2] for c in tied]
        chosen = merge_priority([ledger.count(node, down, u) for u in ups],
                                [capacities[u] for u in ups], ups)
        tied = [c for c in tied if c[2] == chosen]
    t, down, up, veh = tied[0]
    ledger.admit(node, down, up)
    return veh, up, down, t


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass
class LoadingResult:
    """Outcome of one loading.

    ``travel_time[i]`` is ``C_i`` (NaN for users on the null route);
    ``records[i]`` lists ``(link, t_a, t_d, t_pa, t_pd)`` per traversed link.
    """

    profile: tuple[int, ...]
    departure: np.ndarray
    exit_time: np.ndarray
    travel_time: np.ndarray
    total_cost: float
    records: list | None = None
    feasible: bool = True
    network: Network | None = field(default=None, repr=False)

    def active(self) -> np.ndarray:
        return ~np.isnan(self.travel_time)


class _LinkTables:
    """Per-link constants in flat lists (speed matters in the inner loop)."""

    def __init__(self, network: Network):
        n = len(network.links)
        self.fftt = [0.0] * n
        self.inv_mu = [0.0] * n
        self.cap = [0.0] * n
        self.ff_pa = [0.0] * n      # d/v + tau
        self.K = [0] * n            # platoon depth reaching the link end
        self.term_pa = [0.0] * n    # ((K+1) d - L)/v + K tau + tau
        self.tail = [0] * n
        self.head = [0] * n
        for k, (link, p) in enumerate(zip(network.links, network.params)):
            L, v, d, tau = link.length, link.vff, p.jam_spacing, p.reaction_time
            self.fftt[k] = L / v
            self.inv_mu[k] = 1.0 / link.capacity
            self.cap[k] = link.capacity
            self.ff_pa[k] = d / v + tau
            if d > 0:
                K = max(0, math.ceil(L / d) - 1)
                while (K + 1) * d < L:
                    K += 1
                while K > 0 and K * d >= L:
                    K -= 1
                self.K[k] = K
                self.term_pa[k] = ((K + 1) * d - L) / v + K * tau + tau
            else:
                self.K[k] = 1 << 62
            self.tail[k] = network.node_index[link.tail]
            self.head[k] = network.node_index[link.head]


def _tables(network: Network) -> _LinkTables:
    tab = getattr(network, "_load_tables", None)
    if tab is None:
        tab = _LinkTables(network)
        network._load_tables = tab
    return tab


def load(scenario: Scenario, profile: Sequence[int], record: bool = True) -> LoadingResult:
    """Load every user of ``profile`` onto the network.

    ``profile[i]`` indexes ``scenario.route_sets[i].routes``; ``NULL_ROUTE``
    keeps the user off the network.  The sweep is deterministic: identical
    inputs give bit-identical results.
    """
    network = scenario.network
    users = scenario.users
    n_users = len(users)
    if len(profile) != n_users:
        raise ValueError(f"profile has {len(profile)} entries for {n_users} users")
    tab = _tables(network)
    n_links = len(network.links)
    n_nodes = len(network.nodes)

    routes: list = [None] * n_users
    for i, r in enumerate(profile):
        if r == NULL_ROUTE:
            continue
        rs = scenario.route_sets[i].routes
        if not 0 <= r < len(rs):
            raise ValueError(f"user {i}: route index {r} out of range")
        routes[i] = rs[r]

    # virtual source links (one per origin) get ids n_links, n_links + 1, ...
    src_of_node: dict[int, int] = {}
    src_queue: list[list[int]] = []
    order = sorted((u.departure, i) for i, u in enumerate(users) if routes[i] is not None)
    for _, i in order:
        o = network.node_index[users[i].origin]
        if o not in src_of_node:
            src_of_node[o] = n_links + len(src_queue)
            src_queue.append([])
        src_queue[src_of_node[o] - n_links].append(i)
    n_all = n_links + len(src_queue)

    fftt = tab.fftt + [0.0] * len(src_queue)
    inv_mu = tab.inv_mu + [0.0] * len(src_queue)
    cap = tab.cap + [math.inf] * len(src_queue)
    ff_pa, K, term_pa = tab.ff_pa, tab.K, tab.term_pa

    veh: list[list[int]] = [[] for _ in range(n_all)]
    t_in: list[list[float]] = [[] for _ in range(n_all)]
    t_out: list[list[float]] = [[] for _ in range(n_all)]
    for s, q in enumerate(src_queue):
        veh[n_links + s] = q
        t_in[n_links + s] = [users[i].departure for i in q]

    in_links: list[list[int]] = [list(ls) for ls in network.in_links]
    head_node = tab.head + [0] * len(src_queue)
    tail_node = tab.tail + [-1] * len(src_queue)
    for o, s in src_of_node.items():
        in_links[o].append(s)
        head_node[s] = o

    hop = [0] * n_users
    exit_time = [math.nan] * n_users
    rec: list = [[] for _ in range(n_users)] if record else None
    ledger: dict = {}

    def pa_of(link):
        vs = t_in[link]
        n = len(vs)
        if n == 0:
            return NEG_INF
        t = vs[-1] + ff_pa[link]
        m = n - 1 - K[link]
        if m >= 0:
            outs = t_out[link]
            if m >= len(outs):
                return None  # waits on a departure that is not yet known
            z = outs[m] + term_pa[link]
            if z > t:
                t = z
        return t

    heap: list = []
    version = [0] * n_nodes
    node_cands: list[list] = [[] for _ in range(n_nodes)]

    def refresh(node):
        version[node] += 1
        cands = []
        for up in in_links[node]:
            n_out = len(t_out[up])
            if n_out >= len(veh[up]):
                continue
            i = veh[up][n_out]
            t_pd = t_in[up][n_out] + fftt[up]
            if n_out:
                tp = t_out[up][-1] + inv_mu[up]
                if tp > t_pd:
                    t_pd = tp
            route = routes[i]
            h = hop[i] if up < n_links else -1
            if h + 1 < len(route):
                down = route[h + 1]
                t_pa = pa_of(down)
                if t_pa is None:
                    continue
                t = t_pd if t_pd >= t_pa else t_pa
            else:
                down = SINK
                t_pa = NEG_INF
                t = t_pd
            cands.append((t, down, up, i, t_pd, t_pa))
            heapq.heappush(heap, (t, node, down, up, version[node]))
        node_cands[node] = cands

    for node in range(n_nodes):
        if in_links[node]:
            refresh(node)

    remaining = len(order)
    pa_seen: dict = {}
    while remaining:
        if not heap:
            stuck = [network.links[k].id for k in range(n_links) if len(t_out[k]) < len(veh[k])]
            raise GridlockError(f"gridlock: vehicles blocked on links {stuck}", stuck)
        t, node, down, up, ver = heapq.heappop(heap)
        if ver != version[node]:
            continue
        tied = [c for c in node_cands[node] if c[0] == t and c[1] == down]
        if len(tied) > 1:
            per = ledger.setdefault((node, down), {})
            ups = [c[2] for c in tied]
            chosen = merge_priority([per.get(u, 0) for u in ups], [cap[u] for u in ups], ups)
            cand = next(c for c in tied if c[2] == chosen)
        else:
            cand = next(c for c in node_cands[node] if c[2] == up)
        t, down, up, i, t_pd, t_pa = cand
        per = ledger.setdefault((node, down), {})
        per[up] = per.get(up, 0) + 1

        t_out[up].append(t)
        if record and up < n_links:
            rec[i].append((up, t_in[up][len(t_out[up]) - 1], t, pa_seen.pop((i, up)), t_pd))
        if down == SINK:
            exit_time[i] = t
            remaining -= 1
        else:
            if up < n_links:
                hop[i] += 1
            if record:
                pa_seen[(i, down)] = t_pa
            veh[down].append(i)
            t_in[down].append(t)
            if len(t_out[down]) == len(veh[down]) - 1:
                refresh(head_node[down])
        refresh(node)
        tn = tail_node[up]
        if tn >= 0 and tn != node:
            refresh(tn)

    dep = np.array([u.departure for u in users], dtype=float)
    ex = np.array(exit_time, dtype=float)
    tt = ex - dep
    active = [i for i in range(n_users) if routes[i] is not None]
    tc = math.fsum([exit_time[i] for i in active] + [-users[i].departure for i in active])
    return LoadingResult(profile=tuple(profile), departure=dep, exit_time=ex, travel_time=tt,
                         total_cost=tc, records=rec, network=network)


def link_trajectories(result: LoadingResult, link: int) -> list[tuple[int, Trajectory]]:
    """Rebuild every vehicle trajectory on ``link`` from a recorded loading.

    A vehicle that departs before its rebuilt trajectory reaches the link end
    keeps the unheld trajectory, so such an inconsistency stays visible.
    """
    if result.records is None:
        raise ValueError("loading was run without records")
    network = result.network
    lk = network.links[link]
    entries = sorted((r[1], i, r[2]) for i, recs in enumerate(result.records) for r in recs if r[0] == link)
    out = []
    leader = None
    for t_a, i, t_d in entries:
        traj = follower_trajectory(leader, t_a, lk)
        if t_d >= traj.end:
            traj = traj.hold_until(t_d, lk.length)
        out.append((i, traj))
        leader = traj
    return out


def write_records_csv(result: LoadingResult, path, scenario: Scenario | None = None) -> None:
    """Dump ``user,link,t_arrival,t_departure,t_pa,t_pd`` rows."""
    network = result.network
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "link", "t_arrival", "t_departure", "t_pa", "t_pd"])
        for i, recs in enumerate(result.records or []):
            uid = scenario.users[i].id if scenario is not None else i
            for link, ta, td, tpa, tpd in recs:
                w.writerow([uid, network.links[link].id, repr(ta), repr(td), repr(tpa), repr(tpd)])
