"""Scenario builders shared by the test modules."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from atomicdso.game import Game
from atomicdso.loading import link_trajectories, possible_arrival
from atomicdso.network import derived_link_params, parse_scenario


def single_link_doc(n_users=2, headway=0.5, fftt=42.0, cap=1.25, sat=6.0):
    """One link A->B; the 2-user version is the hand-computed bottleneck example."""
    return {
        "nodes": ["A", "B"],
        "links": [{"id": 0, "tail": "A", "head": "B", "fftt_s": fftt, "cap_vps": cap, "satflow_vps": sat}],
        "demand": [{"origin": "A", "destination": "B", "count": n_users, "headway_s": headway}],
    }


def sbpr1_doc(rng: np.random.Generator, n_users: int, n_routes: int, shared_entry: bool | None = None):
    """Random single-origin network whose routes each cross exactly one bottleneck.

    Route ``k`` is ``entry -> branch k (capacitated) -> exit``.  With
    ``shared_entry`` all routes start on one uncapacitated link, so queues on
    one branch can spill back and block users bound for another.
    """
    if shared_entry is None:
        shared_entry = bool(rng.integers(2))
    nodes = ["O", "A", "D"]
    links = []
    if shared_entry:
        links.append({"id": 0, "tail": "O", "head": "A", "fftt_s": float(rng.uniform(0.5, 3))})
    for k in range(n_routes):
        x, y = f"X{k}", f"Y{k}"
        nodes += [x, y]
        q = float(rng.choice([1.5, 2.0, 3.0]))
        mu = float(rng.uniform(0.3, 1.0)) * q
        src = "A" if shared_entry else "O"
        links.append({"id": 10 + 3 * k, "tail": src, "head": x, "fftt_s": float(rng.uniform(0.5, 5))})
        links.append({"id": 11 + 3 * k, "tail": x, "head": y, "fftt_s": float(rng.uniform(1, 6)),
                      "cap_vps": mu, "satflow_vps": q})
        links.append({"id": 12 + 3 * k, "tail": y, "head": "D", "fftt_s": float(rng.uniform(0.5, 5))})
    if not shared_entry:
        nodes.remove("A")
    gaps = rng.uniform(0.2, 1.5, size=n_users)
    users = [{"origin": "O", "destination": "D", "departure_s": float(t)} for t in np.cumsum(gaps)]
    return {"nodes": nodes, "links": links, "users": users,
            "defaults": {"wback_mps": float(rng.choice([5.0, 10.0]))}}


def general_doc(rng: np.random.Generator, n_users: int, n_routes: int):
    """Random network with two origins, merges and shared bottlenecks.

    A chain ``0 -> 1 -> ... -> m`` plus random forward shortcuts; users
    start at node 0 or 1 and end at ``m``; each user keeps ``n_routes``
    routes (fewer if the graph has fewer).
    """
    m = 5
    edges = {(j, j + 1) for j in range(m)} | {(0, 2), (1, 3), (2, 4)}
    for a, b in itertools.combinations(range(m + 1), 2):
        if b > a + 1 and rng.random() < 0.5:
            edges.add((a, b))
    links = []
    for k, (a, b) in enumerate(sorted(edges)):
        d = {"id": k, "tail": a, "head": b, "fftt_s": float(rng.uniform(1, 4))}
        if rng.random() < 0.7:
            q = float(rng.choice([1.0, 2.0]))
            d.update(cap_vps=float(rng.uniform(0.2, 1.0)) * q, satflow_vps=q)
        links.append(d)
    doc = {"nodes": list(range(m + 1)), "links": links,
           "users": [{"origin": int(rng.integers(2)), "destination": m,
                      "departure_s": float(0.3 * k + rng.uniform(0, 0.2))} for k in range(n_users)],
           "defaults": {"wback_mps": 5.0}}
    sc = parse_scenario(doc)
    routes = []
    for o in (0, 1):
        rs = [rs for u, rs in zip(sc.users, sc.route_sets) if u.origin == o]
        if rs:
            ids = [list(sc.network.route_ids(r)) for r in rs[0].routes[:n_routes]]
            routes.append({"origin": o, "destination": m, "routes": ids})
    doc["routes"] = routes
    return doc


def brute_force(game: Game):
    """Every profile with its TC, and the set of Nash profiles by direct deviation scan."""
    choices = [game.choices(i) for i in range(game.n_users)]
    profiles = list(itertools.product(*choices))
    tc = {p: game.total_cost(p) for p in profiles}
    nash = set()
    for p in profiles:
        ok = True
        for i in range(game.n_users):
            cur = -game.travel_time(p, i) - (game.tolls.toll(i, p[i]) if game.mode == "fcp" else 0)
            for r in choices[i]:
                q = p[:i] + (r,) + p[i + 1:]
                if game.mode == "dso":
                    gain = tc[p] - tc[q]
                else:
                    gain = -game.travel_time(q, i) - game.tolls.toll(i, r) - cur
                if gain > 1e-9:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            nash.add(p)
    return tc, nash


def check_physics(sc, res, tol=1e-9):
    """FIFO, exit headways, Newell box and consistency on every link."""
    net = sc.network
    per_link: dict = {}
    for i, recs in enumerate(res.records):
        if not recs:
            continue
        # chain of links: each exit is the next entry; a queue may hold the user at its origin
        assert recs[0][1] >= sc.users[i].departure
        for a, b in zip(recs, recs[1:]):
            assert a[2] == b[1]
        assert recs[-1][2] == res.exit_time[i]
        fftt = sum(net.links[r[0]].fftt for r in recs)
        assert res.travel_time[i] >= fftt - tol
        for r in recs:
            per_link.setdefault(r[0], []).append((r[1], i, r[2], r[3]))
    for k, rows in per_link.items():
        lk = net.links[k]
        rows.sort()
        t_d = [r[2] for r in rows]
        assert all(b >= a for a, b in zip(t_d, t_d[1:])), "FIFO"
        assert all(b - a >= 1.0 / lk.capacity - tol for a, b in zip(t_d, t_d[1:])), "capacity"
        trajs = dict(link_trajectories(res, k))
        leader = None
        for t_a, i, t_dep, t_pa in rows:
            tr = trajs[i]
            if leader is not None and lk.capacitated:
                # entry never beats the trajectory-based earliest arrival, and the
                # loader's closed form agrees with it
                oracle = possible_arrival(leader, lk)
                assert t_a >= oracle - tol
                assert t_pa == pytest.approx(oracle, abs=1e-7)
                p = derived_link_params(lk)
                for t, x in zip(tr.times, tr.positions):
                    assert x <= leader.position(t - p.reaction_time) - p.jam_spacing + 1e-7
            assert t_dep >= tr.end - tol, "departs before reaching the link end"
            for t, x in zip(tr.times, tr.positions):
                assert x <= lk.vff * (t - t_a) + 1e-7
            leader = tr


@pytest.fixture
def bottleneck2():
    return parse_scenario(single_link_doc())


def close(a, b, tol=1e-12):
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)
