"""Road network, user population and route sets.

Scenario documents are JSON with ``nodes``, ``links``, ``users`` (or a
``demand`` generator) and optional explicit ``routes``.  Everything built
here is immutable once constructed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Hashable, Sequence

DEFAULT_VFF = 20.0
DEFAULT_WBACK = 5.0
DEFAULT_ROUTE_CAP = 10_000
# Uncapacitated links carry an infinite saturation flow and capacity so that
# they never delay anyone (zero reaction time, zero jam spacing).
DEFAULT_UNCAPACITATED = math.inf

NULL_ROUTE = -1


class ScenarioError(ValueError):
    """Raised for malformed or physically invalid scenario input."""


class RouteCapExceeded(ScenarioError):
    pass


@dataclass(frozen=True)
class Link:
    """A directed link with a bottleneck at its downstream end.

    Attributes
    ----------
    length : float
        Link length in metres.
    vff, wback : float
        Free-flow and backward-wave speeds (m/s).
    satflow : float
        Saturation flow rate (veh/s).
    capacity : float
        Bottleneck (exit) capacity (veh/s), never above ``satflow``.
    """

    id: Hashable
    tail: Hashable
    head: Hashable
    length: float
    vff: float
    wback: float
    satflow: float
    capacity: float
    capacitated: bool = True

    def __post_init__(self):
        for name in ("length", "vff", "wback", "satflow", "capacity"):
            val = getattr(self, name)
            if not val > 0:
                raise ScenarioError(f"link {self.id!r}: {name} must be positive, got {val!r}")
        if self.capacity > self.satflow:
            raise ScenarioError(
                f"link {self.id!r}: capacity {self.capacity} exceeds saturation flow {self.satflow}")
        if math.isinf(self.length) or math.isinf(self.vff) or math.isinf(self.wback):
            raise ScenarioError(f"link {self.id!r}: length and speeds must be finite")

    @property
    def fftt(self) -> float:
        return self.length / self.vff


@dataclass(frozen=True)
class DerivedLinkParams:
    jam_density: float
    reaction_time: float
    jam_spacing: float
    fftt: float
    min_headway: float


def derived_link_params(link: Link) -> DerivedLinkParams:
    """Newell-box parameters of a link.

    ``jam_density = (v + w) q / (v w)``, ``reaction_time = 1 / (w kappa)`` and
    ``jam_spacing = 1 / kappa``.  For an uncapacitated link (infinite ``q``)
    the box collapses to zero and the minimum exit headway is zero.
    """
    v, w, q = link.vff, link.wback, link.satflow
    kappa = (v + w) * q / (v * w)
    return DerivedLinkParams(
        jam_density=kappa,
        reaction_time=1.0 / (w * kappa),
        jam_spacing=1.0 / kappa,
        fftt=link.length / v,
        min_headway=1.0 / link.capacity,
    )


@dataclass(frozen=True)
class UserSpec:
    id: int
    origin: Hashable
    destination: Hashable
    departure: float


def node_kind(n_in: int, n_out: int) -> str:
    if n_in > 1 and n_out > 1:
        return "intersection"
    if n_in > 1:
        return "merge"
    if n_out > 1:
        return "diverge"
    return "normal"


class Network:
    """Directed graph of nodes and links with adjacency indices.

    Links are addressed by their position in ``links``; nodes by their
    position in ``nodes``.
    """

    def __init__(self, nodes: Sequence[Hashable], links: Sequence[Link]):
        self.nodes: tuple = tuple(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise ScenarioError("duplicate node ids")
        self.node_index = {n: k for k, n in enumerate(self.nodes)}
        self.links: tuple[Link, ...] = tuple(links)
        self.link_index: dict = {}
        for k, link in enumerate(self.links):
            if link.id in self.link_index:
                raise ScenarioError(f"duplicate link id {link.id!r}")
            for end in (link.tail, link.head):
                if end not in self.node_index:
                    raise ScenarioError(f"link {link.id!r} references unknown node {end!r}")
            if link.tail == link.head:
                raise ScenarioError(f"link {link.id!r} is a self-loop")
            self.link_index[link.id] = k
        self.out_links: list[list[int]] = [[] for _ in self.nodes]
        self.in_links: list[list[int]] = [[] for _ in self.nodes]
        for k, link in enumerate(self.links):
            self.out_links[self.node_index[link.tail]].append(k)
            self.in_links[self.node_index[link.head]].append(k)
        self.params: tuple[DerivedLinkParams, ...] = tuple(derived_link_params(l) for l in self.links)
        for link, p in zip(self.links, self.params):
            if link.capacitated and not link.length > p.jam_spacing:
                raise ScenarioError(
                    f"link {link.id!r}: length {link.length} m not above jam spacing {p.jam_spacing} m")

    def __repr__(self):
        return f"Network({len(self.nodes)} nodes, {len(self.links)} links)"

    def kind(self, node: Hashable) -> str:
        k = self.node_index[node]
        return node_kind(len(self.in_links[k]), len(self.out_links[k]))

    def route_fftt(self, route: Sequence[int]) -> float:
        return sum(self.params[k].fftt for k in route)

    def route_ids(self, route: Sequence[int]) -> tuple:
        return tuple(self.links[k].id for k in route)

    def route_from_ids(self, ids: Sequence[Hashable]) -> tuple[int, ...]:
        try:
            route = tuple(self.link_index[i] for i in ids)
        except KeyError as exc:
            raise ScenarioError(f"route references unknown link {exc.args[0]!r}") from None
        return route

    def check_route(self, route: Sequence[int], origin, destination) -> None:
        if not route:
            raise ScenarioError("empty route")
        if self.links[route[0]].tail != origin or self.links[route[-1]].head != destination:
            raise ScenarioError(f"route {self.route_ids(route)} does not join {origin!r} to {destination!r}")
        seen = {origin}
        for a, b in zip(route, route[1:]):
            if self.links[a].head != self.links[b].tail:
                raise ScenarioError(f"route {self.route_ids(route)} is not connected")
        for k in route:
            h = self.links[k].head
            if h in seen:
                raise ScenarioError(f"route {self.route_ids(route)} is not acyclic")
            seen.add(h)


def _id_key(link_id):
    if isinstance(link_id, (int, float)):
        return (0, link_id, "")
    return (1, 0, str(link_id))


def enumerate_routes(network: Network, origin, destination, cap: int = DEFAULT_ROUTE_CAP) -> list[tuple[int, ...]]:
    """All acyclic routes from ``origin`` to ``destination``.

    Routes are tuples of link indices, sorted lexicographically by link id.
    An unreachable destination yields an empty list.
    """
    if origin == destination:
        raise ScenarioError("origin and destination coincide")
    o = network.node_index[origin]
    t = network.node_index[destination]
    found: list[tuple[int, ...]] = []
    path: list[int] = []
    on_path = {o}

    def dfs(node):
        for k in network.out_links[node]:
            nxt = network.node_index[network.links[k].head]
            if nxt in on_path:
                continue
            path.append(k)
            if nxt == t:
                found.append(tuple(path))
                if len(found) > cap:
                    raise RouteCapExceeded(
                        f"more than {cap} routes from {origin!r} to {destination!r}")
            else:
                on_path.add(nxt)
                dfs(nxt)
                on_path.discard(nxt)
            path.pop()

    dfs(o)
    found.sort(key=lambda r: [_id_key(network.links[k].id) for k in r])
    return found


@dataclass(frozen=True)
class RouteSet:
    """Acyclic routes available to one OD pair.

    ``routes`` is the choice set handed to the dynamics.  The null route is
    always available for counterfactual loading; ``include_null`` puts it in
    the choice set as well, priced at ``null_cost`` seconds.
    """

    origin: Hashable
    destination: Hashable
    routes: tuple[tuple[int, ...], ...]
    include_null: bool = False
    null_cost: float = 0.0

    @property
    def choices(self) -> tuple[int, ...]:
        idx = tuple(range(len(self.routes)))
        return idx + (NULL_ROUTE,) if self.include_null else idx

    def __len__(self):
        return len(self.choices)


@dataclass(frozen=True)
class Scenario:
    name: str
    network: Network
    users: tuple[UserSpec, ...]
    route_sets: tuple[RouteSet, ...]  # one per user, shared between users of an OD pair
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.users)


def _num(d: dict, key: str, default=None, where=""):
    val = d.get(key, default)
    if val is None:
        return None
    try:
        return float(val)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: {key} must be a number, got {val!r}") from None


def _build_link(d: dict, defaults: dict) -> Link:
    where = f"link {d.get('id')!r}"
    for key in ("id", "tail", "head"):
        if key not in d:
            raise ScenarioError(f"{where}: missing {key!r}")
    uncap = defaults.get("uncapacitated_vps")
    uncap = DEFAULT_UNCAPACITATED if uncap is None else float(uncap)
    vff = _num(d, "vff_mps", defaults.get("vff_mps", DEFAULT_VFF), where)
    wback = _num(d, "wback_mps", defaults.get("wback_mps", DEFAULT_WBACK), where)
    length = _num(d, "length_m", None, where)
    fftt = _num(d, "fftt_s", None, where)
    if length is None:
        if fftt is None:
            raise ScenarioError(f"{where}: needs length_m or fftt_s")
        if not fftt > 0:
            raise ScenarioError(f"{where}: fftt_s must be positive, got {fftt}")
        length = vff * fftt
    cap = _num(d, "cap_vps", None, where)
    sat = _num(d, "satflow_vps", None, where)
    capacitated = cap is not None
    if not capacitated:
        cap = sat = uncap
    elif sat is None:
        sat = cap
    return Link(id=d["id"], tail=d["tail"], head=d["head"], length=length, vff=vff, wback=wback,
                satflow=sat, capacity=cap, capacitated=capacitated)


def _build_users(doc: dict) -> list[UserSpec]:
    raw: list[tuple] = []
    for u in doc.get("users", []):
        try:
            raw.append((u["origin"], u["destination"], float(u["departure_s"]), u.get("id")))
        except KeyError as exc:
            raise ScenarioError(f"user entry missing {exc.args[0]!r}") from None
    for g in doc.get("demand", []):
        try:
            count = int(g["count"])
            headway = float(g["headway_s"])
        except KeyError as exc:
            raise ScenarioError(f"demand entry missing {exc.args[0]!r}") from None
        start = float(g.get("start_s", 0.0))
        if count < 0 or not headway > 0:
            raise ScenarioError("demand count must be >= 0 and headway positive")
        raw.extend((g["origin"], g["destination"], start + k * headway, None) for k in range(count))
    # stable order: by departure time, then origin
    raw.sort(key=lambda r: (r[2], str(r[0])))
    return [UserSpec(id=k, origin=o, destination=d, departure=s) for k, (o, d, s, _) in enumerate(raw)]


def _check_departures(users: Sequence[UserSpec]) -> None:
    seen: dict = {}
    for u in users:
        key = (u.origin, u.departure)
        if key in seen:
            raise ScenarioError(
                f"users {seen[key]} and {u.id} share origin {u.origin!r} and departure time {u.departure}")
        seen[key] = u.id


def build_scenario(network: Network, users: Sequence[UserSpec], routes: dict | None = None, *,
                   name: str = "scenario", include_null: bool = False, null_cost: float = 0.0,
                   route_cap: int = DEFAULT_ROUTE_CAP, meta: dict | None = None) -> Scenario:
    """Attach route sets to a user population.

    ``routes`` maps ``(origin, destination)`` to lists of link-index tuples;
    OD pairs not listed are auto-enumerated.
    """
    users = tuple(users)
    _check_departures(users)
    routes = dict(routes or {})
    sets: dict = {}
    for u in users:
        od = (u.origin, u.destination)
        if od in sets:
            continue
        if u.origin not in network.node_index or u.destination not in network.node_index:
            raise ScenarioError(f"user {u.id}: unknown origin or destination {od!r}")
        if od in routes:
            rs = [tuple(r) for r in routes[od]]
            for r in rs:
                network.check_route(r, *od)
        else:
            rs = enumerate_routes(network, *od, cap=route_cap)
        if not rs:
            raise ScenarioError(f"no route from {od[0]!r} to {od[1]!r}")
        sets[od] = RouteSet(od[0], od[1], tuple(rs), include_null, float(null_cost))
    return Scenario(name=name, network=network, users=users,
                    route_sets=tuple(sets[(u.origin, u.destination)] for u in users),
                    meta=dict(meta or {}))


def parse_scenario(doc: str | dict) -> Scenario:
    """Validate a scenario document (JSON text or an already-decoded dict)."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    defaults = doc.get("defaults", {})
    nodes = [n["id"] if isinstance(n, dict) else n for n in doc.get("nodes", [])]
    links = [_build_link(d, defaults) for d in doc.get("links", [])]
    network = Network(nodes, links)
    users = _build_users(doc)
    explicit: dict = {}
    for entry in doc.get("routes", []):
        od = (entry["origin"], entry["destination"])
        explicit[od] = [network.route_from_ids(r) for r in entry["routes"]]
    opts = doc.get("options", {})
    return build_scenario(
        network, users, explicit, name=doc.get("name", "scenario"),
        include_null=bool(opts.get("include_null_route", False)),
        null_cost=float(opts.get("null_route_cost_s", 0.0)),
        route_cap=int(opts.get("route_cap", DEFAULT_ROUTE_CAP)),
        meta={k: v for k, v in doc.items() if k.startswith("_") or k == "description"},
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        bundled = resources.files("atomicdso") / "data" / path.name
        if path.parent == Path(".") and bundled.is_file():
            return parse_scenario(bundled.read_text())
        raise ScenarioError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text())


def bundled_scenario(name: str) -> dict[str, Any]:
    """Raw document of a bundled scenario (``simple_two_route`` or ``nguyen_dupuis``)."""
    if not name.endswith(".json"):
        name += ".json"
    return json.loads((resources.files("atomicdso") / "data" / name).read_text())


def scale_document(doc: dict, factor: float) -> dict:
    """Copy of a scenario document with every demand generator's count scaled."""
    if not factor > 0:
        raise ScenarioError("scale factor must be positive")
    out = json.loads(json.dumps(doc))
    for g in out.get("demand", []):
        g["count"] = max(1, int(round(g["count"] * factor)))
    return out
