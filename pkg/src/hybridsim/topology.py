"""Hybrid-cloud infrastructure model: nodes, links, and client routes.

Nodes form two tiers, a private one (owned servers) and a public one
(rented capacity).  Clients reach nodes over alternative routes made of
network links with fixed latency and bandwidth; per-query variation in
delay comes from weighted random route selection, not from noisy links.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Any, Mapping

import numpy as np

from .errors import NoRouteError, TopologyError
from .jsonio import ensure_mapping

TIERS = ("private", "public")


@dataclass(frozen=True)
class NodeSpec:
    """One compute node: a pool of vm_count identical servers.

    service_rate is CPU work units per second per server.  vm_min/vm_max
    bound the capacity range a controller may move vm_count within; a node
    with vm_min == vm_max is not scalable.
    """

    node_id: str
    tier: str
    vm_count: int
    service_rate: float
    vm_min: int = 1
    vm_max: int | None = None

    def __post_init__(self) -> None:
        if self.vm_max is None:
            object.__setattr__(self, "vm_max", self.vm_count)


@dataclass(frozen=True)
class LinkSpec:
    """A network link with fixed one-way latency and bandwidth."""

    link_id: str
    latency_s: float
    bandwidth_Bps: float


@dataclass(frozen=True)
class Route:
    """An ordered path of links from a client class to a target node."""

    route_id: str
    client_class: str
    target_node: str
    links: tuple[str, ...]
    weight: float = 1.0


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]
    routes: tuple[Route, ...]

    @cached_property
    def nodes_by_id(self) -> dict[str, NodeSpec]:
        return {n.node_id: n for n in self.nodes}

    @cached_property
    def links_by_id(self) -> dict[str, LinkSpec]:
        return {l.link_id: l for l in self.links}

    @cached_property
    def client_classes(self) -> tuple[str, ...]:
        """All client classes that appear in routes, sorted."""
        return tuple(sorted({r.client_class for r in self.routes}))

    @cached_property
    def _route_table(self) -> dict[tuple[str, str], tuple[tuple[Route, ...], np.ndarray]]:
        # (client_class, target_node) -> (routes sorted by id, cumulative weights)
        grouped: dict[tuple[str, str], list[Route]] = {}
        for r in self.routes:
            grouped.setdefault((r.client_class, r.target_node), []).append(r)
        table: dict[tuple[str, str], tuple[tuple[Route, ...], np.ndarray]] = {}
        for key, rs in grouped.items():
            rs.sort(key=lambda r: r.route_id)
            cum = np.cumsum([r.weight for r in rs])
            table[key] = (tuple(rs), cum)
        return table

    @cached_property
    def _routes_to_node(self) -> dict[str, tuple[Route, ...]]:
        grouped: dict[str, list[Route]] = {}
        for r in self.routes:
            grouped.setdefault(r.target_node, []).append(r)
        return {k: tuple(sorted(v, key=lambda r: r.route_id)) for k, v in grouped.items()}

    @cached_property
    def _route_aggregates(self) -> dict[str, tuple[float, float]]:
        # route_id -> (latency sum over links, bottleneck bandwidth)
        out: dict[str, tuple[float, float]] = {}
        for r in self.routes:
            lats = [self.links_by_id[lid].latency_s for lid in r.links]
            bws = [self.links_by_id[lid].bandwidth_Bps for lid in r.links]
            out[r.route_id] = (float(sum(lats)), float(min(bws)))
        return out

    def routes_for(self, client_class: str, target_node: str) -> tuple[Route, ...]:
        entry = self._route_table.get((client_class, target_node))
        return entry[0] if entry is not None else ()

    def routes_to(self, node_id: str) -> tuple[Route, ...]:
        """All routes whose target is node_id, any client class, sorted by id."""
        return self._routes_to_node.get(node_id, ())

    def route_aggregate(self, route: Route) -> tuple[float, float]:
        """(total latency, bottleneck bandwidth) of a route's link path."""
        agg = self._route_aggregates.get(route.route_id)
        if agg is None:
            lats = [self.links_by_id[lid].latency_s for lid in route.links]
            bws = [self.links_by_id[lid].bandwidth_Bps for lid in route.links]
            agg = (float(sum(lats)), float(min(bws)))
        return agg

    def uncovered_pairs(
        self, client_classes: tuple[str, ...], node_ids: tuple[str, ...]
    ) -> list[tuple[str, str]]:
        """(client_class, node) pairs with no route, sorted; empty means covered."""
        missing = [
            (c, n)
            for c in client_classes
            for n in node_ids
            if (c, n) not in self._route_table
        ]
        missing.sort()
        return missing


def transfer_time(nbytes: int, route: Route, topology: Topology) -> float:
    """Seconds to ship nbytes over a route.

    The path behaves like a switched end-to-end channel: latencies add up
    and the slowest link's bandwidth governs throughput.  Zero bytes cost
    exactly the latency sum.
    """
    if nbytes < 0:
        raise ValueError("nbytes must be nonnegative")
    latency_sum, bottleneck = topology.route_aggregate(route)
    return latency_sum + nbytes / bottleneck


def sample_route(
    topology: Topology,
    client_class: str,
    target_node: str,
    rng: np.random.Generator,
) -> Route:
    """Pick one route for (client_class, target_node), probability ~ weight.

    A single matching route is returned without consuming a random draw.

    Raises:
        NoRouteError: if the pair has no routes at all.
    """
    entry = topology._route_table.get((client_class, target_node))
    if entry is None:
        raise NoRouteError(
            f"no route for client class {client_class!r} to node {target_node!r}"
        )
    routes, cum = entry
    if len(routes) == 1:
        return routes[0]
    u = rng.random() * cum[-1]
    i = int(np.searchsorted(cum, u, side="right"))
    if i >= len(routes):
        i = len(routes) - 1
    return routes[i]


def _require(obj: Mapping[str, Any], key: str, what: str) -> Any:
    if key not in obj:
        raise TopologyError(f"{what}: missing required field {key!r}")
    return obj[key]


def _check_number(value: Any, what: str, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TopologyError(f"{what}: {name} must be a number")
    return float(value)


def _check_int(value: Any, what: str, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TopologyError(f"{what}: {name} must be an integer")
    return value


def load_topology(doc: Any) -> Topology:
    """Parse and validate a topology document.

    Args:
        doc: a mapping with top-level keys ``nodes``, ``links`` and
            ``routes``, or a JSON string/bytes encoding one.

    Returns:
        A validated, immutable Topology.

    Raises:
        TopologyError: naming the first violated invariant.
    """
    data = ensure_mapping(doc, "topology", TopologyError)
    for key in ("nodes", "links", "routes"):
        if key not in data or not isinstance(data[key], list):
            raise TopologyError(f"topology: missing or non-list key {key!r}")

    nodes: list[NodeSpec] = []
    seen_nodes: set[str] = set()
    for raw in data["nodes"]:
        raw = ensure_mapping(raw, "node", TopologyError)
        nid = str(_require(raw, "node_id", "node"))
        what = f"node {nid}"
        if nid in seen_nodes:
            raise TopologyError(f"duplicate node_id: {nid}")
        seen_nodes.add(nid)
        tier = _require(raw, "tier", what)
        if tier not in TIERS:
            raise TopologyError(f"{what}: tier must be one of {TIERS}")
        vm_count = _check_int(_require(raw, "vm_count", what), what, "vm_count")
        if vm_count < 1:
            raise TopologyError(f"{what}: vm_count must be a positive integer")
        service_rate = _check_number(
            _require(raw, "service_rate", what), what, "service_rate"
        )
        if service_rate <= 0:
            raise TopologyError(f"{what}: service_rate must be positive")
        vm_min = _check_int(raw.get("vm_min", 1), what, "vm_min")
        vm_max = _check_int(raw.get("vm_max", vm_count), what, "vm_max")
        if vm_min < 1:
            raise TopologyError(f"{what}: vm_min must be >= 1")
        if not (vm_min <= vm_count <= vm_max):
            raise TopologyError(f"{what}: vm_count must lie within [vm_min, vm_max]")
        nodes.append(NodeSpec(nid, tier, vm_count, service_rate, vm_min, vm_max))

    links: list[LinkSpec] = []
    seen_links: set[str] = set()
    for raw in data["links"]:
        raw = ensure_mapping(raw, "link", TopologyError)
        lid = str(_require(raw, "link_id", "link"))
        what = f"link {lid}"
        if lid in seen_links:
            raise TopologyError(f"duplicate link_id: {lid}")
        seen_links.add(lid)
        latency = _check_number(_require(raw, "latency_s", what), what, "latency_s")
        if latency < 0:
            raise TopologyError(f"{what}: latency_s must be nonnegative")
        bandwidth = _check_number(
            _require(raw, "bandwidth_Bps", what), what, "bandwidth_Bps"
        )
        if bandwidth <= 0:
            raise TopologyError(f"{what}: bandwidth must be positive")
        links.append(LinkSpec(lid, latency, bandwidth))

    routes: list[Route] = []
    seen_routes: set[str] = set()
    for raw in data["routes"]:
        raw = ensure_mapping(raw, "route", TopologyError)
        rid = str(_require(raw, "route_id", "route"))
        what = f"route {rid}"
        if rid in seen_routes:
            raise TopologyError(f"duplicate route_id: {rid}")
        seen_routes.add(rid)
        client_class = str(_require(raw, "client_class", what))
        target = str(_require(raw, "target_node", what))
        if target not in seen_nodes:
            raise TopologyError(f"{what}: targets unknown node {target!r}")
        raw_links = _require(raw, "links", what)
        if not isinstance(raw_links, list) or not raw_links:
            raise TopologyError(f"{what}: links must be a nonempty list")
        for lid in raw_links:
            if lid not in seen_links:
                raise TopologyError(f"{what}: references unknown link {lid!r}")
        weight = _check_number(raw.get("weight", 1.0), what, "weight")
        if weight <= 0:
            raise TopologyError(f"{what}: weight must be positive")
        routes.append(
            Route(rid, client_class, target, tuple(str(l) for l in raw_links), weight)
        )

    tiers_present = {n.tier for n in nodes}
    if "private" not in tiers_present or "public" not in tiers_present:
        raise TopologyError(
            "topology must contain at least one private and one public node"
        )

    return Topology(tuple(nodes), tuple(links), tuple(routes))
