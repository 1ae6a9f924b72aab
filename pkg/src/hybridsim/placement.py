"""Placement evaluation and restructuring.

The optimizer prices a placement with a contention-free analytic model: a
template costs its worst per-node service share plus its worst per-node
expected transfer, with transfers averaged over the routes reaching each
node.  Queueing is deliberately ignored; the simulator is the judge of
whether a cheaper analytic placement actually runs faster.

All tie-breaking is lexicographic by (fragment_id, node_id) so results
are reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

from .datamodel import Catalog, Placement, QueryTemplate, query_footprint, validate_placement
from .engine import Trace, rank_demanding_templates
from .errors import EnumerationTooLargeError, NoRouteError, PlacementError
from .topology import Topology

BRUTE_FORCE_GUARD = 1_000_000


@dataclass(frozen=True)
class PlacementCost:
    """Analytic cost of one placement."""

    expected_latency_s: float
    per_template: Mapping[str, float]


def _node_transfer_params(topology: Topology) -> dict[str, tuple[float, float]]:
    """node_id -> (mean route latency, mean seconds-per-byte), route-weighted."""
    params: dict[str, tuple[float, float]] = {}
    for node in topology.nodes:
        routes = topology.routes_to(node.node_id)
        if not routes:
            continue
        wsum = sum(r.weight for r in routes)
        lat = 0.0
        inv_bw = 0.0
        for r in routes:
            latency_sum, bottleneck = topology.route_aggregate(r)
            lat += r.weight * latency_sum
            inv_bw += r.weight / bottleneck
        params[node.node_id] = (lat / wsum, inv_bw / wsum)
    return params


def _template_cost(
    template: QueryTemplate,
    placement: Placement,
    topology: Topology,
    params: Mapping[str, tuple[float, float]],
) -> float:
    footprint = query_footprint(template, placement)
    service = 0.0
    transfer = 0.0
    for node_id, (cpu_share, bytes_out) in footprint.items():
        node = topology.nodes_by_id[node_id]
        service = max(service, cpu_share / (node.vm_count * node.service_rate))
        if node_id not in params:
            raise NoRouteError(
                f"node {node_id} hosts fragments but has no routes to price transfers"
            )
        lat, inv_bw = params[node_id]
        transfer = max(transfer, lat + bytes_out * inv_bw)
    return service + transfer


def _weights(catalog: Catalog, override: Mapping[str, float] | None) -> dict[str, float]:
    if override is None:
        return {t.template_id: t.frequency_weight for t in catalog.templates}
    weights = {t.template_id: float(override.get(t.template_id, 0.0)) for t in catalog.templates}
    if sum(weights.values()) <= 0:
        raise PlacementError("frequency weights must have positive total")
    return weights


def evaluate_placement(
    placement: Placement,
    catalog: Catalog,
    topology: Topology,
    weights: Mapping[str, float] | None = None,
) -> PlacementCost:
    """Price a placement: frequency-weighted mean analytic template latency.

    Args:
        weights: optional unnormalized template weights overriding the
            catalog's frequency_weight values (e.g. observed trace counts).

    Raises:
        PlacementError: if the placement is invalid.
        NoRouteError: if a hosting node cannot be reached by any route.
    """
    violations = validate_placement(placement, catalog, topology)
    if violations:
        raise PlacementError(violations[0])
    params = _node_transfer_params(topology)
    w = _weights(catalog, weights)
    total = sum(w.values())
    per_template: dict[str, float] = {}
    expected = 0.0
    for template in catalog.templates:
        cost = _template_cost(template, placement, topology, params)
        per_template[template.template_id] = cost
        expected += (w[template.template_id] / total) * cost
    return PlacementCost(expected, per_template)


def _expected_cost(
    placement: Placement,
    catalog: Catalog,
    topology: Topology,
    params: Mapping[str, tuple[float, float]],
    norm_weights: Mapping[str, float],
) -> float:
    return sum(
        norm_weights[t.template_id] * _template_cost(t, placement, topology, params)
        for t in catalog.templates
    )


def _allowed_nodes(fragment, topology: Topology, params) -> list[str]:
    """Candidate hosts: pin-compatible tiers that have at least one route."""
    return sorted(
        n.node_id
        for n in topology.nodes
        if n.node_id in params
        and (fragment.pinned_tier is None or n.tier == fragment.pinned_tier)
    )


def greedy_improve(
    placement: Placement,
    catalog: Catalog,
    topology: Topology,
    max_moves: int,
    weights: Mapping[str, float] | None = None,
) -> Placement:
    """Iteratively apply the best single-fragment move.

    Stops at a local optimum (no strictly improving move) or after
    max_moves.  The returned cost never exceeds the input cost.
    """
    if max_moves < 1:
        raise PlacementError("max_moves must be >= 1")
    violations = validate_placement(placement, catalog, topology)
    if violations:
        raise PlacementError(violations[0])
    params = _node_transfer_params(topology)
    w = _weights(catalog, weights)
    total = sum(w.values())
    norm = {tid: wt / total for tid, wt in w.items()}

    current = placement
    current_cost = _expected_cost(current, catalog, topology, params, norm)
    for _ in range(max_moves):
        best: tuple[float, str, str] | None = None
        for fragment in sorted(catalog.fragments, key=lambda f: f.fragment_id):
            fid = fragment.fragment_id
            here = current.node_of(fid)
            for node_id in _allowed_nodes(fragment, topology, params):
                if node_id == here:
                    continue
                cost = _expected_cost(
                    current.move(fid, node_id), catalog, topology, params, norm
                )
                key = (cost, fid, node_id)
                if best is None or key < best:
                    best = key
        if best is None or best[0] >= current_cost:
            break
        current_cost, fid, node_id = best
        current = current.move(fid, node_id)
    return current


def brute_force_optimal(
    catalog: Catalog,
    topology: Topology,
    weights: Mapping[str, float] | None = None,
) -> tuple[Placement, PlacementCost]:
    """Exhaustively search all pin-respecting placements.

    Ties break toward the lexicographically first assignment (fragments
    sorted, candidate nodes sorted).

    Raises:
        EnumerationTooLargeError: if the assignment count exceeds the guard.
    """
    params = _node_transfer_params(topology)
    fragments = sorted(catalog.fragments, key=lambda f: f.fragment_id)
    candidates = [_allowed_nodes(f, topology, params) for f in fragments]
    if any(not c for c in candidates):
        raise PlacementError("a fragment has no pin-compatible reachable node")
    size = 1
    for c in candidates:
        size *= len(c)
        if size > BRUTE_FORCE_GUARD:
            raise EnumerationTooLargeError(
                f"placement enumeration exceeds {BRUTE_FORCE_GUARD} assignments"
            )
    w = _weights(catalog, weights)
    total = sum(w.values())
    norm = {tid: wt / total for tid, wt in w.items()}

    best_placement: Placement | None = None
    best_cost = float("inf")
    frag_ids = [f.fragment_id for f in fragments]
    for combo in itertools.product(*candidates):
        pl = Placement(dict(zip(frag_ids, combo)))
        cost = _expected_cost(pl, catalog, topology, params, norm)
        if cost < best_cost:
            best_cost = cost
            best_placement = pl
    assert best_placement is not None
    return best_placement, evaluate_placement(best_placement, catalog, topology, weights)


def offload_demanding_to_public(
    placement: Placement,
    trace: Trace,
    catalog: Catalog,
    topology: Topology,
    k: int,
) -> Placement:
    """Move the busiest templates' unpinned fragments to the public tier.

    Templates rank by total latency contribution in the trace; each of
    their unpinned fragments goes to the public node giving the lowest
    analytic cost.  A fragment touched by two ranked templates moves once.

    Raises:
        PlacementError: if no public-tier node is reachable.
    """
    if k < 1:
        raise PlacementError("k must be >= 1")
    if not trace.records:
        raise PlacementError("offload needs a nonempty trace")
    params = _node_transfer_params(topology)
    public_nodes = sorted(
        n.node_id for n in topology.nodes if n.tier == "public" and n.node_id in params
    )
    if not public_nodes:
        raise PlacementError("no public-tier node available")
    w = _weights(catalog, None)
    total = sum(w.values())
    norm = {tid: wt / total for tid, wt in w.items()}

    current = placement
    moved: set[str] = set()
    for template_id in rank_demanding_templates(trace, k):
        template = catalog.templates_by_id[template_id]
        for fid in sorted(template.fragments_read):
            fragment = catalog.fragments_by_id[fid]
            if fragment.pinned_tier is not None or fid in moved:
                continue
            moved.add(fid)
            best_node = min(
                public_nodes,
                key=lambda nid: (
                    _expected_cost(current.move(fid, nid), catalog, topology, params, norm),
                    nid,
                ),
            )
            current = current.move(fid, best_node)
    return current
