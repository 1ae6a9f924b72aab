"""Independent reference implementations used to cross-check the engine.

These deliberately avoid the event loop: per-node FIFO service with c
parallel servers is computed by the classic earliest-free-server
recursion over items in arrival order.  Route choice must be forced
(exactly one route per client/node pair) so no random draw is involved.
"""

from __future__ import annotations

import heapq

from hybridsim.datamodel import Catalog, Placement, query_footprint
from hybridsim.topology import Topology, transfer_time


def replay_latencies(
    topology: Topology,
    catalog: Catalog,
    placement: Placement,
    workload,
) -> dict[int, float]:
    """instance_id -> latency, by direct FIFO replay.

    Requires every (client_class, target_node) pair in the workload to
    have exactly one route, so the result is independent of route RNG.
    """
    ordered = sorted(workload, key=lambda q: (q.arrival_s, q.instance_id))
    per_node: dict[str, list] = {}
    footprints = {}
    for q in ordered:
        fp = query_footprint(catalog.templates_by_id[q.template_id], placement)
        footprints[q.instance_id] = fp
        for node_id in fp:
            per_node.setdefault(node_id, []).append(q)

    done: dict[int, dict[str, float]] = {q.instance_id: {} for q in ordered}
    for node_id, queries in per_node.items():
        node = topology.nodes_by_id[node_id]
        free = [0.0] * node.vm_count
        heapq.heapify(free)
        for q in queries:
            cpu_share, bytes_out = footprints[q.instance_id][node_id]
            earliest = heapq.heappop(free)
            start = max(q.arrival_s, earliest)
            end = start + cpu_share / node.service_rate
            heapq.heappush(free, end)
            routes = topology.routes_for(q.client_class, node_id)
            assert len(routes) == 1, "oracle needs a forced route"
            net = transfer_time(bytes_out, routes[0], topology)
            done[q.instance_id][node_id] = end + net

    return {
        q.instance_id: max(done[q.instance_id].values()) - q.arrival_s
        for q in ordered
    }


def check_server_causality(topology, catalog, placement, trace) -> None:
    """Assert no node ever runs more items than it has servers.

    Only valid for runs without capacity changes.  Busy intervals are
    rebuilt from per-node service starts and footprint-derived service
    durations, then swept for maximum overlap.
    """
    by_node: dict[str, list[tuple[float, int]]] = {}
    for r in trace.records:
        template = catalog.templates_by_id[r.template_id]
        fp = query_footprint(template, placement)
        for node_id, start in r.start_service_by_node.items():
            cpu_share, _ = fp[node_id]
            svc = cpu_share / topology.nodes_by_id[node_id].service_rate
            by_node.setdefault(node_id, []).append((start, +1))
            by_node.setdefault(node_id, []).append((start + svc, -1))
    for node_id, events in by_node.items():
        limit = topology.nodes_by_id[node_id].vm_count
        # departures before arrivals at equal times
        events.sort(key=lambda e: (e[0], e[1]))
        level = 0
        for _, delta in events:
            level += delta
            assert level <= limit, f"node {node_id} exceeded {limit} busy servers"
