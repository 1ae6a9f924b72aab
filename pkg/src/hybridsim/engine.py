"""Discrete-event simulation core.

A query arriving at time t is split into per-node work items by
query_footprint.  Each item waits FIFO for a free server at its node, is
served for cpu_share / service_rate seconds, then ships its result bytes
to the client over a route sampled for that item.  The query completes
when its last item lands.  Everything runs on a single deterministic event
loop; equal-time events are ordered by (time, kind priority, instance id,
push sequence).

Capacity changes, either from a static schedule or from a controller
sampling the run, take effect at their instant for all later starts but
never preempt items already in service.
"""

from __future__ import annotations

import bisect
import heapq
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping, Protocol, Sequence

from . import rng as hrng
from .datamodel import Catalog, Placement, query_footprint, validate_placement
from .errors import CapacityError, InternalInvariantError, PlacementError, WorkloadError
from .jsonio import sha256_of
from .rng import RNG_ALGORITHM
from .topology import Topology, sample_route, transfer_time
from .workload import QueryInstance

TRACE_CSV_HEADER = (
    "instance_id,template_id,arrival_s,completion_s,latency_s,"
    "queue_wait_s,service_s,network_s"
)

# event kind priorities at equal simulated time
_CONTROL = 0
_CAPACITY = 1
_SERVICE_END = 2
_ITEM_DONE = 3
_ARRIVAL = 4


@dataclass(frozen=True)
class QueryRecord:
    """Timing of one executed query."""

    instance_id: int
    template_id: str
    arrival_s: float
    completion_s: float
    latency_s: float
    queue_wait_s: float
    service_s: float
    network_s: float
    start_service_by_node: Mapping[str, float]
    route_ids: tuple[str, ...]


@dataclass(frozen=True)
class Trace:
    records: tuple[QueryRecord, ...]
    manifest: Mapping[str, Any]


class ControlHook(Protocol):
    """Sampled-time controller attached to a run.

    on_sample is called every sample_interval_s of simulated time with the
    last interval's measurements and returns capacity assignments
    (node_id, vm_count) to apply from that instant on.
    """

    sample_interval_s: float

    def on_sample(
        self, k: int, t_s: float, latency_s: float, in_flight: float
    ) -> Sequence[tuple[str, int]]: ...


class _Item:
    __slots__ = (
        "instance_id",
        "node_id",
        "cpu_share",
        "bytes_out",
        "route",
        "start_s",
        "service_s",
        "network_s",
        "done_s",
    )

    def __init__(self, instance_id, node_id, cpu_share, bytes_out, route):
        self.instance_id = instance_id
        self.node_id = node_id
        self.cpu_share = cpu_share
        self.bytes_out = bytes_out
        self.route = route
        self.start_s = 0.0
        self.service_s = 0.0
        self.network_s = 0.0
        self.done_s = 0.0


class _NodeState:
    __slots__ = ("node_id", "service_rate", "capacity", "busy", "queue")

    def __init__(self, node_id: str, service_rate: float, capacity: int):
        self.node_id = node_id
        self.service_rate = service_rate
        self.capacity = capacity
        self.busy = 0
        self.queue: deque[_Item] = deque()


class _QueryState:
    __slots__ = ("instance", "items", "remaining")

    def __init__(self, instance: QueryInstance, items: list[_Item]):
        self.instance = instance
        self.items = items
        self.remaining = len(items)


def _validate_capacity_value(topology: Topology, node_id: str, value: int) -> None:
    node = topology.nodes_by_id.get(node_id)
    if node is None:
        raise CapacityError(f"capacity change targets unknown node {node_id!r}")
    if isinstance(value, bool) or not isinstance(value, int):
        raise CapacityError(f"capacity for node {node_id} must be an integer")
    if not (node.vm_min <= value <= node.vm_max):
        raise CapacityError(
            f"capacity {value} for node {node_id} outside "
            f"[{node.vm_min}, {node.vm_max}]"
        )


def simulate(
    topology: Topology,
    placement: Placement,
    workload: Sequence[QueryInstance],
    capacity_schedule: Iterable[tuple[float, str, int]] | None = None,
    *,
    catalog: Catalog,
    seed: int = 0,
    control: ControlHook | None = None,
) -> Trace:
    """Replay a workload against a topology and placement.

    Args:
        topology: the infrastructure to run on.
        placement: fragment-to-node assignment, must be valid.
        workload: QueryInstance list sorted by arrival_s.
        capacity_schedule: optional (time_s, node_id, vm_count) triples
            applied at their instants, validated against vm_min/vm_max.
        catalog: templates referenced by the workload.
        seed: run seed; route draws come from its "routes" stream.
        control: optional sampled-time controller hook.

    Returns:
        A Trace with one QueryRecord per instance and a run manifest.
    """
    violations = validate_placement(placement, catalog, topology)
    if violations:
        raise PlacementError(violations[0])
    for i in range(1, len(workload)):
        if workload[i].arrival_s < workload[i - 1].arrival_s:
            raise WorkloadError("workload must be sorted by arrival_s")

    schedule = sorted(capacity_schedule or [], key=lambda c: (c[0], c[1]))
    for t_s, node_id, value in schedule:
        if t_s < 0:
            raise CapacityError("capacity change time must be nonnegative")
        _validate_capacity_value(topology, node_id, value)

    nodes = {
        n.node_id: _NodeState(n.node_id, n.service_rate, n.vm_count)
        for n in topology.nodes
    }
    routes_rng = hrng.stream(seed, "routes")

    heap: list[tuple[float, int, int, int, Any]] = []
    seq = 0

    def push(t: float, kind: int, instance_id: int, payload: Any) -> None:
        nonlocal seq
        heapq.heappush(heap, (t, kind, instance_id, seq, payload))
        seq += 1

    for q in workload:
        push(q.arrival_s, _ARRIVAL, q.instance_id, q)
    for t_s, node_id, value in schedule:
        push(t_s, _CAPACITY, -1, (node_id, value))

    interval = control.sample_interval_s if control is not None else 0.0
    if control is not None:
        if interval <= 0:
            raise CapacityError("control sample interval must be positive")
        if heap:
            push(interval, _CONTROL, -1, None)

    timeline: list[tuple[float, str, int]] = []
    queries: dict[int, _QueryState] = {}
    records: list[QueryRecord] = []

    # in-flight bookkeeping for controller measurements
    in_flight = 0
    area = 0.0
    area_t = 0.0
    interval_start = 0.0
    lat_sum = 0.0
    lat_count = 0
    held_latency = 0.0
    control_step = 0

    def advance_area(t: float) -> None:
        nonlocal area, area_t
        area += in_flight * (t - area_t)
        area_t = t

    def apply_capacity(t: float, node_id: str, value: int) -> None:
        state = nodes[node_id]
        if value == state.capacity:
            return
        state.capacity = value
        timeline.append((t, node_id, value))
        try_start(state, t)

    def try_start(state: _NodeState, t: float) -> None:
        while state.queue and state.busy < state.capacity:
            item = state.queue.popleft()
            state.busy += 1
            item.start_s = t
            item.service_s = item.cpu_share / state.service_rate
            push(t + item.service_s, _SERVICE_END, item.instance_id, item)

    def finish_query(qs: _QueryState, t: float) -> None:
        nonlocal in_flight, lat_sum, lat_count
        advance_area(t)
        in_flight -= 1
        q = qs.instance
        completion = max(item.done_s for item in qs.items)
        critical = max(qs.items, key=lambda item: item.done_s)
        lat_sum += completion - q.arrival_s
        lat_count += 1
        records.append(
            QueryRecord(
                instance_id=q.instance_id,
                template_id=q.template_id,
                arrival_s=q.arrival_s,
                completion_s=completion,
                latency_s=completion - q.arrival_s,
                queue_wait_s=critical.start_s - q.arrival_s,
                service_s=critical.service_s,
                network_s=critical.network_s,
                start_service_by_node={
                    item.node_id: item.start_s for item in qs.items
                },
                route_ids=tuple(item.route.route_id for item in qs.items),
            )
        )

    while heap:
        t, kind, _iid, _seq, payload = heapq.heappop(heap)

        if kind == _CONTROL:
            advance_area(t)
            elapsed = t - interval_start
            if lat_count:
                held_latency = lat_sum / lat_count
            mean_in_flight = area / elapsed if elapsed > 0 else 0.0
            changes = control.on_sample(control_step, t, held_latency, mean_in_flight)
            for node_id, value in changes:
                _validate_capacity_value(topology, node_id, value)
                apply_capacity(t, node_id, value)
            control_step += 1
            interval_start = t
            area = 0.0
            lat_sum = 0.0
            lat_count = 0
            if heap:
                # exact k*interval products keep boundaries reproducible
                # from outside the loop
                push(interval * (control_step + 1), _CONTROL, -1, None)

        elif kind == _CAPACITY:
            node_id, value = payload
            apply_capacity(t, node_id, value)

        elif kind == _SERVICE_END:
            item = payload
            state = nodes[item.node_id]
            state.busy -= 1
            item.network_s = transfer_time(item.bytes_out, item.route, topology)
            item.done_s = t + item.network_s
            push(item.done_s, _ITEM_DONE, item.instance_id, item)
            try_start(state, t)

        elif kind == _ITEM_DONE:
            item = payload
            qs = queries[item.instance_id]
            qs.remaining -= 1
            if qs.remaining == 0:
                finish_query(qs, t)

        else:  # _ARRIVAL
            q = payload
            footprint = query_footprint(catalog.templates_by_id[q.template_id], placement)
            items = []
            for node_id in footprint:  # keys already sorted
                cpu_share, bytes_out = footprint[node_id]
                route = sample_route(topology, q.client_class, node_id, routes_rng)
                items.append(_Item(q.instance_id, node_id, cpu_share, bytes_out, route))
            queries[q.instance_id] = _QueryState(q, items)
            advance_area(t)
            in_flight += 1
            for item in items:
                state = nodes[item.node_id]
                state.queue.append(item)
                try_start(state, t)

    if len(records) != len(workload):
        raise InternalInvariantError(
            f"record count {len(records)} != workload size {len(workload)}"
        )
    records.sort(key=lambda r: (r.arrival_s, r.instance_id))

    manifest = {
        "seed": seed,
        "rng_algorithm": RNG_ALGORITHM,
        "instance_count": len(workload),
        "digests": {
            "topology": sha256_of(_topology_doc(topology)),
            "catalog": sha256_of(_catalog_doc(catalog)),
            "placement": sha256_of(placement.to_dict()),
            "workload": sha256_of(
                [
                    [q.instance_id, q.template_id, q.client_class, q.arrival_s]
                    for q in workload
                ]
            ),
        },
        "capacity_timeline": [[t, n, v] for t, n, v in timeline],
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    return Trace(tuple(records), manifest)


def _topology_doc(topology: Topology) -> dict:
    return {
        "nodes": [
            {
                "node_id": n.node_id,
                "tier": n.tier,
                "vm_count": n.vm_count,
                "service_rate": n.service_rate,
                "vm_min": n.vm_min,
                "vm_max": n.vm_max,
            }
            for n in topology.nodes
        ],
        "links": [
            {"link_id": l.link_id, "latency_s": l.latency_s, "bandwidth_Bps": l.bandwidth_Bps}
            for l in topology.links
        ],
        "routes": [
            {
                "route_id": r.route_id,
                "client_class": r.client_class,
                "target_node": r.target_node,
                "links": list(r.links),
                "weight": r.weight,
            }
            for r in topology.routes
        ],
    }


def _catalog_doc(catalog: Catalog) -> dict:
    return {
        "fragments": [
            {
                "fragment_id": f.fragment_id,
                "table": f.table,
                "size_bytes": f.size_bytes,
                "pinned_tier": f.pinned_tier,
            }
            for f in catalog.fragments
        ],
        "templates": [
            {
                "template_id": t.template_id,
                "fragments_read": list(t.fragments_read),
                "cpu_work": t.cpu_work,
                "result_bytes_per_fragment": dict(t.result_bytes_per_fragment),
                "frequency_weight": t.frequency_weight,
            }
            for t in catalog.templates
        ],
    }


def trace_to_csv(trace: Trace) -> str:
    """Serialize a trace; floats keep full precision via repr."""
    lines = [TRACE_CSV_HEADER]
    for r in trace.records:
        lines.append(
            f"{r.instance_id},{r.template_id},{r.arrival_s!r},{r.completion_s!r},"
            f"{r.latency_s!r},{r.queue_wait_s!r},{r.service_s!r},{r.network_s!r}"
        )
    return "\n".join(lines) + "\n"


def per_template_stats(trace: Trace) -> dict[str, dict[str, float]]:
    """Per-template latency statistics over a trace.

    p95 uses the nearest-rank definition: sorted[ceil(0.95 n)] (1-based).
    Templates with no records are absent from the result.
    """
    by_template: dict[str, list[float]] = {}
    for r in trace.records:
        by_template.setdefault(r.template_id, []).append(r.latency_s)
    stats: dict[str, dict[str, float]] = {}
    for tid in sorted(by_template):
        lats = sorted(by_template[tid])
        n = len(lats)
        rank = max(1, -(-int(95 * n) // 100))  # ceil(0.95 n) without float error
        stats[tid] = {
            "count": n,
            "mean_latency_s": sum(lats) / n,
            "p95_latency_s": lats[rank - 1],
            "max_latency_s": lats[-1],
        }
    return stats


def detect_overload(
    trace: Trace, window_s: float, concurrency_threshold: int
) -> list[tuple[float, float, int]]:
    """Find sampled intervals of sustained concurrency.

    In-flight count (arrival <= t < completion) is sampled on window
    boundaries t = 0, w, 2w, ...; runs of boundaries at or above the
    threshold merge into one (start_s, end_s, peak) interval.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    if concurrency_threshold < 1:
        raise ValueError("concurrency_threshold must be >= 1")
    if not trace.records:
        return []
    arrivals = sorted(r.arrival_s for r in trace.records)
    completions = sorted(r.completion_s for r in trace.records)
    t_max = completions[-1]

    intervals: list[tuple[float, float, int]] = []
    run_start: float | None = None
    run_end = 0.0
    run_peak = 0
    k = 0
    t = 0.0
    while t <= t_max:
        count = bisect.bisect_right(arrivals, t) - bisect.bisect_right(completions, t)
        if count >= concurrency_threshold:
            if run_start is None:
                run_start = t
                run_peak = count
            else:
                run_peak = max(run_peak, count)
            run_end = t + window_s
        elif run_start is not None:
            intervals.append((run_start, run_end, run_peak))
            run_start = None
        k += 1
        t = k * window_s
    if run_start is not None:
        intervals.append((run_start, run_end, run_peak))
    return intervals


def rank_demanding_templates(trace: Trace, k: int) -> list[str]:
    """Top-k templates by total latency contribution (count x mean).

    Ties break by template_id ascending; k beyond the template count
    returns all of them.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    totals: dict[str, float] = {}
    for r in trace.records:
        totals[r.template_id] = totals.get(r.template_id, 0.0) + r.latency_s
    ranked = sorted(totals, key=lambda tid: (-totals[tid], tid))
    return ranked[:k]
