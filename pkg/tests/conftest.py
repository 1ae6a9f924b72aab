"""Shared builders for small test instances."""

from __future__ import annotations

from hybridsim.datamodel import Catalog, Fragment, Placement, QueryTemplate
from hybridsim.topology import LinkSpec, NodeSpec, Route, Topology
from hybridsim.workload import QueryInstance


def random_scenario(
    rng,
    *,
    max_nodes: int = 2,
    max_fragments: int = 4,
    max_templates: int = 3,
    max_queries: int = 3,
    multi_route: bool = False,
    max_horizon_s: float = 10.0,
):
    """Build a random (topology, catalog, placement, workload) instance.

    With multi_route=False every (client, node) pair gets exactly one
    route, which makes runs independent of the route RNG and therefore
    comparable with hand replays.
    """
    n_nodes = int(rng.integers(1, max_nodes + 1))
    nodes = tuple(
        NodeSpec(
            f"n{i}",
            "private" if i % 2 == 0 else "public",
            int(rng.integers(1, 3)),
            float(rng.uniform(0.5, 4.0)),
        )
        for i in range(n_nodes)
    )
    links = []
    routes = []
    for i in range(n_nodes):
        n_routes = int(rng.integers(1, 4)) if multi_route else 1
        for j in range(n_routes):
            lid = f"l{i}_{j}"
            links.append(
                LinkSpec(lid, float(rng.uniform(0.0, 0.1)), float(rng.uniform(1e5, 1e8)))
            )
            routes.append(
                Route(f"r{i}_{j}", "c", f"n{i}", (lid,), float(rng.uniform(0.5, 3.0)))
            )
    topology = Topology(nodes, tuple(links), tuple(routes))

    n_frags = int(rng.integers(1, max_fragments + 1))
    fragments = tuple(
        Fragment(f"f{i}", "t", int(rng.integers(1, 10_000))) for i in range(n_frags)
    )
    templates = []
    n_templates = int(rng.integers(1, max_templates + 1))
    for i in range(n_templates):
        k = int(rng.integers(1, n_frags + 1))
        reads = tuple(
            sorted(
                f"f{j}"
                for j in rng.choice(n_frags, size=k, replace=False)
            )
        )
        rbytes = {f: int(rng.integers(0, 50_000)) for f in reads}
        templates.append(
            QueryTemplate(
                f"T{i}", reads, float(rng.uniform(0.1, 5.0)), rbytes,
                float(rng.uniform(0.5, 3.0)),
            )
        )
    catalog = Catalog(fragments, tuple(templates))

    placement = Placement(
        {f.fragment_id: f"n{int(rng.integers(0, n_nodes))}" for f in fragments}
    )

    n_queries = int(rng.integers(1, max_queries + 1))
    arrivals = sorted(float(rng.uniform(0.0, max_horizon_s)) for _ in range(n_queries))
    if rng.random() < 0.3:
        # provoke exact arrival ties
        arrivals = [round(a, 1) for a in arrivals]
        arrivals.sort()
    workload = [
        QueryInstance(
            i,
            templates[int(rng.integers(0, n_templates))].template_id,
            "c",
            arrivals[i],
        )
        for i in range(n_queries)
    ]
    return topology, catalog, placement, workload


def small_catalog_doc() -> dict:
    """Three fragments (one pinned private) and three templates."""
    return {
        "fragments": [
            {"fragment_id": "fA", "table": "orders", "size_bytes": 10_000},
            {"fragment_id": "fB", "table": "orders", "size_bytes": 20_000},
            {
                "fragment_id": "fC",
                "table": "users",
                "size_bytes": 5_000,
                "pinned_tier": "private",
            },
        ],
        "templates": [
            {
                "template_id": "T1",
                "fragments_read": ["fA"],
                "cpu_work": 2.0,
                "result_bytes_per_fragment": {"fA": 1000},
                "frequency_weight": 3.0,
            },
            {
                "template_id": "T2",
                "fragments_read": ["fA", "fB"],
                "cpu_work": 4.0,
                "result_bytes_per_fragment": {"fA": 1000, "fB": 3000},
                "frequency_weight": 1.0,
            },
            {
                "template_id": "T3",
                "fragments_read": ["fC"],
                "cpu_work": 1.0,
                "result_bytes_per_fragment": {"fC": 500},
                "frequency_weight": 1.0,
            },
        ],
    }


def two_node_doc() -> dict:
    """Minimal hybrid topology: one private node, one public node."""
    return {
        "nodes": [
            {"node_id": "priv0", "tier": "private", "vm_count": 1, "service_rate": 1.0},
            {"node_id": "pub0", "tier": "public", "vm_count": 2, "service_rate": 2.0},
        ],
        "links": [
            {"link_id": "l1", "latency_s": 0.01, "bandwidth_Bps": 1.0e7},
            {"link_id": "l2", "latency_s": 0.02, "bandwidth_Bps": 1.0e6},
        ],
        "routes": [
            {
                "route_id": "r1",
                "client_class": "web",
                "target_node": "priv0",
                "links": ["l1", "l2"],
                "weight": 1.0,
            },
            {
                "route_id": "r2",
                "client_class": "web",
                "target_node": "priv0",
                "links": ["l1"],
                "weight": 3.0,
            },
            {
                "route_id": "r3",
                "client_class": "web",
                "target_node": "pub0",
                "links": ["l1"],
                "weight": 1.0,
            },
        ],
    }
