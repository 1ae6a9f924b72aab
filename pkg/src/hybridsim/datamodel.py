"""Database fragments, query templates, and fragment-to-node placements.

Queries are not parsed SQL: a template names the fragments it reads, the
CPU work it costs, and how many result bytes each fragment contributes.
That is enough to locate work on nodes and price the network transfers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping

from .errors import CatalogError, PlacementError
from .jsonio import ensure_mapping
from .topology import TIERS, Topology


@dataclass(frozen=True)
class Fragment:
    fragment_id: str
    table: str
    size_bytes: int
    pinned_tier: str | None = None


@dataclass(frozen=True)
class QueryTemplate:
    """A cost-annotated query shape over a set of fragments."""

    template_id: str
    fragments_read: tuple[str, ...]
    cpu_work: float
    result_bytes_per_fragment: Mapping[str, int] = field(default_factory=dict)
    frequency_weight: float = 1.0

    def result_bytes(self, fragment_id: str) -> int:
        return int(self.result_bytes_per_fragment.get(fragment_id, 0))


@dataclass(frozen=True)
class Catalog:
    fragments: tuple[Fragment, ...]
    templates: tuple[QueryTemplate, ...]

    @cached_property
    def fragments_by_id(self) -> dict[str, Fragment]:
        return {f.fragment_id: f for f in self.fragments}

    @cached_property
    def templates_by_id(self) -> dict[str, QueryTemplate]:
        return {t.template_id: t for t in self.templates}

    @cached_property
    def normalized_weights(self) -> dict[str, float]:
        """template_id -> frequency_weight normalized to sum 1."""
        total = sum(t.frequency_weight for t in self.templates)
        return {t.template_id: t.frequency_weight / total for t in self.templates}


@dataclass(frozen=True)
class Placement:
    """A total map fragment_id -> node_id (no replication)."""

    assignment: Mapping[str, str]

    def node_of(self, fragment_id: str) -> str:
        return self.assignment[fragment_id]

    def move(self, fragment_id: str, node_id: str) -> "Placement":
        updated = dict(self.assignment)
        updated[fragment_id] = node_id
        return Placement(updated)

    def to_dict(self) -> dict[str, str]:
        return {fid: self.assignment[fid] for fid in sorted(self.assignment)}


def load_catalog(doc: Any) -> Catalog:
    """Parse and validate a catalog document (keys `fragments`, `templates`).

    Raises:
        CatalogError: naming the first violated invariant.
    """
    data = ensure_mapping(doc, "catalog", CatalogError)
    for key in ("fragments", "templates"):
        if key not in data or not isinstance(data[key], list):
            raise CatalogError(f"catalog: missing or non-list key {key!r}")

    fragments: list[Fragment] = []
    seen_frags: set[str] = set()
    for raw in data["fragments"]:
        raw = ensure_mapping(raw, "fragment", CatalogError)
        if "fragment_id" not in raw:
            raise CatalogError("fragment: missing required field 'fragment_id'")
        fid = str(raw["fragment_id"])
        if fid in seen_frags:
            raise CatalogError(f"duplicate fragment_id: {fid}")
        seen_frags.add(fid)
        size = raw.get("size_bytes")
        if isinstance(size, bool) or not isinstance(size, int) or size <= 0:
            raise CatalogError(f"fragment {fid}: size_bytes must be a positive integer")
        pinned = raw.get("pinned_tier")
        if pinned is not None and pinned not in TIERS:
            raise CatalogError(f"fragment {fid}: pinned_tier must be one of {TIERS}")
        fragments.append(Fragment(fid, str(raw.get("table", "")), size, pinned))

    templates: list[QueryTemplate] = []
    seen_templates: set[str] = set()
    for raw in data["templates"]:
        raw = ensure_mapping(raw, "template", CatalogError)
        if "template_id" not in raw:
            raise CatalogError("template: missing required field 'template_id'")
        tid = str(raw["template_id"])
        if tid in seen_templates:
            raise CatalogError(f"duplicate template_id: {tid}")
        seen_templates.add(tid)
        reads = raw.get("fragments_read")
        if not isinstance(reads, list) or not reads:
            raise CatalogError(f"template {tid}: fragments_read must be nonempty")
        for fid in reads:
            if fid not in seen_frags:
                raise CatalogError(f"template {tid}: reads unknown fragment {fid!r}")
        cpu = raw.get("cpu_work")
        if isinstance(cpu, bool) or not isinstance(cpu, (int, float)) or cpu <= 0:
            raise CatalogError(f"template {tid}: cpu_work must be positive")
        rbytes = raw.get("result_bytes_per_fragment", {})
        if not isinstance(rbytes, Mapping):
            raise CatalogError(f"template {tid}: result_bytes_per_fragment must be a map")
        for fid, b in rbytes.items():
            if fid not in reads:
                raise CatalogError(
                    f"template {tid}: result bytes for fragment {fid!r} not in fragments_read"
                )
            if isinstance(b, bool) or not isinstance(b, int) or b < 0:
                raise CatalogError(
                    f"template {tid}: result bytes must be a nonnegative integer"
                )
        weight = raw.get("frequency_weight", 1.0)
        if isinstance(weight, bool) or not isinstance(weight, (int, float)) or weight <= 0:
            raise CatalogError(f"template {tid}: frequency_weight must be positive")
        templates.append(
            QueryTemplate(
                tid,
                tuple(sorted(set(str(f) for f in reads))),
                float(cpu),
                {str(k): int(v) for k, v in rbytes.items()},
                float(weight),
            )
        )

    return Catalog(tuple(fragments), tuple(templates))


def load_placement(doc: Any) -> Placement:
    """Parse a placement file: a JSON map of fragment_id -> node_id."""
    data = ensure_mapping(doc, "placement", PlacementError)
    assignment: dict[str, str] = {}
    for fid, nid in data.items():
        if not isinstance(nid, str):
            raise PlacementError(f"placement: node for fragment {fid!r} must be a string")
        assignment[str(fid)] = nid
    return Placement(assignment)


def validate_placement(
    placement: Placement, catalog: Catalog, topology: Topology
) -> list[str]:
    """Check a placement against catalog and topology.

    Returns:
        A list of violation messages; empty means the placement is valid.
    """
    violations: list[str] = []
    for frag in catalog.fragments:
        fid = frag.fragment_id
        if fid not in placement.assignment:
            violations.append(f"unassigned fragment: {fid}")
            continue
        nid = placement.assignment[fid]
        node = topology.nodes_by_id.get(nid)
        if node is None:
            violations.append(f"fragment {fid} assigned to unknown node: {nid}")
            continue
        if frag.pinned_tier is not None and node.tier != frag.pinned_tier:
            violations.append(
                f"fragment {fid} pinned {frag.pinned_tier} but placed on "
                f"{node.tier} node {nid}"
            )
    for fid in placement.assignment:
        if fid not in catalog.fragments_by_id:
            violations.append(f"unknown fragment in placement: {fid}")
    return violations


def query_footprint(
    template: QueryTemplate, placement: Placement
) -> dict[str, tuple[float, int]]:
    """Locate a template's work on nodes under a placement.

    CPU work is split equally among the distinct nodes that host the
    fragments read; each node ships the result bytes of its own fragments.

    Returns:
        node_id -> (cpu work share, result bytes out), keys sorted.
    """
    nodes_bytes: dict[str, int] = {}
    for fid in template.fragments_read:
        nid = placement.node_of(fid)
        nodes_bytes[nid] = nodes_bytes.get(nid, 0) + template.result_bytes(fid)
    share = template.cpu_work / len(nodes_bytes)
    return {nid: (share, nodes_bytes[nid]) for nid in sorted(nodes_bytes)}
