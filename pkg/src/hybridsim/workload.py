"""Random query stream generation: arrivals, template mix, bursts.

Two arrival processes are supported.  fixed_count(n) scatters exactly n
queries uniformly over the horizon, which matches replaying a known number
of queries over a known wall time.  poisson(rate_per_s) models an open
system.  Bursts inject extra queries into short windows on top of either,
to provoke deliberate overload.

All randomness flows through named substreams of the run seed (arrivals,
templates, clients, bursts), so e.g. adding a burst never changes the base
arrival times.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import rng as hrng
from .datamodel import Catalog
from .errors import WorkloadError
from .jsonio import ensure_mapping

WORKLOAD_CSV_HEADER = "instance_id,template_id,client_class,arrival_s"

_DEFAULT_CLASSES = ("default",)


@dataclass(frozen=True)
class Burst:
    """Extra queries injected uniformly into [start_s, start_s + duration_s]."""

    start_s: float
    duration_s: float
    extra_queries: int
    template_id: str | None = None


@dataclass(frozen=True)
class WorkloadSpec:
    horizon_s: float
    arrival_kind: str  # "poisson" | "fixed_count"
    rate_per_s: float = 0.0
    count: int = 0
    bursts: tuple[Burst, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class QueryInstance:
    instance_id: int
    template_id: str
    client_class: str
    arrival_s: float


def load_workload_spec(doc: Any) -> WorkloadSpec:
    """Parse and validate a workload spec section.

    Raises:
        WorkloadError: naming the first violated invariant.
    """
    data = ensure_mapping(doc, "workload", WorkloadError)
    horizon = data.get("horizon_s")
    if not isinstance(horizon, (int, float)) or isinstance(horizon, bool) or horizon <= 0:
        raise WorkloadError("workload: horizon_s must be positive")
    horizon = float(horizon)

    arrival = data.get("arrival")
    arrival = ensure_mapping(arrival, "workload.arrival", WorkloadError)
    kind = arrival.get("kind")
    rate = 0.0
    count = 0
    if kind == "poisson":
        rate = arrival.get("rate_per_s")
        if not isinstance(rate, (int, float)) or isinstance(rate, bool) or rate <= 0:
            raise WorkloadError("workload: rate_per_s must be positive")
        rate = float(rate)
    elif kind == "fixed_count":
        count = arrival.get("n")
        if isinstance(count, bool) or not isinstance(count, int) or count <= 0:
            raise WorkloadError("workload: fixed_count n must be a positive integer")
    else:
        raise WorkloadError("workload: arrival.kind must be 'poisson' or 'fixed_count'")

    bursts: list[Burst] = []
    for raw in data.get("bursts", []):
        raw = ensure_mapping(raw, "burst", WorkloadError)
        start = raw.get("start_s")
        duration = raw.get("duration_s")
        extra = raw.get("extra_queries")
        if not isinstance(start, (int, float)) or isinstance(start, bool) or start < 0:
            raise WorkloadError("burst: start_s must be nonnegative")
        if (
            not isinstance(duration, (int, float))
            or isinstance(duration, bool)
            or duration <= 0
        ):
            raise WorkloadError("burst: duration_s must be positive")
        if float(start) + float(duration) > horizon:
            raise WorkloadError("burst: window must lie within [0, horizon_s]")
        if isinstance(extra, bool) or not isinstance(extra, int) or extra < 1:
            raise WorkloadError("burst: extra_queries must be >= 1")
        template_id = raw.get("template_id")
        bursts.append(
            Burst(float(start), float(duration), extra,
                  None if template_id is None else str(template_id))
        )

    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise WorkloadError("workload: seed must be an integer")

    return WorkloadSpec(horizon, kind, rate, count, tuple(bursts), seed)


def _template_cdf(catalog: Catalog) -> tuple[list[str], np.ndarray]:
    ids = [t.template_id for t in catalog.templates]
    weights = np.array([t.frequency_weight for t in catalog.templates], dtype=float)
    return ids, np.cumsum(weights)


def _draw_templates(catalog: Catalog, n: int, gen: np.random.Generator) -> list[str]:
    ids, cum = _template_cdf(catalog)
    if len(ids) == 1:
        return [ids[0]] * n
    u = gen.random(n) * cum[-1]
    idx = np.searchsorted(cum, u, side="right")
    idx = np.minimum(idx, len(ids) - 1)
    return [ids[int(i)] for i in idx]


def _draw_clients(classes: Sequence[str], n: int, gen: np.random.Generator) -> list[str]:
    if len(classes) == 1:
        return [classes[0]] * n
    idx = gen.integers(0, len(classes), size=n)
    return [classes[int(i)] for i in idx]


def _poisson_arrivals(rate: float, horizon: float, gen: np.random.Generator) -> np.ndarray:
    chunk = max(64, int(rate * horizon * 1.2) + 16)
    gaps = gen.exponential(1.0 / rate, size=chunk)
    times = np.cumsum(gaps)
    while times[-1] <= horizon:
        more = gen.exponential(1.0 / rate, size=chunk)
        times = np.concatenate([times, times[-1] + np.cumsum(more)])
    return times[times <= horizon]


def generate_workload(
    spec: WorkloadSpec,
    catalog: Catalog,
    client_classes: Sequence[str] | None = None,
) -> list[QueryInstance]:
    """Generate the ordered query stream for one run.

    Args:
        spec: arrival plan, bursts and seed.
        catalog: supplies templates and their frequency weights.
        client_classes: classes to assign uniformly at random; callers
            normally pass the topology's classes.  Defaults to a single
            synthetic class.

    Returns:
        QueryInstance list sorted by arrival_s, instance_ids 0..n-1.

    Raises:
        WorkloadError: if the catalog has no templates or a burst names an
            unknown template.
    """
    if not catalog.templates:
        raise WorkloadError("workload: catalog has no templates")
    classes = tuple(client_classes) if client_classes else _DEFAULT_CLASSES

    gen_arrivals = hrng.stream(spec.seed, "arrivals")
    if spec.arrival_kind == "fixed_count":
        arrivals = np.sort(gen_arrivals.uniform(0.0, spec.horizon_s, size=spec.count))
    elif spec.arrival_kind == "poisson":
        arrivals = _poisson_arrivals(spec.rate_per_s, spec.horizon_s, gen_arrivals)
    else:
        raise WorkloadError(f"workload: unknown arrival kind {spec.arrival_kind!r}")

    n = len(arrivals)
    templates = _draw_templates(catalog, n, hrng.stream(spec.seed, "templates"))
    clients = _draw_clients(classes, n, hrng.stream(spec.seed, "clients"))
    base = [
        QueryInstance(i, templates[i], clients[i], float(arrivals[i]))
        for i in range(n)
    ]
    if not spec.bursts:
        return base
    return merge_bursts(
        base, spec.bursts, hrng.stream(spec.seed, "bursts"), catalog, classes
    )


def merge_bursts(
    base: list[QueryInstance],
    bursts: Iterable[Burst],
    gen: np.random.Generator,
    catalog: Catalog | None = None,
    client_classes: Sequence[str] = _DEFAULT_CLASSES,
) -> list[QueryInstance]:
    """Merge burst extras into a sorted base stream and renumber.

    Each burst contributes exactly extra_queries instances with arrivals
    uniform in its window; a burst without template_id samples templates
    from the catalog mix (catalog required in that case).
    """
    extras: list[QueryInstance] = []
    for burst in bursts:
        m = burst.extra_queries
        arrivals = gen.uniform(burst.start_s, burst.start_s + burst.duration_s, size=m)
        if burst.template_id is not None:
            if catalog is not None and burst.template_id not in catalog.templates_by_id:
                raise WorkloadError(
                    f"burst references unknown template {burst.template_id!r}"
                )
            templates = [burst.template_id] * m
        else:
            if catalog is None:
                raise WorkloadError("burst without template_id needs a catalog")
            templates = _draw_templates(catalog, m, gen)
        clients = _draw_clients(tuple(client_classes), m, gen)
        extras.extend(
            QueryInstance(0, templates[i], clients[i], float(arrivals[i]))
            for i in range(m)
        )
    merged = list(base) + extras
    merged.sort(key=lambda q: q.arrival_s)
    return [
        QueryInstance(i, q.template_id, q.client_class, q.arrival_s)
        for i, q in enumerate(merged)
    ]


def workload_to_csv(instances: Iterable[QueryInstance]) -> str:
    """Serialize instances to CSV; floats keep full precision via repr."""
    lines = [WORKLOAD_CSV_HEADER]
    for q in instances:
        lines.append(
            f"{q.instance_id},{q.template_id},{q.client_class},{q.arrival_s!r}"
        )
    return "\n".join(lines) + "\n"


def workload_from_csv(text: str) -> list[QueryInstance]:
    """Parse a workload CSV produced by workload_to_csv."""
    buf = io.StringIO(text)
    header = buf.readline().strip()
    if header != WORKLOAD_CSV_HEADER:
        raise WorkloadError(f"workload csv: unexpected header {header!r}")
    out: list[QueryInstance] = []
    for lineno, line in enumerate(buf, start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise WorkloadError(f"workload csv: bad field count on line {lineno}")
        try:
            out.append(
                QueryInstance(int(parts[0]), parts[1], parts[2], float(parts[3]))
            )
        except ValueError as exc:
            raise WorkloadError(f"workload csv: bad value on line {lineno}") from exc
    out.sort(key=lambda q: q.arrival_s)
    return out
