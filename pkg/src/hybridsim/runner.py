"""Bundle execution: a self-contained run request in, artifact texts out.

A bundle is a single JSON object carrying the mode, the seed, and every
input document inline (topology, catalog, placement, workload, optional
control/optimizer/tune sections).  Execution returns a dict of artifact
filenames to file contents; nothing touches the filesystem here, so the
same code path serves the HTTP service and the CLI.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from typing import Any, Mapping, Sequence

import numpy as np

from .control import (
    ControllerConfig,
    GainScenario,
    control_trace_to_csv,
    evaluate_gain,
    interval_measurements,
    load_control_section,
    run_closed_loop,
    tune_gain_grid,
)
from .datamodel import Catalog, Placement, load_catalog, load_placement, validate_placement
from .engine import (
    Trace,
    detect_overload,
    per_template_stats,
    rank_demanding_templates,
    simulate,
    trace_to_csv,
)
from .errors import (
    ConfigError,
    ControllerConfigError,
    HybridSimError,
    NoRouteError,
    PlacementError,
    WorkloadError,
)
from .jsonio import ensure_mapping, sha256_of
from .topology import NodeSpec, Topology, load_topology
from .workload import (
    QueryInstance,
    generate_workload,
    load_workload_spec,
    workload_from_csv,
    workload_to_csv,
)

MODES = ("simulate", "optimize", "closed_loop", "tune")
OPTIMIZER_METHODS = ("greedy", "brute_force", "offload")
DEFAULT_OVERLOAD_WINDOW_S = 600.0
DEFAULT_TOP_K = 5


def _bundle_seed(bundle: Mapping[str, Any]) -> int:
    seed = bundle.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return seed


def _section(bundle: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    if name not in bundle:
        raise ConfigError(f"bundle is missing the {name!r} section")
    doc = bundle[name]
    if not isinstance(doc, Mapping):
        raise ConfigError(f"bundle section {name!r} must be a JSON object")
    return doc


def _materialize_workload(
    section: Mapping[str, Any],
    catalog: Catalog,
    topology: Topology,
    seed: int,
) -> list[QueryInstance]:
    """Turn the workload section into a concrete instance list.

    Exactly one of three forms: {"spec": {...}} generated on the spot,
    {"replay_csv": "..."} parsed from a prior run's artifact, or
    {"instances": [...]} given directly.
    """
    forms = [k for k in ("spec", "replay_csv", "instances") if k in section]
    if len(forms) != 1:
        raise WorkloadError(
            "workload needs exactly one of: spec, replay_csv, instances"
        )
    if forms[0] == "spec":
        doc = dict(ensure_mapping(section["spec"], "workload spec", WorkloadError))
        doc.setdefault("seed", seed)
        spec = load_workload_spec(doc)
        instances = generate_workload(spec, catalog, topology.client_classes)
    elif forms[0] == "replay_csv":
        if not isinstance(section["replay_csv"], str):
            raise WorkloadError("replay_csv must be CSV text")
        instances = workload_from_csv(section["replay_csv"])
    else:
        rows = section["instances"]
        if not isinstance(rows, list):
            raise WorkloadError("instances must be a list")
        instances = []
        for i, row in enumerate(rows):
            try:
                instances.append(
                    QueryInstance(
                        int(row["instance_id"]),
                        str(row["template_id"]),
                        str(row["client_class"]),
                        float(row["arrival_s"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise WorkloadError(f"instances[{i}] is malformed: {exc}") from exc
        instances.sort(key=lambda q: (q.arrival_s, q.instance_id))
    for q in instances:
        if q.template_id not in catalog.templates_by_id:
            raise WorkloadError(f"workload references unknown template: {q.template_id}")
        if q.arrival_s < 0:
            raise WorkloadError("arrival_s must be nonnegative")
    return instances


def _route_coverage_gaps(
    topology: Topology,
    catalog: Catalog,
    placement: Placement,
    workload: Sequence[QueryInstance] | None,
) -> list[str]:
    """(class, node) pairs the run will touch that have no route.

    With a concrete workload the pairs are exact; without one (a spec
    that has not been generated yet) any client class may draw any
    template, so the full cross product is required.
    """
    needed: set[tuple[str, str]] = set()
    if workload is None:
        for tpl in catalog.templates_by_id.values():
            nodes = {placement.node_of(f) for f in tpl.fragments_read}
            for cls in topology.client_classes:
                for node_id in nodes:
                    needed.add((cls, node_id))
    else:
        template_nodes: dict[str, tuple[str, ...]] = {}
        for q in workload:
            nodes = template_nodes.get(q.template_id)
            if nodes is None:
                tpl = catalog.templates_by_id[q.template_id]
                nodes = tuple(
                    sorted({placement.node_of(f) for f in tpl.fragments_read})
                )
                template_nodes[q.template_id] = nodes
            for node_id in nodes:
                needed.add((q.client_class, node_id))
    gaps = []
    for cls, node_id in sorted(needed):
        if not topology.routes_for(cls, node_id):
            gaps.append(f"no route from client class {cls!r} to node {node_id!r}")
    return gaps


def _with_capacity(topology: Topology, overrides: Mapping[str, int]) -> Topology:
    """Copy of the topology with some nodes' vm counts pinned to new values."""
    for node_id in overrides:
        if node_id not in topology.nodes_by_id:
            raise ConfigError(f"capacity override targets unknown node: {node_id}")
    nodes = []
    for node in topology.nodes:
        if node.node_id in overrides:
            v = overrides[node.node_id]
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError("capacity override must be a positive integer")
            nodes.append(
                NodeSpec(
                    node.node_id,
                    node.tier,
                    v,
                    node.service_rate,
                    vm_min=min(node.vm_min, v),
                    vm_max=max(node.vm_max, v),
                )
            )
        else:
            nodes.append(node)
    return Topology(tuple(nodes), topology.links, topology.routes)


def _mean_latency(trace: Trace) -> float:
    if not trace.records:
        return 0.0
    return sum(r.latency_s for r in trace.records) / len(trace.records)


def _summarize(
    bundle: Mapping[str, Any], trace: Trace, topology: Topology
) -> dict[str, Any]:
    stats = per_template_stats(trace)
    records = trace.records
    horizon = max((r.completion_s for r in records), default=0.0)
    ov = bundle.get("overload", {})
    if not isinstance(ov, Mapping):
        raise ConfigError("overload section must be a JSON object")
    window_s = float(ov.get("window_s", DEFAULT_OVERLOAD_WINDOW_S))
    if window_s <= 0:
        raise ConfigError("overload window_s must be positive")
    threshold = ov.get("threshold")
    if threshold is None:
        # congestion means queueing well past what the servers can absorb
        threshold = 2 * sum(n.vm_count for n in topology.nodes)
    intervals = (
        detect_overload(trace, window_s, int(threshold)) if records else []
    )
    top = rank_demanding_templates(trace, DEFAULT_TOP_K) if records else []
    return {
        "instance_count": len(records),
        "mean_latency_s": _mean_latency(trace),
        "max_completion_s": horizon,
        "per_template": stats,
        "overload": {
            "window_s": window_s,
            "threshold": int(threshold),
            "intervals": [[s, e, p] for s, e, p in intervals],
        },
        "top_demanding": top,
    }


def _stats_table_csv(stats: Mapping[str, Mapping[str, float]]) -> str:
    rows = sorted(
        stats.items(), key=lambda kv: (-kv[1]["mean_latency_s"], kv[0])
    )
    lines = ["template_id,count,mean_latency_s,p95_latency_s,max_latency_s"]
    for tid, st in rows:
        lines.append(
            f"{tid},{st['count']},{st['mean_latency_s']!r},"
            f"{st['p95_latency_s']!r},{st['max_latency_s']!r}"
        )
    return "\n".join(lines) + "\n"


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _assemble_artifacts(
    bundle: Mapping[str, Any],
    trace: Trace,
    workload: Sequence[QueryInstance],
    topology: Topology,
    extra_json: Mapping[str, Any] | None = None,
    extra_text: Mapping[str, str] | None = None,
    plain_json: Mapping[str, Any] | None = None,
) -> dict[str, str]:
    """Common artifact set plus mode extras, chained to the manifest.

    Report artifacts embed the digest of the manifest core (manifest
    minus its timestamp); the manifest in turn lists a digest of every
    other artifact's exact bytes.  Either side of the chain exposes any
    later edit.  plain_json entries are documents meant to be fed back
    into new runs (placements), so they stay schema-pure and are only
    covered by the manifest side.
    """
    core = {k: v for k, v in trace.manifest.items() if k != "created_utc"}
    core_digest = sha256_of(core)

    artifacts: dict[str, str] = {
        "trace.csv": trace_to_csv(trace),
        "workload.csv": workload_to_csv(workload),
        "fig2_table.csv": _stats_table_csv(per_template_stats(trace)),
    }
    json_docs: dict[str, Any] = {"summary.json": _summarize(bundle, trace, topology)}
    if extra_json:
        json_docs.update(extra_json)
    for name, doc in json_docs.items():
        doc = dict(doc)
        doc["manifest_core_sha256"] = core_digest
        artifacts[name] = _json_text(doc)
    for name, doc in (plain_json or {}).items():
        artifacts[name] = _json_text(doc)
    if extra_text:
        artifacts.update(extra_text)

    manifest = dict(trace.manifest)
    manifest["artifacts"] = {
        name: hashlib.sha256(text.encode("utf-8")).hexdigest()
        for name, text in sorted(artifacts.items())
    }
    artifacts["manifest.json"] = _json_text(manifest)
    return artifacts


def _load_common(bundle: Mapping[str, Any]):
    topology = load_topology(_section(bundle, "topology"))
    catalog = load_catalog(_section(bundle, "catalog"))
    placement = load_placement(_section(bundle, "placement"))
    problems = validate_placement(placement, catalog, topology)
    if problems:
        raise PlacementError(problems[0])
    seed = _bundle_seed(bundle)
    workload = _materialize_workload(
        _section(bundle, "workload"), catalog, topology, seed
    )
    gaps = _route_coverage_gaps(topology, catalog, placement, workload)
    if gaps:
        raise NoRouteError(gaps[0])
    return topology, catalog, placement, workload, seed


def _run_simulate(bundle: Mapping[str, Any]) -> dict[str, str]:
    topology, catalog, placement, workload, seed = _load_common(bundle)
    trace = simulate(topology, placement, workload, catalog=catalog, seed=seed)
    return _assemble_artifacts(bundle, trace, workload, topology)


def _optimizer_options(bundle: Mapping[str, Any]) -> tuple[str, str, int, int]:
    opt = bundle.get("optimizer", {})
    if not isinstance(opt, Mapping):
        raise ConfigError("optimizer section must be a JSON object")
    method = opt.get("method", "greedy")
    if method not in OPTIMIZER_METHODS:
        raise ConfigError(
            f"optimizer method must be one of {', '.join(OPTIMIZER_METHODS)}"
        )
    weights_mode = opt.get("weights", "catalog")
    if weights_mode not in ("catalog", "measured"):
        raise ConfigError("optimizer weights must be 'catalog' or 'measured'")
    max_moves = opt.get("max_moves", 32)
    if isinstance(max_moves, bool) or not isinstance(max_moves, int) or max_moves < 0:
        raise ConfigError("optimizer max_moves must be a nonnegative integer")
    k = opt.get("k", 1)
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ConfigError("optimizer k must be a positive integer")
    return method, weights_mode, max_moves, k


def _run_optimize(bundle: Mapping[str, Any]) -> dict[str, str]:
    from .placement import (
        brute_force_optimal,
        evaluate_placement,
        greedy_improve,
        offload_demanding_to_public,
    )

    topology, catalog, placement, workload, seed = _load_common(bundle)
    method, weights_mode, max_moves, k = _optimizer_options(bundle)

    initial_trace = simulate(
        topology, placement, workload, catalog=catalog, seed=seed
    )
    weights = None
    if weights_mode == "measured":
        counts = Counter(r.template_id for r in initial_trace.records)
        if not counts:
            raise PlacementError("measured weights need a nonempty workload")
        weights = {tid: float(n) for tid, n in counts.items()}

    initial_cost = evaluate_placement(placement, catalog, topology, weights)
    if method == "greedy":
        final = greedy_improve(placement, catalog, topology, max_moves, weights)
    elif method == "brute_force":
        final, _ = brute_force_optimal(catalog, topology, weights)
    else:
        final = offload_demanding_to_public(
            placement, initial_trace, catalog, topology, k
        )
    final_cost = evaluate_placement(final, catalog, topology, weights)
    final_trace = simulate(topology, final, workload, catalog=catalog, seed=seed)

    moves = [
        {"fragment_id": fid, "from": placement.node_of(fid), "to": final.node_of(fid)}
        for fid in sorted(placement.assignment)
        if final.node_of(fid) != placement.node_of(fid)
    ]
    report = {
        "method": method,
        "weights": weights_mode,
        "initial": {
            "analytic_cost_s": initial_cost.expected_latency_s,
            "simulated_mean_latency_s": _mean_latency(initial_trace),
        },
        "final": {
            "analytic_cost_s": final_cost.expected_latency_s,
            "simulated_mean_latency_s": _mean_latency(final_trace),
        },
        "moves": moves,
    }
    return _assemble_artifacts(
        bundle,
        final_trace,
        workload,
        topology,
        extra_json={"optimizer_report.json": report},
        plain_json={
            "placement_initial.json": placement.to_dict(),
            "placement_final.json": final.to_dict(),
        },
    )


def _control_pieces(bundle: Mapping[str, Any]):
    section = _section(bundle, "control")
    return section, load_control_section(section)


def _control_report(
    section: Mapping[str, Any],
    config: ControllerConfig,
    nodes: Sequence[str],
    outputs: Sequence[str],
    ct,
) -> dict[str, Any]:
    return {
        "controlled_nodes": list(nodes),
        "outputs": list(outputs),
        "Ki": config.Ki.tolist(),
        "setpoint": config.setpoint.tolist(),
        "lambda_u": config.lambda_u,
        "sample_interval_s": config.sample_interval_s,
        "spectral_radius": ct.spectral_radius,
        "cost_J": ct.cost_J,
        "steps": len(ct.steps),
        "final_u": list(ct.steps[-1].u) if ct.steps else [],
    }


def _baseline_comparison(
    section: Mapping[str, Any],
    topology: Topology,
    placement: Placement,
    catalog: Catalog,
    workload: Sequence[QueryInstance],
    seed: int,
    config: ControllerConfig,
    nodes: Sequence[str],
    outputs: Sequence[str],
) -> dict[str, Any] | None:
    """Rerun the workload on static capacity and price it with the same J."""
    baseline = section.get("baseline")
    if baseline is None:
        return None
    baseline = ensure_mapping(baseline, "control baseline", ControllerConfigError)
    vm_counts = ensure_mapping(
        baseline.get("vm_counts"), "baseline vm_counts", ControllerConfigError
    )
    static_topo = _with_capacity(topology, vm_counts)
    btrace = simulate(
        static_topo, placement, workload, catalog=catalog, seed=seed
    )
    series = interval_measurements(btrace.records, config.sample_interval_s)
    u_static = np.array(
        [float(static_topo.nodes_by_id[n].vm_count) for n in nodes]
    )
    J = 0.0
    for lat, inflight in series:
        measured = {"latency": lat, "in_flight": inflight}
        y = np.array([measured[name] for name in outputs])
        err = y - config.setpoint
        J += (
            float(err @ err) + config.lambda_u * float(u_static @ u_static)
        ) * config.sample_interval_s
    return {
        "vm_counts": {n: int(v) for n, v in sorted(vm_counts.items())},
        "cost_J": J,
        "steps": len(series),
        "mean_latency_s": _mean_latency(btrace),
    }


def _run_closed_loop(bundle: Mapping[str, Any]) -> dict[str, str]:
    topology, catalog, placement, workload, seed = _load_common(bundle)
    section, (model, config, nodes, outputs) = _control_pieces(bundle)
    trace, ct = run_closed_loop(
        topology, placement, catalog, workload, model, config,
        controlled_nodes=nodes, outputs=outputs, seed=seed,
    )
    report = _control_report(section, config, nodes, outputs, ct)
    baseline = _baseline_comparison(
        section, topology, placement, catalog, workload, seed,
        config, nodes, outputs,
    )
    if baseline is not None:
        report["baseline"] = baseline
        report["improves_on_baseline"] = ct.cost_J < baseline["cost_J"]
    return _assemble_artifacts(
        bundle,
        trace,
        workload,
        topology,
        extra_json={"control_report.json": report},
        extra_text={"control_trace.csv": control_trace_to_csv(ct)},
    )


def _tune_candidates(
    bundle: Mapping[str, Any], config: ControllerConfig
) -> tuple[list[np.ndarray], int]:
    tune = _section(bundle, "tune")
    raw = tune.get("candidates")
    if not isinstance(raw, list) or not raw:
        raise ControllerConfigError("tune candidates must be a nonempty list")
    candidates = []
    for i, entry in enumerate(raw):
        try:
            Ki = np.array(entry, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ControllerConfigError(f"candidates[{i}] is not a matrix") from exc
        if Ki.shape != config.Ki.shape:
            raise ControllerConfigError(
                f"candidates[{i}] must have shape {config.Ki.shape}"
            )
        candidates.append(Ki)
    steps = tune.get("steps", 200)
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
        raise ControllerConfigError("tune steps must be a positive integer")
    return candidates, steps


def _run_tune(bundle: Mapping[str, Any]) -> dict[str, str]:
    topology, catalog, placement, workload, seed = _load_common(bundle)
    section, (model, config, nodes, outputs) = _control_pieces(bundle)
    candidates, steps = _tune_candidates(bundle, config)

    s0 = []
    for node_id in nodes:
        node = topology.nodes_by_id.get(node_id)
        if node is None:
            raise ControllerConfigError(
                f"controlled node {node_id!r} not in topology"
            )
        s0.append(float(node.vm_count))
    scenario = GainScenario(
        steps, config.setpoint, config.u_min, config.u_max,
        config.lambda_u, None, np.array(s0),
    )
    results = [evaluate_gain(model, Ki, scenario) for Ki in candidates]
    best = tune_gain_grid(model, candidates, scenario)
    best_index = next(
        i for i, Ki in enumerate(candidates) if np.array_equal(Ki, best)
    )
    tuned = ControllerConfig(
        best, config.setpoint, config.u_min, config.u_max,
        config.sample_interval_s, config.lambda_u,
    )
    trace, ct = run_closed_loop(
        topology, placement, catalog, workload, model, tuned,
        controlled_nodes=nodes, outputs=outputs, seed=seed,
    )
    report = _control_report(section, tuned, nodes, outputs, ct)
    tune_report = {
        "steps": steps,
        "best_index": best_index,
        "candidates": [
            {
                "Ki": Ki.tolist(),
                "spectral_radius": rho,
                "cost_J_model": J,
            }
            for Ki, (rho, J) in zip(candidates, results)
        ],
    }
    return _assemble_artifacts(
        bundle,
        trace,
        workload,
        topology,
        extra_json={
            "control_report.json": report,
            "tune_report.json": tune_report,
        },
        extra_text={"control_trace.csv": control_trace_to_csv(ct)},
    )


def execute_bundle(bundle: Any) -> dict[str, str]:
    """Run one bundle and return {artifact filename: file text}."""
    bundle = ensure_mapping(bundle, "bundle", ConfigError)
    mode = bundle.get("mode", "simulate")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")
    if mode == "simulate":
        return _run_simulate(bundle)
    if mode == "optimize":
        return _run_optimize(bundle)
    if mode == "closed_loop":
        return _run_closed_loop(bundle)
    return _run_tune(bundle)


def validate_bundle(bundle: Any) -> list[str]:
    """All problems found in a bundle, empty when it is runnable.

    Sections are checked independently so one bad section does not mask
    another; cross-section checks run only once their inputs load.
    """
    errors: list[str] = []
    try:
        bundle = ensure_mapping(bundle, "bundle", ConfigError)
    except HybridSimError as exc:
        return [f"{exc.code}: {exc}"]

    mode = bundle.get("mode", "simulate")
    if mode not in MODES:
        errors.append(f"CONFIG_INVALID: mode must be one of {', '.join(MODES)}")
        mode = "simulate"
    try:
        _bundle_seed(bundle)
    except HybridSimError as exc:
        errors.append(f"{exc.code}: {exc}")

    topology = catalog = placement = None
    try:
        topology = load_topology(_section(bundle, "topology"))
    except HybridSimError as exc:
        errors.append(f"{exc.code}: {exc}")
    try:
        catalog = load_catalog(_section(bundle, "catalog"))
    except HybridSimError as exc:
        errors.append(f"{exc.code}: {exc}")
    try:
        placement = load_placement(_section(bundle, "placement"))
    except HybridSimError as exc:
        errors.append(f"{exc.code}: {exc}")

    if placement is not None and catalog is not None and topology is not None:
        for problem in validate_placement(placement, catalog, topology):
            errors.append(f"PLACEMENT_INVALID: {problem}")

    # Validation must stay proportional to the bundle size, so a spec is
    # checked without generating its instances; replayed and inline
    # workloads are already materialized text.
    workload = None
    workload_ok = False
    if catalog is not None and topology is not None:
        try:
            section = _section(bundle, "workload")
            forms = [k for k in ("spec", "replay_csv", "instances") if k in section]
            if forms == ["spec"]:
                load_workload_spec(
                    ensure_mapping(section["spec"], "workload spec", WorkloadError)
                )
            else:
                workload = _materialize_workload(section, catalog, topology, 0)
            workload_ok = True
        except HybridSimError as exc:
            errors.append(f"{exc.code}: {exc}")

    if workload_ok and placement is not None and not errors:
        for gap in _route_coverage_gaps(topology, catalog, placement, workload):
            errors.append(f"NO_ROUTE: {gap}")

    if mode == "optimize":
        try:
            _optimizer_options(bundle)
        except HybridSimError as exc:
            errors.append(f"{exc.code}: {exc}")
    if mode in ("closed_loop", "tune"):
        config = None
        try:
            _, (model, config, nodes, outputs) = _control_pieces(bundle)
            if topology is not None:
                for node_id in nodes:
                    if node_id not in topology.nodes_by_id:
                        errors.append(
                            f"CONTROLLER_INVALID: controlled node {node_id!r} "
                            "not in topology"
                        )
        except HybridSimError as exc:
            errors.append(f"{exc.code}: {exc}")
        if mode == "tune" and config is not None:
            try:
                _tune_candidates(bundle, config)
            except HybridSimError as exc:
                errors.append(f"{exc.code}: {exc}")
    return errors
