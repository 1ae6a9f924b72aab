"""Discrete-time feedback control of node capacity.

The plant is a fitted linear model x[k+1] = A x[k] + B u[k], y[k] = C x[k]
sampled every sample_interval_s, where u is the vm count of controlled
nodes and y holds measured outputs (interval mean latency, in-flight
count).  The controller is pure integral action with clamping anti-windup.
Stability is judged offline on the fitted model by the spectral radius of
the augmented closed loop; the cost J trades tracking error against
resource usage with a single weight lambda_u.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .datamodel import Catalog, Placement
from .engine import QueryRecord, Trace, simulate
from .errors import (
    ControllerConfigError,
    IdentificationError,
    NoStableGainError,
)
from .jsonio import ensure_mapping
from .topology import Topology
from .workload import QueryInstance

MEASUREMENT_NAMES = ("latency", "in_flight")


@dataclass(frozen=True)
class LinearModel:
    """State-space form of a fitted ARX model."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sample_interval_s: float
    residual: float = 0.0

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class ControllerConfig:
    """Integral gain with setpoint and actuator bounds."""

    Ki: np.ndarray  # m x p
    setpoint: np.ndarray  # p
    u_min: np.ndarray  # m
    u_max: np.ndarray  # m
    sample_interval_s: float
    lambda_u: float = 0.0


@dataclass(frozen=True)
class ControlStep:
    k: int
    t_s: float
    y: tuple[float, ...]
    u: tuple[float, ...]
    saturated: tuple[bool, ...]
    j_partial: float


@dataclass(frozen=True)
class ControlTrace:
    steps: tuple[ControlStep, ...]
    cost_J: float
    spectral_radius: float


def _as_matrix(raw: Any, name: str, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    try:
        m = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ControllerConfigError(f"{name} must be a numeric matrix") from exc
    if m.ndim != 2:
        raise ControllerConfigError(f"{name} must be a 2-d matrix (nested arrays)")
    if rows is not None and m.shape[0] != rows:
        raise ControllerConfigError(f"{name} must have {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ControllerConfigError(f"{name} must have {cols} columns, got {m.shape[1]}")
    return m


def _as_vector(raw: Any, name: str, length: int | None = None) -> np.ndarray:
    try:
        v = np.array(raw, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ControllerConfigError(f"{name} must be a numeric vector") from exc
    if length is not None and v.shape[0] != length:
        raise ControllerConfigError(f"{name} must have length {length}, got {v.shape[0]}")
    return v


def load_control_section(
    doc: Any,
) -> tuple[LinearModel, ControllerConfig, tuple[str, ...], tuple[str, ...]]:
    """Parse a controller config document.

    Expected shape: sample_interval_s, model {A, B, C}, controller
    {Ki, setpoint, u_min, u_max, lambda_u}, controlled_nodes, outputs.

    Returns:
        (model, config, controlled_nodes, outputs)
    """
    data = ensure_mapping(doc, "controller", ControllerConfigError)
    dt = data.get("sample_interval_s")
    if not isinstance(dt, (int, float)) or isinstance(dt, bool) or dt <= 0:
        raise ControllerConfigError("controller: sample_interval_s must be positive")
    dt = float(dt)

    raw_model = ensure_mapping(data.get("model"), "controller.model", ControllerConfigError)
    A = _as_matrix(raw_model.get("A"), "model.A")
    n = A.shape[0]
    if A.shape[1] != n:
        raise ControllerConfigError("model.A must be square")
    B = _as_matrix(raw_model.get("B"), "model.B", rows=n)
    C = _as_matrix(raw_model.get("C"), "model.C", cols=n)
    model = LinearModel(A, B, C, dt)

    raw_ctl = ensure_mapping(
        data.get("controller"), "controller.controller", ControllerConfigError
    )
    Ki = _as_matrix(raw_ctl.get("Ki"), "controller.Ki",
                    rows=model.input_dim, cols=model.output_dim)
    setpoint = _as_vector(raw_ctl.get("setpoint"), "controller.setpoint", model.output_dim)
    u_min = _as_vector(raw_ctl.get("u_min"), "controller.u_min", model.input_dim)
    u_max = _as_vector(raw_ctl.get("u_max"), "controller.u_max", model.input_dim)
    if np.any(u_min > u_max):
        raise ControllerConfigError("controller: u_min must be <= u_max componentwise")
    lambda_u = raw_ctl.get("lambda_u", 0.0)
    if not isinstance(lambda_u, (int, float)) or isinstance(lambda_u, bool) or lambda_u < 0:
        raise ControllerConfigError("controller: lambda_u must be >= 0")
    config = ControllerConfig(Ki, setpoint, u_min, u_max, dt, float(lambda_u))

    nodes = data.get("controlled_nodes")
    if not isinstance(nodes, list) or not nodes:
        raise ControllerConfigError("controller: controlled_nodes must be a nonempty list")
    if len(nodes) != model.input_dim:
        raise ControllerConfigError(
            f"controller: {model.input_dim} inputs but {len(nodes)} controlled_nodes"
        )
    outputs = tuple(data.get("outputs", MEASUREMENT_NAMES[: model.output_dim]))
    if len(outputs) != model.output_dim:
        raise ControllerConfigError(
            f"controller: {model.output_dim} outputs but {len(outputs)} output names"
        )
    for name in outputs:
        if name not in MEASUREMENT_NAMES:
            raise ControllerConfigError(
                f"controller: unknown output {name!r}, expected one of {MEASUREMENT_NAMES}"
            )
    return model, config, tuple(str(n) for n in nodes), outputs


def fit_model(
    io_log: Sequence[tuple[Sequence[float], Sequence[float]]],
    order: int,
    sample_interval_s: float = 1.0,
) -> LinearModel:
    """Least-squares ARX fit converted to a companion state-space model.

    The ARX form is y[k] = sum_i A_i y[k-i] + sum_i B_i u[k-i] over lags
    i = 1..order.  The state stacks the last `order` outputs and the last
    order-1 inputs, so order 1 gives A = A_1, B = B_1, C = I.

    Args:
        io_log: (u[k], y[k]) sample pairs in time order.
        order: ARX lag count n, >= 1.

    Raises:
        IdentificationError: log too short or regression rank-deficient.
    """
    if order < 1:
        raise IdentificationError("order must be >= 1")
    if len(io_log) < 10 * (order + 1):
        raise IdentificationError(
            f"io log too short: need >= {10 * (order + 1)} samples, got {len(io_log)}"
        )
    u = np.array([np.atleast_1d(np.asarray(pair[0], dtype=float)) for pair in io_log])
    y = np.array([np.atleast_1d(np.asarray(pair[1], dtype=float)) for pair in io_log])
    n_samples, m = u.shape
    p = y.shape[1]

    rows = []
    targets = []
    for k in range(order, n_samples):
        lagged = [y[k - i] for i in range(1, order + 1)]
        lagged += [u[k - i] for i in range(1, order + 1)]
        rows.append(np.concatenate(lagged))
        targets.append(y[k])
    X = np.array(rows)
    Y = np.array(targets)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise IdentificationError("insufficient excitation: regression is rank-deficient")
    theta, _, _, _ = np.linalg.lstsq(X, Y, rcond=None)
    theta = theta.T  # p x (order*(p+m))
    residual = float(np.linalg.norm(X @ theta.T - Y))

    A_blocks = [theta[:, i * p:(i + 1) * p] for i in range(order)]
    offset = order * p
    B_blocks = [theta[:, offset + i * m: offset + (i + 1) * m] for i in range(order)]

    if order == 1:
        return LinearModel(A_blocks[0], B_blocks[0], np.eye(p), sample_interval_s, residual)

    # companion form: state = [y[k];...;y[k-n+1]; u[k-1];...;u[k-n+1]]
    n_state = order * p + (order - 1) * m
    A = np.zeros((n_state, n_state))
    B = np.zeros((n_state, m))
    A[0:p, 0:order * p] = np.hstack(A_blocks)
    if order > 1:
        A[0:p, order * p:] = np.hstack(B_blocks[1:])
    for i in range(order - 1):  # shift y history
        A[(i + 1) * p:(i + 2) * p, i * p:(i + 1) * p] = np.eye(p)
    for i in range(order - 2):  # shift u history
        A[offset + (i + 1) * m: offset + (i + 2) * m,
          offset + i * m: offset + (i + 1) * m] = np.eye(m)
    B[0:p, :] = B_blocks[0]
    if order > 1:
        B[offset:offset + m, :] = np.eye(m)
    C = np.zeros((p, n_state))
    C[:, 0:p] = np.eye(p)
    return LinearModel(A, B, C, sample_interval_s, residual)


def step_controller(
    config: ControllerConfig,
    integrator_state: np.ndarray,
    y: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One integral-control update with clamping anti-windup.

    Returns:
        (u, new_integrator_state); u is always within [u_min, u_max], and
        a component pushing further into its bound leaves the integrator
        untouched for that component.
    """
    s = np.asarray(integrator_state, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    inc = config.Ki @ (config.setpoint - y)
    v = s + inc
    u = np.clip(v, config.u_min, config.u_max)
    hold = ((v > config.u_max) & (inc > 0)) | ((v < config.u_min) & (inc < 0))
    new_state = np.where(hold, s, v)
    return u, new_state


def closed_loop_spectral_radius(model: LinearModel, config: ControllerConfig) -> float:
    """Largest eigenvalue magnitude of the augmented closed loop.

    The loop is x[k+1] = A x + B u, u[k] = s[k], s[k+1] = s - Ki C x + Ki r,
    giving the block matrix [[A, B], [-Ki C, I]].  Stability means < 1.
    With Ki = 0 the integrator is inert and the open-loop radius of A is
    reported instead.
    """
    if not np.any(config.Ki):
        return float(np.max(np.abs(np.linalg.eigvals(model.A)))) if model.A.size else 0.0
    n = model.state_dim
    m = model.input_dim
    top = np.hstack([model.A, model.B])
    bottom = np.hstack([-config.Ki @ model.C, np.eye(m)])
    M = np.vstack([top, bottom])
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass(frozen=True)
class GainScenario:
    """Linear-model evaluation scenario for gain tuning."""

    steps: int
    setpoint: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    lambda_u: float = 0.0
    x0: np.ndarray | None = None
    s0: np.ndarray | None = None


def simulate_linear_loop(
    model: LinearModel, config: ControllerConfig, scenario: GainScenario
) -> tuple[np.ndarray, np.ndarray, float]:
    """Run the closed loop on the linear model itself (no simulator).

    The input computed from interval k's measurement takes effect in
    interval k+1, mirroring the live loop where capacity changes land at
    the sampling instant.  The input in force during interval 0 is the
    clamped initial integrator state.  With that convention the unclipped
    dynamics are exactly the block matrix [[A, B], [-Ki C, I]] used by
    closed_loop_spectral_radius.

    Returns:
        (y-series, u-series, J) over scenario.steps samples, where us[k]
        is the input active during interval k.
    """
    x = (
        np.zeros(model.state_dim)
        if scenario.x0 is None
        else np.asarray(scenario.x0, dtype=float).reshape(-1)
    )
    s = (
        np.zeros(model.input_dim)
        if scenario.s0 is None
        else np.asarray(scenario.s0, dtype=float).reshape(-1)
    )
    dt = model.sample_interval_s
    ys = np.zeros((scenario.steps, model.output_dim))
    us = np.zeros((scenario.steps, model.input_dim))
    u = np.clip(s, config.u_min, config.u_max)
    J = 0.0
    for k in range(scenario.steps):
        y = model.C @ x
        ys[k] = y
        us[k] = u
        err = y - config.setpoint
        J += (float(err @ err) + scenario.lambda_u * float(u @ u)) * dt
        x = model.A @ x + model.B @ u
        u, s = step_controller(config, s, y)
    return ys, us, J


def evaluate_gain(
    model: LinearModel, Ki: np.ndarray, scenario: GainScenario
) -> tuple[float, float | None]:
    """(spectral radius, J) for one candidate gain; J is None if unstable."""
    config = ControllerConfig(
        np.asarray(Ki, dtype=float),
        np.asarray(scenario.setpoint, dtype=float).reshape(-1),
        np.asarray(scenario.u_min, dtype=float).reshape(-1),
        np.asarray(scenario.u_max, dtype=float).reshape(-1),
        model.sample_interval_s,
        scenario.lambda_u,
    )
    rho = closed_loop_spectral_radius(model, config)
    if rho >= 1.0:
        return rho, None
    _, _, J = simulate_linear_loop(model, config, scenario)
    return rho, J


def tune_gain_grid(
    model: LinearModel,
    candidates: Sequence[np.ndarray],
    scenario: GainScenario,
) -> np.ndarray:
    """Pick the stable candidate gain with the lowest linear-model cost J.

    Unstable candidates (spectral radius >= 1) are discarded first; ties
    keep the earliest candidate.

    Raises:
        NoStableGainError: if every candidate is unstable.
    """
    if not len(candidates):
        raise NoStableGainError("no candidate gains supplied")
    best_idx = None
    best_J = None
    for idx, Ki in enumerate(candidates):
        _, J = evaluate_gain(model, Ki, scenario)
        if J is None:
            continue
        if best_J is None or J < best_J:
            best_J = J
            best_idx = idx
    if best_idx is None:
        raise NoStableGainError("no candidate gain is closed-loop stable")
    return np.asarray(candidates[best_idx], dtype=float)


class _LoopHook:
    """Engine-side adapter: measurements in, integer capacities out."""

    def __init__(
        self,
        config: ControllerConfig,
        controlled_nodes: Sequence[str],
        outputs: Sequence[str],
        topology: Topology,
    ):
        self.config = config
        self.sample_interval_s = config.sample_interval_s
        self.controlled_nodes = tuple(controlled_nodes)
        self.outputs = tuple(outputs)
        self.bounds = []
        s0 = []
        for node_id in self.controlled_nodes:
            node = topology.nodes_by_id.get(node_id)
            if node is None:
                raise ControllerConfigError(f"controlled node {node_id!r} not in topology")
            self.bounds.append((node.vm_min, node.vm_max))
            s0.append(float(node.vm_count))
        self.state = np.array(s0)
        # input in force during the interval about to be measured
        self.applied = np.clip(self.state, config.u_min, config.u_max)
        self.steps: list[ControlStep] = []
        self.J = 0.0

    def on_sample(self, k, t_s, latency_s, in_flight):
        measured = {"latency": latency_s, "in_flight": in_flight}
        y = np.array([measured[name] for name in self.outputs])
        v = self.state + self.config.Ki @ (self.config.setpoint - y)
        u, self.state = step_controller(self.config, self.state, y)
        saturated = (v < self.config.u_min) | (v > self.config.u_max)
        err = y - self.config.setpoint
        # J charges the input that was active while y was measured
        self.J += (
            float(err @ err)
            + self.config.lambda_u * float(self.applied @ self.applied)
        ) * self.sample_interval_s
        self.applied = u
        self.steps.append(
            ControlStep(
                k,
                t_s,
                tuple(float(x) for x in y),
                tuple(float(x) for x in u),
                tuple(bool(b) for b in saturated),
                self.J,
            )
        )
        changes = []
        for i, node_id in enumerate(self.controlled_nodes):
            lo, hi = self.bounds[i]
            vm = int(np.floor(u[i] + 0.5))
            vm = max(lo, min(hi, vm))
            changes.append((node_id, vm))
        return changes


def run_closed_loop(
    topology: Topology,
    placement: Placement,
    catalog: Catalog,
    workload: Sequence[QueryInstance],
    model: LinearModel,
    config: ControllerConfig,
    *,
    controlled_nodes: Sequence[str],
    outputs: Sequence[str] = ("latency",),
    seed: int = 0,
) -> tuple[Trace, ControlTrace]:
    """Simulate a workload with the integral controller in the loop.

    Every sample_interval_s the controller reads the last interval's
    measurements and retargets the vm count of the controlled nodes
    (u rounded to the nearest integer within node bounds).

    Returns:
        (engine Trace, ControlTrace with per-step records and cost J).
    """
    if len(tuple(controlled_nodes)) != config.Ki.shape[0]:
        raise ControllerConfigError(
            f"gain has {config.Ki.shape[0]} inputs but "
            f"{len(tuple(controlled_nodes))} controlled nodes"
        )
    if len(tuple(outputs)) != config.Ki.shape[1]:
        raise ControllerConfigError(
            f"gain has {config.Ki.shape[1]} outputs but "
            f"{len(tuple(outputs))} output names"
        )
    if model.output_dim != len(tuple(outputs)):
        raise ControllerConfigError(
            f"model has {model.output_dim} outputs but "
            f"{len(tuple(outputs))} output names"
        )
    if model.input_dim != len(tuple(controlled_nodes)):
        raise ControllerConfigError(
            f"model has {model.input_dim} inputs but "
            f"{len(tuple(controlled_nodes))} controlled nodes"
        )
    hook = _LoopHook(config, controlled_nodes, outputs, topology)
    trace = simulate(
        topology, placement, workload, catalog=catalog, seed=seed, control=hook
    )
    rho = closed_loop_spectral_radius(model, config)
    return trace, ControlTrace(tuple(hook.steps), hook.J, rho)


def interval_measurements(
    records: Sequence[QueryRecord], sample_interval_s: float
) -> list[tuple[float, float]]:
    """Per-interval (mean latency, mean in-flight) as the live loop sees it.

    Intervals are [k*dt, (k+1)*dt).  Latency averages the queries completing
    in the interval, holding the previous value when there are none (zero
    to start); in-flight is the time average of concurrent queries.
    """
    if sample_interval_s <= 0:
        raise ValueError("sample_interval_s must be positive")
    if not records:
        return []
    dt = sample_interval_s
    t_end = max(r.completion_s for r in records)
    n_steps = int(np.floor(t_end / dt)) + 1
    sums = np.zeros(n_steps)
    counts = np.zeros(n_steps, dtype=int)
    areas = np.zeros(n_steps)
    for r in records:
        ki = int(np.floor(r.completion_s / dt))
        if ki < n_steps:
            sums[ki] += r.latency_s
            counts[ki] += 1
        first = int(np.floor(r.arrival_s / dt))
        last = min(int(np.floor(r.completion_s / dt)), n_steps - 1)
        for k in range(first, last + 1):
            lo = max(r.arrival_s, k * dt)
            hi = min(r.completion_s, (k + 1) * dt)
            if hi > lo:
                areas[k] += hi - lo
    out = []
    held = 0.0
    for k in range(n_steps):
        if counts[k]:
            held = sums[k] / counts[k]
        out.append((held, areas[k] / dt))
    return out


def control_trace_to_csv(ct: ControlTrace) -> str:
    """CSV with one row per control step; saturated is a 0/1 bitstring."""
    if not ct.steps:
        return "k,t_s,saturated,J_partial\n"
    p = len(ct.steps[0].y)
    m = len(ct.steps[0].u)
    header = (
        ["k", "t_s"]
        + [f"y{i}" for i in range(p)]
        + [f"u{i}" for i in range(m)]
        + ["saturated", "J_partial"]
    )
    lines = [",".join(header)]
    for s in ct.steps:
        sat = "".join("1" if b else "0" for b in s.saturated)
        row = (
            [str(s.k), repr(s.t_s)]
            + [repr(v) for v in s.y]
            + [repr(v) for v in s.u]
            + [sat, repr(s.j_partial)]
        )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
