"""
Gradient-flow laboratory for pruneflow.

Integrates dθ/dt = −g(θ) and checks the identities that tie the parameter
norm to the importance measures:
    d‖θ‖²/dt   = −2θᵀg
    d²‖θ‖²/dt² = 2(‖g‖² + θᵀHg)
    dL/dt      = −‖g‖²
    ‖θ(T) − θ(0)‖²/T ≤ L(0) − L(T)
and their minibatch-SGD counterparts in expectation.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from diffcore import GradientVector, dot, grad, value_grad_hvp
from netmodel import Dataset, Model, layer_grad_norms
from utils import FlowError, csv_bytes

logger = logging.getLogger(__name__)

INTEGRATORS = ("euler", "rk4")
DEFAULT_ENUMERATION_CAP = 8


# =============================================================================
# TRACE
# =============================================================================

@dataclass
class FlowSample:
    t: float
    loss: float
    norm2: float
    theta_g: float
    grad_norm2: float
    theta_hg: float
    layer_grad_norm2: dict


@dataclass
class FlowTrace:
    step: float
    integrator: str
    layer_names: list
    samples: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples], dtype=np.float64)

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    def to_csv(self) -> bytes:
        header = ["t", "L", "norm2", "theta_g", "grad_norm2", "theta_Hg"]
        header += [f"grad_norm2_{name}" for name in self.layer_names]
        rows = (
            [s.t, s.loss, s.norm2, s.theta_g, s.grad_norm2, s.theta_hg]
            + [s.layer_grad_norm2[name] for name in self.layer_names]
            for s in self.samples
        )
        return csv_bytes(header, rows)


def _finite(values) -> bool:
    return all(np.isfinite(v) for v in values)


def integrate_flow(model: Model, dataset: Optional[Dataset], step: float, steps: int,
                   integrator: str = "rk4", temperature: float = 1.0, keep_states: bool = True) -> FlowTrace:
    """
    Integrate gradient flow from the model's current parameters.

    The model itself is not modified. Every sample point costs one
    gradient and one Hessian-vector product (v = g).

    Args:
        model: Network or quadratic model
        dataset: Full batch the loss is taken over (None for data-free models)
        step: Time step h > 0
        steps: Number of steps; the trace has steps + 1 samples
        integrator: 'euler' | 'rk4'
        temperature: Logit divisor of the loss
        keep_states: Keep θ at every sample point

    Returns:
        FlowTrace: samples at t = 0, h, 2h, ...

    Raises:
        ValueError: On a nonpositive step or unknown integrator
        FlowError: If the state stops being finite; carries the trace so far
    """
    if not step > 0:
        raise ValueError(f"Flow step must be positive, got {step}")
    if integrator not in INTEGRATORS:
        raise ValueError(f"Unknown integrator '{integrator}' (expected one of {', '.join(INTEGRATORS)})")

    graph = model.loss_graph(dataset, temperature)
    trace = FlowTrace(float(step), integrator, [layer.name for layer in model.layers])
    theta = model.params.copy()

    def velocity(state: GradientVector) -> GradientVector:
        return -grad(graph, state)

    for i in range(steps + 1):
        loss, g, hg = value_grad_hvp(graph, theta)
        sample = FlowSample(
            t=i * step,
            loss=loss,
            norm2=dot(theta, theta),
            theta_g=dot(theta, g),
            grad_norm2=dot(g, g),
            theta_hg=dot(theta, hg),
            layer_grad_norm2=layer_grad_norms(model, g),
        )
        scalars = [sample.loss, sample.norm2, sample.theta_g, sample.grad_norm2, sample.theta_hg]
        if not _finite(scalars) or not np.all(np.isfinite(theta.flatten())):
            logger.error(f"Flow left the finite range at t={sample.t}")
            raise FlowError(f"Non-finite flow state at t={sample.t} after {len(trace)} samples", trace)
        trace.samples.append(sample)
        if keep_states:
            trace.states.append(theta.copy())
        if i == steps:
            break

        if integrator == "euler":
            theta = theta - g * step
        else:
            k1 = -g
            k2 = velocity(theta + k1 * (step / 2))
            k3 = velocity(theta + k2 * (step / 2))
            k4 = velocity(theta + k3 * step)
            theta = theta + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6)

    logger.debug(f"{integrator} flow: {len(trace)} samples, L {trace.samples[0].loss:.6g} -> {trace.samples[-1].loss:.6g}")
    return trace


# =============================================================================
# IDENTITY CHECKS
# =============================================================================

def _require_interior(trace: FlowTrace):
    if len(trace) < 3:
        raise ValueError(f"Identity checks need at least 3 samples, got {len(trace)}")


def first_identity_residuals(trace: FlowTrace) -> np.ndarray:
    _require_interior(trace)
    norm2, theta_g, h = trace.column("norm2"), trace.column("theta_g"), trace.step
    derivative = (norm2[2:] - norm2[:-2]) / (2 * h)
    expected = -2.0 * theta_g[1:-1]
    return np.abs(derivative - expected) / (1.0 + np.abs(expected))


def check_first_identity(trace: FlowTrace) -> float:
    """Max relative residual of d‖θ‖²/dt = −2θᵀg over interior samples."""
    return float(np.max(first_identity_residuals(trace)))


def check_second_identity(trace: FlowTrace) -> float:
    """Max relative residual of d²‖θ‖²/dt² = 2(‖g‖² + θᵀHg)."""
    _require_interior(trace)
    norm2, h = trace.column("norm2"), trace.step
    second = (norm2[2:] - 2.0 * norm2[1:-1] + norm2[:-2]) / (h * h)
    expected = 2.0 * (trace.column("grad_norm2")[1:-1] + trace.column("theta_hg")[1:-1])
    return float(np.max(np.abs(second - expected) / (1.0 + np.abs(expected))))


def check_loss_identity(trace: FlowTrace) -> float:
    """Max relative residual of dL/dt = −‖g‖²."""
    _require_interior(trace)
    loss, h = trace.column("loss"), trace.step
    derivative = (loss[2:] - loss[:-2]) / (2 * h)
    expected = -trace.column("grad_norm2")[1:-1]
    return float(np.max(np.abs(derivative - expected) / (1.0 + np.abs(expected))))


def check_layer_decomposition(trace: FlowTrace) -> float:
    """Max relative gap between Σ per-layer ‖gₙ‖² and ‖g‖²."""
    gaps = [
        abs(sum(s.layer_grad_norm2.values()) - s.grad_norm2) / (1.0 + s.grad_norm2)
        for s in trace.samples
    ]
    return float(max(gaps, default=0.0))


def loss_bound_margins(trace: FlowTrace, init_params: Optional[GradientVector] = None) -> np.ndarray:
    """(L(0) − L(T)) − ‖θ(T) − θ(0)‖²/T at every sample with T > 0."""
    if not trace.states:
        raise ValueError("Loss-bound check needs a trace with states")
    start = trace.states[0] if init_params is None else init_params
    loss0 = trace.samples[0].loss
    margins = []
    for sample, state in zip(trace.samples[1:], trace.states[1:]):
        delta = state - start
        margins.append((loss0 - sample.loss) - dot(delta, delta) / sample.t)
    return np.array(margins, dtype=np.float64)


def check_loss_bound(trace: FlowTrace, init_params: Optional[GradientVector] = None) -> float:
    """
    Worst margin of the distance-from-initialization bound.

    Returns:
        float: min over T > 0 of (L(0) − L(T)) − ‖θ(T) − θ(0)‖²/T
    """
    margins = loss_bound_margins(trace, init_params)
    return float(np.min(margins)) if margins.size else 0.0


def observed_order(residuals) -> list[float]:
    """log₂ of successive residual ratios for steps halved each time."""
    residuals = np.asarray(residuals, dtype=np.float64)
    orders = []
    for a, b in zip(residuals[:-1], residuals[1:]):
        orders.append(float(np.log2(a / b)) if a > 0 and b > 0 else float("nan"))
    return orders


# =============================================================================
# SGD EXPECTATIONS
# =============================================================================

def _partition(dataset: Optional[Dataset], minibatches: int, cap: int) -> list:
    if minibatches < 1:
        raise ValueError(f"Need at least one minibatch, got {minibatches}")
    if minibatches > cap:
        raise ValueError(f"{minibatches} minibatches exceed the enumeration cap of {cap}")
    if dataset is None:
        return [None] * minibatches
    if len(dataset) % minibatches:
        raise ValueError(f"{len(dataset)} samples do not split into {minibatches} equal minibatches")
    return dataset.batches(len(dataset) // minibatches)


def _norm_change(after: GradientVector, before: GradientVector) -> float:
    """‖after‖² − ‖before‖² without cancellation."""
    return dot(after - before, after + before)


def sgd_expectation_check(model: Model, dataset: Optional[Dataset], rate: float, order: int,
                          minibatches: int = 4, cap: int = DEFAULT_ENUMERATION_CAP,
                          temperature: float = 1.0) -> float:
    """
    Exact minibatch expectation of the norm change versus its flow value.

    Order 1 enumerates the m single-step choices and returns
    |E[Δ‖θ‖²/η] + 2θᵀg|. Order 2 enumerates all m² ordered pairs of
    consecutive steps and returns |E[Δ²‖θ‖²/η²] − 2(‖g‖² + θᵀHg)|.
    g and H are the full-batch quantities at θ.

    Raises:
        ValueError: On an unknown order, unequal partition or m above the cap
    """
    if order not in (1, 2):
        raise ValueError(f"Expectation order must be 1 or 2, got {order}")
    if not rate > 0:
        raise ValueError(f"Rate must be positive, got {rate}")
    batches = _partition(dataset, minibatches, cap)
    graphs = [model.loss_graph(batch, temperature) for batch in batches]
    theta = model.params

    _, g, hg = value_grad_hvp(model.loss_graph(dataset, temperature), theta)
    first_steps = [theta - grad(graph, theta) * rate for graph in graphs]

    if order == 1:
        expectation = np.mean([_norm_change(after, theta) for after in first_steps]) / rate
        return float(abs(expectation + 2.0 * dot(theta, g)))

    changes = []
    for after_first in first_steps:
        first = _norm_change(after_first, theta)
        for graph in graphs:
            after_second = after_first - grad(graph, after_first) * rate
            changes.append(_norm_change(after_second, after_first) - first)
    expectation = np.mean(changes) / (rate * rate)
    return float(abs(expectation - 2.0 * (dot(g, g) + dot(theta, hg))))
