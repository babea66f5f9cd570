"""
Importance measures for pruneflow.
Every measure returns an ImportanceReport with one finite score per prune
group where a lower score means the group is pruned earlier.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from diffcore import GradientVector, value_grad_hvp
from netmodel import STRUCTURED, Dataset, Model, group_sums
from utils import ImportanceError, csv_bytes

logger = logging.getLogger(__name__)

DEFAULT_GRASP_TEMPERATURE = 200.0
DEFAULT_PRESERVE_TEMPERATURE = 1.0

MEASURES = ("magnitude", "magnitude_l1", "loss", "proposed", "grasp", "grasp_abs", "random", "ebt")

REPORT_COLUMNS = ("layer", "group", "score", "signed_raw", "measure", "temperature", "step")


# =============================================================================
# REPORT
# =============================================================================

@dataclass
class ImportanceReport:
    """Per-group scores of one measure; lower == prune first."""
    measure: str
    keys: list
    scores: np.ndarray
    granularity: str = STRUCTURED
    signed_raw: Optional[np.ndarray] = None
    temperature: Optional[float] = None
    batch_ids: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.signed_raw = self.scores.copy() if self.signed_raw is None else np.asarray(self.signed_raw, dtype=np.float64)
        self.keys = [tuple(k) for k in self.keys]
        if self.scores.shape != (len(self.keys),):
            raise ImportanceError(f"{self.measure}: {self.scores.size} scores for {len(self.keys)} groups")
        if not np.all(np.isfinite(self.scores)):
            bad = [self.keys[i] for i in np.flatnonzero(~np.isfinite(self.scores))[:5]]
            raise ImportanceError(f"{self.measure}: non-finite scores for groups {bad}")

    def __len__(self) -> int:
        return len(self.keys)

    def as_dict(self) -> dict:
        return {key: float(s) for key, s in zip(self.keys, self.scores)}

    def scaled(self, factor: float) -> "ImportanceReport":
        return ImportanceReport(self.measure, self.keys, self.scores * factor, self.granularity,
                                self.signed_raw * factor, self.temperature, list(self.batch_ids), self.step)

    def to_csv(self) -> bytes:
        temperature = "" if self.temperature is None else self.temperature
        rows = (
            (layer, group, float(score), float(raw), self.measure, temperature, self.step)
            for (layer, group), score, raw in zip(self.keys, self.scores, self.signed_raw)
        )
        return csv_bytes(REPORT_COLUMNS, rows)


def _report(measure: str, model: Model, granularity: str, scores, **meta) -> ImportanceReport:
    keys = [g.key for g in model.groups(granularity)]
    return ImportanceReport(measure, keys, scores, granularity, **meta)


def _require_gradient(measure: str, model: Model, gradient: Optional[GradientVector]):
    if gradient is None:
        raise ImportanceError(f"{measure} needs a gradient at the current parameters")
    model.params.check_layout(gradient, measure)


def _check_temperature(measure: str, temperature: float):
    if not temperature > 0:
        raise ImportanceError(f"{measure}: temperature must be positive, got {temperature}")


# =============================================================================
# MEASURES
# =============================================================================

def magnitude(model: Model, granularity: str = STRUCTURED, norm: str = "l2", step: int = 0) -> ImportanceReport:
    """
    Σ θᵢ² per group (or Σ |θᵢ| with norm='l1').

    Raises:
        ValueError: On an unknown norm
    """
    if norm == "l2":
        values = model.params * model.params
        measure = "magnitude"
    elif norm == "l1":
        values = GradientVector({n: np.abs(v) for n, v in model.params.items()})
        measure = "magnitude_l1"
    else:
        raise ValueError(f"Unknown norm '{norm}'")
    groups = model.groups(granularity)
    return _report(measure, model, granularity, group_sums(model, values, groups), step=step)


def loss_preservation(model: Model, gradient: Optional[GradientVector],
                      granularity: str = STRUCTURED, step: int = 0) -> ImportanceReport:
    """|Σ θᵢ gᵢ| per group: first-order loss change if the group is removed."""
    _require_gradient("loss", model, gradient)
    signed = group_sums(model, model.params * gradient, model.groups(granularity))
    return _report("loss", model, granularity, np.abs(signed), signed_raw=signed, step=step)


def proposed_extension(model: Model, gradient: Optional[GradientVector],
                       granularity: str = STRUCTURED, step: int = 0) -> ImportanceReport:
    """Σ |θᵢ|·|θᵢ gᵢ| per group: small and loss-neutral parameters go first."""
    _require_gradient("proposed", model, gradient)
    values = GradientVector({
        n: np.abs(theta) * np.abs(theta * gradient[n]) for n, theta in model.params.items()
    })
    return _report("proposed", model, granularity, group_sums(model, values, model.groups(granularity)), step=step)


def hessian_gradient_scores(model: Model, batch: Optional[Dataset], temperature: float,
                            granularity: str = STRUCTURED) -> np.ndarray:
    """Signed θ_pᵀ(Hg)_p per group with g and Hg taken at the tempered loss."""
    graph = model.loss_graph(batch, temperature)
    _, _, hg = value_grad_hvp(graph, model.params)
    return group_sums(model, model.params * hg, model.groups(granularity))


def grasp(model: Model, batch: Optional[Dataset], temperature: float = DEFAULT_GRASP_TEMPERATURE,
          granularity: str = STRUCTURED, step: int = 0) -> ImportanceReport:
    """
    Gradient-norm pruning score θ_pᵀ(Hg)_p.

    The signed value ranks directly: the most negative groups are pruned
    first since removing them increases the gradient norm.

    Args:
        model: Network or quadratic model
        batch: Class-balanced scoring batch (ignored by the quadratic model)
        temperature: Logit divisor used for g and Hg
        granularity: 'structured' | 'unstructured'
        step: Training step stamp

    Raises:
        ImportanceError: If temperature is not positive
    """
    _check_temperature("grasp", temperature)
    signed = hessian_gradient_scores(model, batch, temperature, granularity)
    batch_ids = [] if batch is None else [int(i) for i in batch.indices]
    logger.debug(f"grasp at T={temperature}: {np.sum(signed < 0)} of {signed.size} groups negative")
    return _report("grasp", model, granularity, signed, signed_raw=signed,
                   temperature=float(temperature), batch_ids=batch_ids, step=step)


def grasp_preserve(model: Model, batch: Optional[Dataset], temperature: float = DEFAULT_PRESERVE_TEMPERATURE,
                   granularity: str = STRUCTURED, step: int = 0) -> ImportanceReport:
    """|θ_pᵀ(Hg)_p|: keeps groups that drive the gradient-norm dynamics."""
    _check_temperature("grasp_abs", temperature)
    signed = hessian_gradient_scores(model, batch, temperature, granularity)
    batch_ids = [] if batch is None else [int(i) for i in batch.indices]
    return _report("grasp_abs", model, granularity, np.abs(signed), signed_raw=signed,
                   temperature=float(temperature), batch_ids=batch_ids, step=step)


def random_importance(model: Model, seed: int, granularity: str = STRUCTURED, step: int = 0) -> ImportanceReport:
    rng = np.random.default_rng(seed)
    scores = rng.random(len(model.groups(granularity)))
    return _report("random", model, granularity, scores, step=step)


def ebt_proxy(model: Model, prev_sigma: Optional[dict], step: int = 0,
              granularity: str = STRUCTURED) -> ImportanceReport:
    """
    |σ_now|·|σ_now − σ_prev| per filter.

    In unstructured mode every weight inherits the score of the filter it
    belongs to.

    Args:
        model: Network with σ parameters
        prev_sigma: σ by layer name from the previous snapshot
        granularity: Group granularity of the returned report

    Raises:
        ImportanceError: If the snapshot is missing or does not match the model
    """
    if prev_sigma is None:
        raise ImportanceError("ebt needs a σ snapshot from the previous epoch")
    now = model.sigma()
    if not now:
        raise ImportanceError("ebt needs a model with σ parameters")

    keys, scores = [], []
    for g in model.filter_groups():
        name = model.layers[g.layer].name
        if name not in prev_sigma or np.shape(prev_sigma[name]) != now[name].shape:
            raise ImportanceError(f"σ snapshot does not match layer {name}")
        current = now[name][g.group]
        keys.append(g.key)
        scores.append(abs(current) * abs(current - prev_sigma[name][g.group]))
    if granularity == STRUCTURED:
        return ImportanceReport("ebt", keys, np.array(scores), STRUCTURED, step=step)
    return _report("ebt", model, granularity, _spread_to_groups(model, scores, granularity), step=step)


def _spread_to_groups(model: Model, filter_scores: list, granularity: str) -> np.ndarray:
    owner = {}
    for g, value in zip(model.filter_groups(), filter_scores):
        for name, idx in g.indices.items():
            for flat in idx.tolist():
                owner[(name, flat)] = value
    out = np.zeros(len(model.groups(granularity)))
    for k, g in enumerate(model.groups(granularity)):
        name, idx = next(iter(g.indices.items()))
        out[k] = owner[(name, int(idx[0]))]
    return out


# =============================================================================
# DISPATCH
# =============================================================================

def score(measure: str, model: Model, *, gradient: Optional[GradientVector] = None,
          batch: Optional[Dataset] = None, temperature: Optional[float] = None, seed: int = 0,
          prev_sigma: Optional[dict] = None, granularity: str = STRUCTURED, step: int = 0) -> ImportanceReport:
    """
    Score `model` with the measure named by `measure`.

    Raises:
        ImportanceError: On an unknown measure or missing inputs
    """
    if measure == "magnitude":
        return magnitude(model, granularity, "l2", step)
    if measure == "magnitude_l1":
        return magnitude(model, granularity, "l1", step)
    if measure == "loss":
        return loss_preservation(model, gradient, granularity, step)
    if measure == "proposed":
        return proposed_extension(model, gradient, granularity, step)
    if measure == "grasp":
        t = DEFAULT_GRASP_TEMPERATURE if temperature is None else temperature
        return grasp(model, batch, t, granularity, step)
    if measure == "grasp_abs":
        t = DEFAULT_PRESERVE_TEMPERATURE if temperature is None else temperature
        return grasp_preserve(model, batch, t, granularity, step)
    if measure == "random":
        return random_importance(model, seed, granularity, step)
    if measure == "ebt":
        return ebt_proxy(model, prev_sigma, step, granularity)
    raise ImportanceError(f"Unknown importance measure '{measure}' (expected one of {', '.join(MEASURES)})")


def needs_gradient(measure: str) -> bool:
    return measure in ("loss", "proposed")
