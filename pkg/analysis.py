"""
Correlation and breakdown studies for pruneflow.
Compares importance measures per group (Pearson and Spearman), tracks the
|σΔσ| signal against loss preservation over training, and reports
layer-wise pruning ratios and gradient norms. Every study emits CSV.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from diffcore import GradientVector, value_grad_hvp
from importance import ImportanceReport, ebt_proxy, loss_preservation
from masking import Mask, build_mask, layerwise_ratios, mask_distance
from netmodel import (
    STRUCTURED,
    UNSTRUCTURED,
    Dataset,
    Model,
    PruneGroup,
    distance_from_init,
    group_sums,
    layer_grad_norms,
)
from trainer import RunLog, full_batch_gradient
from utils import csv_bytes, read_csv

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("measure_a", "measure_b", "pearson", "spearman", "n", "stamp", "granularity", "seed")


# =============================================================================
# STATISTICS
# =============================================================================

def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"Correlation needs two equal-length score lists, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ValueError(f"Correlation needs at least 3 samples, got {x.size}")
    return x, y


def _degenerate(x: np.ndarray, y: np.ndarray) -> bool:
    return bool(np.all(x == x[0]) or np.all(y == y[0]))


def pearson(x, y) -> Optional[float]:
    """
    Pearson product-moment coefficient.

    Returns:
        float | None: r in [-1, 1], or None if either list has zero variance
    """
    x, y = _paired(x, y)
    if _degenerate(x, y):
        logger.warning(f"Pearson correlation undefined: zero variance over {x.size} samples")
        return None
    r = stats.pearsonr(x, y)[0]
    return float(np.clip(r, -1.0, 1.0))


def spearman(x, y) -> Optional[float]:
    """Spearman rank correlation; None on zero variance."""
    x, y = _paired(x, y)
    if _degenerate(x, y):
        logger.warning(f"Spearman correlation undefined: zero variance over {x.size} samples")
        return None
    rho = stats.spearmanr(x, y)[0]
    return float(np.clip(rho, -1.0, 1.0))


def trend(values: Sequence[Optional[float]]) -> Optional[float]:
    """Spearman ρ of (index, value), skipping undefined entries."""
    points = [(i, v) for i, v in enumerate(values) if v is not None and np.isfinite(v)]
    if len(points) < 3:
        return None
    index, value = zip(*points)
    return spearman(index, value)


@dataclass
class CorrelationResult:
    measure_a: str
    measure_b: str
    pearson: Optional[float]
    spearman: Optional[float]
    n: int
    stamp: int = 0
    granularity: str = STRUCTURED
    seed: Optional[int] = None
    keys: list = field(default_factory=list)
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def summary_row(self) -> list:
        return [self.measure_a, self.measure_b, self.pearson, self.spearman, self.n,
                self.stamp, self.granularity, self.seed]


def correlate(measure_a: str, a, measure_b: str, b, keys: list, stamp: int = 0,
              granularity: str = STRUCTURED) -> CorrelationResult:
    a, b = _paired(a, b)
    return CorrelationResult(measure_a, measure_b, pearson(a, b), spearman(a, b), int(a.size),
                             stamp, granularity, keys=list(keys), a=a, b=b)


def average_results(results: Sequence[CorrelationResult]) -> CorrelationResult:
    """Mean of the defined coefficients across seeds (or epochs)."""
    if not results:
        raise ValueError("Nothing to average")

    def mean_of(values):
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    first = results[0]
    averaged = CorrelationResult(
        first.measure_a, first.measure_b,
        mean_of([r.pearson for r in results]),
        mean_of([r.spearman for r in results]),
        int(first.n), first.stamp, first.granularity,
    )
    averaged.extra["runs"] = len(results)
    return averaged


# =============================================================================
# CSV
# =============================================================================

def write_scatter_csv(result: CorrelationResult) -> bytes:
    rows = (
        (f"{layer}:{group}", float(x), float(y))
        for (layer, group), x, y in zip(result.keys, result.a, result.b)
    )
    return csv_bytes(("group", "score_a", "score_b"), rows)


def read_scatter_csv(path: str) -> tuple[list, np.ndarray, np.ndarray]:
    """Re-read a scatter CSV; the floats come back bit-identical."""
    rows = read_csv(path)
    keys = [tuple(int(v) for v in row["group"].split(":")) for row in rows]
    a = np.array([float(row["score_a"]) for row in rows])
    b = np.array([float(row["score_b"]) for row in rows])
    return keys, a, b


def summary_csv(results: Sequence[CorrelationResult]) -> bytes:
    return csv_bytes(SUMMARY_COLUMNS, (r.summary_row() for r in results))


def rows_csv(rows: Sequence[dict]) -> bytes:
    if not rows:
        return b""
    header = list(rows[0])
    return csv_bytes(header, ([row.get(c) for c in header] for row in rows))


@contextmanager
def _params(model: Model, params: GradientVector):
    saved = model.params
    model.params = params
    try:
        yield model
    finally:
        model.params = saved


def _prunable(model: Model, granularity: str) -> np.ndarray:
    return np.array([g.prunable for g in model.groups(granularity)], dtype=bool)


# =============================================================================
# STUDIES
# =============================================================================

def grasp_vs_loss_correlation(model: Model, dataset: Optional[Dataset], temperature: float = 1.0,
                              granularities: Sequence[str] = (STRUCTURED, UNSTRUCTURED),
                              stamp: int = 0) -> dict[str, CorrelationResult]:
    """
    Signed θ_pᵀ(Hg)_p against θ_pᵀg_p per group at the current parameters.

    Returns:
        dict: CorrelationResult per granularity (scatter data attached)
    """
    _, g, hg = value_grad_hvp(model.loss_graph(dataset, temperature), model.params)
    results = {}
    for granularity in granularities:
        groups = model.groups(granularity)
        hessian_scores = group_sums(model, model.params * hg, groups)
        gradient_scores = group_sums(model, model.params * g, groups)
        result = correlate("theta_Hg", hessian_scores, "theta_g", gradient_scores,
                           [grp.key for grp in groups], stamp, granularity)
        logger.info(f"θᵀHg vs θᵀg ({granularity}, T={temperature}): pearson {result.pearson}")
        results[granularity] = result
    return results


def sigma_mask(model: Model, sigma: dict, target: float) -> Mask:
    """Bottom-`target` filters by |σ| among prunable filters, no keep floor."""
    keys, scores = [], []
    for grp in model.filter_groups():
        keys.append(grp.key)
        scores.append(abs(sigma[model.layers[grp.layer].name][grp.group]))
    report = ImportanceReport("sigma", keys, np.array(scores), STRUCTURED)
    return build_mask(report, target, Mask.full(model, STRUCTURED), floor=0)


@dataclass
class EbtPoint:
    epoch: int
    correlation: CorrelationResult
    mask_distance: int


def ebt_correlation_trace(runlog: RunLog, model: Model, dataset: Dataset, every: int = 1,
                          target: float = 0.2, per_step: bool = False) -> list[EbtPoint]:
    """
    Pearson(|σΔσ|, loss-preservation) per filter and σ-mask distance over epochs.

    Args:
        runlog: Run with σ and parameter snapshots (index 0 is initialization)
        model: The trained network (its parameters are restored afterwards)
        dataset: Data the loss-preservation gradient is taken over
        every: Evaluate at every k-th snapshot (k, 2k, ...)
        target: Fraction of filters in the bottom-|σ| mask
        per_step: Use the per-step snapshots, so Δσ is a single SGD update
            and EbtPoint.epoch holds the step index

    Raises:
        ValueError: With fewer than 2 snapshots or no parameter history
    """
    history = runlog.step_sigma_history if per_step else runlog.sigma_history
    params = runlog.step_param_history if per_step else runlog.param_history
    unit = "step" if per_step else "epoch"
    if len(history) < 2:
        raise ValueError(f"ebt trace needs at least 2 {unit} snapshots, got {len(history)}")
    if len(params) != len(history):
        raise ValueError(f"ebt trace needs the run's {unit} parameter history")

    prunable = _prunable(model, STRUCTURED)
    points = []
    for epoch in range(every, len(history), every):
        with _params(model, params[epoch]):
            ebt = ebt_proxy(model, history[epoch - 1], step=epoch)
            loss = loss_preservation(model, full_batch_gradient(model, dataset), STRUCTURED, step=epoch)
        keys = [k for k, keep in zip(ebt.keys, prunable) if keep]
        result = correlate("ebt", ebt.scores[prunable], "loss", loss.scores[prunable], keys, epoch)
        distance = mask_distance(sigma_mask(model, history[epoch - 1], target),
                                 sigma_mask(model, history[epoch], target))
        points.append(EbtPoint(epoch, result, distance))
        logger.debug(f"{unit.capitalize()} {epoch}: ebt/loss pearson {result.pearson}, mask distance {distance}")
    return points


def ebt_rows(points: Sequence[EbtPoint]) -> list[dict]:
    return [{"epoch": p.epoch, "pearson": p.correlation.pearson, "spearman": p.correlation.spearman,
             "mask_distance": p.mask_distance} for p in points]


def prune_set_overlap(a: ImportanceReport, b: ImportanceReport, prior: Mask, target: float) -> float:
    """|A ∩ B| / |A| for the prune sets both reports induce at `target`."""
    set_a = build_mask(a, target, prior, floor=0).pruned_keys()
    set_b = build_mask(b, target, prior, floor=0).pruned_keys()
    if not set_a:
        return 1.0
    return len(set_a & set_b) / len(set_a)


def _zero_centered(model: Model, groups: Sequence[PruneGroup]) -> list[PruneGroup]:
    scales = model.scale_names()
    return [PruneGroup(g.layer, g.group, {n: idx for n, idx in g.indices.items() if n not in scales}, g.prunable)
            for g in groups]


def l2_vs_distance_correlation(model: Model, target: float = 0.5, granularity: str = STRUCTURED,
                               stamp: int = 0) -> CorrelationResult:
    """
    ‖θ_p(T)‖² against ‖θ_p(T) − θ_p(0)‖² over prunable groups.

    Scale parameters (σ, initialized at 1) are left out of both sides; the
    rest of each group is drawn around 0. The prune-set overlap at `target`
    is stored in extra['overlap'].
    """
    groups = _zero_centered(model, model.groups(granularity))
    prunable = _prunable(model, granularity)
    l2 = ImportanceReport("magnitude", [g.key for g in groups],
                          group_sums(model, model.params * model.params, groups), granularity)
    distance = np.array([distance_from_init(model, grp) for grp in groups])
    distance_report = ImportanceReport("distance", l2.keys, distance, granularity)

    keys = [k for k, keep in zip(l2.keys, prunable) if keep]
    result = correlate("magnitude", l2.scores[prunable], "distance", distance[prunable], keys, stamp, granularity)
    result.extra["overlap"] = prune_set_overlap(l2, distance_report, Mask.full(model, granularity), target)
    return result


def l2_vs_distance_trace(runlog: RunLog, model: Model, target: float = 0.5,
                         granularity: str = STRUCTURED) -> list[CorrelationResult]:
    """l2_vs_distance_correlation at every recorded epoch after initialization."""
    if len(runlog.param_history) < 2:
        raise ValueError("l2/distance trace needs the run's parameter history")
    results = []
    for epoch, params in enumerate(runlog.param_history[1:], start=1):
        with _params(model, params):
            results.append(l2_vs_distance_correlation(model, target, granularity, stamp=epoch))
    return results


def layerwise_report(source, mode: str, dataset: Optional[Dataset] = None) -> list[dict]:
    """
    Per-layer breakdown rows.

    Args:
        source: Mask or list of Masks (mode='ratios'); RunLog, or a Model with
            `dataset` (mode='gradnorm')
        mode: 'ratios' | 'gradnorm'
        dataset: Batch for a fresh gradient when `source` is a Model

    Returns:
        list: One dict per mask / epoch with a column per layer
    """
    if mode == "ratios":
        masks = [source] if isinstance(source, Mask) else list(source)
        return [{"index": i, **layerwise_ratios(m)} for i, m in enumerate(masks)]

    if mode == "gradnorm":
        if isinstance(source, RunLog):
            history = source.grad_norm_history
        else:
            history = [layer_grad_norms(source, full_batch_gradient(source, dataset))]
        return [{"epoch": i, **norms, "total": sum(norms.values())} for i, norms in enumerate(history)]

    raise ValueError(f"Unknown layerwise mode '{mode}'")


def early_layer_ratio(mask: Mask) -> float:
    """Mean pruned fraction over the first half of the prunable layers."""
    ratios = layerwise_ratios(mask)
    prunable_layers = sorted({layer for (layer, _), p in zip(mask.keys, mask.prunable) if p})
    names = [mask.layer_names[i] for i in prunable_layers]
    early = names[:max(1, len(names) // 2)]
    return float(np.mean([ratios[n] for n in early])) if early else 0.0
