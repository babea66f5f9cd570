"""
Prune masks for pruneflow.
Round schedules, global mask construction with a per-layer keep floor,
mask application and the layer-wise / mask-distance diagnostics.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from diffcore import GradientVector
from importance import ImportanceReport
from netmodel import STRUCTURED, Model
from utils import ScheduleError, ShapeError, csv_bytes

logger = logging.getLogger(__name__)

BITSET_FORMAT = "pruneflow-mask"


def round_half_up(x: float) -> int:
    """Nearest integer, halves rounded up (tolerant to float noise like 0.3·10)."""
    return int(np.floor(x + 0.5 + 1e-9))


# =============================================================================
# SCHEDULE
# =============================================================================

@dataclass
class Schedule:
    target: float
    rounds: int
    cumulative: tuple

    def target_after(self, round_index: int) -> float:
        """Cumulative target after round `round_index` (1-based)."""
        return self.cumulative[round_index - 1]


def make_schedule(target: float, rounds: int) -> Schedule:
    """
    Divide a pruning target evenly over rounds.

    Args:
        target: Final fraction of prunable groups, 0 < target < 1
        rounds: Number of pruning rounds, ≥ 1

    Returns:
        Schedule: cumulative target after round k is target·k/rounds

    Raises:
        ScheduleError: On an out-of-range target or round count
    """
    if not 0.0 < target < 1.0:
        raise ScheduleError(f"Pruning target must be in (0, 1), got {target}")
    if int(rounds) != rounds or rounds < 1:
        raise ScheduleError(f"Pruning rounds must be a positive integer, got {rounds}")
    rounds = int(rounds)
    cumulative = [target * k / rounds for k in range(1, rounds)] + [float(target)]
    return Schedule(float(target), rounds, tuple(cumulative))


# =============================================================================
# MASK
# =============================================================================

@dataclass
class Mask:
    """Keep flags per prune group, in the model's group order."""
    keys: list
    kept: np.ndarray
    prunable: np.ndarray
    sizes: np.ndarray
    layer_names: list
    granularity: str = STRUCTURED
    floor_events: list = field(default_factory=list)

    def __post_init__(self):
        self.keys = [tuple(int(v) for v in k) for k in self.keys]
        self.kept = np.asarray(self.kept, dtype=bool)
        self.prunable = np.asarray(self.prunable, dtype=bool)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        n = len(self.keys)
        if self.kept.shape != (n,) or self.prunable.shape != (n,) or self.sizes.shape != (n,):
            raise ShapeError(f"Mask arrays do not match {n} groups")

    @classmethod
    def full(cls, model: Model, granularity: str = STRUCTURED) -> "Mask":
        """All-keep mask for `model`."""
        groups = model.groups(granularity)
        return cls(
            keys=[g.key for g in groups],
            kept=np.ones(len(groups), dtype=bool),
            prunable=np.array([g.prunable for g in groups], dtype=bool),
            sizes=np.array([g.size for g in groups], dtype=np.int64),
            layer_names=[layer.name for layer in model.layers],
            granularity=granularity,
        )

    def copy(self) -> "Mask":
        return Mask(list(self.keys), self.kept.copy(), self.prunable.copy(), self.sizes.copy(),
                    list(self.layer_names), self.granularity, [dict(e) for e in self.floor_events])

    @property
    def layers(self) -> np.ndarray:
        return np.array([k[0] for k in self.keys], dtype=np.int64)

    @property
    def n_prunable(self) -> int:
        return int(self.prunable.sum())

    @property
    def pruned(self) -> np.ndarray:
        return ~self.kept

    @property
    def pruned_count(self) -> int:
        return int(self.pruned.sum())

    def pruned_keys(self) -> set:
        return {k for k, keep in zip(self.keys, self.kept) if not keep}

    @property
    def pruned_fraction(self) -> float:
        """Pruned groups over prunable groups."""
        return self.pruned_count / self.n_prunable if self.n_prunable else 0.0

    @property
    def pruned_param_count(self) -> int:
        return int(self.sizes[self.pruned].sum())

    def pruned_param_fraction(self, total_params: int) -> float:
        return self.pruned_param_count / total_params if total_params else 0.0

    def check_model(self, model: Model):
        keys = [g.key for g in model.groups(self.granularity)]
        if keys != self.keys:
            raise ShapeError(f"Mask with {len(self.keys)} groups does not match model "
                             f"({len(keys)} {self.granularity} groups)")

    def param_mask(self, model: Model) -> GradientVector:
        """1.0 for kept parameters and 0.0 for pruned ones."""
        self.check_model(model)
        mask = GradientVector({name: np.ones_like(v) for name, v in model.params.items()})
        for g, keep in zip(model.groups(self.granularity), self.kept):
            if keep:
                continue
            for name, idx in g.indices.items():
                flat = mask[name].reshape(-1)
                flat[idx] = 0.0
        return mask

    def to_csv(self) -> bytes:
        rows = ((layer, group, keep) for (layer, group), keep in zip(self.keys, self.kept))
        return csv_bytes(("layer", "group", "kept"), rows)

    def save_bitset(self) -> bytes:
        """JSON header line followed by packed keep and prunable bits."""
        counts = np.bincount(self.layers, minlength=len(self.layer_names)).tolist()
        header = {
            "format": BITSET_FORMAT,
            "granularity": self.granularity,
            "layer_names": self.layer_names,
            "groups_per_layer": counts,
            "sizes": self.sizes.tolist(),
            "floor_events": self.floor_events,
            "count": len(self.keys),
        }
        bits = np.packbits(np.concatenate([self.kept, self.prunable]).astype(np.uint8))
        return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + bits.tobytes()

    @classmethod
    def load_bitset(cls, payload: bytes) -> "Mask":
        newline = payload.index(b"\n")
        header = json.loads(payload[:newline].decode("utf-8"))
        if header.get("format") != BITSET_FORMAT:
            raise ShapeError("Not a pruneflow mask bitset")
        n = header["count"]
        bits = np.unpackbits(np.frombuffer(payload[newline + 1:], dtype=np.uint8))[:2 * n].astype(bool)
        keys = [(layer, j) for layer, count in enumerate(header["groups_per_layer"]) for j in range(count)]
        return cls(keys, bits[:n], bits[n:], header["sizes"], header["layer_names"],
                   header["granularity"], header["floor_events"])


def _same_groups(a: Mask, b: Mask, opname: str):
    if a.keys != b.keys or a.granularity != b.granularity:
        raise ShapeError(f"{opname}: masks cover different groups")


# =============================================================================
# OPERATIONS
# =============================================================================

def build_mask(report: ImportanceReport, target: float, prior: Mask, floor: int = 1) -> Mask:
    """
    Extend `prior` by global ranking of the report's scores.

    Unpruned prunable groups are ranked ascending by (score, layer, group)
    and pruned until round(target · prunable groups) are pruned in total.
    A layer never drops below `floor` kept groups; its groups are skipped
    and the ranking spills to the next lowest score elsewhere.

    Args:
        report: Scores for every group of the mask
        target: Cumulative fraction of prunable groups to prune
        prior: Mask from the previous round (all-keep for the first)
        floor: Minimum kept groups per layer

    Returns:
        Mask: New mask; binding floors are listed in floor_events

    Raises:
        ScheduleError: If target is out of range or below the prior pruned fraction
        ShapeError: If the report and mask cover different groups
    """
    if list(report.keys) != prior.keys or report.granularity != prior.granularity:
        raise ShapeError(f"{report.measure} report does not cover the mask's groups")
    if not 0.0 <= target <= 1.0:
        raise ScheduleError(f"Cumulative target must be in [0, 1], got {target}")
    if floor < 0:
        raise ScheduleError(f"Keep floor must be nonnegative, got {floor}")

    requested = round_half_up(target * prior.n_prunable)
    already = int((prior.pruned & prior.prunable).sum())
    if requested < already:
        raise ScheduleError(f"Target {target} ({requested} groups) is below the {already} groups already pruned")

    mask = prior.copy()
    layers = mask.layers
    kept_per_layer = np.bincount(layers[mask.kept], minlength=len(mask.layer_names))
    candidates = np.flatnonzero(mask.kept & mask.prunable)
    order = sorted(candidates, key=lambda i: (report.scores[i], mask.keys[i][0], mask.keys[i][1]))

    to_prune = requested - already
    skipped: dict[int, int] = {}
    for i in order:
        if to_prune == 0:
            break
        layer = layers[i]
        if kept_per_layer[layer] <= floor:
            skipped[layer] = skipped.get(layer, 0) + 1
            continue
        mask.kept[i] = False
        kept_per_layer[layer] -= 1
        to_prune -= 1

    for layer, count in sorted(skipped.items()):
        mask.floor_events.append({"layer": mask.layer_names[layer], "floor": floor,
                                  "skipped": count, "target": float(target)})
        logger.warning(f"Keep floor {floor} binds in layer {mask.layer_names[layer]}; "
                       f"{count} lower-scored groups spilled elsewhere")
    if to_prune > 0:
        mask.floor_events.append({"layer": None, "floor": floor, "shortfall": to_prune, "target": float(target)})
        logger.warning(f"Floors leave {to_prune} groups unpruned at target {target}")

    logger.debug(f"{report.measure} mask: {mask.pruned_count}/{mask.n_prunable} groups pruned at target {target}")
    return mask


def apply_mask(model: Model, mask: Mask):
    """
    Zero pruned parameters and attach the parameter mask to the model.

    Raises:
        ShapeError: If the mask does not match the model
    """
    param_mask = mask.param_mask(model)
    model.params = model.params * param_mask
    model.mask = param_mask


def mask_distance(a: Mask, b: Mask) -> int:
    """Hamming distance over group keep flags."""
    _same_groups(a, b, "mask_distance")
    return int(np.sum(a.kept != b.kept))


def layerwise_ratios(mask: Mask) -> dict[str, float]:
    """Pruned groups over total groups, per layer."""
    layers = mask.layers
    ratios = {}
    for i, name in enumerate(mask.layer_names):
        in_layer = layers == i
        total = int(in_layer.sum())
        ratios[name] = float(np.sum(in_layer & mask.pruned) / total) if total else 0.0
    return ratios


def uniform_mask(model: Model, target: float, seed: int, granularity: str = STRUCTURED, floor: int = 1) -> Mask:
    """
    Remove round(target · groups) random groups from every prunable layer.

    Layers that would drop below `floor` are clamped and recorded.

    Raises:
        ScheduleError: If target is not in (0, 1)
    """
    if not 0.0 < target < 1.0:
        raise ScheduleError(f"Uniform target must be in (0, 1), got {target}")
    mask = Mask.full(model, granularity)
    rng = np.random.default_rng(seed)
    layers = mask.layers
    for i, name in enumerate(mask.layer_names):
        members = np.flatnonzero((layers == i) & mask.prunable)
        if members.size == 0:
            continue
        k = round_half_up(target * members.size)
        if members.size - k < floor:
            clamped = max(members.size - floor, 0)
            mask.floor_events.append({"layer": name, "floor": floor, "requested": k, "pruned": clamped,
                                      "target": float(target)})
            logger.warning(f"Uniform mask clamped in layer {name}: {k} requested, {clamped} pruned (floor {floor})")
            k = clamped
        # a fixed per-layer permutation keeps masks nested as the target grows
        order = rng.permutation(members)
        mask.kept[order[:k]] = False
    return mask


def rounding_report(mask: Mask, target: float) -> list[dict]:
    """Per-layer requested versus achieved pruning fraction."""
    layers = mask.layers
    rows = []
    for i, name in enumerate(mask.layer_names):
        members = (layers == i) & mask.prunable
        total = int(members.sum())
        if total == 0:
            continue
        pruned = int(np.sum(members & mask.pruned))
        rows.append({
            "layer": name,
            "groups": total,
            "requested": target * total,
            "pruned": pruned,
            "achieved": pruned / total,
            "deviation": pruned / total - target,
        })
    return rows
