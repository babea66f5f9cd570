"""
Training for pruneflow.
Deterministic minibatch SGD with momentum and weight decay, and the
prune-and-train protocol: each round is one epoch of training followed by
scoring and extending the mask, under a fixed total epoch budget.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from diffcore import GradientVector, value_and_grad
from importance import MEASURES, needs_gradient, score
from masking import Mask, apply_mask, build_mask, make_schedule, uniform_mask
from netmodel import GRANULARITIES, STRUCTURED, Dataset, Model, layer_grad_norms
from utils import ScheduleError, ShapeError, csv_bytes, sha256_hex

logger = logging.getLogger(__name__)

DEFAULT_LR_SCHEDULE = ((0.1, 30), (0.01, 10), (0.001, 10))
TEMPERATURE_SCOPES = ("pruning", "all")
TRAIN_MEASURES = MEASURES + ("uniform",)

RUNLOG_COLUMNS = ("epoch", "train_loss", "train_acc", "eval_acc", "pruned_fraction",
                  "pruned_param_fraction", "rate", "temperature")
HISTORY_FORMAT = "pruneflow-history"
HISTORY_SECTIONS = ("param_history", "sigma_history", "step_param_history", "step_sigma_history")


# =============================================================================
# CONFIG
# =============================================================================

@dataclass
class TrainConfig:
    """Hyperparameters of one prune-and-train run."""
    lr_schedule: list = field(default_factory=lambda: [list(p) for p in DEFAULT_LR_SCHEDULE])
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 5.0
    temperature_scope: str = "pruning"
    seed: int = 0
    rounds: int = 1
    target: float = 0.5
    measure: Optional[str] = "magnitude"
    granularity: str = STRUCTURED
    floor: int = 1
    grasp_temperature: Optional[float] = None
    scoring_per_class: int = 2
    eval_fraction: float = 0.2
    keep_history: bool = True
    step_history: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if known.get("measure") == "none":
            known["measure"] = None
        return cls(**known)

    def validate(self):
        """
        Raises:
            ScheduleError: On an infeasible schedule or invalid hyperparameter
        """
        if not self.lr_schedule:
            raise ScheduleError("Learning-rate schedule is empty")
        for rate, epochs in self.lr_schedule:
            if not rate > 0:
                raise ScheduleError(f"Learning rates must be positive, got {rate}")
            if int(epochs) != epochs or epochs < 0:
                raise ScheduleError(f"Epoch counts must be nonnegative integers, got {epochs}")
        if self.batch_size < 1:
            raise ScheduleError(f"Batch size must be positive, got {self.batch_size}")
        if self.temperature_scope not in TEMPERATURE_SCOPES:
            raise ScheduleError(f"Unknown temperature scope '{self.temperature_scope}'")
        if not self.temperature > 0:
            raise ScheduleError(f"Training temperature must be positive, got {self.temperature}")
        if self.granularity not in GRANULARITIES:
            raise ScheduleError(f"Unknown granularity '{self.granularity}'")
        if self.measure is not None:
            if self.measure not in TRAIN_MEASURES:
                raise ScheduleError(f"Unknown measure '{self.measure}'")
            make_schedule(self.target, self.rounds)
            first_epochs = int(self.lr_schedule[0][1])
            if self.rounds > first_epochs:
                raise ScheduleError(f"{self.rounds} pruning rounds do not fit in the first "
                                    f"phase of {first_epochs} epochs")

    def epoch_plan(self) -> list[tuple[float, bool]]:
        """
        (rate, prunes_after) for every epoch.

        The first `rounds` epochs are pruning rounds at the first rate and
        are subtracted from the first phase, so the total epoch count does
        not depend on the number of rounds.
        """
        rounds = self.rounds if self.measure is not None else 0
        first_rate, first_epochs = self.lr_schedule[0]
        plan = [(float(first_rate), True)] * rounds
        plan += [(float(first_rate), False)] * (int(first_epochs) - rounds)
        for rate, epochs in self.lr_schedule[1:]:
            plan += [(float(rate), False)] * int(epochs)
        return plan

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


# =============================================================================
# RUN LOG
# =============================================================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    pruned_fraction: float
    pruned_param_fraction: float
    rate: float
    temperature: float


@dataclass
class RunLog:
    """
    Per-epoch metrics plus the σ, gradient-norm, parameter and mask history.

    The step_* histories hold one snapshot per SGD step (index 0 is the
    initialization) and stay empty unless the run asked for them.
    """
    records: list = field(default_factory=list)
    sigma_history: list = field(default_factory=list)
    grad_norm_history: list = field(default_factory=list)
    param_history: list = field(default_factory=list)
    step_sigma_history: list = field(default_factory=list)
    step_param_history: list = field(default_factory=list)
    mask_snapshots: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    steps: int = 0

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"Epoch {record.epoch} logged after epoch {self.records[-1].epoch}")
        self.records.append(record)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> bytes:
        rows = ([getattr(r, c) for c in RUNLOG_COLUMNS] for r in self.records)
        return csv_bytes(RUNLOG_COLUMNS, rows)

    def masks_csv(self) -> bytes:
        columns = ("round", "epoch", "target", "pruned_fraction", "mask_id")
        return csv_bytes(columns, ([s[c] for c in columns] for s in self.mask_snapshots))

    def history_bytes(self) -> bytes:
        """
        Snapshot histories as one JSON header line plus a little-endian
        float64 payload (the checkpoint layout, one tensor per snapshot entry).
        """
        tensors, chunks, offset = [], [], 0
        for section in HISTORY_SECTIONS:
            for index, snapshot in enumerate(getattr(self, section)):
                for name, array in snapshot.items():
                    data = np.ascontiguousarray(array, dtype="<f8").tobytes()
                    tensors.append({"section": section, "index": index, "name": name,
                                    "shape": list(np.shape(array)), "offset": offset, "nbytes": len(data)})
                    chunks.append(data)
                    offset += len(data)
        header = {"format": HISTORY_FORMAT, "version": 1, "dtype": "<f8", "steps": self.steps,
                  "grad_norm_history": self.grad_norm_history, "tensors": tensors}
        return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)

    @classmethod
    def from_history_bytes(cls, payload: bytes) -> "RunLog":
        """
        Rebuild the snapshot histories written by `history_bytes`.

        Raises:
            ShapeError: If the header is not a pruneflow history
        """
        newline = payload.find(b"\n")
        try:
            header = json.loads(payload[:newline].decode("utf-8"))
        except ValueError:
            header = None
        if newline < 0 or not isinstance(header, dict) or header.get("format") != HISTORY_FORMAT:
            raise ShapeError("Not a pruneflow history")
        body = payload[newline + 1:]

        snapshots: dict[str, list] = {section: [] for section in HISTORY_SECTIONS}
        for t in header["tensors"]:
            entries = snapshots[t["section"]]
            while len(entries) <= t["index"]:
                entries.append({})
            raw = body[t["offset"]:t["offset"] + t["nbytes"]]
            entries[t["index"]][t["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])

        log = cls(grad_norm_history=header["grad_norm_history"], steps=header["steps"])
        for section, entries in snapshots.items():
            if section.endswith("param_history"):
                entries = [GradientVector(e) for e in entries]
            setattr(log, section, entries)
        return log


# =============================================================================
# OPTIMIZER
# =============================================================================

class SGD:
    """
    Momentum SGD with coupled weight decay.

    d = g + λθ;  buf ← μ·buf + d;  θ ← θ − η·buf.
    Masked entries of d and of the buffer are zeroed.
    """

    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffer: Optional[GradientVector] = None

    def step(self, model: Model, gradient: GradientVector, rate: float,
             mask: Optional[GradientVector] = None):
        if not rate > 0:
            raise ScheduleError(f"Learning rate must be positive, got {rate}")
        direction = gradient + model.params * self.weight_decay if self.weight_decay else gradient.copy()
        if mask is not None:
            direction = direction * mask
        if self.momentum:
            if self.buffer is None:
                self.buffer = direction.zeros_like()
            self.buffer = self.buffer * self.momentum + direction
            if mask is not None:
                self.buffer = self.buffer * mask
            direction = self.buffer
        model.params = model.params - direction * rate

    def apply_mask(self, mask: GradientVector):
        """Drop the velocity of newly pruned parameters."""
        if self.buffer is not None:
            self.buffer = self.buffer * mask


def _as_param_mask(model: Model, mask: Union[Mask, GradientVector, None]) -> Optional[GradientVector]:
    if mask is None:
        return model.mask
    if isinstance(mask, Mask):
        return mask.param_mask(model)
    model.params.check_layout(mask, "mask")
    return mask


def sgd_step(model: Model, batch: Optional[Dataset], rate: float, momentum: float = 0.0,
             weight_decay: float = 0.0, mask: Union[Mask, GradientVector, None] = None,
             optimizer: Optional[SGD] = None, temperature: float = 1.0) -> float:
    """
    One minibatch update.

    Args:
        model: Model to update in place
        batch: Minibatch (None for data-free models)
        rate: Learning rate η
        momentum: Momentum μ (ignored when `optimizer` carries its own state)
        weight_decay: Weight decay λ
        mask: Parameter mask; defaults to the model's current mask
        optimizer: Persistent optimizer state for momentum across steps
        temperature: Logit divisor used for the training loss

    Returns:
        float: Minibatch loss before the update

    Raises:
        ShapeError: If the batch is empty
    """
    if batch is not None and len(batch) == 0:
        raise ShapeError("sgd_step needs a nonempty batch")
    optimizer = optimizer or SGD(momentum, weight_decay)
    loss, gradient = value_and_grad(model.loss_graph(batch, temperature), model.params)
    optimizer.step(model, gradient, rate, _as_param_mask(model, mask))
    return loss


# =============================================================================
# EVALUATION
# =============================================================================

def full_batch_gradient(model: Model, dataset: Dataset, batch_size: Optional[int] = None,
                        temperature: float = 1.0) -> GradientVector:
    """
    Gradient of the mean loss, assembled from a fixed minibatch partition.

    Batches are weighted by their size, which makes the result equal the
    gradient of the loss over the whole dataset.
    """
    if len(dataset) == 0:
        raise ShapeError("full_batch_gradient needs a nonempty dataset")
    batches = dataset.batches(batch_size or len(dataset))
    total = model.params.zeros_like()
    for batch in batches:
        total = total + value_and_grad(model.loss_graph(batch, temperature), model.params)[1] * float(len(batch))
    return total * (1.0 / len(dataset))


def evaluate_accuracy(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(model.accuracy(dataset))


def _mask_id(mask: Mask) -> str:
    return sha256_hex(mask.save_bitset())[:12]


# =============================================================================
# PRUNE AND TRAIN
# =============================================================================

def _score_round(model: Model, config: TrainConfig, train: Dataset, scoring: Dataset,
                 prev_sigma: dict, round_index: int, step: int):
    gradient = None
    if needs_gradient(config.measure):
        gradient = full_batch_gradient(model, train, config.batch_size)
    return score(
        config.measure, model,
        gradient=gradient,
        batch=scoring,
        temperature=config.grasp_temperature,
        seed=config.seed + round_index,
        prev_sigma=prev_sigma,
        granularity=config.granularity,
        step=step,
    )


def prune_and_train(model: Model, dataset: Dataset, config: TrainConfig) -> tuple[RunLog, Mask]:
    """
    Run the prune-and-train protocol.

    Rounds of (one epoch of training, score, extend mask) come first at the
    first learning rate, followed by the rest of the schedule. With
    `measure=None` the model is trained densely under the same budget.

    Args:
        model: Network trained in place
        dataset: Full dataset; split into train/eval by config.seed
        config: Run hyperparameters

    Returns:
        tuple: (RunLog, final Mask)

    Raises:
        ScheduleError: If the schedule is infeasible
    """
    config.validate()
    train, evals = dataset.split(config.eval_fraction, config.seed)
    scoring = train.scoring_batch(config.scoring_per_class, config.seed)
    batch_size = min(config.batch_size, len(train))
    schedule = make_schedule(config.target, config.rounds) if config.measure is not None else None

    rng = np.random.default_rng(config.seed)
    optimizer = SGD(config.momentum, config.weight_decay)
    mask = Mask.full(model, config.granularity)
    log = RunLog()
    total_params = model.params.size

    def snapshot():
        log.sigma_history.append(model.sigma())
        log.grad_norm_history.append(layer_grad_norms(model, full_batch_gradient(model, train, batch_size)))
        if config.keep_history:
            log.param_history.append(model.params.copy())

    def step_snapshot():
        if config.step_history:
            log.step_sigma_history.append(model.sigma())
            log.step_param_history.append(model.params.copy())

    snapshot()
    step_snapshot()
    plan = config.epoch_plan()
    logger.info(f"Training {len(plan)} epochs on {len(train)} samples "
                f"(measure={config.measure}, rounds={config.rounds}, target={config.target})")

    round_index = 0
    for epoch, (rate, prunes_after) in enumerate(plan, start=1):
        tempered = prunes_after or config.temperature_scope == "all"
        temperature = config.temperature if tempered else 1.0

        losses = []
        for batch in train.batches(batch_size, rng):
            losses.append(sgd_step(model, batch, rate, mask=model.mask, optimizer=optimizer,
                                   temperature=temperature) * len(batch))
            log.steps += 1
            step_snapshot()
        train_loss = float(np.sum(losses) / len(train))

        if prunes_after:
            round_index += 1
            target = schedule.target_after(round_index)
            if config.measure == "uniform":
                mask = uniform_mask(model, target, config.seed, config.granularity, config.floor)
            else:
                report = _score_round(model, config, train, scoring, log.sigma_history[-1], round_index, log.steps)
                mask = build_mask(report, target, mask, config.floor)
            apply_mask(model, mask)
            optimizer.apply_mask(model.mask)
            log.masks.append(mask)
            log.mask_snapshots.append({"round": round_index, "epoch": epoch, "target": target,
                                       "pruned_fraction": mask.pruned_fraction, "mask_id": _mask_id(mask)})
            logger.info(f"Round {round_index}: pruned {mask.pruned_count}/{mask.n_prunable} groups "
                        f"(target {target:.3f})")

        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            train_acc=evaluate_accuracy(model, train),
            eval_acc=evaluate_accuracy(model, evals),
            pruned_fraction=mask.pruned_fraction,
            pruned_param_fraction=mask.pruned_param_fraction(total_params),
            rate=rate,
            temperature=temperature,
        )
        log.append(record)
        snapshot()
        logger.info(f"Epoch {epoch}/{len(plan)}: loss {record.train_loss:.4f}, "
                    f"train acc {record.train_acc:.3f}, eval acc {record.eval_acc:.3f}")

    return log, mask
