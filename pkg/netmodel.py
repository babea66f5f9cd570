"""
Desk-scale models for pruneflow.
Dense and convolutional networks with per-filter scale parameters (σ),
the quadratic model L = ½θᵀAθ, Gaussian-blob datasets and checkpoints.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from diffcore import (
    ACTIVATIONS,
    Graph,
    GradientVector,
    Var,
    broadcast_to,
    const,
    conv2d,
    matmul,
    mean_pool,
    mul,
    reshape,
    scale,
    softmax_cross_entropy,
    sum_all,
)
from utils import GroupError, ShapeError

logger = logging.getLogger(__name__)

STRUCTURED = "structured"
UNSTRUCTURED = "unstructured"
GRANULARITIES = (STRUCTURED, UNSTRUCTURED)

CHECKPOINT_FORMAT = "pruneflow-checkpoint"


# =============================================================================
# DATA
# =============================================================================

@dataclass
class Dataset:
    """A batch of flat inputs with integer labels."""
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    seed: int = 0
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"Dataset: {self.inputs.shape} inputs for {self.labels.shape} labels")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.classes, self.seed,
                       self.indices[indices])

    def split(self, eval_fraction: float = 0.2, seed: Optional[int] = None) -> tuple["Dataset", "Dataset"]:
        """Deterministic train/eval split by seed."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        order = rng.permutation(len(self))
        n_eval = int(round(eval_fraction * len(self)))
        return self.subset(np.sort(order[n_eval:])), self.subset(np.sort(order[:n_eval]))

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> list["Dataset"]:
        """
        Partition into minibatches.

        Args:
            batch_size: Rows per batch (the last batch may be smaller)
            rng: If given, rows are shuffled first (sampling without replacement)

        Returns:
            list: Minibatches covering every row exactly once
        """
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        return [self.subset(order[i:i + batch_size]) for i in range(0, len(self), batch_size)]

    def scoring_batch(self, per_class: int = 2, seed: int = 0) -> "Dataset":
        """Fixed class-balanced subset used for Hessian-gradient scoring."""
        rng = np.random.default_rng(seed)
        chosen = []
        for c in range(self.classes):
            members = np.flatnonzero(self.labels == c)
            if members.size == 0:
                continue
            take = min(per_class, members.size)
            chosen.append(np.sort(rng.choice(members, size=take, replace=False)))
        return self.subset(np.concatenate(chosen))

    def to_bytes(self) -> bytes:
        return self.inputs.astype("<f8").tobytes() + self.labels.astype("<i8").tobytes()


def make_blobs(classes: int, dims: int, samples_per_class: int, spread: float, seed: int) -> Dataset:
    """
    Gaussian clusters around deterministic centers.

    Class c is centered at (1 + c // dims)·e_(c mod dims); samples get
    isotropic noise with standard deviation `spread` and are shuffled by seed.

    Raises:
        ValueError: On fewer than 2 classes or nonpositive counts
    """
    if classes < 2:
        raise ValueError(f"make_blobs needs at least 2 classes, got {classes}")
    if dims <= 0 or samples_per_class <= 0:
        raise ValueError(f"make_blobs needs positive dims and samples, got {dims}, {samples_per_class}")
    if spread < 0:
        raise ValueError(f"spread must be nonnegative, got {spread}")

    centers = np.zeros((classes, dims))
    for c in range(classes):
        centers[c, c % dims] = 1.0 + c // dims

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), samples_per_class)
    noise = rng.normal(size=(labels.size, dims))
    inputs = centers[labels] + spread * noise
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], classes, seed)


# =============================================================================
# LAYERS AND GROUPS
# =============================================================================

@dataclass
class Layer:
    name: str
    kind: str
    filters: int
    activation: str = "linear"
    kernel: int = 0
    prunable: bool = True

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "filters": self.filters,
            "activation": self.activation,
            "kernel": self.kernel,
            "prunable": self.prunable,
        }


@dataclass
class PruneGroup:
    """A set of parameters removed together."""
    layer: int
    group: int
    indices: dict = field(default_factory=dict)
    prunable: bool = True

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer, self.group)

    @property
    def size(self) -> int:
        return sum(idx.size for idx in self.indices.values())


class Model:
    """
    Shared parameter, group and snapshot handling.

    Subclasses provide `layers`, `param_names(layer_index)`, the grouping
    rule and `loss_graph`.
    """

    layers: list

    def __init__(self, params: GradientVector):
        self.params = params
        self.init_snapshot = params.copy()
        self.mask: Optional[GradientVector] = None
        self._groups: dict[str, list] = {}

    # --- parameters ---

    def param_names(self, layer_index: int) -> list[str]:
        raise NotImplementedError

    def layer_index_of(self, param_name: str) -> int:
        for i in range(len(self.layers)):
            if param_name in self.param_names(i):
                return i
        raise KeyError(param_name)

    def set_params(self, params: GradientVector):
        self.params.check_layout(params, "set_params")
        self.params = params.copy()

    def sigma(self) -> dict[str, np.ndarray]:
        """Per-filter scale parameters by layer name (empty if the model has none)."""
        return {}

    def scale_names(self) -> set[str]:
        """Parameters initialized at 1 rather than around 0."""
        return set()

    # --- groups ---

    def groups(self, granularity: str = STRUCTURED) -> list[PruneGroup]:
        if granularity not in GRANULARITIES:
            raise ValueError(f"Unknown granularity '{granularity}'")
        if granularity not in self._groups:
            self._groups[granularity] = self._build_groups(granularity)
        return self._groups[granularity]

    def _build_groups(self, granularity: str) -> list[PruneGroup]:
        raise NotImplementedError

    def group(self, key: tuple, granularity: str = STRUCTURED) -> PruneGroup:
        layer, index = key
        for g in self.groups(granularity):
            if g.layer == layer and g.group == index:
                return g
        raise GroupError(f"Unknown prune group {key} ({granularity})")

    def filter_groups(self) -> list[PruneGroup]:
        """Groups in structured mode, whatever granularity is being pruned."""
        return self.groups(STRUCTURED)

    # --- losses ---

    def loss_graph(self, data: Optional[Dataset], temperature: float = 1.0) -> Graph:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


def _singleton_groups(model: Model, names_by_layer) -> list[PruneGroup]:
    groups = []
    for i, layer in enumerate(model.layers):
        count = 0
        for name in names_by_layer(i):
            for flat in range(model.params[name].size):
                groups.append(PruneGroup(i, count, {name: np.array([flat], dtype=np.int64)}, layer.prunable))
                count += 1
    return groups


# =============================================================================
# NETWORKS
# =============================================================================

class Network(Model):
    """
    Ordered dense/conv layers. Each layer computes act(σ ⊙ (x·W) + b).

    Activations are channel-last: dense (N, F), conv (N, H, W, F). A conv
    layer followed by a dense layer is joined by a global mean pool.
    """

    def __init__(self, layers: list, params: GradientVector, input_shape: tuple, classes: int):
        super().__init__(params)
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.classes = classes

    def param_names(self, layer_index: int) -> list[str]:
        name = self.layers[layer_index].name
        return [f"{name}.weight", f"{name}.bias", f"{name}.sigma"]

    def sigma(self) -> dict[str, np.ndarray]:
        return {layer.name: self.params[f"{layer.name}.sigma"].copy() for layer in self.layers}

    def scale_names(self) -> set[str]:
        return {f"{layer.name}.sigma" for layer in self.layers}

    def _build_groups(self, granularity: str) -> list[PruneGroup]:
        if granularity == UNSTRUCTURED:
            return _singleton_groups(self, lambda i: self.param_names(i)[:1])

        groups = []
        for i, layer in enumerate(self.layers):
            weight, bias, sigma = self.param_names(i)
            positions = np.arange(self.params[weight].size).reshape(self.params[weight].shape)
            for j in range(layer.filters):
                groups.append(PruneGroup(i, j, {
                    weight: positions[..., j].ravel(),
                    bias: np.array([j], dtype=np.int64),
                    sigma: np.array([j], dtype=np.int64),
                }, layer.prunable))
        return groups

    def forward(self, leaves: dict, inputs: np.ndarray) -> Var:
        """Logits for a batch of flat inputs."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != int(np.prod(self.input_shape)):
            raise ShapeError(f"Network expects inputs of width {int(np.prod(self.input_shape))}, got {inputs.shape}")
        x = const(inputs.reshape((inputs.shape[0],) + self.input_shape))

        for i, layer in enumerate(self.layers):
            weight, bias, sigma = (leaves[n] for n in self.param_names(i))
            if layer.kind == "conv":
                z = conv2d(x, weight)
            else:
                if len(x.shape) == 4:
                    x = mean_pool(x)
                z = matmul(x, weight)
            z = mul(z, broadcast_to(sigma, z.shape)) + broadcast_to(bias, z.shape)
            x = ACTIVATIONS[layer.activation](z)
        return x

    def logits(self, inputs: np.ndarray, params: Optional[GradientVector] = None) -> np.ndarray:
        params = self.params if params is None else params
        leaves = {name: const(value) for name, value in params.items()}
        return self.forward(leaves, inputs).value

    def accuracy(self, data: Dataset) -> float:
        if len(data) == 0:
            return 0.0
        predictions = np.argmax(self.logits(data.inputs), axis=1)
        return float(np.mean(predictions == data.labels))

    def loss_graph(self, data: Optional[Dataset], temperature: float = 1.0) -> Graph:
        if data is None or len(data) == 0:
            raise ShapeError("Network loss needs a nonempty batch")

        def build(leaves):
            return softmax_cross_entropy(self.forward(leaves, data.inputs), data.labels, temperature)

        return Graph(build, self.params.shapes)

    def spec(self) -> dict:
        return {
            "type": "network",
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "classes": self.classes,
        }


_GAINS = {"relu": np.sqrt(2.0), "tanh": 1.0, "linear": 1.0}


def _init_layer(rng: np.random.Generator, shape: tuple, fan_in: int, activation: str,
                init_scale: float) -> np.ndarray:
    std = _GAINS[activation] / np.sqrt(fan_in)
    return init_scale * std * rng.normal(size=shape)


def _check_activation(activation: str):
    if activation not in ACTIVATIONS:
        raise ValueError(f"Unknown activation '{activation}'")


def build_mlp(widths, activation: str = "tanh", seed: int = 0, init_scale: float = 1.0,
              prune_head: bool = False, head_scale: Optional[float] = None) -> Network:
    """
    Fully connected network.

    Args:
        widths: (input, hidden..., classes); at least two entries
        activation: Hidden activation ('tanh' | 'relu')
        seed: Initialization seed
        init_scale: Multiplier on the fan-in standard deviation
        prune_head: Whether the classifier layer's units may be pruned
        head_scale: Multiplier for the classifier layer (default: init_scale)

    Returns:
        Network: Weights zero-centered with fan-in variance, biases 0, σ 1
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError(f"build_mlp needs at least 2 widths, got {widths}")
    if any(w <= 0 for w in widths):
        raise ValueError(f"Layer widths must be positive, got {widths}")
    _check_activation(activation)

    rng = np.random.default_rng(seed)
    layers, arrays = [], {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        act = "linear" if last else activation
        layer = Layer(f"fc{i + 1}", "dense", fan_out, act, prunable=prune_head or not last)
        layers.append(layer)
        multiplier = init_scale if not last or head_scale is None else head_scale
        arrays[f"{layer.name}.weight"] = _init_layer(rng, (fan_in, fan_out), fan_in, activation, multiplier)
        arrays[f"{layer.name}.bias"] = np.zeros(fan_out)
        arrays[f"{layer.name}.sigma"] = np.ones(fan_out)

    logger.debug(f"Built MLP {widths} ({activation}, seed {seed})")
    return Network(layers, GradientVector(arrays), (widths[0],), widths[-1])


def build_cnn(channels, kernel: int = 3, classes: int = 3, seed: int = 0,
              input_shape: tuple = (4, 4, 1), activation: str = "relu",
              init_scale: float = 1.0, prune_head: bool = False, head_scale: Optional[float] = None) -> Network:
    """
    Plain CNN: same-padded conv layers, global mean pool, dense head.

    Args:
        channels: Output channels per conv layer (filters)
        kernel: Odd kernel size
        classes: Output classes
        seed: Initialization seed
        input_shape: (H, W, C) of each input
        activation: Conv activation
        init_scale: Multiplier on the fan-in standard deviation
        prune_head: Whether the classifier layer's units may be pruned
        head_scale: Multiplier for the classifier layer (default: init_scale)
    """
    channels = [int(c) for c in channels]
    if not channels:
        raise ValueError("build_cnn needs at least one conv layer")
    if any(c <= 0 for c in channels) or classes <= 0:
        raise ValueError(f"Channel counts and classes must be positive, got {channels}, {classes}")
    if kernel <= 0 or kernel % 2 == 0:
        raise ValueError(f"Kernel must be a positive odd size, got {kernel}")
    if len(input_shape) != 3:
        raise ValueError(f"input_shape must be (H, W, C), got {input_shape}")
    _check_activation(activation)

    rng = np.random.default_rng(seed)
    layers, arrays = [], {}
    in_channels = int(input_shape[2])
    for i, filters in enumerate(channels):
        layer = Layer(f"conv{i + 1}", "conv", filters, activation, kernel=kernel)
        layers.append(layer)
        fan_in = kernel * kernel * in_channels
        arrays[f"{layer.name}.weight"] = _init_layer(
            rng, (kernel, kernel, in_channels, filters), fan_in, activation, init_scale)
        arrays[f"{layer.name}.bias"] = np.zeros(filters)
        arrays[f"{layer.name}.sigma"] = np.ones(filters)
        in_channels = filters

    head = Layer("head", "dense", classes, "linear", prunable=prune_head)
    layers.append(head)
    arrays["head.weight"] = _init_layer(rng, (in_channels, classes), in_channels, "linear",
                                       init_scale if head_scale is None else head_scale)
    arrays["head.bias"] = np.zeros(classes)
    arrays["head.sigma"] = np.ones(classes)

    logger.debug(f"Built CNN {channels} k={kernel} -> {classes} (seed {seed})")
    return Network(layers, GradientVector(arrays), tuple(input_shape), classes)


# =============================================================================
# QUADRATIC MODEL
# =============================================================================

class QuadraticModel(Model):
    """L(θ) = ½θᵀAθ; data and temperature are ignored."""

    def __init__(self, A, theta0, grouping: Optional[list] = None):
        A = np.asarray(A, dtype=np.float64)
        theta0 = np.asarray(theta0, dtype=np.float64)
        if A.ndim != 2 or A.shape != (theta0.size, theta0.size):
            raise ShapeError(f"Quadratic model needs a {theta0.size}x{theta0.size} matrix, got {A.shape}")
        super().__init__(GradientVector({"theta": theta0}))
        self.A = A
        self.grouping = [list(map(int, g)) for g in grouping] if grouping else [[i] for i in range(theta0.size)]
        self.layers = [Layer("theta", "quadratic", len(self.grouping))]
        covered = sorted(i for g in self.grouping for i in g)
        if covered != list(range(theta0.size)):
            raise ShapeError(f"Quadratic grouping must partition 0..{theta0.size - 1}, got {self.grouping}")

    def param_names(self, layer_index: int) -> list[str]:
        return ["theta"]

    def _build_groups(self, granularity: str) -> list[PruneGroup]:
        if granularity == UNSTRUCTURED:
            return _singleton_groups(self, self.param_names)
        return [
            PruneGroup(0, j, {"theta": np.array(members, dtype=np.int64)})
            for j, members in enumerate(self.grouping)
        ]

    def loss_graph(self, data: Optional[Dataset] = None, temperature: float = 1.0) -> Graph:
        A = self.A

        def build(leaves):
            theta = leaves["theta"]
            column = theta.value.shape[0]
            t = reshape(theta, (column, 1))
            quad = matmul(reshape(t, (1, column)), matmul(const(A), t))
            return scale(sum_all(quad), 0.5)

        return Graph(build, self.params.shapes)

    def spec(self) -> dict:
        return {"type": "quadratic", "A": self.A.tolist(), "grouping": self.grouping}


def build_quadratic(A, theta0, grouping: Optional[list] = None) -> QuadraticModel:
    return QuadraticModel(A, theta0, grouping)


# =============================================================================
# MEASUREMENTS
# =============================================================================

def group_sums(model: Model, values: GradientVector, groups: list) -> np.ndarray:
    """Σ over each group's parameters of an elementwise quantity."""
    flat = {name: array.ravel() for name, array in values.items()}
    out = np.zeros(len(groups))
    for k, g in enumerate(groups):
        out[k] = sum(float(flat[name][idx].sum()) for name, idx in g.indices.items())
    return out


def distance_from_init(model: Model, group: Union[PruneGroup, tuple],
                       granularity: str = STRUCTURED) -> float:
    """
    ‖θ_p(T) − θ_p(0)‖² for one group.

    Raises:
        GroupError: If the group key is unknown
    """
    if not isinstance(group, PruneGroup):
        group = model.group(tuple(group), granularity)
    total = 0.0
    for name, idx in group.indices.items():
        if name not in model.params:
            raise GroupError(f"Group {group.key} refers to unknown parameter {name}")
        delta = model.params[name].ravel()[idx] - model.init_snapshot[name].ravel()[idx]
        total += float(np.dot(delta, delta))
    return total


def layer_grad_norms(model: Model, gradient: GradientVector) -> dict[str, float]:
    """Per-layer ‖gₙ‖²; the values sum to ‖g‖²."""
    norms = {}
    for i, layer in enumerate(model.layers):
        flat = np.concatenate([gradient[name].ravel() for name in model.param_names(i)])
        norms[layer.name] = float(np.dot(flat, flat))
    return norms


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model: Model) -> bytes:
    """
    JSON header line followed by the little-endian float64 payload.

    Sections: current parameters, init snapshot and (if set) the parameter mask.
    """
    sections = [("params", model.params), ("init", model.init_snapshot)]
    if model.mask is not None:
        sections.append(("mask", model.mask))

    tensors, chunks, offset = [], [], 0
    for section, vector in sections:
        for name, array in vector.items():
            data = np.ascontiguousarray(array, dtype="<f8").tobytes()
            tensors.append({"section": section, "name": name, "shape": list(array.shape),
                            "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)

    header = {"format": CHECKPOINT_FORMAT, "version": 1, "dtype": "<f8",
              "model": model.spec(), "tensors": tensors}
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)


def load_checkpoint(payload: bytes) -> Model:
    """
    Rebuild a model from `save_checkpoint` output.

    Raises:
        ShapeError: If the header is not a pruneflow checkpoint
    """
    newline = payload.index(b"\n")
    header = json.loads(payload[:newline].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ShapeError("Not a pruneflow checkpoint")
    body = payload[newline + 1:]

    sections: dict[str, dict] = {}
    for t in header["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        array = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
        sections.setdefault(t["section"], {})[t["name"]] = array

    spec = header["model"]
    if spec["type"] == "quadratic":
        model = QuadraticModel(spec["A"], sections["init"]["theta"], spec["grouping"])
    else:
        layers = [Layer(**layer) for layer in spec["layers"]]
        model = Network(layers, GradientVector(sections["init"]), tuple(spec["input_shape"]), spec["classes"])
    model.init_snapshot = GradientVector(sections["init"])
    model.params = GradientVector(sections["params"])
    if "mask" in sections:
        model.mask = GradientVector(sections["mask"])
    return model
