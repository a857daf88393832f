import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RAMPCKPT"
CHECKPOINT_VERSION = 1

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class ShapeError(ValueError):
    """Raised when tensor or model dimensions do not line up."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class GraphError(RuntimeError):
    """Raised on misuse of the recorded computation graph."""


class NumericalError(FloatingPointError):
    """Raised when a forward pass or a training loss stops being finite."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded."""


class Tensor:
    """
    Dense f64 array that can take part in reverse-mode differentiation.

    Operations on tensors record a graph node only when at least one input
    requires a gradient; everything else runs as plain numpy.

    Args:
        data (array-like): Values, converted to a float64 array
        requires_grad (bool): Whether gradients should flow into this tensor
    """

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = tuple(parents)
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = backward_fn
        self._op = op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", expected=(), actual=self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # Arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """
        Back-propagate from this scalar through the recorded graph.

        Leaf tensors that require gradients accumulate into ``grad``. The graph
        is consumed afterwards; a second call raises GraphError until the
        forward pass is rebuilt.
        """
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar loss", expected=(), actual=self.shape)
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            if node.is_leaf:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            for parent, parent_grad in zip(node._parents, node._backward_fn(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._parents = ()
                node._backward_fn = None
                node._op = "consumed"
        # The loss itself is now a bare node; keep it flagged so backward() cannot rerun.
        self._consumed = True


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data, parents, backward_fn, op) -> Tensor:
    # Constants in, constant out: no graph bookkeeping.
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div",
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul shapes {a.shape} and {b.shape} do not chain",
            expected=(a.shape[-1] if a.ndim else None,), actual=b.shape,
        )
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    """Elementwise max(a, floor); clamped entries pass no gradient."""
    a = as_tensor(a)
    keep = a.data > floor
    return _record(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def log_softmax(logits: ArrayLike) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)
    return _record(out, (logits,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(logits: ArrayLike) -> Tensor:
    logits = as_tensor(logits)
    probs = softmax_array(logits.data)
    return _record(
        probs, (logits,),
        lambda g: (probs * (g - (g * probs).sum(axis=1, keepdims=True)),), "softmax",
    )


def softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def take_rows(a: ArrayLike, index: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward, "take_rows")


def pick(a: ArrayLike, columns: Sequence[int]) -> Tensor:
    """Select a[i, columns[i]] for every row i."""
    a = as_tensor(a)
    columns = np.asarray(columns, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, columns] = g
        return (full,)

    return _record(a.data[rows, columns], (a,), backward, "pick")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    """One affine layer ``h @ weight + bias`` followed by an activation."""

    name: str
    weight: Tensor
    bias: Tensor
    activation: str = "relu"

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


class MlpModel:
    """
    Multilayer perceptron classifier whose final layer emits logits.

    Args:
        layers (list[DenseLayer]): Ordered layers; dimensions must chain
    """

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ShapeError("an MLP needs at least one layer")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique, got {names}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer {prev.name} emits {prev.out_dim} features but {nxt.name} expects {nxt.in_dim}",
                    expected=prev.out_dim, actual=nxt.in_dim,
                )
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r} on {layer.name}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(
                    f"bias of {layer.name} has shape {layer.bias.shape}",
                    expected=(layer.out_dim,), actual=layer.bias.shape,
                )
        if layers[-1].activation != "identity":
            raise ValueError("the final layer must use the identity activation (logits)")
        self.layers: List[DenseLayer] = list(layers)
        # SGD momentum buffers, keyed like named_parameters().
        self.velocity: Dict[str, np.ndarray] = {}

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def architecture(self) -> Tuple[Tuple[str, int, int, str], ...]:
        return tuple((l.name, l.in_dim, l.out_dim, l.activation) for l in self.layers)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for layer in self.layers:
            params[f"{layer.name}.weight"] = layer.weight
            params[f"{layer.name}.bias"] = layer.bias
        return params

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.named_parameters().values()]))

    def zero_grad(self):
        for param in self.named_parameters().values():
            param.zero_grad()

    def clone(self) -> "MlpModel":
        """Deep copy, momentum buffers included."""
        copy = MlpModel([
            DenseLayer(
                l.name,
                Tensor(l.weight.data.copy(), requires_grad=l.weight.requires_grad),
                Tensor(l.bias.data.copy(), requires_grad=l.bias.requires_grad),
                l.activation,
            )
            for l in self.layers
        ])
        copy.velocity = {name: buf.copy() for name, buf in self.velocity.items()}
        return copy

    def detached(self) -> "MlpModel":
        """Read-only view sharing parameter storage; nothing records gradients."""
        return MlpModel([
            DenseLayer(l.name, l.weight.detach(), l.bias.detach(), l.activation) for l in self.layers
        ])

    def __repr__(self):
        dims = " -> ".join([str(self.input_dim)] + [str(l.out_dim) for l in self.layers])
        return f"MlpModel({dims})"


def init_mlp(layer_sizes: Sequence[int], seed: int = 0) -> MlpModel:
    """
    Build an MLP with seeded He-uniform weights and zero biases.

    Args:
        layer_sizes (list[int]): input_dim, hidden widths..., num_classes
        seed (int): Seed for the weight draw

    Returns:
        MlpModel: Freshly initialized model
    """
    if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
        raise ShapeError(f"layer sizes must be >= 2 positive ints, got {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    last = len(layer_sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes, layer_sizes[1:])):
        activation = "identity" if i == last else "relu"
        # He-uniform for relu layers, LeCun-uniform for the logit layer
        limit = np.sqrt((6.0 if activation == "relu" else 3.0) / fan_in)
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(
            f"fc{i + 1}",
            Tensor(weight, requires_grad=True),
            Tensor(np.zeros(fan_out), requires_grad=True),
            activation,
        ))
    return MlpModel(layers)


def forward(model: MlpModel, batch: ArrayLike) -> Tensor:
    """
    Compute logits for a batch.

    Args:
        model (MlpModel): Classifier
        batch (Tensor | ndarray): N x input_dim inputs

    Returns:
        Tensor: N x num_classes logits, graph-recorded when any input requires grad
    """
    h = as_tensor(batch)
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch of shape {h.shape} does not match input_dim={model.input_dim}",
            expected=("N", model.input_dim), actual=h.shape,
        )
    for layer in model.layers:
        h = add(matmul(h, layer.weight), layer.bias)
        if layer.activation == "relu":
            h = relu(h)
    if not np.all(np.isfinite(h.data)):
        raise NumericalError("forward pass produced non-finite logits")
    return h


def predict_logits(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    return forward(model.detached(), np.asarray(batch, dtype=np.float64)).data


def predict(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    return predict_logits(model, batch).argmax(axis=1)


def sgd_step(model: MlpModel, cfg: SgdConfig, learning_rate: Optional[float] = None) -> MlpModel:
    """
    Apply one momentum-SGD update in place and clear the consumed gradients.

    v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v

    Args:
        model (MlpModel): Model with populated gradients
        cfg (SgdConfig): Optimizer settings
        learning_rate (float, optional): Overrides cfg.learning_rate (schedules)

    Returns:
        MlpModel: The same model, updated
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    params = model.named_parameters()
    missing = [name for name, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise GraphError(f"sgd_step called without gradients for {', '.join(missing)}")
    for name, param in params.items():
        if not param.requires_grad:
            continue
        step = param.grad + cfg.weight_decay * param.data if cfg.weight_decay else param.grad
        velocity = model.velocity.get(name)
        velocity = step.copy() if velocity is None else cfg.momentum * velocity + step
        model.velocity[name] = velocity
        param.data = param.data - lr * velocity
        param.grad = None
    return model


# ---------------------------------------------------------------------------
# Model deltas
# ---------------------------------------------------------------------------

@dataclass
class ModelDelta:
    """
    Per-parameter flat update vectors keyed by parameter name.

    ``compensation`` holds the rounding residual of the subtraction that
    produced the delta so that apply_delta can reproduce the target model
    exactly; derived deltas carry none.
    """

    layers: "OrderedDict[str, np.ndarray]"
    compensation: Optional["OrderedDict[str, np.ndarray]"] = field(default=None, repr=False)

    def names(self) -> List[str]:
        return list(self.layers.keys())

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.layers.values()])

    def parameter_count(self) -> int:
        return int(np.sum([v.size for v in self.layers.values()]))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.layers.values())


def _check_same_architecture(a: MlpModel, b: MlpModel):
    if a.architecture != b.architecture:
        raise ShapeError(
            "models have different architectures", expected=b.architecture, actual=a.architecture,
        )


def model_delta(after: MlpModel, before: MlpModel) -> ModelDelta:
    """
    Parameter-space difference ``after - before``.

    Args:
        after (MlpModel): Model after the update
        before (MlpModel): Snapshot the update started from

    Returns:
        ModelDelta: Flat per-parameter differences
    """
    _check_same_architecture(after, before)
    layers, compensation = OrderedDict(), OrderedDict()
    before_params = before.named_parameters()
    for name, param in after.named_parameters().items():
        base = before_params[name].data.ravel()
        target = param.data.ravel()
        diff = target - base
        compensation[name] = target - (base + diff)
        layers[name] = diff
    return ModelDelta(layers, compensation)


def apply_delta(model: MlpModel, delta: ModelDelta, compensation_scale: float = 1.0) -> MlpModel:
    """
    Return a copy of ``model`` moved by ``delta``.

    Args:
        model (MlpModel): Starting point
        delta (ModelDelta): Update to add
        compensation_scale (float): Weight of the stored rounding residual

    Returns:
        MlpModel: Updated copy
    """
    params = model.named_parameters()
    if list(params.keys()) != delta.names():
        raise ShapeError("delta layers do not match model", expected=list(params.keys()), actual=delta.names())
    result = model.clone()
    for name, param in result.named_parameters().items():
        update = delta.layers[name]
        if update.size != param.size:
            raise ShapeError(f"delta for {name} has {update.size} entries", expected=param.size, actual=update.size)
        moved = param.data.ravel() + update
        if delta.compensation is not None and compensation_scale:
            moved = moved + compensation_scale * delta.compensation[name]
        param.data = moved.reshape(param.shape)
    return result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MlpModel, path: Union[str, Path]) -> Path:
    """
    Write a versioned little-endian checkpoint.

    Layout: magic, u32 version, u32 layer count, then per layer u16 name
    length, UTF-8 name, u32 rows, u32 cols, rows*cols f64 weights, cols f64 biases.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.layers))]
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<II", layer.in_dim, layer.out_dim))
        chunks.append(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug("Saved checkpoint %s (%d layers)", path, len(model.layers))
    return path


def load_checkpoint(path: Union[str, Path]) -> MlpModel:
    raw = Path(path).read_bytes()
    offset = 0

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {offset}, needed {count} more bytes")
        chunk = raw[offset:offset + count]
        offset += count
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    layers = []
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        weight = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        bias = np.frombuffer(take(8 * cols), dtype="<f8").astype(np.float64)
        activation = "identity" if i == count - 1 else "relu"
        layers.append(DenseLayer(name, Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True), activation))
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after the last layer")
    return MlpModel(layers)


def parameters_equal(a: MlpModel, b: MlpModel) -> bool:
    """Bit-exact parameter comparison."""
    if a.architecture != b.architecture:
        return False
    pb = b.named_parameters()
    return all(np.array_equal(p.data, pb[name].data) for name, p in a.named_parameters().items())


def flat_gradients(model: MlpModel) -> np.ndarray:
    grads = []
    for name, param in model.named_parameters().items():
        grads.append(np.zeros(param.size) if param.grad is None else param.grad.ravel())
    return np.concatenate(grads)
