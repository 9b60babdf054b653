"""
Dense 64-bit tensor engine with a single-use tape for reverse-mode gradients.

Only the primitives the attention-only transformer and the curvature
estimators need are provided. Hessian-vector products are central
differences of tape gradients.
"""
import logging
from collections import namedtuple
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Region = namedtuple("Region", ["start", "stop", "shape"])

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when a primitive receives operands with non-conforming shapes."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        shape_text = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shape_text}")


class NonFiniteError(FloatingPointError):
    """Raised when a derivative computation produces NaN or infinity."""

    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(f"{message} (first non-finite entry at index {index})")


class Tensor:
    """
    A dense float64 array that may be recorded on a tape.

    Tensors created without a tape are constants: operations on them are
    evaluated eagerly and nothing is recorded.
    """
    __slots__ = ("data", "tape", "_node")

    def __init__(self, data, tape: Optional["Tape"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self._node = -1

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        taped = "taped" if self.tape is not None else "constant"
        return f"Tensor(shape={self.shape}, {taped})"


class Tape:
    """
    Ordered record of primitive operations for one forward pass.

    Nodes are appended in evaluation order, so walking the list backwards is
    a reverse topological order. A tape is used by one thread only.
    """

    def __init__(self):
        self.nodes: List[Tuple[Tensor, Tuple[Tensor, ...], Optional[Callable]]] = []
        self.leaves: Dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def watch(self, name: str, data: np.ndarray) -> Tensor:
        """Register a named leaf whose gradient will be collected."""
        if name in self.leaves:
            raise ValueError(f"Leaf '{name}' is already registered on this tape")
        leaf = Tensor(data, tape=self)
        self._append(leaf, (), None)
        self.leaves[name] = leaf
        return leaf

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
        out.tape = self
        self._append(out, inputs, backward)
        return out

    def _append(self, out, inputs, backward):
        out._node = len(self.nodes)
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Run one reverse sweep from a scalar loss.

        Returns:
            Mapping from node index to the adjoint of that node's output.
        """
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: Dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for index in range(loss._node, -1, -1):
            adjoint = grads.get(index)
            if adjoint is None:
                continue
            _, inputs, backward_fn = self.nodes[index]
            if backward_fn is None:
                continue
            input_grads = backward_fn(adjoint)
            for node_input, grad in zip(inputs, input_grads):
                if grad is None or node_input.tape is not self:
                    continue
                if node_input._node in grads:
                    grads[node_input._node] = grads[node_input._node] + grad
                else:
                    grads[node_input._node] = grad
            if index != loss._node and index not in self._leaf_indices():
                # intermediate adjoints are no longer needed
                del grads[index]
        return grads

    def _leaf_indices(self):
        return {leaf._node for leaf in self.leaves.values()}

    def clear(self):
        """Drop every recorded node and leaf."""
        self.nodes.clear()
        self.leaves.clear()


class ParameterStore:
    """
    A flat float64 parameter vector with named contiguous regions.

    The regions partition the vector in insertion order. The flat buffer is
    read-only; use ``with_flat`` to derive a store holding new values.
    """

    def __init__(self, flat: np.ndarray, regions: Mapping[str, Region], config=None):
        flat = np.array(flat, dtype=np.float64, copy=True).reshape(-1)
        expected = 0
        for name, region in regions.items():
            if region.start != expected:
                raise ValueError(f"Region '{name}' starts at {region.start}, expected {expected}")
            if region.stop - region.start != int(np.prod(region.shape, dtype=np.int64)):
                raise ValueError(f"Region '{name}' size does not match its shape {region.shape}")
            expected = region.stop
        if expected != flat.size:
            raise ValueError(f"Regions cover {expected} entries but the vector has {flat.size}")
        flat.flags.writeable = False
        self.flat = flat
        self.regions: Dict[str, Region] = dict(regions)
        self.config = config

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, Sequence[int]], values: Optional[np.ndarray] = None,
                    config=None) -> "ParameterStore":
        regions = {}
        offset = 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape, dtype=np.int64))
            regions[name] = Region(offset, offset + size, shape)
            offset += size
        flat = np.zeros(offset) if values is None else values
        return cls(flat, regions, config=config)

    def __len__(self):
        return self.flat.size

    def __contains__(self, name):
        return name in self.regions

    def view(self, name: str) -> np.ndarray:
        region = self.regions[name]
        return self.flat[region.start:region.stop].reshape(region.shape)

    def with_flat(self, flat: np.ndarray) -> "ParameterStore":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.flat.shape:
            raise ShapeError("with_flat", self.flat.shape, flat.shape)
        return ParameterStore(flat, self.regions, config=self.config)

    def with_regions(self, updates: Mapping[str, np.ndarray]) -> "ParameterStore":
        """Copy of the store with some regions overwritten."""
        flat = self.flat.copy()
        for name, values in updates.items():
            region = self.regions[name]
            flat[region.start:region.stop] = np.asarray(values, dtype=np.float64).reshape(-1)
        return self.with_flat(flat)

    def indices(self, names: Iterable[str]) -> np.ndarray:
        """Flat indices covered by the named regions, sorted."""
        chunks = []
        for name in names:
            if name not in self.regions:
                raise KeyError(f"Unknown parameter region '{name}'")
            region = self.regions[name]
            chunks.append(np.arange(region.start, region.stop))
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(chunks))

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """
        Expose every region as a tensor.

        Args:
            tape: When given, regions become named leaves on the tape so that
                ``gradient`` can collect their adjoints.
        """
        if tape is None:
            return {name: Tensor(self.view(name)) for name in self.regions}
        return {name: tape.watch(name, self.view(name)) for name in self.regions}

    def region_table(self) -> List[dict]:
        return [
            {"name": name, "start": r.start, "stop": r.stop, "shape": list(r.shape)}
            for name, r in self.regions.items()
        ]


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ValueError("operands are recorded on different tapes")
        tape = t.tape
    return tape


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(*inputs)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def constant(data) -> Tensor:
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", a.shape)
    return _emit(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    """Row-max-stabilised softmax over the last axis."""
    if a.data.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape)
    y = _softmax(a.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape)
    y = _log_softmax(a.data)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (a,), backward)


def layer_norm(x: Tensor, affine: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalise over the last axis, then apply gain ``affine[0]`` and bias ``affine[1]``.

    A constant row normalises to zero because the variance is stabilised by ``eps``.
    """
    d = x.shape[-1]
    if affine.shape != (2, d):
        raise ShapeError("layer_norm", x.shape, affine.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    gain, bias = affine.data[0], affine.data[1]

    def backward(g):
        gxhat = g * gain
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        gaffine = np.stack([(g * xhat).sum(axis=lead), g.sum(axis=lead)])
        return gx, gaffine

    return _emit(xhat * gain + bias, (x, affine), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape)

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _emit(table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """
    Negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    Args:
        logits: Array of shape (..., vocab).
        targets: Integer array matching the leading shape of ``logits``.
        reduction: ``"mean"`` for a scalar, ``"none"`` for per-position losses.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    probs = np.exp(logp)
    onehot_scatter = (targets[..., None] == np.arange(logits.shape[-1])).astype(np.float64)

    if reduction == "none":
        def backward(g):
            return ((probs - onehot_scatter) * g[..., None],)

        return _emit(-picked, (logits,), backward)
    if reduction != "mean":
        raise ValueError(f"reduction must be 'mean' or 'none', got {reduction}")
    n = targets.size

    def backward(g):
        return ((probs - onehot_scatter) * (float(g) / n),)

    return _emit(np.array(-picked.mean()), (logits,), backward)


def kl_divergence(reference_probs: np.ndarray, logits: Tensor, reduction: str = "mean") -> Tensor:
    """
    D_KL(reference || softmax(logits)) per position, optionally averaged.

    ``reference_probs`` is treated as a constant; zero-probability entries
    contribute nothing.
    """
    p = np.asarray(reference_probs, dtype=np.float64)
    if p.shape != logits.shape:
        raise ShapeError("kl_divergence", p.shape, logits.shape)
    logq = _log_softmax(logits.data)
    q = np.exp(logq)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - logq), 0.0)
    per_position = terms.sum(axis=-1)
    mass = p.sum(axis=-1, keepdims=True)

    if reduction == "none":
        def backward(g):
            return ((q * mass - p) * g[..., None],)

        return _emit(per_position, (logits,), backward)
    n = per_position.size

    def backward(g):
        return ((q * mass - p) * (float(g) / n),)

    return _emit(np.array(per_position.mean()), (logits,), backward)


def gradient(loss: Tensor, wrt: ParameterStore) -> np.ndarray:
    """
    Gradient of a scalar loss with respect to every entry of ``wrt``.

    Regions that were never bound to the loss's tape get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("gradient", loss.shape)
    flat = np.zeros(len(wrt))
    tape = loss.tape
    if tape is None:
        return flat
    grads = tape.backward(loss)
    for name, leaf in tape.leaves.items():
        region = wrt.regions.get(name)
        if region is None or leaf._node not in grads:
            continue
        flat[region.start:region.stop] = grads[leaf._node].reshape(-1)
    return flat


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(loss_fn: LossFn, params: ParameterStore) -> Tuple[float, np.ndarray]:
    """Evaluate ``loss_fn`` on a fresh tape and return its value and flat gradient."""
    tape = Tape()
    loss = loss_fn(params.bind(tape))
    value = loss.item()
    grad = gradient(loss, params)
    tape.clear()
    return value, grad


def hvp(loss_fn: LossFn, w: ParameterStore, v: np.ndarray) -> np.ndarray:
    """
    Hessian-vector product by central differences of gradients.

    Uses the step ``h = 1e-4 / max(1, ||v||)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.flat.shape:
        raise ShapeError("hvp", w.flat.shape, v.shape)
    h = 1e-4 / max(1.0, float(np.linalg.norm(v)))
    _, g_plus = value_and_grad(loss_fn, w.with_flat(w.flat + h * v))
    _, g_minus = value_and_grad(loss_fn, w.with_flat(w.flat - h * v))
    result = (g_plus - g_minus) / (2.0 * h)
    bad = np.flatnonzero(~np.isfinite(result))
    if bad.size:
        raise NonFiniteError("hvp produced a non-finite value", int(bad[0]))
    return result
