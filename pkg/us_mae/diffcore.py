"""
Minimal dense-tensor computation with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 unless a wider working precision is
selected with `precision`). Every operation records its parents and a
closure that pushes the upstream gradient back to them; `Tensor.backward`
walks the graph in reverse topological order. Operations accept leading
batch axes so a whole mini-batch flows through one graph.
"""

import contextlib
import logging
import math
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError, UsageError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
GRAD_CHECK_MIN_ELEMENTS = 256

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_working_dtype = np.dtype(np.float32)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _working_dtype
    previous = _working_dtype
    _working_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _working_dtype = previous


def working_dtype() -> np.dtype:
    return _working_dtype


class Tensor:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str = "",
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        array = np.asarray(data, dtype=_working_dtype)
        if not np.isfinite(array).all():
            label = name or "<intermediate>"
            raise NonFiniteError(f"Non-finite values in tensor {label} of shape {array.shape}")
        self.data = array
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            _not_scalar(self.shape)
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _not_scalar(shape: Tuple[int, ...]):
    raise ShapeError(f"Expected a scalar tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list:
    # Iterative post-order DFS; parent tuples keep the order fixed run to run
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ==================== Elementwise ====================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-grad, b.shape))

    return Tensor(a.data - b.data, _parents=(a, b), _backward=backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(grad):
        x._accumulate(grad * factor)

    return Tensor(x.data * factor, _parents=(x,), _backward=backward)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(grad):
        x._accumulate(grad * sign)

    return Tensor(np.abs(x.data), _parents=(x,), _backward=backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def backward(grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(grad * (cdf + x.data * pdf))

    return Tensor(x.data * cdf, _parents=(x,), _backward=backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """
    Inverted dropout: zero each element with probability `rate` and scale
    survivors by 1/(1-rate). Identity at inference or when rate is 0.
    """
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("Dropout in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) / np.asarray(1.0 - rate, dtype=x.data.dtype)

    def backward(grad):
        x._accumulate(grad * mask)

    return Tensor(x.data * mask, _parents=(x,), _backward=backward)


# ==================== Linear algebra and shape ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `b` is either a plain matrix shared by every leading batch index of `a`,
    or carries exactly the same leading batch axes as `a`.
    """
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2])
    ):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(grad):
        if a.requires_grad:
            a._accumulate(np.matmul(grad, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                inner, cols = b.shape
                b._accumulate(a.data.reshape(-1, inner).T @ grad.reshape(-1, cols))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), grad))

    return Tensor(np.matmul(a.data, b.data), _parents=(a, b), _backward=backward)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    def backward(grad):
        x._accumulate(np.swapaxes(grad, axis1, axis2))

    return Tensor(np.swapaxes(x.data, axis1, axis2), _parents=(x,), _backward=backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(grad):
        x._accumulate(grad.reshape(x.shape))

    return Tensor(out, _parents=(x,), _backward=backward)


def total(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Sum over one axis or over everything."""

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        x._accumulate(np.broadcast_to(grad, x.shape))

    return Tensor(x.data.sum(axis=axis, keepdims=keepdims), _parents=(x,), _backward=backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(total(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ==================== Row selection ====================

def _check_indices(op: str, indices: np.ndarray, extent: int) -> np.ndarray:
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError(f"{op}: indices must be integers, got {indices.dtype}")
    if indices.size and (indices.min() < 0 or indices.max() >= extent):
        raise ShapeError(f"{op}: index out of range for extent {extent}")
    return indices


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Look up rows of a 2-D table: out[..., :] = table[indices[...], :]."""
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    indices = _check_indices("take_rows", indices, table.shape[0])

    def backward(grad):
        table_grad = np.zeros_like(table.data)
        np.add.at(table_grad, indices, grad)
        table._accumulate(table_grad)

    return Tensor(table.data[indices], _parents=(table,), _backward=backward)


def _row_batches(op: str, x_shape: Tuple[int, ...], indices: np.ndarray, extent: int):
    lead = x_shape[:-2]
    if indices.shape[:-1] != lead:
        raise ShapeError(f"{op}: index batch {indices.shape} does not match {x_shape}")
    indices = _check_indices(op, indices, extent)
    flat = indices.reshape(-1, indices.shape[-1])
    rows = np.arange(flat.shape[0])[:, None]
    return lead, flat, rows


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Per-example row selection: x (..., N, d), indices (..., k) -> (..., k, d)."""
    indices = np.asarray(indices)
    lead, flat, rows = _row_batches("gather_rows", x.shape, indices, x.shape[-2])
    width = x.shape[-1]
    batched = x.data.reshape((-1,) + x.shape[-2:])
    out = batched[rows, flat].reshape(lead + (flat.shape[1], width))

    def backward(grad):
        x_grad = np.zeros_like(batched)
        np.add.at(x_grad, (rows, flat), grad.reshape(-1, flat.shape[1], width))
        x._accumulate(x_grad.reshape(x.shape))

    return Tensor(out, _parents=(x,), _backward=backward)


def scatter_rows(values: Tensor, indices: np.ndarray, length: int) -> Tensor:
    """
    Place rows into a zero sequence: values (..., k, d), indices (..., k)
    -> (..., length, d). Rows not named by `indices` stay zero.
    """
    indices = np.asarray(indices)
    lead, flat, rows = _row_batches("scatter_rows", values.shape, indices, length)
    if flat.shape[1] != values.shape[-2]:
        raise ShapeError(f"scatter_rows: {indices.shape} indices for {values.shape} values")
    width = values.shape[-1]
    out = np.zeros((flat.shape[0], length, width), dtype=values.data.dtype)
    np.add.at(out, (rows, flat), values.data.reshape(-1, flat.shape[1], width))

    def backward(grad):
        picked = grad.reshape(-1, length, width)[rows, flat]
        values._accumulate(picked.reshape(values.shape))

    return Tensor(out.reshape(lead + (length, width)), _parents=(values,), _backward=backward)


# ==================== Normalization and probabilities ====================

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max-subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(grad):
        inner = (grad * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (grad - inner))

    return Tensor(out, _parents=(x,), _backward=backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gamma/beta."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last axis of {x.shape}"
        )
    if eps <= 0:
        raise UsageError(f"layer_norm eps must be > 0, got {eps}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def backward(grad):
        if gamma.requires_grad:
            gamma._accumulate((grad * normed).reshape(-1, width).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(grad.reshape(-1, width).sum(axis=0))
        if x.requires_grad:
            d_normed = grad * gamma.data
            x._accumulate(
                inv_std
                / width
                * (
                    width * d_normed
                    - d_normed.sum(axis=-1, keepdims=True)
                    - normed * (d_normed * normed).sum(axis=-1, keepdims=True)
                )
            )

    out = normed * gamma.data + beta.data
    return Tensor(out, _parents=(x, gamma, beta), _backward=backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    labels = _check_indices("cross_entropy", labels, logits.shape[1])
    rows = np.arange(labels.shape[0])
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[rows, labels].mean()

    def backward(grad):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        logits._accumulate(grad * probs / labels.shape[0])

    return Tensor(loss, _parents=(logits,), _backward=backward)


# ==================== Parameters ====================

class ParamSet:
    """
    Insertion-ordered named trainable tensors.

    Each entry is a Tensor with requires_grad set and a gradient slot of
    the same shape. Iteration order fixes gradient accumulation, clipping,
    optimizer and checkpoint order.
    """

    def __init__(self, arrays: Optional[Mapping[str, ArrayLike]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value: ArrayLike, copy: bool = True) -> Tensor:
        """Register `value` under `name`; with copy=False a matching-dtype array is shared."""
        if name in self._tensors:
            raise UsageError(f"Duplicate parameter name {name!r}")
        data = value.data if isinstance(value, Tensor) else value
        array = np.array(data, dtype=_working_dtype) if copy else np.asarray(data, dtype=_working_dtype)
        tensor = Tensor(array, requires_grad=True, name=name)
        tensor.zero_grad()
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise UsageError(f"Unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: t.grad for name, t in self._tensors.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({name: t.data for name, t in self._tensors.items()})

    def subset(self, prefix: str) -> "ParamSet":
        """
        Entries whose names start with `prefix`. Arrays are shared with this
        set; gradients are not. Call copy() for independent weights.
        """
        view = ParamSet()
        for name, tensor in self._tensors.items():
            if name.startswith(prefix):
                view.add(name, tensor.data, copy=False)
        return view


# ==================== Gradient check ====================

def _scalar_value(loss: Tensor) -> float:
    if loss.size != 1:
        _not_scalar(loss.shape)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"Non-finite loss {value} during gradient check")
    return value


def grad_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-3,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """
    Compare reverse-mode gradients with central finite differences.

    Runs in float64 on a copy of `params`. `f` must be deterministic given
    the parameters (dropout disabled).

    Args:
        f: Maps a ParamSet to a scalar loss Tensor
        params: Parameters to differentiate with respect to
        eps: Finite-difference step
        max_elements: If set, check a random subsample of this many elements (>= 256)
        rng: Generator for the subsample (default seed 0)
        floor: Lower bound of the relative-error denominator

    Returns:
        Worst relative error |a - n| / max(|a|, |n|, floor)
    """
    if max_elements is not None and max_elements < GRAD_CHECK_MIN_ELEMENTS:
        raise UsageError(
            f"Gradient check subsample must cover at least {GRAD_CHECK_MIN_ELEMENTS} elements"
        )

    with precision(np.float64):
        work = ParamSet({name: t.data for name, t in params.items()})
        loss = f(work)
        _scalar_value(loss)
        work.zero_grad()
        loss.backward()
        analytic = {name: t.grad.reshape(-1).copy() for name, t in work.items()}

        coords = [(name, i) for name, t in work.items() for i in range(t.size)]
        if max_elements is not None and len(coords) > max_elements:
            rng = rng or np.random.default_rng(0)
            picked = np.sort(rng.choice(len(coords), size=max_elements, replace=False))
            coords = [coords[i] for i in picked]

        worst = 0.0
        for name, flat in coords:
            view = work[name].data.reshape(-1)
            original = view[flat]
            view[flat] = original + eps
            plus = _scalar_value(f(work))
            view[flat] = original - eps
            minus = _scalar_value(f(work))
            view[flat] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = analytic[name][flat]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)

    logger.debug("grad_check over %d elements: worst relative error %.3e", len(coords), worst)
    return worst
