"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and an exact backward closure on the
produced tensor; `backward` on a scalar walks the graph once in reverse
topological order, accumulating gradients additively across fan-out. Tensors
are float64 unless a float32 mode is selected (training speed); gradient
checks always run in float64.

Also home to the Adam update rule and the binary checkpoint format (magic
``WFT1``: u32 tensor count, then per tensor u16 name length + name bytes,
u8 ndims, u32 dims, float32 little-endian row-major data).
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import NumericalError, ShapeError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Switch new-tensor precision; float64 (default) or float32."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ShapeError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def _check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """n-d array that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        _check_finite(self.data, _op)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        _check_finite(data, op)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._op = op
        out._consumed = False
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` by summing the broadcast leading axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_trailing_broadcast(a: Tensor, b: Tensor, op: str):
    # Broadcasting is restricted to leading axes: the shorter shape must
    # match the trailing axes of the longer one (size-1 axes also allowed).
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    offset = len(long_) - len(short)
    for i, s in enumerate(short):
        if s != long_[offset + i] and s != 1 and long_[offset + i] != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} are not leading-axis broadcastable")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    _check_trailing_broadcast(a, b, "add")
    data = a.data + b.data

    def backward_fn(grad, grads):
        grads(a, _unbroadcast(grad, a.shape))
        grads(b, _unbroadcast(grad, b.shape))

    return Tensor._result(data, (a, b), backward_fn, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    _check_trailing_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward_fn(grad, grads):
        grads(a, _unbroadcast(grad * b.data, a.shape))
        grads(b, _unbroadcast(grad * a.data, b.shape))

    return Tensor._result(data, (a, b), backward_fn, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(grad, grads):
        grads(a, grad @ b.data.T)
        grads(b, a.data.T @ grad)

    return Tensor._result(data, (a, b), backward_fn, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 axes, got shape {a.shape}")
    data = np.swapaxes(a.data, -1, -2)

    def backward_fn(grad, grads):
        grads(a, np.swapaxes(grad, -1, -2))

    return Tensor._result(data, (a,), backward_fn, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward_fn(grad, grads):
        grads(a, grad.reshape(a.shape))

    return Tensor._result(data, (a,), backward_fn, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward_fn(grad, grads):
        start = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(start, start + size)
            grads(t, grad[tuple(index)])
            start += size

    return Tensor._result(data, tuple(tensors), backward_fn, "concat")


def tensor_slice(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]

    def backward_fn(grad, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, key, grad)
        grads(a, full)

    return Tensor._result(np.ascontiguousarray(data), (a,), backward_fn, "slice")


def embedding_row_select(table, indices) -> Tensor:
    """Rows of a 2-d table by integer index; duplicate rows accumulate grads."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding_row_select expects a 2-d table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise ShapeError(f"row index out of range for table with {table.shape[0]} rows")
    data = table.data[idx]

    def backward_fn(grad, grads):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, grad)
        grads(table, full)

    return Tensor._result(data, (table,), backward_fn, "embedding_row_select")


def softmax(a) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(grad, grads):
        dot = (grad * data).sum(axis=-1, keepdims=True)
        grads(a, (grad - dot) * data)

    return Tensor._result(data, (a,), backward_fn, "softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward_fn(grad, grads):
        dxhat = grad * gain.data
        # Standard closed form: dx = inv_std/d * (d*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        sum_dxhat = dxhat.sum(axis=-1, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=-1, keepdims=True)
        grads(a, (inv_std / d) * (d * dxhat - sum_dxhat - xhat * sum_dxhat_xhat))
        lead = tuple(range(grad.ndim - 1))
        grads(gain, (grad * xhat).sum(axis=lead))
        grads(bias, grad.sum(axis=lead))

    return Tensor._result(data, (a, gain, bias), backward_fn, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_erf = np.frompyfunc(math.erf, 1, 1)


def gelu(a, exact: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if exact:
        phi_cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)).astype(x.dtype))
        data = x * phi_cdf

        def backward_fn(grad, grads):
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            grads(a, grad * (phi_cdf + x * pdf))

    else:
        inner = _GELU_C * (x + _GELU_A * x**3)
        t = np.tanh(inner)
        data = 0.5 * x * (1.0 + t)

        def backward_fn(grad, grads):
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
            grads(a, grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner))

    return Tensor._result(data, (a,), backward_fn, "gelu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_fn(grad, grads):
        grads(a, grad * data * (1.0 - data))

    return Tensor._result(data, (a,), backward_fn, "sigmoid")


def dropout(a, p: float, rng=None, training: bool = True) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p); identity in eval mode."""
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if not (0.0 <= p < 1.0):
        raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ShapeError("training-mode dropout requires an rng or seed")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = 1.0 - p
    mask = (gen.random(a.shape) < keep).astype(a.data.dtype) / keep
    data = a.data * mask

    def backward_fn(grad, grads):
        grads(a, grad * mask)

    return Tensor._result(data, (a,), backward_fn, "dropout")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis)

    def backward_fn(grad, grads):
        if axis is None:
            grads(a, np.full_like(a.data, 1.0 / a.data.size) * grad)
        else:
            g = np.expand_dims(grad, axis)
            grads(a, np.broadcast_to(g / a.shape[axis], a.shape).copy())

    return Tensor._result(np.asarray(data), (a,), backward_fn, "mean")


def tensor_sum(a) -> Tensor:
    """Total sum to a scalar."""
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward_fn(grad, grads):
        grads(a, np.full_like(a.data, 1.0) * grad)

    return Tensor._result(data, (a,), backward_fn, "sum")


BCE_EPS = 1e-7


def binary_cross_entropy(predictions, targets) -> Tensor:
    """Mean BCE over all elements; probabilities clamped to [1e-7, 1 - 1e-7]."""
    predictions = as_tensor(predictions)
    t = np.asarray(targets, dtype=predictions.data.dtype)
    if t.shape != predictions.shape:
        raise ShapeError(f"binary_cross_entropy: predictions {predictions.shape} vs targets {t.shape}")
    p = np.clip(predictions.data, BCE_EPS, 1.0 - BCE_EPS)
    data = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    inside = (predictions.data > BCE_EPS) & (predictions.data < 1.0 - BCE_EPS)

    def backward_fn(grad, grads):
        dp = (p - t) / (p * (1.0 - p)) / p.size
        grads(predictions, grad * dp * inside)

    return Tensor._result(data, (predictions,), backward_fn, "binary_cross_entropy")


# -- reverse pass -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad:
                stack.append((parent, False))
    return order


def collect_gradients(loss: Tensor, wanted: dict[str, Tensor] | None = None):
    """Reverse pass without touching `.grad`; returns {name: gradient array}.

    With wanted=None, gradients are written to `.grad` of every requires_grad
    leaf instead (accumulating across calls on separate graphs).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise NumericalError("loss is detached from any gradient-tracked input")
    if loss._consumed:
        raise RuntimeError("backward already ran for this graph; run forward again first")
    loss._consumed = True

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def grads(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        if g.shape != t.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape} ({t._op})")
        if id(t) in acc:
            acc[id(t)] = acc[id(t)] + g
        else:
            acc[id(t)] = g

    for node in reversed(_topo_order(loss)):
        if node._backward is None:
            continue
        g = acc.get(id(node))
        if g is None:
            continue
        _check_finite(g, f"backward of {node._op}")
        node._backward(g, grads)

    if wanted is not None:
        return {name: acc.get(id(t), np.zeros_like(t.data)) for name, t in wanted.items()}
    for node in _topo_order(loss):
        if node._backward is None and node.requires_grad and id(node) in acc:
            node.grad = acc[id(node)] if node.grad is None else node.grad + acc[id(node)]
    return None


def backward(loss: Tensor):
    """Populate `.grad` on every requires_grad leaf reachable from the loss."""
    collect_gradients(loss, wanted=None)


# -- optimizer ----------------------------------------------------------------


def adam_init(params: dict[str, Tensor]) -> dict:
    return {
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
        "t": 0,
    }


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Bias-corrected Adam update, applied in place in sorted name order."""
    state["t"] += 1
    t = state["t"]
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state["m"][name] = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = state["v"][name] = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# -- checkpoint format ---------------------------------------------------------

CHECKPOINT_MAGIC = b"WFT1"


def save_checkpoint(path, named_arrays: dict[str, np.ndarray]):
    """Write arrays (cast to float32 little-endian) under the WFT1 layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays.items():
            data = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a WFT1 file back into float64 arrays (exact float32 embedding)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise NumericalError(f"{path}: not a WFT1 checkpoint")
    pos = 4
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndims,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndims}I", blob, pos) if ndims else ()
        pos += 4 * ndims
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = arr.astype(np.float64)
    return out
