"""Dense tensors with reverse-mode automatic differentiation.

Values live in row-major numpy buffers (float32 by default, float64 for
gradient checking). Operations executed inside a ``GradTape`` context
append nodes to the tape; ``GradTape.backward`` replays the nodes in
exact reverse append order and accumulates gradients additively into
every reachable tensor with ``requires_grad``.

Two hard numerical rules hold everywhere:

* NaN in any forward result raises :class:`NumericsError` immediately.
* ``softmax`` subtracts the axis max before exponentiation, so masked
  (-inf) positions map to exactly zero and large finite inputs never
  overflow. A row that is masked everywhere raises
  :class:`MaskingError` instead of silently renormalizing.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, MaskingError, NumericsError

DEFAULT_DTYPE = np.float32
_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense n-dimensional array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in _ALLOWED:
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def constant(data, dtype=DEFAULT_DTYPE):
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Append-only operation record; backward runs in reverse append order.

    A node's inputs always precede it on the tape, so one reverse sweep
    sees every output gradient fully accumulated before it is consumed.
    """

    def __init__(self):
        self.nodes = []
        self._output_ids = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _append(self, node):
        self.nodes.append(node)
        self._output_ids.add(id(node.output))

    def backward(self, loss):
        """Populate ``grad`` on every tensor reachable from ``loss``."""
        if not isinstance(loss, Tensor) or loss.shape != ():
            raise ContractError("backward requires a scalar loss tensor")
        if id(loss) not in self._output_ids:
            raise ContractError("loss is not an output recorded on this tape")
        loss.grad = np.ones((), dtype=loss.dtype)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad.astype(tensor.dtype, copy=False)
                else:
                    tensor.grad = tensor.grad + grad


_TAPE_STACK: list[GradTape] = []


def _current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_nan(op, data):
    # np.min propagates NaN and tolerates the -inf mask bias.
    if data.size and np.isnan(np.min(data)):
        raise NumericsError(f"NaN produced by op '{op}'")


def _same_dtype(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _record(op, inputs, out_data, backward_fn):
    _check_nan(op, out_data)
    tape = _current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        tape._append(_Node(op, tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; dA = dC @ B^T, dB = A^T @ dC."""
    _same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _same_dtype("add", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g, g

    return _record("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two same-shape tensors."""
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        return g * b.data, g * a.data

    return _record("mul", (a, b), out, backward)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a non-differentiated constant (scalar or same-shape array)."""
    c_arr = np.asarray(c, dtype=x.dtype)
    if c_arr.ndim != 0 and c_arr.shape != x.shape:
        raise DimensionError(f"mul_const constant shape {c_arr.shape} vs tensor {x.shape}")
    out = x.data * c_arr

    def backward(g):
        return (g * c_arr,)

    return _record("mul_const", (x,), out, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias to every row of a 2-D tensor; db sums over rows."""
    _same_dtype("add_bias", x, b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias shapes: {x.shape} + {b.shape}")
    out = x.data + b.data[None, :]

    def backward(g):
        return g, g.sum(axis=0)

    return _record("add_bias", (x, b), out, backward)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along an existing axis."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    _same_dtype("concat", *tensors)
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat axis {axis} out of range for ndim {nd}")
    axis = axis % nd
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record("concat", tuple(tensors), out, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack of zero tensors")
    _same_dtype("stack", *tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack shapes differ: {shape} vs {t.shape}")
    if not -(len(shape) + 1) <= axis <= len(shape):
        raise DimensionError(f"stack axis {axis} out of range")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return _record("stack", tuple(tensors), out, backward)


def transpose(x: Tensor) -> Tensor:
    """2-D transpose."""
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _record("transpose", (x,), out, backward)


def take_flat(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flat row-major buffer; index -1 yields a hard zero.

    Covers row shifting, row slicing and im2col-style patch extraction
    with a single linear primitive whose backward is a scatter-add.
    """
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ContractError("take_flat indices must be integers")
    if idx.size and (idx.max(initial=-1) >= x.size or idx.min(initial=0) < -1):
        raise DimensionError("take_flat index out of range")
    valid = idx >= 0
    flat = x.data.reshape(-1)
    out = np.where(valid, flat[np.where(valid, idx, 0)], x.dtype.type(0))
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = np.zeros(x.size, dtype=g.dtype)
        np.add.at(gx, idx[valid], g[valid])
        return (gx.reshape(x.shape),)

    return _record("take_flat", (x,), out, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice of a 2-D tensor."""
    if x.ndim != 2:
        raise DimensionError("slice_rows needs a 2-D tensor")
    rows, cols = x.shape
    if not 0 <= start < stop <= rows:
        raise DimensionError(f"slice_rows [{start}:{stop}] of {rows} rows")
    idx = (np.arange(start, stop)[:, None] * cols + np.arange(cols)[None, :])
    return take_flat(x, idx)


def shift_rows(x: Tensor, offset: int) -> Tensor:
    """Shift rows of a 2-D tensor by ``offset`` (positive = downward), zero fill."""
    if x.ndim != 2:
        raise DimensionError("shift_rows needs a 2-D tensor")
    rows, cols = x.shape
    src = np.arange(rows) - offset
    ok = (src >= 0) & (src < rows)
    idx = np.where(ok[:, None], np.clip(src, 0, rows - 1)[:, None] * cols + np.arange(cols)[None, :], -1)
    return take_flat(x, idx)


def mean_pool(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Arithmetic mean along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"mean_pool axis {axis} out of range for ndim {x.ndim}")
    axis = axis % x.ndim
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / n, x.shape).astype(g.dtype, copy=True),)

    return _record("mean_pool", (x,), np.asarray(out), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum all entries into a scalar."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=g.dtype),)

    return _record("sum_all", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, stable on both tails; sigmoid(0) = 0.5."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _record("relu", (x,), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with mandatory max subtraction.

    -inf entries (masked positions) map to exactly 0. A row with no
    finite entry raises :class:`MaskingError`.
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for ndim {x.ndim}")
    axis = axis % x.ndim
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise MaskingError("softmax row with every position masked")
    e = np.exp(x.data - m)
    z = e.sum(axis=axis, keepdims=True)
    out = e / z

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(x)) computed stably in one pass."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for ndim {x.ndim}")
    axis = axis % x.ndim
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise MaskingError("log_softmax row with every position masked")
    shifted = x.data - m
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logz
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    _same_dtype("layer_norm", x, gain, bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm gain/bias must be ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", (x, gain, bias), out, backward)
