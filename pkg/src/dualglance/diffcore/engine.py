"""Minimal reverse-mode tensor engine.

Values live in flat numpy buffers (float64 for tests and oracles, float32
permitted for training). Operations executed inside a ``with Tape():`` block
are recorded; ``tape.backward(loss)`` replays the records in reverse and
accumulates gradients additively into every reachable tensor that has
``requires_grad`` set. Outside a tape, ops run forward-only.

Broadcasting is restricted to bias addition over the leading (batch) axis;
everything else requires exact shape agreement.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericalError",
    "tensor",
    "zeros",
    "record",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_rows",
    "matmul",
    "affine",
    "conv2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "stack",
    "take_row",
    "slice_rows",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_bag",
    "softmax_cross_entropy",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericalError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs."""


class Tensor:
    """n-d array with an optional gradient slot.

    ``grad`` mirrors the value shape and exists only for requires_grad
    tensors. Op outputs allocate theirs lazily at the first backward
    accumulation, so forward-only evaluation never pays for them. Values are
    immutable after creation except through an optimizer.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor(self.values, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


def _result(values, requires_grad: bool) -> "Tensor":
    """Op-output tensor: grad slot stays unallocated until backward needs it."""
    t = Tensor.__new__(Tensor)
    t.values = values
    t.requires_grad = requires_grad
    t.grad = None
    return t


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of one forward pass; replayed backwards once.

    A tape is confined to one thread and discarded after backward.
    """

    def __init__(self):
        self._records = []  # (output Tensor, backward callable)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        """Fill grads of every requires_grad tensor reachable from ``loss``."""
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad; nothing to backpropagate")
        loss.grad = np.ones_like(loss.values)
        for out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


def record(out: Tensor, backward) -> Tensor:
    """Attach a backward rule for ``out`` to the active tape, if any.

    Extension hook: custom differentiable ops outside this module (e.g. ROI
    pooling) register through here.
    """
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._records.append((out, backward))
    return out


def tensor(values, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _reject(op, a, b=None):
    if b is None:
        raise ShapeError(f"{op}: got shape {a.values.shape}")
    raise ShapeError(f"{op}: shapes {a.values.shape} and {b.values.shape} do not conform")


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Equal shapes, or b broadcast as a bias over a's leading axis."""
    bias = a.values.shape != b.values.shape
    if bias and not (a.values.ndim == b.values.ndim + 1 and a.values.shape[1:] == b.values.shape):
        _reject("add", a, b)
    out = _result(a.values + b.values, _needs_grad(a, b))

    def rule(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if bias else g)

    return record(out, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        _reject("sub", a, b)
    out = _result(a.values - b.values, _needs_grad(a, b))

    def rule(g):
        _accum(a, g)
        _accum(b, -g)

    return record(out, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.values.shape != b.values.shape:
        _reject("mul", a, b)
    out = _result(a.values * b.values, _needs_grad(a, b))

    def rule(g):
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return record(out, rule)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for c)."""
    out = _result(a.values * c, a.requires_grad)

    def rule(g):
        _accum(a, g * c)

    return record(out, rule)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x (n,k) by s[i]; s has shape (n,1). Explicit stand-in
    for the per-instance gating product so no silent broadcasting happens."""
    if x.values.ndim != 2 or s.values.shape != (x.values.shape[0], 1):
        _reject("scale_rows", x, s)
    out = _result(x.values * s.values, _needs_grad(x, s))

    def rule(g):
        _accum(x, g * s.values)
        _accum(s, (g * x.values).sum(axis=1, keepdims=True))

    return record(out, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        _reject("matmul", a, b)
    out = _result(a.values @ b.values, _needs_grad(a, b))

    def rule(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return record(out, rule)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected layer: x (n,m) @ w (m,p) + b (p,)."""
    if x.values.ndim != 2 or w.values.ndim != 2 or x.values.shape[1] != w.values.shape[0]:
        _reject("affine", x, w)
    if b.values.shape != (w.values.shape[1],):
        _reject("affine(bias)", w, b)
    out = _result(x.values @ w.values + b.values, _needs_grad(x, w, b))

    def rule(g):
        _accum(x, g @ w.values.T)
        _accum(w, x.values.T @ g)
        _accum(b, g.sum(axis=0))

    return record(out, rule)


def grad_buffer(t: Tensor):
    """Materialized gradient buffer of t, or None when t takes no gradient.
    Custom ops (ROI pooling) scatter into it from their backward rules."""
    if not t.requires_grad:
        return None
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    return t.grad


def _accum(t: Tensor, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.values.dtype)  # first touch owns a copy
        else:
            t.grad += g


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.values, 0.0), x.requires_grad)
    mask = x.values > 0

    def rule(g):
        _accum(x, g * mask)

    return record(out, rule)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # split form avoids exp overflow on large |v|
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = _result(y, x.requires_grad)

    def rule(g):
        _accum(x, g * y * (1.0 - y))

    return record(out, rule)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.values)
    if not np.all(np.isfinite(y)):
        raise NumericalError("exp: overflow to non-finite values")
    out = _result(y, x.requires_grad)

    def rule(g):
        _accum(x, g * y)

    return record(out, rule)


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NumericalError("log: non-positive input")
    out = _result(np.log(x.values), x.requires_grad)

    def rule(g):
        _accum(x, g / x.values)

    return record(out, rule)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = _result(np.concatenate([t.values for t in tensors], axis=axis),
                  _needs_grad(*tensors))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return record(out, rule)


def stack(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack: empty input list")
    shape0 = tensors[0].values.shape
    for t in tensors[1:]:
        if t.values.shape != shape0:
            _reject("stack", tensors[0], t)
    out = _result(np.stack([t.values for t in tensors]), _needs_grad(*tensors))

    def rule(g):
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return record(out, rule)


def take_row(x: Tensor, i: int) -> Tensor:
    """Row i of a 2-d tensor, as a 1-d tensor."""
    if x.values.ndim != 2:
        _reject("take_row", x)
    out = _result(x.values[i].copy(), x.requires_grad)

    def rule(g):
        buf = grad_buffer(x)
        if buf is not None:
            buf[i] += g

    return record(out, rule)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows [lo, hi) along the leading axis."""
    if not 0 <= lo < hi <= x.values.shape[0]:
        raise ShapeError(f"slice_rows: [{lo},{hi}) out of range for {x.values.shape}")
    out = _result(x.values[lo:hi].copy(), x.requires_grad)

    def rule(g):
        buf = grad_buffer(x)
        if buf is not None:
            buf[lo:hi] += g

    return record(out, rule)


def reshape(x: Tensor, shape) -> Tensor:
    out = _result(x.values.reshape(shape), x.requires_grad)
    orig = x.values.shape

    def rule(g):
        _accum(x, g.reshape(orig))

    return record(out, rule)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = _result(np.sum(x.values, axis=axis), x.requires_grad)
    shape = x.values.shape

    def rule(g):
        if axis is None:
            _accum(x, np.full(shape, g, dtype=x.values.dtype))
        else:
            _accum(x, np.expand_dims(g, axis=axis) * np.ones(shape, dtype=x.values.dtype))

    return record(out, rule)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.values.size if axis is None else x.values.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


def reduce_max(x: Tensor, axis=None) -> Tensor:
    """Max reduction; gradient routes to the first argmax along the axis."""
    if axis is None:
        out = _result(np.max(x.values), x.requires_grad)
        flat_idx = int(np.argmax(x.values))

        def rule(g):
            buf = grad_buffer(x)
            if buf is not None:
                buf.reshape(-1)[flat_idx] += g

        return record(out, rule)

    out = _result(np.max(x.values, axis=axis), x.requires_grad)
    arg = np.argmax(x.values, axis=axis)

    def rule_axis(g):
        if x.requires_grad:
            gi = np.expand_dims(g, axis=axis)
            sel = np.expand_dims(arg, axis=axis)
            scatter = np.zeros_like(x.values)
            np.put_along_axis(scatter, sel, gi, axis=axis)
            _accum(x, scatter)

    return record(out, rule_axis)


def reduce_bag(scores: Tensor, mode: str) -> Tensor:
    """Pool a nonempty bag of per-instance scores (R,C) into one (C,) score.

    lse uses log(1 + sum_i exp(s_i)) per component, computed with a detached
    max shift so it stays finite for large scores.
    """
    v = scores.values
    if v.ndim != 2 or v.shape[0] == 0:
        _reject(f"reduce_bag[{mode}]", scores)
    if mode == "max":
        return reduce_max(scores, axis=0)
    if mode == "avg":
        return reduce_mean(scores, axis=0)
    if mode != "lse":
        raise ValueError(f"reduce_bag: unknown mode {mode!r}")

    m = np.maximum(np.max(v, axis=0), 0.0)
    expv = np.exp(v - m)
    denom = np.exp(-m) + expv.sum(axis=0)
    out = _result(m + np.log(denom), scores.requires_grad)
    weights = expv / denom  # d out_c / d s_ic

    def rule(g):
        _accum(scores, g * weights)

    return record(out, rule)


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution. x: (n,cin,h,w); w: (cout,cin,kh,kw); b: (cout,)."""
    if x.values.ndim != 4 or w.values.ndim != 4 or x.values.shape[1] != w.values.shape[1]:
        _reject("conv2d", x, w)
    cout, cin, kh, kw = w.values.shape
    if b.values.shape != (cout,):
        _reject("conv2d(bias)", w, b)
    n, _, h, wid = x.values.shape
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        _reject("conv2d", x, w)

    cols, oh, ow = _im2col(x.values, kh, kw, stride, padding)
    wmat = w.values.reshape(cout, cin * kh * kw)
    y = cols @ wmat.T + b.values  # (n, oh, ow, cout)
    out = _result(y.transpose(0, 3, 1, 2), _needs_grad(x, w, b))

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1)  # (n, oh, ow, cout)
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 1, 2], [0, 1, 2]))
            _accum(w, gw.reshape(w.values.shape))
        if b.requires_grad:
            _accum(b, g2.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dcols = g2 @ wmat  # (n, oh, ow, cin*kh*kw)
            dcols = dcols.reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            hp, wp = h + 2 * padding, wid + 2 * padding
            dxp = np.zeros((n, cin, hp, wp), dtype=x.values.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, :, i, j]
            _accum(x, dxp[:, :, padding:hp - padding or None, padding:wp - padding or None])

    return record(out, rule)


def _maxpool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 fast path: strided quadrant comparisons, no window copies.
    Ties route the gradient to the first window cell in row-major order,
    matching the argmax convention of the general path."""
    n, c, h, w = x.values.shape
    oh, ow = h // 2, w // 2
    v = x.values[:, :, :oh * 2, :ow * 2]
    q = (v[:, :, 0::2, 0::2], v[:, :, 0::2, 1::2], v[:, :, 1::2, 0::2], v[:, :, 1::2, 1::2])
    out_v = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    out = _result(out_v, x.requires_grad)

    def rule(g):
        buf = grad_buffer(x)
        if buf is None:
            return
        remaining = g
        slots = ((0, 0), (0, 1), (1, 0), (1, 1))
        for quad, (di, dj) in zip(q, slots):
            hit = quad == out_v
            take = np.where(hit, remaining, 0.0)
            buf[:, :, di:oh * 2:2, dj:ow * 2:2] += take
            remaining = np.where(hit, 0.0, remaining)

    return record(out, rule)


def maxpool2d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max pooling over size x size windows; trailing remainder is dropped."""
    if x.values.ndim != 4:
        _reject("maxpool2d", x)
    stride = stride or size
    if size == 2 and stride == 2 and x.values.shape[2] >= 2 and x.values.shape[3] >= 2:
        return _maxpool2x2(x)
    n, c, h, w = x.values.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    if oh < 1 or ow < 1:
        _reject("maxpool2d", x)
    s0, s1, s2, s3 = x.values.strides
    win = np.lib.stride_tricks.as_strided(
        x.values, (n, c, oh, ow, size, size), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    flat = win.reshape(n, c, oh, ow, size * size)
    arg = np.argmax(flat, axis=-1)
    out = _result(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0],
                  x.requires_grad)

    def rule(g):
        buf = grad_buffer(x)
        if buf is None:
            return
        if stride == size:
            # non-overlapping windows: reconstruct the window grid directly
            onehot = np.arange(size * size) == arg[..., None]
            scattered = (onehot * g[..., None]).reshape(n, c, oh, ow, size, size)
            block = scattered.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
            buf[:, :, :oh * size, :ow * size] += block
        else:
            dy, dxw = np.divmod(arg, size)  # window-local row/col of the max
            ii, jj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
            rows = ii[None, None] * stride + dy
            colsi = jj[None, None] * stride + dxw
            nn = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            np.add.at(buf, (nn, cc, rows, colsi), g)

    return record(out, rule)


# ---------------------------------------------------------------------------
# fused classification loss

_clamp_warnings = {"count": 0}


def clamp_warning_count() -> int:
    """Number of times the CE loss clamped a vanishing true-class probability."""
    return _clamp_warnings["count"]


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label] over the batch, fused for stability.

    labels: int array (n,). True-class probabilities that underflow to zero
    are clamped at 1e-12 and counted (see clamp_warning_count).
    """
    v = logits.values
    if v.ndim != 2:
        _reject("softmax_cross_entropy", logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = v.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {v.shape}")
    shifted = v - v.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    z = expv.sum(axis=1, keepdims=True)
    p = expv / z
    p_true = p[np.arange(n), labels]
    if np.any(p_true < 1e-12):
        _clamp_warnings["count"] += int(np.sum(p_true < 1e-12))
        p_true = np.maximum(p_true, 1e-12)
    out = _result(np.mean(-np.log(p_true)), logits.requires_grad)

    def rule(g):
        if logits.requires_grad:
            d = p.copy()
            d[np.arange(n), labels] -= 1.0
            _accum(logits, g * d / n)

    return record(out, rule)
