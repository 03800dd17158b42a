"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape every op is a plain value
computation, which doubles as the no-grad mode for frozen networks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-12


class DimensionError(ValueError):
    """Shapes or geometry do not fit the operation."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_TAPES: list["Tape"] = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is already a topological order.
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward_fn):
        # which inputs wanted a gradient is fixed at record time
        needs = tuple(t.requires_grad for t in inputs)
        self.records.append((out, inputs, needs, backward_fn))

    def backward(self, loss):
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass; record a new Tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): (loss, np.ones_like(loss.data))}
        for out, inputs, needs, fn in reversed(self.records):
            entry = grads.pop(id(out), None)
            if entry is None:
                continue
            g = entry[1]
            out.grad = g
            for t, need, gi in zip(inputs, needs, fn(g)):
                if gi is None or not need:
                    continue
                if not np.isfinite(gi).all():
                    raise NonFiniteError(f"backward of {out.op}: non-finite gradient")
                prev = grads.get(id(t))
                grads[id(t)] = (t, gi if prev is None else prev[1] + gi)
        # whatever is left was not produced on this tape: leaves
        leaves = list(grads.values())
        for t, _ in leaves:
            if t.grad is not None:
                raise ContractError(
                    "gradient already populated on a leaf; call zero_grad() before another backward"
                )
        for t, g in leaves:
            t.grad = g
        self.consumed = True
        self.records = []


class Tensor:
    """n-dimensional float64 value that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64, order="C")  # ascontiguousarray would promote 0-d to 1-d
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss):
    """Run reverse mode from a scalar ``loss`` over the tape it was recorded on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not on an active tape")
    loss._tape.backward(loss)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def _make(data, op, inputs, backward_fn):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, op=op)
    if req:
        tape.record(out, inputs, backward_fn)
        out._tape = tape
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "div", (a, b), bw)


def scale(x, s):
    s = float(s)
    return _make(x.data * s, "scale", (x,), lambda g: (g * s,))


def square(x):
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def sqrt_eps(x, eps=EPS):
    """sqrt(max(x, eps)); zero gradient where the floor is active."""
    y = np.sqrt(np.maximum(x.data, eps))
    return _make(y, "sqrt_eps", (x,), lambda g: (g * 0.5 / y * (x.data > eps),))


def clamp_min(x, lo):
    y = np.maximum(x.data, lo)
    return _make(y, "clamp_min", (x,), lambda g: (g * (x.data > lo),))


def exp(x):
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make(y, "log", (x,), lambda g: (g / x.data,))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), bw)


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, "mean", (x,), bw)


def l2_norm(x, axis=None):
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def bw(g):
        nn = n if axis is None else np.expand_dims(n, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(nn > 0, x.data / nn, 0.0)
        return (gg * r,)

    return _make(n, "l2_norm", (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def transpose2d(x):
    """Swap the two trailing axes."""
    if x.ndim < 2:
        raise DimensionError("transpose2d needs at least 2 dimensions")
    return _make(np.swapaxes(x.data, -1, -2), "transpose2d", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tuple(tensors), bw)


def gather_axis(x, index, axis):
    """Pick one entry along ``axis`` per remaining position (cross-entropy helper)."""
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= x.shape[axis]:
        raise DimensionError("gather_axis: index out of range")
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, "gather_axis", (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: {e}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), bw)


def softmax_axis(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def log_softmax_axis(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (x,), bw)


def div_outer(x, d):
    """x[..., i, j] / (d[..., i] * d[..., j]); one node instead of mul + div."""
    x, d = as_tensor(x), as_tensor(d)
    if x.shape[-2:] != (d.shape[-1], d.shape[-1]) or x.shape[:-2] != d.shape[:-1]:
        raise DimensionError(f"div_outer: {x.shape} vs {d.shape}")
    inv = 1.0 / d.data
    y = x.data * inv[..., :, None]
    y *= inv[..., None, :]

    def bw(g):
        gx = g * inv[..., :, None]
        gx *= inv[..., None, :]
        gy = g * y
        return gx, -(gy.sum(-1) + gy.sum(-2)) * inv

    return _make(y, "div_outer", (x, d), bw)


def cosine(a, b, eps=EPS):
    """Cosine similarity along the last axis, denominator floored at eps."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine: {a.shape} vs {b.shape}")
    dot = (a.data * b.data).sum(-1)
    na = np.sqrt((a.data * a.data).sum(-1))
    nb = np.sqrt((b.data * b.data).sum(-1))
    den = na * nb
    live = den > eps
    den = np.maximum(den, eps)
    y = dot / den

    def bw(g):
        g = (g / den)[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ra = np.where(live, dot / np.where(live, na * na, 1.0), 0.0)[..., None]
            rb = np.where(live, dot / np.where(live, nb * nb, 1.0), 0.0)[..., None]
        return g * (b.data - ra * a.data), g * (a.data - rb * b.data)

    return _make(y, "cosine", (a, b), bw)


# ---------------------------------------------------------------- pooling


def global_max_pool(x):
    """Per-channel spatial maximum over the trailing (h, w) axes.

    Gradient goes to the first maximal position in row-major order.
    """
    if x.ndim < 3:
        raise DimensionError("global_max_pool needs (..., c, h, w)")
    h, w = x.shape[-2:]
    if h * w < 1:
        raise DimensionError("global_max_pool on empty map")
    flat = x.data.reshape(x.shape[:-2] + (h * w,))
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx.reshape(x.shape),)

    return _make(out, "global_max_pool", (x,), bw)


def pool_resize(x, target):
    """Average-pool down or nearest-neighbour upsample the trailing (h, w) axes."""
    h, w = x.shape[-2:]
    h2, w2 = int(target[0]), int(target[1])
    lead = x.shape[:-2]
    if (h2, w2) == (h, w):
        return x
    if h2 <= h and w2 <= w and h % h2 == 0 and w % w2 == 0:
        fh, fw = h // h2, w // w2
        out = x.data.reshape(lead + (h2, fh, w2, fw)).mean(axis=(-3, -1))

        def bw(g):
            g = g[..., :, None, :, None] / (fh * fw)
            return (np.broadcast_to(g, lead + (h2, fh, w2, fw)).reshape(x.shape),)

        return _make(out, "avg_pool", (x,), bw)
    if h2 >= h and w2 >= w and h2 % h == 0 and w2 % w == 0:
        fh, fw = h2 // h, w2 // w
        out = np.repeat(np.repeat(x.data, fh, axis=-2), fw, axis=-1)

        def bw(g):
            return (g.reshape(lead + (h, fh, w, fw)).sum(axis=(-3, -1)),)

        return _make(out, "upsample_nearest", (x,), bw)
    raise DimensionError(f"pool_resize: cannot map {h}x{w} to {h2}x{w2}")


# ---------------------------------------------------------------- convolution


def _batched(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected (c, h, w) or (n, c, h, w), got {x.shape}")


def _im2col(xp, k, s, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols, shape, k, s, ho, wo):
    """Scatter-add (n*ho*wo, c*k*k) patches back into an array of ``shape``."""
    n, c = shape[:2]
    out = np.zeros(shape)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    return out


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of (n, c_in, h, w) with (c_out, c_in, k, k)."""
    xd, squeeze = _batched(x)
    co, ci, k, k2 = kernel.shape
    n, c, h, w = xd.shape
    if k != k2 or c != ci:
        raise DimensionError(f"conv2d: input {x.shape} does not fit kernel {kernel.shape}")
    if stride < 1 or k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d: invalid geometry k={k} stride={stride} pad={pad} on {h}x{w}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wm = kernel.data.reshape(co, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def bw(g):
        if squeeze:
            g = g[None]
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(gm @ wm, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            if squeeze:
                gx = gx[0]
        grads = (gx, gk)
        if bias is not None:
            grads += (gm.sum(axis=0),)
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv2d", inputs, bw)


def conv_transpose2d(x, kernel, bias=None, stride=1, pad=0):
    """Transposed convolution; ``kernel`` is laid out (c_in, c_out, k, k)."""
    xd, squeeze = _batched(x)
    ci, co, k, k2 = kernel.shape
    n, c, h, w = xd.shape
    if k != k2 or c != ci:
        raise DimensionError(f"conv_transpose2d: input {x.shape} does not fit kernel {kernel.shape}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if stride < 1 or ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: invalid geometry k={k} stride={stride} pad={pad}")
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, ci)
    wm = kernel.data.reshape(ci, -1)
    full = _col2im(xm @ wm, (n, co, hf, wf), k, stride, h, w)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def bw(g):
        if squeeze:
            g = g[None]
        gf = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _im2col(gf, k, stride, h, w)
        gk = (xm.T @ gcols).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wm.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv_transpose2d", inputs, bw)


# ---------------------------------------------------------------- testing aid


def gradcheck(fn, inputs, step=1e-5):
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Returns ``|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-12)``
    over all inputs stacked together, so an input whose true gradient is
    exactly zero is not judged on finite-difference noise alone.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = fn(*inputs)
        backward(loss)
    analytic, numeric = [], []
    for t in inputs:
        analytic.append((np.zeros_like(t.data) if t.grad is None else t.grad).ravel())
        flat = t.data.reshape(-1)
        nflat = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(*inputs).item()
            flat[i] = orig - step
            fm = fn(*inputs).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        numeric.append(nflat)
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
