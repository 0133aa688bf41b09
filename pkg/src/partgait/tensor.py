"""Minimal reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`GradTape` are recorded when at
least one input requires a gradient. ``tape.backward(loss)`` replays the
records in reverse and accumulates gradients into the ``grad`` buffers of the
leaf tensors (parameters and watched inputs). Outside a tape every op is a
plain numpy computation, which is what inference uses.

Image-like tensors are channels-last: ``(N, H, W, C)`` or ``(H, W, C)``.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeMismatch

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of executed primitives.

    Use as a context manager; ops run inside it are recorded.  ``backward``
    may be called once.  ``visited`` lists the op names in the order they
    were replayed, which is the reverse of execution order restricted to ops
    the loss depends on.
    """

    def __init__(self):
        self.records = []
        self._produced = set()
        self.visited = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse across threads
            stack.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.records.append(_Record(op, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss, grad=None):
        if self._consumed:
            raise RuntimeError("GradTape.backward can only be called once")
        self._consumed = True
        if grad is None:
            if loss.size != 1:
                raise ShapeMismatch("backward() without grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if id(loss) not in self._produced and loss.requires_grad:
            _accumulate(loss, grads.pop(id(loss)))
            return
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            self.visited.append(rec.op)
            input_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    _accumulate(inp, gi)
        self.records = []


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _make(op, data, inputs, backward):
    """Wrap ``data`` as the output of ``op``; record it when needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def _recording(*inputs):
    tape = active_tape()
    return tape is not None and any(t.requires_grad for t in inputs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    # constants adopt the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        if b.requires_grad and not a.requires_grad:
            a = Tensor(a.data.astype(b.dtype))
        elif not b.requires_grad:
            b = Tensor(b.data.astype(a.dtype))
    return a, b


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), backward)


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make("sqrt", out, (x,), backward)


# --------------------------------------------------------------------------
# activations


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    ez = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(d.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return _make("relu", out, (x,), backward)


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), backward)


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _make("dropout", x.data * keep, (x,), backward)


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", out, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), backward)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x, index):
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(out, copy=True), (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make("stack", out, tuple(tensors), backward)


def segment_mean(x, lengths):
    """Mean over consecutive segments of the leading axis.

    ``x`` has shape ``(sum(lengths), ...)``; the result has shape
    ``(len(lengths), ...)``.  Used to average per-frame features into one map
    per sequence when sequences have different lengths.  The forward pass is
    exactly invariant to the order of rows within a segment.
    """
    x = as_tensor(x)
    lengths = [int(n) for n in lengths]
    if any(n < 1 for n in lengths) or sum(lengths) != x.shape[0]:
        raise ShapeMismatch(f"segment lengths {lengths} do not cover {x.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    # summing in sorted order makes the result independent of frame order, bit for bit
    out = np.stack([np.sort(x.data[s : s + n], axis=0).sum(axis=0) / n
                    for s, n in zip(starts, lengths)])

    def backward(g):
        reps = np.repeat(np.arange(len(lengths)), lengths)
        scale = np.repeat(1.0 / np.asarray(lengths, dtype=x.dtype), lengths)
        return (g[reps] * scale.reshape((-1,) + (1,) * (x.ndim - 1)),)

    return _make("segment_mean", out, (x,), backward)


# --------------------------------------------------------------------------
# layers


def linear(x, W, b=None):
    """``x @ W.T + b`` over the last axis; ``W`` has shape ``(m, n)``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} != weight columns {W.shape[1]}")
    out = x.data @ W.data.T
    inputs = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeMismatch(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
        out = out + b.data
        inputs = (x, W, b)

    def backward(g):
        gx = g @ W.data
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _make("linear", out, inputs, backward)


def _im2col(xp, kh, kw):
    """Patches of a padded ``(N, H, W, C)`` array as rows ordered (kh, kw, C)."""
    N, Hp, Wp, C = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(N * Ho * Wo, kh * kw * C)


def conv2d(x, weights, bias, padding=0):
    """Stride-1 cross-correlation.

    x: ``(N, H, W, Cin)`` or ``(H, W, Cin)``; weights: ``(kh, kw, Cin, Cout)``;
    bias: ``(Cout,)``.  Output spatial size is ``H + 2*padding - kh + 1``.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weights.ndim != 4:
        raise ShapeMismatch(f"conv2d: bad ranks input {x.shape}, weights {weights.shape}")
    N, H, W, C = xd.shape
    kh, kw, cin, cout = weights.shape
    if cin != C:
        raise ShapeMismatch(f"conv2d: input has {C} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({cout},)")
    p = int(padding)
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho < 1 or Wo < 1 or p >= kh:
        raise ShapeMismatch("conv2d: kernel/padding incompatible with input size")
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    cols = _im2col(xp, kh, kw)
    wmat = weights.data.reshape(kh * kw * C, cout)
    out = (cols @ wmat + bias.data).reshape(N, Ho, Wo, cout)
    if unbatched:
        out = out[0]
    if not _recording(x, weights, bias):
        return Tensor(out)

    def backward(g):
        gd = g[None] if unbatched else g
        g2 = gd.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(kh, kw, C, cout)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of g with the flipped kernel
            q = kh - 1 - p
            gp = np.pad(gd, ((0, 0), (q, q), (kw - 1 - p,) * 2, (0, 0)))
            wflip = weights.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, C)
            gx = (_im2col(gp, kh, kw) @ wflip).reshape(N, H, W, C)
            if unbatched:
                gx = gx[0]
        return gx, gw, gb

    return _make("conv2d", out, (x, weights, bias), backward)


def maxpool2d(x, window=2, stride=2):
    """Non-overlapping 2x2 max pooling; the gradient goes to the first maximum."""
    if window != 2 or stride != 2:
        raise ShapeMismatch("maxpool2d supports window=2, stride=2 only")
    x = as_tensor(x)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    N, H, W, C = xd.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"maxpool2d: spatial dims {H}x{W} must be even")
    blocks = xd.reshape(N, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(N, H // 2, W // 2, C, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if unbatched:
        out = out[0]

    def backward(g):
        gd = g[None] if unbatched else g
        hot = (np.arange(4) == idx[..., None]) * gd[..., None]
        hot = hot.reshape(N, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        gx = hot.reshape(N, H, W, C)
        return (gx[0] if unbatched else gx,)

    return _make("maxpool2d", out, (x,), backward)


def pairwise_distances(x):
    """Euclidean distance matrix between the rows of ``x`` (shape ``(n, d)``).

    Computed from explicit differences so identical rows give exactly zero;
    the gradient at a zero distance is taken as zero.
    """
    x = as_tensor(x)
    xd = x.data
    n = xd.shape[0]
    D = np.empty((n, n), dtype=xd.dtype)
    for i in range(n):
        D[i] = np.sqrt(((xd[i] - xd) ** 2).sum(axis=1))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            Wm = np.where(D > 0, (g + g.T) / D, 0.0)
        return (xd * Wm.sum(axis=1, keepdims=True) - Wm @ xd,)

    return _make("pairwise_distances", D, (x,), backward)


# --------------------------------------------------------------------------
# verification


def grad_check(f, x, eps=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  ``x`` is an array (or Tensor) at
    which to compare; it is evaluated in float64.  The per-component error is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(xt)
    tape.backward(y)
    g_ad = np.zeros_like(x0) if xt.grad is None else xt.grad

    g_fd = np.empty_like(x0)
    flat = x0.reshape(-1)
    gflat = g_fd.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(Tensor(x0.copy())).data)
        flat[k] = orig - eps
        fm = float(f(Tensor(x0.copy())).data)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if x0.size else 0.0
