"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: numpy holds the data and does the arithmetic, this
module only records the computation graph. Each differentiable op attaches
a closure that scatters the output gradient back to its parents; `backward`
walks the recorded graph once in reverse topological order, so gradients
accumulate additively across fan-out. Supports exactly what the codec
networks need: broadcast elementwise arithmetic, 2-d convolution with
stride and zero/reflect padding, pooling, nearest upsampling, pixel
shuffles, reductions, concat/slice, and softmax. float32 for training
throughput, float64 for invertibility and gradient tests.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2
_DIV_FLOOR = 1e-30

_debug_checks = False


def set_debug(enabled: bool) -> None:
    """Toggle eager NaN/Inf detection on every op result."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A dense n-d array with an optional gradient accumulator.

    Data is immutable by convention once the tensor participates in a
    graph; only `grad` is mutated (by `backward`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    # operator sugar; the math lives in the module-level functions
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

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Create a graph node. `backward(grad)` must add into parents' grads."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    out._done = False
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce_pair(a, b):
    """Return (Tensor a, Tensor b) with matching float dtype.

    Python scalars adopt the other operand's dtype; mixing float32 with
    float64 tensors is an error rather than a silent upcast.
    """
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    a = Tensor(a)
    return a, Tensor(np.asarray(b, dtype=a.dtype))


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "div")
    if np.abs(b.data).min() < _DIV_FLOOR:
        raise ZeroDivisionError(f"div: denominator element below {_DIV_FLOOR}")
    inv = 1.0 / b.data
    out = a.data * inv

    def backward(g):
        _accum(a, _unbroadcast(g * inv, a.shape))
        _accum(b, _unbroadcast(-g * out * inv, b.shape))

    return make_op(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return make_op(-a.data, (a,), backward, "neg")


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return make_op(out, (a,), backward, "exp")


def tlog(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return make_op(np.log(a.data), (a,), backward, "log")


def ttanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return make_op(out, (a,), backward, "tanh")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        _accum(a, g * sign)

    return make_op(np.abs(a.data), (a,), backward, "abs")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= 0
    scale = np.where(mask, a.dtype.type(1), a.dtype.type(slope))

    def backward(g):
        _accum(a, g * scale)

    return make_op(a.data * scale, (a,), backward, "leaky_relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(a.dtype.type(0), a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * sig)

    return make_op(out.astype(a.dtype, copy=False), (a,), backward, "softplus")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * mask)

    return make_op(np.clip(a.data, lo, hi), (a,), backward, "clamp")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(np.asarray(g), a.shape))
        else:
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

    return make_op(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def backward(g):
        _accum(a, np.broadcast_to(np.asarray(g) / n, a.shape).astype(a.dtype, copy=False))

    return make_op(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), backward, "reshape")


def concat(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, gp)

    return make_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        _accum(a, full)

    return make_op(np.ascontiguousarray(a.data[idx]), (a,), backward, "narrow")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return make_op(out, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout)
# ---------------------------------------------------------------------------


def _pad_input(x: np.ndarray, padding: int, mode: str) -> np.ndarray:
    if padding == 0:
        return x
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    if mode == "zeros":
        return np.pad(x, pads)
    if mode == "reflect":
        return np.pad(x, pads, mode="reflect")
    raise ValueError(f"unknown padding mode '{mode}'")


def _fold_pad_grad(gp: np.ndarray, padding: int, mode: str) -> np.ndarray:
    """Collapse a padded-input gradient back onto the unpadded input."""
    if padding == 0:
        return gp
    p = padding
    core = gp[:, :, p:-p, p:-p]
    if mode == "zeros":
        return np.ascontiguousarray(core)
    # reflect: padded row i (0-based from the edge) mirrors interior row p - i
    core = core.copy()
    core[:, :, 1 : p + 1, :] += gp[:, :, :p, :][:, :, ::-1, :][:, :, :, p:-p]
    core[:, :, -p - 1 : -1, :] += gp[:, :, -p:, :][:, :, ::-1, :][:, :, :, p:-p]
    core[:, :, :, 1 : p + 1] += gp[:, :, p:-p, :p][:, :, :, ::-1]
    core[:, :, :, -p - 1 : -1] += gp[:, :, p:-p, -p:][:, :, :, ::-1]
    # corners of the pad ring fold twice (once per axis)
    core[:, :, 1 : p + 1, 1 : p + 1] += gp[:, :, :p, :p][:, :, ::-1, ::-1]
    core[:, :, 1 : p + 1, -p - 1 : -1] += gp[:, :, :p, -p:][:, :, ::-1, ::-1]
    core[:, :, -p - 1 : -1, 1 : p + 1] += gp[:, :, -p:, :p][:, :, ::-1, ::-1]
    core[:, :, -p - 1 : -1, -p - 1 : -1] += gp[:, :, -p:, -p:][:, :, ::-1, ::-1]
    return core


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int):
    """Valid cross-correlation of NCHW input with OIkk kernel."""
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, 3, 1)), win


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2-d convolution (cross-correlation), NCHW x OIkk -> NOHW.

    The input gradient is the transposed convolution: the output gradient
    is dilated by the stride, padded by k-1, and correlated with the
    spatially flipped kernel with in/out channels swapped.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIkk kernel")
    n, c_in, h, w_dim = x.shape
    c_out, c_k, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if c_k != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels, kernel expects {c_k}")
    xp = _pad_input(x.data, padding, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < k or wp < k:
        raise ValueError("conv2d: non-positive output size")
    out, win = _corr2d(xp, weight.data, stride)
    ho, wo = out.shape[2], out.shape[3]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, c_out, 1, 1)
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            _accum(weight, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            if stride > 1:
                gd = np.zeros((n, c_out, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            extra_h = hp - (gd.shape[2] + k - 1)
            extra_w = wp - (gd.shape[3] + k - 1)
            gdp = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1 + extra_h), (k - 1, k - 1 + extra_w)))
            w_flip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gxp, _ = _corr2d(gdp, w_flip, 1)
            _accum(x, _fold_pad_grad(gxp, padding, pad_mode))

    return make_op(out, parents, backward, "conv2d")


def avg_pool2d(a, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = a.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def backward(g):
        _accum(a, np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3).astype(a.dtype, copy=False))

    return make_op(out.astype(a.dtype, copy=False), (a,), backward, "avg_pool2d")


def upsample_nearest2(a) -> Tensor:
    a = as_tensor(a)
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        _accum(a, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return make_op(out, (a,), backward, "upsample_nearest2")


def space_to_depth(a) -> Tensor:
    """c x h x w -> 4c x h/2 x w/2; 2x2 block goes to channels in raster order.

    Pure element permutation, hence exactly invertible (see depth_to_space).
    """
    a = as_tensor(a)
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"space_to_depth: odd spatial extent {h}x{w}")
    out = np.ascontiguousarray(
        a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h // 2, w // 2)
    )

    def backward(g):
        _accum(a, _depth_to_space_data(g))

    return make_op(out, (a,), backward, "space_to_depth")


def _depth_to_space_data(x: np.ndarray) -> np.ndarray:
    n, c4, h, w = x.shape
    c = c4 // 4
    return np.ascontiguousarray(
        x.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * h, 2 * w)
    )


def depth_to_space(a) -> Tensor:
    a = as_tensor(a)
    if a.shape[1] % 4:
        raise ValueError(f"depth_to_space: channel count {a.shape[1]} not divisible by 4")
    out = _depth_to_space_data(a.data)

    def backward(g):
        n, c, h, w = g.shape
        _accum(
            a,
            np.ascontiguousarray(
                g.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(a.shape)
            ),
        )

    return make_op(out, (a,), backward, "depth_to_space")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, parameters=()) -> None:
    """Reverse-accumulate gradients of a scalar loss through its graph.

    Every tensor in `parameters` ends up with a populated grad; parameters
    the loss never touched get zeros. A graph can be consumed only once.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward: graph already consumed")
    loss._done = True

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:  # free non-leaf grads as we go
                node.grad = None
                node._backward = None

    for p in parameters:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
