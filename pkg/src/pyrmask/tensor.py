"""Dense float64 tensors with tape-based reverse-mode differentiation.

Define-by-run: every op computes its result eagerly with numpy and, when
gradients are enabled and some input requires them, appends the output node
to the active tape. ``backward(root)`` replays the tape in reverse recorded
order, accumulating gradients by summation over all paths.

Conventions kept deliberately strict so gradient rules stay auditable:

- all data is float64, row-major;
- elementwise binary ops require identical shapes (no implicit
  broadcasting); the one exception is leading batch dimensions in
  ``matmul``, plus the explicit ``add_bias`` helper;
- tensors are treated as immutable once created; training code mutates
  ``.data`` of leaf parameters only between tape lifetimes.

Single-threaded per tape: concurrent training/inference needs one tape per
thread (read-only sharing of tensors is safe).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A float64 ndarray plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return div_scalar(self, float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of op outputs; reverse replay drives backprop."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def record(self, node: Tensor):
        self._nodes.append(node)

    def clear(self):
        self._nodes.clear()

    def __len__(self):
        return len(self._nodes)


_TAPE = GradTape()
_GRAD_ENABLED = True


def tape() -> GradTape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def fresh_tape():
    """Swap in an empty tape for the duration of the block."""
    global _TAPE
    prev = _TAPE
    _TAPE = GradTape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def _out(data, parents, backward_fn) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._backward = backward_fn
        _TAPE.record(t)
    else:
        t.requires_grad = False
        t._backward = None
    return t


def backward(root: Tensor):
    """Populate ``.grad`` of every requires_grad leaf reachable from root.

    The root must be a scalar (shape ``()``) produced through recorded ops.
    """
    if root.data.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad (nothing recorded)")
    root.grad = np.ones(())
    for node in reversed(_TAPE._nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _out(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _out(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _out(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g / b.data)
        if b.requires_grad:
            b.accumulate(-g * out / b.data)

    return _out(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate(-g)

    return _out(-a.data, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a.accumulate(g)

    return _out(a.data + c, (a,), bw)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a.accumulate(g * c)

    return _out(a.data * c, (a,), bw)


def div_scalar(a: Tensor, c: float) -> Tensor:
    # true division, not multiply-by-reciprocal: keeps (x+x+x)/3 == x exact
    def bw(g):
        a.accumulate(g / c)

    return _out(a.data / c, (a,), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    def bw(g):
        a.accumulate(g * p * a.data ** (p - 1.0))

    return _out(a.data ** p, (a,), bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        a.accumulate(g * out)

    return _out(out, (a,), bw)


def tlog(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate(g / a.data)

    return _out(np.log(a.data), (a,), bw)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); zero gradient on the clamped region."""
    def bw(g):
        mask = a.data > floor
        a.accumulate(np.where(mask, g / np.where(mask, a.data, 1.0), 0.0))

    return _out(np.log(np.maximum(a.data, floor)), (a,), bw)


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _expit(a.data)

    def bw(g):
        a.accumulate(g * out * (1.0 - out))

    return _out(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate(g * (a.data > 0))

    return _out(np.maximum(a.data, 0.0), (a,), bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) computed as max(x, 0) + log1p(exp(-|x|))."""
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        a.accumulate(g * _expit(a.data))

    return _out(out, (a,), bw)


# -- reductions -----------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        gshape = [1 if i in axes else s for i, s in enumerate(shape)]
        g = g.reshape(gshape)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        a.accumulate(_expand_reduced(g, a.data.shape, axis, keepdims))

    return _out(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def bw(g):
        a.accumulate(_expand_reduced(g / n, a.data.shape, axis, keepdims))

    return _out(out, (a,), bw)


# -- structure ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a.accumulate(g.reshape(a.data.shape))

    return _out(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a.accumulate(g.transpose(inv))

    return _out(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _out(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a.accumulate(buf)

    return _out(a.data[idx].copy(), (a,), bw)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, indices, g)
        a.accumulate(buf)

    return _out(a.data[indices].copy(), (a,), bw)


# -- linear algebra ---------------------------------------------------------

def _unbroadcast_batch(g, shape):
    # matmul broadcasts only leading batch dims; trailing two always match
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape[:-2]):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} disagree")

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast_batch(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast_batch(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _out(np.matmul(a.data, b.data), (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., C] + b[C]: the one sanctioned broadcast besides matmul batching."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: {x.data.shape} with bias {b.data.shape}")

    def bw(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return _out(x.data + b.data, (x, b), bw)


# -- neural-net primitives ---------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shifted exp-normalize along ``axis``; slices sum to 1."""
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=ax, keepdims=True)
        x.accumulate((g - dot) * out)

    return _out(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last (channel) axis to mean 0 / var 1, then affine."""
    c = x.data.shape[-1]
    if c == 0:
        raise ShapeError("layer_norm: channel axis of size 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (dxhat - m1 - xhat * m2))

    return _out(out, (x, gain, bias), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Grouped cross-correlation with same zero padding.

    x: [C_in, H, W]; weight: [C_out, C_in/groups, kh, kw], kh/kw odd.
    """
    cin, h, w = x.data.shape
    cout, cpg, kh, kw = weight.data.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin}->{cout}) not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cpg} channels/group, input gives {cin // groups}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # [g, cpg*kh*kw, H*W]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(groups, cpg * kh * kw, h * w)
    w2 = weight.data.reshape(groups, cout // groups, cpg * kh * kw)
    out = np.matmul(w2, cols).reshape(cout, h, w)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        go = g.reshape(groups, cout // groups, h * w)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(1, 2)))
        if weight.requires_grad:
            weight.accumulate(np.matmul(go, cols.transpose(0, 2, 1)).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.transpose(0, 2, 1), go)
            dcols = dcols.reshape(cin, kh, kw, h, w)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h, j:j + w] += dcols[:, i, j]
            x.accumulate(dxp[:, ph:ph + h, pw:pw + w] if (ph or pw) else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _out(out, parents, bw)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """k-by-k average pooling, ceil mode; edge windows average actual coverage."""
    c, h, w = x.data.shape
    ho, wo = -(-h // k), -(-w // k)
    xp = np.pad(x.data, ((0, 0), (0, ho * k - h), (0, wo * k - w)))
    sums = xp.reshape(c, ho, k, wo, k).sum(axis=(2, 4))
    rh = np.minimum(np.arange(1, ho + 1) * k, h) - np.arange(ho) * k
    rw = np.minimum(np.arange(1, wo + 1) * k, w) - np.arange(wo) * k
    counts = rh[:, None] * rw[None, :]
    out = sums / counts

    def bw(g):
        gd = g / counts
        gexp = np.repeat(np.repeat(gd, k, axis=1), k, axis=2)
        x.accumulate(gexp[:, :h, :w])

    return _out(out, (x,), bw)


def _resize_axis_coords(n_in: int, n_out: int):
    """Integer-exact source coords for align_corners=False sampling."""
    i = np.arange(n_out)
    num = (2 * i + 1) * n_in - n_out
    den = 2 * n_out
    lo = num // den
    frac = (num - lo * den) / den
    i0 = np.clip(lo, 0, n_in - 1)
    i1 = np.clip(lo + 1, 0, n_in - 1)
    return i0, i1, frac


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of [C, H, W]; exact on constant inputs."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: output size {out_h}x{out_w}")
    c, h, w = x.data.shape
    y0, y1, fy = _resize_axis_coords(h, out_h)
    x0, x1, fx = _resize_axis_coords(w, out_w)
    a = x.data[:, y0, :]
    rows = a + fy[None, :, None] * (x.data[:, y1, :] - a)
    b = rows[:, :, x0]
    out = b + fx[None, None, :] * (rows[:, :, x1] - b)

    def bw(g):
        dr = np.zeros((c, out_h, w))
        np.add.at(dr, (slice(None), slice(None), x0), g * (1.0 - fx)[None, None, :])
        np.add.at(dr, (slice(None), slice(None), x1), g * fx[None, None, :])
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), y0, slice(None)), dr * (1.0 - fy)[None, :, None])
        np.add.at(dx, (slice(None), y1, slice(None)), dr * fy[None, :, None])
        x.accumulate(dx)

    return _out(out, (x,), bw)


def resize_bilinear_np(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Gradient-free resize for targets and score maps."""
    with no_grad():
        return resize_bilinear(Tensor(x), out_h, out_w).data


# -- gradient checking ---------------------------------------------------

def grad_check(f, inputs, eps: float = 1e-5, sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar Tensor and must rebuild its
    graph on every call. With ``sample`` set, at most that many entries per
    input are probed, chosen by descending gradient magnitude: central
    differences cannot resolve entries whose true gradient sits below the
    fp rounding noise of two objective evaluations, so sampled checks probe
    where the signal is. ``seed`` shuffles ties so equal-magnitude entries
    do not always resolve to the lowest index.

    Entries that disagree at ``eps`` are re-probed at smaller steps and the
    best agreement is kept. A probe interval straddling a relu kink breaks
    the smoothness this estimate needs, and shrinking the step moves the
    interval off the kink; a wrong gradient keeps failing at every step.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with fresh_tape():
        out = f(*inputs)
        backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            order = rng.permutation(flat.size)
            ranked = order[np.argsort(-np.abs(ana.reshape(-1)[order]), kind="stable")]
            idxs = ranked[:sample]
        for i in idxs:
            a = ana.reshape(-1)[i]
            orig = flat[i]

            def probe(step: float) -> float:
                with no_grad():
                    flat[i] = orig + step
                    fp = float(f(*inputs).data)
                    flat[i] = orig - step
                    fm = float(f(*inputs).data)
                    flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                return abs(a - num) / max(1e-8, abs(a) + abs(num))

            err = probe(eps)
            if err > 1e-6:
                err = min(err, probe(eps / 4.0), probe(eps / 16.0))
            if err > max_err:
                max_err = err
    return max_err


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)
