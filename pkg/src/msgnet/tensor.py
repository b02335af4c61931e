"""Dense tensors with reverse-mode automatic differentiation.

Every learnable block in this package is built from the operations here.
Values are numpy arrays in row-major order; a module-level tape records
each executed operation together with its backward rule, and ``backward``
replays the rules in reverse execution order.

Two precisions are supported: float32 is the runtime default, float64
exists for finite-difference gradient checks (central differences are
unreliable at 32-bit).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

MSGT_MAGIC = b"MSGT"


class Tensor:
    """N-dimensional value, optionally paired with a same-shape gradient.

    Tensors created directly are leaves; ``grad`` buffers on leaves
    persist across ``backward`` calls and accumulate. Tensors produced by
    operations get a fresh gradient buffer on each backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

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
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        """Same values, cut off from the tape (constant in backward)."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


class Tape:
    """Append-only record of executed operations.

    Each entry is ``(out, backward_fn)`` where ``backward_fn`` scatters
    ``out.grad`` into the gradients of the operation's inputs. Replaying
    entries in reverse execution order computes exact reverse-mode
    gradients. Cleared only by an explicit reset.
    """

    def __init__(self):
        self.entries = []

    def append(self, out, backward_fn):
        self.entries.append((out, backward_fn))

    def reset(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape():
    return _TAPE


def reset_tape():
    _TAPE.reset()


@contextmanager
def use_tape(t):
    """Run forward passes against an independent tape."""
    global _TAPE
    prev = _TAPE
    _TAPE = t
    try:
        yield t
    finally:
        _TAPE = prev


@contextmanager
def no_grad():
    """Suspend tape recording (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make_out(data, inputs, backward_fn):
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req
    out.grad = None
    if req:
        _TAPE.append(out, backward_fn)
    return out


def _accum(t, g):
    """Add a gradient contribution to a tensor, allocating lazily."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss, on=None):
    """Populate ``grad`` of every tensor the scalar ``loss`` depends on.

    Leaf gradients accumulate across calls; intermediate gradients are
    recomputed from scratch each call.
    """
    tp = on if on is not None else _TAPE
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    outs = {id(out) for out, _ in tp.entries}
    if id(loss) not in outs:
        raise ValueError("loss was not produced on this tape")
    # intermediates get fresh buffers; leaves keep theirs (accumulation)
    for out, _ in tp.entries:
        out.grad = np.zeros_like(out.data)
    loss.grad[...] = 1.0
    for out, fn in reversed(tp.entries):
        if np.any(out.grad):
            fn(out.grad)


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after trailing-dim broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_b(a, b, opname):
    try:
        return np.broadcast_to(b.data, a.data.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shape {b.data.shape} not broadcastable to {a.data.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    bb = _broadcast_b(a, b, "add")
    out = _make_out(a.data + bb, (a, b), None)

    def bw(g):
        _accum(a, g)
        _accum(b, _unbroadcast(g, b.data.shape))

    _set_bw(out, bw)
    return out


def sub(a, b):
    bb = _broadcast_b(a, b, "sub")
    out = _make_out(a.data - bb, (a, b), None)

    def bw(g):
        _accum(a, g)
        _accum(b, -_unbroadcast(g, b.data.shape))

    _set_bw(out, bw)
    return out


def mul(a, b):
    bb = _broadcast_b(a, b, "mul")
    out = _make_out(a.data * bb, (a, b), None)

    def bw(g):
        _accum(a, g * bb)
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    _set_bw(out, bw)
    return out


def div(a, b):
    bb = _broadcast_b(a, b, "div")
    out = _make_out(a.data / bb, (a, b), None)

    def bw(g):
        _accum(a, g / bb)
        _accum(b, _unbroadcast(-g * a.data / (bb * bb), b.data.shape))

    _set_bw(out, bw)
    return out


def neg(a):
    out = _make_out(-a.data, (a,), None)
    _set_bw(out, lambda g: _accum(a, -g))
    return out


def _set_bw(out, fn):
    # entries are appended in _make_out before the closure exists
    if out.requires_grad:
        ent = _TAPE.entries
        for i in range(len(ent) - 1, -1, -1):
            if ent[i][0] is out:
                ent[i] = (out, fn)
                return
        raise AssertionError("output not found on tape")


def elementwise(a, b, kind):
    """Spec surface for the basic binary ops."""
    try:
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def minimum(a, b):
    bb = _broadcast_b(a, b, "minimum")
    take_a = a.data <= bb
    out = _make_out(np.where(take_a, a.data, bb), (a, b), None)

    def bw(g):
        _accum(a, g * take_a)
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    _set_bw(out, bw)
    return out


def maximum(a, b):
    bb = _broadcast_b(a, b, "maximum")
    take_a = a.data >= bb
    out = _make_out(np.where(take_a, a.data, bb), (a, b), None)

    def bw(g):
        _accum(a, g * take_a)
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    _set_bw(out, bw)
    return out


def clamp(a, lo=None, hi=None):
    y = a
    if lo is not None:
        y = maximum(y, _as_tensor(np.asarray(lo, dtype=a.dtype)))
    if hi is not None:
        y = minimum(y, _as_tensor(np.asarray(hi, dtype=a.dtype)))
    return y


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner mismatch: {a.shape} x {b.shape}")
    out = _make_out(a.data @ b.data, (a, b), None)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _set_bw(out, bw)
    return out


def transpose(a, axes=None):
    ax = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    inv = np.argsort(ax)
    out = _make_out(np.ascontiguousarray(a.data.transpose(ax)), (a,), None)
    _set_bw(out, lambda g: _accum(a, g.transpose(inv)))
    return out


def reshape(a, shape):
    out = _make_out(a.data.reshape(shape), (a,), None)
    _set_bw(out, lambda g: _accum(a, g.reshape(a.data.shape)))
    return out


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    out = _make_out(np.concatenate(datas, axis=axis), tuple(tensors), None)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    _set_bw(out, bw)
    return out


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0
    out = _make_out(np.where(mask, x.data, 0.0), (x,), None)
    _set_bw(out, lambda g: _accum(x, g * mask))
    return out


def sigmoid(x):
    s = _sigmoid_np(x.data)
    out = _make_out(s, (x,), None)
    _set_bw(out, lambda g: _accum(x, g * s * (1.0 - s)))
    return out


def softplus(x):
    y = _softplus_np(x.data)
    s = _sigmoid_np(x.data)
    out = _make_out(y, (x,), None)
    _set_bw(out, lambda g: _accum(x, g * s))
    return out


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x):
    # log(1 + exp(x)); for x > 30 the linear term dominates to machine precision
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def exp(x):
    e = np.exp(x.data)
    out = _make_out(e, (x,), None)
    _set_bw(out, lambda g: _accum(x, g * e))
    return out


def log(x):
    out = _make_out(np.log(x.data), (x,), None)
    _set_bw(out, lambda g: _accum(x, g / x.data))
    return out


def atan(x):
    out = _make_out(np.arctan(x.data), (x,), None)
    _set_bw(out, lambda g: _accum(x, g / (1.0 + x.data * x.data)))
    return out


def activation(x, kind):
    """Spec surface for the unary activations."""
    try:
        return {"relu": relu, "sigmoid": sigmoid, "softplus": softplus}[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make_out(s, (x,), None)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    _set_bw(out, bw)
    return out


def log_softmax(x, axis):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    s = np.exp(y)
    out = _make_out(y, (x,), None)

    def bw(g):
        _accum(x, g - s * g.sum(axis=axis, keepdims=True))

    _set_bw(out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims=False):
    out = _make_out(x.data.sum(axis=axis, keepdims=keepdims), (x,), None)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    _set_bw(out, bw)
    return out


def reduce_mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return reduce_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def global_avg_pool(x):
    """[B,C,H,W] -> [B,C] spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool needs a 4-D map, got {x.shape}")
    b, c, h, w = x.shape
    out = _make_out(x.data.mean(axis=(2, 3)), (x,), None)

    def bw(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    _set_bw(out, bw)
    return out


def reduce(x, kind):
    """Spec surface for the reductions."""
    if kind == "sum":
        return reduce_sum(x)
    if kind == "mean":
        return reduce_mean(x)
    if kind == "global_avg_pool_spatial":
        return global_avg_pool(x)
    raise ValueError(f"unknown reduce kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d needs 4-D input/kernel, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cink, kh, kw = w.shape
    if Cin != Cink:
        raise ValueError(f"conv2d channel mismatch: input {Cin}, kernel {Cink}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    if OH < 1 or OW < 1:
        raise ValueError(
            f"conv2d output would be empty: input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        (B, Cin, kh, kw, OH, OW),
        (s0, s1, s2, s3, stride * s2, stride * s3),
        writeable=False,
    )
    cols = windows.reshape(B, Cin * kh * kw, OH * OW)
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    y = np.matmul(wmat, cols)
    y += b.data[None, :, None]
    out = _make_out(y.reshape(B, Cout, OH, OW), (x, w, b), None)

    def bw(g):
        gm = g.reshape(B, Cout, OH * OW)
        _accum(b, gm.sum(axis=(0, 2)))
        _accum(
            w,
            np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape),
        )
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)
            dcols = dcols.reshape(B, Cin, kh, kw, OH, OW)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, :, i : i + OH * stride : stride, j : j + OW * stride : stride
                    ] += dcols[:, :, i, j]
            _accum(x, dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp)

    _set_bw(out, bw)
    return out


# ---------------------------------------------------------------------------
# spatial ops


def bilinear_resize(x, out_h, out_w):
    """Half-pixel-center bilinear interpolation of [B,C,H,W]."""
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize needs a 4-D map, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target must be >= 1, got {out_h}x{out_w}")
    B, C, H, W = x.shape
    ys = np.clip((np.arange(out_h) + 0.5) * H / out_h - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * W / out_w - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(x.dtype)
    wx = (xs - x0).astype(x.dtype)
    corners = (
        (y0, x0, (1 - wy)[:, None] * (1 - wx)[None, :]),
        (y0, x1, (1 - wy)[:, None] * wx[None, :]),
        (y1, x0, wy[:, None] * (1 - wx)[None, :]),
        (y1, x1, wy[:, None] * wx[None, :]),
    )
    y = np.zeros((B, C, out_h, out_w), dtype=x.dtype)
    for iy, ix, w in corners:
        y += x.data[:, :, iy[:, None], ix[None, :]] * w
    out = _make_out(y, (x,), None)

    def bw(g):
        dx = np.zeros((B * C, H * W), dtype=x.dtype)
        rows = np.arange(B * C)[:, None]
        gf = g.reshape(B * C, out_h * out_w)
        for iy, ix, w in corners:
            flat = (iy[:, None] * W + ix[None, :]).reshape(-1)
            np.add.at(dx, (rows, flat[None, :]), gf * w.reshape(-1)[None, :])
        _accum(x, dx.reshape(B, C, H, W))

    _set_bw(out, bw)
    return out


def crop(x, top, left, h, w):
    """Copy of a rectangle of [B,C,H,W]; backward scatters into the region."""
    if x.ndim != 4:
        raise ValueError(f"crop needs a 4-D map, got {x.shape}")
    B, C, H, W = x.shape
    if top < 0 or left < 0 or h < 1 or w < 1 or top + h > H or left + w > W:
        raise ValueError(
            f"crop rectangle ({top},{left},{h},{w}) out of bounds for {H}x{W}"
        )
    out = _make_out(x.data[:, :, top : top + h, left : left + w].copy(), (x,), None)

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, top : top + h, left : left + w] = g
        _accum(x, dx)

    _set_bw(out, bw)
    return out


def paste(full, patch, top, left):
    """Copy of ``full`` with ``patch`` written over the given rectangle."""
    B, C, H, W = full.shape
    _, _, h, w = patch.shape
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValueError(f"paste rectangle ({top},{left},{h},{w}) exceeds {H}x{W}")
    y = full.data.copy()
    y[:, :, top : top + h, left : left + w] = patch.data
    out = _make_out(y, (full, patch), None)

    def bw(g):
        gh = g.copy()
        gh[:, :, top : top + h, left : left + w] = 0.0
        _accum(full, gh)
        _accum(patch, g[:, :, top : top + h, left : left + w])

    _set_bw(out, bw)
    return out


def narrow(x, axis, start, length):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make_out(x.data[idx].copy(), (x,), None)

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        _accum(x, dx)

    _set_bw(out, bw)
    return out


# ---------------------------------------------------------------------------
# gather / segment ops (sparse aggregation kernels)


def gather_rows(x, idx):
    """[N,d] rows selected by an int array -> [E,d]; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _make_out(x.data[idx], (x,), None)

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(x, dx)

    _set_bw(out, bw)
    return out


def gather2d(x, rows, cols):
    """Pick entries x[rows[e], cols[e]] -> [E]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = _make_out(x.data[rows, cols].copy(), (x,), None)

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, cols), g)
        _accum(x, dx)

    _set_bw(out, bw)
    return out


def segment_softmax(vals, seg_ids, num_segments):
    """Softmax of a flat vector within contiguous segments.

    Segments with no members simply contribute nothing. Numerically
    stabilized with a per-segment max shift.
    """
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    mx = np.full(num_segments, -np.inf, dtype=vals.dtype)
    np.maximum.at(mx, seg_ids, vals.data)
    e = np.exp(vals.data - mx[seg_ids])
    tot = np.zeros(num_segments, dtype=vals.dtype)
    np.add.at(tot, seg_ids, e)
    w = e / tot[seg_ids]
    out = _make_out(w, (vals,), None)

    def bw(g):
        s = np.zeros(num_segments, dtype=vals.dtype)
        np.add.at(s, seg_ids, g * w)
        _accum(vals, w * (g - s[seg_ids]))

    _set_bw(out, bw)
    return out


def segment_weighted_sum(weights, vals, seg_ids, num_segments):
    """out[s] = sum over edges e in segment s of weights[e] * vals[e, :]."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    y = np.zeros((num_segments, vals.shape[1]), dtype=vals.dtype)
    np.add.at(y, seg_ids, weights.data[:, None] * vals.data)
    out = _make_out(y, (weights, vals), None)

    def bw(g):
        ge = g[seg_ids]
        _accum(weights, (ge * vals.data).sum(axis=1))
        _accum(vals, weights.data[:, None] * ge)

    _set_bw(out, bw)
    return out


# ---------------------------------------------------------------------------
# MSGT serialization: magic, u32 LE rank, rank x u32 extents, f32 LE payload


def dump_msgt(arr, fp):
    arr = np.asarray(arr)
    fp.write(MSGT_MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    for n in arr.shape:
        fp.write(struct.pack("<I", n))
    fp.write(arr.astype("<f4").tobytes(order="C"))


def load_msgt(fp):
    magic = fp.read(4)
    if magic != MSGT_MAGIC:
        raise ValueError(f"bad MSGT magic {magic!r}")
    (rank,) = struct.unpack("<I", fp.read(4))
    shape = tuple(struct.unpack("<I", fp.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fp.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated MSGT payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
