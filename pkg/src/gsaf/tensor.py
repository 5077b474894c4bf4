"""Dense float64 tensors with a dynamic reverse-mode differentiation tape.

Design notes:

- A Tensor is immutable after construction and safe to share across
  threads. A ComputationTape is single-threaded and rebuilt per forward
  pass; parallelism happens at the granularity of whole passes on
  independent tapes.
- Nodes are recorded in creation order, which is automatically a
  topological order (an op's inputs must exist before its output). The
  backward pass walks the tape once in reverse, so gradient accumulation
  order is fixed and runs are bit-reproducible.
- There is no silent broadcasting. Elementwise ops take equal shapes or a
  Python scalar; every other shape-mixing pattern has its own named op
  (add_bias, scale_time, the batched matmul variants).
"""

import numpy as np

from . import _kernels
from .errors import ShapeError, ValidationError

_TAPE_STACK = []


class ComputationTape:
    """Ordered record of executed primitives for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "vjp", "parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.vjp = None
        self.parents = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalar operands must be Python numbers.
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
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not provided; multiply by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _result(data, parents, vjp):
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(data)
    if _TAPE_STACK:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.vjp = vjp
                out.parents = parents
                _TAPE_STACK[-1].nodes.append(out)
                break
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(tape: ComputationTape, loss: Tensor):
    """Propagate d(loss)/d(node) to every tensor recorded on the tape.

    Leaf tensors (parameters) end up with their gradient in ``.grad``;
    leaves that do not reach the loss keep ``grad is None`` and read as
    exact zeros downstream.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones(())
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        node.vjp(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")

        def vjp(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)

        return _result(a.data + b.data, (a, b), vjp)

    s = float(b)

    def vjp(g, a=a):
        _accum(a, g)

    return _result(a.data + s, (a,), vjp)


def sub(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")

        def vjp(g, a=a, b=b):
            _accum(a, g)
            _accum(b, -g)

        return _result(a.data - b.data, (a, b), vjp)
    if isinstance(a, Tensor):
        return add(a, -float(b))
    return add(neg(b), float(a))


def neg(a):
    def vjp(g, a=a):
        _accum(a, -g)

    return _result(-a.data, (a,), vjp)


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")

        def vjp(g, a=a, b=b):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _result(a.data * b.data, (a, b), vjp)

    s = float(b)

    def vjp(g, a=a):
        _accum(a, g * s)

    return _result(a.data * s, (a,), vjp)


def tanh(a):
    out_data = np.tanh(a.data)

    def vjp(g, a=a, y=out_data):
        _accum(a, g * (1.0 - y * y))

    return _result(out_data, (a,), vjp)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def vjp(g, a=a, y=out_data):
        _accum(a, g * y * (1.0 - y))

    return _result(out_data, (a,), vjp)


def relu(a):
    out_data = np.maximum(a.data, 0.0)

    def vjp(g, a=a, y=out_data):
        _accum(a, g * (y > 0.0))

    return _result(out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# structural


def matmul(a, b):
    """Matrix product. Supported shapes:

    (m,k) @ (k,n), (B,m,k) @ (B,k,n), and the mixed forms where a rank-2
    operand is shared across the batch of the rank-3 one.
    """
    ad, bd = a.data, b.data
    ra, rb = ad.ndim, bd.ndim
    ok = ra in (2, 3) and rb in (2, 3) and ad.shape[-1] == bd.shape[-2]
    if ra == 3 and rb == 3 and ad.shape[0] != bd.shape[0]:
        ok = False
    if not ok:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} are incompatible")

    out_data = np.matmul(ad, bd)

    def vjp(g, a=a, b=b, ra=ra, rb=rb):
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ra == 2 and rb == 3:
                da = da.sum(axis=0)
            _accum(a, da)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if rb == 2 and ra == 3:
                db = db.sum(axis=0)
            _accum(b, db)

    return _result(out_data, (a, b), vjp)


def transpose(a):
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.data.shape}")

    def vjp(g, a=a):
        _accum(a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2), (a,), vjp)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")

    def vjp(g, a=a):
        _accum(a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), vjp)


def concat(parts, axis):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    offsets = [0]
    for d in datas:
        offsets.append(offsets[-1] + d.shape[axis])

    def vjp(g, parts=parts, offsets=offsets, axis=axis):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _result(out_data, tuple(parts), vjp)


def tsum(a, axis=None):
    """Sum reduction over one axis or over everything."""

    def vjp(g, a=a, axis=axis):
        if axis is None:
            _accum(a, np.full(a.data.shape, g))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _result(a.data.sum(axis=axis), (a,), vjp)


def tmean(a, axis=None):
    count = a.data.size if axis is None else a.data.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def vjp(g, a=a, axis=axis, count=count):
        if axis is None:
            _accum(a, np.full(a.data.shape, g / count))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / count, axis), a.data.shape).copy())

    return _result(a.data.mean(axis=axis), (a,), vjp)


def softmax(a, axis):
    """Max-stabilized softmax along ``axis``; slices sum to one."""
    if a.data.shape[axis] == 0:
        raise ValidationError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, a=a, y=out_data, axis=axis):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _result(out_data, (a,), vjp)


def layernorm(a, axis=1, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = d * inv

    def vjp(g, a=a, y=out_data, inv=inv, axis=axis):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - y * gym))

    return _result(out_data, (a,), vjp)


def add_bias(x, b):
    """Add a vector along axis 1, broadcast over every other axis."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape}")
    bshape = (1, b.data.shape[0]) + (1,) * (x.data.ndim - 2)
    out_data = x.data + b.data.reshape(bshape)

    def vjp(g, x=x, b=b):
        _accum(x, g)
        if b.requires_grad:
            axes = tuple(i for i in range(g.ndim) if i != 1)
            _accum(b, g.sum(axis=axes))

    return _result(out_data, (x, b), vjp)


def scale_time(x, w):
    """Multiply a (..., n) tensor by a per-position vector w of length n."""
    if w.data.ndim != 1 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"scale_time: shapes {x.data.shape} and {w.data.shape}")
    out_data = x.data * w.data

    def vjp(g, x=x, w=w):
        _accum(x, g * w.data)
        if w.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(w, (g * x.data).sum(axis=axes))

    return _result(out_data, (x, w), vjp)


def embedding(table, ids):
    """Look up rows of ``table`` (V, d) for an int array ids (B, n) -> (B, d, n)."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.data.shape[0]:
        raise ValidationError(
            f"token id out of range [0, {table.data.shape[0]}) in embedding lookup"
        )
    out_data = table.data[ids].transpose(0, 2, 1)

    def vjp(g, table=table, ids=ids):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.ravel(), g.transpose(0, 2, 1).reshape(-1, table.data.shape[1]))
            _accum(table, dt)

    return _result(out_data, (table,), vjp)


def mse_loss(pred, target):
    """Mean of squared differences over every element."""
    _check_same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    out_data = np.asarray((diff * diff).mean())

    def vjp(g, pred=pred, target=target, diff=diff):
        scale = 2.0 / diff.size
        _accum(pred, g * scale * diff)
        _accum(target, -g * scale * diff)

    return _result(out_data, (pred, target), vjp)


# ---------------------------------------------------------------------------
# fused sequence / interaction primitives


def lstm_seq(x, wx, wh, b, lens, reverse=False):
    """One LSTM direction over a batch of padded sequences.

    x (B,d,n), wx (4h,d), wh (4h,h), b (4h,); lens is a plain int array of
    valid lengths. Output (B,h,n) is zero at padded positions and the
    recurrence never reads them, so pads cannot leak into valid steps.
    """
    B, d, n = x.data.shape
    fourh = wx.data.shape[0]
    if wx.data.shape[1] != d or wh.data.shape != (fourh, fourh // 4) or b.data.shape != (fourh,):
        raise ShapeError(
            f"lstm_seq: x {x.data.shape}, wx {wx.data.shape}, wh {wh.data.shape}, b {b.data.shape}"
        )
    lens = np.asarray(lens, dtype=np.intp)
    xp = np.matmul(wx.data, x.data)  # (B, 4h, n)
    hs, gates, cs = _kernels.lstm_seq_forward(xp, wh.data, b.data, lens, bool(reverse))

    def vjp(g, x=x, wx=wx, wh=wh, b=b, hs=hs, gates=gates, cs=cs, lens=lens, reverse=reverse):
        dxp, dwh, db = _kernels.lstm_seq_backward(
            np.ascontiguousarray(g), wh.data, hs, gates, cs, lens, bool(reverse)
        )
        _accum(wh, dwh)
        _accum(b, db)
        if wx.requires_grad:
            _accum(wx, np.matmul(dxp, x.data.transpose(0, 2, 1)).sum(axis=0))
        if x.requires_grad:
            _accum(x, np.matmul(wx.data.T, dxp))

    return _result(hs, (x, wx, wh, b), vjp)


def bilinear_time(fa, w, fj):
    """Per-timestep bilinear forms out[b,r,t] = fa[b,:,t]^T w[r] fj[b,:,t].

    fa (B,p,n), w (r,p,q), fj (B,q,n) -> (B,r,n).
    """
    B, p, n = fa.data.shape
    r, wp, q = w.data.shape
    if wp != p or fj.data.shape != (B, q, n):
        raise ShapeError(
            f"bilinear_time: fa {fa.data.shape}, w {w.data.shape}, fj {fj.data.shape}"
        )
    # tmp[b,r,p,t] = sum_q w[r,p,q] fj[b,q,t], done as one GEMM
    tmp = np.matmul(w.data.reshape(r * p, q), fj.data).reshape(B, r, p, n)
    out_data = (tmp * fa.data[:, None, :, :]).sum(axis=2)

    def vjp(g, fa=fa, w=w, fj=fj, tmp=tmp):
        if fa.requires_grad:
            _accum(fa, (g[:, :, None, :] * tmp).sum(axis=1))
        if w.requires_grad or fj.requires_grad:
            dtmp = (g[:, :, None, :] * fa.data[:, None, :, :]).reshape(B, r * p, n)
            if w.requires_grad:
                dw = np.matmul(dtmp, fj.data.transpose(0, 2, 1)).sum(axis=0)
                _accum(w, dw.reshape(r, p, q))
            if fj.requires_grad:
                _accum(fj, np.matmul(w.data.reshape(r * p, q).T, dtmp))

    return _result(out_data, (fa, w, fj), vjp)
