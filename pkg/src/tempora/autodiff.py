"""Dense fp64 tensors recorded on an explicit tape for reverse-mode gradients.

A Tape is a small per-step object: build one, run forward primitives on it,
call backward() once the loss is a scalar node, then throw the tape away.
Every primitive validates its output for NaN/Inf so numerical trouble
surfaces at the op that produced it instead of three modules downstream.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "Tape",
    "Gradients",
    "ELEMENTWISE_KINDS",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv1d_causal",
    "elementwise",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "square",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "reduce_sum",
    "mean_all",
    "concat",
    "stack",
    "index_axis",
    "slice_axis",
    "reshape",
    "backward",
    "finite_difference_check",
]


class NumericsError(ValueError):
    """A numerics primitive was called outside its contract."""


ELEMENTWISE_KINDS = ("sigmoid", "tanh", "relu", "exp", "log", "square")


class Tensor:
    """Shape-tagged fp64 array with a handle into the tape that produced it."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)}, node={self.node_id})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("kind", "parents", "ctx")

    def __init__(self, kind, parents, ctx):
        self.kind = kind
        self.parents = parents
        self.ctx = ctx


class Tape:
    """Ordered primitive records plus, after backward(), per-node gradient buffers.

    Node ids are indices into the record list, so parents always precede
    children and one reverse sweep settles every gradient. Tapes are confined
    to a single worker; distinct tapes are fully independent.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def leaf(self, values) -> Tensor:
        """Enter an input/parameter/constant array as a parentless node."""
        data = np.array(values, dtype=np.float64)
        return self._emit("leaf", (), (), data)

    def _emit(self, kind, parents, ctx, out) -> Tensor:
        self._records.append(_Record(kind, parents, ctx))
        return Tensor(out, self, len(self._records) - 1)

    def backward(self, loss: Tensor) -> "Gradients":
        """Reverse-accumulate d(loss)/d(node) for every node reachable from loss.

        Idempotent: calling twice on the same tape yields identical gradients.
        """
        if loss.tape is not self:
            raise NumericsError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise NumericsError(f"backward needs a scalar loss node, got shape {loss.data.shape}")
        buffers: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            grad = buffers.get(nid)
            if grad is None:
                continue
            rec = self._records[nid]
            if not rec.parents:
                continue
            for pid, pg in zip(rec.parents, _VJPS[rec.kind](rec.ctx, grad)):
                if pg is None:
                    continue
                held = buffers.get(pid)
                buffers[pid] = pg if held is None else held + pg
        return Gradients(buffers, self)


class Gradients:
    """Gradient buffers keyed by node id; nodes the loss never reached read as zero."""

    def __init__(self, buffers: dict[int, np.ndarray], tape: Tape):
        self._buffers = buffers
        self._tape = tape

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise NumericsError("tensor does not belong to the differentiated tape")
        g = self._buffers.get(t.node_id)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._buffers


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _tape_of(*operands) -> Tape:
    for op in operands:
        if isinstance(op, Tensor):
            return op.tape
    raise NumericsError("at least one operand must be a Tensor")


def _as_tensor(value, tape: Tape) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise NumericsError("operands were recorded on different tapes")
        return value
    return tape.leaf(np.asarray(value, dtype=np.float64))


def _validated(kind: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericsError(f"primitive '{kind}' produced non-finite values")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    out = _validated("add", a.data + b.data)
    return tape._emit("add", (a.node_id, b.node_id), (a.data.shape, b.data.shape), out)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    out = _validated("sub", a.data - b.data)
    return tape._emit("sub", (a.node_id, b.node_id), (a.data.shape, b.data.shape), out)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    out = _validated("mul", a.data * b.data)
    return tape._emit("mul", (a.node_id, b.node_id), (a.data, b.data), out)


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _validated("div", a.data / b.data)
    return tape._emit("div", (a.node_id, b.node_id), (a.data, b.data), out)


def neg(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out = _validated("neg", -a.data)
    return tape._emit("neg", (a.node_id,), (), out)


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericsError(
            f"matmul takes two matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise NumericsError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    out = _validated("matmul", a.data @ b.data)
    return tape._emit("matmul", (a.node_id, b.node_id), (a.data, b.data), out)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv1d_causal(x, kernel, bias) -> Tensor:
    """Left-padded causal convolution over the time axis.

    x is (T, c_in) or (B, T, c_in); kernel is (w, c_in, c_out); bias is (c_out,).
    out[t] = sum_{j<w} x[t-j] @ kernel[j] + bias with x[negative] treated as 0,
    so output index t sees only inputs at times <= t. Widths beyond T degrade
    to pure padding.
    """
    tape = _tape_of(x, kernel, bias)
    x, kernel, bias = _as_tensor(x, tape), _as_tensor(kernel, tape), _as_tensor(bias, tape)
    if x.data.ndim not in (2, 3):
        raise NumericsError(f"conv1d_causal input must be (T,c) or (B,T,c), got {x.data.shape}")
    if kernel.data.ndim != 3:
        raise NumericsError(f"conv1d_causal kernel must be (w,c_in,c_out), got {kernel.data.shape}")
    if bias.data.ndim != 1 or bias.data.shape[0] != kernel.data.shape[2]:
        raise NumericsError(
            f"conv1d_causal bias shape {bias.data.shape} does not match c_out {kernel.data.shape[2]}"
        )
    was_2d = x.data.ndim == 2
    xp = x.data[None] if was_2d else x.data
    w, c_in, _c_out = kernel.data.shape
    if w < 1:
        raise NumericsError("conv1d_causal kernel width must be >= 1")
    if xp.shape[1] == 0:
        raise NumericsError("conv1d_causal rejects zero-length input")
    if xp.shape[2] != c_in:
        raise NumericsError(
            f"conv1d_causal channel mismatch: input {xp.shape} vs kernel {kernel.data.shape}"
        )
    T = xp.shape[1]
    out = xp @ kernel.data[0]
    for j in range(1, min(w, T)):
        out[:, j:, :] += xp[:, : T - j, :] @ kernel.data[j]
    out += bias.data
    if was_2d:
        out = out[0]
    _validated("conv1d_causal", out)
    ctx = (xp, kernel.data, was_2d)
    return tape._emit("conv1d_causal", (x.node_id, kernel.node_id, bias.node_id), ctx, out)


def _vjp_conv1d_causal(ctx, grad):
    xp, kern, was_2d = ctx
    g = grad[None] if was_2d else grad
    w = kern.shape[0]
    T = xp.shape[1]
    gx = g @ kern[0].T
    gk = np.zeros_like(kern)
    gk[0] = np.einsum("bti,bto->io", xp, g)
    for j in range(1, min(w, T)):
        gx[:, : T - j, :] += g[:, j:, :] @ kern[j].T
        gk[j] = np.einsum("bti,bto->io", xp[:, : T - j, :], g[:, j:, :])
    gb = g.sum(axis=(0, 1))
    if was_2d:
        gx = gx[0]
    return gx, gk, gb


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _sigmoid_forward(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elementwise(x: Tensor, kind: str) -> Tensor:
    """Pointwise sigmoid/tanh/relu/exp/log/square; log rejects nonpositive input."""
    if kind not in ELEMENTWISE_KINDS:
        raise NumericsError(f"unknown elementwise kind '{kind}'")
    tape = _tape_of(x)
    if kind == "log" and np.any(x.data <= 0):
        raise NumericsError(f"log of nonpositive value (min {x.data.min()!r})")
    if kind == "sigmoid":
        out = _sigmoid_forward(x.data)
        saved = out
    elif kind == "tanh":
        out = np.tanh(x.data)
        saved = out
    elif kind == "relu":
        out = np.maximum(x.data, 0.0)
        saved = x.data > 0
    elif kind == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(x.data)
        saved = out
    elif kind == "log":
        out = np.log(x.data)
        saved = x.data
    else:  # square
        out = x.data * x.data
        saved = x.data
    _validated(kind, out)
    return tape._emit(kind, (x.node_id,), (saved,), out)


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return elementwise(x, "tanh")


def relu(x: Tensor) -> Tensor:
    return elementwise(x, "relu")


def exp(x: Tensor) -> Tensor:
    return elementwise(x, "exp")


def log(x: Tensor) -> Tensor:
    return elementwise(x, "log")


def square(x: Tensor) -> Tensor:
    return elementwise(x, "square")


# ---------------------------------------------------------------------------
# softmax and reductions
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis; each slice sums to 1."""
    tape = _tape_of(x)
    if x.data.shape[-1] < 1:
        raise NumericsError("softmax_lastdim needs a last extent >= 1")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    _validated("softmax_lastdim", out)
    return tape._emit("softmax_lastdim", (x.node_id,), (out,), out)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    """Stable log-softmax composed from primitives (safe for saturated logits)."""
    tape = _tape_of(x)
    m = tape.leaf(x.data.max(axis=-1, keepdims=True))
    e = exp(sub(x, m))
    lse = add(log(reduce_sum(e, axis=-1, keepdims=True)), m)
    return sub(x, lse)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    _validated("reduce_sum", out)
    ctx = (x.data.shape, axis, keepdims)
    return tape._emit("reduce_sum", (x.node_id,), ctx, out)


def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise NumericsError("mean of an empty tensor")
    return mul(reduce_sum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# shaping
# ---------------------------------------------------------------------------


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise NumericsError("concat of zero tensors")
    tape = _tape_of(*parts)
    parts = [_as_tensor(p, tape) for p in parts]
    axis = axis % parts[0].data.ndim
    out = _validated("concat", np.concatenate([p.data for p in parts], axis=axis))
    sizes = tuple(p.data.shape[axis] for p in parts)
    return tape._emit("concat", tuple(p.node_id for p in parts), (axis, sizes), out)


def stack(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise NumericsError("stack of zero tensors")
    tape = _tape_of(*parts)
    parts = [_as_tensor(p, tape) for p in parts]
    out = _validated("stack", np.stack([p.data for p in parts], axis=axis))
    axis = axis % out.ndim
    return tape._emit("stack", tuple(p.node_id for p in parts), (axis, len(parts)), out)


def index_axis(x: Tensor, idx: int, axis: int) -> Tensor:
    """Select a single index along an axis, removing that axis."""
    tape = _tape_of(x)
    axis = axis % x.data.ndim
    out = np.take(x.data, idx, axis=axis)
    return tape._emit("index_axis", (x.node_id,), (x.data.shape, idx, axis), out)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice [start:stop) along an axis, axis kept."""
    tape = _tape_of(x)
    axis = axis % x.data.ndim
    sel = [slice(None)] * x.data.ndim
    sel[axis] = slice(start, stop)
    out = x.data[tuple(sel)]
    return tape._emit("slice_axis", (x.node_id,), (x.data.shape, start, stop, axis), out)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    tape = _tape_of(x)
    out = x.data.reshape(shape)
    return tape._emit("reshape", (x.node_id,), (x.data.shape,), out)


# ---------------------------------------------------------------------------
# VJP table
# ---------------------------------------------------------------------------


def _vjp_add(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _vjp_sub(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _vjp_mul(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_div(ctx, g):
    a, b = ctx
    with np.errstate(divide="ignore", invalid="ignore"):
        ga = _unbroadcast(g / b, a.shape)
        gb = _unbroadcast(-g * a / (b * b), b.shape)
    return ga, gb


def _vjp_neg(_ctx, g):
    return (-g,)


def _vjp_matmul(ctx, g):
    a, b = ctx
    return g @ b.T, a.T @ g


def _vjp_sigmoid(ctx, g):
    s = ctx[0]
    return (g * s * (1.0 - s),)


def _vjp_tanh(ctx, g):
    t = ctx[0]
    return (g * (1.0 - t * t),)


def _vjp_relu(ctx, g):
    return (g * ctx[0],)


def _vjp_exp(ctx, g):
    return (g * ctx[0],)


def _vjp_log(ctx, g):
    return (g / ctx[0],)


def _vjp_square(ctx, g):
    return (g * 2.0 * ctx[0],)


def _vjp_softmax(ctx, g):
    s = ctx[0]
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _vjp_reduce_sum(ctx, g):
    shape, axis, keepdims = ctx
    if axis is None:
        return (np.full(shape, float(g.reshape(()))),)
    gg = g if keepdims else np.expand_dims(g, axis)
    return (np.array(np.broadcast_to(gg, shape)),)


def _vjp_concat(ctx, g):
    axis, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _vjp_stack(ctx, g):
    axis, n = ctx
    return tuple(np.take(g, i, axis=axis) for i in range(n))


def _vjp_index_axis(ctx, g):
    shape, idx, axis = ctx
    gx = np.zeros(shape)
    sel = [slice(None)] * len(shape)
    sel[axis] = idx
    gx[tuple(sel)] = g
    return (gx,)


def _vjp_slice_axis(ctx, g):
    shape, start, stop, axis = ctx
    gx = np.zeros(shape)
    sel = [slice(None)] * len(shape)
    sel[axis] = slice(start, stop)
    gx[tuple(sel)] = g
    return (gx,)


def _vjp_reshape(ctx, g):
    return (g.reshape(ctx[0]),)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "conv1d_causal": _vjp_conv1d_causal,
    "sigmoid": _vjp_sigmoid,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "square": _vjp_square,
    "softmax_lastdim": _vjp_softmax,
    "reduce_sum": _vjp_reduce_sum,
    "concat": _vjp_concat,
    "stack": _vjp_stack,
    "index_axis": _vjp_index_axis,
    "slice_axis": _vjp_slice_axis,
    "reshape": _vjp_reshape,
}


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def finite_difference_check(f, x, eps: float) -> float:
    """Max relative error between backward() and central differences.

    f maps a leaf Tensor to a scalar Tensor and is re-evaluated on a fresh
    tape per probe, two probes per coordinate. The relative error per
    coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise NumericsError("finite_difference_check needs eps > 0")
    x0 = np.array(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0)
    out = f(xt)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise NumericsError("finite_difference_check needs f to return a scalar tensor")
    analytic = tape.backward(out).wrt(xt).ravel()

    def value_at(arr: np.ndarray) -> float:
        t = Tape()
        return f(t.leaf(arr)).item()

    flat = x0.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value_at(x0)
        flat[i] = orig - eps
        fm = value_at(x0)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return worst
