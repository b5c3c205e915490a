"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tape` records every primitive whose inputs include a recorded
tensor.  Tensors built without a tape (``node_id is None``) are constants,
so the same model code runs for inference (no tape) and for training.

Broadcasting is restricted to leading-dimension expansion: in a binary
elementwise op the smaller operand's shape must equal the trailing dims of
the larger one (scalars included).
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

L2_EPS = 1e-12
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class GradientCheckFailure(ArithmeticError):
    def __init__(self, index: int, message: str):
        super().__init__(f"coordinate {index}: {message}")
        self.index = index


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def recorded(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.recorded else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all routed through the primitives below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of operations.  Not thread-safe; use one per thread."""

    def __init__(self):
        self._backward_fns: list[Callable[[np.ndarray], Sequence[np.ndarray | None]] | None] = []
        self._inputs: list[tuple[int | None, ...]] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._shapes)

    def leaf(self, data) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("empty tensor")
        return self._push(arr, None, ())

    def _push(self, data: np.ndarray, backward_fn, inputs: tuple[int | None, ...]) -> Tensor:
        node = len(self._shapes)
        self._backward_fns.append(backward_fn)
        self._inputs.append(inputs)
        self._shapes.append(data.shape)
        return Tensor(data, self, node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar ``loss`` w.r.t. every node on this tape."""
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
        grads[loss.node_id] = np.ones(self._shapes[loss.node_id])
        for node in range(loss.node_id, -1, -1):
            g = grads[node]
            fn = self._backward_fns[node]
            if g is None or fn is None:
                continue
            for parent, pg in zip(self._inputs[node], fn(g)):
                if parent is None or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        return {
            node: (g if g is not None else np.zeros(self._shapes[node]))
            for node, g in enumerate(grads)
        }


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.tape is None:
        raise ValueError("loss is not recorded on a tape")
    return loss.tape.backward(loss)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_nonempty(*xs: Tensor) -> None:
    for x in xs:
        if x.data.size == 0:
            raise ShapeError("empty tensor")


def _record(out: np.ndarray, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    inputs = tuple(inputs)
    tape = None
    for x in inputs:
        if x.node_id is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = x.tape
    if tape is None:
        return Tensor(out)
    return tape._push(out, backward_fn, tuple(x.node_id for x in inputs))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.recorded, b.recorded
    return _record(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    _check_broadcast(a, b, "maximum")
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return _record(
        np.where(pick_a, ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    _check_broadcast(a, b, "minimum")
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return _record(
        np.where(pick_a, ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)),
    )


def _unary(x, fn, dfn) -> Tensor:
    x = _as_tensor(x)
    _check_nonempty(x)
    xd = x.data
    out = fn(xd)
    return _record(out, (x,), lambda g: (g * dfn(xd, out),))


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64))


def sigmoid(x) -> Tensor:
    def fwd(v):
        # split by sign so exp never overflows
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        e = np.exp(v[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd, lambda v, o: o * (1.0 - o))


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda v, o: o)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda v, o: 1.0 / v)


def abs_(x) -> Tensor:
    return _unary(x, np.abs, lambda v, o: np.sign(v))


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda v, o: np.cos(v))


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda v, o: -np.sin(v))


# ------------------------------------------------------------------ reductions


def sum_(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    _check_nonempty(x)
    shape = x.shape
    if axis is None:
        return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.data.sum(axis=axis)
    return _record(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    _check_nonempty(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    x = _as_tensor(x)
    _check_nonempty(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    _check_nonempty(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _record(xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize(x, eps: float = L2_EPS) -> Tensor:
    """Divide by max(||x||, eps) along the last axis."""
    x = _as_tensor(x)
    _check_nonempty(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    out = xd / denom

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(clipped, g / eps, (g - out * proj) / denom),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_nonempty(a, b)
    if a.data.ndim not in (2, 3) or a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul: expected two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.recorded, b.recorded
    return _record(
        ad @ bd,
        (a, b),
        lambda g: (
            g @ np.swapaxes(bd, -1, -2) if need_a else None,
            np.swapaxes(ad, -1, -2) @ g if need_b else None,
        ),
    )


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    _check_nonempty(*xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def slice_(x, index) -> Tensor:
    x = _as_tensor(x)
    _check_nonempty(x)
    out = x.data[index]
    if out.size == 0:
        raise ShapeError(f"slice {index!r} of shape {x.shape} is empty")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), (x,), bw)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    _check_nonempty(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _as_tensor(x)
    _check_nonempty(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "l2_normalize": l2_normalize,
    "sum": sum_,
    "mean": mean,
    "log": log,
    "exp": exp,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- grad check


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    params,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a parameter tensor to a scalar tensor and must be pure.  When
    ``coords`` is given only those flat indices are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(base)
    out = f(x)
    if out.data.size != 1:
        raise ShapeError("f must return a scalar")
    if out.node_id is None:
        analytic = np.zeros(base.size)
    else:
        analytic = tape.backward(out)[x.node_id].ravel()
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.ravel()
    for i in idx:
        if not np.isfinite(analytic[i]):
            raise GradientCheckFailure(i, "analytic gradient is not finite")
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = float(f(Tensor(hi.reshape(base.shape))).data)
        f_lo = float(f(Tensor(lo.reshape(base.shape))).data)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise GradientCheckFailure(i, "f returned a non-finite value")
        numeric = (f_hi - f_lo) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------- checkpoints

_MAGIC = b"MQTCKPT1"


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    """Binary layout, little-endian throughout:

    magic ``MQTCKPT1`` | u32 record count | per record:
    u32 name length, utf-8 name, u32 ndim, ndim x u64 dims, float64 values (C order).
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = np.array(value, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return params
