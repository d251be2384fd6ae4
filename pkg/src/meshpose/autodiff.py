"""Reverse-mode automatic differentiation on dense float64 arrays.

A small dynamic tape: every operation records its parents and the
vector-Jacobian products needed to push gradients back to them.  Storage is
plain numpy; there is no GPU path, no operator fusion, and broadcasting is
restricted to size-1 axes (or 0-d scalars).  A tape belongs to one worker;
``backward`` consumes it.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = [
    "Tensor",
    "AdamState",
    "tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "leaky_relu",
    "sigmoid",
    "matmul",
    "conv1d_pointwise",
    "reduce_sum",
    "reduce_mean",
    "reduce_std",
    "reduce_max",
    "reshape",
    "moveaxis",
    "concat",
    "take",
    "stop_gradient",
    "backward",
    "adam_step",
    "set_checked",
    "is_checked",
    "save_checkpoint",
    "load_checkpoint",
]

_CHECKED = True


def set_checked(enabled: bool) -> bool:
    """Toggle non-finite result checking; returns the previous setting."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(enabled)
    return prev


def is_checked() -> bool:
    return _CHECKED


def _check_finite(data, op):
    if _CHECKED and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced a non-finite value (checked mode)")


class Tensor:
    """A dense float64 array plus an optional handle into the tape.

    Leaves created with ``requires_grad=True`` accumulate into ``grad``
    across backward passes.  Interior nodes hold their parents and one VJP
    callable per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_spent")

    def __init__(self, data, requires_grad=False, _parents=(), _vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self._parents = _parents
        self._vjps = _vjps
        self._spent = False

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
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_leaf(self):
        return self.requires_grad and not self._parents

    def zero_grad(self):
        self.grad = None

    # operator sugar; all real work happens in the module-level functions
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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_broadcast(a, b, op):
    """Size-1-axis broadcasting only; 0-d scalars are always allowed."""
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ValueError(
            f"{op}: rank mismatch {a.shape} vs {b.shape} "
            "(broadcast over size-1 axes only)"
        )
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (the inverse of size-1 broadcasting)."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    # ranks are equal by construction (scalars handled above)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    out = grad.sum(axis=axes, keepdims=True) if axes else grad
    return out.reshape(shape)


def _make(data, parents, vjps):
    if any(p.requires_grad for p in parents):
        return Tensor(data, _parents=tuple(parents), _vjps=tuple(vjps))
    return Tensor(data)


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data
    _check_finite(out, "div")
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    _check_finite(out, "exp")
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")
    return _make(out, (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    _check_finite(out, "sqrt")
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), (lambda g: g * factor,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(
        out,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def conv1d_pointwise(x, weight, bias=None) -> Tensor:
    """Per-position affine map: (S, D_in, N) x (D_out, D_in) -> (S, D_out, N)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2:
        raise ValueError(f"conv1d_pointwise: got x {x.shape}, weight {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv1d_pointwise: {weight.shape[1]} input channels expected, "
            f"x has {x.shape[1]}"
        )
    s, d_in, n = x.data.shape
    d_out = weight.shape[0]
    # flatten to one dgemm: (D_out, D_in) @ (D_in, S*N)
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2).reshape(d_in, s * n))
    out = (weight.data @ x2).reshape(d_out, s, n).transpose(1, 0, 2)

    def vjp_x(g):
        g2 = g.transpose(1, 0, 2).reshape(d_out, s * n)
        return (weight.data.T @ g2).reshape(d_in, s, n).transpose(1, 0, 2)

    def vjp_w(g):
        g2 = g.transpose(1, 0, 2).reshape(d_out, s * n)
        return g2 @ x2.T

    parents = [x, weight]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(
                f"conv1d_pointwise: bias shape {bias.shape} != ({weight.shape[0]},)"
            )
        out = out + bias.data[None, :, None]
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(0, 2)))
    return _make(out, parents, vjps)


# -------------------------------------------------------------- reductions


def _restore_axes(g, axis, keepdims, in_shape):
    if axis is None or keepdims:
        return g
    return np.expand_dims(g, axis)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and a.data.shape[axis] == 0:
        raise ValueError("reduce over a size-0 axis")
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = _restore_axes(np.asarray(g), axis, keepdims, a.data.shape)
        return np.broadcast_to(g, a.data.shape).copy()

    return _make(out, (a,), (vjp,))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and a.data.shape[axis] == 0:
        raise ValueError("reduce over a size-0 axis")
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = _restore_axes(np.asarray(g), axis, keepdims, a.data.shape)
        return np.broadcast_to(g, a.data.shape) / count

    return _make(out, (a,), (vjp,))


def reduce_std(a, axis, eps: float = 1e-5, keepdims=False) -> Tensor:
    """Biased (1/N) standard deviation with a stability constant under the root."""
    a = _as_tensor(a)
    mu = reduce_mean(a, axis=axis, keepdims=True)
    var = reduce_mean(mul(sub(a, mu), sub(a, mu)), axis=axis, keepdims=keepdims)
    return sqrt(add(var, float(eps)))


def reduce_max(a, axis, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError("reduce over a size-0 axis")
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)  # first max wins on ties

    def vjp(g):
        g = _restore_axes(np.asarray(g), axis, keepdims, a.data.shape)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis)
        return buf

    return _make(out, (a,), (vjp,))


# --------------------------------------------------------------- structure


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), (lambda g: g.reshape(a.data.shape),))


def moveaxis(a, source, destination) -> Tensor:
    a = _as_tensor(a)
    out = np.moveaxis(a.data, source, destination)
    return _make(out, (a,), (lambda g: np.moveaxis(g, destination, source),))


def concat(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, ts, [make_vjp(k) for k in range(len(ts))])


def take(a, indices, axis=0) -> Tensor:
    """Gather along one axis with an integer index array (any shape)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)
    ax = axis % a.data.ndim

    def vjp(g):
        # index-block axes sit where the gathered axis was; bring them first
        g2 = np.moveaxis(g, range(ax, ax + idx.ndim), range(idx.ndim))
        flat_idx = idx.reshape(-1)
        rest = g2.shape[idx.ndim :]
        rows = g2.reshape(len(flat_idx), -1)
        buf = np.zeros_like(a.data)
        buf_m = np.moveaxis(buf, ax, 0)
        if len(flat_idx):
            # scatter-add by sorting rows into index segments
            order = np.argsort(flat_idx, kind="stable")
            sorted_idx = flat_idx[order]
            starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
            sums = np.add.reduceat(rows[order], starts, axis=0)
            buf_m[sorted_idx[starts]] = sums.reshape((len(starts),) + rest)
        return buf

    return _make(out, (a,), (vjp,))


def stop_gradient(t, straight_through: bool = False, value=None) -> Tensor:
    """Detach ``t`` from the tape.

    Plain mode returns a constant with ``t``'s values (or ``value`` if
    given).  Straight-through mode forwards the same values but passes
    upstream gradients to ``t`` unchanged, which is how a non-differentiable
    transform is spliced into the tape: compute its result outside, pass it
    as ``value``, and the backward pass pretends the transform was identity.
    """
    t = _as_tensor(t)
    data = t.data if value is None else np.asarray(value, dtype=np.float64)
    if data.shape != t.data.shape:
        raise ValueError(f"value shape {data.shape} != tensor shape {t.data.shape}")
    if not straight_through:
        return Tensor(data.copy())
    return _make(data.copy(), (t,), (lambda g: g,))


# ---------------------------------------------------------------- backward


def _topo_order(root):
    """Iterative post-order over parents; only grad-requiring nodes."""
    order, stack = [], [(root, False)]
    seen = set()
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``grad``.

    The loss must be a scalar (size-1) tensor.  The tape is consumed: a
    second backward through any node of the same graph raises.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._spent:
        raise RuntimeError("tape already consumed; rebuild the forward pass")

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._spent:
            raise RuntimeError("tape already consumed; rebuild the forward pass")
        node._spent = True
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib


# -------------------------------------------------------------------- adam


class AdamState:
    """Per-parameter Adam moments plus the step counter and hyperparameters."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params, grads, state: AdamState) -> None:
    """One Adam update in place.  ``grads`` may be None to consume (and
    clear) each parameter's accumulated ``grad``; missing/None gradients
    leave that parameter untouched."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - update
        if grads is None:
            p.grad = None


# ------------------------------------------------------------- checkpoints

_MAGIC = b"MPTC\x01"


def save_checkpoint(path, params, step: int = 0, extra=None) -> None:
    """Flat binary container of named float64 arrays + a JSON manifest.

    Layout: magic, uint32 entry count, then per entry uint16 name length,
    utf-8 name, uint8 ndim, uint32 dims, raw little-endian float64 data.
    The manifest lands at ``<path>.json``.
    """
    path = str(path)
    arrays = {}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        arrays[name] = np.asarray(arr, dtype="<f8", order="C")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    manifest = {
        "format": "meshpose-checkpoint-v1",
        "dtype": "float64",
        "step": int(step),
        "params": {k: list(v.shape) for k, v in arrays.items()},
        "extra": extra if extra is not None else {},
    }
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Returns (arrays: dict[str, ndarray], step: int, extra: dict)."""
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        arrays[name] = arr.astype(np.float64)
    step, extra = 0, {}
    try:
        with open(path + ".json") as fh:
            manifest = json.load(fh)
        step = int(manifest.get("step", 0))
        extra = manifest.get("extra", {})
        declared = manifest.get("params", {})
        for k, shp in declared.items():
            if k not in arrays or list(arrays[k].shape) != list(shp):
                raise ValueError(f"{path}: manifest/binary mismatch for {k!r}")
    except FileNotFoundError:
        pass
    return arrays, step, extra
