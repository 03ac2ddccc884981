"""Minimal reverse-mode autodiff on dense numpy arrays.

Values live in plain ``np.ndarray``s; :class:`DiffNode` wraps an array
together with the recipe that produced it, so a graph can be replayed for
finite-difference verification (:func:`check_gradients`).  Training runs in
float32; gradient checks build the same graphs from float64 leaves.

Every op raises if it produces a non-finite value, so NaN/Inf surfaces at
the op that created it instead of three losses later.
"""

from __future__ import annotations

import json
import struct

import numpy as np

DEFAULT_DTYPE = np.float32

_MAGIC = b"ROCKTNSR"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class DiffNode:
    """One value in an expression DAG.

    ``parents`` together with ``op`` make the node re-evaluable; ``op`` maps
    parent values to ``(value, vjp)`` where ``vjp(upstream)`` returns one
    gradient array per parent.  Leaves have ``op is None`` and own their
    value outright.
    """

    __slots__ = ("value", "grad", "parents", "op", "_vjp", "_backward_done")

    def __init__(self, value, parents=(), op=None, vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self._vjp = vjp
        self._backward_done = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None
        self._backward_done = False

    def __repr__(self):
        kind = "leaf" if self.op is None else "node"
        return f"DiffNode({kind}, shape={self.value.shape}, dtype={self.value.dtype})"


def leaf(value, dtype=None):
    """Wrap an array as a graph input."""
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return DiffNode(arr)


def as_node(x, like=None):
    if isinstance(x, DiffNode):
        return x
    dtype = like.value.dtype if like is not None else None
    return leaf(np.asarray(x, dtype=dtype))


def _apply(op, *parents):
    values = [p.value for p in parents]
    value, vjp = op(*values)
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(
            f"non-finite values produced by {getattr(op, '_name', op)}"
        )
    return DiffNode(value, parents, op, vjp)


def _named(name, fn):
    fn._name = name
    return fn


def topo_order(root):
    """Parents-before-children order via iterative DFS."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed_grad=None):
    """Reverse-mode sweep from ``root``, accumulating into ``.grad``.

    Each node is visited exactly once.  A second backward on the same root
    without ``zero_grad`` is rejected; gradients from fan-out accumulate
    additively inside a single sweep.
    """
    if root._backward_done:
        raise RuntimeError("backward() already ran on this node; zero_grad() first")
    order = topo_order(root)
    if seed_grad is None:
        seed_grad = np.ones_like(root.value)
    root.grad = np.asarray(seed_grad, dtype=root.value.dtype)
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node.parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
            else:
                parent.grad += g
    root._backward_done = True


def zero_grads(nodes):
    for n in nodes:
        n.zero_grad()


def reevaluate(root, order=None):
    """Recompute every non-leaf value in the graph (after leaf edits)."""
    if order is None:
        order = topo_order(root)
    for node in order:
        if node.op is None:
            continue
        value, vjp = node.op(*[p.value for p in node.parents])
        node.value = np.asarray(value)
        node._vjp = vjp
    return root.value


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a = as_node(a)
    b = as_node(b, like=a)

    def op(av, bv):
        out = av + bv
        return out, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return _apply(_named("add", op), a, b)


def sub(a, b):
    a = as_node(a)
    b = as_node(b, like=a)

    def op(av, bv):
        out = av - bv
        return out, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))

    return _apply(_named("sub", op), a, b)


def mul(a, b):
    a = as_node(a)
    b = as_node(b, like=a)

    def op(av, bv):
        out = av * bv
        return out, lambda g: (
            _unbroadcast(g * bv, av.shape),
            _unbroadcast(g * av, bv.shape),
        )

    return _apply(_named("mul", op), a, b)


def div(a, b):
    a = as_node(a)
    b = as_node(b, like=a)

    def op(av, bv):
        out = av / bv
        return out, lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return _apply(_named("div", op), a, b)


def neg(a):
    def op(av):
        return -av, lambda g: (-g,)

    return _apply(_named("neg", op), a)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def _sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ELEMENTWISE = {
    "square": (lambda x: x * x, lambda x, y: 2.0 * x),
    "softplus": (lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x)),
    "elu": (
        lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))),
        lambda x, y: np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))),
    ),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype)),
    "log": (np.log, lambda x, y: 1.0 / x),
    "exp": (np.exp, lambda x, y: y),
    "abs": (np.abs, lambda x, y: np.sign(x)),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / np.maximum(y, np.finfo(x.dtype).tiny)),
}


def elementwise(a, fn):
    """Pointwise nonlinearity with analytic derivative.

    ``fn`` is one of square/softplus/elu/relu/log/exp/abs/sqrt; ``log``
    requires strictly positive input and ``sqrt`` non-negative input.
    """
    if fn not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise fn {fn!r}")
    if fn == "log" and np.any(as_node(a).value <= 0):
        raise ValueError("log requires strictly positive input")
    if fn == "sqrt" and np.any(as_node(a).value < 0):
        raise ValueError("sqrt requires non-negative input")
    f, df = _ELEMENTWISE[fn]

    def op(av):
        out = f(av)
        return out, lambda g: (g * df(av, out),)

    return _apply(_named(fn, op), as_node(a))


def square(a):
    return elementwise(a, "square")


def softplus(a):
    return elementwise(a, "softplus")


def maximum_const(a, c):
    """max(a, c) for scalar c; subgradient passes where a >= c."""
    c = float(c)

    def op(av):
        out = np.maximum(av, c)
        return out, lambda g: (g * (av >= c).astype(av.dtype),)

    return _apply(_named("maximum_const", op), as_node(a))


# ---------------------------------------------------------------------------
# reductions and shaping

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def reduce(a, kind, axes=None, keepdims=False):
    """sum/mean over ``axes``; an empty axis tuple is the identity."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    a = as_node(a)
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        return a
    ax = _norm_axes(axes, a.value.ndim)
    count = int(np.prod([a.value.shape[i] for i in ax])) if ax else 1

    def op(av):
        out = av.sum(axis=ax, keepdims=keepdims)
        if kind == "mean":
            out = out / count

        def vjp(g):
            gg = g
            if not keepdims:
                for i in sorted(ax):
                    gg = np.expand_dims(gg, i)
            gg = np.broadcast_to(gg, av.shape)
            if kind == "mean":
                gg = gg / count
            return (np.ascontiguousarray(gg),)

        return out, vjp

    return _apply(_named(kind, op), a)


def mean(a, axes=None, keepdims=False):
    return reduce(a, "mean", axes, keepdims)


def nsum(a, axes=None, keepdims=False):
    return reduce(a, "sum", axes, keepdims)


def reshape(a, shape):
    a = as_node(a)
    shape = tuple(shape)

    def op(av):
        return av.reshape(shape), lambda g: (g.reshape(av.shape),)

    return _apply(_named("reshape", op), a)


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]

    def op(*values):
        out = np.concatenate(values, axis=axis)
        sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

        def vjp(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

        return out, vjp

    return _apply(_named("concat", op), *nodes)


def slice_channels(a, start, stop):
    """a[start:stop] along axis 0."""
    a = as_node(a)

    def op(av):
        out = av[start:stop]

        def vjp(g):
            full = np.zeros_like(av)
            full[start:stop] = g
            return (full,)

        return np.ascontiguousarray(out), vjp

    return _apply(_named("slice_channels", op), a)


def logsumexp(a, axis):
    """Stable log-sum-exp along one axis (fused; vjp is the softmax)."""
    a = as_node(a)

    def op(av):
        c = av.max(axis=axis, keepdims=True)
        ex = np.exp(av - c)
        s = ex.sum(axis=axis, keepdims=True)
        out = (np.log(s) + c).squeeze(axis=axis)

        def vjp(g):
            return (np.expand_dims(g, axis) * (ex / s),)

        return out, vjp

    return _apply(_named("logsumexp", op), a)


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x, w, b, stride=1, pad=0):
    """2-D convolution (cross-correlation) of [Cin,H,W] with [Cout,Cin,k,k].

    The output extent must divide exactly: (H + 2*pad - k) % stride == 0.
    Implemented as im2col + matmul; verified against a naive loop reference
    in the tests.
    """
    x, w, b = as_node(x), as_node(w), as_node(b)
    cout, cin, k, k2 = w.value.shape
    if k != k2 or k % 2 != 1:
        raise ValueError(f"kernel must be square with odd size, got {w.value.shape}")
    if x.value.ndim != 3 or x.value.shape[0] != cin:
        raise ValueError(f"input {x.value.shape} does not match kernel {w.value.shape}")
    _, h, wd = x.value.shape
    if h < k or wd < k:
        raise ValueError(f"input {h}x{wd} smaller than kernel {k}")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise ValueError(
            f"output extent not integral: input {h}x{wd}, k={k}, stride={stride}, pad={pad}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1

    def op(xv, wv, bv):
        xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
        sc, sh, sw = xp.strides
        cols = np.lib.stride_tricks.as_strided(
            xp,
            shape=(cin, k, k, ho, wo),
            strides=(sc, sh, sw, sh * stride, sw * stride),
        ).reshape(cin * k * k, ho * wo)
        cols = np.ascontiguousarray(cols)
        w2 = wv.reshape(cout, cin * k * k)
        out = (w2 @ cols + bv[:, None]).reshape(cout, ho, wo)

        def vjp(g):
            g2 = g.reshape(cout, ho * wo)
            gw = (g2 @ cols.T).reshape(wv.shape)
            gb = g2.sum(axis=1)
            gcols = (w2.T @ g2).reshape(cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
            return np.ascontiguousarray(gx), gw, gb

        return out, vjp

    return _apply(_named("conv2d", op), x, w, b)


def upsample_nearest2x(x):
    """Replicate each cell of [C,H,W] into a 2x2 block."""
    x = as_node(x)
    c, h, w = x.value.shape

    def op(xv):
        out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)

        def vjp(g):
            return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

        return out, vjp

    return _apply(_named("upsample_nearest2x", op), x)


def avgpool2x(x):
    """Average non-overlapping 2x2 blocks of [C,H,W]; H and W must be even."""
    x = as_node(x)
    c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x needs even extents, got {h}x{w}")

    def op(xv):
        out = xv.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

        def vjp(g):
            gg = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
            return (gg.astype(xv.dtype),)

        return out, vjp

    return _apply(_named("avgpool2x", op), x)


def l2_normalize_channels(x, eps=1e-8, axis=0):
    """Scale vectors along ``axis`` to unit length; zero vectors stay zero.

    The norm is clamped below by ``eps``, which keeps the op defined (and
    its gradient finite) at the origin.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = as_node(x)

    def op(xv):
        n = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
        m = np.maximum(n, eps)
        out = xv / m

        def vjp(g):
            dots = (g * out).sum(axis=axis, keepdims=True)
            gx = np.where(n > eps, (g - out * dots) / m, g / m)
            return (gx,)

        return out, vjp

    return _apply(_named("l2_normalize", op), x)


def gather_pixels(x, rows, cols):
    """Read x at integer pixel coords.

    For x [H,W] the result has ``rows.shape``; for x [C,H,W] the result has
    ``rows.shape + (C,)``.  Backward scatter-adds (repeated coords sum).
    """
    x = as_node(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape:
        raise ValueError("rows/cols shape mismatch")

    if x.value.ndim == 2:
        def op(xv):
            out = xv[rows, cols]

            def vjp(g):
                gx = np.zeros_like(xv)
                np.add.at(gx, (rows, cols), g)
                return (gx,)

            return out, vjp
    elif x.value.ndim == 3:
        def op(xv):
            out = np.moveaxis(xv[:, rows, cols], 0, -1)

            def vjp(g):
                gx = np.zeros_like(xv)
                np.add.at(gx, (slice(None), rows, cols), np.moveaxis(g, -1, 0))
                return (gx,)

            return np.ascontiguousarray(out), vjp
    else:
        raise ValueError("gather_pixels expects a 2-D or 3-D map")

    return _apply(_named("gather_pixels", op), x)


def bilinear_pixels(x, rows, cols):
    """Bilinearly interpolate x at float coords; shapes as gather_pixels.

    Coordinates must lie inside [0, H-1] x [0, W-1].
    """
    x = as_node(x)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise ValueError("rows/cols shape mismatch")
    spatial = x.value.shape[-2:]
    if rows.size and (
        rows.min() < 0 or rows.max() > spatial[0] - 1
        or cols.min() < 0 or cols.max() > spatial[1] - 1
    ):
        raise ValueError("bilinear coords out of bounds")

    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r0 = np.clip(r0, 0, max(spatial[0] - 2, 0))
    c0 = np.clip(c0, 0, max(spatial[1] - 2, 0))
    r1 = np.minimum(r0 + 1, spatial[0] - 1)
    c1 = np.minimum(c0 + 1, spatial[1] - 1)
    fr = rows - r0
    fc = cols - c0
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    corners = ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11))

    if x.value.ndim == 2:
        def op(xv):
            out = sum(w * xv[r, c] for r, c, w in corners).astype(xv.dtype)

            def vjp(g):
                gx = np.zeros_like(xv)
                for r, c, w in corners:
                    np.add.at(gx, (r, c), (g * w).astype(xv.dtype))
                return (gx,)

            return out, vjp
    elif x.value.ndim == 3:
        def op(xv):
            out = sum(
                w[..., None] * np.moveaxis(xv[:, r, c], 0, -1) for r, c, w in corners
            ).astype(xv.dtype)

            def vjp(g):
                gx = np.zeros_like(xv)
                for r, c, w in corners:
                    np.add.at(
                        gx, (slice(None), r, c),
                        np.moveaxis(g * w[..., None], -1, 0).astype(xv.dtype),
                    )
                return (gx,)

            return np.ascontiguousarray(out), vjp
    else:
        raise ValueError("bilinear_pixels expects a 2-D or 3-D map")

    return _apply(_named("bilinear_pixels", op), x)


# ---------------------------------------------------------------------------
# verification

def check_gradients(expr, inputs, step=1e-4):
    """Compare backward() gradients with central finite differences.

    ``expr`` must be a scalar node reachable from every node in ``inputs``.
    The graph is replayed with perturbed leaf values, so run this on graphs
    built from float64 leaves.  Returns a report dict with the max relative
    error overall and per input (denominator max(|a|,|n|,1e-6)).
    """
    if expr.value.size != 1:
        raise ValueError("check_gradients needs a scalar expression")
    order = topo_order(expr)
    for n in order:
        n.zero_grad()
    backward(expr)
    analytic = [np.array(inp.grad if inp.grad is not None else np.zeros_like(inp.value))
                for inp in inputs]

    per_input = []
    worst = 0.0
    for inp, a in zip(inputs, analytic):
        inp.value = np.ascontiguousarray(inp.value)
        base = inp.value.copy()
        num = np.zeros_like(base, dtype=np.float64)
        flat = inp.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = reevaluate(expr, order).item()
            flat[i] = orig - step
            f_minus = reevaluate(expr, order).item()
            flat[i] = orig
            num.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step)
        inp.value = base
        reevaluate(expr, order)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        rel = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
        per_input.append(rel)
        worst = max(worst, rel)
    for n in order:
        n.zero_grad()
    return {"max_rel_err": worst, "per_input": per_input}


# ---------------------------------------------------------------------------
# tensor container file format

def save_tensors(path, tensors):
    """Write named arrays to the binary container format.

    Layout: 8-byte magic "ROCKTNSR", little-endian uint64 header length, a
    UTF-8 JSON header listing {name, shape, dtype, byte_offset} per tensor
    (offsets relative to the payload start), then the raw little-endian
    payload.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype_name,
                "byte_offset": offset,
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(entries, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    """Read a container written by :func:`save_tensors`; returns name->array."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    out = {}
    for entry in header:
        dt = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["byte_offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return out
