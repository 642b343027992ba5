"""Differentiable array operations with explicit reverse-mode gradients.

A tiny fixed set of primitives (dense, conv2d, elementwise math, reductions,
resampling) over numpy arrays. Forward passes record a graph of :class:`Var`
nodes; ``backward`` replays the recorded vector-Jacobian products in reverse
topological order. The networks in this package are static, so the recorded
graph is the same every step — the trace exists only to keep the reverse
sweep explicit and checkable.

Conventions:
  - parameters and activations are stored as float32; reductions accumulate
    in float64 before casting back (see ``sum64``),
  - ops are dtype-generic so gradient checking can run the same code at
    float64 precision,
  - every op defines its exact VJP; ``gradcheck`` compares against central
    finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Var",
    "tensor",
    "constant",
    "param",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "absval",
    "vsum",
    "vmean",
    "reshape",
    "transpose_last2",
    "matmul",
    "concat",
    "dense",
    "conv2d",
    "conv_out_extent",
    "upsample2",
    "softmax",
    "sum64",
    "gradcheck",
]


def sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    """Sum with 64-bit accumulation, result cast back to the input dtype."""
    out = np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64)
    return np.asarray(out, dtype=x.dtype)


def tensor(values, dtype=np.float32, checked: bool = True) -> np.ndarray:
    """Materialize values as a contiguous array, rejecting non-finite data."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


class Var:
    """A node in the recorded operation graph.

    ``value`` is a numpy array, ``grad`` accumulates the reverse-mode
    gradient. Leaves created via :func:`param` participate in backward;
    :func:`constant` leaves are carried through but receive no gradient.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def param(value) -> Var:
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    return Var(value, requires_grad=False)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(np.asarray(x))


def _node(value, parents, vjp) -> Var:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Var(value)
    return Var(value, requires_grad=True, parents=parents, vjp=vjp)


def backward(root: Var, seed_grad=None) -> None:
    """Accumulate gradients of ``root`` into every reachable grad-leaf."""
    if seed_grad is None:
        seed_grad = np.ones_like(root.value)
    order: list[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    grads = {id(root): np.asarray(seed_grad, dtype=root.value.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = a.value + b.value

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node(out, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = a.value - b.value

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _node(out, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = a.value * b.value

    def vjp(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _node(out, (a, b), vjp)


def div(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = a.value / b.value

    def vjp(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
            if b.requires_grad
            else None
        )
        return (ga, gb)

    return _node(out, (a, b), vjp)


def neg(a) -> Var:
    a = _as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Var:
    a = _as_var(a)
    c = a.value.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def relu(a) -> Var:
    a = _as_var(a)
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    a = _as_var(a)
    out = 1.0 / (1.0 + np.exp(-a.value.astype(np.float64)))
    out = out.astype(a.value.dtype)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Var:
    a = _as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = _as_var(a)
    out = np.log(a.value)
    return _node(out, (a,), lambda g: (g / a.value,))


def clip(a, lo: float, hi: float) -> Var:
    a = _as_var(a)
    out = np.clip(a.value, lo, hi)
    mask = (a.value >= lo) & (a.value <= hi)
    return _node(out, (a,), lambda g: (g * mask,))


def absval(a) -> Var:
    a = _as_var(a)
    s = np.sign(a.value)
    return _node(np.abs(a.value), (a,), lambda g: (g * s,))


# -- reductions and shape -----------------------------------------------


def vsum(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    out = sum64(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.value.dtype),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.value.dtype),)

    return _node(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Var:
    a = _as_var(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose_last2(a) -> Var:
    a = _as_var(a)
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def matmul(a, b) -> Var:
    """Matrix product; leading batch dims (if any) must match."""
    a, b = _as_var(a), _as_var(b)
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.value, -1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return _node(out, (a, b), vjp)


def concat(parts, axis: int) -> Var:
    parts = [_as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


# -- layers ---------------------------------------------------------------


def dense(x, w, b=None) -> Var:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in).

    ``x`` may be a single vector (in,) or a batch (B, in).
    """
    x, w = _as_var(x), _as_var(w)
    single = x.value.ndim == 1
    xv = x.value[None, :] if single else x.value
    if xv.ndim != 2 or w.value.ndim != 2 or xv.shape[1] != w.value.shape[1]:
        raise DimensionError(
            f"dense: input of length {xv.shape[-1]} does not match "
            f"weights {w.value.shape}"
        )
    out = xv @ w.value.T
    if b is not None:
        b = _as_var(b)
        if b.value.shape != (w.value.shape[0],):
            raise DimensionError(
                f"dense: bias {b.value.shape} does not match output width "
                f"{w.value.shape[0]}"
            )
        out = out + b.value
    if single:
        out = out[0]

    def vjp(g):
        g2 = g[None, :] if single else g
        gx = g2 @ w.value if x.requires_grad else None
        if gx is not None and single:
            gx = gx[0]
        gw = g2.T @ xv if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g2.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp)


def conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Var:
    """2D cross-correlation.

    ``x``: (B, C, H, W) or a bare (H, W) plane; ``w``: (O, C, kh, kw) or a
    bare (kh, kw) kernel. Output spatial extent is
    ``(n + 2*padding - k) // stride + 1`` per axis.
    """
    if stride < 1:
        raise DimensionError("conv2d: stride must be positive")
    if padding < 0:
        raise DimensionError("conv2d: padding must be non-negative")
    x, w = _as_var(x), _as_var(w)
    plain = x.value.ndim == 2
    xv = x.value[None, None] if plain else x.value
    wv = w.value[None, None] if w.value.ndim == 2 else w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise DimensionError("conv2d: expected (B,C,H,W) input and (O,C,kh,kw) kernel")
    B, C, H, W = xv.shape
    O, Cw, kh, kw = wv.shape
    if Cw != C:
        raise DimensionError(f"conv2d: kernel expects {Cw} channels, input has {C}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}"
        )
    Ho = conv_out_extent(H, kh, stride, padding)
    Wo = conv_out_extent(W, kw, stride, padding)

    if padding:
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xv
    col = np.empty((B, Ho, Wo, C, kh, kw), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, :, :, i, j] = xp[
                :, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride
            ].transpose(0, 2, 3, 1)
    col2 = col.reshape(B * Ho * Wo, C * kh * kw)
    w2 = wv.reshape(O, C * kh * kw)
    y2 = col2 @ w2.T
    if b is not None:
        b = _as_var(b)
        if b.value.shape != (O,):
            raise DimensionError(
                f"conv2d: bias {b.value.shape} does not match {O} output channels"
            )
        y2 = y2 + b.value
    out = y2.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if plain:
        out = out[0, 0]

    def vjp(g):
        g4 = g[None, None] if plain else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ col2).reshape(O, C, kh, kw)
            if w.value.ndim == 2:
                gw = gw[0, 0]
        gx = None
        if x.requires_grad:
            gcol = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g2.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride
                    ] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
            if plain:
                gx = gx[0, 0]
        if b is None:
            return (gx, gw)
        gb = g2.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp)


def upsample2(a) -> Var:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    a = _as_var(a)
    B, C, H, W = a.shape
    out = a.value.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Var:
    a = _as_var(a)
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    e = np.exp((v - m).astype(np.float64))
    out = (e / e.sum(axis=axis, keepdims=True)).astype(v.dtype)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        return ((g - dot.astype(g.dtype)) * out,)

    return _node(out, (a,), vjp)


# -- gradient checking ----------------------------------------------------


def gradcheck(f, inputs, h: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a list of Vars to a scalar Var. Inputs are promoted to
    float64 so the finite-difference noise floor stays well below the
    comparison tolerance. Relative error uses max(|a|, |n|, 1e-8) as the
    denominator.
    """
    if h <= 0:
        raise ValueError("gradcheck: h must be positive")
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    vars_ = [param(x) for x in xs]
    out = f(*vars_)
    if out.value.size != 1:
        raise DimensionError("gradcheck: f must return a scalar")
    backward(out)
    worst = 0.0
    for k, v in enumerate(vars_):
        analytic = v.grad if v.grad is not None else np.zeros_like(xs[k])
        flat = xs[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*[constant(x) for x in xs]).value)
            flat[i] = orig - h
            fm = float(f(*[constant(x) for x in xs]).value)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
