"""Dense numpy tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires gradients records a node
holding its parents and a closure mapping the output gradient to parent
gradients.  :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            return data
        dtype = DEFAULT_DTYPE
    return np.asarray(data, dtype=dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction -----------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor(data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar.

        Leaves listed in ``inputs`` that the loss does not depend on receive a
        zero gradient.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._consumed = True
        self._consumed = True
        if inputs is not None:
            for leaf in inputs:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    # -- method aliases -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                   unbroadcast(g * ad, b.shape) if b.requires_grad else None), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return Tensor._make(
        out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError(
            f"log of non-positive value (min={a.data.min():.3g}); "
            "probabilities must go through plogp/clamped_log")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def plogp(p: Tensor, eps: float) -> Tensor:
    """Elementwise ``p * log(p)`` with the convention ``p log p := 0`` at ``p <= eps``."""
    pd = p.data
    live = pd > eps
    safe = np.where(live, pd, 1.0)
    logp = np.log(safe)
    out = np.where(live, pd * logp, 0.0).astype(pd.dtype, copy=False)
    return Tensor._make(out, (p,), lambda g: (g * np.where(live, logp + 1.0, 0.0),), "plogp")


def clamped_log(q: Tensor, eps: float) -> Tensor:
    """``log(max(q, eps))``; zero gradient below the floor."""
    qd = q.data
    live = qd > eps
    out = np.log(np.maximum(qd, eps)).astype(qd.dtype, copy=False)
    return Tensor._make(out, (q,), lambda g: (np.where(live, g / np.where(live, qd, 1.0), 0.0),),
                        "clamped_log")


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes) if axes else g
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._make(np.asarray(out), (a,),
                        lambda g: (_expand(g, a.shape, axes, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor._make(np.asarray(out), (a,),
                        lambda g: (_expand(g, a.shape, axes, keepdims) / n,), "mean")


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    kept = a.data.max(axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        mask = a.data == kept
        # ties share the gradient evenly
        counts = mask.sum(axis=axes, keepdims=True)
        return (_expand(g, a.shape, axes, keepdims) * mask / counts,)

    return Tensor._make(np.asarray(out), (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# softmax family

def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (z,), backward, "log_softmax")


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (z,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation lowered to a single matrix multiply."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and FCkk weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    f, c, kh, kw = weight.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(gmat @ wmat, x.shape, kh, kw, stride, padding, ho, wo)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv2d")


def _pool_view(x: np.ndarray, k: int):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool: kernel {k} larger than spatial shape {x.shape}")
    xc = x[:, :, :ho * k, :wo * k]
    return xc.reshape(n, c, ho, k, wo, k), ho, wo


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling; trailing rows/cols that do not fill a window are dropped."""
    view, ho, wo = _pool_view(x.data, k)
    n, c = x.shape[:2]
    win = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        # subgradient: the first maximal element of each window takes the gradient
        gw = np.zeros(win.shape, g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * k, :wo * k] = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, ho * k, wo * k)
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    view, ho, wo = _pool_view(x.data, k)
    out = view.mean(axis=(3, 5))

    def backward(g):
        gv = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), view.shape)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * k, :wo * k] = gv.reshape(x.shape[0], x.shape[1], ho * k, wo * k)
        return (gx,)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# batch normalization

def _chan_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except 1."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps: float = 1e-5):
    """Channel-wise (axis 1) normalization followed by a per-channel affine map.

    With ``mean``/``var`` given they are treated as constants; otherwise the
    population statistics of ``x`` are used and differentiated through.
    Returns ``(out, batch_mean, batch_var)``; the batch statistics are ``None``
    when constants were supplied.
    """
    xd = x.data
    n, c = xd.shape[:2]
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    m = xd.size // c
    batch = mean is None
    if batch:
        mu = _chan_sum(xd) / m
        xc = xd - mu.reshape(bshape)
        v = _chan_sum(xc * xc) / m
    else:
        mu = np.asarray(mean, xd.dtype)
        v = np.asarray(var, xd.dtype)
        xc = xd - mu.reshape(bshape)
    inv = (1.0 / np.sqrt(v.astype(np.float64) + eps)).astype(xd.dtype)
    xhat = xc * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        dgamma = _chan_sum(g * xhat) if gamma.requires_grad else None
        dbeta = _chan_sum(g) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gd
            if batch:
                s1 = _chan_sum(gx).reshape(bshape) / m
                s2 = _chan_sum(gx * xhat).reshape(bshape) / m
                dx = (gx - s1 - xhat * s2) * inv.reshape(bshape)
            else:
                dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    res = Tensor._make(out, (x, gamma, beta), backward, "batch_norm")
    return res, (mu if batch else None), (v if batch else None)


# ---------------------------------------------------------------------------
# finite-difference oracle

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.  With
    ``max_coords`` only that many randomly chosen coordinates per parameter are
    probed.  NaN in either estimate returns ``inf``.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward(inputs=params)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            else:
                idx = range(flat.size)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = float(ga.reshape(-1)[i])
                if not (math.isfinite(num) and math.isfinite(ana)):
                    return math.inf
                worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst
