"""Reverse-mode automatic differentiation over numpy buffers.

A Tensor wraps a row-major numpy array (float32 by default, float64 supported
for high-precision verification) together with an optional gradient and a
backward closure. Graphs are built eagerly by the ops below; `backward` runs a
topological sort and accumulates gradients into every reachable leaf that
requires them. Only ops with at least one grad-requiring parent record a
closure, so frozen-model forwards build no graph at all.

Reductions that feed normalization statistics accumulate in 64-bit before
casting back to the tensor dtype; everything else stays in the tensor dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str | None = None, parents=()):
        if isinstance(data, Tensor):
            raise ContractViolation("cannot wrap a Tensor in a Tensor")
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag}, op={self.op!r})"

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable grad-requiring leaf.

        `self` must be scalar. Raises NumericError naming the first op whose
        forward output contains a non-finite value.
        """
        if self.data.size != 1:
            raise ContractViolation(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # topo holds parents before children, so the first non-finite node is
        # the op that introduced the bad value.
        for node in topo:
            if not np.isfinite(node.data).all():
                raise NumericError(node.op or "leaf")
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: tuple) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = req
    out.op = op
    out._parents = parents if req else ()
    out._backward = None
    return out


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    out = _make(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    out = _make(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    out = _make(a.data / b.data, "div", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._backward = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractViolation("power supports constant exponents only")
    e = float(exponent)
    out = _make(a.data ** e, "pow", (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * e * a.data ** (e - 1.0))
        out._backward = _bw
    return out


def texp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), "exp", (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * out.data)
        out._backward = _bw
    return out


def tlog(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), "log", (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g / a.data)
        out._backward = _bw
    return out


def tsqrt(a: Tensor) -> Tensor:
    out = _make(np.sqrt(a.data), "sqrt", (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * 0.5 / out.data)
        out._backward = _bw
    return out


def ttanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), "tanh", (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * (1.0 - out.data * out.data))
        out._backward = _bw
    return out


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g.reshape(a.data.shape))
        out._backward = _bw
    return out


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def _bw(g):
            a._accumulate(g.transpose(inverse))
        out._backward = _bw
    return out


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes."""
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def take(a: Tensor, key) -> Tensor:
    """Basic slicing; backward scatters the gradient into a zero buffer."""
    out = _make(np.ascontiguousarray(a.data[key]), "slice", (a,))
    if out.requires_grad:
        def _bw(g):
            buf = np.zeros_like(a.data)
            buf[key] += g
            a._accumulate(buf)
        out._backward = _bw
    return out


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype), "sum", (a,))
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g.reshape(()), a.data.shape) if not keepdims else np.broadcast_to(g, a.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape))
        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    s = tsum(a, axis, keepdims)
    return mul(s, 1.0 / float(count))


def mean_square(a: Tensor) -> Tensor:
    """Scalar mean of elementwise squares."""
    return tmean(mul(a, a))


def mse(a: Tensor, b) -> Tensor:
    return mean_square(a - b)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul requires operands with ndim >= 2")
    out = _make(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = g @ b.data.swapaxes(-1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))
        out._backward = _bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]. Gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _make(table.data[ids], "embedding", (table,))
    if out.requires_grad:
        def _bw(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            table._accumulate(buf)
        out._backward = _bw
    return out


# -- fused nonlinearities ----------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(a.dtype)
    out = _make(s.astype(a.dtype), "softmax", (a,))
    if out.requires_grad:
        def _bw(g):
            sm = out.data
            inner = (g * sm).sum(axis=-1, keepdims=True, dtype=np.float64).astype(a.dtype)
            a._accumulate(sm * (g - inner))
        out._backward = _bw
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance. No affine part."""
    mu = a.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((a.data.astype(np.float64) - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
    xhat = ((a.data - mu.astype(a.dtype)) * inv).astype(a.dtype)
    out = _make(xhat, "layer_norm", (a,))
    if out.requires_grad:
        def _bw(g):
            n = a.data.shape[-1]
            g64 = g.astype(np.float64)
            xh = out.data.astype(np.float64)
            gm = g64.mean(axis=-1, keepdims=True)
            gxm = (g64 * xh).mean(axis=-1, keepdims=True)
            dx = (g64 - gm - xh * gxm) * inv.astype(np.float64)
            a._accumulate(dx.astype(a.dtype))
        out._backward = _bw
    return out


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = _make((0.5 * x * (1.0 + t)).astype(a.dtype), "gelu", (a,))
    if out.requires_grad:
        def _bw(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            a._accumulate((g * d).astype(a.dtype))
        out._backward = _bw
    return out


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = _make((a.data * sig).astype(a.dtype), "silu", (a,))
    if out.requires_grad:
        def _bw(g):
            d = sig * (1.0 + a.data * (1.0 - sig))
            a._accumulate((g * d).astype(a.dtype))
        out._backward = _bw
    return out


# -- spatial pooling ---------------------------------------------------------


def avg_pool_grid(a: Tensor, r: int) -> Tensor:
    """Average non-overlapping r x r windows over the two axes before the last.

    Input layout [..., H, W, D]; output [..., H/r, W/r, D]. H and W must be
    divisible by r.
    """
    if r < 1:
        raise ContractViolation(f"pool ratio must be >= 1, got {r}")
    if a.ndim < 3:
        raise ContractViolation(f"avg_pool_grid needs [..., H, W, D], got ndim {a.ndim}")
    *lead, h, w, d = a.data.shape
    if h % r or w % r:
        raise ContractViolation(f"grid {h}x{w} not divisible by pool ratio {r}")
    if r == 1:
        return reshape(a, a.data.shape)
    x = reshape(a, tuple(lead) + (h // r, r, w // r, r, d))
    n = len(lead)
    return tmean(x, axis=(n + 1, n + 3))


# -- gradient API ------------------------------------------------------------


def eval_with_grad(loss: Tensor, params) -> dict:
    """Evaluate d(loss)/d(p) for each named parameter.

    `params` maps names to leaf Tensors. Parameters that do not participate in
    the graph receive zero gradients. Existing gradients are cleared first.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        p.zero_grad()
    loss.backward()
    out = {}
    for name, p in items:
        if not p.requires_grad:
            raise ContractViolation(f"parameter '{name}' does not require grad")
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out
