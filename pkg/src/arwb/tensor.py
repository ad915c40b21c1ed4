"""Dense tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure computing the parents' gradients from the output
gradient.  :func:`backward` orders the recorded graph with a :class:`Tape` and
walks it once in reverse.

Storage is float32 unless a dtype is requested explicitly; mixed operands
follow numpy promotion, which lets :func:`finite_diff_check` run the whole
graph in float64.  Reductions accumulate in float64.

Broadcasting is limited to size-1 operands and to :func:`add_bias`.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_BASIC_INDEX = (int, np.integer, slice, type(Ellipsis), type(None))


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = None
        self._backward = None
        self.op = "leaf"

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

    @property
    def is_leaf(self):
        return self._parents is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = None
        out._backward = None
    return out


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(value, dtype=dtype)


def _check_same(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g, dtype=np.float64).astype(g.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_same(a, b, "add")

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_same(a, b, "sub")

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_same(a, b, "mul")

    def backward(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_same(a, b, "div")
    out = a.data / b.data

    def backward(g, need):
        return (_unbroadcast(g / b.data, a.shape) if need[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if need[1] else None)

    return _result(out, (a, b), backward, "div")


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g, need):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(out, (a,), backward, "pow")


def square(a):
    def backward(g, need):
        return (2.0 * g * a.data,)

    return _result(a.data * a.data, (a,), backward, "square")


def add_bias(x, b):
    """Add a vector along the last axis; the one broadcasting case allowed."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs bias {b.shape}")

    def backward(g, need):
        gb = None
        if need[1]:
            gb = g.reshape(-1, b.shape[0]).sum(axis=0, dtype=np.float64).astype(g.dtype)
        return (g if need[0] else None, gb)

    return _result(x.data + b.data, (x, b), backward, "add_bias")


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    out = np.exp(a.data)

    def backward(g, need):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def log(a):
    def backward(g, need):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g, need):
        return (g * 0.5 / out,)

    return _result(out, (a,), backward, "sqrt")


def relu(a):
    # subgradient at 0 is 0
    mask = a.data > 0

    def backward(g, need):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), backward, "relu")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)

    def backward(g, need):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward, "sigmoid")


def tanh(a):
    out = np.tanh(a.data)

    def backward(g, need):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), backward, "tanh")


def softplus(a):
    z = a.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g, need):
        return (g * _sigmoid(z),)

    return _result(out.astype(z.dtype), (a,), backward, "softplus")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g, need):
        return (g * inside,)

    return _result(np.clip(a.data, lo, hi), (a,), backward, "clip")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None):
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g, need):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).astype(a.dtype),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)

    def backward(g, need):
        return (g.reshape(a.shape),)

    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (a,), backward, "reshape")


def transpose(a, axes=None):
    inverse = None if axes is None else np.argsort(axes)

    def backward(g, need):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a, key):
    basic = all(isinstance(k, _BASIC_INDEX) for k in (key if isinstance(key, tuple) else (key,)))

    def backward(g, need):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(a.data[key]), (a,), backward, "getitem")


def pad2d(x, p):
    """Zero-pad the two spatial axes of an HWC or NHWC tensor by ``p`` pixels."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"pad2d expects HWC or NHWC, got {x.shape}")
    spatial = [(p, p), (p, p), (0, 0)]
    widths = spatial if x.ndim == 3 else [(0, 0)] + spatial
    sl = (slice(p, -p), slice(p, -p)) if p else (slice(None), slice(None))
    if x.ndim == 4:
        sl = (slice(None),) + sl

    def backward(g, need):
        return (g[sl],)

    return _result(np.pad(x.data, widths), (x,), backward, "pad2d")


def gather_linear(x, index, weight):
    """Weighted gather: ``out[...] = sum_k weight[..., k] * x.flat[index[..., k]]``.

    This is the linear core of bilinear resampling; ``index`` and ``weight``
    are constants with identical shapes.
    """
    index = np.asarray(index)
    weight = np.asarray(weight, dtype=x.dtype)
    if index.shape != weight.shape:
        raise DimensionError("gather_linear: index and weight shapes differ")
    flat = x.data.reshape(-1)
    out = np.sum(flat[index] * weight, axis=-1)

    def backward(g, need):
        contrib = (weight * g[..., None]).reshape(-1)
        gx = np.bincount(index.reshape(-1), weights=contrib, minlength=flat.size)
        return (gx.astype(x.dtype).reshape(x.shape),)

    return _result(out, (x,), backward, "gather_linear")


def gather_rows(x, index, weight):
    """Weighted row gather on a 2-D tensor: ``out[..., :] = sum_k weight[..., k] * x[index[..., k], :]``."""
    index = np.asarray(index)
    weight = np.asarray(weight, dtype=x.dtype)
    if index.shape != weight.shape or x.ndim != 2:
        raise DimensionError("gather_rows: needs a 2-D source and matching index/weight")
    out = np.einsum("...kc,...k->...c", x.data[index], weight)

    def backward(g, need):
        flat = index.reshape(-1)
        contrib = (weight[..., None] * g[..., None, :]).reshape(len(flat), -1)
        gx = np.zeros(x.shape, dtype=np.float64)
        for ch in range(x.shape[1]):
            gx[:, ch] = np.bincount(flat, weights=contrib[:, ch], minlength=x.shape[0])
        return (gx.astype(x.dtype),)

    return _result(out, (x,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# linear layers


def matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g, need):
        ga = g @ b.data.T if need[0] else None
        gb = None
        if need[1]:
            gb = np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g
        return (ga, gb)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def dense(x, weights, bias):
    """``out[j] = sum_i x[i] * W[i, j] + b[j]`` for a vector or a batch of rows."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: input {x.shape}, W {weights.shape}, b {bias.shape}")
    if x.ndim not in (1, 2):
        raise DimensionError(f"dense: input must be n or B x n, got {x.shape}")
    return add_bias(matmul(x, weights), bias)


def _windows(x, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernel, stride=1):
    """Valid cross-correlation of an HWC (or NHWC) input with a kh x kw x Cin x Cout kernel."""
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    if kernel.ndim != 4 or x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin or kh > h or kw > w:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    # rows ordered (kh, kw, cin) to match kernel.reshape
    cols = _windows(xd, kh, kw, stride).transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if not batched:
        out = out[0]

    def backward(g, need):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gk = None
        if need[1]:
            gk = (cols.T @ g2).reshape(kernel.shape).astype(kernel.dtype)
        if need[0]:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gx = np.zeros((n, h, w, cin), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gx.astype(x.dtype)
            if not batched:
                gx = gx[0]
        return (gx, gk)

    return _result(out, (x, kernel), backward, "conv2d")


# ---------------------------------------------------------------------------
# normalisation, softmax family, losses


def l2_normalize(x, axis=-1):
    norm = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=axis, keepdims=True)).astype(x.dtype)
    if np.any(norm == 0):
        raise ContractError("l2_normalize: zero-norm vector")
    out = x.data / norm

    def backward(g, need):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _result(out, (x,), backward, "l2_normalize")


def batch_norm(x, eps=1e-5):
    """Standardise each feature over the batch axis (training-mode statistics, no affine)."""
    if x.ndim != 2:
        raise DimensionError("batch_norm expects B x F")
    mu = x.data.mean(axis=0, dtype=np.float64)
    var = x.data.var(axis=0, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x.data - mu) * inv).astype(x.dtype)

    def backward(g, need):
        gm = g.mean(axis=0, dtype=np.float64)
        gxm = (g * xhat).mean(axis=0, dtype=np.float64)
        return ((inv * (g - gm - xhat * gxm)).astype(x.dtype),)

    return _result(xhat, (x,), backward, "batch_norm")


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(a):
    out = np.exp(_log_softmax(a.data))

    def backward(g, need):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a):
    out = _log_softmax(a.data)
    probs = np.exp(out)

    def backward(g, need):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def cross_entropy(logits, label):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.atleast_1d(np.asarray(label))
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label out of range for {k} classes")
    lp = log_softmax(logits if logits.ndim == 2 else reshape(logits, (1, k)))
    if labels.size != lp.shape[0]:
        raise DimensionError("cross_entropy: one label per row required")
    picked = getitem(lp, (np.arange(labels.size), labels))
    return mul(tsum(picked), -1.0 / labels.size)


def mse(pred, target):
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy from logits (unreduced)."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError("bce_with_logits: target shape mismatch")
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g, need):
        return (g * (_sigmoid(z) - t),)

    return _result(out.astype(z.dtype), (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Topologically ordered record of the graph that produced a root tensor.

    Parents always precede their children in :attr:`nodes`.  When ``targets``
    is given, only nodes on a path from a target to the root are kept.
    """

    def __init__(self, root, targets=None):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._parents:
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        if targets is not None:
            target_ids = {id(t) for t in targets}
            reach = set()
            for node in order:
                if id(node) in target_ids or any(id(p) in reach for p in (node._parents or ())):
                    reach.add(id(node))
            order = [n for n in order if id(n) in reach]
        self.nodes = order
        self.ids = {id(n) for n in order}


def backward(root, inputs=None):
    """Populate ``.grad`` on the leaves that ``root`` depends on.

    With ``inputs``, only those leaves receive gradients; any of them that the
    root does not depend on gets a zero gradient.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if inputs is not None:
        for t in inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not root.requires_grad:
        if inputs is None:
            raise ContractError("backward: root is not recorded on any tape")
        return
    tape = Tape(root, inputs)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        need = tuple(p.requires_grad and id(p) in tape.ids for p in node._parents)
        for p, gp, n in zip(node._parents, node._backward(g, need), need):
            if not n or gp is None:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp


def grad_of(f, x):
    """Return ``(value, d value / d x)`` for a scalar function of an array."""
    xt = Tensor(x, requires_grad=True, dtype=np.asarray(x).dtype if np.asarray(x).dtype == np.float64 else None)
    out = f(xt)
    backward(out, inputs=[xt])
    return out.item(), xt.grad


def finite_diff_check(f, x, h=1e-3, max_coords=64, seed=0):
    """Max relative error between backprop and central differences.

    Runs in float64.  For inputs larger than ``max_coords`` elements a seeded
    random subset of coordinates is compared.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ContractError("finite_diff_check step must lie in [1e-5, 1e-2]")
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x64, requires_grad=True, dtype=np.float64)
    out = f(xt)
    backward(out, inputs=[xt])
    analytic = xt.grad.reshape(-1)
    if x64.size <= max_coords:
        coords = np.arange(x64.size)
    else:
        coords = np.random.default_rng(seed).choice(x64.size, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        xp = x64.copy()
        xp.flat[i] += h
        xm = x64.copy()
        xm.flat[i] -= h
        fp = f(Tensor(xp, dtype=np.float64)).item()
        fm = f(Tensor(xm, dtype=np.float64)).item()
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# optimisers


def _param_list(params):
    if hasattr(params, "params"):
        params = params.params
    if isinstance(params, dict):
        return [params[k] for k in sorted(params)]
    return list(params)


def sgd_step(params, lr):
    """In-place ``p <- p - lr * grad`` for every parameter; clears gradients."""
    plist = _param_list(params)
    for p in plist:
        if p.grad is None:
            raise ContractError("sgd_step: parameter without gradient")
    for p in plist:
        p.data -= (lr * p.grad).astype(p.dtype)
        p.grad = None


class Adam:
    """Adam over a fixed parameter list; missing gradients count as zero."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = _param_list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
