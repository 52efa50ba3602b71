"""Small reverse-mode autodiff over numpy arrays.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the tape in reverse topological
order. Ops work on batched inputs (leading axes) where that is natural, but
there is no general broadcasting.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

from . import kernels

SMOOTH_EPS = 1e-8

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for freshly created tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: scale(self, -1.0)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


# --------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, xs, backward)


def take(x, index, axis: int = 0) -> Tensor:
    """Select ``index`` (int array) along ``axis``."""
    x = as_tensor(x)
    index = np.asarray(index)
    out = np.take(x.data, index, axis=axis)

    ax = axis % x.data.ndim

    def backward(g):
        if index.ndim == 1:
            # scatter-add as a product with the one-hot selection matrix
            onehot = np.zeros((index.size, x.data.shape[ax]), dtype=g.dtype)
            onehot[np.arange(index.size), index] = 1.0
            return (np.moveaxis(np.tensordot(np.moveaxis(g, ax, -1), onehot, axes=1), -1, ax),)
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * ax + (index,), g)
        return (full,)

    return _make(out, (x,), backward)


# --------------------------------------------------------------------------
# reductions


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def weighted_sum(terms: Sequence[tuple]) -> Tensor:
    """``sum_i c_i * t_i`` for scalar tensors ``t_i`` and float coefficients."""
    terms = [(float(c), as_tensor(t)) for c, t in terms]
    out = sum(c * t.data for c, t in terms)
    return _make(np.asarray(out), [t for _, t in terms],
                 lambda g: tuple(c * g for c, _ in terms))


# --------------------------------------------------------------------------
# layers


def linear(x, W, b) -> Tensor:
    """``y = x W^T + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("linear: W must be 2-D and b 1-D")
    m, n = W.shape
    if x.shape[-1] != n or b.shape[0] != m:
        raise ValueError(f"linear: shape mismatch x{x.shape} W{W.shape} b{b.shape}")
    out = x.data @ W.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, m)
        x2 = x.data.reshape(-1, n)
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        gW = g2.T @ x2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _make(out, (x, W, b), backward)


def matmul(x, M) -> Tensor:
    """``x @ M`` with ``x`` of shape (..., n) and ``M`` of shape (n, m)."""
    x, M = as_tensor(x), as_tensor(M)
    if M.data.ndim != 2 or x.shape[-1] != M.shape[0]:
        raise ValueError(f"matmul: shape mismatch {x.shape} @ {M.shape}")
    n, m = M.shape
    out = x.data @ M.data

    def backward(g):
        g2 = g.reshape(-1, m)
        gx = (g2 @ M.data.T).reshape(x.shape) if x.requires_grad else None
        gM = x.data.reshape(-1, n).T @ g2 if M.requires_grad else None
        return gx, gM

    return _make(out, (x, M), backward)


def scale_channels(x, m) -> Tensor:
    """``x[..., c] * m[...]`` for every channel ``c`` (mask over the last axis)."""
    x, m = as_tensor(x), as_tensor(m)
    if x.shape[:-1] != m.shape:
        raise ValueError(f"scale_channels: shape mismatch {x.shape} vs {m.shape}")
    out = x.data * m.data[..., None]

    def backward(g):
        gx = g * m.data[..., None] if x.requires_grad else None
        gm = (g * x.data).sum(axis=-1) if m.requires_grad else None
        return gx, gm

    return _make(out, (x, m), backward)


def matvec(M, v) -> Tensor:
    """Batched ``out[..., i] = sum_j M[..., i, j] v[..., j]``."""
    M, v = as_tensor(M), as_tensor(v)
    if M.shape[:-2] != v.shape[:-1] or M.shape[-1] != v.shape[-1]:
        raise ValueError(f"matvec: shape mismatch {M.shape} vs {v.shape}")
    out = np.einsum("...ij,...j->...i", M.data, v.data)

    def backward(g):
        gM = g[..., :, None] * v.data[..., None, :] if M.requires_grad else None
        gv = np.einsum("...ij,...i->...j", M.data, g) if v.requires_grad else None
        return gM, gv

    return _make(out, (M, v), backward)


def softmax(v) -> Tensor:
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of empty input")
    shifted = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (v,), backward)


def cross_entropy(logits, target) -> Tensor:
    """``-log softmax(logits)[target]`` per row; scalar for 1-D logits."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    n = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= n):
        raise IndexError(f"cross_entropy target out of range [0, {n})")
    lead = logits.shape[:-1]
    if target.shape != lead:
        raise ValueError(f"cross_entropy: target shape {target.shape} != {lead}")
    flat = logits.data.reshape(-1, n).astype(np.float64, copy=False)
    loss, probs = kernels.softmax_xent(flat, target.reshape(-1))
    rows = np.arange(flat.shape[0])

    def backward(g):
        d = probs.copy()
        d[rows, target.reshape(-1)] -= 1.0
        d *= np.asarray(g, dtype=np.float64).reshape(-1, 1)
        return (d.reshape(logits.shape).astype(logits.data.dtype, copy=False),)

    return _make(loss.reshape(lead).astype(logits.data.dtype, copy=False), (logits,), backward)


def smooth(p, eps: float = SMOOTH_EPS) -> Tensor:
    """``(p + eps) / (1 + n eps)`` over the last axis."""
    p = as_tensor(p)
    n = p.shape[-1]
    denom = 1.0 + n * eps
    return _make((p.data + eps) / denom, (p,), lambda g: (g / denom,))


def normalize(x) -> Tensor:
    """Divide by the sum over the last axis (entries assumed non-negative)."""
    x = as_tensor(x)
    s = x.data.sum(axis=-1, keepdims=True)
    out = x.data / s

    def backward(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) / s,)

    return _make(out, (x,), backward)


def kl_divergence(p, q, eps: float = SMOOTH_EPS) -> Tensor:
    """``KL(p || q)`` over the last axis after eps-smoothing both inputs."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: length mismatch {p.shape} vs {q.shape}")
    ps, qs = smooth(p, eps), smooth(q, eps)
    lp, lq = log(ps), log(qs)
    return sum_(mul(ps, sub(lp, lq)), axis=-1)


def l1_norm(v) -> Tensor:
    return sum_(abs_(v))


def l21_norm(M) -> Tensor:
    """Sum of row L2 norms. Zero rows get a zero subgradient."""
    M = as_tensor(M)
    data = M.data if M.data.ndim == 2 else M.data.reshape(1, -1)
    norms = np.sqrt((data * data).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        gd = g * np.where(norms[:, None] > 0, data / safe[:, None], 0.0)
        return (gd.reshape(M.shape),)

    return _make(norms.sum(), (M,), backward)


def sym_kl(a, b, eps: float = SMOOTH_EPS) -> Tensor:
    """Fused ``KL(p||q)/2 + KL(q||p)/2`` with ``p, q`` the row-normalised,
    smoothed versions of ``a`` and ``b``. Returns one value per row."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sym_kl")
    n = a.shape[-1]
    lead = a.shape[:-1]
    value, ga, gb = kernels.sym_kl(a.data.reshape(-1, n), b.data.reshape(-1, n), eps)

    def backward(g):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 1)
        return ((ga * g).reshape(a.shape), (gb * g).reshape(b.shape))

    dtype = a.data.dtype
    return _make(value.reshape(lead).astype(dtype, copy=False), (a, b), backward)


# --------------------------------------------------------------------------
# parameters


class ParamStore:
    """Ordered collection of named trainable tensors.

    Parameters are created in declaration order from a single seeded
    generator, so rebuilding a store with the same seed and the same
    sequence of ``add`` calls reproduces it bitwise.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, shape, init: str = "normal", fan_in: int | None = None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "normal":
            fan = fan_in or (shape[-1] if len(shape) > 1 else 1)
            data = self.rng.standard_normal(shape) * np.sqrt(2.0 / fan)
        elif init == "unit_rows":
            data = self.rng.standard_normal(shape)
            data /= np.linalg.norm(data, axis=-1, keepdims=True)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(_default_dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_arrays(self, arrays: dict, mapping: Callable[[str], str | None] | None = None):
        """Copy arrays into matching parameters.

        ``mapping`` translates a store name into the source name (or None to
        skip). Returns ``(loaded, missing, unexpected)`` name lists.
        """
        mapping = mapping or (lambda n: n)
        loaded, missing = [], []
        used = set()
        for name, t in self.params.items():
            src = mapping(name)
            if src is None or src not in arrays:
                missing.append(name)
                continue
            arr = np.asarray(arrays[src])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
            loaded.append(name)
            used.add(src)
        unexpected = [k for k in arrays if k not in used]
        return loaded, missing, unexpected


class Linear:
    """``W``/``b`` pair registered in a store under ``name.W`` / ``name.b``."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, zero: bool = False):
        self.W = store.add(f"{name}.W", (n_out, n_in), "zeros" if zero else "normal", fan_in=n_in)
        self.b = store.add(f"{name}.b", (n_out,), "zeros")

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)


# --------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, params: ParamStore, lr: float = 5e-4, exclude=()):
        self.params, self.lr, self.exclude = params, lr, set(exclude)

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None or name in self.exclude:
                continue
            t.data = t.data - self.lr * t.grad


class Adam:
    def __init__(self, params: ParamStore, lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, exclude=()):
        self.params, self.lr, self.eps = params, lr, eps
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.exclude = set(exclude)
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def _direction(self, name, t):
        g = t.grad
        m = self.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
        v = self.v[name]
        m = self.b1 * m + (1 - self.b1) * g
        v = self.b2 * v + (1 - self.b2) * g * g
        self.m[name], self.v[name] = m, v
        mhat = m / (1 - self.b1 ** self.t)
        vhat = v / (1 - self.b2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * t.data

    def step(self) -> None:
        self.t += 1
        for name, t in self.params.items():
            if t.grad is None or name in self.exclude:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            t.data = np.ascontiguousarray(t.data)
            kernels.adam_update(t.data, t.grad, self.m[name], self.v[name], self.lr, self.b1, self.b2,
                                self.eps, self.weight_decay, self.t)


class LAMB(Adam):
    """Adam direction rescaled per tensor by ``||theta|| / ||update||``."""

    def step(self) -> None:
        self.t += 1
        for name, t in self.params.items():
            if t.grad is None or name in self.exclude:
                continue
            r = self._direction(name, t)
            wn, rn = np.linalg.norm(t.data), np.linalg.norm(r)
            trust = wn / rn if wn > 0 and rn > 0 else 1.0
            t.data = t.data - self.lr * trust * r


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "lamb": LAMB}


# --------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max over all input coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``fn`` maps tensors to a scalar tensor and must be pure. Central
    differences with step ``h``; inputs are promoted to float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite output")
    out.backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError("non-finite analytic gradient")
        for idx in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                probe = [x.copy() for x in arrays]
                probe[i][idx] += sign * h
                v = fn(*[Tensor(x) for x in probe]).data
                if not np.all(np.isfinite(v)):
                    raise FloatingPointError("non-finite value during finite differences")
                vals.append(float(v))
            numeric = (vals[0] - vals[1]) / (2 * h)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def param_grad_check(loss_fn: Callable[[], Tensor], store: ParamStore, h: float = 1e-5,
                     max_coords: int | None = None, seed: int = 0) -> float:
    """Finite-difference check of ``loss_fn`` against every parameter in ``store``.

    ``loss_fn`` rebuilds the graph from the store's current values. With
    ``max_coords`` set, that many randomly chosen coordinates per tensor are
    probed; otherwise all of them. Parameters must be float64.
    """
    rng = np.random.default_rng(seed)
    store.zero_grad()
    out = loss_fn()
    out.backward()
    worst = 0.0
    for name, t in store.items():
        if t.data.dtype != np.float64:
            raise TypeError(f"{name} is {t.data.dtype}; gradient checks need float64")
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view: writes perturb the parameter
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for j in coords:
            old = flat[j]
            flat[j] = old + h
            up = float(loss_fn().data)
            flat[j] = old - h
            down = float(loss_fn().data)
            flat[j] = old
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric)))
    return worst
