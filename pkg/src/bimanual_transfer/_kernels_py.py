"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is not built. Signatures and
outputs match the Cython versions exactly (up to floating point summation
order).
"""
import numpy as np


def softmax_xent(logits, targets):
    """Row-wise softmax cross-entropy.

    Returns ``(loss, probs)`` where ``loss[i] = -log softmax(logits[i])[targets[i]]``.
    The gradient of ``loss[i]`` w.r.t. ``logits[i]`` is ``probs[i] - onehot``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    z = expd.sum(axis=1)
    probs = expd / z[:, None]
    rows = np.arange(logits.shape[0])
    loss = np.log(z) - shifted[rows, targets]
    return loss, probs


def _smoothed(a, eps):
    n = a.shape[1]
    s = a.sum(axis=1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    p = np.where(s > 0, a / safe, 1.0 / n)
    return p, (p + eps) / (1.0 + n * eps), safe


def sym_kl(a, b, eps):
    """Symmetrised KL between row-normalised, eps-smoothed masks.

    Returns ``(value, grad_a, grad_b)``; ``value[i] = KL(p||q)/2 + KL(q||p)/2``
    and the gradients are taken w.r.t. the *unnormalised* rows of ``a``/``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[1]
    p, ps, sa = _smoothed(a, eps)
    q, qs, sb = _smoothed(b, eps)
    lp = np.log(ps)
    lq = np.log(qs)
    value = 0.5 * ((ps - qs) * (lp - lq)).sum(axis=1)
    gp = 0.5 * ((lp - lq) + (ps - qs) / ps)
    gq = 0.5 * ((lq - lp) + (qs - ps) / qs)
    scale = 1.0 + n * eps
    grad_a = (gp - (gp * p).sum(axis=1, keepdims=True)) / (scale * sa)
    grad_b = (gq - (gq * q).sum(axis=1, keepdims=True)) / (scale * sb)
    return value, grad_a, grad_b


def lasso_cd(Z, y, lam, max_iter=1000, tol=1e-10):
    """Cyclic coordinate descent for ``0.5*||Z w - y||^2 + lam*||w||_1``."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = Z.shape[1]
    w = np.zeros(k)
    resid = y.copy()
    col_sq = (Z * Z).sum(axis=0)
    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(k):
            if col_sq[j] == 0.0:
                continue
            old = w[j]
            rho = Z[:, j] @ resid + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != old:
                resid -= Z[:, j] * (new - old)
                w[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            break
    return w


def adam_update(param, grad, m, v, lr, b1, b2, eps, wd, t):
    """In-place Adam step: updates ``m``, ``v`` and ``param``."""
    grad = np.asarray(grad, dtype=param.dtype)
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    step = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    if wd:
        step += wd * param
    param -= lr * step
