"""Randomized self-checks used by ``invflow oracle-check``.

Round trips are compared against the input, and against a dense LU solve
when the operator fits in memory.  Gradients are compared against central
finite differences of ``L = 0.5 * ||conv_inverse(y)||^2``.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .invconv import conv_forward, conv_inverse, grad_input, grad_weights
from .tensor import DENSE_LIMIT, MaskedKernel, build_dense_operator, kernel_mask, vectorize

ROUNDTRIP_TOL = 1e-9
GRADIENT_TOL = 1e-4


def rel_error(approx, exact) -> float:
    """Normwise relative error ``max|a - e| / max(max|e|, 1e-300)``."""
    approx, exact = np.asarray(approx), np.asarray(exact)
    return float(np.max(np.abs(approx - exact)) / max(np.max(np.abs(exact)), 1e-300))


def half_sq_loss(y, K):
    x = conv_inverse(y, K)
    return 0.5 * float(np.sum(x * x)), x


def fd_grad_input(y, K, eps=1e-5):
    g = np.zeros_like(y)
    for idx in np.ndindex(y.shape):
        yp, ym = y.copy(), y.copy()
        yp[idx] += eps
        ym[idx] -= eps
        g[idx] = (half_sq_loss(yp, K)[0] - half_sq_loss(ym, K)[0]) / (2 * eps)
    return g


def fd_grad_weights(y, K, eps=1e-5):
    w = K.weights
    free, _ = kernel_mask(K.channels, K.k)
    g = np.zeros_like(w)
    for idx in zip(*np.nonzero(free)):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        lp = half_sq_loss(y, MaskedKernel(wp))[0]
        lm = half_sq_loss(y, MaskedKernel(wm))[0]
        g[idx] = (lp - lm) / (2 * eps)
    return g


def random_case(rng, channels=(1, 2, 4), ks=(1, 2, 3), sizes=(1, 2, 4, 8, 16)):
    C = int(rng.choice(channels))
    k = int(rng.choice(ks))
    H = int(rng.choice(sizes))
    W = int(rng.choice(sizes))
    return MaskedKernel.random(C, k, rng), rng.normal(size=(C, H, W))


def roundtrip_error(K, x) -> float:
    back = conv_inverse(conv_forward(x, K), K)
    return float(np.max(np.abs(back - x)) / (1.0 + np.max(np.abs(x))))


def dense_error(K, y) -> float:
    """Max relative deviation of forward/inverse from the dense operator."""
    C, H, W = y.shape
    M = build_dense_operator(K, H, W)
    v = vectorize(y)
    scale = 1.0 + np.max(np.abs(v))
    e_fwd = np.max(np.abs(vectorize(conv_forward(y, K)) - M @ v)) / scale
    x_ref = lu_solve(lu_factor(M), v)
    e_inv = np.max(np.abs(vectorize(conv_inverse(y, K)) - x_ref)) / (1.0 + np.max(np.abs(x_ref)))
    return float(max(e_fwd, e_inv))


def gradient_errors(K, y) -> tuple[float, float]:
    x = conv_inverse(y, K)
    g_in = grad_input(x, K)  # dL/dx = x for L = 0.5 ||x||^2
    g_w = grad_weights(x, y, K)
    return rel_error(g_in, fd_grad_input(y, K)), rel_error(g_w, fd_grad_weights(y, K))


def run_oracle_check(trials=200, seed=0, grad_trials=None):
    """Return a summary dict of the worst errors observed."""
    rng = np.random.default_rng(seed)
    worst_rt = worst_dense = worst_grad = 0.0
    for _ in range(trials):
        K, x = random_case(rng)
        worst_rt = max(worst_rt, roundtrip_error(K, x))
        if x.size <= DENSE_LIMIT:
            worst_dense = max(worst_dense, dense_error(K, x))
    n_grad = grad_trials if grad_trials is not None else max(1, trials // 4)
    for _ in range(n_grad):
        K, y = random_case(rng, sizes=(1, 2, 3))
        worst_grad = max(worst_grad, *gradient_errors(K, y))
    return {
        "trials": trials,
        "gradient_trials": n_grad,
        "max_roundtrip_error": worst_rt,
        "max_dense_error": worst_dense,
        "max_gradient_error": worst_grad,
        "dense_ok": worst_dense < ROUNDTRIP_TOL,
        "ok": worst_rt < ROUNDTRIP_TOL and worst_grad < GRADIENT_TOL,
    }
