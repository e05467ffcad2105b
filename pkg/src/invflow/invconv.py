"""Invertible padded convolution and the inverse of convolution.

The convolution ``y = conv(x)`` pads ``k-1`` zeros on the top and left, so
output pixel ``p`` only reads input pixels ``q <= p`` (componentwise).  With
a masked kernel the induced operator is unit lower triangular, and the
inverse is solved by back-substitution over anti-diagonals ``i + j = d``:
all pixels on one anti-diagonal depend only on earlier anti-diagonals, so
they are solved together in one vectorized stage.

Inside an Inverse-Flow model the *inverse* is the training-direction layer
(``x = conv^-1(y)``); ``grad_input`` and ``grad_weights`` differentiate
that direction.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve_triangular

from .errors import DimensionError
from .tensor import MaskedKernel, kernel_mask, project_weights


@dataclass
class SolveStats:
    """Counters filled in by the instrumented solvers."""

    stages: int = 0
    multiplies: int = 0


@dataclass(frozen=True)
class DiagonalSchedule:
    """Anti-diagonal stages of an ``H x W`` grid, in increasing ``d``."""

    H: int
    W: int
    stages: list = field(init=False, repr=False)

    def __post_init__(self):
        stages = []
        for d in range(self.H + self.W - 1):
            rows = np.arange(max(0, d - self.W + 1), min(d, self.H - 1) + 1)
            stages.append((rows, d - rows))
        object.__setattr__(self, "stages", stages)

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)


def count_sequential_stages(H: int, W: int) -> int:
    """Number of inherently sequential stages in the inverse (``H + W - 1``)."""
    if H < 1 or W < 1:
        raise DimensionError(f"grid must be at least 1x1, got {H}x{W}")
    return H + W - 1


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")


def _check_channels(x, w):
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {w.shape[0]}")


def _kernel_weights(K) -> np.ndarray:
    if isinstance(K, MaskedKernel):
        return K.weights
    return project_weights(K)


def conv_raw(x, w, stats: SolveStats | None = None) -> np.ndarray:
    """Top-left padded convolution of a batch ``(N, C, H, W)`` with raw weights."""
    N, C, H, W = x.shape
    k = w.shape[2]
    # channels-last padded copy, so one contiguous im2col matrix feeds a single matmul
    xpad = np.zeros((N, H + k - 1, W + k - 1, C), dtype=np.result_type(x, w))
    xpad[:, k - 1:, k - 1:, :] = x.transpose(0, 2, 3, 1)
    cols = sliding_window_view(xpad, (k, k), axis=(1, 2)).reshape(N * H * W, C * k * k)
    y = cols @ w.reshape(C, C * k * k).T
    if stats is not None:
        stats.stages += 1
        stats.multiplies += N * H * W * C * C * k * k
    return np.ascontiguousarray(y.reshape(N, H, W, C).transpose(0, 3, 1, 2))


def _center_inverse(w) -> np.ndarray:
    C, _, k, _ = w.shape
    center = w[:, :, k - 1, k - 1]
    lower = not np.any(np.triu(center, 1))
    return solve_triangular(center, np.eye(C, dtype=w.dtype), lower=lower, unit_diagonal=True)


def solve_raw(y, w, *, workers: int = 1, stats: SolveStats | None = None) -> np.ndarray:
    """Solve ``conv(x) = y`` for a batch by anti-diagonal back-substitution.

    ``w`` may have any unit-triangular bottom-right block (lower or upper),
    which is what the transposed solve in :func:`grad_input` needs.  With
    ``workers > 1`` each stage is split across threads; every pixel is
    written exactly once from already-final values, so the result does not
    depend on the split.
    """
    N, C, H, W = y.shape
    k = w.shape[2]
    taps = w.reshape(C, C, k * k).copy()
    taps[:, :, -1] = 0.0
    # (C_in * k*k, C_out) so that a stacked matmul reduces each pixel with an
    # identically shaped product, whatever the chunking.
    taps_t = np.ascontiguousarray(taps.transpose(1, 2, 0).reshape(C * k * k, C))
    center_inv_t = np.ascontiguousarray(_center_inverse(w).T)
    u_off, v_off = np.divmod(np.arange(k * k), k)
    xpad = np.zeros((N, C, H + k - 1, W + k - 1), dtype=np.result_type(y, w))

    def solve_pixels(rows, cols):
        P = rows.size
        patches = xpad[:, :, rows[:, None] + u_off, cols[:, None] + v_off]  # N, C, P, k*k
        patches = patches.transpose(2, 0, 1, 3).reshape(P, N, C * k * k)
        rhs = y[:, :, rows, cols].transpose(2, 0, 1) - np.matmul(patches, taps_t)  # P, N, C
        xpad[:, :, rows + k - 1, cols + k - 1] = np.matmul(rhs, center_inv_t).transpose(1, 2, 0)

    if k == 1:
        # No spatial coupling: one stage, the inverse channel block at every pixel.
        x = y.transpose(0, 2, 3, 1) @ center_inv_t
        if stats is not None:
            stats.stages += 1
            stats.multiplies += N * H * W * C * C
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for rows, cols in DiagonalSchedule(H, W):
            if pool is None or rows.size < 2:
                solve_pixels(rows, cols)
            else:
                chunks = np.array_split(np.arange(rows.size), min(workers, rows.size))
                futures = [pool.submit(solve_pixels, rows[c], cols[c]) for c in chunks]
                for f in futures:  # stage barrier
                    f.result()
            if stats is not None:
                stats.stages += 1
                stats.multiplies += N * rows.size * C * C * k * k
    finally:
        if pool is not None:
            pool.shutdown()
    return xpad[:, :, k - 1:, k - 1:].copy()


def conv_forward(x, K, *, stats: SolveStats | None = None) -> np.ndarray:
    """Padded convolution ``y = M x`` (the fast, fully parallel direction)."""
    w = _kernel_weights(K)
    xb, single = _batched(x)
    _check_channels(xb, w)
    y = conv_raw(xb, w, stats)
    return y[0] if single else y


def conv_inverse(y, K, *, workers: int = 1, stats: SolveStats | None = None) -> np.ndarray:
    """Exact inverse ``x = M^-1 y`` in ``H + W - 1`` sequential stages."""
    w = _kernel_weights(K)
    yb, single = _batched(y)
    _check_channels(yb, w)
    x = solve_raw(yb, w, workers=workers, stats=stats)
    return x[0] if single else x


def logdet(K, H: int, W: int) -> float:
    """Log-determinant of the masked operator: always 0 (unit triangular)."""
    _kernel_weights(K)
    return 0.0


def _flip(a):
    return a[..., ::-1, ::-1]


def grad_input_raw(g, w, *, workers: int = 1) -> np.ndarray:
    """``M^-T g``: the transposed triangular solve.

    ``M^T`` equals a spatial flip, then the padded convolution with the
    channel-transposed kernel, then a flip back; solving it therefore walks
    the anti-diagonals in decreasing order of the original grid.
    """
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3))
    return np.ascontiguousarray(_flip(solve_raw(np.ascontiguousarray(_flip(g)), wt, workers=workers)))


def grad_weights_raw(g_y, x, k: int) -> np.ndarray:
    """``dL/dW`` given ``g_y = dL/dy`` and the layer output ``x`` (batched)."""
    xpad = np.pad(x, ((0, 0), (0, 0), (k - 1, 0), (k - 1, 0)))
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    grad = -np.tensordot(g_y, win, axes=([0, 2, 3], [0, 2, 3]))  # Cout, Cin, k, k
    free, _ = kernel_mask(x.shape[1], k)
    return np.where(free, grad, 0.0)


def grad_input(dL_dx, K, *, workers: int = 1) -> np.ndarray:
    """Gradient w.r.t. the inverse layer's input ``y`` given ``dL/dx``."""
    w = _kernel_weights(K)
    gb, single = _batched(dL_dx)
    _check_channels(gb, w)
    gy = grad_input_raw(gb, w, workers=workers)
    return gy[0] if single else gy


def grad_weights(dL_dx, y, K, *, x=None, dL_dy=None) -> np.ndarray:
    """Gradient of the loss w.r.t. the kernel, for ``x = conv_inverse(y, K)``.

    ``dL/dW[a, b, u, v] = -sum_p dL/dy[a, p] * xpad[b, p + (u, v)]``, summed
    over the batch when inputs are batched.  Masked entries get exactly 0.
    ``x`` and ``dL_dy`` may be passed in when already computed.
    """
    w = _kernel_weights(K)
    gb, _ = _batched(dL_dx)
    yb, _ = _batched(y)
    if gb.shape != yb.shape:
        raise DimensionError(f"gradient shape {gb.shape} does not match input shape {yb.shape}")
    _check_channels(yb, w)
    xb = solve_raw(yb, w) if x is None else _batched(x)[0]
    gy = grad_input_raw(gb, w) if dL_dy is None else _batched(dL_dy)[0]
    return grad_weights_raw(gy, xb, w.shape[2])
