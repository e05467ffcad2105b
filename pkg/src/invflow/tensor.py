"""Tensor conventions, masked kernels and the dense-operator oracle.

Images are numpy arrays of shape ``(C, H, W)`` (a "Tensor3"); most layer code
also accepts a leading batch axis ``(N, C, H, W)``.  The flat vector ordering
used everywhere is channel-minor and row-major::

    linear(row, col, channel) = channel + C * col + C * W * row

so a pixel's channels are contiguous and pixels follow raster order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, CapacityError, DimensionError

#: Largest operator side length ``C*H*W`` that ``build_dense_operator`` will materialize.
DENSE_LIMIT = 4096


def as_tensor3(x, *, check_finite: bool = True) -> np.ndarray:
    """Validate and convert ``x`` to a float64 ``(C, H, W)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ArgumentError("tensor contains NaN or Inf")
    return arr


def linear_index(row: int, col: int, channel: int, shape: tuple[int, int, int]) -> int:
    """Position of ``(row, col, channel)`` in the vectorized tensor."""
    C, H, W = shape
    if not (0 <= row < H and 0 <= col < W and 0 <= channel < C):
        raise DimensionError(f"index {(row, col, channel)} outside shape {shape}")
    return channel + C * col + C * W * row


def pixel_index(linear: int, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Inverse of :func:`linear_index`; returns ``(row, col, channel)``."""
    C, H, W = shape
    if not 0 <= linear < C * H * W:
        raise DimensionError(f"linear index {linear} outside [0, {C * H * W})")
    row, rest = divmod(linear, C * W)
    col, channel = divmod(rest, C)
    return row, col, channel


def delta(p: tuple[int, int], k: int, H: int, W: int) -> list[tuple[int, int]]:
    """Pixels other than ``p`` that feed the convolution output at ``p``.

    With top-left padding these are the in-bounds pixels ``q`` with
    ``0 <= p - q < k`` componentwise, excluding ``p`` itself.
    """
    i, j = p
    out = []
    for qi in range(max(0, i - k + 1), i + 1):
        for qj in range(max(0, j - k + 1), j + 1):
            if (qi, qj) != (i, j) and qi < H and qj < W:
                out.append((qi, qj))
    return out


def pad_top_left(x, pad: int) -> np.ndarray:
    """Zero-pad ``pad`` rows on top and ``pad`` columns on the left.

    Works on ``(C, H, W)`` and ``(N, C, H, W)`` arrays.
    """
    if pad < 0:
        raise ArgumentError(f"pad must be >= 0, got {pad}")
    x = np.asarray(x)
    if pad == 0:
        return x.copy()
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, 0), (pad, 0)]
    return np.pad(x, widths)


def vectorize(x) -> np.ndarray:
    """Flatten a ``(C, H, W)`` tensor in channel-minor row-major order."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 2, 0)).reshape(-1)


def devectorize(v, C: int, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size != C * H * W:
        raise DimensionError(f"vector of length {v.size} cannot hold a {C}x{H}x{W} tensor")
    return np.ascontiguousarray(v.reshape(H, W, C).transpose(2, 0, 1))


def kernel_mask(C: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(free, fixed_value)`` arrays of shape ``(C, C, k, k)``.

    ``free`` marks trainable entries.  At the bottom-right tap the
    cross-channel matrix is pinned to unit lower-triangular: ones on the
    diagonal, zeros where the input channel follows the output channel.
    """
    free = np.ones((C, C, k, k), dtype=bool)
    fixed = np.zeros((C, C, k, k))
    upper = np.triu(np.ones((C, C), dtype=bool))
    free[:, :, k - 1, k - 1] = ~upper
    fixed[:, :, k - 1, k - 1] = np.eye(C)
    return free, fixed


def project_weights(weights) -> np.ndarray:
    """Copy of ``weights`` with the masked entries reset to 0 / 1."""
    w = np.array(weights, dtype=np.result_type(weights, np.float32))
    C, _, k, _ = w.shape
    free, fixed = kernel_mask(C, k)
    w[~free] = fixed[~free]
    return w


@dataclass(frozen=True, eq=False)
class MaskedKernel:
    """A ``(C, C, k, k)`` kernel whose padded convolution is unit lower triangular.

    ``weights[a, b, u, v]`` couples input channel ``b`` at spatial offset
    ``(u - (k-1), v - (k-1))`` into output channel ``a``.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] < 1:
            raise DimensionError(f"kernel must have shape (C, C, k, k), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ArgumentError("kernel weights must be finite")
        C, _, k, _ = w.shape
        free, fixed = kernel_mask(C, k)
        if not np.array_equal(w[~free], fixed[~free]):
            raise ArgumentError(
                "kernel violates the mask: bottom-right tap must be unit lower triangular"
            )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def identity(cls, C: int, k: int) -> "MaskedKernel":
        return cls(project_weights(np.zeros((C, C, k, k))))

    @classmethod
    def random(cls, C: int, k: int, rng: np.random.Generator, scale: float = 0.3) -> "MaskedKernel":
        return cls(project_weights(rng.normal(0.0, scale, size=(C, C, k, k))))

    @classmethod
    def from_free(cls, weights) -> "MaskedKernel":
        """Project arbitrary weights onto the mask and wrap them."""
        return cls(project_weights(np.asarray(weights, dtype=np.float64)))


def build_dense_operator(kernel, H: int, W: int) -> np.ndarray:
    """Materialize the padded convolution as an explicit ``n x n`` matrix.

    ``kernel`` may be a :class:`MaskedKernel` or a raw ``(C, C, k, k)`` array
    (raw arrays skip the mask check, which the determinant tests rely on).
    The matrix is assembled by index arithmetic, independently of the
    convolution routines it is used to check.
    """
    w = np.asarray(getattr(kernel, "weights", kernel), dtype=np.float64)
    C, _, k, _ = w.shape
    n = C * H * W
    if n > DENSE_LIMIT:
        raise CapacityError(f"dense operator of size {n} exceeds the limit of {DENSE_LIMIT}")
    M = np.zeros((n, n))
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    chan = np.arange(C)
    for u in range(k):
        for v in range(k):
            si = rows - (k - 1 - u)
            sj = cols - (k - 1 - v)
            ok = (si >= 0) & (sj >= 0)
            out_pix = C * cols[ok] + C * W * rows[ok]
            in_pix = C * sj[ok] + C * W * si[ok]
            out_lin = chan[:, None, None] + out_pix[None, None, :]
            in_lin = chan[None, :, None] + in_pix[None, None, :]
            out_lin, in_lin = np.broadcast_arrays(out_lin, in_lin)
            M[out_lin, in_lin] = w[:, :, u, v][:, :, None]
    return M
