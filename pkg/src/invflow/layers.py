"""Invertible flow layers with hand-written backpropagation.

Every layer works on batches ``(N, C, H, W)`` and follows one protocol:

``forward(x) -> (y, logdet, cache)``
    data-to-latent direction; ``logdet`` has shape ``(N,)``.
``inverse(y) -> x``
    latent-to-data direction (used for sampling).
``backward(cache, gy, glogdet) -> (gx, grads)``
    ``gy = dL/dy``, ``glogdet = dL/dlogdet`` per sample; ``grads`` maps
    parameter names to ``dL/dparam``.

Parameters live in ``layer.params`` (name -> array) and are updated in place
by the optimizer.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import lu_factor, lu_solve

from .errors import ArgumentError, DimensionError, SingularityError, StateError
from .invconv import conv_raw, grad_input_raw, grad_weights_raw, solve_raw
from .tensor import project_weights

LOG_2PI = math.log(2.0 * math.pi)
SCALE_CLAMP = 8.0


class Layer:
    """Base class: parameter storage plus the identity map."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x):
        return x, np.zeros(x.shape[0], dtype=x.dtype), None

    def inverse(self, y):
        return y

    def backward(self, cache, gy, glogdet):
        return gy, {}

    def project(self):
        """Restore parameter constraints after an update (no-op by default)."""


class Identity(Layer):
    """Placeholder activation slot inside a flow step."""


# ---------------------------------------------------------------------------
# plain convolution used inside coupling and prior networks


class Conv2d:
    """Stride-1, same-padded convolution with bias (not invertible).

    Weights live in the owning layer's ``store`` under ``prefix + "w"`` and
    ``prefix + "b"``.
    """

    def __init__(self, store, prefix, c_in, c_out, k, rng=None, zero=False):
        self.store, self.prefix, self.k = store, prefix, k
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(c_in * k * k), size=(c_out, c_in, k, k))
        store[prefix + "w"] = w
        store[prefix + "b"] = np.zeros(c_out)

    def _windows(self, x):
        p = (self.k - 1) // 2
        xpad = np.pad(x, ((0, 0), (0, 0), (p, self.k - 1 - p), (p, self.k - 1 - p)))
        return sliding_window_view(xpad, (self.k, self.k), axis=(2, 3))

    def forward(self, x):
        w, b = self.store[self.prefix + "w"], self.store[self.prefix + "b"]
        y = np.tensordot(self._windows(x), w, axes=([1, 4, 5], [1, 2, 3])) + b
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def backward(self, x, gy):
        w = self.store[self.prefix + "w"]
        k = self.k
        N, _, H, W = x.shape
        gw = np.tensordot(gy, self._windows(x), axes=([0, 2, 3], [0, 2, 3]))
        gb = gy.sum(axis=(0, 2, 3))
        cols = np.tensordot(gy, w, axes=([1], [0]))  # N, H, W, Cin, k, k
        gxpad = np.zeros((N, x.shape[1], H + k - 1, W + k - 1), dtype=gy.dtype)
        for u in range(k):
            for v in range(k):
                gxpad[:, :, u:u + H, v:v + W] += cols[..., u, v].transpose(0, 3, 1, 2)
        p = (k - 1) // 2
        grads = {self.prefix + "w": gw, self.prefix + "b": gb}
        return gxpad[:, :, p:p + H, p:p + W], grads


class ConvNet:
    """3x3 -> ReLU -> 1x1 -> ReLU -> 3x3 network; the last conv starts at zero.

    The zero start makes every coupling the identity at initialization.
    """

    def __init__(self, store, prefix, c_in, hidden, c_out, rng):
        self.convs = [
            Conv2d(store, prefix + "c0.", c_in, hidden, 3, rng),
            Conv2d(store, prefix + "c1.", hidden, hidden, 1, rng),
            Conv2d(store, prefix + "c2.", hidden, c_out, 3, zero=True),
        ]

    def forward(self, x):
        a1 = self.convs[0].forward(x)
        h1 = np.maximum(a1, 0.0)
        a2 = self.convs[1].forward(h1)
        h2 = np.maximum(a2, 0.0)
        return self.convs[2].forward(h2), (x, a1, h1, a2, h2)

    def backward(self, cache, gout):
        x, a1, h1, a2, h2 = cache
        grads = {}
        g, gr = self.convs[2].backward(h2, gout)
        grads.update(gr)
        g, gr = self.convs[1].backward(h1, g * (a2 > 0))
        grads.update(gr)
        g, gr = self.convs[0].backward(x, g * (a1 > 0))
        grads.update(gr)
        return g, grads


# ---------------------------------------------------------------------------


class InvConv(Layer):
    """Inverse of a masked ``k x k`` convolution: ``x = M^-1 y``.

    Training runs the triangular solve; sampling only needs the plain
    convolution.  The log-determinant is 0 in both directions.
    """

    def __init__(self, C, k=3, rng=None, scale=0.05, identity=False):
        super().__init__()
        if identity or rng is None:
            w = np.zeros((C, C, k, k))
        else:
            w = rng.normal(0.0, scale, size=(C, C, k, k))
        self.k = k
        self.params["weight"] = project_weights(w).astype(np.float64)

    def project(self):
        self.params["weight"][...] = project_weights(self.params["weight"])

    def forward(self, y):
        x = solve_raw(y, self.params["weight"])
        return x, np.zeros(y.shape[0], dtype=x.dtype), x

    def inverse(self, x):
        return conv_raw(x, self.params["weight"])

    def backward(self, x, gx, glogdet):
        w = self.params["weight"]
        gy = grad_input_raw(gx, w)
        return gy, {"weight": grad_weights_raw(gy, x, self.k)}


class ActNorm(Layer):
    """Per-channel affine map ``y = scale * x + bias`` with data-dependent init.

    The scale is stored as its logarithm (``logs``) so it stays positive
    under unconstrained updates.
    """

    def __init__(self, C, identity=False):
        super().__init__()
        self.params["logs"] = np.zeros(C)
        self.params["bias"] = np.zeros(C)
        self.initialized = identity

    @property
    def scale(self):
        return np.exp(self.params["logs"])

    @property
    def bias(self):
        return self.params["bias"]

    def initialize(self, x):
        """Set scale and bias so the output of ``x`` has zero mean, unit variance."""
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] == 0 or x.size == 0:
            raise ArgumentError("actnorm initialization needs a nonempty batch")
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        std = np.where(std < 1e-6, 1.0, std)
        self.params["logs"][...] = -np.log(std)
        self.params["bias"][...] = -mean / std
        self.initialized = True

    def _check(self):
        if not self.initialized:
            raise StateError("actnorm used before initialization")

    def forward(self, x):
        self._check()
        s = self.scale[:, None, None]
        y = s * x + self.params["bias"][:, None, None]
        H, W = x.shape[2:]
        logdet = np.full(x.shape[0], H * W * self.params["logs"].sum(), dtype=x.dtype)
        return y, logdet, x

    def inverse(self, y):
        self._check()
        return (y - self.params["bias"][:, None, None]) / self.scale[:, None, None]

    def backward(self, x, gy, glogdet):
        s = self.scale
        H, W = x.shape[2:]
        glogs = (gy * x).sum(axis=(0, 2, 3)) * s + H * W * glogdet.sum()
        return gy * s[:, None, None], {"logs": glogs, "bias": gy.sum(axis=(0, 2, 3))}


class Conv1x1(Layer):
    """Invertible 1x1 convolution (a learned channel-mixing matrix)."""

    def __init__(self, C, rng=None, identity=False):
        super().__init__()
        if identity or rng is None:
            m = np.eye(C)
        else:
            m, _ = np.linalg.qr(rng.normal(size=(C, C)))
        self.params["weight"] = m

    def _slogdet(self):
        sign, logabs = np.linalg.slogdet(self.params["weight"])
        if sign == 0 or logabs <= math.log(1e-12):
            raise SingularityError("1x1 convolution matrix is singular")
        return logabs

    def forward(self, x):
        H, W = x.shape[2:]
        logabs = self._slogdet()
        y = np.einsum("ab,nbhw->nahw", self.params["weight"], x)
        return y, np.full(x.shape[0], H * W * logabs, dtype=x.dtype), x

    def inverse(self, y):
        self._slogdet()
        m = self.params["weight"]
        C = m.shape[0]
        y2 = y.transpose(1, 0, 2, 3).reshape(C, -1)
        x2 = lu_solve(lu_factor(m), y2)
        return np.ascontiguousarray(x2.reshape(C, y.shape[0], *y.shape[2:]).transpose(1, 0, 2, 3))

    def backward(self, x, gy, glogdet):
        m = self.params["weight"]
        H, W = x.shape[2:]
        gx = np.einsum("ab,nahw->nbhw", m, gy)
        gm = np.einsum("nahw,nbhw->ab", gy, x) + H * W * glogdet.sum() * np.linalg.inv(m).T
        return gx, {"weight": gm}


def _affine(x_act, h, D):
    """Shared affine transform: returns (y, g_clamped, exp(g), raw g)."""
    f, g_raw = h[:, :D], h[:, D:]
    g = np.clip(g_raw, -SCALE_CLAMP, SCALE_CLAMP)
    e = np.exp(g)
    return (x_act + f) * e, g, e, g_raw


def _affine_backward(gy_act, y_act, e, g_raw, glogdet):
    """Gradients w.r.t. the active input and the network output ``(f, g_raw)``."""
    gx_act = gy_act * e
    gg = gy_act * y_act + glogdet[:, None, None, None]
    gg = gg * (np.abs(g_raw) < SCALE_CLAMP)
    return gx_act, np.concatenate([gx_act, gg], axis=1)


class AffineCoupling(Layer):
    """Glow-style coupling: ``y2 = (x2 + f(x1)) * exp(g(x1))``, ``y1 = x1``.

    ``permute`` selects the second channel half as the passive one.
    """

    def __init__(self, C, hidden, rng, permute=False):
        super().__init__()
        if C % 2:
            raise DimensionError(f"affine coupling needs an even channel count, got {C}")
        self.C, self.D, self.permute = C, C // 2, permute
        self.net = ConvNet(self.params, "", self.D, hidden, C, rng)

    def _halves(self, x):
        a, b = x[:, :self.D], x[:, self.D:]
        return (b, a) if self.permute else (a, b)

    def _join(self, passive, active):
        parts = (active, passive) if self.permute else (passive, active)
        return np.concatenate(parts, axis=1)

    def forward(self, x):
        if x.shape[1] != self.C:
            raise DimensionError(f"expected {self.C} channels, got {x.shape[1]}")
        x1, x2 = self._halves(x)
        h, net_cache = self.net.forward(x1)
        y2, g, e, g_raw = _affine(x2, h, self.D)
        return self._join(x1, y2), g.sum(axis=(1, 2, 3)), (net_cache, y2, e, g_raw)

    def inverse(self, y):
        y1, y2 = self._halves(y)
        h, _ = self.net.forward(y1)
        g = np.clip(h[:, self.D:], -SCALE_CLAMP, SCALE_CLAMP)
        return self._join(y1, y2 * np.exp(-g) - h[:, :self.D])

    def backward(self, cache, gy, glogdet):
        net_cache, y2, e, g_raw = cache
        gy1, gy2 = self._halves(gy)
        gx2, gh = _affine_backward(gy2, y2, e, g_raw, glogdet)
        gx1, grads = self.net.backward(net_cache, gh)
        return self._join(gy1 + gx1, gx2), grads


class QuadCoupling(Layer):
    """Four-block autoregressive coupling.

    The channels are cut into blocks ``x1..x4``; ``x1`` passes through and
    block ``i+1`` is transformed by a network fed ``x1..xi``.
    """

    def __init__(self, C, hidden, rng):
        super().__init__()
        if C % 4:
            raise DimensionError(f"quad coupling needs channels divisible by 4, got {C}")
        self.C, self.q = C, C // 4
        self.nets = [
            ConvNet(self.params, f"f{i - 1}.", i * self.q, hidden, 2 * self.q, rng) for i in (1, 2, 3)
        ]

    def _blocks(self, x):
        return [x[:, i * self.q:(i + 1) * self.q] for i in range(4)]

    def forward(self, x):
        if x.shape[1] != self.C:
            raise DimensionError(f"expected {self.C} channels, got {x.shape[1]}")
        xs = self._blocks(x)
        ys = [xs[0]]
        logdet = np.zeros(x.shape[0], dtype=x.dtype)
        caches = []
        for i, net in enumerate(self.nets):
            h, net_cache = net.forward(np.concatenate(xs[:i + 1], axis=1))
            y, g, e, g_raw = _affine(xs[i + 1], h, self.q)
            ys.append(y)
            logdet += g.sum(axis=(1, 2, 3))
            caches.append((net_cache, y, e, g_raw))
        return np.concatenate(ys, axis=1), logdet, caches

    def inverse(self, y):
        ys = self._blocks(y)
        xs = [ys[0]]
        for i, net in enumerate(self.nets):
            h, _ = net.forward(np.concatenate(xs, axis=1))
            g = np.clip(h[:, self.q:], -SCALE_CLAMP, SCALE_CLAMP)
            xs.append(ys[i + 1] * np.exp(-g) - h[:, :self.q])
        return np.concatenate(xs, axis=1)

    def backward(self, caches, gy, glogdet):
        gys = self._blocks(gy)
        gxs = [g.copy() for g in gys[:1]] + [None, None, None]
        grads = {}
        pending = [np.zeros_like(g) for g in gys]  # gradient reaching x_j through the networks
        for i in reversed(range(3)):
            net_cache, y, e, g_raw = caches[i]
            gx_act, gh = _affine_backward(gys[i + 1], y, e, g_raw, glogdet)
            gxs[i + 1] = gx_act + pending[i + 1]
            gin, gr = self.nets[i].backward(net_cache, gh)
            grads.update(gr)
            for j in range(i + 1):
                pending[j] += gin[:, j * self.q:(j + 1) * self.q]
        gxs[0] = gxs[0] + pending[0]
        return np.concatenate(gxs, axis=1), grads


# ---------------------------------------------------------------------------


def squeeze(x):
    """``(C, H, W) -> (4C, H/2, W/2)``; each 2x2 block becomes 4 channels.

    Within a block the order is top-left, top-right, bottom-left,
    bottom-right; output channel ``4c + s`` holds sub-position ``s`` of
    input channel ``c``.  Accepts a leading batch axis.
    """
    x = np.asarray(x)
    *lead, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"squeeze needs even height and width, got {H}x{W}")
    x = x.reshape(*lead, C, H // 2, 2, W // 2, 2)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(x.reshape(*lead, 4 * C, H // 2, W // 2))


def unsqueeze(x):
    """Exact inverse of :func:`squeeze`."""
    x = np.asarray(x)
    *lead, C4, H, W = x.shape
    if C4 % 4:
        raise DimensionError(f"unsqueeze needs a channel count divisible by 4, got {C4}")
    n = len(lead)
    x = x.reshape(*lead, C4 // 4, 2, 2, H, W)
    x = x.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(x.reshape(*lead, C4 // 4, 2 * H, 2 * W))


class Squeeze(Layer):
    def forward(self, x):
        return squeeze(x), np.zeros(x.shape[0], dtype=x.dtype), None

    def inverse(self, y):
        return unsqueeze(y)

    def backward(self, cache, gy, glogdet):
        return unsqueeze(gy), {}


def gaussian_logpdf(z, mean, logstd):
    """Elementwise log-density of ``N(mean, exp(logstd)^2)``."""
    eps = (z - mean) * np.exp(-logstd)
    return -0.5 * LOG_2PI - logstd - 0.5 * eps * eps


class Split(Layer):
    """Factor out half of the channels as a latent.

    The second half ``z`` is scored under a diagonal Gaussian whose mean and
    log-std come from a zero-initialized 3x3 convolution of the kept half
    (standard normal at initialization).  ``prior="standard"`` pins it to
    ``N(0, 1)``.
    """

    def __init__(self, C, prior="conditional"):
        super().__init__()
        if C % 2:
            raise DimensionError(f"split needs an even channel count, got {C}")
        if prior not in ("conditional", "standard"):
            raise ArgumentError(f"unknown split prior {prior!r}")
        self.C, self.D, self.prior = C, C // 2, prior
        if prior == "conditional":
            self.net = Conv2d(self.params, "prior.", self.D, C, 3, zero=True)

    def stats(self, kept):
        """Mean and log-std of the latent given the kept half."""
        if self.prior == "standard":
            zeros = np.zeros_like(kept)
            return zeros, zeros
        h = self.net.forward(kept)
        return h[:, :self.D], h[:, self.D:]

    def forward(self, x):
        if x.shape[1] != self.C:
            raise DimensionError(f"expected {self.C} channels, got {x.shape[1]}")
        kept, z = x[:, :self.D], x[:, self.D:]
        mean, logstd = self.stats(kept)
        logp = gaussian_logpdf(z, mean, logstd).sum(axis=(1, 2, 3))
        return kept, z, logp, (kept, z, mean, logstd)

    def inverse(self, kept, z):
        return np.concatenate([kept, z], axis=1)

    def draw(self, kept, eps, temperature=1.0):
        """Latent ``mean + temperature * std * eps`` for the given kept half."""
        mean, logstd = self.stats(kept)
        return mean + temperature * np.exp(logstd) * eps

    def backward(self, cache, gkept, glogp):
        kept, z, mean, logstd = cache
        w = glogp[:, None, None, None]
        inv_var = np.exp(-2.0 * logstd)
        gz = -w * (z - mean) * inv_var
        grads = {}
        if self.prior == "conditional":
            gmean = -gz
            eps2 = (z - mean) ** 2 * inv_var
            glogstd = w * (eps2 - 1.0)
            gk, grads = self.net.backward(kept, np.concatenate([gmean, glogstd], axis=1))
            gkept = gkept + gk
        return np.concatenate([gkept, gz], axis=1), grads
