"""Multi-scale Inverse-Flow model.

Data flows through ``L`` levels.  Each level squeezes, runs ``K`` flow steps
and (except the last) splits half of the channels off as a latent.  A flow
step is, in the data-to-latent direction::

    inverse-of-convolution -> activation slot -> actnorm -> 1x1 conv -> coupling

Sampling runs everything backwards, so the invertible convolution is
evaluated as a plain (fully parallel) convolution there.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError, DimensionError, NonFiniteError
from .layers import (
    LOG_2PI,
    ActNorm,
    AffineCoupling,
    Conv1x1,
    Identity,
    InvConv,
    QuadCoupling,
    Split,
    Squeeze,
)

STEP_LAYERS = ("invconv", "act", "actnorm", "conv1x1", "coupling")


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 1
    steps: int = 2
    coupling: str = "affine"
    hidden: int = 64
    kernel_size: int = 3
    input_shape: tuple = (1, 8, 8)
    split_prior: str = "conditional"
    seed: int = 0
    identity_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.levels < 1 or self.steps < 1:
            raise ArgumentError("levels and steps must be >= 1")
        if self.hidden < 1 or self.kernel_size < 1:
            raise ArgumentError("hidden width and kernel size must be >= 1")
        if self.coupling not in ("affine", "quad"):
            raise ArgumentError(f"unknown coupling kind {self.coupling!r}")
        if self.split_prior not in ("conditional", "standard"):
            raise ArgumentError(f"unknown split prior {self.split_prior!r}")
        if len(self.input_shape) != 3:
            raise DimensionError("input_shape must be (C, H, W)")
        C, H, W = self.input_shape
        step = 2 ** self.levels
        if H % step or W % step:
            raise DimensionError(f"input {H}x{W} is not divisible by 2^levels = {step}")
        multiple = 2 if self.coupling == "affine" else 4
        for c in self.level_channels():
            if c % multiple:
                raise DimensionError(f"{c} channels incompatible with {self.coupling} coupling")

    def level_channels(self):
        """Channel count inside each level (after its squeeze)."""
        C = self.input_shape[0]
        out = []
        for level in range(self.levels):
            C *= 4
            out.append(C)
            if level < self.levels - 1:
                C //= 2
        return out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FlowModel:
    """Inverse-Flow model with a flat parameter registry.

    ``parameters()`` returns ``{"L0/S1/actnorm/logs": array, ...}``; the
    arrays are the live parameter storage.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        ident = config.identity_init
        self.nodes = []  # (path, kind, layer) in data-to-latent order
        for level, C in enumerate(config.level_channels()):
            self.nodes.append((f"L{level}/squeeze", "squeeze", Squeeze()))
            for s in range(config.steps):
                if config.coupling == "affine":
                    coupling = AffineCoupling(C, config.hidden, rng, permute=bool(s % 2))
                else:
                    coupling = QuadCoupling(C, config.hidden, rng)
                layers = (
                    InvConv(C, config.kernel_size, rng, identity=ident),
                    Identity(),
                    ActNorm(C, identity=ident),
                    Conv1x1(C, rng, identity=ident),
                    coupling,
                )
                for name, layer in zip(STEP_LAYERS, layers):
                    self.nodes.append((f"L{level}/S{s}/{name}", "flow", layer))
            if level < config.levels - 1:
                self.nodes.append((f"L{level}/split", "split", Split(C, config.split_prior)))

    # -- registry ----------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{path}/{name}": arr
            for path, _, layer in self.nodes
            for name, arr in layer.params.items()
        }

    def layers(self, kind=None):
        return [(p, layer) for p, k, layer in self.nodes if kind is None or k == kind]

    def actnorms(self):
        return [layer for _, layer in self.layers() if isinstance(layer, ActNorm)]

    @property
    def initialized(self):
        return all(a.initialized for a in self.actnorms())

    def project(self):
        for _, layer in self.layers():
            layer.project()

    def num_parameters(self):
        return sum(a.size for a in self.parameters().values())

    # -- shapes ------------------------------------------------------------

    def latent_shapes(self):
        C, H, W = self.config.input_shape
        shapes = []
        for level in range(self.config.levels):
            C, H, W = 4 * C, H // 2, W // 2
            if level < self.config.levels - 1:
                shapes.append((C // 2, H, W))
                C //= 2
        shapes.append((C, H, W))
        return shapes

    def _batch(self, y):
        y = np.asarray(y)
        single = y.ndim == 3
        if single:
            y = y[None]
        if y.ndim != 4 or y.shape[1:] != self.config.input_shape:
            raise DimensionError(f"expected input of shape {self.config.input_shape}, got {y.shape}")
        return y, single

    # -- data-dependent init -----------------------------------------------

    def initialize(self, batch):
        """Data-dependent actnorm initialization from one batch."""
        h, _ = self._batch(batch)
        if h.shape[0] == 0:
            raise ArgumentError("initialization needs a nonempty batch")
        for path, kind, layer in self.nodes:
            if kind == "split":
                h, _, _, _ = layer.forward(h)
                continue
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize(h)
            h, _, _ = layer.forward(h)

    # -- data -> latent ----------------------------------------------------

    def _forward(self, y, keep_cache=False, check=False):
        h = y
        latents = []
        logdet = np.zeros(y.shape[0], dtype=y.dtype)
        logprior = np.zeros(y.shape[0], dtype=y.dtype)
        caches = []
        for path, kind, layer in self.nodes:
            if kind == "split":
                h, z, lp, cache = layer.forward(h)
                latents.append(z)
                logprior = logprior + lp
            else:
                h, ld, cache = layer.forward(h)
                logdet = logdet + ld
            if keep_cache:
                caches.append(cache)
            if check and not np.all(np.isfinite(h)):
                raise NonFiniteError(f"non-finite output at layer {path}", layer=path)
        latents.append(h)
        logprior = logprior + (-0.5 * LOG_2PI - 0.5 * h * h).sum(axis=(1, 2, 3))
        return latents, logdet, logprior, caches

    def forward(self, y):
        """Map data to ``(latents, total_logdet)``; batch or single tensor."""
        yb, single = self._batch(y)
        latents, logdet, _, _ = self._forward(yb)
        if single:
            return [z[0] for z in latents], float(logdet[0])
        return latents, logdet

    def log_prob(self, y):
        """Exact log-density in nats (per sample for a batch)."""
        yb, single = self._batch(y)
        if not np.all(np.isfinite(yb)):
            raise ArgumentError("log_prob input contains NaN or Inf")
        _, logdet, logprior, _ = self._forward(yb)
        lp = logprior + logdet
        return float(lp[0]) if single else lp

    def standardized_latents(self, y):
        """Latents whitened by their (conditional) prior: exactly N(0, I) under the model."""
        yb, single = self._batch(y)
        h = yb
        out = []
        for _, kind, layer in self.nodes:
            if kind == "split":
                kept, z, _, _ = layer.forward(h)
                mean, logstd = layer.stats(kept)
                out.append((z - mean) * np.exp(-logstd))
                h = kept
            else:
                h, _, _ = layer.forward(h)
        out.append(h)
        return [z[0] for z in out] if single else out

    # -- latent -> data ----------------------------------------------------

    def _inverse(self, latents, draw=None):
        """Run the model backwards.

        With ``draw`` set, split latents are produced on the fly by
        ``draw(split_layer, kept, index)`` instead of read from ``latents``.
        """
        n_split = len(self.latent_shapes()) - 1
        h = latents[-1]
        produced = [None] * n_split + [h]
        split_idx = n_split
        for path, kind, layer in reversed(self.nodes):
            if kind == "split":
                split_idx -= 1
                z = draw(layer, h, split_idx) if draw is not None else latents[split_idx]
                produced[split_idx] = z
                h = layer.inverse(h, z)
            else:
                h = layer.inverse(h)
        return h, produced

    def inverse(self, latents):
        """Decode a latent stack (batched or single) back to data."""
        latents = [np.asarray(z) for z in latents]
        single = latents[-1].ndim == 3
        if single:
            latents = [z[None] for z in latents]
        shapes = self.latent_shapes()
        if len(latents) != len(shapes) or any(z.shape[1:] != s for z, s in zip(latents, shapes)):
            raise DimensionError(f"latent shapes {[z.shape for z in latents]} do not match {shapes}")
        x, _ = self._inverse(latents)
        return x[0] if single else x

    def sample(self, rng, n=1, temperature=1.0, return_latents=False):
        """Draw ``n`` samples; latents are ``N(mean, (temperature * std)^2)``."""
        if temperature <= 0:
            raise ArgumentError("temperature must be positive")
        shapes = self.latent_shapes()
        final = temperature * rng.standard_normal((n,) + shapes[-1])
        eps = [rng.standard_normal((n,) + s) for s in shapes[:-1]]

        def draw(split, kept, i):
            return split.draw(kept, eps[i], temperature)

        x, latents = self._inverse([None] * (len(shapes) - 1) + [final], draw=draw)
        return (x, latents) if return_latents else x

    def reconstruct(self, y):
        latents, _ = self.forward(y)
        return self.inverse(latents)

    def interpolate(self, y_a, y_b, steps):
        """Decode ``steps`` equally spaced points on the latent segment a -> b."""
        if steps < 2:
            raise ArgumentError("interpolation needs at least 2 steps")
        za, _ = self.forward(y_a)
        zb, _ = self.forward(y_b)
        out = []
        for t in np.linspace(0.0, 1.0, steps):
            out.append(self.inverse([(1.0 - t) * a + t * b for a, b in zip(za, zb)]))
        return out

    # -- training ----------------------------------------------------------

    def loss_and_grads(self, y, check=True):
        """Mean negative log-likelihood of a batch and its parameter gradients."""
        yb, _ = self._batch(y)
        N = yb.shape[0]
        latents, logdet, logprior, caches = self._forward(yb, keep_cache=True, check=check)
        nll = -(logprior + logdet)
        loss = float(nll.mean())
        if check and not math.isfinite(loss):
            raise NonFiniteError("loss is not finite", layer="loss")
        w = np.full(N, -1.0 / N, dtype=yb.dtype)  # dL/dlogdet and dL/dlogprior per sample
        g = latents[-1] / N
        grads = {}
        for (path, kind, layer), cache in zip(reversed(self.nodes), reversed(caches)):
            g, gr = layer.backward(cache, g, w)
            for name, v in gr.items():
                grads[f"{path}/{name}"] = v
        for name, arr in self.parameters().items():
            grads.setdefault(name, np.zeros_like(arr))
        return loss, grads

    def astype(self, dtype):
        """Cast every parameter array to ``dtype`` (storage is replaced)."""
        for _, layer in self.layers():
            for name, arr in list(layer.params.items()):
                layer.params[name] = arr.astype(dtype)
        return self
