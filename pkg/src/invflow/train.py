"""Maximum-likelihood training: dequantization, Adam, metrics and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import ArgumentError, DimensionError, NonFiniteError
from .model import FlowModel

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
BELOW_ONE = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 50.0
    seed: int = 0
    dtype: str = "float64"
    init_batch: int = 256

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr < 0:
            raise ArgumentError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.init_batch < 1:
            raise ArgumentError("batch size, epochs and init batch must be >= 1")
        if not all(0 <= b < 1 for b in self.betas) or self.eps <= 0 or self.clip_norm <= 0:
            raise ArgumentError("invalid Adam / clipping settings")
        if self.dtype not in ("float32", "float64"):
            raise ArgumentError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self):
        return asdict(self)


def dequantize(x, rng, u=None) -> np.ndarray:
    """``(x + u) / 256`` with ``u ~ U[0, 1)`` per element (or the given ``u``)."""
    x = np.asarray(x, dtype=np.float64)
    if u is None:
        u = rng.random(x.shape)
    # 255 + u rounds up to 256 for u within 2^-46 of 1; keep the output in [0, 1)
    return np.minimum((x + u) / 256.0, BELOW_ONE)


def bits_per_dim(nll_nats, D: int) -> float:
    """Bits per dimension of 8-bit data modelled on ``[0, 1)^D`` after dequantization.

    The ``+ 8`` accounts for the 1/256 rescaling of each dimension.
    """
    return nll_nats / (D * LN2) + 8.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class EpochMetrics:
    epoch: int
    nll: float
    bpd: float
    seconds: float


def csv_progress(path):
    """Progress sink appending ``epoch,nll_nats,bpd,seconds`` rows to ``path``."""
    f = open(path, "w", newline="")
    writer = csv.writer(f)
    writer.writerow(["epoch", "nll_nats", "bpd", "seconds"])

    def sink(m: EpochMetrics):
        writer.writerow([m.epoch, f"{m.nll:.10g}", f"{m.bpd:.10g}", f"{m.seconds:.6f}"])
        f.flush()

    sink.close = f.close
    return sink


class Trainer:
    """Stateful training loop; its state is what checkpoints persist."""

    def __init__(self, model: FlowModel, dataset: Dataset, config: TrainConfig,
                 adam: AdamState | None = None, epoch: int = 0, rng_state=None):
        if len(dataset) == 0:
            raise ArgumentError("cannot train on an empty dataset")
        if tuple(dataset.shape) != model.config.input_shape:
            raise DimensionError(
                f"dataset images {tuple(dataset.shape)} do not match model input {model.config.input_shape}"
            )
        self.model = model
        self.dataset = dataset
        self.config = config
        self.dtype = np.dtype(config.dtype)
        if config.dtype != "float64":
            model.astype(self.dtype)
        self.adam = adam if adam is not None else AdamState()
        self.epoch = epoch
        self.rng = np.random.default_rng(config.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.D = int(np.prod(dataset.shape))

    def _batch(self, idx):
        return dequantize(self.dataset.images[idx], self.rng).astype(self.dtype)

    def initialize(self):
        if not self.model.initialized:
            n = min(len(self.dataset), self.config.init_batch)
            self.model.initialize(self._batch(np.arange(n)))

    def evaluate(self, seed=None) -> float:
        """Mean NLL (nats) over the dataset with a separately seeded dequantization."""
        rng = np.random.default_rng([self.config.seed if seed is None else seed, 1])
        total = 0.0
        for start in range(0, len(self.dataset), self.config.batch_size):
            imgs = self.dataset.images[start:start + self.config.batch_size]
            y = dequantize(imgs, rng).astype(self.dtype)
            total += float(-self.model.log_prob(y).sum())
        return total / len(self.dataset)

    def run_epoch(self) -> EpochMetrics:
        cfg = self.config
        t0 = time.perf_counter()
        order = self.rng.permutation(len(self.dataset))
        losses, sizes = [], []
        params = self.model.parameters()
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            y = self._batch(idx)
            try:
                loss, grads = self.model.loss_and_grads(y)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"epoch {self.epoch + 1}, batch {b}: {exc}", layer=exc.layer
                ) from exc
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise NonFiniteError(
                    f"epoch {self.epoch + 1}, batch {b}: non-finite gradient for {bad[0]}", layer=bad[0]
                )
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(params, grads, self.adam, cfg.lr, cfg.betas, cfg.eps)
            self.model.project()
            losses.append(loss)
            sizes.append(len(idx))
        self.epoch += 1
        nll = float(np.dot(losses, sizes) / np.sum(sizes))
        metrics = EpochMetrics(self.epoch, nll, bits_per_dim(nll, self.D), time.perf_counter() - t0)
        log.info("epoch %d nll %.4f bpd %.4f", metrics.epoch, metrics.nll, metrics.bpd)
        return metrics

    def run(self, epochs: int, progress=None) -> list[EpochMetrics]:
        self.initialize()
        history = []
        for _ in range(epochs):
            m = self.run_epoch()
            history.append(m)
            if progress is not None:
                progress(m)
        return history


@dataclass
class TrainResult:
    model: FlowModel
    metrics: list
    initial_nll: float
    trainer: Trainer


def train(model: FlowModel, dataset: Dataset, config: TrainConfig, progress=None) -> TrainResult:
    """Train ``model`` for ``config.epochs`` epochs; returns metrics per epoch.

    ``initial_nll`` is the dataset NLL after actnorm initialization and
    before the first update.
    """
    trainer = Trainer(model, dataset, config)
    trainer.initialize()
    initial = trainer.evaluate()
    history = trainer.run(config.epochs, progress)
    return TrainResult(model, history, initial, trainer)
