"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"IFLW" | u32 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    u32 n_tensors | n_tensors * (u16 name_len | name | u8 ndim | u32 dims... | f64 data)

The header holds the model config, epoch counter, Adam step, RNG state and
actnorm initialization flags.  Tensors are the model parameters
(``param/<path>``) followed by the Adam moments (``adam.m/<path>``,
``adam.v/<path>``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import FlowModel, ModelConfig
from .train import AdamState, TrainConfig

MAGIC = b"IFLW"
VERSION = 1


@dataclass
class Checkpoint:
    model: FlowModel
    adam: AdamState
    epoch: int = 0
    rng_state: dict | None = None
    train_config: TrainConfig | None = None


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dumps(model: FlowModel, adam: AdamState | None = None, epoch: int = 0,
          rng_state=None, train_config: TrainConfig | None = None) -> bytes:
    adam = adam if adam is not None else AdamState()
    header = {
        "model": model.config.to_dict(),
        "epoch": epoch,
        "adam_step": adam.step,
        "rng": rng_state,
        "actnorm_initialized": [a.initialized for a in model.actnorms()],
        "train": train_config.to_dict() if train_config is not None else None,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tensors = [(f"param/{k}", v) for k, v in model.parameters().items()]
    for k in model.parameters():
        if k in adam.m:
            tensors.append((f"adam.m/{k}", adam.m[k]))
            tensors.append((f"adam.v/{k}", adam.v[k]))
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes, struct.pack("<I", len(tensors))]
    parts.extend(_tensor_bytes(name, arr) for name, arr in tensors)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}; expected {MAGIC!r}", offset=0)
    version, hlen = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {VERSION})", offset=4)
    try:
        header = json.loads(r.take(hlen, "header json").decode())
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=12) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode(errors="replace")
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size, f"data of {name}"), dtype="<f8").reshape(shape)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint tensors", offset=r.pos)

    model = FlowModel(config)
    params = model.parameters()
    for k, arr in params.items():
        src = tensors.get(f"param/{k}")
        if src is None or src.shape != arr.shape:
            raise FormatError(f"checkpoint is missing or mis-shapes parameter {k}")
        arr[...] = src
    flags = header.get("actnorm_initialized", [])
    for layer, flag in zip(model.actnorms(), flags):
        layer.initialized = bool(flag)
    model.project()

    adam = AdamState(step=int(header.get("adam_step", 0)))
    for k in params:
        if f"adam.m/{k}" in tensors:
            adam.m[k] = tensors[f"adam.m/{k}"].astype(np.float64)
            adam.v[k] = tensors[f"adam.v/{k}"].astype(np.float64)
    train = header.get("train")
    return Checkpoint(
        model=model,
        adam=adam,
        epoch=int(header.get("epoch", 0)),
        rng_state=header.get("rng"),
        train_config=TrainConfig(**train) if train else None,
    )


def save_checkpoint(path, model: FlowModel, trainer=None) -> None:
    """Write ``model`` (and the trainer's optimizer/RNG state, if given)."""
    if trainer is None:
        data = dumps(model)
    else:
        data = dumps(model, trainer.adam, trainer.epoch, trainer.rng.bit_generator.state, trainer.config)
    Path(path).write_bytes(data)


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
