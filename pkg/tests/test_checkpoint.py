import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invflow.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from invflow.data import synth_dataset
from invflow.errors import FormatError
from invflow.model import FlowModel, ModelConfig
from invflow.tensor import MaskedKernel
from invflow.train import Trainer, TrainConfig

CFG = ModelConfig(levels=2, steps=1, hidden=4, input_shape=(1, 8, 8), seed=3)
TCFG = TrainConfig(epochs=5, batch_size=8, seed=4)


def trained(epochs):
    ds = synth_dataset("two-gaussians", 24, seed=0)
    t = Trainer(FlowModel(CFG), ds, TCFG)
    t.run(epochs)
    return t, ds


def test_save_load_save_identical(tmp_path):
    t, _ = trained(1)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, t.model, t)
    ck = load_checkpoint(p1)
    for k, v in t.model.parameters().items():
        assert ck.model.parameters()[k].tobytes() == v.tobytes()
    for k in t.adam.m:
        assert ck.adam.m[k].tobytes() == t.adam.m[k].tobytes()
    trainer = Trainer(ck.model, synth_dataset("two-gaussians", 24, seed=0), ck.train_config,
                      adam=ck.adam, epoch=ck.epoch, rng_state=ck.rng_state)
    save_checkpoint(p2, ck.model, trainer)
    assert p1.read_bytes() == p2.read_bytes()
    for _, layer in ck.model.layers():
        if hasattr(layer, "k"):
            MaskedKernel(layer.params["weight"])  # masked invariants hold after load


def test_resume_determinism(tmp_path):
    full, ds = trained(5)
    part, _ = trained(3)
    save_checkpoint(tmp_path / "p.ckpt", part.model, part)
    ck = load_checkpoint(tmp_path / "p.ckpt")
    resumed = Trainer(ck.model, ds, ck.train_config, adam=ck.adam, epoch=ck.epoch, rng_state=ck.rng_state)
    resumed.run(2)
    assert resumed.epoch == 5
    for k, v in full.model.parameters().items():
        assert resumed.model.parameters()[k].tobytes() == v.tobytes(), k


def test_bad_magic_and_version():
    data = dumps(FlowModel(CFG))
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXX" + data[4:])
    bumped = MAGIC + struct.pack("<I", 99) + data[8:]
    with pytest.raises(FormatError, match="version 99"):
        loads(bumped)
    with pytest.raises(FormatError, match="trailing"):
        loads(data + b"\x00")


def test_model_only_checkpoint_roundtrip():
    m = FlowModel(CFG)
    back = loads(dumps(m)).model
    assert back.config == m.config
    for k, v in m.parameters().items():
        assert back.parameters()[k].tobytes() == v.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_truncated_checkpoint_raises_format_error(data):
    blob = dumps(FlowModel(ModelConfig(levels=1, steps=1, hidden=2, input_shape=(1, 4, 4))))
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(FormatError):
        loads(blob[:cut])


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_corrupted_header_never_crashes(data):
    blob = bytearray(dumps(FlowModel(ModelConfig(levels=1, steps=1, hidden=2, input_shape=(1, 4, 4)))))
    pos = data.draw(st.integers(0, 200))
    blob[pos] ^= data.draw(st.integers(1, 255))
    try:
        loads(bytes(blob))
    except FormatError:
        pass
