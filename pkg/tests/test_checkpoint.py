import json
import struct

import numpy as np
import pytest

from mplssl.adapter import AdapterConfig, insert_adapters
from mplssl.checkpoint import MAGIC, frozen_hash, load_checkpoint, read_checkpoint, save_checkpoint, tensor_hash
from mplssl.errors import InvalidInputError
from mplssl.model import Model, ModelConfig, forward
from mplssl.train import TrainState, prepare_model

CFG = ModelConfig(conv_channels=8, n_layers=1, d_model=32, d_ffn=32, n_heads=2, proj_dim=8, n_classes=6)


def test_roundtrip_with_state(tmp_path, rng):
    m = prepare_model(insert_adapters(Model.init(CFG, seed=0), AdapterConfig(4)), "adapter")
    state = TrainState.for_model(m, 7)
    state.step = 3
    state.m = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in state.m.items()}
    state.last_loss = 1.5
    save_checkpoint(tmp_path / "a.ckpt", m, state)
    back, bstate, header = load_checkpoint(tmp_path / "a.ckpt")
    assert back.cfg == m.cfg and back.adapter_cfg == m.adapter_cfg and back.heads == 2
    assert back.ledger == m.ledger
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert bstate.step == 3 and bstate.last_loss == 1.5
    for k in state.m:
        np.testing.assert_array_equal(bstate.m[k], state.m[k])
    assert header["rng_state"]["seed"] == 7


def test_layout(tmp_path):
    m = Model.init(CFG, seed=0, heads=1)
    save_checkpoint(tmp_path / "a.ckpt", m)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, n = struct.unpack_from("<IQ", raw, 8)
    header = json.loads(raw[20:20 + n])
    assert version == 1 and header["schema_version"] == 1
    assert set(header["freeze_ledger"]) == set(m.params)
    # first tensor in the blob is the alphabetically first name
    (name_len,) = struct.unpack_from("<H", raw, 20 + n)
    assert raw[22 + n:22 + n + name_len].decode() == sorted(m.params)[0]


def test_route_one_survives_roundtrip(tmp_path, rng):
    m = insert_adapters(Model.init(CFG, seed=0), AdapterConfig(4))
    save_checkpoint(tmp_path / "a.ckpt", m)
    back, _, _ = load_checkpoint(tmp_path / "a.ckpt")
    w = rng.standard_normal((1, 4000))
    assert np.array_equal(forward(w, m, "I")[0].O.data, forward(w, back, "I")[0].O.data)


def test_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(InvalidInputError):
        read_checkpoint(tmp_path / "x")


def test_hashes():
    m = prepare_model(insert_adapters(Model.init(CFG, seed=0), AdapterConfig(4)), "adapter")
    h = frozen_hash(m)
    params = dict(m.params)
    params["blocks.0.adapter_ffn.up.bias"] = params["blocks.0.adapter_ffn.up.bias"] + 1
    assert frozen_hash(m.replace(params=params)) == h
    params["conv.0.weight"] = params["conv.0.weight"] * 2
    assert frozen_hash(m.replace(params=params)) != h
    assert tensor_hash({"a": np.zeros(2)}) != tensor_hash({"a": np.zeros(3)})
