import math
import warnings

import mpmath
import numpy as np
import pytest

from mplssl import autograd as ag
from mplssl.adapter import AdapterConfig, insert_adapters
from mplssl.errors import ConfigurationError, InvalidInputError
from mplssl.labeler import MultiLabelTarget
from mplssl.model import (
    FULL_SIZE, EncoderOutput, Model, ModelConfig, apply_mask, conv_encode, conv_output_length,
    count_params, encoder_forward, forward, head_distribution, msp_loss, span_mask,
)


@pytest.fixture(scope="module")
def model():
    return Model.init(ModelConfig(n_classes=10), seed=0)


def test_length_contract_one_second():
    lengths = [16000]
    for k, s in zip(FULL_SIZE.conv_kernels, FULL_SIZE.conv_strides):
        lengths.append((lengths[-1] - k) // s + 1)
    assert lengths == [16000, 3199, 1599, 799, 399, 199, 99, 49]
    assert conv_output_length(16000, FULL_SIZE) == 49


def test_frame_stride_is_20ms():
    assert FULL_SIZE.frame_stride == 320


def test_conv_encode_shape(model, rng):
    x = conv_encode(rng.standard_normal((2, 16000)), model)
    assert x.shape == (2, 49, 64)


def test_conv_encode_too_short(model):
    with pytest.raises(InvalidInputError):
        conv_encode(np.zeros((1, 300)), model)


def test_zero_waveform_gives_zero_conv_features(model):
    # with bias-free convolutions the conv stack maps silence to silence
    p = model.tensors(False)
    h = ag.Tensor(np.zeros((1, 1, 4000), np.float32))
    for i, (k, s) in enumerate(zip(model.cfg.conv_kernels, model.cfg.conv_strides)):
        h = ag.conv1d(h, p[f"conv.{i}.weight"], None, stride=s)
        h = ag.gelu(h)
    assert not np.any(h.data)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(tau=0.0)
    with pytest.raises(ConfigurationError):
        ModelConfig(conv_strides=(5, 2), conv_kernels=(10,))


def test_mask_prob_zero(model, rng):
    x = conv_encode(rng.standard_normal((1, 8000)), model)
    cfg = ModelConfig(n_classes=10, mask_prob=0.0)
    y, m = apply_mask(x, model.replace(cfg=cfg), rng)
    assert not m.any()
    np.testing.assert_array_equal(y.data, x.data)


def test_mask_prob_one_full_span(rng):
    m = span_mask(2, 17, 1.0, 17, rng)
    assert m.all()


def test_span_mask_union_semantics():
    class FixedRng:
        def random(self, shape):
            r = np.ones(shape)
            r[0, [1, 3]] = 0.0
            return r

    m = span_mask(1, 10, 0.5, 3, FixedRng())
    np.testing.assert_array_equal(np.flatnonzero(m[0]), [1, 2, 3, 4, 5])


def test_mask_deterministic(model, rng):
    x = conv_encode(rng.standard_normal((2, 16000)), model)
    _, a = apply_mask(x, model, np.random.default_rng(5))
    _, b = apply_mask(x, model, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_mask_replaces_with_embedding(model, rng):
    x = conv_encode(rng.standard_normal((1, 16000)), model)
    mask = np.zeros((1, x.shape[1]), bool)
    mask[0, 3:6] = True
    y, _ = apply_mask(x, model, None, mask=mask)
    np.testing.assert_array_equal(y.data[0, 3:6], np.broadcast_to(model.params["mask_emb"], (3, 64)))
    np.testing.assert_array_equal(y.data[0, 6:], x.data[0, 6:])


def test_per_layer_length(model, rng):
    out, _ = forward(rng.standard_normal((1, 8000)), model)
    assert len(out.per_layer) == model.cfg.n_layers + 1


def test_route_two_needs_adapters(model, rng):
    with pytest.raises(ConfigurationError):
        forward(rng.standard_normal((1, 8000)), model, route="II")
    with pytest.raises(ConfigurationError):
        forward(rng.standard_normal((1, 8000)), model, route="III")


def test_route_one_bypasses_adapters_bit_exact(model, rng):
    w = rng.standard_normal((2, 8000))
    adapted = insert_adapters(model, AdapterConfig(8), seed=1)
    # perturb the adapters so that route II really differs
    params = {k: (v + 0.1 if ".adapter_" in k else v) for k, v in adapted.params.items()}
    adapted = adapted.replace(params=params)
    base, _ = forward(w, model)
    r1, _ = forward(w, adapted, "I")
    r2, _ = forward(w, adapted, "II")
    np.testing.assert_array_equal(base.O.data, r1.O.data)
    assert not np.array_equal(r1.O.data, r2.O.data)


def test_single_frame_attention_weight_is_one(model, rng):
    x = ag.Tensor(rng.standard_normal((1, 1, 64)).astype(np.float32))
    out = encoder_forward(x, model)
    assert out.O.shape == (1, 1, 64)
    # with one key, attention output = value projection of the only frame
    from mplssl.model import _attention

    p = model.tensors(False)
    a = _attention(x, p, "blocks.0", 4).data
    v = ag.linear(x, p["blocks.0.attn.v.weight"], p["blocks.0.attn.v.bias"])
    o = ag.linear(v, p["blocks.0.attn.o.weight"], p["blocks.0.attn.o.bias"]).data
    np.testing.assert_allclose(a, o, rtol=1e-6, atol=1e-6)


# -- cosine head ------------------------------------------------------------------

def test_identical_embeddings_uniform(rng):
    emb = np.tile(rng.standard_normal(4), (6, 1))
    p = head_distribution(rng.standard_normal(5), rng.standard_normal((4, 5)), emb, 0.1)
    np.testing.assert_allclose(p, 1 / 6, atol=1e-15)


def test_two_class_oracle():
    emb = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = head_distribution(np.array([1.0, 0.0]), np.eye(2), emb, 0.1)
    with mpmath.workdps(50):
        ref = mpmath.e ** 10 / (mpmath.e ** 10 + 1)
    assert abs(p[0] - float(ref)) < 1e-15
    assert p[0] == pytest.approx(0.9999546, abs=1e-7)


def test_distribution_sums_to_one(rng):
    for _ in range(50):
        p = head_distribution(rng.standard_normal(8), rng.standard_normal((4, 8)), rng.standard_normal((9, 4)), 0.1)
        assert abs(p.sum() - 1) < 1e-12


def test_zero_projection_gives_uniform(rng):
    p = head_distribution(np.zeros(3), rng.standard_normal((4, 3)), rng.standard_normal((5, 4)), 0.1)
    np.testing.assert_allclose(p, 0.2)


def test_tau_must_be_positive(rng):
    with pytest.raises(InvalidInputError):
        head_distribution(np.ones(2), np.eye(2), np.eye(2), 0.0)


# -- loss -------------------------------------------------------------------------

def _targets(t, c, rng, n=2):
    return [MultiLabelTarget(rng.integers(0, c, t), rng.integers(0, c + 1, t), c) for _ in range(n)]


def test_uniform_heads_loss_closed_form(model, rng):
    t = 7
    p = model.tensors(False)
    for h in (1, 2):
        p[f"head{h}.proj.weight"] = ag.Tensor(np.zeros_like(model.params[f"head{h}.proj.weight"]))
        p[f"head{h}.proj.bias"] = ag.Tensor(np.zeros_like(model.params[f"head{h}.proj.bias"]))
    out = EncoderOutput(ag.Tensor(rng.standard_normal((2, t, 64)).astype(np.float32)), [])
    mask = rng.random((2, t)) < 0.5
    mask[0, 0] = True
    res = msp_loss(out, mask, _targets(t, 10, rng), model, p)
    assert float(res.loss.data) == pytest.approx(math.log(10) + math.log(11), rel=1e-6)
    assert res.n_masked == mask.sum()


def test_empty_mask_zero_loss_with_warning(model, rng):
    out = EncoderOutput(ag.Tensor(rng.standard_normal((1, 5, 64)).astype(np.float32)), [])
    with pytest.warns(RuntimeWarning):
        res = msp_loss(out, np.zeros((1, 5), bool), _targets(5, 10, rng, 1), model)
    assert res.empty and float(res.loss.data) == 0.0


def test_unmasked_frames_get_zero_gradient(model, rng):
    o = ag.Tensor(rng.standard_normal((2, 6, 64)), requires_grad=True)
    mask = np.zeros((2, 6), bool)
    mask[0, 2] = mask[1, 4] = True
    m64 = model.astype(np.float64)
    res = msp_loss(EncoderOutput(o, []), mask, _targets(6, 10, rng), m64, m64.tensors(False))
    res.loss.backward()
    assert not np.any(o.grad[~mask])
    assert np.all(np.abs(o.grad[mask]).sum(axis=-1) > 0)


def test_label_out_of_range(model, rng):
    out = EncoderOutput(ag.Tensor(rng.standard_normal((1, 4, 64)).astype(np.float32)), [])
    bad = [MultiLabelTarget(np.array([0, 1, 10, 2]), np.zeros(4, int), 10)]
    with pytest.raises(InvalidInputError):
        msp_loss(out, np.ones((1, 4), bool), bad, model)
    bad = [MultiLabelTarget(np.zeros(4, int), np.array([0, 11, 0, 0]), 10)]
    with pytest.raises(InvalidInputError):
        msp_loss(out, np.ones((1, 4), bool), bad, model)


def test_targets_truncated_to_frames(model, rng):
    out = EncoderOutput(ag.Tensor(rng.standard_normal((1, 4, 64)).astype(np.float32)), [])
    long = _targets(9, 10, rng, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = msp_loss(out, np.ones((1, 4), bool), long, model)
    assert res.n_masked == 4


# -- parameter accounting -----------------------------------------------------------

def test_full_size_counts():
    assert count_params(FULL_SIZE, heads=1).total == 94_696_448
    assert count_params(FULL_SIZE, heads=2).total == 95_021_568


def test_second_head_delta_formula():
    delta = count_params(FULL_SIZE, heads=2).total - count_params(FULL_SIZE, heads=1).total
    assert delta == 768 * 256 + 256 + 501 * 256


@pytest.mark.parametrize("h", [64, 128, 256, 512])
def test_adapter_delta_formula(h):
    d = 768
    base = count_params(FULL_SIZE, heads=2).total
    got = count_params(FULL_SIZE, AdapterConfig(h), heads=2).total - base
    assert got == 2 * 12 * (2 * d + d * h + h + h * d + d)


def test_512_adapter_delta_literal():
    base = count_params(FULL_SIZE, heads=2).total
    assert count_params(FULL_SIZE, AdapterConfig(512), heads=2).total - base == 18_941_952


def test_breakdown_sums_to_total():
    c = count_params(FULL_SIZE, AdapterConfig(64), heads=2)
    assert sum(c.breakdown.values()) == c.total
    assert sum(c.trainable_breakdown.values()) == c.trainable


def test_model_count_matches_count_params():
    m = Model.init(ModelConfig(), seed=0, heads=2)
    assert m.count().total == count_params(ModelConfig(), heads=2).total


def test_add_second_head(rng):
    m = Model.init(ModelConfig(n_classes=7), seed=0, heads=1)
    m2 = m.add_second_head(seed=1)
    assert m2.heads == 2 and m2.params["head2.emb"].shape[0] == 8
    assert m2.params["head1.emb"].shape[0] == 7
    with pytest.raises(ConfigurationError):
        m2.add_second_head()
