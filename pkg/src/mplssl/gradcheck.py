"""Finite-difference checks for every differentiable op used in training.

Each registered op builds a random float64 instance and a scalar objective
``sum(op(inputs) * R)`` for a fixed random ``R``. The analytic gradient of
every input is compared with central differences; the error of one input is
``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor)``
where ``floor`` is 1e-3 of the largest gradient norm over all inputs, so
inputs whose true gradient is identically zero (the attention key bias) are
judged against the instance's scale instead of finite-difference noise.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .adapter import AdapterConfig, adapter_apply, adapter_shapes
from .errors import InvalidInputError
from .model import Model, ModelConfig, _attention, conv_encode, encoder_forward, msp_loss
from .labeler import MultiLabelTarget

REGISTRY: dict = {}


def register(name):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# -- registry --------------------------------------------------------------------
# builders return (inputs: dict name -> ndarray, fn: dict name -> Tensor -> scalar Tensor)

@register("add")
def _b_add(rng, n):
    r = rng.standard_normal((n, 3))
    return {"a": rng.standard_normal((n, 3)), "b": rng.standard_normal((3,))}, \
        lambda t: ag.tsum(ag.mul(ag.sub(ag.add(t["a"], t["b"]), ag.mul(t["b"], 0.5)), r))


@register("mul")
def _b_mul(rng, n):
    r = rng.standard_normal((n, 3))
    return {"a": rng.standard_normal((n, 3)), "b": rng.standard_normal((n, 1))}, \
        lambda t: ag.tsum(ag.mul(ag.mul(t["a"], t["b"]), r))


@register("exp_log")
def _b_explog(rng, n):
    r = rng.standard_normal((n,))
    return {"x": rng.uniform(0.5, 2.0, n)}, \
        lambda t: ag.tsum(ag.mul(ag.add(ag.exp(t["x"]), ag.log(t["x"])), r))


@register("relu")
def _b_relu(rng, n):
    r = rng.standard_normal((n, 4))
    return {"x": _away_from_zero(rng, (n, 4))}, lambda t: ag.tsum(ag.mul(ag.relu(t["x"]), r))


@register("gelu")
def _b_gelu(rng, n):
    r = rng.standard_normal((n, 4))
    return {"x": rng.standard_normal((n, 4)) * 2}, lambda t: ag.tsum(ag.mul(ag.gelu(t["x"]), r))


@register("sigmoid")
def _b_sigmoid(rng, n):
    r = rng.standard_normal((n, 4))
    return {"x": rng.standard_normal((n, 4)) * 2}, lambda t: ag.tsum(ag.mul(ag.sigmoid(t["x"]), r))


@register("matmul")
def _b_matmul(rng, n):
    r = rng.standard_normal((2, n, 5))
    return {"a": rng.standard_normal((2, n, 3)), "b": rng.standard_normal((2, 3, 5))}, \
        lambda t: ag.tsum(ag.mul(ag.matmul(t["a"], t["b"]), r))


@register("linear")
def _b_linear(rng, n):
    r = rng.standard_normal((2, 3, 4))
    return {"x": rng.standard_normal((2, 3, n)), "w": rng.standard_normal((4, n)), "b": rng.standard_normal(4)}, \
        lambda t: ag.tsum(ag.mul(ag.linear(t["x"], t["w"], t["b"]), r))


@register("conv1d")
def _b_conv(rng, n):
    x = rng.standard_normal((2, 3, n + 10))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    out_len = (n + 10 - 3) // 2 + 1
    r = rng.standard_normal((2, 4, out_len))
    return {"x": x, "w": w, "b": b}, lambda t: ag.tsum(ag.mul(ag.conv1d(t["x"], t["w"], t["b"], stride=2), r))


@register("conv1d_grouped")
def _b_gconv(rng, n):
    x = rng.standard_normal((2, 4, n + 6))
    w = rng.standard_normal((4, 2, 3))
    r = rng.standard_normal((2, 4, n + 6))
    return {"x": x, "w": w, "b": rng.standard_normal(4)}, \
        lambda t: ag.tsum(ag.mul(ag.conv1d(t["x"], t["w"], t["b"], padding=(1, 1), groups=2), r))


@register("layer_norm")
def _b_ln(rng, n):
    r = rng.standard_normal((3, n))
    return {"x": rng.standard_normal((3, n)), "g": rng.standard_normal(n), "b": rng.standard_normal(n)}, \
        lambda t: ag.tsum(ag.mul(ag.layer_norm(t["x"], t["g"], t["b"]), r))


@register("group_norm")
def _b_gn(rng, n):
    r = rng.standard_normal((2, 3, n + 4))
    def fn(t):
        h = ag.normalize(t["x"])
        h = ag.add(ag.mul(h, ag.reshape(t["g"], (-1, 1))), ag.reshape(t["b"], (-1, 1)))
        return ag.tsum(ag.mul(h, r))
    return {"x": rng.standard_normal((2, 3, n + 4)), "g": rng.standard_normal(3), "b": rng.standard_normal(3)}, fn


@register("softmax")
def _b_softmax(rng, n):
    r = rng.standard_normal((3, n))
    return {"x": rng.standard_normal((3, n))}, lambda t: ag.tsum(ag.mul(ag.softmax(t["x"]), r))


@register("log_softmax")
def _b_logsoftmax(rng, n):
    r = rng.standard_normal((3, n))
    return {"x": rng.standard_normal((3, n))}, lambda t: ag.tsum(ag.mul(ag.log_softmax(t["x"]), r))


@register("shape_ops")
def _b_shape(rng, n):
    r = rng.standard_normal((2, n))
    def fn(t):
        z = ag.concat([t["a"], ag.transpose(t["b"], (1, 0))], axis=0)
        z = ag.stack([z, ag.reshape(t["c"], z.shape)], axis=0)
        z = ag.getitem(ag.pad_last(z, 1, 1), (slice(None), [0, 2, 2], slice(1, n + 1)))
        return ag.tsum(ag.mul(ag.mean(z, axis=1), r))
    return {"a": rng.standard_normal((2, n)), "b": rng.standard_normal((n, 2)),
            "c": rng.standard_normal((4 * n,))}, fn


@register("mask_replace")
def _b_mask(rng, n):
    mask = np.zeros((2, n), bool)
    mask[0, : n // 2 + 1] = True
    mask[1, -1] = True
    r = rng.standard_normal((2, n, 3))
    return {"x": rng.standard_normal((2, n, 3)), "e": rng.standard_normal(3)}, \
        lambda t: ag.tsum(ag.mul(ag.where_rows(t["x"], mask, t["e"]), r))


@register("attention")
def _b_attn(rng, n):
    d = 8
    names = [f"b.attn.{k}.{s}" for k in "qkvo" for s in ("weight", "bias")]
    inputs = {k: rng.standard_normal((d, d)) / 3 if k.endswith("weight") else rng.standard_normal(d) / 3
              for k in names}
    inputs["h"] = rng.standard_normal((2, n, d))
    r = rng.standard_normal((2, n, d))
    return inputs, lambda t: ag.tsum(ag.mul(_attention(t["h"], t, "b", 2), r))


@register("ffn")
def _b_ffn(rng, n):
    d, f = 6, 12
    r = rng.standard_normal((2, n, d))
    def fn(t):
        z = ag.gelu(ag.linear(t["x"], t["w1"], t["b1"]))
        return ag.tsum(ag.mul(ag.linear(z, t["w2"], t["b2"]), r))
    return {"x": rng.standard_normal((2, n, d)), "w1": rng.standard_normal((f, d)) / 2, "b1": rng.standard_normal(f),
            "w2": rng.standard_normal((d, f)) / 3, "b2": rng.standard_normal(d)}, fn


@register("adapter")
def _b_adapter(rng, n):
    shapes = adapter_shapes("a", n, 3)
    inputs = {k: rng.standard_normal(s) for k, s in shapes.items()}
    inputs["h"] = rng.standard_normal((4, n))
    r = rng.standard_normal((4, n))
    return inputs, lambda t: ag.tsum(ag.mul(adapter_apply(t["h"], t, "a"), r))


@register("cosine_logits")
def _b_cos(rng, n):
    r = rng.standard_normal((3, 5))
    return {"u": rng.standard_normal((3, n)), "e": rng.standard_normal((5, n))}, \
        lambda t: ag.tsum(ag.mul(ag.cosine_logits(t["u"], t["e"], 0.1), r))


@register("cosine_head_loss")
def _b_cosine_head_loss(rng, n):
    """-log p(c | o_t) with p from the cosine-similarity softmax, C = 5."""
    labels = rng.integers(0, 5, size=3)
    def fn(t):
        u = ag.linear(t["o"], t["A"], t["b"])
        return ag.cross_entropy(ag.cosine_logits(u, t["e"], 0.1), labels)
    return {"o": rng.standard_normal((3, n)), "A": rng.standard_normal((4, n)),
            "b": rng.standard_normal(4), "e": rng.standard_normal((5, 4))}, fn


@register("weighted_layer_sum")
def _b_wls(rng, n):
    from .probe import weighted_layer_sum

    r = rng.standard_normal((2, n, 3))
    return {"layers": rng.standard_normal((4, 2, n, 3)), "w": rng.standard_normal(4)}, \
        lambda t: ag.tsum(ag.mul(weighted_layer_sum(t["layers"], t["w"]), r))


@register("window_stack")
def _b_win(rng, n):
    from .probe import window_stack

    r = rng.standard_normal((2, n, 7 * 3))
    return {"x": rng.standard_normal((2, n, 3))}, lambda t: ag.tsum(ag.mul(window_stack(t["x"], 3), r))


@register("pit_mse")
def _b_pit(rng, n):
    from .probe import pit_mse_tensor

    ref = rng.uniform(0, 1, (3, 2, n))
    return {"est": rng.uniform(0, 1, (3, 2, n))}, lambda t: pit_mse_tensor(t["est"], ref)[0]


def tiny_config() -> ModelConfig:
    return ModelConfig(conv_channels=4, conv_strides=(5, 2), conv_kernels=(10, 3), n_layers=1, d_model=8,
                       d_ffn=16, n_heads=2, proj_dim=4, n_classes=5, mask_prob=0.3, mask_span=2,
                       pos_conv_kernel=3, pos_conv_groups=2)


def _tiny_model(rng, adapters: bool) -> Model:
    cfg = tiny_config()
    model = Model.init(cfg, seed=int(rng.integers(1 << 30)), heads=2, dtype=np.float64,
                       adapters=AdapterConfig(hidden=3) if adapters else None)
    params = {}
    for k, v in model.params.items():
        # non-degenerate values everywhere (zero-init up-projections would hide adapter paths)
        params[k] = v + 0.3 * rng.standard_normal(v.shape) if k.endswith(("up.weight", "bias")) else v
    return model.replace(params=params)


def _end_to_end(rng, n, adapters):
    model = _tiny_model(rng, adapters)
    waves = rng.standard_normal((2, 20 * n + 10))
    t = (waves.shape[1] - 10) // 5 + 1
    t = (t - 3) // 2 + 1
    mask = np.zeros((2, t), bool)
    mask[:, 1:4] = True
    targets = [MultiLabelTarget(rng.integers(0, 5, t), rng.integers(0, 6, t), 5) for _ in range(2)]
    route = "II" if adapters else "I"

    def fn(tp):
        x = conv_encode(waves, model, tp)
        x = ag.where_rows(x, mask, tp["mask_emb"])
        out = encoder_forward(x, model, route, tp)
        return msp_loss(out, mask, targets, model, tp).loss

    return dict(model.params), fn


@register("msp_loss")
def _b_msp(rng, n):
    """Masked two-head loss w.r.t. the encoder output and both heads."""
    model = _tiny_model(rng, False)
    o = rng.standard_normal((2, n + 4, 8))
    mask = np.zeros((2, n + 4), bool)
    mask[0, ::2] = True
    targets = [MultiLabelTarget(rng.integers(0, 5, n + 4), rng.integers(0, 6, n + 4), 5) for _ in range(2)]
    from .model import EncoderOutput

    inputs = {k: v for k, v in model.params.items() if k.startswith("head")}
    inputs["O"] = o
    return inputs, lambda t: msp_loss(EncoderOutput(t["O"], []), mask, targets, model, t).loss


@register("end_to_end")
def _b_e2e(rng, n):
    return _end_to_end(rng, n, adapters=False)


@register("end_to_end_adapters")
def _b_e2e_ad(rng, n):
    return _end_to_end(rng, n, adapters=True)


DEFAULT_SIZES = {"end_to_end": 1, "end_to_end_adapters": 1}


# -- checker ---------------------------------------------------------------------

def _numeric_grad(fn, inputs: dict, name: str, eps: float) -> np.ndarray:
    base = inputs[name]
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    consts = {k: ag.Tensor(v) for k, v in inputs.items()}
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        consts[name] = ag.Tensor(base)
        hi = float(fn(consts).data)
        flat[i] = orig - eps
        consts[name] = ag.Tensor(base)
        lo = float(fn(consts).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


FLOOR = 1e-3


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale


def grad_check(op_name: str, size: int | None = None, eps: float = 1e-5, seed: int = 0,
               detail: bool = False):
    """Max relative error between analytic and central-difference gradients."""
    if op_name not in REGISTRY:
        raise InvalidInputError(f"unknown op {op_name!r}; registered: {sorted(REGISTRY)}")
    if size is None:
        size = DEFAULT_SIZES.get(op_name, 4)
    if size < 1:
        raise InvalidInputError("size must be >= 1")
    rng = np.random.default_rng(seed)
    inputs, fn = REGISTRY[op_name](rng, size)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: ag.Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    fn(leaves).backward()
    pairs = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(inputs[name])
        pairs[name] = (analytic, _numeric_grad(fn, inputs, name, eps))
    floor = FLOOR * max(max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in pairs.values())
    errors = {name: relative_error(a, n, floor) for name, (a, n) in pairs.items()}
    worst = max(errors.values())
    return (worst, errors) if detail else worst
