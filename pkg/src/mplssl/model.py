"""Backbone: conv frame encoder, span masking, pre-LN Transformer, dual heads.

Parameters live in a flat ``name -> ndarray`` store on :class:`Model`; its
``ledger`` says which of them are trainable. Forward functions take a matching
``name -> Tensor`` mapping (see :meth:`Model.tensors`), so the same code runs
with float32 training weights and float64 gradient-check weights.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .adapter import SITES, AdapterConfig, adapter_apply, adapter_shapes, is_adapter_param
from .errors import ConfigurationError, InvalidInputError
from .signal import Waveform

ROUTES = ("I", "II")


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: int = 32
    conv_strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    conv_kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    conv_bias: bool = False
    n_layers: int = 3
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    proj_dim: int = 32
    n_classes: int = 100
    mask_prob: float = 0.08
    mask_span: int = 10
    tau: float = 0.1
    pos_conv_kernel: int = 15
    pos_conv_groups: int = 16

    def __post_init__(self):
        object.__setattr__(self, "conv_strides", tuple(int(s) for s in self.conv_strides))
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        if len(self.conv_strides) != len(self.conv_kernels):
            raise ConfigurationError("conv_strides and conv_kernels differ in length")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.d_model % self.pos_conv_groups:
            raise ConfigurationError("d_model must be divisible by pos_conv_groups")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if not 0.0 <= self.mask_prob <= 1.0 or self.mask_span < 1:
            raise ConfigurationError("mask_prob must lie in [0, 1] and mask_span >= 1")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_strides"] = list(self.conv_strides)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @property
    def frame_stride(self) -> int:
        return int(np.prod(self.conv_strides))


FULL_SIZE = ModelConfig(conv_channels=512, n_layers=12, d_model=768, d_ffn=3072, n_heads=12,
                        proj_dim=256, n_classes=500, pos_conv_kernel=128, pos_conv_groups=16)


def conv_output_length(n_samples: int, cfg: ModelConfig) -> int:
    length = n_samples
    for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
        length = (length - k) // s + 1
        if length < 1:
            return 0
    return length


# -- parameter layout ---------------------------------------------------------

def head_shapes(cfg: ModelConfig, head: int) -> dict:
    n_cls = cfg.n_classes + (1 if head == 2 else 0)
    return {
        f"head{head}.proj.weight": (cfg.proj_dim, cfg.d_model),
        f"head{head}.proj.bias": (cfg.proj_dim,),
        f"head{head}.emb": (n_cls, cfg.proj_dim),
    }


def param_shapes(cfg: ModelConfig, adapters: AdapterConfig | None = None, heads: int = 2) -> dict:
    """Ordered ``name -> shape`` map of every tensor in the model."""
    shapes = {}
    ch, cin = cfg.conv_channels, 1
    for i, k in enumerate(cfg.conv_kernels):
        shapes[f"conv.{i}.weight"] = (ch, cin, k)
        if cfg.conv_bias:
            shapes[f"conv.{i}.bias"] = (ch,)
        if i == 0:
            shapes["conv.0.norm.gain"] = (ch,)
            shapes["conv.0.norm.bias"] = (ch,)
        cin = ch
    d = cfg.d_model
    shapes.update({
        "feature_norm.gain": (ch,), "feature_norm.bias": (ch,),
        "feature_proj.weight": (d, ch), "feature_proj.bias": (d,),
        "mask_emb": (d,),
        "pos_conv.weight": (d, d // cfg.pos_conv_groups, cfg.pos_conv_kernel), "pos_conv.bias": (d,),
    })
    for layer in range(cfg.n_layers):
        b = f"blocks.{layer}"
        shapes[f"{b}.attn_norm.gain"] = (d,)
        shapes[f"{b}.attn_norm.bias"] = (d,)
        for proj in "qkvo":
            shapes[f"{b}.attn.{proj}.weight"] = (d, d)
            shapes[f"{b}.attn.{proj}.bias"] = (d,)
        shapes[f"{b}.ffn_norm.gain"] = (d,)
        shapes[f"{b}.ffn_norm.bias"] = (d,)
        shapes[f"{b}.ffn.fc1.weight"] = (cfg.d_ffn, d)
        shapes[f"{b}.ffn.fc1.bias"] = (cfg.d_ffn,)
        shapes[f"{b}.ffn.fc2.weight"] = (d, cfg.d_ffn)
        shapes[f"{b}.ffn.fc2.bias"] = (d,)
        if adapters is not None:
            for site in SITES:
                shapes.update(adapter_shapes(f"{b}.{site}", d, adapters.hidden))
    shapes["encoder_norm.gain"] = (d,)
    shapes["encoder_norm.bias"] = (d,)
    for h in range(1, heads + 1):
        shapes.update(head_shapes(cfg, h))
    return shapes


def component_of(name: str) -> str:
    if is_adapter_param(name):
        return "adapter_norms" if ".norm." in name else "adapters"
    if name.startswith("conv."):
        return "conv"
    if name.startswith("feature_"):
        return "feature_proj"
    if name.startswith("pos_conv"):
        return "positional"
    if name.startswith("blocks."):
        return "transformer_norms" if "_norm." in name else "transformer"
    if name.startswith("head1"):
        return "head1"
    if name.startswith("head2"):
        return "head2"
    if name.startswith("encoder_norm"):
        return "transformer_norms"
    return name  # mask_emb


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int
    breakdown: dict
    trainable_breakdown: dict

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _count(shapes: dict, ledger: dict) -> ParamCount:
    breakdown, tb = {}, {}
    total = trainable = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        comp = component_of(name)
        breakdown[comp] = breakdown.get(comp, 0) + n
        total += n
        if ledger.get(name, True):
            trainable += n
            tb[comp] = tb.get(comp, 0) + n
    return ParamCount(total, trainable, breakdown, tb)


def count_params(cfg: ModelConfig, adapters: AdapterConfig | None = None, heads: int = 1,
                 mode: str | None = None) -> ParamCount:
    """Exact parameter counts; ``mode`` defaults to adapter mode when adapters are given."""
    from .adapter import adapter_ledger

    shapes = param_shapes(cfg, adapters, heads)
    mode = mode or ("adapter" if adapters is not None else "full")
    ledger = adapter_ledger(shapes) if mode == "adapter" else {n: True for n in shapes}
    return _count(shapes, ledger)


# -- model container ------------------------------------------------------------

def _init_param(name: str, shape, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("norm.gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name == "mask_emb":
        return rng.standard_normal(shape) * 0.5
    if name.endswith(".emb"):
        return rng.standard_normal(shape)
    if name.startswith("conv."):
        fan_in = shape[1] * shape[2]
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if name == "pos_conv.weight":
        return rng.standard_normal(shape) * (0.5 / np.sqrt(shape[1] * shape[2]))
    fan_in = shape[1]
    std = 1.0 / np.sqrt(fan_in)
    if name.endswith("attn.o.weight") or name.endswith("fc2.weight"):
        std /= np.sqrt(2.0 * cfg.n_layers)
    return rng.standard_normal(shape) * std


@dataclass
class Model:
    cfg: ModelConfig
    params: dict
    ledger: dict
    adapter_cfg: AdapterConfig | None = None
    heads: int = 2
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, heads: int = 2, dtype=np.float32,
             adapters: AdapterConfig | None = None) -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(cfg, None, heads).items():
            params[name] = _init_param(name, shape, cfg, rng).astype(dtype)
        model = cls(cfg, params, {n: True for n in params}, None, heads)
        if adapters is not None:
            from .adapter import insert_adapters

            model = insert_adapters(model, adapters, seed=seed + 1)
        return model

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def has_adapters(self) -> bool:
        return self.adapter_cfg is not None

    def replace(self, **changes) -> "Model":
        return dataclasses.replace(self, **changes)

    def astype(self, dtype) -> "Model":
        return self.replace(params={k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return self.replace(params={k: v.copy() for k, v in self.params.items()},
                            ledger=dict(self.ledger), meta=dict(self.meta))

    def trainable_names(self) -> list:
        return sorted(n for n, t in self.ledger.items() if t)

    def tensors(self, trainable: bool = True) -> dict:
        """Fresh leaf tensors; ``requires_grad`` follows the ledger when ``trainable``."""
        return {n: ag.Tensor(v, requires_grad=trainable and self.ledger[n], name=n)
                for n, v in self.params.items()}

    def add_second_head(self, seed: int = 0) -> "Model":
        if self.heads == 2:
            raise ConfigurationError("model already has two heads")
        rng = np.random.default_rng(seed)
        params = dict(self.params)
        for name, shape in head_shapes(self.cfg, 2).items():
            params[name] = _init_param(name, shape, self.cfg, rng).astype(self.dtype)
        ledger = dict(self.ledger)
        ledger.update({n: True for n in params if n not in ledger})
        return self.replace(params=params, ledger=ledger, heads=2)

    def count(self) -> ParamCount:
        shapes = {n: v.shape for n, v in self.params.items()}
        return _count(shapes, self.ledger)

    def without_adapters(self) -> "Model":
        params = {n: v for n, v in self.params.items() if not is_adapter_param(n)}
        ledger = {n: t for n, t in self.ledger.items() if n in params}
        return self.replace(params=params, ledger=ledger, adapter_cfg=None)


# -- forward pieces -------------------------------------------------------------

def _batch(waves) -> np.ndarray:
    if isinstance(waves, Waveform):
        return waves.samples[None, :]
    arr = np.asarray(waves)
    if arr.dtype == object or (arr.ndim == 1 and len(arr) and isinstance(waves[0], Waveform)):
        arr = np.stack([w.samples if isinstance(w, Waveform) else np.asarray(w) for w in waves])
    return arr[None, :] if arr.ndim == 1 else arr


def conv_encode(waves, model: Model, p: dict | None = None) -> ag.Tensor:
    """Waveforms (B, L) -> frame features (B, T, d_model)."""
    cfg = model.cfg
    p = p if p is not None else model.tensors(False)
    x = _batch(waves)
    if conv_output_length(x.shape[-1], cfg) < 1:
        raise InvalidInputError(f"waveform of {x.shape[-1]} samples yields no frames")
    h = ag.Tensor(x[:, None, :].astype(model.dtype))
    for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides)):
        h = ag.conv1d(h, p[f"conv.{i}.weight"], p.get(f"conv.{i}.bias"), stride=s)
        if i == 0:  # per-channel group norm over time
            h = ag.normalize(h)
            h = ag.add(ag.mul(h, ag.reshape(p["conv.0.norm.gain"], (-1, 1))),
                       ag.reshape(p["conv.0.norm.bias"], (-1, 1)))
        h = ag.gelu(h)
    h = ag.transpose(h, (0, 2, 1))
    h = ag.layer_norm(h, p["feature_norm.gain"], p["feature_norm.bias"])
    return ag.linear(h, p["feature_proj.weight"], p["feature_proj.bias"])


def span_mask(batch: int, n_frames: int, mask_prob: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Union of spans ``[i, i + span)`` started independently with ``mask_prob``."""
    starts = rng.random((batch, n_frames)) < mask_prob
    csum = np.cumsum(starts, axis=1)
    lagged = np.zeros_like(csum)
    if span < n_frames:
        lagged[:, span:] = csum[:, :-span]
    return (csum - lagged) > 0


def apply_mask(x: ag.Tensor, model: Model, rng: np.random.Generator, p: dict | None = None,
               mask: np.ndarray | None = None):
    """Replace masked frames by the learned mask embedding. Returns ``(x_masked, mask)``."""
    p = p if p is not None else model.tensors(False)
    if mask is None:
        mask = span_mask(x.shape[0], x.shape[1], model.cfg.mask_prob, model.cfg.mask_span, rng)
    if not mask.any():
        return x, mask
    return ag.where_rows(x, mask, p["mask_emb"]), mask


@dataclass
class EncoderOutput:
    O: ag.Tensor
    per_layer: list


def _attention(h: ag.Tensor, p: dict, b: str, n_heads: int) -> ag.Tensor:
    bsz, t, d = h.shape
    dh = d // n_heads

    def split(z):
        return ag.transpose(ag.reshape(z, (bsz, t, n_heads, dh)), (0, 2, 1, 3))

    q = split(ag.linear(h, p[f"{b}.attn.q.weight"], p[f"{b}.attn.q.bias"]))
    k = split(ag.linear(h, p[f"{b}.attn.k.weight"], p[f"{b}.attn.k.bias"]))
    v = split(ag.linear(h, p[f"{b}.attn.v.weight"], p[f"{b}.attn.v.bias"]))
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    ctx = ag.matmul(ag.softmax(scores, axis=-1), v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return ag.linear(ctx, p[f"{b}.attn.o.weight"], p[f"{b}.attn.o.bias"])


def block_forward(h: ag.Tensor, p: dict, layer: int, cfg: ModelConfig, route: str) -> ag.Tensor:
    b = f"blocks.{layer}"
    a = ag.layer_norm(h, p[f"{b}.attn_norm.gain"], p[f"{b}.attn_norm.bias"])
    h = ag.add(h, _attention(a, p, b, cfg.n_heads))
    if route == "II":
        h = adapter_apply(h, p, f"{b}.adapter_attn")
    f = ag.layer_norm(h, p[f"{b}.ffn_norm.gain"], p[f"{b}.ffn_norm.bias"])
    f = ag.gelu(ag.linear(f, p[f"{b}.ffn.fc1.weight"], p[f"{b}.ffn.fc1.bias"]))
    h = ag.add(h, ag.linear(f, p[f"{b}.ffn.fc2.weight"], p[f"{b}.ffn.fc2.bias"]))
    if route == "II":
        h = adapter_apply(h, p, f"{b}.adapter_ffn")
    return h


def normalize_route(route) -> str:
    r = {"1": "I", "2": "II", "i": "I", "ii": "II"}.get(str(route).lower(), str(route))
    if r not in ROUTES:
        raise ConfigurationError(f"unknown route {route!r}")
    return r


def encoder_forward(x: ag.Tensor, model: Model, route="I", p: dict | None = None) -> EncoderOutput:
    """Positional conv + pre-LN blocks. Route I skips every adapter branch."""
    route = normalize_route(route)
    if route == "II" and not model.has_adapters:
        raise ConfigurationError("route II requires adapters")
    cfg = model.cfg
    p = p if p is not None else model.tensors(False)
    t = x.shape[1]
    k = cfg.pos_conv_kernel
    pos = ag.conv1d(ag.transpose(x, (0, 2, 1)), p["pos_conv.weight"], p["pos_conv.bias"],
                    padding=(k // 2, k // 2), groups=cfg.pos_conv_groups)
    if pos.shape[2] != t:
        pos = ag.getitem(pos, (slice(None), slice(None), slice(0, t)))
    h = ag.add(x, ag.transpose(ag.gelu(pos), (0, 2, 1)))
    per_layer = [h]
    for layer in range(cfg.n_layers):
        h = block_forward(h, p, layer, cfg, route)
        per_layer.append(h)
    out = ag.layer_norm(h, p["encoder_norm.gain"], p["encoder_norm.bias"])
    return EncoderOutput(out, per_layer)


def forward(waves, model: Model, route="I", p: dict | None = None, rng=None, mask=None):
    """conv_encode -> (optional) apply_mask -> encoder_forward."""
    p = p if p is not None else model.tensors(False)
    x = conv_encode(waves, model, p)
    m = np.zeros(x.shape[:2], dtype=bool)
    if rng is not None or mask is not None:
        x, m = apply_mask(x, model, rng, p, mask)
    return encoder_forward(x, model, route, p), m


# -- prediction heads and loss --------------------------------------------------

def head_logits(o: ag.Tensor, p: dict, head: int, tau: float) -> ag.Tensor:
    u = ag.linear(o, p[f"head{head}.proj.weight"], p[f"head{head}.proj.bias"])
    return ag.cosine_logits(u, p[f"head{head}.emb"], tau)


def head_distribution(o_t, proj_weight, emb, tau: float, proj_bias=None) -> np.ndarray:
    """p(c | o_t) = softmax_c(cos(A o_t + b, e_c) / tau) for one frame vector."""
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    u = np.asarray(proj_weight, dtype=np.float64) @ np.asarray(o_t, dtype=np.float64)
    if proj_bias is not None:
        u = u + proj_bias
    logits = ag.cosine_logits(ag.Tensor(u[None, :]), ag.Tensor(np.asarray(emb, dtype=np.float64)), tau).data[0]
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class LossResult:
    loss: ag.Tensor
    head_losses: tuple
    n_masked: int
    empty: bool = False
    logits: tuple = ()
    targets: tuple = ()


def stack_targets(targets, n_frames: int, n_classes: int):
    """(B, n_frames) label arrays and a validity mask; short targets are padded invalid."""
    bsz = len(targets)
    z1 = np.zeros((bsz, n_frames), dtype=np.int64)
    z2 = np.zeros((bsz, n_frames), dtype=np.int64)
    valid = np.zeros((bsz, n_frames), dtype=bool)
    for i, tg in enumerate(targets):
        t = min(n_frames, len(tg.z1), len(tg.z2))
        z1[i, :t] = tg.z1[:t]
        z2[i, :t] = tg.z2[:t]
        valid[i, :t] = True
    return z1, z2, valid


def msp_loss(out: EncoderOutput, mask: np.ndarray, targets, model: Model, p: dict | None = None) -> LossResult:
    """Mean over masked frames of the summed per-head negative log-likelihoods."""
    p = p if p is not None else model.tensors(False)
    cfg = model.cfg
    bsz, t = out.O.shape[:2]
    z1, z2, valid = stack_targets(targets, t, cfg.n_classes)
    sel = np.asarray(mask, dtype=bool) & valid
    if z1[sel].size and (z1[sel].max() >= cfg.n_classes or z1[sel].min() < 0):
        raise InvalidInputError("head-1 label outside [0, C)")
    if model.heads == 2 and z2[sel].size and (z2[sel].max() > cfg.n_classes or z2[sel].min() < 0):
        raise InvalidInputError("head-2 label outside [0, C]")
    n = int(sel.sum())
    if n == 0:
        warnings.warn("no masked frames in batch; loss is 0", RuntimeWarning, stacklevel=2)
        zero = ag.Tensor(np.zeros((), dtype=out.O.dtype))
        return LossResult(zero, (0.0,) * model.heads, 0, True)
    om = ag.getitem(out.O, sel)
    logits, losses, tgts = [], [], []
    for head, z in zip(range(1, model.heads + 1), (z1, z2)):
        lg = head_logits(om, p, head, cfg.tau)
        losses.append(ag.cross_entropy(lg, z[sel]))
        logits.append(lg)
        tgts.append(z[sel])
    total = losses[0] if len(losses) == 1 else ag.add(losses[0], losses[1])
    loss = ag.mul(total, 1.0 / n)
    return LossResult(loss, tuple(float(ls.data) / n for ls in losses), n, False, tuple(logits), tuple(tgts))
