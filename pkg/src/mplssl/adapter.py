"""Bottleneck adapters and the freeze ledger.

Each Transformer block gets two adapters, one after the self-attention
residual sum and one after the feed-forward residual sum. An adapter is

    h + up(relu(down(LN(h))))

with its own layer norm. The up-projection starts at exactly zero, so a freshly
adapted model computes the same function as the original.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError, InvalidInputError

SITES = ("adapter_attn", "adapter_ffn")


@dataclass(frozen=True)
class AdapterConfig:
    hidden: int = 16
    per_layer: int = 2

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigurationError("adapter hidden size must be >= 1")
        if self.per_layer != 2:
            raise ConfigurationError("exactly two adapters per block are supported")

    def to_json(self) -> dict:
        return asdict(self)


def adapter_shapes(prefix: str, d_model: int, hidden: int) -> dict:
    return {
        f"{prefix}.norm.gain": (d_model,),
        f"{prefix}.norm.bias": (d_model,),
        f"{prefix}.down.weight": (hidden, d_model),
        f"{prefix}.down.bias": (hidden,),
        f"{prefix}.up.weight": (d_model, hidden),
        f"{prefix}.up.bias": (d_model,),
    }


def is_adapter_param(name: str) -> bool:
    return any(f".{site}." in name for site in SITES)


def adapter_apply(h: ag.Tensor, p: dict, prefix: str) -> ag.Tensor:
    """Residual bottleneck on the last axis of ``h``."""
    z = ag.layer_norm(h, p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.bias"])
    z = ag.relu(ag.linear(z, p[f"{prefix}.down.weight"], p[f"{prefix}.down.bias"]))
    return ag.add(h, ag.linear(z, p[f"{prefix}.up.weight"], p[f"{prefix}.up.bias"]))


def adapter_forward(h_in, params: dict, prefix: str | None = None) -> np.ndarray:
    """Apply one adapter to a single vector or a stack of vectors.

    ``params`` maps ``norm.gain``, ``norm.bias``, ``down.weight``, ``down.bias``,
    ``up.weight`` and ``up.bias`` (optionally under ``prefix``) to arrays.
    """
    key = (lambda k: f"{prefix}.{k}") if prefix else (lambda k: k)
    h = np.asarray(h_in)
    d = params[key("down.weight")].shape[1]
    if h.shape[-1] != d or params[key("up.weight")].shape[0] != d:
        raise InvalidInputError(f"adapter expects dimension {d}, got {h.shape[-1]}")
    tensors = {f"a.{k}": ag.Tensor(params[key(k)]) for k in
               ("norm.gain", "norm.bias", "down.weight", "down.bias", "up.weight", "up.bias")}
    return adapter_apply(ag.Tensor(h), tensors, "a").data


def init_adapter_params(shapes: dict, rng: np.random.Generator, dtype) -> dict:
    out = {}
    for name, shape in shapes.items():
        if name.endswith("norm.gain"):
            out[name] = np.ones(shape, dtype)
        elif name.endswith("down.weight"):
            out[name] = (rng.standard_normal(shape) * (0.5 / np.sqrt(shape[1]))).astype(dtype)
        else:  # up-projection and all biases start at exactly zero
            out[name] = np.zeros(shape, dtype)
    return out


def insert_adapters(model, cfg: AdapterConfig, seed: int = 0):
    """Return a copy of ``model`` with two near-identity adapters per block."""
    if model.adapter_cfg is not None:
        raise ConfigurationError("model already has adapters")
    rng = np.random.default_rng(seed)
    params = dict(model.params)
    for layer in range(model.cfg.n_layers):
        for site in SITES:
            shapes = adapter_shapes(f"blocks.{layer}.{site}", model.cfg.d_model, cfg.hidden)
            params.update(init_adapter_params(shapes, rng, model.dtype))
    ledger = dict(model.ledger)
    ledger.update({k: True for k in params if k not in ledger})
    return model.replace(params=params, adapter_cfg=cfg, ledger=ledger)


def adapter_ledger(names) -> dict:
    """Adapters, their private norms and both prediction heads train; all else is frozen."""
    return {n: is_adapter_param(n) or n.startswith("head") for n in names}


def freeze_backbone(model):
    """Return ``(model with adapter-mode ledger, ledger)``."""
    if model.adapter_cfg is None:
        raise ConfigurationError("freeze_backbone() needs a model with adapters")
    ledger = adapter_ledger(model.params)
    return model.replace(ledger=ledger), ledger
