"""Optimisation: warm-up/decay schedule, Adam, the pre-training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .adapter import adapter_ledger
from .checkpoint import save_checkpoint
from .corpus import MixtureKind, realize_many
from .errors import ConfigurationError, ContractViolationError, InvalidInputError
from .labeler import make_targets
from .model import Model, apply_mask, conv_encode, encoder_forward, msp_loss, stack_targets
from .signal import avg_energy

log = logging.getLogger(__name__)

MODES = ("full", "adapter", "finetune-unfrozen")
TRACE_FIELDS = ("step", "lr", "loss", "head1_loss", "head2_loss", "masked_frame_count")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 500
    peak_lr: float = 3e-4
    warmup_fraction: float = 0.08
    batch_size: int = 8
    seed: int = 0
    mode: str = "full"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float | None = None
    checkpoint_every: int | None = None
    kinds: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigurationError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be positive")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigurationError("total_steps and batch_size must be positive")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.kinds is not None:
            object.__setattr__(self, "kinds", tuple(MixtureKind(k).value for k in self.kinds))

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or max(1, self.total_steps // 10)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["kinds"] = list(self.kinds) if self.kinds else None
        return d


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warm-up steps, then linear decay to 0."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise InvalidInputError(f"step {step} outside [0, {total}]")
    warm = int(round(cfg.warmup_fraction * total))
    if warm > 0 and step <= warm:
        return cfg.peak_lr * step / warm
    if total == warm:
        return cfg.peak_lr
    return cfg.peak_lr * (total - step) / (total - warm)


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng_state: dict | None = None
    last_loss: float | None = None
    best_loss: float | None = None

    @classmethod
    def for_model(cls, model: Model, seed: int) -> "TrainState":
        names = model.trainable_names()
        return cls(0, {n: np.zeros_like(model.params[n]) for n in names},
                   {n: np.zeros_like(model.params[n]) for n in names},
                   {"scheme": "seed-sequence(seed, step)", "seed": int(seed)})


def adam_step(params: dict, grads: dict, state: TrainState, lr: float, ledger: dict,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam on the trainable tensors, in place.

    ``grads`` must hold exactly the trainable tensors; a gradient for a frozen
    tensor is a contract violation.
    """
    trainable = {n for n, t in ledger.items() if t}
    frozen_hit = [n for n in grads if not ledger.get(n, False)]
    if frozen_hit:
        raise ContractViolationError(f"gradient supplied for frozen tensor(s): {sorted(frozen_hit)[:3]}")
    missing = trainable - set(grads)
    if missing:
        raise ContractViolationError(f"no gradient for trainable tensor(s): {sorted(missing)[:3]}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(trainable):
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] -= (lr * update).astype(params[name].dtype)
    state.step = t
    return state


# -- data -------------------------------------------------------------------------

@dataclass
class PretrainData:
    ids: list
    kinds: list
    waves: np.ndarray  # (N, L) float32
    targets: list

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PretrainData":
        idx = list(idx)
        return PretrainData([self.ids[i] for i in idx], [self.kinds[i] for i in idx],
                            self.waves[idx], [self.targets[i] for i in idx])


def build_dataset(manifest, labels: dict, n_classes: int, kinds=None, threads: int = 1) -> PretrainData:
    """Realize every record once and attach its dual-head targets."""
    wanted = {MixtureKind(k) for k in kinds} if kinds else None
    records = [r for r in manifest.records if wanted is None or r.kind in wanted]
    if not records:
        raise InvalidInputError("no records selected for training")
    missing = [r.id for r in records if r.id not in labels]
    if missing:
        raise ConfigurationError(f"no labels for records {missing[:3]}")
    realized = realize_many(records, manifest.sample_rate, threads=threads)
    waves, targets = [], []
    for rec, (mix, comps) in zip(records, realized):
        z = np.asarray(labels[rec.id])
        if z.size and z.max() >= n_classes:
            raise ConfigurationError(f"labels of {rec.id} exceed codebook size {n_classes}")
        targets.append(make_targets(rec, list(z), [avg_energy(c) for c in comps], n_classes))
        waves.append(mix.samples.astype(np.float32))
    return PretrainData([r.id for r in records], [r.kind.value for r in records], np.stack(waves), targets)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


# -- training loop ----------------------------------------------------------------

def prepare_model(model: Model, mode: str) -> Model:
    """Apply the freeze ledger that ``mode`` calls for."""
    if mode == "adapter":
        if not model.has_adapters:
            raise ConfigurationError("adapter mode needs a model with adapters")
        return model.replace(ledger=adapter_ledger(model.params))
    return model.replace(ledger={n: True for n in model.params})


def route_for(model: Model) -> str:
    return "II" if model.has_adapters else "I"


def compute_grads(model: Model, waves: np.ndarray, targets: list, rng: np.random.Generator,
                  route: str | None = None):
    """One forward/backward pass. Returns ``(LossResult, grads)``."""
    p = model.tensors(True)
    x = conv_encode(waves, model, p)
    x, mask = apply_mask(x, model, rng, p)
    out = encoder_forward(x, model, route or route_for(model), p)
    res = msp_loss(out, mask, targets, model, p)
    if res.loss.requires_grad:
        res.loss.backward()
    grads = {}
    for name, t in p.items():
        if model.ledger[name]:
            grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        elif t.grad is not None:
            raise ContractViolationError(f"frozen tensor {name} received a gradient")
    return res, grads


def clip_grads(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    trace: list
    checkpoints: list


def pretrain(data: PretrainData, model: Model, cfg: TrainConfig, out_dir=None,
             state: TrainState | None = None, stop_at: int | None = None,
             on_step=None) -> TrainResult:
    """Masked multi-label prediction training.

    Batches and masks for step ``k`` come from ``SeedSequence([seed, k])``, so
    resuming from a checkpoint at step ``k`` replays the uninterrupted run
    exactly. ``stop_at`` ends the run early (for resume tests).
    """
    if model.heads == 2 and any(np.any(t.z2 > model.cfg.n_classes) for t in data.targets):
        raise ConfigurationError("head-2 targets exceed the model's class count")
    if state is None:
        model = prepare_model(model.copy(), cfg.mode)
        state = TrainState.for_model(model, cfg.seed)
    else:
        model = model.copy()
    route = route_for(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace, ckpts = [], []
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    while state.step < end:
        step = state.step + 1
        rng = step_rng(cfg.seed, step)
        idx = sample_batch(len(data), cfg.batch_size, rng)
        res, grads = compute_grads(model, data.waves[idx], [data.targets[i] for i in idx], rng, route)
        if cfg.grad_clip:
            clip_grads(grads, cfg.grad_clip)
        lr = lr_at_step(step, cfg)
        adam_step(model.params, grads, state, lr, model.ledger, cfg.beta1, cfg.beta2, cfg.eps)
        loss = float(res.loss.data)
        state.last_loss = loss
        if not res.empty:
            state.best_loss = loss if state.best_loss is None else min(state.best_loss, loss)
        row = {"step": step, "lr": lr, "loss": loss,
               "head1_loss": res.head_losses[0],
               "head2_loss": res.head_losses[1] if len(res.head_losses) > 1 else float("nan"),
               "masked_frame_count": res.n_masked}
        trace.append(row)
        if on_step is not None:
            on_step(row)
        if step % 50 == 0:
            log.info("step %d lr %.2e loss %.4f", step, lr, loss)
        if out is not None and (step % cfg.checkpoint_interval == 0 or step == cfg.total_steps):
            path = out / f"step{step:07d}.ckpt"
            save_checkpoint(path, model, state, {"train_config": cfg.to_json()})
            ckpts.append(path)
    if out is not None:
        write_trace(out / "loss.csv", trace, append=state.step > len(trace))
    return TrainResult(model, state, trace, ckpts)


def write_trace(path, rows, append: bool = False) -> None:
    path = Path(path)
    exists = append and path.exists()
    with path.open("a" if exists else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        if not exists:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- evaluation -------------------------------------------------------------------

def evaluate_msp(model: Model, data: PretrainData, seed: int = 12345, batch_size: int = 16) -> dict:
    """Masked-frame top-1 accuracies on held-out data (no parameter updates)."""
    route = route_for(model)
    hits = [0, 0]
    total = 0
    absent_hits = absent_total = 0
    overlap_hits = overlap_total = 0
    loss_sum = 0.0
    single = np.array([k in (MixtureKind.RAW.value, MixtureKind.NOISY.value) for k in data.kinds])
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(len(data), lo + batch_size))
        rng = step_rng(seed, lo)
        p = model.tensors(False)
        x = conv_encode(data.waves[idx], model, p)
        x, mask = apply_mask(x, model, rng, p)
        out = encoder_forward(x, model, route, p)
        res = msp_loss(out, mask, [data.targets[i] for i in idx], model, p)
        if res.empty:
            continue
        loss_sum += float(res.loss.data) * res.n_masked
        total += res.n_masked
        _, _, valid = stack_targets([data.targets[i] for i in idx], out.O.shape[1], model.cfg.n_classes)
        rows = np.nonzero(mask & valid)[0]
        for h in range(model.heads):
            pred = np.argmax(res.logits[h].data, axis=1)
            hits[h] += int(np.sum(pred == res.targets[h]))
            if h == 1:
                is_single = single[idx][rows]
                absent_hits += int(np.sum(pred[is_single] == model.cfg.n_classes))
                absent_total += int(is_single.sum())
                overlap_hits += int(np.sum(pred[~is_single] == res.targets[h][~is_single]))
                overlap_total += int((~is_single).sum())
    result = {
        "masked_frames": total,
        "loss": loss_sum / max(1, total),
        "head1_acc": hits[0] / max(1, total),
        "head1_chance": 1.0 / model.cfg.n_classes,
    }
    if model.heads == 2:
        result.update({
            "head2_acc": hits[1] / max(1, total),
            "head2_chance": 1.0 / (model.cfg.n_classes + 1),
            "head2_absent_acc": absent_hits / max(1, absent_total),
            "head2_overlap_acc": overlap_hits / max(1, overlap_total),
        })
    return result


from .gradcheck import grad_check  # noqa: E402,F401  (re-exported for the training API)
