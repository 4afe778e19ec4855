"""Downstream probes on frozen backbone features.

Features are the per-layer encoder outputs (embedding output plus every
block), each normalised per frame, combined by softmax-weighted layer sum and
fed to a small windowed regressor. The regressor stands in for a BiLSTM head:
affine -> ReLU -> affine over a +-3 frame context.

Mask probes predict phase-sensitive masks at the STFT hop (two STFT frames per
model frame), apply them to the mixture magnitude, keep the mixture phase and
score the reconstruction with SI-SDR.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .corpus import MixtureKind, realize_many
from .errors import InvalidInputError
from .model import Model, encoder_forward, conv_encode, normalize_route
from .signal import istft, psm_target, si_sdr, stft, with_frames


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 2000
    lr: float = 5e-4
    batch_size: int = 8
    hidden: int = 128
    context: int = 3
    seed: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ProbeReport:
    task: str
    route: str
    checkpoint_id: str
    metric: str
    value: float
    oracle_ceiling: float | None
    n_records: int
    seed: int
    extra: dict = dataclasses.field(default_factory=dict)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("value", "oracle_ceiling"):
            v = d[k]
            if isinstance(v, float) and not np.isfinite(v):
                d[k] = "inf" if v > 0 else "-inf"
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


REPORT_SCHEMA = {
    "type": "object",
    "required": ["task", "route", "checkpoint_id", "metric", "value", "oracle_ceiling", "n_records", "seed"],
    "properties": {
        "task": {"enum": ["ss", "se", "retention"]},
        "route": {"enum": ["I", "II"]},
        "checkpoint_id": {"type": "string"},
        "metric": {"type": "string"},
        "value": {"type": ["number", "string"]},
        "oracle_ceiling": {"type": ["number", "string", "null"]},
        "n_records": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
    },
}


# -- differentiable building blocks ----------------------------------------------

def layer_softmax(logits: ag.Tensor) -> ag.Tensor:
    return ag.softmax(logits, axis=0)


def weighted_layer_sum(per_layer, logits) -> ag.Tensor:
    """sum_l softmax(logits)_l * layer_l over the leading (layer) axis."""
    layers = per_layer if isinstance(per_layer, ag.Tensor) else ag.stack(list(per_layer), axis=0) \
        if isinstance(per_layer[0], ag.Tensor) else ag.Tensor(np.asarray(per_layer))
    logits = logits if isinstance(logits, ag.Tensor) else ag.Tensor(np.asarray(logits, dtype=np.float64))
    if logits.shape[0] != layers.shape[0]:
        raise InvalidInputError(f"{logits.shape[0]} weights for {layers.shape[0]} layers")
    w = layer_softmax(logits)
    w = ag.reshape(w, (layers.shape[0],) + (1,) * (layers.ndim - 1))
    return ag.tsum(ag.mul(layers, w), axis=0)


def window_stack(x: ag.Tensor, radius: int) -> ag.Tensor:
    """(B, T, d) -> (B, T, (2r+1) d): each frame with its +-r neighbours, edges replicated."""
    bsz, t, d = x.shape
    xp = np.pad(x.data, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.concatenate([xp[:, o:o + t] for o in range(2 * radius + 1)], axis=2)

    def bw(g):
        gp = np.zeros_like(xp)
        for o in range(2 * radius + 1):
            gp[:, o:o + t] += g[:, :, o * d:(o + 1) * d]
        gx = gp[:, radius:radius + t].copy()
        gx[:, 0] += gp[:, :radius].sum(axis=1)
        gx[:, -1] += gp[:, radius + t:].sum(axis=1)
        return (gx,)

    return ag._make(out, (x,), bw)


def pit_mse(estimates, references):
    """Minimum over source permutations of the mean squared error.

    Returns ``(loss, perm)``: estimate ``i`` is matched with reference ``perm[i]``.
    """
    e = np.asarray(estimates, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if e.shape != r.shape:
        raise InvalidInputError(f"shape mismatch: {e.shape} vs {r.shape}")
    best = None
    for perm in itertools.permutations(range(e.shape[0])):
        loss = float(np.mean((e - r[list(perm)]) ** 2))
        if best is None or loss < best[0]:
            best = (loss, perm)
    return best


def pit_mse_tensor(est: ag.Tensor, ref: np.ndarray):
    """Batched two-source PIT-MSE. ``est``/``ref`` are (B, 2, ...)."""
    if est.shape != ref.shape or est.shape[1] != 2:
        raise InvalidInputError("pit_mse_tensor expects matching (B, 2, ...) arrays")
    axes = tuple(range(1, est.ndim))
    n = float(np.prod(est.shape[1:]))
    ident = ag.mul(ag.tsum(ag.mul(ag.sub(est, ref), ag.sub(est, ref)), axis=axes), 1.0 / n)
    swapped = ref[:, ::-1]
    swap = ag.mul(ag.tsum(ag.mul(ag.sub(est, swapped), ag.sub(est, swapped)), axis=axes), 1.0 / n)
    pick = (swap.data < ident.data).astype(est.dtype)
    chosen = ag.add(ag.mul(ident, 1.0 - pick), ag.mul(swap, pick))
    return ag.mean(chosen), pick.astype(bool)


# -- probe head -------------------------------------------------------------------

def init_probe(n_layers: int, d_model: int, out_dim: int, cfg: ProbeConfig, dtype=np.float32) -> dict:
    rng = np.random.default_rng(cfg.seed)
    fan_in = (2 * cfg.context + 1) * d_model
    return {
        "layer_logits": np.zeros(n_layers, dtype),
        "fc1.weight": (rng.standard_normal((cfg.hidden, fan_in)) / np.sqrt(fan_in)).astype(dtype),
        "fc1.bias": np.zeros(cfg.hidden, dtype),
        "fc2.weight": (rng.standard_normal((out_dim, cfg.hidden)) / np.sqrt(cfg.hidden)).astype(dtype),
        "fc2.bias": np.zeros(out_dim, dtype),
    }


def probe_forward(feats: np.ndarray, p: dict, context: int) -> ag.Tensor:
    """feats (n_layers, B, T, d) -> (B, T, out_dim) raw outputs."""
    x = weighted_layer_sum(ag.Tensor(feats), p["layer_logits"])
    x = window_stack(x, context)
    h = ag.relu(ag.linear(x, p["fc1.weight"], p["fc1.bias"]))
    return ag.linear(h, p["fc2.weight"], p["fc2.bias"])


def _adam(params: dict, grads: dict, state: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for k, g in grads.items():
        m = state.setdefault("m." + k, np.zeros_like(g))
        v = state.setdefault("v." + k, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= (lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)).astype(params[k].dtype)


def layer_features(model: Model, waves: np.ndarray, route="I", batch_size: int = 16) -> np.ndarray:
    """Per-layer, per-frame-normalised encoder outputs: (n_layers, N, T, d) float32."""
    route = normalize_route(route)
    chunks = []
    for lo in range(0, len(waves), batch_size):
        p = model.tensors(False)
        x = conv_encode(waves[lo:lo + batch_size], model, p)
        out = encoder_forward(x, model, route, p)
        chunks.append(np.stack([ag.normalize(h).data for h in out.per_layer]))
    return np.concatenate(chunks, axis=1).astype(np.float32)


# -- mask probes --------------------------------------------------------------------

@dataclass
class MaskTask:
    """Realized mixtures with STFTs, clean references and PSM targets."""

    ids: list
    waves: np.ndarray  # (N, L)
    specs: list  # mixture Spectrogram per record
    refs: list  # list of clean component arrays per record
    psm: np.ndarray  # (N, n_src, n_stft, F)

    @property
    def n_src(self) -> int:
        return self.psm.shape[1]


def build_mask_task(records, n_src: int, sample_rate: int = 16000, threads: int = 1) -> MaskTask:
    if not records:
        raise InvalidInputError("no records for the probe")
    realized = realize_many(records, sample_rate, threads=threads)
    ids, waves, specs, refs, psm = [], [], [], [], []
    for rec, (mix, comps) in zip(records, realized):
        if len(comps) != n_src:
            raise InvalidInputError(f"{rec.id}: expected {n_src} clean component(s)")
        y = stft(mix)
        ids.append(rec.id)
        waves.append(mix.samples)
        specs.append(y)
        refs.append([c.samples for c in comps])
        psm.append(np.stack([psm_target(y, stft(c)) for c in comps]))
    return MaskTask(ids, np.stack(waves).astype(np.float32), specs, refs, np.stack(psm).astype(np.float32))


def _stft_index(n_model_frames: int, n_stft: int) -> np.ndarray:
    # model frame t predicts STFT frames 2t+1 and 2t+2
    return np.clip(np.arange(n_stft) - 1, 0, 2 * n_model_frames - 1)


def _masks(out: ag.Tensor, n_src: int, n_bins: int, n_stft: int) -> ag.Tensor:
    bsz, t, _ = out.shape
    m = ag.sigmoid(out)
    m = ag.reshape(m, (bsz, 2 * t, n_src, n_bins))
    m = ag.getitem(m, (slice(None), _stft_index(t, n_stft)))
    return ag.transpose(m, (0, 2, 1, 3))  # (B, n_src, n_stft, F)


def reconstruct(spec, masks: np.ndarray) -> list:
    return [istft(with_frames(spec, spec.frames * m)).samples for m in masks]


def score_masks(task: MaskTask, masks: np.ndarray) -> float:
    """Mean SI-SDR over records and sources (best permutation for two sources)."""
    scores = []
    for i in range(len(task.ids)):
        est = reconstruct(task.specs[i], masks[i])
        refs = task.refs[i]
        best = None
        for perm in itertools.permutations(range(len(refs))):
            vals = [si_sdr(est[j], refs[perm[j]]) for j in range(len(refs))]
            mean = float(np.mean(vals))
            if best is None or mean > best:
                best = mean
        scores.append(best)
    return float(np.mean(scores))


def oracle_ceiling(task: MaskTask) -> float:
    return score_masks(task, task.psm.astype(np.float64))


def train_mask_probe(train_feats: np.ndarray, task: MaskTask, cfg: ProbeConfig) -> dict:
    n_layers, n, t, d = train_feats.shape
    n_src, n_stft, n_bins = task.psm.shape[1:]
    params = init_probe(n_layers, d, 2 * n_src * n_bins, cfg)
    state: dict = {}
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        p = {k: ag.Tensor(v, requires_grad=True) for k, v in params.items()}
        masks = _masks(probe_forward(train_feats[:, idx], p, cfg.context), n_src, n_bins, n_stft)
        ref = task.psm[idx]
        if n_src == 2:
            loss, _ = pit_mse_tensor(masks, ref)
        else:
            diff = ag.sub(masks, ref)
            loss = ag.mean(ag.mul(diff, diff))
        loss.backward()
        _adam(params, {k: p[k].grad for k in params}, state, cfg.lr)
    return params


def predict_masks(feats: np.ndarray, params: dict, task: MaskTask, cfg: ProbeConfig) -> np.ndarray:
    n_src, n_stft, n_bins = task.psm.shape[1:]
    p = {k: ag.Tensor(v) for k, v in params.items()}
    out = _masks(probe_forward(feats, p, cfg.context), n_src, n_bins, n_stft)
    return out.data.astype(np.float64)


def _split(records, kind):
    picked = [r for r in records if r.kind == kind]
    if not picked:
        raise InvalidInputError(f"no {kind.value} records available for this probe")
    return picked


def run_mask_probe(task_name: str, model: Model, route, train_records, test_records,
                   cfg: ProbeConfig = ProbeConfig(), checkpoint_id: str = "", sample_rate: int = 16000,
                   tasks=None) -> ProbeReport:
    kind, n_src = {"ss": (MixtureKind.OVERLAPPED, 2), "se": (MixtureKind.NOISY, 1)}[task_name]
    route = normalize_route(route)
    if tasks is None:
        train_task = build_mask_task(_split(train_records, kind), n_src, sample_rate)
        test_task = build_mask_task(_split(test_records, kind), n_src, sample_rate)
    else:
        train_task, test_task = tasks
    params = train_mask_probe(layer_features(model, train_task.waves, route), train_task, cfg)
    masks = predict_masks(layer_features(model, test_task.waves, route), params, test_task, cfg)
    value = score_masks(test_task, masks)
    weights = ag.softmax(ag.Tensor(params["layer_logits"].astype(np.float64)), axis=0).data
    return ProbeReport(task_name, route, checkpoint_id, "si_sdr_db", value, oracle_ceiling(test_task),
                       len(test_task.ids), cfg.seed, {"layer_weights": weights.tolist(),
                                                      "n_train": len(train_task.ids)})


def run_ss_probe(model: Model, route, train_records, test_records, cfg: ProbeConfig = ProbeConfig(),
                 **kw) -> ProbeReport:
    """Two-speaker separation on Overlapped records (PIT-MSE on PSMs, SI-SDR at eval)."""
    return run_mask_probe("ss", model, route, train_records, test_records, cfg, **kw)


def run_se_probe(model: Model, route, train_records, test_records, cfg: ProbeConfig = ProbeConfig(),
                 **kw) -> ProbeReport:
    """Enhancement on Noisy records (MSE on the speech PSM, SI-SDR at eval)."""
    return run_mask_probe("se", model, route, train_records, test_records, cfg, **kw)


# -- retention probe ----------------------------------------------------------------

def train_classifier(feats: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig) -> dict:
    """Softmax-weighted layer sum + linear classifier, trained with Adam on all frames."""
    n_layers, n, t, d = feats.shape
    rng = np.random.default_rng(cfg.seed)
    params = {
        "layer_logits": np.zeros(n_layers, np.float32),
        "weight": (rng.standard_normal((n_classes, d)) / np.sqrt(d)).astype(np.float32),
        "bias": np.zeros(n_classes, np.float32),
    }
    state: dict = {}
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        p = {k: ag.Tensor(v, requires_grad=True) for k, v in params.items()}
        x = weighted_layer_sum(ag.Tensor(feats[:, idx]), p["layer_logits"])
        logits = ag.linear(x, p["weight"], p["bias"])
        loss = ag.cross_entropy(logits, labels[idx], reduction="mean")
        loss.backward()
        _adam(params, {k: p[k].grad for k in params}, state, cfg.lr)
    return params


def classify(feats: np.ndarray, params: dict) -> np.ndarray:
    p = {k: ag.Tensor(v) for k, v in params.items()}
    x = weighted_layer_sum(ag.Tensor(feats), p["layer_logits"])
    return np.argmax(ag.linear(x, p["weight"], p["bias"]).data, axis=-1)


def _clean_label_arrays(records, labels: dict, t: int) -> np.ndarray:
    out = np.zeros((len(records), t), dtype=np.int64)
    for i, r in enumerate(records):
        z = np.asarray(labels[r.id])[0]
        if z.size < t:
            raise InvalidInputError(f"{r.id}: {z.size} labels for {t} frames")
        out[i] = z[:t]
    return out


def run_retention_probe(model: Model, route, train_records, test_records, labels: dict,
                        cfg: ProbeConfig = ProbeConfig(), checkpoint_id: str = "",
                        sample_rate: int = 16000) -> ProbeReport:
    """Frame-label accuracy of a linear classifier on clean (Raw) speech features."""
    route = normalize_route(route)
    tr = [r for r in train_records if r.kind == MixtureKind.RAW]
    te = [r for r in test_records if r.kind == MixtureKind.RAW]
    if not tr or not te:
        raise InvalidInputError("retention probe needs Raw records in both splits")
    wtr = np.stack([m.samples for m, _ in realize_many(tr, sample_rate)])
    wte = np.stack([m.samples for m, _ in realize_many(te, sample_rate)])
    ftr = layer_features(model, wtr, route)
    fte = layer_features(model, wte, route)
    t = ftr.shape[2]
    params = train_classifier(ftr, _clean_label_arrays(tr, labels, t), model.cfg.n_classes, cfg)
    pred = classify(fte, params)
    acc = float(np.mean(pred == _clean_label_arrays(te, labels, t)))
    return ProbeReport("retention", route, checkpoint_id, "frame_accuracy", acc, None, len(te), cfg.seed,
                       {"chance": 1.0 / model.cfg.n_classes})
