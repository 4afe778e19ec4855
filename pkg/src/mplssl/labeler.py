"""Frame-level pseudo labels: MFCC features, k-means codebook, dual-head targets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from . import kernels
from .corpus import MixtureKind, MixtureRecord, realize
from .errors import InvalidInputError
from .signal import SAMPLE_RATE, _samples, avg_energy

WIN = 400  # 25 ms
HOP = 320  # 20 ms, the model's frame rate
N_FFT = 512
N_MELS = 40
N_CEPS = 13
LOG_FLOOR = 1e-10

_CODEBOOK_MAGIC = b"MPCB"
_LABELS_MAGIC = b"MPLB"
_FORMAT_VERSION = 1


def n_frames(n_samples: int, win: int = WIN, hop: int = HOP) -> int:
    return (n_samples - win) // hop + 1


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    fmax = fmax or sample_rate / 2
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz = _mel_to_hz(mels)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = hz[m], hz[m + 1], hz[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB = mel_filterbank()
_HAMMING = np.hamming(WIN)


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along time with edge replication."""
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    t = feat.shape[0]
    num = sum(k * (padded[width + k:width + k + t] - padded[width - k:width - k + t])
              for k in range(1, width + 1))
    return num / (2.0 * sum(k * k for k in range(1, width + 1)))


def extract_features(w) -> np.ndarray:
    """39-dim MFCC (+delta, +delta-delta) at a 20 ms hop; shape (T, 39)."""
    s = _samples(w)
    if s.size < WIN:
        raise InvalidInputError(f"need at least {WIN} samples, got {s.size}")
    t = n_frames(s.size)
    emph = np.concatenate([s[:1], s[1:] - 0.97 * s[:-1]])
    idx = np.arange(WIN)[None, :] + HOP * np.arange(t)[:, None]
    spec = np.fft.rfft(emph[idx] * _HAMMING, n=N_FFT, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    logmel = np.log(np.maximum(power @ _FB.T, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    d1 = deltas(ceps)
    return np.hstack([ceps, d1, deltas(d1)])


@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise InvalidInputError("codebook needs at least two centers")
        object.__setattr__(self, "centers", c)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def save(self, path) -> None:
        head = _CODEBOOK_MAGIC + struct.pack("<III", _FORMAT_VERSION, *self.centers.shape)
        Path(path).write_bytes(head + self.centers.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        raw = Path(path).read_bytes()
        if raw[:4] != _CODEBOOK_MAGIC:
            raise InvalidInputError(f"{path}: not a codebook file")
        version, c, d = struct.unpack("<III", raw[4:16])
        if version != _FORMAT_VERSION:
            raise InvalidInputError(f"{path}: unsupported codebook version {version}")
        centers = np.frombuffer(raw[16:], dtype="<f8")
        if centers.size != c * d:
            raise InvalidInputError(f"{path}: truncated codebook")
        return cls(centers.reshape(c, d).astype(np.float64))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise InvalidInputError("fewer distinct vectors than clusters")
        i = int(rng.choice(n, p=d2 / total))
        chosen.append(i)
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return x[chosen].copy()


def kmeans_fit(features, n_classes: int, max_iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` rounds or once assignments no longer change.
    An empty cluster is re-seeded with the point farthest from its center.
    """
    x = np.ascontiguousarray(np.vstack(features) if isinstance(features, (list, tuple)) else features,
                             dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_classes:
        raise InvalidInputError(f"need at least {n_classes} vectors, got {x.shape[0] if x.ndim == 2 else 0}")
    if n_classes < 2:
        raise InvalidInputError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, n_classes, rng)
    labels = None
    for _ in range(max_iters):
        new_labels, dist = kernels.nearest_center(x, centers)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=n_classes)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        dist = dist.copy()
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            sums[j] = x[far]
            counts[j] = 1
            dist[far] = -1.0
        centers = sums / counts[:, None]
    return Codebook(centers)


def assign_labels(features, codebook: Codebook) -> np.ndarray:
    """Nearest center (squared Euclidean) per frame, lowest id on ties."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise InvalidInputError(f"feature dim {x.shape[1]} != codebook dim {codebook.dim}")
    return kernels.nearest_center(x, codebook.centers)[0]


@dataclass(frozen=True)
class MultiLabelTarget:
    z1: np.ndarray
    z2: np.ndarray
    n_classes: int

    @property
    def absent(self) -> int:
        return self.n_classes

    def truncate(self, t: int) -> "MultiLabelTarget":
        return MultiLabelTarget(self.z1[:t], self.z2[:t], self.n_classes)


def make_targets(record: MixtureRecord, component_labels, component_energies, n_classes: int,
                 order=None) -> MultiLabelTarget:
    """Head-1/head-2 targets for one record.

    Single-speaker kinds get ``(labels, ABSENT...)``. Two-speaker kinds put the
    louder component on head 1; equal energies go to the lower manifest index.
    ``order`` gives the manifest index of each passed component (default: as
    passed).
    """
    labels = [np.asarray(z, dtype=np.int64) for z in component_labels]
    energies = [float(e) for e in component_energies]
    order = list(range(len(labels))) if order is None else [int(i) for i in order]
    expected = MixtureKind(record.kind).n_speakers
    if not (len(labels) == len(energies) == len(order) == expected):
        raise InvalidInputError(f"{record.id}: expected {expected} component(s)")
    for z in labels:
        if z.size and (z.min() < 0 or z.max() >= n_classes):
            raise InvalidInputError("component label outside [0, C)")
    t = min(z.size for z in labels)
    if expected == 1:
        return MultiLabelTarget(labels[0][:t], np.full(t, n_classes, dtype=np.int64), n_classes)
    rank = sorted(range(2), key=lambda i: (-energies[i], order[i]))
    return MultiLabelTarget(labels[rank[0]][:t], labels[rank[1]][:t], n_classes)


# -- corpus-level helpers ---------------------------------------------------------

def component_features(record: MixtureRecord, sample_rate: int = SAMPLE_RATE):
    _, comps = realize(record, sample_rate)
    return [extract_features(c) for c in comps], [avg_energy(c) for c in comps]


def cluster_corpus(manifest, n_classes: int, max_iters: int = 50, seed: int = 0,
                   max_fit_frames: int = 40000):
    """Fit a codebook on the clean components of ``manifest`` and label them all.

    Returns ``(codebook, {record_id: (n_components, T) uint16 array})``.
    """
    feats = {}
    for rec in manifest.records:
        feats[rec.id] = component_features(rec, manifest.sample_rate)[0]
    stacked = np.vstack([f for fs in feats.values() for f in fs])
    if stacked.shape[0] < n_classes:
        raise InvalidInputError(f"only {stacked.shape[0]} frames for {n_classes} clusters")
    rng = np.random.default_rng(seed)
    fit = stacked
    if stacked.shape[0] > max_fit_frames:
        fit = stacked[np.sort(rng.choice(stacked.shape[0], max_fit_frames, replace=False))]
    cb = kmeans_fit(fit, n_classes, max_iters, seed)
    labels = {rid: np.stack([assign_labels(f, cb) for f in fs]).astype(np.uint16)
              for rid, fs in feats.items()}
    return cb, labels


def save_labels(path, labels: np.ndarray) -> None:
    z = np.atleast_2d(np.asarray(labels))
    if z.size and z.max() > 0xFFFF:
        raise InvalidInputError("class id does not fit in 16 bits")
    head = _LABELS_MAGIC + struct.pack("<III", _FORMAT_VERSION, *z.shape)
    Path(path).write_bytes(head + z.astype("<u2").tobytes())


def load_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _LABELS_MAGIC:
        raise InvalidInputError(f"{path}: not a label file")
    version, n, t = struct.unpack("<III", raw[4:16])
    if version != _FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported label version {version}")
    return np.frombuffer(raw[16:], dtype="<u2").reshape(n, t).astype(np.int64)


def save_label_store(directory, labels: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for rid, z in labels.items():
        save_labels(d / f"{rid}.lab", z)


def load_label_store(directory, record_ids) -> dict:
    d = Path(directory)
    return {rid: load_labels(d / f"{rid}.lab") for rid in record_ids}


def record_targets(record: MixtureRecord, labels: np.ndarray, energies, n_classes: int) -> MultiLabelTarget:
    return make_targets(record, list(labels), energies, n_classes)
