"""Deterministic toy pre-training corpus with four-way augmentation.

Every record carries its own seed (derived from the global seed and the record
index), so records can be realized independently and in any order.
"""

from __future__ import annotations

import enum
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import InvalidInputError
from .signal import SAMPLE_RATE, Waveform, mix_at_snr, read_wav

SCHEMA_VERSION = 1
SPEECH_SNR_RANGE = (1.0, 6.0)
NOISE_SNR_RANGE = (-5.0, 15.0)


class MixtureKind(str, enum.Enum):
    RAW = "Raw"
    NOISY = "Noisy"
    OVERLAPPED = "Overlapped"
    NOISY_OVERLAPPED = "NoisyOverlapped"

    @property
    def n_speakers(self) -> int:
        return 2 if self in (MixtureKind.OVERLAPPED, MixtureKind.NOISY_OVERLAPPED) else 1

    @property
    def has_noise(self) -> bool:
        return self in (MixtureKind.NOISY, MixtureKind.NOISY_OVERLAPPED)


KINDS = (MixtureKind.RAW, MixtureKind.NOISY, MixtureKind.OVERLAPPED, MixtureKind.NOISY_OVERLAPPED)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings."""
    key = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


@dataclass(frozen=True)
class MixtureRecord:
    id: str
    kind: MixtureKind
    source_ids: tuple
    seed: int
    duration_s: float
    speech_snr_db: float | None = None
    noise_snr_db: float | None = None
    noise_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MixtureKind(self.kind))
        object.__setattr__(self, "source_ids", tuple(self.source_ids))
        self.validate()

    def validate(self):
        k = self.kind
        if len(self.source_ids) != k.n_speakers:
            raise InvalidInputError(f"{self.id}: {k.value} needs {k.n_speakers} source(s)")
        if k.n_speakers == 2:
            if self.speech_snr_db is None or not (SPEECH_SNR_RANGE[0] <= self.speech_snr_db <= SPEECH_SNR_RANGE[1]):
                raise InvalidInputError(f"{self.id}: speech_snr_db outside {SPEECH_SNR_RANGE}")
        elif self.speech_snr_db is not None:
            raise InvalidInputError(f"{self.id}: single-speaker record with speech_snr_db")
        if k.has_noise:
            if self.noise_id is None or self.noise_snr_db is None:
                raise InvalidInputError(f"{self.id}: noisy record without noise")
            if not (NOISE_SNR_RANGE[0] <= self.noise_snr_db <= NOISE_SNR_RANGE[1]):
                raise InvalidInputError(f"{self.id}: noise_snr_db outside {NOISE_SNR_RANGE}")
        elif self.noise_id is not None or self.noise_snr_db is not None:
            raise InvalidInputError(f"{self.id}: clean record carries noise fields")
        if self.duration_s <= 0:
            raise InvalidInputError(f"{self.id}: duration must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["source_ids"] = list(self.source_ids)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MixtureRecord":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidInputError(f"malformed record: {exc}") from None


@dataclass
class CorpusManifest:
    records: list
    global_seed: int
    sample_rate: int = SAMPLE_RATE
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("record ids must be unique")

    @property
    def counts(self) -> dict:
        out = {k.value: 0 for k in KINDS}
        for r in self.records:
            out[r.kind.value] += 1
        return out

    def by_kind(self, *kinds) -> list:
        wanted = {MixtureKind(k) for k in kinds}
        return [r for r in self.records if r.kind in wanted]

    def subset(self, records) -> "CorpusManifest":
        return CorpusManifest(list(records), self.global_seed, self.sample_rate)

    def header(self) -> dict:
        return {"schema_version": self.schema_version, "global_seed": self.global_seed,
                "sample_rate": self.sample_rate, "counts": self.counts, **self.extra}

    def save(self, path) -> None:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise InvalidInputError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if head.get("schema_version") != SCHEMA_VERSION:
            raise InvalidInputError(f"{path}: unsupported schema {head.get('schema_version')}")
        records = [MixtureRecord.from_json(json.loads(ln)) for ln in lines[1:]]
        extra = {k: v for k, v in head.items() if k not in ("schema_version", "global_seed", "sample_rate", "counts")}
        return cls(records, head["global_seed"], head["sample_rate"], extra=extra)


# -- synthetic sources ---------------------------------------------------------

def _ramp_envelope(gates: np.ndarray, ramp: int) -> np.ndarray:
    if ramp <= 1:
        return gates
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    return np.convolve(gates, kernel, mode="same")


def synthesize_source(seed: int, duration_s: float, kind: str = "speech",
                      sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Toy speech (voiced harmonic segments and pauses) or coloured noise.

    Output is peak-normalised to 0.5 and fully determined by ``seed``.
    """
    if duration_s <= 0:
        raise InvalidInputError("duration_s must be positive")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(seed)
    if kind == "noise":
        x = rng.standard_normal(n + 512)
        lo = rng.uniform(50.0, 1500.0)
        hi = min(lo * rng.uniform(2.0, 8.0), 0.45 * sample_rate)
        sos = sps.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        y = sps.sosfilt(sos, x)[512:]
        return Waveform(0.5 * y / np.max(np.abs(y)), sample_rate)
    if kind != "speech":
        raise InvalidInputError(f"unknown source kind {kind!r}")

    n_harm = int(rng.integers(3, 7))
    base_f0 = rng.uniform(90.0, 240.0)
    # a small per-speaker inventory of harmonic amplitude profiles ("vowels")
    vowels = rng.uniform(0.05, 1.0, size=(5, n_harm)) ** 1.5
    f0 = np.empty(n)
    amps = np.empty((n_harm, n))
    gates = np.empty(n)
    pos = 0
    voiced_any = False
    while pos < n:
        seg = int(rng.uniform(0.06, 0.25) * sample_rate)
        end = min(n, pos + seg)
        voiced = rng.random() < 0.8
        voiced_any |= voiced
        f0[pos:end] = np.clip(base_f0 * rng.uniform(0.75, 1.3), 80.0, 300.0)
        amps[:, pos:end] = vowels[rng.integers(len(vowels))][:, None]
        gates[pos:end] = 1.0 if voiced else 0.0
        pos = end
    if not voiced_any:
        gates[: n // 2] = 1.0
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    harmonics = np.arange(1, n_harm + 1)[:, None]
    y = np.sum(amps * np.sin(harmonics * phase[None, :]), axis=0)
    y *= _ramp_envelope(gates, int(0.01 * sample_rate))
    y += 1e-4 * rng.standard_normal(n)  # keeps pauses from being digitally silent
    return Waveform(0.5 * y / np.max(np.abs(y)), sample_rate)


# -- corpus construction ---------------------------------------------------------

def _make_record(index: int, global_seed: int, duration_s: float) -> MixtureRecord:
    kind = KINDS[index % 4]
    seed = derive_seed(global_seed, index)
    rng = np.random.default_rng(seed)
    rid = f"rec{index:06d}"
    speech_snr = float(rng.uniform(*SPEECH_SNR_RANGE)) if kind.n_speakers == 2 else None
    noise_snr = float(rng.uniform(*NOISE_SNR_RANGE)) if kind.has_noise else None
    return MixtureRecord(
        id=rid,
        kind=kind,
        source_ids=tuple(f"{rid}-s{j}" for j in range(kind.n_speakers)),
        seed=seed,
        duration_s=float(duration_s),
        speech_snr_db=speech_snr,
        noise_snr_db=noise_snr,
        noise_id=f"{rid}-n" if kind.has_noise else None,
    )


def build_corpus(n_records: int, global_seed: int, duration_s: float = 2.0,
                 sample_rate: int = SAMPLE_RATE, threads: int = 1) -> CorpusManifest:
    """Manifest of ``n_records`` mixtures in a 1:1:1:1 kind ratio (round-robin)."""
    if n_records < 4:
        raise InvalidInputError("n_records must be at least 4 to hold every kind")
    make = lambda i: _make_record(i, global_seed, duration_s)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(make, range(n_records)))
    else:
        records = [make(i) for i in range(n_records)]
    return CorpusManifest(records, int(global_seed), sample_rate)


def _load_source(source_id: str, seed: int, record: MixtureRecord, kind: str,
                 sample_rate: int, sources_dir) -> Waveform:
    n = int(round(record.duration_s * sample_rate))
    if sources_dir is not None:
        path = Path(sources_dir) / f"{source_id}.wav"
        if path.exists():
            w = read_wav(path)
            if w.sample_rate != sample_rate:
                raise InvalidInputError(f"{path}: sample rate {w.sample_rate} != {sample_rate}")
            s = w.samples[:n]
            if s.size < n:
                s = np.concatenate([s, np.zeros(n - s.size)])
            return Waveform(s, sample_rate)
    return synthesize_source(seed, record.duration_s, kind, sample_rate)


def source_waveforms(record: MixtureRecord, sample_rate: int = SAMPLE_RATE, sources_dir=None):
    """Unscaled speech sources (and the noise source, or None)."""
    speech = [
        _load_source(sid, derive_seed(record.seed, "speech", j), record, "speech", sample_rate, sources_dir)
        for j, sid in enumerate(record.source_ids)
    ]
    noise = None
    if record.kind.has_noise:
        noise = _load_source(record.noise_id, derive_seed(record.seed, "noise"), record, "noise",
                             sample_rate, sources_dir)
    return speech, noise


def realize(record: MixtureRecord, sample_rate: int = SAMPLE_RATE, sources_dir=None):
    """Mixture waveform plus the gain-applied clean speech components.

    Speaker 1 is the level reference; speaker 2 is scaled to ``speech_snr_db``
    below it and noise to ``noise_snr_db`` below the speech sum.
    """
    if not isinstance(record, MixtureRecord):
        raise InvalidInputError("realize() expects a MixtureRecord")
    record.validate()
    speech, noise = source_waveforms(record, sample_rate, sources_dir)
    components = [speech[0].samples]
    if len(speech) == 2:
        _, gain = mix_at_snr(speech[0], speech[1], record.speech_snr_db)
        components.append(gain * speech[1].samples)
    clean = components[0] if len(components) == 1 else components[0] + components[1]
    mixture = clean
    if noise is not None:
        mixed, _ = mix_at_snr(clean, noise, record.noise_snr_db)
        mixture = mixed.samples
    return Waveform(mixture, sample_rate), [Waveform(c, sample_rate) for c in components]


def realize_many(records, sample_rate: int = SAMPLE_RATE, sources_dir=None, threads: int = 1):
    """``realize`` over many records; output order always follows input order."""
    fn = lambda r: realize(r, sample_rate, sources_dir)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, records))
    return [fn(r) for r in records]
