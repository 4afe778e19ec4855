"""Waveform arithmetic: energy, SNR-exact mixing, STFT/ISTFT, masks, SI-SDR."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, InvalidInputError

SAMPLE_RATE = 16000
FRAME_LEN = 320
HOP = 160


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise InvalidInputError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(s)):
            raise InvalidInputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    s = np.asarray(w, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidInputError("expected a 1-D sample sequence")
    return s


def _rate(*ws) -> int:
    rates = {w.sample_rate for w in ws if isinstance(w, Waveform)}
    if len(rates) > 1:
        raise InvalidInputError(f"sample rate mismatch: {sorted(rates)}")
    return rates.pop() if rates else SAMPLE_RATE


def avg_energy(w) -> float:
    """Mean squared amplitude over the whole clip."""
    s = _samples(w)
    if s.size == 0:
        raise InvalidInputError("empty waveform")
    return float(np.dot(s, s) / s.size)


def snr_db(signal, interferer) -> float:
    return 10.0 * np.log10(avg_energy(signal) / avg_energy(interferer))


def mix_at_snr(target, interferer, snr_db: float):
    """Scale ``interferer`` so that target/interferer energy ratio is ``snr_db``.

    Returns the mixture ``target + gain * interferer`` and the gain.
    """
    t, n = _samples(target), _samples(interferer)
    if t.size != n.size:
        raise InvalidInputError(f"length mismatch: {t.size} vs {n.size}")
    rate = _rate(target, interferer)
    e_t, e_n = avg_energy(t), avg_energy(n)
    if e_t == 0.0 or e_n == 0.0:
        raise InvalidInputError("cannot mix a zero-energy signal at a finite SNR")
    gain = float(np.sqrt(e_t / (e_n * 10.0 ** (snr_db / 10.0))))
    return Waveform(t + gain * n, rate), gain


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB.

    Returns ``inf`` when the estimate is an exact positive multiple of the
    reference and ``-inf`` when its projection onto the reference is zero.
    """
    e, r = _samples(estimate), _samples(reference)
    if e.size != r.size:
        raise InvalidInputError(f"length mismatch: {e.size} vs {r.size}")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise InvalidInputError("reference has zero energy")
    alpha = float(np.dot(e, r)) / ref_energy
    target = alpha * r
    num = float(np.dot(target, target))
    if num == 0.0:
        return float("-inf")
    err = target - e
    den = float(np.dot(err, err))
    if den == 0.0:
        return float("inf")
    return float(10.0 * np.log10(num / den))


def make_window(name: str, frame_len: int) -> np.ndarray:
    n = np.arange(frame_len)
    if name == "sqrt_hann":
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len))
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len)
    if name == "rect":
        return np.ones(frame_len)
    raise ConfigurationError(f"unknown window {name!r}")


def cola_gain(window: np.ndarray, hop: int) -> float:
    """Constant overlap-add gain of the squared window, or raise if not constant."""
    frame_len = window.size
    if hop <= 0 or frame_len % hop:
        raise ConfigurationError(f"hop {hop} must divide frame_len {frame_len}")
    sq = window * window
    total = sq.reshape(-1, hop).sum(axis=0)
    if total.min() <= 0 or (total.max() - total.min()) > 1e-10 * total.max():
        raise ConfigurationError("window/hop pair violates the overlap-add condition")
    return float(total.mean())


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT. ``frames`` is (n_frames, frame_len // 2 + 1) complex."""

    frames: np.ndarray
    frame_len: int
    hop: int
    window_name: str
    length: int
    sample_rate: int = SAMPLE_RATE
    window: np.ndarray = field(repr=False, default=None)

    @property
    def shape(self):
        return self.frames.shape


def _padding(length: int, frame_len: int, hop: int):
    left = frame_len - hop
    n_frames = -(-(length + left) // hop)  # every sample sees the full overlap
    total = (n_frames - 1) * hop + frame_len
    return left, total - left - length, n_frames


def stft(w, frame_len: int = FRAME_LEN, hop: int = HOP, window: str = "sqrt_hann") -> Spectrogram:
    s = _samples(w)
    win = make_window(window, frame_len)
    cola_gain(win, hop)
    left, right, n_frames = _padding(s.size, frame_len, hop)
    padded = np.concatenate([np.zeros(left), s, np.zeros(right)])
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = np.fft.rfft(padded[idx] * win, axis=1)
    return Spectrogram(frames, frame_len, hop, window, s.size, _rate(w), win)


def istft(spec: Spectrogram) -> Waveform:
    win = spec.window if spec.window is not None else make_window(spec.window_name, spec.frame_len)
    gain = cola_gain(win, spec.hop)
    left, right, n_frames = _padding(spec.length, spec.frame_len, spec.hop)
    if spec.frames.shape[0] != n_frames:
        raise InvalidInputError("frame count does not match the stored signal length")
    time = np.fft.irfft(spec.frames, n=spec.frame_len, axis=1) * win
    out = kernels.overlap_add(time, spec.hop, left + spec.length + right)
    return Waveform(out[left:left + spec.length] / gain, spec.sample_rate)


def with_frames(spec: Spectrogram, frames: np.ndarray) -> Spectrogram:
    if frames.shape != spec.frames.shape:
        raise InvalidInputError("frame shape mismatch")
    return Spectrogram(frames, spec.frame_len, spec.hop, spec.window_name, spec.length,
                       spec.sample_rate, spec.window)


def psm_target(mixture, source) -> np.ndarray:
    """Phase-sensitive mask |S|/|Y| cos(angle(S) - angle(Y)) clamped to [0, 1]."""
    y = mixture.frames if isinstance(mixture, Spectrogram) else np.asarray(mixture)
    s = source.frames if isinstance(source, Spectrogram) else np.asarray(source)
    if y.shape != s.shape:
        raise InvalidInputError(f"shape mismatch: {y.shape} vs {s.shape}")
    power = (y.real * y.real + y.imag * y.imag)
    cross = s.real * y.real + s.imag * y.imag
    out = np.zeros(y.shape)
    nz = power > 0
    out[nz] = cross[nz] / power[nz]
    return np.clip(out, 0.0, 1.0)


# -- file I/O ---------------------------------------------------------------

def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: only 16-bit mono PCM is supported")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def write_wav(path, w) -> None:
    s = _samples(w)
    pcm = np.clip(np.round(s * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(_rate(w))
        f.writeframes(pcm.tobytes())


def read_raw(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    return Waveform(np.fromfile(Path(path), dtype="<f4").astype(np.float64), sample_rate)


def write_raw(path, w) -> None:
    _samples(w).astype("<f4").tofile(Path(path))
