import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mplssl.errors import ConfigurationError, InvalidInputError
from mplssl.signal import (
    FRAME_LEN, HOP, Waveform, avg_energy, istft, make_window, mix_at_snr, psm_target,
    read_raw, read_wav, si_sdr, snr_db, stft, with_frames, write_raw, write_wav,
)


# -- avg_energy ----------------------------------------------------------------------

def test_avg_energy_zero_signal():
    assert avg_energy(np.zeros(10)) == 0.0


def test_avg_energy_constant_one():
    assert avg_energy(np.ones(7)) == 1.0


def test_avg_energy_alternating():
    assert avg_energy(Waveform([1.0, -1.0, 1.0, -1.0])) == 1.0


def test_avg_energy_rejects_empty():
    with pytest.raises(InvalidInputError):
        avg_energy(np.array([]))


def test_waveform_invariants():
    with pytest.raises(InvalidInputError):
        Waveform([])
    with pytest.raises(InvalidInputError):
        Waveform([0.0, np.nan])
    with pytest.raises(InvalidInputError):
        Waveform([0.0], sample_rate=0)


# -- mix_at_snr -----------------------------------------------------------------------

def _equal_energy_pair(rng, n=1000):
    a = rng.standard_normal(n)
    b = rng.standard_normal(n)
    return a, b * math.sqrt(avg_energy(a) / avg_energy(b))


def test_mix_equal_energy_zero_db_gain_one(rng):
    a, b = _equal_energy_pair(rng)
    _, gain = mix_at_snr(a, b, 0.0)
    assert gain == pytest.approx(1.0, abs=1e-12)


def test_mix_equal_energy_ten_db(rng):
    a, b = _equal_energy_pair(rng)
    _, gain = mix_at_snr(a, b, 10.0)
    assert gain == pytest.approx(0.316227766016838, abs=1e-12)


def test_mix_four_times_energy(rng):
    b = rng.standard_normal(500)
    a = 2.0 * b[::-1].copy()
    _, gain = mix_at_snr(a, b, 10 * math.log10(4))
    assert gain == pytest.approx(1.0, abs=1e-12)


def test_mix_is_target_plus_scaled_interferer(rng):
    a, b = rng.standard_normal(64), rng.standard_normal(64)
    mix, gain = mix_at_snr(Waveform(a), Waveform(b), 3.0)
    np.testing.assert_array_equal(mix.samples, a + gain * b)
    assert gain > 0


@settings(max_examples=60, deadline=None)
@given(ratio=st.floats(1e-3, 1e3), snr=st.floats(-30, 30), seed=st.integers(0, 2**16))
def test_mix_recovers_snr(ratio, snr, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal(256) * math.sqrt(ratio)
    b = r.standard_normal(256)
    _, gain = mix_at_snr(a, b, snr)
    assert abs(snr_db(a, gain * b) - snr) < 1e-9


def test_mix_errors(rng):
    with pytest.raises(InvalidInputError):
        mix_at_snr(np.zeros(10), rng.standard_normal(10), 0.0)
    with pytest.raises(InvalidInputError):
        mix_at_snr(rng.standard_normal(10), rng.standard_normal(11), 0.0)
    with pytest.raises(InvalidInputError):
        mix_at_snr(Waveform(np.ones(4), 8000), Waveform(np.ones(4), 16000), 0.0)


# -- si_sdr -----------------------------------------------------------------------

def test_si_sdr_scaled_reference_is_inf(rng):
    r = rng.standard_normal(100)
    assert si_sdr(2 * r, r) == math.inf


def test_si_sdr_orthogonal_is_minus_inf():
    r = np.array([1.0, 0.0, 1.0, 0.0])
    e = np.array([0.0, 1.0, 0.0, -1.0])
    assert si_sdr(e, r) == -math.inf


def test_si_sdr_ten_db_oracle(rng):
    r = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n -= r * (n @ r) / (r @ r)  # orthogonal to r
    n *= math.sqrt((r @ r) / 10 / (n @ n))
    assert si_sdr(r + n, r) == pytest.approx(10.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
def test_si_sdr_scale_invariance(alpha, seed):
    r = np.random.default_rng(seed)
    ref = r.standard_normal(200)
    est = ref + 0.3 * r.standard_normal(200)
    assert abs(si_sdr(alpha * est, ref) - si_sdr(est, ref)) < 1e-9


def test_si_sdr_errors(rng):
    with pytest.raises(InvalidInputError):
        si_sdr(rng.standard_normal(4), np.zeros(4))
    with pytest.raises(InvalidInputError):
        si_sdr(rng.standard_normal(4), rng.standard_normal(5))


# -- STFT / ISTFT -------------------------------------------------------------------

def test_stft_shape():
    spec = stft(np.zeros(16000))
    assert spec.frames.shape[1] == FRAME_LEN // 2 + 1
    assert spec.hop == HOP


def test_stft_zero_signal():
    assert not np.any(stft(np.zeros(3200)).frames)


@pytest.mark.parametrize("seed", range(100))
def test_roundtrip_white_noise(seed):
    x = np.random.default_rng(seed).standard_normal(4000 + 37 * seed)
    y = istft(stft(x)).samples
    assert np.max(np.abs(y - x)) < 1e-6 * np.max(np.abs(x))


@pytest.mark.parametrize("frame_len,hop", [(320, 160), (400, 100), (512, 128), (256, 64)])
def test_roundtrip_other_cola_pairs(rng, frame_len, hop):
    x = rng.standard_normal(3000)
    y = istft(stft(x, frame_len, hop)).samples
    assert np.max(np.abs(y - x)) < 1e-6 * np.max(np.abs(x))


@pytest.mark.parametrize("frame_len,hop", [(400, 160), (320, 0), (320, 150)])
def test_non_cola_configuration_rejected(frame_len, hop):
    with pytest.raises(ConfigurationError):
        stft(np.ones(2000), frame_len, hop)


def test_unknown_window_rejected():
    with pytest.raises(ConfigurationError):
        make_window("kaiser", 320)


def test_bin_centered_sine_energy_concentrated():
    k = 20
    n = np.arange(16000)
    x = np.sin(2 * np.pi * k * n / FRAME_LEN)
    spec = stft(x)
    # interior frames only: the padded edges are not full frames of the sine
    mags = np.abs(spec.frames[3:-3]) ** 2
    main_lobe = mags[:, k - 1:k + 2].sum(axis=1)
    assert np.all(main_lobe / mags.sum(axis=1) > 0.99)
    assert np.all(np.argmax(mags, axis=1) == k)


def test_bin_centered_sine_matches_direct_dft():
    k = 12
    n = np.arange(FRAME_LEN)
    w = make_window("sqrt_hann", FRAME_LEN)
    frame = np.sin(2 * np.pi * k * n / FRAME_LEN) * w
    direct = np.array([np.sum(frame * np.exp(-2j * np.pi * b * n / FRAME_LEN)) for b in range(FRAME_LEN // 2 + 1)])
    x = np.sin(2 * np.pi * k * np.arange(3200) / FRAME_LEN)
    spec = stft(x)
    # frame j starts at j*hop - (frame_len - hop); pick one aligned to a whole period
    j = (FRAME_LEN - HOP) // HOP + 2
    np.testing.assert_allclose(spec.frames[j], direct, atol=1e-9)


def test_with_frames_shape_check():
    spec = stft(np.ones(1000))
    with pytest.raises(InvalidInputError):
        with_frames(spec, spec.frames[:-1])


# -- PSM ----------------------------------------------------------------------------

def test_psm_identity(rng):
    y = stft(rng.standard_normal(2000))
    np.testing.assert_array_equal(psm_target(y, y)[np.abs(y.frames) > 0], 1.0)


def test_psm_zero_source(rng):
    y = stft(rng.standard_normal(2000))
    assert not np.any(psm_target(y, np.zeros_like(y.frames)))


def test_psm_opposite_phase_is_zero():
    y = np.array([[1 + 1j, 2 - 0.5j]])
    assert not np.any(psm_target(y, -0.5 * y))


def test_psm_oracle_per_bin():
    y = np.array([[1 + 0j, 1j, 2 + 2j, 0j]])
    s = np.array([[0.5 + 0.5j, 1j * 3, 1 + 0j, 1 + 0j]])
    expected = [0.5, 1.0, 0.25, 0.0]  # Re(S conj Y)/|Y|^2, clamped; 0 where |Y| = 0
    np.testing.assert_allclose(psm_target(y, s)[0], expected)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_psm_range(seed):
    r = np.random.default_rng(seed)
    s1, s2 = r.standard_normal(800), r.standard_normal(800)
    y = stft(s1 + s2)
    m = psm_target(y, stft(s1))
    assert m.min() >= 0.0 and m.max() <= 1.0


def test_psm_shape_mismatch():
    with pytest.raises(InvalidInputError):
        psm_target(np.ones((2, 3)), np.ones((2, 4)))


# -- file I/O --------------------------------------------------------------------

def test_wav_roundtrip(tmp_path, rng):
    x = np.clip(rng.standard_normal(500) * 0.2, -0.99, 0.99)
    write_wav(tmp_path / "a.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768 + 1e-12


def test_raw_roundtrip_is_float32_exact(tmp_path, rng):
    x = rng.standard_normal(300).astype(np.float32).astype(np.float64)
    write_raw(tmp_path / "a.f32", x)
    np.testing.assert_array_equal(read_raw(tmp_path / "a.f32").samples, x)
