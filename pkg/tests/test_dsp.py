import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apnea_screen.dsp import (
    CacheFormatError, Spectrogram, SpectrogramConfig, SpectrogramError, column_std, hann_window,
    hz_to_mel, log_mel_power, mel_centers_hz, mel_filterbank, read_cache, stft_power,
    to_mel_spectrogram, write_cache,
)
from apnea_screen.synth import SynthConfig, generate_record

CFG = SpectrogramConfig()


def test_hann_window():
    np.testing.assert_array_equal(hann_window(1), [1.0])
    np.testing.assert_allclose(hann_window(4), [0, 0.75, 0.75, 0], atol=1e-15)
    w = hann_window(257)
    np.testing.assert_allclose(w, w[::-1], atol=0)
    assert w[128] == 1.0


def test_hz_to_mel():
    assert hz_to_mel(0) == 0
    assert hz_to_mel(700) == pytest.approx(2595 * math.log10(2))
    assert hz_to_mel(700) == pytest.approx(781.17, abs=0.01)
    assert hz_to_mel(62.5) == pytest.approx(96.38, abs=0.01)


def test_config_invariants():
    with pytest.raises(SpectrogramError):
        SpectrogramConfig(win_length=1024)
    with pytest.raises(SpectrogramError):
        SpectrogramConfig(hop_length=0)
    with pytest.raises(SpectrogramError):
        SpectrogramConfig(f_max_hz=70)


def test_stft_zero_and_frame_count():
    p = stft_power(np.zeros(3750), CFG)
    assert p.shape == (257, 130)
    assert not p.any()
    assert CFG.n_frames(3750) == 1 + 3750 // 29 == 130


def _direct_dft_power(frame_window, k):
    n = np.arange(len(frame_window))
    re = np.sum(frame_window * np.cos(2 * np.pi * k * n / len(frame_window)))
    im = -np.sum(frame_window * np.sin(2 * np.pi * k * n / len(frame_window)))
    return re * re + im * im


def test_stft_constant_matches_direct_dft():
    c = 0.3
    p = stft_power(np.full(3750, c), CFG)
    window = np.zeros(CFG.n_fft)
    window[128:384] = [0.5 - 0.5 * math.cos(2 * math.pi * i / 255) for i in range(256)]
    expected = np.array([_direct_dft_power(c * window, k) for k in range(257)])
    for t in (10, 64, 120):
        np.testing.assert_allclose(p[:, t], expected, rtol=1e-9, atol=1e-9 * expected[0])
    # zero-padding to 2x the window puts the Hann main lobe over bins 0-3
    col = p[:, 64]
    assert col.argmax() == 0
    assert np.all(col[4:] < 1e-3 * col[0])
    assert col[:4].sum() > 0.999 * col.sum()


def test_filterbank_default():
    fb = mel_filterbank(CFG)
    assert fb.shape == (128, 257)
    assert (fb >= 0).all()
    assert ((fb > 0).sum(axis=1) >= 1).all()
    centers = mel_centers_hz(CFG)[1:-1]
    assert np.all(np.diff(centers) > 0)
    spacing = np.diff(hz_to_mel(mel_centers_hz(CFG)))
    assert spacing[0] == pytest.approx(96.383 / 129, rel=1e-3)


def test_filterbank_single():
    fb = mel_filterbank(SpectrogramConfig(n_mels=1))
    assert fb.shape == (1, 257)
    assert fb.sum() > 0
    peak_hz = fb[0].argmax() * 125 / 512
    assert peak_hz == pytest.approx(float(mel_centers_hz(SpectrogramConfig(n_mels=1))[1]), abs=0.25)


def test_filterbank_empty_rows_fail_loudly():
    with pytest.raises(SpectrogramError, match="raise n_fft"):
        mel_filterbank(SpectrogramConfig(n_fft=64, win_length=64))


def test_zero_chunk_maps_to_zero():
    s = to_mel_spectrogram(np.zeros(3750))
    assert s.values.shape == (128, 128)
    assert not s.values.any()


def test_constant_chunk_maps_to_zero():
    # log floor is constant only for silence; a DC offset is non-constant across mel bins
    s = to_mel_spectrogram(np.full(3750, 0.2))
    assert s.values.min() == 0 and s.values.max() == 1


def test_range_and_shape_random():
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = to_mel_spectrogram(rng.standard_normal(3750) * rng.uniform(0.01, 1)).values
        assert v.shape == (128, 128) and v.dtype == np.float32
        assert v.min() == 0.0 and v.max() == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 1.0))
def test_range_contract_property(seed, scale):
    x = np.random.default_rng(seed).standard_normal(3750) * scale
    v = to_mel_spectrogram(x).values
    assert v.shape == (128, 128)
    assert 0.0 <= v.min() and v.max() <= 1.0


@pytest.mark.parametrize("alpha", [2.0, 10.0])
def test_scale_invariance(alpha):
    x, _ = generate_record(SynthConfig(duration_s=30, apnea_event_rate_per_min=0, seed=4))
    a = to_mel_spectrogram(x.samples).values
    b = to_mel_spectrogram(alpha * x.samples).values
    assert np.abs(a - b).max() < 1e-4


def test_zeroed_region_never_raises_energy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(3750)
    lo, hi = 1000, 2500
    z = x.copy()
    z[lo:hi] = 0
    a, b = log_mel_power(x, CFG), log_mel_power(z, CFG)
    half = CFG.win_length // 2
    inside = [t for t in range(a.shape[1]) if t * CFG.hop_length - half >= lo and t * CFG.hop_length + half <= hi]
    assert len(inside) > 30
    assert np.all(b[:, inside] <= a[:, inside])


def test_apnea_chunk_flatter_than_breathing():
    breathing, _ = generate_record(SynthConfig(duration_s=30, apnea_event_rate_per_min=0, seed=5))
    apnea, events = generate_record(SynthConfig(duration_s=30, apnea_event_rate_per_min=2,
                                                apnea_duration_s=(30, 30), seed=5))
    assert len(events) == 1 and events[0].duration_s == 30
    flat = column_std(to_mel_spectrogram(apnea.samples).values)
    busy = column_std(to_mel_spectrogram(breathing.samples).values)
    assert flat < busy


# -- cache -------------------------------------------------------------------


def _items(n=3, mels=128, frames=128):
    rng = np.random.default_rng(2)
    return [Spectrogram(rng.random((mels, frames), dtype=np.float32), f"rec{i:02d}", i * 7, i % 2)
            for i in range(n)]


def test_cache_round_trip_bit_exact(tmp_path):
    items = _items()
    path = tmp_path / "c.apne"
    write_cache(path, items)
    back = read_cache(path)
    assert back.record_ids == ["rec00", "rec01", "rec02"]
    assert back.indices.tolist() == [0, 7, 14]
    assert back.y.tolist() == [0, 1, 0]
    for a, b in zip(items, back.x):
        assert a.values.tobytes() == b.tobytes()


def test_cache_layout(tmp_path):
    item = Spectrogram(np.arange(6, dtype=np.float32).reshape(2, 3), "ab", 5, 1)
    path = tmp_path / "c.apne"
    write_cache(path, [item], n_mels=2, n_frames=3)
    raw = path.read_bytes()
    expected = (b"APNE" + struct.pack("<IIII", 1, 2, 3, 1) + struct.pack("<I", 2) + b"ab"
                + struct.pack("<IB", 5, 1) + np.arange(6, dtype="<f4").tobytes())
    assert raw == expected


def test_cache_rejects_corruption(tmp_path):
    path = tmp_path / "c.apne"
    write_cache(path, _items(1))
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CacheFormatError, match="magic"):
        read_cache(tmp_path / "magic")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(CacheFormatError):
        read_cache(tmp_path / "short")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CacheFormatError, match="version"):
        read_cache(tmp_path / "ver")


def test_empty_cache(tmp_path):
    write_cache(tmp_path / "e.apne", [])
    assert len(read_cache(tmp_path / "e.apne")) == 0
