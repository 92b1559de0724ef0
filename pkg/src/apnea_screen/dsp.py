"""Log-mel spectrograms for 30-second respiratory chunks, plus the on-disk cache.

A 3750-sample chunk at 125 Hz becomes a 128 x 128 image: Hann-windowed STFT
power, a triangular HTK mel filterbank over 0-62.5 Hz, natural log, crop to
128 frames and a per-image min-max stretch to [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SpectrogramError(ValueError):
    pass


class CacheFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate_hz: float = 125.0
    n_fft: int = 512
    win_length: int = 256
    hop_length: int = 29
    n_mels: int = 128
    f_min_hz: float = 0.0
    f_max_hz: float = 62.5
    target_frames: int = 128
    eps: float = 1e-10

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise SpectrogramError("sample_rate_hz must be positive")
        if self.n_fft < 1 or self.win_length < 1 or self.n_mels < 1 or self.target_frames < 1:
            raise SpectrogramError("n_fft, win_length, n_mels and target_frames must be >= 1")
        if self.win_length > self.n_fft:
            raise SpectrogramError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if self.hop_length < 1:
            raise SpectrogramError("hop_length must be >= 1")
        if not 0 <= self.f_min_hz < self.f_max_hz:
            raise SpectrogramError("need 0 <= f_min_hz < f_max_hz")
        if self.f_max_hz > self.sample_rate_hz / 2:
            raise SpectrogramError(
                f"f_max_hz {self.f_max_hz} above Nyquist {self.sample_rate_hz / 2}")
        if self.eps <= 0:
            raise SpectrogramError("eps must be positive")

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (n_mels, n_frames), float32, within [0, 1]
    record_id: str = ""
    index: int = 0
    label: int = 0


def hann_window(length: int) -> np.ndarray:
    """Symmetric Hann window; a single-sample window is ``[1.0]``."""
    if length < 1:
        raise SpectrogramError("window length must be >= 1")
    if length == 1:
        return np.ones(1)
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / (length - 1))


def _padded_window(config: SpectrogramConfig) -> np.ndarray:
    window = np.zeros(config.n_fft)
    left = (config.n_fft - config.win_length) // 2
    window[left:left + config.win_length] = hann_window(config.win_length)
    return window


def stft_power(signal: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """Power spectrogram with reflect center-padding.

    Returns an array of shape ``(n_fft // 2 + 1, 1 + len(signal) // hop_length)``.
    """
    x = np.asarray(signal, dtype=np.float64)
    pad = config.n_fft // 2
    if len(x) <= pad:
        raise SpectrogramError(f"signal of {len(x)} samples too short for n_fft {config.n_fft}")
    padded = np.pad(x, pad, mode="reflect")
    n_frames = config.n_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.n_fft)
    frames = frames[::config.hop_length][:n_frames]
    spectrum = np.fft.rfft(frames * _padded_window(config), axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def hz_to_mel(f_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers_hz(config: SpectrogramConfig) -> np.ndarray:
    """Edge and center frequencies: ``n_mels + 2`` points uniform in mel."""
    mels = np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz), config.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(config: SpectrogramConfig) -> np.ndarray:
    """Triangular filters of unit peak, shape ``(n_mels, n_fft // 2 + 1)``.

    Raises
    ------
    SpectrogramError
        If any filter covers no FFT bin; raise ``n_fft`` to fix.
    """
    return _filterbank(config).copy()


@lru_cache(maxsize=8)
def _filterbank(config: SpectrogramConfig) -> np.ndarray:
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate_hz / config.n_fft
    points = mel_centers_hz(config)
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(bank.sum(axis=1) <= 0)
    if empty.size:
        raise SpectrogramError(
            f"empty mel filter(s) {empty.tolist()}: frequency resolution too coarse, "
            f"raise n_fft above {config.n_fft}")
    bank.setflags(write=False)
    return bank


def log_mel_power(signal: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """Log mel energies before cropping and normalisation, ``(n_mels, n_frames)``."""
    power = stft_power(signal, config)
    return np.log(_filterbank(config) @ power + config.eps)


def fit_frames(image: np.ndarray, target_frames: int, fill: float) -> np.ndarray:
    """Crop trailing frames, or right-pad with ``fill`` columns, to ``target_frames``."""
    n = image.shape[1]
    if n >= target_frames:
        return image[:, :target_frames]
    pad = np.full((image.shape[0], target_frames - n), fill)
    return np.concatenate([image, pad], axis=1)


def minmax(image: np.ndarray) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def to_mel_spectrogram(samples: np.ndarray, config: SpectrogramConfig = SpectrogramConfig(),
                       record_id: str = "", index: int = 0, label: int = 0) -> Spectrogram:
    # padding columns are silent frames: log(0 + eps)
    image = fit_frames(log_mel_power(samples, config), config.target_frames, np.log(config.eps))
    values = np.clip(minmax(image), 0.0, 1.0).astype(np.float32)
    return Spectrogram(values, record_id, index, label)


def spectrograms_for(chunks: Iterable, config: SpectrogramConfig = SpectrogramConfig()):
    """Convert ``LabeledChunk``-like objects, keeping their identity and label."""
    return [to_mel_spectrogram(c.samples, config, c.record_id, c.index, c.label) for c in chunks]


def column_std(values: np.ndarray) -> float:
    """Mean over time frames of the standard deviation across mel bins.

    A chunk whose breathing is suppressed has a flatter spectrum per frame
    and so scores lower than a breathing chunk.
    """
    return float(np.asarray(values, dtype=np.float64).std(axis=0).mean())


def temporal_variation(values: np.ndarray) -> float:
    """Mean over mel bins of the standard deviation along time."""
    return float(np.asarray(values, dtype=np.float64).std(axis=1).mean())


# --------------------------------------------------------------------------
# Cache file: b"APNE", u32 version, u32 n_mels, u32 n_frames, u32 count, then
# per record: u32 id length, id bytes, u32 chunk index, u8 label, f32 values
# --------------------------------------------------------------------------

CACHE_MAGIC = b"APNE"
CACHE_VERSION = 1


@dataclass
class SpectrogramSet:
    """Stacked spectrograms ready for training: ``x`` is (N, n_mels, n_frames)."""

    x: np.ndarray
    y: np.ndarray
    record_ids: list[str]
    indices: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_spectrograms(cls, items: Sequence[Spectrogram], n_mels: int = 128,
                          n_frames: int = 128) -> "SpectrogramSet":
        if items:
            x = np.stack([s.values for s in items]).astype(np.float32)
        else:
            x = np.zeros((0, n_mels, n_frames), np.float32)
        return cls(
            x=x,
            y=np.array([s.label for s in items], dtype=np.int64),
            record_ids=[s.record_id for s in items],
            indices=np.array([s.index for s in items], dtype=np.int64),
        )

    def spectrograms(self) -> list[Spectrogram]:
        return [Spectrogram(self.x[i], self.record_ids[i], int(self.indices[i]), int(self.y[i]))
                for i in range(len(self))]

    def subset(self, idx) -> "SpectrogramSet":
        idx = np.asarray(idx)
        return SpectrogramSet(self.x[idx], self.y[idx], [self.record_ids[i] for i in idx],
                              self.indices[idx])


def write_cache(path, items: Sequence[Spectrogram], n_mels: int = 128,
                n_frames: int = 128) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIII", CACHE_VERSION, n_mels, n_frames, len(items)))
        for s in items:
            if s.values.shape != (n_mels, n_frames):
                raise CacheFormatError(f"spectrogram shape {s.values.shape} != {(n_mels, n_frames)}")
            rid = s.record_id.encode("utf-8")
            fh.write(struct.pack("<I", len(rid)))
            fh.write(rid)
            fh.write(struct.pack("<IB", s.index, s.label))
            fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def read_cache(path) -> SpectrogramSet:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a spectrogram cache (bad magic)")
    try:
        version, n_mels, n_frames, count = struct.unpack_from("<IIII", data, 4)
        if version != CACHE_VERSION:
            raise CacheFormatError(f"{path}: unsupported cache version {version}")
        offset = 20
        size = n_mels * n_frames * 4
        items = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            rid = data[offset:offset + id_len].decode("utf-8")
            offset += id_len
            index, label = struct.unpack_from("<IB", data, offset)
            offset += 5
            if offset + size > len(data):
                raise CacheFormatError(f"{path}: truncated record")
            values = np.frombuffer(data, dtype="<f4", count=n_mels * n_frames, offset=offset)
            offset += size
            items.append(Spectrogram(values.reshape(n_mels, n_frames).astype(np.float32),
                                     rid, index, label))
    except struct.error as exc:
        raise CacheFormatError(f"{path}: truncated cache ({exc})") from exc
    if offset != len(data):
        raise CacheFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return SpectrogramSet.from_spectrograms(items, n_mels, n_frames)
