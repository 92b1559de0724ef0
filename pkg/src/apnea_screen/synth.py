"""Seeded breathing-like records with embedded apnea events.

A record is band-limited noise (0-40 Hz) whose amplitude follows a periodic
breathing envelope; inside each apnea event the envelope is scaled down to
``apnea_suppression``. White noise at ``noise_snr_db`` below the breathing
signal is added everywhere. Events are written with label ``"H"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ingest import (AnnotationEvent, DatasetSplit, Signal, write_annotations, write_audio,
                     write_split)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 600.0
    sample_rate_hz: float = 125.0
    breath_rate_hz: float = 0.25
    apnea_event_rate_per_min: float = 0.5
    apnea_duration_s: tuple[float, float] = (10.0, 30.0)
    apnea_suppression: float = 0.05
    noise_snr_db: float = 20.0
    carrier_band_hz: float = 40.0
    envelope_floor: float = 0.2
    amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "apnea_duration_s", tuple(float(v) for v in self.apnea_duration_s))
        lo, hi = self.apnea_duration_s
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise SynthError("duration and sample rate must be positive")
        if not 0 < lo <= hi:
            raise SynthError(f"bad apnea duration range {self.apnea_duration_s}")
        if self.apnea_event_rate_per_min < 0:
            raise SynthError("event rate must be non-negative")
        if not 0 <= self.apnea_suppression < 1:
            raise SynthError("apnea_suppression must be in [0, 1)")
        if not 0 < self.carrier_band_hz <= self.sample_rate_hz / 2:
            raise SynthError("carrier band must lie below Nyquist")
        if not 0 <= self.envelope_floor < 1:
            raise SynthError("envelope_floor must be in [0, 1)")

    @property
    def n_events(self) -> int:
        return int(round(self.apnea_event_rate_per_min * self.duration_s / 60.0))


def _place_events(cfg: SynthConfig, n_samples: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping (start, length) sample spans."""
    fs = cfg.sample_rate_hz
    lo, hi = cfg.apnea_duration_s
    n = cfg.n_events
    if n == 0:
        return []
    if n * hi * fs > n_samples:
        raise SynthError(
            f"{n} events of up to {hi} s do not fit in a {cfg.duration_s} s record")
    lengths = np.round(rng.uniform(lo, hi, size=n) * fs).astype(np.int64)
    free = n_samples - int(lengths.sum())
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    starts = cuts + np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return [(int(s), int(k)) for s, k in zip(starts, lengths)]


def _band_limited_noise(n: int, fs: float, band_hz: float, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spectrum[freqs > band_hz] = 0
    x = np.fft.irfft(spectrum, n)
    return x / np.sqrt(np.mean(x * x))


def generate_record(config: SynthConfig, record_id: str = "rec01") -> tuple[Signal, list[AnnotationEvent]]:
    fs = config.sample_rate_hz
    n = int(round(config.duration_s * fs))
    rng = np.random.default_rng(config.seed)
    spans = _place_events(config, n, rng)

    t = np.arange(n) / fs
    phase = rng.uniform(0, 2 * np.pi)
    breath = np.sin(np.pi * config.breath_rate_hz * t + phase / 2) ** 2
    envelope = config.envelope_floor + (1 - config.envelope_floor) * breath
    breathing = config.amplitude * envelope * _band_limited_noise(n, fs, config.carrier_band_hz, rng)
    noise_std = np.sqrt(np.mean(breathing**2)) * 10 ** (-config.noise_snr_db / 20)

    gain = np.ones(n)
    for start, length in spans:
        gain[start:start + length] = config.apnea_suppression
    samples = np.clip(breathing * gain + noise_std * rng.standard_normal(n), -1.0, 1.0)

    events = [AnnotationEvent(record_id, start / fs, length / fs, "H") for start, length in spans]
    return Signal(samples, fs), events


def record_ids(n_records: int) -> list[str]:
    width = max(2, len(str(n_records)))
    return [f"rec{i:0{width}d}" for i in range(1, n_records + 1)]


def generate_dataset(n_records: int, template: SynthConfig = SynthConfig(), seed: int = 0):
    """``n_records`` records with per-record seeds; the last ceil(n/5) are the test set.

    Returns ``(records, annotations, split)`` where ``records`` maps id to Signal.
    """
    if n_records < 2:
        raise SynthError(f"need at least 2 records (one train, one test), got {n_records}")
    ids = record_ids(n_records)
    children = np.random.SeedSequence(seed).spawn(n_records)
    records, annotations = {}, []
    for rid, child in zip(ids, children):
        cfg = replace(template, seed=int(child.generate_state(1)[0]))
        signal, events = generate_record(cfg, rid)
        records[rid] = signal
        annotations.extend(events)
    n_test = math.ceil(n_records / 5)
    split = DatasetSplit(frozenset(ids[:-n_test]), frozenset(ids[-n_test:]))
    return records, annotations, split


def write_dataset(directory, records: dict[str, Signal], annotations, split: DatasetSplit) -> list[Path]:
    """WAV per record plus ``annotations.csv`` and ``split.csv``; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for rid, signal in records.items():
        path = directory / f"{rid}.wav"
        write_audio(path, signal)
        written.append(path)
    write_annotations(directory / "annotations.csv", annotations)
    write_split(directory / "split.csv", split)
    return written + [directory / "annotations.csv", directory / "split.csv"]
