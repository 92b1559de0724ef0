"""Audio records, annotation events and 30-second labeled chunks.

Records are mono WAV files; annotations and the train/test split are small
CSV files (see ``parse_annotations`` and ``parse_split`` for the schemas).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

CANONICAL_RATE_HZ = 125.0
CHUNK_SECONDS = 30.0
DEFAULT_APNEA_LABELS = frozenset({"LA", "H", "HA"})

APNEA = 1
NON_APNEA = 0

ANNOTATION_HEADER = ["record_id", "onset_s", "duration_s", "label"]
SPLIT_HEADER = ["record_id", "role"]

# windowed-sinc interpolation kernel
KAISER_BETA = 8.6
HALF_WIDTH_TAPS = 64
_BLOCK = 8192


class IngestError(ValueError):
    """Raised for malformed audio, annotation or split input."""


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise IngestError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class AnnotationEvent:
    record_id: str
    onset_s: float
    duration_s: float
    label: str

    def __post_init__(self):
        if not self.onset_s >= 0:
            raise IngestError(f"negative onset {self.onset_s}")
        if not self.duration_s > 0:
            raise IngestError(f"non-positive duration {self.duration_s}")

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class LabeledChunk:
    record_id: str
    index: int
    start_s: float
    samples: np.ndarray
    label: int


@dataclass(frozen=True)
class DatasetSplit:
    train_record_ids: frozenset[str]
    test_record_ids: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "train_record_ids", frozenset(self.train_record_ids))
        object.__setattr__(self, "test_record_ids", frozenset(self.test_record_ids))
        both = self.train_record_ids & self.test_record_ids
        if both:
            raise IngestError(f"records in both train and test: {sorted(both)}")


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------


def load_audio(path) -> Signal:
    """Read a mono PCM16 or float32 WAV file, scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise IngestError(f"{path}: unreadable WAV file ({exc})") from exc

    if data.ndim != 1:
        raise IngestError(f"{path}: unsupported channel count {data.shape[1]}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise IngestError(f"{path}: unsupported encoding {data.dtype}")
    return Signal(samples, float(rate))


def write_audio(path, signal: Signal, pcm16: bool = False) -> None:
    rate = signal.sample_rate_hz
    if rate != int(rate):
        raise IngestError("WAV headers carry integer sample rates only")
    if pcm16:
        data = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    else:
        data = signal.samples.astype("<f4")
    wavfile.write(str(path), int(rate), data)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------


def _kaiser_sinc(offsets: np.ndarray, cutoff: float, half_width: float) -> np.ndarray:
    # offsets in input samples; cutoff as a fraction of the input rate
    taps = 2.0 * cutoff * np.sinc(2.0 * cutoff * offsets)
    ratio = np.clip(offsets / half_width, -1.0, 1.0)
    return taps * np.i0(KAISER_BETA * np.sqrt(1.0 - ratio**2)) / np.i0(KAISER_BETA)


def resample(signal: Signal, target_hz: float) -> Signal:
    """Band-limited resampling by Kaiser-windowed sinc interpolation.

    The kernel extends ``HALF_WIDTH_TAPS`` zero crossings to each side of the
    output instant, measured at the lower of the two rates, and is cut off at
    the lower Nyquist frequency. Each polyphase branch is normalised to unit
    DC gain and the input is edge-extended, so constants map to constants.
    """
    if not target_hz > 0:
        raise IngestError(f"target rate must be positive, got {target_hz}")
    source_hz = signal.sample_rate_hz
    if target_hz == source_hz:
        return Signal(signal.samples.copy(), source_hz)

    ratio = Fraction(target_hz / source_hz).limit_denominator(10_000)
    up, down = ratio.numerator, ratio.denominator
    x = signal.samples
    n_out = int(round(len(x) * up / down))

    cutoff = 0.5 * min(1.0, up / down)
    half_width = HALF_WIDTH_TAPS / (2.0 * cutoff)
    reach = int(math.ceil(half_width))
    padded = np.pad(x, (reach, reach + 1), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * reach + 1)

    out = np.empty(n_out)
    for phase in range(min(up, n_out)):
        base, rem = divmod(phase * down, up)
        frac = rem / up
        # output k = q*up + phase sits at input position q*down + base + frac
        offsets = np.arange(-reach, reach + 1) - frac
        kernel = _kaiser_sinc(offsets, cutoff, half_width)
        kernel /= kernel.sum()
        starts = np.arange(phase, n_out, up) // up * down + base
        dest = np.arange(phase, n_out, up)
        for lo in range(0, len(starts), _BLOCK):
            out[dest[lo:lo + _BLOCK]] = windows[starts[lo:lo + _BLOCK]] @ kernel
    return Signal(out, float(target_hz))


# --------------------------------------------------------------------------
# CSV inputs
# --------------------------------------------------------------------------


def _read_rows(path, header: list[str]):
    try:
        handle = open(path, newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise IngestError(f"{path}: cannot open ({exc})") from exc
    with handle:
        reader = csv.reader(handle)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise IngestError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{reader.line_num}: expected {len(header)} fields")
            yield reader.line_num, [c.strip() for c in row]


def parse_annotations(path) -> list[AnnotationEvent]:
    """Parse a ``record_id,onset_s,duration_s,label`` CSV into events."""
    events = []
    for line, (record_id, onset, duration, label) in _read_rows(path, ANNOTATION_HEADER):
        try:
            onset_s, duration_s = float(onset), float(duration)
        except ValueError:
            raise IngestError(f"{path}:{line}: non-numeric onset or duration") from None
        if not (math.isfinite(onset_s) and math.isfinite(duration_s)):
            raise IngestError(f"{path}:{line}: non-finite onset or duration")
        if onset_s < 0:
            raise IngestError(f"{path}:{line}: negative onset {onset_s}")
        if duration_s <= 0:
            raise IngestError(f"{path}:{line}: non-positive duration {duration_s}")
        events.append(AnnotationEvent(record_id, onset_s, duration_s, label))
    return events


def write_annotations(path, events: Iterable[AnnotationEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for ev in events:
            writer.writerow([ev.record_id, repr(ev.onset_s), repr(ev.duration_s), ev.label])


def parse_split(path) -> DatasetSplit:
    train, test = set(), set()
    for line, (record_id, role) in _read_rows(path, SPLIT_HEADER):
        if role == "train":
            train.add(record_id)
        elif role == "test":
            test.add(record_id)
        else:
            raise IngestError(f"{path}:{line}: role must be train or test, got {role!r}")
    return DatasetSplit(frozenset(train), frozenset(test))


def write_split(path, split: DatasetSplit) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SPLIT_HEADER)
        for rid in sorted(split.train_record_ids):
            writer.writerow([rid, "train"])
        for rid in sorted(split.test_record_ids):
            writer.writerow([rid, "test"])


# --------------------------------------------------------------------------
# Chunking and labels
# --------------------------------------------------------------------------


def chunk_record(signal: Signal, chunk_seconds: float = CHUNK_SECONDS) -> list[np.ndarray]:
    """Cut consecutive non-overlapping windows; a trailing partial window is dropped."""
    if not chunk_seconds > 0:
        raise IngestError(f"chunk length must be positive, got {chunk_seconds}")
    width = chunk_seconds * signal.sample_rate_hz
    if abs(width - round(width)) > 1e-9:
        raise IngestError(
            f"{chunk_seconds} s at {signal.sample_rate_hz} Hz is not a whole number of samples"
        )
    width = int(round(width))
    n = len(signal.samples) // width
    return [signal.samples[i * width:(i + 1) * width].copy() for i in range(n)]


def label_chunk(
    start_s: float,
    end_s: float,
    events: Iterable[AnnotationEvent],
    apnea_labels: Iterable[str] = DEFAULT_APNEA_LABELS,
) -> int:
    """APNEA iff some event with an apnea label overlaps ``[start_s, end_s)``."""
    if not end_s > start_s:
        raise IngestError(f"empty span [{start_s}, {end_s})")
    labels = set(apnea_labels)
    for ev in events:
        if ev.label in labels and min(end_s, ev.end_s) > max(start_s, ev.onset_s):
            return APNEA
    return NON_APNEA


def class_counts(chunks: Sequence[LabeledChunk]) -> dict[str, int]:
    n_apnea = sum(1 for c in chunks if c.label == APNEA)
    return {"apnea": n_apnea, "non_apnea": len(chunks) - n_apnea}


def label_record(
    record_id: str,
    signal: Signal,
    events: Sequence[AnnotationEvent],
    chunk_seconds: float = CHUNK_SECONDS,
    apnea_labels: Iterable[str] = DEFAULT_APNEA_LABELS,
) -> list[LabeledChunk]:
    own = [ev for ev in events if ev.record_id == record_id]
    chunks = []
    for i, samples in enumerate(chunk_record(signal, chunk_seconds)):
        start = i * chunk_seconds
        label = label_chunk(start, start + chunk_seconds, own, apnea_labels)
        chunks.append(LabeledChunk(record_id, i, start, samples, label))
    return chunks


def build_dataset(
    records: Mapping[str, Signal],
    annotations: Sequence[AnnotationEvent],
    split: DatasetSplit,
    chunk_seconds: float = CHUNK_SECONDS,
    apnea_labels: Iterable[str] = DEFAULT_APNEA_LABELS,
    target_hz: float = CANONICAL_RATE_HZ,
) -> tuple[list[LabeledChunk], list[LabeledChunk]]:
    """Resample, chunk and label every record named in ``split``.

    Records are processed in sorted id order. The test partition is returned
    as-is; balancing happens later and only ever on training data.
    """
    if split.train_record_ids & split.test_record_ids:
        raise IngestError("train and test record sets overlap")
    missing = (split.train_record_ids | split.test_record_ids) - set(records)
    if missing:
        raise IngestError(f"split references unknown records: {sorted(missing)}")

    apnea_labels = frozenset(apnea_labels)
    out = {}
    for role, ids in (("train", split.train_record_ids), ("test", split.test_record_ids)):
        chunks = []
        for rid in sorted(ids):
            signal = resample(records[rid], target_hz)
            chunks.extend(label_record(rid, signal, annotations, chunk_seconds, apnea_labels))
        counts = class_counts(chunks)
        log.info("%s: %d chunks (%d apnea, %d non-apnea)", role, len(chunks),
                 counts["apnea"], counts["non_apnea"])
        out[role] = chunks
    return out["train"], out["test"]


def load_records(directory, record_ids: Iterable[str]) -> dict[str, Signal]:
    directory = Path(directory)
    return {rid: load_audio(directory / f"{rid}.wav") for rid in sorted(record_ids)}
