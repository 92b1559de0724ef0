import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apnea_screen.ingest import (
    APNEA, NON_APNEA, AnnotationEvent, DatasetSplit, IngestError, Signal, build_dataset,
    chunk_record, label_chunk, load_audio, parse_annotations, parse_split, resample,
    write_annotations, write_audio, write_split,
)


def _write_pcm16(path, samples, rate=125, channels=1):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(struct.pack(f"<{len(samples)}h", *samples))


# -- WAV ----------------------------------------------------------------------


def test_load_silence(tmp_path):
    path = tmp_path / "s.wav"
    _write_pcm16(path, [0] * 125)
    sig = load_audio(path)
    assert sig.sample_rate_hz == 125
    assert len(sig.samples) == 125 and not sig.samples.any()


def test_pcm16_scaling_hand_written_two_samples(tmp_path):
    path = tmp_path / "two.wav"
    _write_pcm16(path, [32767, -32768])
    sig = load_audio(path)
    assert sig.samples[0] == 32767 / 32768
    assert sig.samples[1] == -1.0
    assert sig.samples[0] == pytest.approx(0.99997, abs=1e-5)


def test_stereo_rejected(tmp_path):
    path = tmp_path / "st.wav"
    _write_pcm16(path, [0, 0, 1, 1], channels=2)
    with pytest.raises(IngestError, match="unsupported channel count"):
        load_audio(path)


def test_unreadable_and_unsupported(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav")
    with pytest.raises(IngestError, match="unreadable"):
        load_audio(bad)
    with pytest.raises(IngestError):
        load_audio(tmp_path / "missing.wav")
    path = tmp_path / "i32.wav"
    from scipy.io import wavfile
    wavfile.write(path, 125, np.zeros(10, dtype=np.int32))
    with pytest.raises(IngestError, match="unsupported encoding"):
        load_audio(path)


def test_float32_round_trip(tmp_path):
    sig = Signal(np.linspace(-1, 1, 301).astype(np.float32), 125)
    write_audio(tmp_path / "f.wav", sig)
    back = load_audio(tmp_path / "f.wav")
    np.testing.assert_array_equal(back.samples, sig.samples)


# -- resampling -----------------------------------------------------------------


def test_resample_identity():
    x = np.random.default_rng(0).standard_normal(500)
    out = resample(Signal(x, 125), 125)
    np.testing.assert_array_equal(out.samples, x)


def test_resample_dc():
    out = resample(Signal(np.full(1000, 0.5), 250), 125)
    assert out.sample_rate_hz == 125
    np.testing.assert_allclose(out.samples, 0.5, atol=1e-12)


def test_resample_sine_amplitude():
    t = np.arange(5000) / 500
    out = resample(Signal(np.sin(2 * np.pi * 10 * t), 500), 125)
    t_out = np.arange(len(out.samples)) / 125
    expected = np.sin(2 * np.pi * 10 * t_out)
    interior = slice(125, -125)
    assert np.abs(out.samples - expected)[interior].max() < 0.01
    assert out.samples[interior].max() == pytest.approx(1.0, rel=0.01)


def test_resample_upsample_non_integer_ratio():
    t = np.arange(1000) / 100
    out = resample(Signal(np.sin(2 * np.pi * 3 * t), 100), 125)
    t_out = np.arange(len(out.samples)) / 125
    assert np.abs(out.samples - np.sin(2 * np.pi * 3 * t_out))[150:-150].max() < 1e-3


@pytest.mark.parametrize("rate", [44100, 8000, 250, 100, 200.5])
def test_resample_duration(rate):
    n = int(rate * 7.3)
    out = resample(Signal(np.zeros(n), rate), 125)
    assert abs(len(out.samples) / 125 - n / rate) <= 1 / 125


def test_resample_rejects_bad_rate():
    with pytest.raises(IngestError):
        resample(Signal(np.zeros(10), 125), 0)


def test_resample_rate_idempotent():
    x = Signal(np.random.default_rng(3).standard_normal(2000), 400)
    once = resample(x, 125)
    np.testing.assert_allclose(resample(once, 125).samples, once.samples, atol=1e-6)


# -- annotations and split --------------------------------------------------------


def test_parse_annotations(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("record_id,onset_s,duration_s,label\r\nrec01,42.0,15.0, H \r\nrec02,0,1.5,LA\r\n")
    events = parse_annotations(path)
    assert events == [AnnotationEvent("rec01", 42.0, 15.0, "H"), AnnotationEvent("rec02", 0.0, 1.5, "LA")]


def test_parse_header_only(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("record_id,onset_s,duration_s,label\n")
    assert parse_annotations(path) == []


@pytest.mark.parametrize("row, message", [
    ("rec01,10,0,H", "line 3"),
    ("rec01,-1,5,H", "negative onset"),
    ("rec01,x,5,H", "non-numeric"),
    ("rec01,10,-2,H", "non-positive duration"),
])
def test_parse_annotation_errors_carry_line(tmp_path, row, message):
    path = tmp_path / "a.csv"
    path.write_text(f"record_id,onset_s,duration_s,label\nrec01,1,1,H\n{row}\n")
    with pytest.raises(IngestError) as exc:
        parse_annotations(path)
    assert ":3:" in str(exc.value)
    assert message.replace("line 3", "") in str(exc.value)


def test_missing_header(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("rec01,1,1,H\n")
    with pytest.raises(IngestError, match="header"):
        parse_annotations(path)


def test_annotation_round_trip(tmp_path):
    events = [AnnotationEvent("r", 1 / 3, 12.008, "H"), AnnotationEvent("r", 100.0, 30.0, "HA")]
    write_annotations(tmp_path / "a.csv", events)
    assert parse_annotations(tmp_path / "a.csv") == events


def test_split_round_trip_and_errors(tmp_path):
    split = DatasetSplit(frozenset({"a", "b"}), frozenset({"c"}))
    write_split(tmp_path / "s.csv", split)
    assert parse_split(tmp_path / "s.csv") == split
    (tmp_path / "bad.csv").write_text("record_id,role\na,validation\n")
    with pytest.raises(IngestError, match="role"):
        parse_split(tmp_path / "bad.csv")
    (tmp_path / "both.csv").write_text("record_id,role\na,train\na,test\n")
    with pytest.raises(IngestError, match="both"):
        parse_split(tmp_path / "both.csv")


# -- chunking and labels ------------------------------------------------------


@pytest.mark.parametrize("seconds, expected", [(90, 3), (100, 3), (29, 0), (30, 1)])
def test_chunk_counts(seconds, expected):
    chunks = chunk_record(Signal(np.zeros(seconds * 125), 125), 30)
    assert len(chunks) == expected
    assert all(len(c) == 3750 for c in chunks)


def test_chunk_tiling():
    x = np.arange(100 * 125, dtype=float)
    chunks = chunk_record(Signal(x, 125), 30)
    np.testing.assert_array_equal(np.concatenate(chunks), x[: 3 * 3750])


def test_chunk_needs_whole_samples():
    with pytest.raises(IngestError):
        chunk_record(Signal(np.zeros(1000), 125), 0.01)


def _ev(onset, dur, label="H"):
    return AnnotationEvent("r", onset, dur, label)


def test_label_chunk_cases():
    assert label_chunk(30, 60, [_ev(40, 15)]) == APNEA
    assert label_chunk(30, 60, []) == NON_APNEA
    assert label_chunk(30, 60, [_ev(60, 10)]) == NON_APNEA
    assert label_chunk(30, 60, [_ev(20, 10)]) == NON_APNEA
    assert label_chunk(30, 60, [_ev(40, 15, "MT")]) == NON_APNEA
    assert label_chunk(30, 60, [_ev(40, 15, "MT")], {"MT"}) == APNEA
    assert label_chunk(30, 60, [_ev(59.9, 10, "LA")]) == APNEA


event_st = st.builds(_ev, st.floats(0, 200), st.floats(0.01, 40), st.sampled_from(["H", "HA", "LA", "OA", "MT"]))


@settings(max_examples=200, deadline=None)
@given(st.lists(event_st, max_size=6), event_st, st.integers(0, 5))
def test_label_chunk_monotone(events, extra, k):
    start = 30.0 * k
    before = label_chunk(start, start + 30, events)
    after = label_chunk(start, start + 30, events + [extra])
    assert after >= before


def test_build_dataset_composition():
    records = {"a": Signal(np.zeros(60 * 125), 125)}
    train, test = build_dataset(records, [AnnotationEvent("a", 0.0, 30.0, "H")],
                                DatasetSplit(frozenset({"a"}), frozenset()))
    assert [c.label for c in train] == [APNEA, NON_APNEA]
    assert [c.start_s for c in train] == [0.0, 30.0]
    assert test == []


def test_build_dataset_resamples_and_is_record_level():
    records = {"a": Signal(np.zeros(60 * 250), 250), "b": Signal(np.zeros(90 * 125), 125)}
    events = [AnnotationEvent("b", 70, 5, "HA"), AnnotationEvent("a", 5, 5, "OA")]
    train, test = build_dataset(records, events, DatasetSplit(frozenset({"a"}), frozenset({"b"})))
    assert {c.record_id for c in train} == {"a"} and {c.record_id for c in test} == {"b"}
    assert all(len(c.samples) == 3750 for c in train + test)
    assert [c.label for c in train] == [0, 0]
    assert [c.label for c in test] == [0, 0, 1]
    assert [c.start_s for c in test] == [c.index * 30.0 for c in test]


def test_build_dataset_errors():
    records = {"a": Signal(np.zeros(3750), 125)}
    with pytest.raises(IngestError, match="unknown"):
        build_dataset(records, [], DatasetSplit(frozenset({"a"}), frozenset({"zz"})))
    with pytest.raises(IngestError):
        DatasetSplit(frozenset({"a"}), frozenset({"a"}))


def test_signal_and_event_invariants():
    with pytest.raises(IngestError):
        Signal(np.zeros(3), 0)
    with pytest.raises(IngestError):
        AnnotationEvent("r", -1, 1, "H")
    with pytest.raises(IngestError):
        AnnotationEvent("r", 1, 0, "H")
