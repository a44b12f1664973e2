import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcg_hinf.data_io import (DataError, DataValidationError, DatasetManifest, ManifestEntry,
                              SyntheticSpec, aggregate_recording, beat_onsets, ingest_directory,
                              load_reference_csv, load_wav, patient_fallback, patient_split,
                              synthesize_dataset, write_dataset, write_wav)
from pcg_hinf.signal_dsp import Waveform


def _raw_wav(path, data: bytes, rate=2000, channels=1, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(data)


# --- reference CSV -------------------------------------------------------------

def test_reference_rows(tmp_path):
    p = tmp_path / "REFERENCE.csv"
    p.write_text("a0001,-1\na0002,1\n\n")
    assert load_reference_csv(p) == [("a0001", 0), ("a0002", 1)]


@pytest.mark.parametrize("text,match", [
    ("a0001,-1\na0002,1\na0003,2\n", r":3: unknown label '2'"),
    ("a0001,-1\na0001,1\n", r":2: duplicate record id"),
    ("a0001,-1,x\n", r":1: expected"),
    (",1\n", r":1: empty record id"),
])
def test_reference_errors(tmp_path, text, match):
    p = tmp_path / "REFERENCE.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=match):
        load_reference_csv(p)


# --- WAV ---------------------------------------------------------------------

def test_wav_scaling(tmp_path):
    _raw_wav(tmp_path / "x.wav", np.array([-32768, 0, 16384, 32767], "<i2").tobytes())
    w = load_wav(tmp_path / "x.wav")
    assert w.sample_rate_hz == 2000 and w.source_id == "x"
    np.testing.assert_array_equal(w.samples, [-1.0, 0.0, 0.5, 32767 / 32768])


@pytest.mark.parametrize("kw,match", [
    ({"rate": 44100}, "sample rate 44100"),
    ({"channels": 2}, "2 channels"),
    ({"width": 1}, "sample width 8"),
])
def test_wav_rejections(tmp_path, kw, match):
    _raw_wav(tmp_path / "x.wav", b"\x00\x00" * 8, **kw)
    with pytest.raises(DataError, match=match):
        load_wav(tmp_path / "x.wav")


def test_wav_not_a_wav(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"not audio at all")
    with pytest.raises(DataError, match="not a readable"):
        load_wav(tmp_path / "x.wav")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3000))
def test_wav_round_trip(tmp_path_factory, seed, n):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    path = tmp_path_factory.mktemp("wav") / "r.wav"
    write_wav(path, Waveform(x, 2000))
    back = load_wav(path).samples
    assert np.max(np.abs(back - x)) <= 1 / 32768


# --- ingestion ----------------------------------------------------------------

def test_patient_fallback():
    assert patient_fallback("p0001_03") == "p0001"
    assert patient_fallback("a-17") == "a"
    assert patient_fallback("a0001") == "a0001"


def test_ingest_directory(tmp_path):
    for rid in ("a0001", "a0002", "a0003"):
        write_wav(tmp_path / f"{rid}.wav", Waveform(np.zeros(100), 2000))
    (tmp_path / "REFERENCE.csv").write_text("a0001,-1\na0002,1\na0009,1\n")
    (tmp_path / "PATIENTS.csv").write_text("a0001,pA\n")
    entries = ingest_directory(tmp_path)
    assert [(e.record_id, e.patient_id, e.label) for e in entries] == [("a0001", "pA", 0), ("a0002", "a0002", 1)]


def test_ingest_errors(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        ingest_directory(tmp_path / "nope")
    with pytest.raises(DataError, match="no records"):
        ingest_directory(tmp_path)
    write_wav(tmp_path / "a.wav", Waveform(np.zeros(10), 2000))
    with pytest.raises(DataError, match="REFERENCE.csv"):
        ingest_directory(tmp_path)


# --- splitting ----------------------------------------------------------------

def _entries(sizes, labels):
    out = []
    for k, (n, lab) in enumerate(zip(sizes, labels)):
        out += [ManifestEntry(f"P{k:02d}_{j}", f"P{k:02d}", lab, "") for j in range(n)]
    return out


def test_small_split_groups():
    es = _entries([4, 4, 2], [0, 1, 0])
    a = patient_split(es, seed=7)
    b = patient_split(es, seed=7)
    assert a.split_assignment == b.split_assignment
    assert a.straddling_patients() == []
    assert set(a.split_assignment) == {e.record_id for e in es}


def test_split_preconditions():
    with pytest.raises(DataValidationError, match="3 distinct"):
        patient_split(_entries([3, 3], [0, 1]))
    with pytest.raises(DataValidationError, match="both classes"):
        patient_split(_entries([3, 3, 3], [0, 0, 0]))
    with pytest.raises(DataValidationError, match="empty"):
        patient_split([])


def _fuzz_entries(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 9, 20)
    labels = (rng.random(20) < 0.3).astype(int)
    labels[:2] = (0, 1)
    return _entries(sizes, labels)


@pytest.mark.parametrize("chunk", range(4))
def test_split_fuzz_no_straddling(chunk):
    for seed in range(25 * chunk, 25 * chunk + 25):
        m = patient_split(_fuzz_entries(seed), seed=seed)
        assert m.straddling_patients() == [], seed
        assert set(m.split_assignment.values()) <= {"train", "val", "test"}


def test_test_share_on_100_records():
    es = _entries([5] * 20, [0] * 14 + [1] * 6)
    for seed in range(20):
        share = patient_split(es, seed=seed).report["achieved_share"]["test"]
        assert 0.10 <= share <= 0.30


def test_manifest_json_round_trip(tmp_path):
    m = patient_split(_fuzz_entries(3), seed=3)
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.split_assignment == m.split_assignment
    assert [e.record_id for e in back.entries] == [e.record_id for e in m.entries]


# --- synthesis ------------------------------------------------------------------

def test_synth_deterministic_and_grouped(tmp_path):
    spec = SyntheticSpec(n_normal=8, n_abnormal=5, duration_s=(3, 4), seed=11)
    e1, w1, _ = synthesize_dataset(spec)
    e2, w2, _ = synthesize_dataset(spec)
    assert [x.record_id for x in e1] == [x.record_id for x in e2]
    assert all(w1[r].samples.tobytes() == w2[r].samples.tobytes() for r in w1)
    assert sum(e.label for e in e1) == 5 and len(e1) == 13
    per_patient = {}
    for e in e1:
        per_patient.setdefault(e.patient_id, set()).add(e.label)
    assert all(len(v) == 1 for v in per_patient.values())

    write_dataset(tmp_path / "a", e1, w1)
    write_dataset(tmp_path / "b", e2, w2)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert len(ingest_directory(tmp_path / "a")) == 13


def test_synth_normal_is_periodic():
    spec = SyntheticSpec(normal_jitter=0.0, noise_sigma=0.0, heart_rate_bpm=(75, 75), duration_s=(8, 8))
    w, onsets = __import__("pcg_hinf.data_io", fromlist=["synth_waveform"]).synth_waveform(
        np.random.default_rng(0), spec, abnormal=False)
    env = np.abs(w.samples)
    env = np.convolve(env, np.ones(40) / 40, mode="same")
    env -= env.mean()
    ac = np.correlate(env, env, "full")[len(env) - 1:]
    period = int(round(0.8 * 2000))
    lo = int(0.5 * period)
    peak = lo + int(np.argmax(ac[lo:int(1.5 * period)]))
    assert abs(peak - period) <= 20


def test_abnormal_interval_variability():
    rng = np.random.default_rng(0)

    def cv(jitter, drop, extra):
        out = []
        for _ in range(40):
            d = np.diff(beat_onsets(rng, 20.0, 75.0, jitter, drop, extra))
            out.append(d.std() / d.mean())
        return np.mean(out)
    assert cv(0.4, 0.2, 0.2) >= 3 * cv(0.03, 0.0, 0.0)


def test_synth_spec_problems():
    assert SyntheticSpec(n_normal=0, n_abnormal=0).problems()
    assert SyntheticSpec(abnormal_jitter=1.5).problems()
    assert SyntheticSpec().problems() == []


# --- aggregation -----------------------------------------------------------------

def test_aggregate_examples():
    assert aggregate_recording([0.9, 0.9, 0.9], 0.5) == pytest.approx((0.9, 1))
    assert aggregate_recording([0.2], 0.5) == (0.2, 0)
    assert aggregate_recording([0.4, 0.8], 0.5) == pytest.approx((0.6, 1))
    assert aggregate_recording([0.1, 0.8], 0.5, "max") == (0.8, 1)
    with pytest.raises(ValueError, match="empty"):
        aggregate_recording([], 0.5)
    with pytest.raises(ValueError, match="mode"):
        aggregate_recording([0.1], 0.5, "median")
