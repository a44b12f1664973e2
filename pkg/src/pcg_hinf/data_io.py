"""Recording ingestion, patient-wise splits and a synthetic heart-sound generator.

Directory layout (PhysioNet CinC 2016 style)::

    <dir>/<record_id>.wav     16-bit PCM mono at 2000 Hz
    <dir>/REFERENCE.csv       record_id,label   (label -1 normal, 1 abnormal)
    <dir>/PATIENTS.csv        record_id,patient_id   (optional)
"""

from __future__ import annotations

import csv
import json
import logging
import math
import wave
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .signal_dsp import Waveform

log = logging.getLogger(__name__)

EXPECTED_RATE_HZ = 2000
LABEL_MAP = {"-1": 0, "1": 1}
# annotated CinC 2016 recordings (5154 normal + 771 abnormal), the scale of
# the 250-per-class validation target
REFERENCE_DATASET_SIZE = 5925
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Unreadable or malformed input data (CLI exit code 2)."""


class DataValidationError(ValueError):
    """Well-formed data that cannot satisfy a request (CLI exit code 3)."""


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_reference_csv(path) -> list:
    """Parse ``record_id,label`` rows; labels -1/1 become 0/1."""
    rows, seen = [], {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 'record_id,label', got {row!r}")
            rec, raw = row[0].strip(), row[1].strip()
            if not rec:
                raise DataError(f"{path}:{lineno}: empty record id")
            if raw not in LABEL_MAP:
                raise DataError(f"{path}:{lineno}: unknown label {raw!r} for {rec} (expected -1 or 1)")
            if rec in seen:
                raise DataError(f"{path}:{lineno}: duplicate record id {rec!r} (first on line {seen[rec]})")
            seen[rec] = lineno
            rows.append((rec, LABEL_MAP[raw]))
    log.info("read %d reference rows from %s", len(rows), path)
    return rows


def load_patients_csv(path) -> dict:
    mapping = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise DataError(f"{path}:{lineno}: expected 'record_id,patient_id', got {row!r}")
            mapping[row[0].strip()] = row[1].strip()
    return mapping


def load_wav(path, expected_rate: int = EXPECTED_RATE_HZ) -> Waveform:
    """Read 16-bit PCM mono; samples are scaled by 1/32768 into [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            comptype = w.getcomptype()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable PCM WAV file ({exc})") from None
    if comptype != "NONE":
        raise DataError(f"{path}: compression type {comptype!r} unsupported (need PCM)")
    if width != 2:
        raise DataError(f"{path}: sample width {8 * width} bits unsupported (need 16-bit PCM)")
    if channels != 1:
        raise DataError(f"{path}: {channels} channels unsupported (need mono)")
    if rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz unsupported (need {expected_rate} Hz)")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate, source_id=path.stem)


def write_wav(path, signal: Waveform):
    q = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate_hz)
        w.writeframes(q.tobytes())


# ---------------------------------------------------------------------------
# manifests and patient-wise splitting
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    record_id: str
    patient_id: str
    label: int
    source: str  # WAV path, or "synthetic:<seed>"


@dataclass
class DatasetManifest:
    entries: list
    split_assignment: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def records(self, split: str) -> list:
        return [e for e in self.entries if self.split_assignment.get(e.record_id) == split]

    @property
    def class_counts(self) -> dict:
        counts = {s: {"normal": 0, "abnormal": 0} for s in SPLITS}
        for e in self.entries:
            s = self.split_assignment.get(e.record_id)
            if s in counts:
                counts[s]["abnormal" if e.label else "normal"] += 1
        return counts

    def patients_by_split(self) -> dict:
        out = defaultdict(set)
        for e in self.entries:
            out[self.split_assignment[e.record_id]].add(e.patient_id)
        return dict(out)

    def straddling_patients(self) -> list:
        where = defaultdict(set)
        for e in self.entries:
            where[e.patient_id].add(self.split_assignment.get(e.record_id))
        return sorted(p for p, s in where.items() if len(s) > 1)

    def to_json(self) -> dict:
        return {"entries": [{**asdict(e), "label": int(e.label)} for e in self.entries],
                "split_assignment": dict(sorted(self.split_assignment.items())),
                "class_counts": self.class_counts,
                "report": self.report}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls([ManifestEntry(**e) for e in d["entries"]], dict(d["split_assignment"]),
                   d.get("report", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def patient_fallback(record_id: str) -> str:
    """Patient id from a record id: text before the first '_' or '-'."""
    for sep in ("_", "-"):
        if sep in record_id:
            return record_id.split(sep, 1)[0]
    return record_id


def _pick_groups(groups: list, target: int, rng) -> list:
    """Greedy: walk groups in shuffled order, keep any that moves the count toward ``target``."""
    chosen, count = [], 0
    for k in rng.permutation(len(groups)):
        pid, size = groups[k]
        if abs(count + size - target) < abs(count - target):
            chosen.append(pid)
            count += size
    return chosen


def patient_split(entries: list, test_ratio: float = 0.2, val_per_class: int = 250,
                  seed: int = 0, reference_size: int = REFERENCE_DATASET_SIZE,
                  val_cap_fraction: float = 0.35) -> DatasetManifest:
    """Assign every patient (hence all their records) to exactly one split.

    Test patients are drawn per class toward ``test_ratio`` of that class's
    records. Validation patients come from the remaining training side,
    targeting ``val_per_class`` records per class scaled by dataset size
    relative to ``reference_size`` and capped at ``val_cap_fraction`` of the
    training-side records of that class. Every class with at least two
    training-side patients gives at least one patient to validation.
    """
    if not entries:
        raise DataValidationError("cannot split an empty manifest")
    by_patient = defaultdict(list)
    for e in sorted(entries, key=lambda e: e.record_id):
        by_patient[e.patient_id].append(e)
    if len(by_patient) < 3:
        raise DataValidationError(f"need at least 3 distinct patients, got {len(by_patient)}")
    labels = {e.label for e in entries}
    if labels != {0, 1}:
        raise DataValidationError(f"both classes must be present, got labels {sorted(labels)}")

    rng = np.random.default_rng(seed)
    patient_label = {}
    for pid, recs in by_patient.items():
        n_abn = sum(e.label for e in recs)
        patient_label[pid] = int(2 * n_abn >= len(recs))
    pids_by_class = {c: sorted(p for p, l in patient_label.items() if l == c) for c in (0, 1)}

    assignment = {}
    test_pids, val_pids = set(), set()
    for c in (0, 1):
        groups = [(p, len(by_patient[p])) for p in pids_by_class[c]]
        n_class = sum(n for _, n in groups)
        test_pids.update(_pick_groups(groups, int(round(test_ratio * n_class)), rng))

    n_total = len(entries)
    scaled = val_per_class * min(1.0, n_total / reference_size)
    val_targets = {}
    for c in (0, 1):
        groups = [(p, len(by_patient[p])) for p in pids_by_class[c] if p not in test_pids]
        side = sum(n for _, n in groups)
        target = max(1, min(int(round(scaled)), int(math.floor(val_cap_fraction * side))))
        val_targets[c] = target
        if len(groups) > 1:
            picked = _pick_groups(groups, target, rng)
            if not picked:
                # tiny datasets: the smallest patient still beats an empty validation class
                picked = [min(groups, key=lambda g: g[1])[0]]
            val_pids.update(picked)

    for pid, recs in by_patient.items():
        split = "test" if pid in test_pids else "val" if pid in val_pids else "train"
        for e in recs:
            assignment[e.record_id] = split

    manifest = DatasetManifest(sorted(entries, key=lambda e: e.record_id), assignment)
    counts = Counter(assignment.values())
    share = {s: counts.get(s, 0) / n_total for s in SPLITS}
    warnings = []
    if abs(share["test"] - test_ratio) > 0.05:
        warnings.append(f"test share {share['test']:.3f} deviates from {test_ratio} by more than 0.05 "
                        f"(patient granularity)")
    cc = manifest.class_counts
    for s in SPLITS:
        if cc[s]["normal"] == 0 or cc[s]["abnormal"] == 0:
            warnings.append(f"{s} split lacks one class: {cc[s]}")
    for w in warnings:
        log.warning(w)
    manifest.report = {"seed": seed, "achieved_share": share, "val_target_per_class": val_targets,
                       "warnings": warnings}
    return manifest


def ingest_directory(in_dir) -> list:
    """Build manifest entries from a CinC-style directory."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory {in_dir} does not exist")
    ref = in_dir / "REFERENCE.csv"
    wavs = {p.stem: p for p in sorted(in_dir.glob("*.wav"))}
    if not ref.exists():
        if not wavs:
            raise DataError(f"no records found in {in_dir}")
        raise DataError(f"{in_dir} has no REFERENCE.csv")
    rows = load_reference_csv(ref)
    patients_csv = in_dir / "PATIENTS.csv"
    if patients_csv.exists():
        patients = load_patients_csv(patients_csv)
    else:
        patients = {}
        log.info("no PATIENTS.csv in %s; using record-id prefix as patient id", in_dir)
    entries = []
    missing = 0
    for rec, label in rows:
        if rec not in wavs:
            missing += 1
            continue
        entries.append(ManifestEntry(rec, patients.get(rec) or patient_fallback(rec), label, str(wavs[rec])))
    unannotated = len(set(wavs) - {r for r, _ in rows})
    if unannotated:
        log.info("skipped %d unannotated recordings", unannotated)
    if missing:
        log.warning("%d reference rows have no WAV file", missing)
    if not entries:
        raise DataError(f"no records found in {in_dir}")
    return entries


# ---------------------------------------------------------------------------
# synthetic heart sounds
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_normal: int = 174
    n_abnormal: int = 26
    sample_rate_hz: int = EXPECTED_RATE_HZ
    duration_s: tuple = (10.0, 20.0)
    heart_rate_bpm: tuple = (60.0, 100.0)
    normal_jitter: float = 0.03
    abnormal_jitter: float = 0.4
    drop_prob: float = 0.2
    extra_prob: float = 0.2
    noise_sigma: float = 0.05
    records_per_patient: tuple = (2, 5)
    seed: int = 0

    def problems(self) -> list:
        out = []
        if self.n_normal < 0 or self.n_abnormal < 0 or self.n_normal + self.n_abnormal == 0:
            out.append("synthetic n_normal + n_abnormal must be positive")
        for name in ("normal_jitter", "abnormal_jitter", "drop_prob", "extra_prob"):
            if not 0 <= getattr(self, name) <= 1:
                out.append(f"synthetic {name} must lie in [0, 1]")
        if self.duration_s[0] <= 0 or self.duration_s[0] > self.duration_s[1]:
            out.append("synthetic duration_s must be an increasing positive range")
        if self.heart_rate_bpm[0] <= 0 or self.heart_rate_bpm[0] > self.heart_rate_bpm[1]:
            out.append("synthetic heart_rate_bpm must be an increasing positive range")
        if self.noise_sigma < 0:
            out.append("synthetic noise_sigma must be non-negative")
        lo, hi = self.records_per_patient
        if lo < 1 or lo > hi:
            out.append("synthetic records_per_patient must be an increasing range starting at >= 1")
        return out


def _burst(rng, fs, freq_range, dur_s, decay_s):
    t = np.arange(int(dur_s * fs)) / fs
    f = rng.uniform(*freq_range)
    return np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) * np.exp(-t / decay_s) * np.sin(np.pi * t / dur_s)


def beat_onsets(rng, duration_s, rate_bpm, jitter, drop_prob=0.0, extra_prob=0.0) -> np.ndarray:
    """Beat times: base interval scaled by (1 + U(-jitter, jitter)), with dropped/extra beats."""
    base = 60.0 / rate_bpm
    t = rng.uniform(0, base)
    onsets = []
    while t < duration_s:
        interval = base * (1.0 + rng.uniform(-jitter, jitter))
        if rng.random() >= drop_prob:
            onsets.append(t)
        if rng.random() < extra_prob:
            onsets.append(t + interval * rng.uniform(0.35, 0.6))
        t += interval
    return np.array(sorted(o for o in onsets if o < duration_s))


def synth_waveform(rng, spec: SyntheticSpec, abnormal: bool, record_id="", patient_id="") -> tuple:
    fs = spec.sample_rate_hz
    dur = rng.uniform(*spec.duration_s)
    rate = rng.uniform(*spec.heart_rate_bpm)
    if abnormal:
        onsets = beat_onsets(rng, dur, rate, spec.abnormal_jitter, spec.drop_prob, spec.extra_prob)
    else:
        onsets = beat_onsets(rng, dur, rate, spec.normal_jitter)
    n = int(round(dur * fs))
    x = np.zeros(n)
    systole = 0.3 * (60.0 / rate) ** 0.5
    for t0 in onsets:
        for offset, amp, band in ((0.0, 1.0, (60.0, 100.0)), (systole, 0.7, (90.0, 150.0))):
            b = amp * _burst(rng, fs, band, 0.1, 0.03)
            i0 = int((t0 + offset) * fs)
            seg = x[i0:i0 + len(b)]
            seg += b[:len(seg)]
    gain = rng.uniform(0.5, 0.9)
    x = gain * x / max(np.abs(x).max(), 1e-9) + rng.normal(0.0, spec.noise_sigma, n)
    x = np.clip(x, -1.0, 32767 / 32768)
    return Waveform(x, fs, record_id, patient_id), onsets


def synthesize_dataset(spec: SyntheticSpec) -> tuple:
    """Returns (entries, waveforms by record id, beat onsets by record id).

    Each synthetic patient owns 2-5 records of a single class.
    """
    rng = np.random.default_rng(spec.seed)
    entries, waves, onsets = [], {}, {}
    pnum = 0
    for label, count in ((0, spec.n_normal), (1, spec.n_abnormal)):
        made = 0
        while made < count:
            pid = f"p{pnum:04d}"
            pnum += 1
            k = min(int(rng.integers(spec.records_per_patient[0], spec.records_per_patient[1] + 1)),
                    count - made)
            for j in range(k):
                rid = f"{pid}_{j:02d}"
                w, o = synth_waveform(rng, spec, bool(label), rid, pid)
                entries.append(ManifestEntry(rid, pid, label, f"synthetic:{spec.seed}"))
                waves[rid], onsets[rid] = w, o
            made += k
    return entries, waves, onsets


def write_dataset(out_dir, entries: list, waves: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "REFERENCE.csv", "w", newline="") as ref, \
            open(out_dir / "PATIENTS.csv", "w", newline="") as pat:
        rw, pw = csv.writer(ref, lineterminator="\n"), csv.writer(pat, lineterminator="\n")
        for e in sorted(entries, key=lambda e: e.record_id):
            write_wav(out_dir / f"{e.record_id}.wav", waves[e.record_id])
            rw.writerow([e.record_id, "1" if e.label else "-1"])
            pw.writerow([e.record_id, e.patient_id])


def aggregate_recording(clip_probabilities, tau: float, mode: str = "mean") -> tuple:
    """Recording probability (mean, or max for screening) and its label at ``tau``."""
    p = np.asarray(clip_probabilities, dtype=np.float64).reshape(-1)
    if len(p) == 0:
        raise ValueError("cannot aggregate an empty list of clip probabilities")
    if mode == "mean":
        prob = float(p.mean())
    elif mode == "max":
        prob = float(p.max())
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return prob, int(prob >= tau)
