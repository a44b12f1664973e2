"""Record-level preprocessing into model-ready clip spectrograms."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_io import ManifestEntry, load_wav
from .features_mel import MelConfig, cached_log_mel, log_mel
from .signal_dsp import preprocess_recording

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DspConfig:
    dwt_levels: int = 4
    filter_order: int = 5
    cutoff_hz: float = 500.0
    clip_seconds: float = 5.0
    shrinkage: str = "hard"

    def problems(self) -> list:
        out = []
        if self.dwt_levels < 1:
            out.append("dsp.dwt_levels must be >= 1")
        if self.filter_order < 1:
            out.append("dsp.filter_order must be >= 1")
        if self.cutoff_hz <= 0:
            out.append("dsp.cutoff_hz must be positive")
        if self.clip_seconds <= 0:
            out.append("dsp.clip_seconds must be positive")
        if self.shrinkage not in ("hard", "soft"):
            out.append(f"dsp.shrinkage must be 'hard' or 'soft', got {self.shrinkage!r}")
        return out

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:8]


@dataclass
class ClipSet:
    X: np.ndarray  # (N, n_mels, n_frames) float32
    y: np.ndarray  # (N,) int
    record_ids: list
    patient_ids: list

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx, dtype=int)
        return ClipSet(self.X[idx], self.y[idx], [self.record_ids[i] for i in idx],
                       [self.patient_ids[i] for i in idx])

    @property
    def record_labels(self) -> dict:
        return {r: int(l) for r, l in zip(self.record_ids, self.y)}


def record_clips(entry: ManifestEntry, waveform, dsp: DspConfig, mel: MelConfig,
                 cache_dir=None) -> list:
    wave = waveform if waveform is not None else load_wav(entry.source)
    wave.source_id, wave.patient_id = entry.record_id, entry.patient_id
    _, _, clips = preprocess_recording(wave, dsp.dwt_levels, dsp.filter_order,
                                       dsp.cutoff_hz, dsp.clip_seconds, dsp.shrinkage)
    specs = []
    for k, clip in enumerate(clips):
        if cache_dir is not None:
            specs.append(cached_log_mel(cache_dir, clip, mel,
                                        f"{entry.record_id}_{k:03d}_{dsp.digest()}", entry.label))
        else:
            specs.append(log_mel(clip, mel, entry.label))
    return specs


def build_clipset(entries: list, mel: MelConfig, dsp: DspConfig = DspConfig(), waveforms=None,
                  cache_dir=None, threads: int = 1) -> ClipSet:
    """Preprocess every record; clips keep the record order of ``entries``."""
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    waveforms = waveforms or {}

    def one(e):
        return record_clips(e, waveforms.get(e.record_id), dsp, mel, cache_dir)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_record = list(pool.map(one, entries))
    else:
        per_record = [one(e) for e in entries]

    X, y, recs, pats = [], [], [], []
    for e, specs in zip(entries, per_record):
        for s in specs:
            X.append(s.values)
            y.append(e.label)
            recs.append(e.record_id)
            pats.append(e.patient_id)
    if not X:
        return ClipSet(np.zeros((0, mel.n_mels, 0), np.float32), np.zeros(0, int), [], [])
    return ClipSet(np.stack(X).astype(np.float32), np.array(y, dtype=int), recs, pats)
