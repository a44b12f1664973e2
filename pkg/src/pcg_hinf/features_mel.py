"""Log-Mel spectrogram features and the spectrogram cache file format."""

from __future__ import annotations

import functools
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .signal_dsp import SignalError, Waveform


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 512
    hop: int = 256
    n_mels: int = 64
    fmin_hz: float = 20.0
    fmax_hz: float = 1000.0
    floor_epsilon: float = 1e-10
    normalize: bool = True
    window: str = "hann"

    def validate(self, sample_rate_hz: int):
        problems = []
        if self.n_fft <= 0 or self.hop <= 0 or self.n_mels <= 0:
            problems.append("n_fft, hop and n_mels must be positive")
        if self.hop > self.n_fft:
            problems.append(f"hop ({self.hop}) exceeds n_fft ({self.n_fft})")
        if not 0 <= self.fmin_hz < self.fmax_hz <= sample_rate_hz / 2:
            problems.append(
                f"need 0 <= fmin < fmax <= {sample_rate_hz / 2}, "
                f"got fmin={self.fmin_hz}, fmax={self.fmax_hz}")
        if self.window != "hann":
            problems.append(f"unsupported window {self.window!r}")
        if problems:
            raise SignalError("; ".join(problems))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames) float32
    config_fingerprint: str
    source_id: str = ""
    patient_id: str = ""
    label: int | None = None

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def n_frames_for(length: int, cfg: MelConfig) -> int:
    return 1 + (length - cfg.n_fft) // cfg.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(n: int) -> np.ndarray:
    # periodic form, the usual choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(clip: Waveform, cfg: MelConfig) -> np.ndarray:
    """Hann-windowed power spectra, no centering. Shape (n_fft//2+1, n_frames)."""
    x = clip.samples
    if len(x) < cfg.n_fft:
        raise SignalError(f"clip of {len(x)} samples is shorter than n_fft={cfg.n_fft}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::cfg.hop]
    spec = np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def _filterbank(cfg: MelConfig, sample_rate_hz: int) -> np.ndarray:
    cfg.validate(sample_rate_hz)
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate_hz / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1)
    empty = np.flatnonzero(sums <= 0)
    if len(empty):
        raise SignalError(
            f"{len(empty)} mel filters contain no FFT bin (first: filter {empty[0]}); "
            f"reduce n_mels ({cfg.n_mels}) or increase n_fft ({cfg.n_fft})")
    fb /= sums[:, None]
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=16)
def _cached_filterbank(cfg: MelConfig, sample_rate_hz: int) -> np.ndarray:
    return _filterbank(cfg, sample_rate_hz)


def mel_filterbank(cfg: MelConfig, sample_rate_hz: int = 2000) -> np.ndarray:
    """Triangular mel filters, each row summing to 1. Shape (n_mels, n_fft//2+1).

    The returned array is shared between callers and marked read-only.
    """
    return _cached_filterbank(cfg, sample_rate_hz)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(mels[1:-1])


def log_mel(clip: Waveform, cfg: MelConfig = MelConfig(), label: int | None = None) -> MelSpectrogram:
    power = stft_power(clip, cfg)
    mel = mel_filterbank(cfg, clip.sample_rate_hz) @ power
    values = np.log(np.maximum(mel, cfg.floor_epsilon))
    if cfg.normalize:
        std = values.std()
        # a constant grid has a rounding-level std, not an exact zero
        if std > 1e-9 * max(1.0, abs(values.mean())):
            values = (values - values.mean()) / std
        else:
            values = np.zeros_like(values)
    return MelSpectrogram(values.astype(np.float32), cfg.fingerprint(),
                          clip.source_id, clip.patient_id, label)


# ---------------------------------------------------------------------------
# Cache files: one JSON header line, then row-major float32 payload.
# ---------------------------------------------------------------------------

def write_spectrogram(path, spec: MelSpectrogram):
    header = {
        "n_mels": spec.n_mels,
        "n_frames": spec.n_frames,
        "config_fingerprint": spec.config_fingerprint,
        "source_id": spec.source_id,
        "patient_id": spec.patient_id,
        "label": spec.label,
    }
    path = Path(path)
    payload = np.ascontiguousarray(spec.values, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_spectrogram(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    shape = (header["n_mels"], header["n_frames"])
    expected = shape[0] * shape[1] * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return MelSpectrogram(values, header["config_fingerprint"], header["source_id"],
                          header["patient_id"], header["label"])


def cached_log_mel(cache_dir, clip: Waveform, cfg: MelConfig, key: str,
                   label: int | None = None) -> MelSpectrogram:
    """Return the cached spectrogram for ``key`` if its fingerprint matches, else recompute."""
    path = Path(cache_dir) / f"{key}.mel"
    if path.exists():
        spec = read_spectrogram(path)
        if spec.config_fingerprint == cfg.fingerprint():
            return spec
    spec = log_mel(clip, cfg, label)
    write_spectrogram(path, spec)
    return spec
