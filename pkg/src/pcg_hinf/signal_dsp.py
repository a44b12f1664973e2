"""Heart-sound denoising: db4 wavelet shrinkage, Butterworth low-pass, clipping.

The preprocessing chain is ``wavelet_denoise -> apply_iir_zero_phase ->
segment_fixed``, applied to whole recordings before segmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import sosfilt

# Daubechies-4 (8-tap) scaling filter, normalised so that sum(h) == sqrt(2).
DB4_REC_LO = np.array([
    0.2303778133088965,
    0.7148465705529157,
    0.6308807679298589,
    -0.027983769416859854,
    -0.18703481171909309,
    0.030841381835560764,
    0.0328830116668852,
    -0.010597401785069032,
])
DB4_DEC_LO = DB4_REC_LO[::-1].copy()
DB4_DEC_HI = np.array([(-1) ** (k + 1) * DB4_REC_LO[k] for k in range(8)])
DB4_REC_HI = DB4_DEC_HI[::-1].copy()
FILTER_LEN = len(DB4_REC_LO)

MAD_TO_SIGMA = 0.6745


class SignalError(ValueError):
    """Raised when a waveform cannot be processed as requested."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise SignalError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError(f"waveform {self.source_id!r} contains NaN or Inf samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def with_samples(self, samples) -> "Waveform":
        return replace(self, samples=samples)


@dataclass
class WaveletDecomposition:
    approx_coeffs: np.ndarray
    detail_coeffs: list  # finest level first
    levels: int
    wavelet_name: str = "db4"


@dataclass
class IirFilterSpec:
    order: int
    cutoff_hz: float
    sample_rate_hz: int
    sos: np.ndarray = field(repr=False)  # (n_sections, 6): b0 b1 b2 a0 a1 a2
    kind: str = "lowpass"
    design: str = "butterworth"


def _require_nonempty(signal: Waveform):
    if len(signal) == 0:
        raise SignalError(f"waveform {signal.source_id!r} is empty")


# ---------------------------------------------------------------------------
# Discrete wavelet transform
# ---------------------------------------------------------------------------

def max_dwt_level(n: int) -> int:
    """floor(log2(n / 8)), but one level is always allowed once n >= 8."""
    if n < FILTER_LEN:
        return 0
    return max(1, int(math.floor(math.log2(n / FILTER_LEN))))


def _symmetric_extend(x: np.ndarray, pad: int) -> np.ndarray:
    # half-sample symmetric: x[-1] = x[0], x[N] = x[N-1]; may wrap for short x
    n = len(x)
    idx = np.arange(-pad, n + pad)
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    return x[idx]


def _analysis_step(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(x)
    pad = FILTER_LEN - 1
    ext = _symmetric_extend(x, pad)
    n_out = (n + FILTER_LEN - 1) // 2
    # out[k] = sum_j f[j] * x[2k + 1 - j]; ext[i + pad] == x[i]
    lo = np.convolve(ext, DB4_DEC_LO, mode="full")
    hi = np.convolve(ext, DB4_DEC_HI, mode="full")
    pos = 2 * np.arange(n_out) + 1 + pad
    return lo[pos], hi[pos]


def _synthesis_step(approx: np.ndarray, detail: np.ndarray) -> np.ndarray:
    if len(approx) != len(detail):
        raise SignalError(
            f"coefficient length mismatch: approx {len(approx)} vs detail {len(detail)}")
    n = len(approx)
    up_a = np.zeros(2 * n)
    up_d = np.zeros(2 * n)
    up_a[::2] = approx
    up_d[::2] = detail
    full = np.convolve(up_a, DB4_REC_LO) + np.convolve(up_d, DB4_REC_HI)
    start = FILTER_LEN - 2
    return full[start:start + 2 * n - FILTER_LEN + 2]


def dwt_decompose(signal: Waveform, levels: int = 4) -> WaveletDecomposition:
    """Multilevel db4 analysis with symmetric boundary extension."""
    _require_nonempty(signal)
    n = len(signal)
    max_level = max_dwt_level(n)
    if levels < 1 or levels > max_level:
        raise SignalError(
            f"cannot decompose {n} samples into {levels} db4 levels; "
            f"max feasible level is {max_level}")
    approx = signal.samples
    details = []
    for _ in range(levels):
        approx, detail = _analysis_step(approx)
        details.append(detail)
    return WaveletDecomposition(approx_coeffs=approx, detail_coeffs=details, levels=levels)


def idwt_reconstruct(decomp: WaveletDecomposition, original_length: int,
                     sample_rate_hz: int = 2000) -> Waveform:
    if len(decomp.detail_coeffs) != decomp.levels:
        raise SignalError(
            f"decomposition declares {decomp.levels} levels but carries "
            f"{len(decomp.detail_coeffs)} detail arrays")
    approx = np.asarray(decomp.approx_coeffs, dtype=np.float64)
    for detail in reversed(decomp.detail_coeffs):
        detail = np.asarray(detail, dtype=np.float64)
        # odd-length levels produce one extra trailing sample
        if len(approx) == len(detail) + 1:
            approx = approx[:-1]
        approx = _synthesis_step(approx, detail)
    if len(approx) < original_length:
        raise SignalError(
            f"coefficients reconstruct {len(approx)} samples, fewer than "
            f"requested {original_length}")
    return Waveform(approx[:original_length], sample_rate_hz)


def soft_threshold(coeffs: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(coeffs) * np.maximum(np.abs(coeffs) - threshold, 0.0)


def hard_threshold(coeffs: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(np.abs(coeffs) > threshold, coeffs, 0.0)


SHRINKAGE = {"hard": hard_threshold, "soft": soft_threshold}


def universal_threshold(finest_detail: np.ndarray, n: int) -> float:
    sigma = np.median(np.abs(finest_detail)) / MAD_TO_SIGMA
    return float(sigma * math.sqrt(2.0 * math.log(n)))


def wavelet_denoise(signal: Waveform, levels: int = 4, mode: str = "hard") -> Waveform:
    """Shrink every detail band at the universal threshold sigma*sqrt(2 ln N).

    The noise level sigma is estimated from the median absolute deviation of
    the finest detail band; the approximation band is left untouched.
    ``mode`` picks hard (default) or soft shrinkage. Soft shrinkage biases
    every surviving coefficient by the threshold, which on tonal content in
    the coarse bands costs more than the noise it removes.
    """
    if mode not in SHRINKAGE:
        raise SignalError(f"unknown shrinkage mode {mode!r}; expected one of {sorted(SHRINKAGE)}")
    decomp = dwt_decompose(signal, levels)
    lam = universal_threshold(decomp.detail_coeffs[0], len(signal))
    decomp.detail_coeffs = [SHRINKAGE[mode](d, lam) for d in decomp.detail_coeffs]
    out = idwt_reconstruct(decomp, len(signal), signal.sample_rate_hz)
    return signal.with_samples(out.samples)


# ---------------------------------------------------------------------------
# Butterworth low-pass
# ---------------------------------------------------------------------------

def design_butterworth_lowpass(order: int = 5, cutoff_hz: float = 500.0,
                               sample_rate_hz: int = 2000) -> IirFilterSpec:
    """Digital Butterworth low-pass as second-order sections.

    Analog prototype poles are mapped through a frequency-prewarped bilinear
    transform; each section is normalised to unit DC gain, so the cascade
    has DC gain exactly 1.
    """
    if order < 1:
        raise SignalError(f"filter order must be positive, got {order}")
    nyquist = sample_rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise SignalError(
            f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist} Hz)")

    fs2 = 2.0 * sample_rate_hz
    warped = fs2 * math.tan(math.pi * cutoff_hz / sample_rate_hz)
    k = np.arange(1, order + 1)
    analog = warped * np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    digital = (fs2 + analog) / (fs2 - analog)

    sections = []
    upper = sorted((p for p in digital if p.imag > 1e-12), key=lambda p: -abs(p))
    for p in upper:
        a = np.array([1.0, -2.0 * p.real, abs(p) ** 2])
        b = np.array([1.0, 2.0, 1.0])
        b *= a.sum() / b.sum()
        sections.append(np.concatenate([b, a]))
    for p in digital:
        if abs(p.imag) <= 1e-12:
            a = np.array([1.0, -p.real, 0.0])
            b = np.array([1.0, 1.0, 0.0])
            b *= a.sum() / b.sum()
            sections.append(np.concatenate([b, a]))

    return IirFilterSpec(order=order, cutoff_hz=float(cutoff_hz),
                         sample_rate_hz=int(sample_rate_hz), sos=np.array(sections))


def sos_frequency_response(sos: np.ndarray, freqs_hz, sample_rate_hz: int) -> np.ndarray:
    """Complex response of a section cascade at the given frequencies."""
    w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / sample_rate_hz
    zinv = np.exp(-1j * w)
    h = np.ones_like(zinv)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * zinv + b2 * zinv ** 2) / (a0 + a1 * zinv + a2 * zinv ** 2)
    return h


def sos_poles(sos: np.ndarray) -> np.ndarray:
    poles = []
    for _, _, _, a0, a1, a2 in sos:
        poles.extend(np.roots([a0, a1, a2]) if a2 != 0 else np.roots([a0, a1]))
    return np.array(poles)


def _steady_state(sos: np.ndarray) -> np.ndarray:
    # transposed direct-form II state for a unit-step input held forever
    zi = np.zeros((len(sos), 2))
    gain_in = 1.0
    for s, (b0, b1, b2, a0, a1, a2) in enumerate(sos):
        gain_out = gain_in * (b0 + b1 + b2) / (a0 + a1 + a2)
        z2 = b2 * gain_in - a2 * gain_out
        zi[s] = (b1 * gain_in - a1 * gain_out + z2, z2)
        gain_in = gain_out
    return zi


def _filter_once(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    zi = _steady_state(sos) * x[0]
    y, _ = sosfilt(sos, x, zi=zi)
    return y


def apply_iir_zero_phase(signal: Waveform, spec: IirFilterSpec) -> Waveform:
    """Forward-backward filtering with odd-reflection edge padding."""
    pad = 3 * spec.order
    n = len(signal)
    if n <= pad:
        raise SignalError(
            f"signal of {n} samples too short for zero-phase filtering "
            f"(needs more than {pad})")
    x = signal.samples
    head = 2 * x[0] - x[pad:0:-1]
    tail = 2 * x[-1] - x[-2:-pad - 2:-1]
    ext = np.concatenate([head, x, tail])
    y = _filter_once(spec.sos, ext)
    y = _filter_once(spec.sos, y[::-1])[::-1]
    return signal.with_samples(y[pad:pad + n])


# ---------------------------------------------------------------------------
# Segmentation and spectra
# ---------------------------------------------------------------------------

def segment_fixed(signal: Waveform, clip_seconds: float = 5.0) -> list:
    """Cut into consecutive non-overlapping clips; remainder is dropped.

    A recording shorter than one clip is zero-padded to a single clip so that
    no recording vanishes from the dataset.
    """
    if clip_seconds <= 0:
        raise SignalError(f"clip_seconds must be positive, got {clip_seconds}")
    _require_nonempty(signal)
    clip_len = int(round(clip_seconds * signal.sample_rate_hz))
    n = len(signal)
    if n < clip_len:
        padded = np.zeros(clip_len)
        padded[:n] = signal.samples
        return [signal.with_samples(padded)]
    return [signal.with_samples(signal.samples[i * clip_len:(i + 1) * clip_len].copy())
            for i in range(n // clip_len)]


def fft_magnitude(signal: Waveform) -> tuple[np.ndarray, np.ndarray]:
    """One-sided magnitude spectrum, unnormalised, on bins k*fs/N."""
    _require_nonempty(signal)
    n = len(signal)
    mags = np.abs(np.fft.rfft(signal.samples))
    freqs = np.arange(len(mags)) * signal.sample_rate_hz / n
    return freqs, mags


def one_sided_energy(mags: np.ndarray, n: int) -> float:
    """Time-domain energy implied by a one-sided spectrum (Parseval)."""
    power = mags ** 2
    total = power[0] + 2 * power[1:].sum()
    if n % 2 == 0:
        total -= power[-1]
    return float(total / n)


def preprocess_recording(signal: Waveform, levels: int = 4, order: int = 5,
                         cutoff_hz: float = 500.0, clip_seconds: float = 5.0,
                         shrinkage: str = "hard"):
    """Denoise -> low-pass -> segment. Returns (denoised, filtered, clips)."""
    denoised = wavelet_denoise(signal, levels, shrinkage)
    spec = design_butterworth_lowpass(order, cutoff_hz, signal.sample_rate_hz)
    filtered = apply_iir_zero_phase(denoised, spec)
    return denoised, filtered, segment_fixed(filtered, clip_seconds)
