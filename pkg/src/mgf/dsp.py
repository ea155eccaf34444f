"""Signal-processing kernels: framing, LPS, mel filterbank, MFCC and SI-SDR.

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from mgf.errors import ValidationError

SAMPLE_RATE = 16000
HOP = 160  # 10 ms at 16 kHz
EPS_LOG = 1e-10
EPS_SDR = 1e-12
SDR_CLAMP = 100.0
N_MELS = 40
N_CEPS = 13
SHORT_CONTEXT = 400  # 25 ms
LONG_CONTEXT = 6400  # 400 ms


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if s.size < 1:
            raise ValidationError("empty waveform")
        if not np.isfinite(s).all():
            raise ValidationError("waveform has non-finite samples")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class FrameGrid:
    frames: np.ndarray  # [n_frames, frame_len]
    hop: int
    frame_len: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


class FeatureKind(str, Enum):
    LPS = "LPS"
    MFCC = "MFCC"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray  # [n_frames, n_dims]
    feature_kind: FeatureKind
    context_window_ms: int = 25

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]


def _samples(wave) -> np.ndarray:
    return wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)


def frame_count(length: int, frame_len: int, hop: int) -> int:
    return (length - frame_len) // hop + 1


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(wave: Waveform | np.ndarray, frame_len: int, hop: int = HOP) -> FrameGrid:
    """Slice ``wave`` into Hann-windowed frames ``[i*hop, i*hop + frame_len)``."""
    if frame_len < 1 or hop < 1:
        raise ValidationError("frame_len and hop must be >= 1")
    x = _samples(wave)
    if x.size < frame_len:
        raise ValidationError(f"input too short: {x.size} samples < frame_len {frame_len}")
    n = frame_count(x.size, frame_len, hop)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    frames = x[idx] * hann(frame_len)
    return FrameGrid(frames=frames, hop=hop, frame_len=frame_len)


def centered_frames(wave: Waveform | np.ndarray, frame_len: int, hop: int = HOP) -> FrameGrid:
    """Frames aligned to the encoder grid: frame ``i`` is centred on sample ``i*hop + hop/2``.

    The signal is zero-padded by ``(frame_len - hop) / 2`` on each side so a
    signal of ``n*hop`` samples yields exactly ``n`` frames.
    """
    x = _samples(wave)
    left = (frame_len - hop) // 2
    right = frame_len - hop - left
    return frame_signal(np.pad(x, (left, right)), frame_len, hop)


def power_spectrum(grid: FrameGrid, fft_size: int) -> np.ndarray:
    if fft_size < grid.frame_len:
        raise ValidationError(f"fft too small: {fft_size} < frame_len {grid.frame_len}")
    if fft_size & (fft_size - 1):
        raise ValidationError(f"fft_size must be a power of two, got {fft_size}")
    spec = np.fft.rfft(grid.frames, n=fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_power_spectrum(grid: FrameGrid, fft_size: int = 512) -> FeatureMatrix:
    """``log(|DFT|^2 + 1e-10)`` over the first ``fft_size/2 + 1`` bins of each frame."""
    values = np.log(power_spectrum(grid, fft_size) + EPS_LOG)
    return FeatureMatrix(values, FeatureKind.LPS, round(1000 * grid.frame_len / SAMPLE_RATE))


def dft_power_bruteforce(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """O(N^2) direct DFT power, used as an oracle for the FFT path."""
    n = np.arange(frame.size)
    k = np.arange(fft_size // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * n / fft_size)
    spec = basis @ frame
    return np.abs(spec) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(n_mels: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Centre frequencies in Hz of the ``n_mels`` triangular filters."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = N_MELS, fft_size: int = 512, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filters, shape ``[n_mels, fft_size/2 + 1]``.

    Filters are evaluated on the continuous frequency axis, so narrow low
    filters still get weight on their nearest bins and no row is empty.
    """
    if n_mels < 2:
        raise ValidationError("n_mels must be >= 2")
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    # guarantee a nonzero row when a filter falls between two bins
    empty = fb.sum(axis=1) == 0
    for r in np.flatnonzero(empty):
        fb[r, int(np.argmin(np.abs(freqs - mid[r, 0])))] = 1.0
    return fb


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``k`` is the k-th cosine."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def dct_ortho(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II along the last axis."""
    return x @ dct_matrix(x.shape[-1]).T


def mfcc(grid: FrameGrid, n_mels: int = N_MELS, n_ceps: int = N_CEPS, fft_size: int | None = None) -> FeatureMatrix:
    if n_ceps > n_mels:
        raise ValidationError(f"n_ceps ({n_ceps}) > n_mels ({n_mels})")
    fft_size = fft_size or next_pow2(grid.frame_len)
    power = power_spectrum(grid, fft_size)
    fb = mel_filterbank(n_mels, fft_size)
    logmel = np.log(power @ fb.T + EPS_LOG)
    values = dct_ortho(logmel)[:, :n_ceps]
    return FeatureMatrix(values, FeatureKind.MFCC, round(1000 * grid.frame_len / SAMPLE_RATE))


def next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def band_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix mapping ``n_in`` rfft bins onto ``n_out`` evenly spaced bins."""
    centers = np.linspace(0, n_in - 1, n_out)
    width = (n_in - 1) / (n_out - 1)
    pos = np.arange(n_in)
    m = (np.abs(pos[None, :] - centers[:, None]) <= width / 2).astype(np.float64)
    return m / m.sum(axis=1, keepdims=True)


FEATURE_KINDS = ("LPS-25", "LPS-400", "MFCC-25", "MFCC-400")
LPS_FFT = 512


def feature_dim(kind: str, n_ceps: int = N_CEPS) -> int:
    if kind.startswith("LPS"):
        return LPS_FFT // 2 + 1
    if kind.startswith("MFCC"):
        return n_ceps
    raise ValidationError(f"unknown feature kind {kind!r}")


def frame_features(wave: Waveform | np.ndarray, kind: str, n_mels: int = N_MELS, n_ceps: int = N_CEPS) -> np.ndarray:
    """Per-frame targets on the 10 ms encoder grid for one of :data:`FEATURE_KINDS`.

    The 400 ms LPS is computed with a 8192-point FFT and band-averaged in the
    power domain down to the 257 bins of the 25 ms LPS.
    """
    if kind not in FEATURE_KINDS:
        raise ValidationError(f"unknown feature kind {kind!r}")
    frame_len = SHORT_CONTEXT if kind.endswith("-25") else LONG_CONTEXT
    grid = centered_frames(wave, frame_len)
    if kind.startswith("MFCC"):
        return mfcc(grid, n_mels, n_ceps).values
    if frame_len == SHORT_CONTEXT:
        return log_power_spectrum(grid, LPS_FFT).values
    fft = next_pow2(frame_len)
    power = power_spectrum(grid, fft) @ band_pool_matrix(fft // 2 + 1, LPS_FFT // 2 + 1).T
    return np.log(power + EPS_LOG)


def si_sdr(reference: Waveform | np.ndarray, estimate: Waveform | np.ndarray) -> float:
    """Scale-invariant SDR in dB, clamped to [-100, 100].

    The distortion energy is floored at 1e-12 so exact reconstruction is finite.
    """
    x = _samples(reference)
    xb = _samples(estimate)
    if x.shape != xb.shape:
        raise ValidationError(f"length mismatch: {x.size} vs {xb.size}")
    energy = float(x @ x)
    if energy == 0.0:
        raise ValidationError("degenerate reference: all-zero signal")
    alpha = float(xb @ x) / energy
    target = alpha * x
    distortion = target - xb
    num = float(target @ target)
    den = max(float(distortion @ distortion), EPS_SDR)
    if num == 0.0:
        return -SDR_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -SDR_CLAMP, SDR_CLAMP))


def si_sdr_alpha(reference, estimate) -> float:
    x = _samples(reference)
    return float(_samples(estimate) @ x) / float(x @ x)
