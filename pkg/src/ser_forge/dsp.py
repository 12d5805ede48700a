"""Multi-resolution log-Mel preprocessing for fixed-length speech segments.

Raw signals are segmented to a common duration, analyzed with a strided
windowed FFT under one of eight (window, overlap) settings that all share a
10 ms hop, pooled through a 64-filter mel filterbank, and log-compressed.
Every setting yields the same (601, 64) feature image for a 6 s / 16 kHz
input, which lets differently-resolved versions of one utterance be stacked
as training data.

All functions here are pure; identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, InvalidShapeError

DEFAULT_SAMPLE_RATE = 16_000
SEGMENT_SECONDS = 6.0
N_MELS = 64
MEL_F_MIN_HZ = 0.0
MEL_F_MAX_HZ = 8000.0
LOG_FLOOR_EPS = 1e-6

# (window_ms, overlap_ms) per dataset version id; hop is 10 ms for all rows.
VERSION_TABLE = {
    1: (15.0, 5.0),
    2: (20.0, 10.0),
    3: (25.0, 15.0),
    4: (30.0, 20.0),
    5: (35.0, 25.0),
    6: (40.0, 30.0),
    7: (45.0, 35.0),
    8: (50.0, 40.0),
}

WINDOW_KINDS = ("hamming", "rectangular")


@dataclass(frozen=True, eq=False)
class AudioSignal:
    """A mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1:
            raise InvalidInputError(f"expected a mono 1-D signal, got shape {self.samples.shape}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class DatasetVersion:
    """One (window, overlap) analysis setting; stride = window - overlap."""

    id: int
    window_ms: float
    overlap_ms: float

    def __post_init__(self):
        if not self.overlap_ms < self.window_ms:
            raise InvalidConfigError(
                f"overlap ({self.overlap_ms} ms) must be shorter than window ({self.window_ms} ms)"
            )

    @property
    def stride_ms(self) -> float:
        return self.window_ms - self.overlap_ms

    def window_samples(self, sample_rate: int) -> int:
        exact = self.window_ms * sample_rate / 1000.0
        n = int(round(exact))
        if abs(exact - n) > 1e-9:
            raise InvalidConfigError(
                f"window of {self.window_ms} ms is not a whole number of samples at {sample_rate} Hz"
            )
        return n

    def stride_samples(self, sample_rate: int) -> int:
        exact = self.stride_ms * sample_rate / 1000.0
        n = int(round(exact))
        if abs(exact - n) > 1e-9:
            raise InvalidConfigError(
                f"stride of {self.stride_ms} ms is not a whole number of samples at {sample_rate} Hz"
            )
        return n

    def fft_size(self, sample_rate: int) -> int:
        return _next_pow2(self.window_samples(sample_rate))


def dataset_version(version_id: int) -> DatasetVersion:
    """Look up one of the eight canonical preprocessing settings."""
    if version_id not in VERSION_TABLE:
        raise InvalidConfigError(f"dataset version must be in 1..8, got {version_id}")
    window_ms, overlap_ms = VERSION_TABLE[version_id]
    return DatasetVersion(id=version_id, window_ms=window_ms, overlap_ms=overlap_ms)


@dataclass(frozen=True, eq=False)
class StftFrameSet:
    """Windowed FFT frames: one row per analysis position, one-sided bins."""

    frames: np.ndarray  # complex, (T, fft_size // 2 + 1)
    stride_samples: int
    window_samples: int
    fft_size: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    """Triangular mel-spaced filters evaluated at FFT bin frequencies."""

    weights: np.ndarray  # (n_mels, n_bins), nonnegative
    f_min: float
    f_max: float
    center_freqs_hz: np.ndarray  # (n_mels,), strictly increasing

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class LogMelSpectrogram:
    """Log-compressed mel-pooled power image, time-major (T, n_mels)."""

    data: np.ndarray
    version_id: int = 0  # 0 = untagged, 1..8 = canonical preprocessing setting
    utterance_id: str = ""
    label: int = -1

    def __post_init__(self):
        if self.data.ndim != 2:
            raise InvalidShapeError(f"expected a (T, M) matrix, got shape {self.data.shape}")
        if not (0 <= self.version_id <= 8):
            raise InvalidConfigError(f"version_id must be in 0..8, got {self.version_id}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def segment_signal(signal: AudioSignal, target_seconds: float = SEGMENT_SECONDS) -> AudioSignal:
    """Pad or crop a signal symmetrically to an exact duration.

    Shorter inputs get zeros split evenly between both ends; longer inputs
    lose an equal number of samples from both ends. An odd remainder goes to
    the trailing end in either case.
    """
    if target_seconds <= 0:
        raise InvalidInputError(f"target_seconds must be positive, got {target_seconds}")
    if len(signal) == 0:
        raise InvalidInputError("cannot segment an empty signal")
    if not np.isfinite(signal.samples).all():
        raise InvalidInputError("signal contains non-finite samples")

    target_len = int(round(target_seconds * signal.sample_rate))
    n = len(signal)
    if n == target_len:
        return signal
    if n < target_len:
        pad = target_len - n
        front = pad // 2
        out = np.zeros(target_len, dtype=signal.samples.dtype)
        out[front:front + n] = signal.samples
    else:
        crop = n - target_len
        front = crop // 2
        out = signal.samples[front:front + target_len].copy()
    return AudioSignal(samples=out, sample_rate=signal.sample_rate)


def _window_values(kind: str, length: int) -> np.ndarray:
    if kind == "hamming":
        return np.hamming(length)
    if kind == "rectangular":
        return np.ones(length, dtype=np.float64)
    raise InvalidConfigError(f"unknown window kind {kind!r}; expected one of {WINDOW_KINDS}")


def stft_frames(
    samples: np.ndarray,
    window_samples: int,
    stride_samples: int,
    window_kind: str = "hamming",
    fft_size: int | None = None,
) -> StftFrameSet:
    """Strided windowed FFT of a 1-D signal with centering pads.

    The signal is extended with window/2 zeros at each end, frames are taken
    every `stride_samples`, multiplied by the window function, zero-padded to
    `fft_size` (next power of two >= window by default), and transformed;
    only the one-sided bins 0..fft_size/2 are kept.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if window_samples > n:
        raise InvalidConfigError(
            f"window of {window_samples} samples is longer than the {n}-sample signal"
        )
    if fft_size is None:
        fft_size = _next_pow2(window_samples)
    elif fft_size < window_samples:
        raise InvalidConfigError(
            f"fft_size {fft_size} is smaller than the window ({window_samples} samples)"
        )

    half = window_samples // 2
    padded = np.concatenate([np.zeros(half), samples, np.zeros(window_samples - half)])
    n_frames = (padded.shape[0] - window_samples) // stride_samples + 1
    window = _window_values(window_kind, window_samples)

    starts = np.arange(n_frames) * stride_samples
    frame_matrix = np.lib.stride_tricks.sliding_window_view(padded, window_samples)[starts]
    spectra = np.fft.rfft(frame_matrix * window, n=fft_size, axis=1)
    return StftFrameSet(
        frames=spectra,
        stride_samples=stride_samples,
        window_samples=window_samples,
        fft_size=fft_size,
    )


def stft(signal: AudioSignal, version: DatasetVersion, window_kind: str = "hamming") -> StftFrameSet:
    """Windowed FFT of a signal under one dataset-version setting."""
    sr = signal.sample_rate
    return stft_frames(
        signal.samples,
        window_samples=version.window_samples(sr),
        stride_samples=version.stride_samples(sr),
        window_kind=window_kind,
        fft_size=version.fft_size(sr),
    )


def build_mel_filterbank(
    fft_size: int,
    n_mels: int = N_MELS,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    f_min: float = MEL_F_MIN_HZ,
    f_max: float = MEL_F_MAX_HZ,
) -> MelFilterbank:
    """Build triangular filters with centers equally spaced on the mel scale.

    Filter m rises linearly from center m-1 to center m and falls to center
    m+1, with the first and last edges at f_min and f_max. A filter narrower
    than one FFT bin keeps a single unit weight at the bin nearest its
    center; if two filters would collapse onto the same bin the filterbank
    is unrepresentable at this FFT size and an error is raised.
    """
    if n_mels < 1:
        raise InvalidConfigError(f"n_mels must be >= 1, got {n_mels}")
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise InvalidConfigError(
            f"need 0 <= f_min < f_max <= sample_rate/2, got f_min={f_min}, f_max={f_max}"
        )
    n_bins = fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * (sample_rate / fft_size)
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    centers = hz_points[1:-1]

    weights = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, ctr, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (ctr - lo)
        falling = (hi - bin_freqs) / (hi - ctr)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)

    empty = np.flatnonzero(weights.sum(axis=1) == 0.0)
    if empty.size:
        rescue_bins = np.round(centers[empty] * fft_size / sample_rate).astype(int)
        if np.unique(rescue_bins).size < rescue_bins.size:
            raise InvalidConfigError(
                f"{n_mels} mel filters collide on single FFT bins at fft_size={fft_size}; "
                "reduce n_mels or increase fft_size"
            )
        weights[empty, rescue_bins] = 1.0

    return MelFilterbank(weights=weights, f_min=f_min, f_max=f_max, center_freqs_hz=centers)


@lru_cache(maxsize=32)
def _cached_filterbank(fft_size: int, n_mels: int, sample_rate: int, f_min: float, f_max: float):
    return build_mel_filterbank(fft_size, n_mels, sample_rate, f_min, f_max)


def log_mel(
    frames: StftFrameSet,
    fb: MelFilterbank,
    eps: float = LOG_FLOOR_EPS,
    version_id: int = 0,
    utterance_id: str = "",
    label: int = -1,
) -> LogMelSpectrogram:
    """Mel-pool the frame power spectra and take the natural log.

    data[t][m] = ln(sum_b fb[m][b] * |frames[t][b]|^2 + eps)
    """
    if fb.n_bins != frames.n_bins:
        raise InvalidInputError(
            f"filterbank has {fb.n_bins} bins but frames have {frames.n_bins}"
        )
    power = np.abs(frames.frames) ** 2
    data = np.log(power @ fb.weights.T + eps)
    return LogMelSpectrogram(
        data=data, version_id=version_id, utterance_id=utterance_id, label=label
    )


def preprocess_version(
    signal: AudioSignal,
    version: DatasetVersion | int,
    window_kind: str = "hamming",
    utterance_id: str = "",
    label: int = -1,
) -> LogMelSpectrogram:
    """Segment to 6 s, run the versioned STFT, and mel-log-compress.

    Output is float32 and shaped (601, 64) for any input at 16 kHz,
    regardless of the version's window length.
    """
    if isinstance(version, int):
        version = dataset_version(version)
    segmented = segment_signal(signal, SEGMENT_SECONDS)
    frames = stft(segmented, version, window_kind=window_kind)
    fb = _cached_filterbank(
        frames.fft_size, N_MELS, signal.sample_rate, MEL_F_MIN_HZ, MEL_F_MAX_HZ
    )
    spec = log_mel(frames, fb, version_id=version.id, utterance_id=utterance_id, label=label)
    return LogMelSpectrogram(
        data=spec.data.astype(np.float32),
        version_id=version.id,
        utterance_id=utterance_id,
        label=label,
    )
