"""Log-mel front end: WAV loading, framing, mel filterbank, context stacking
and per-dimension normalization.

Power spectra are unscaled ``|rfft|**2``, so for a windowed frame ``x``
zero-padded to ``fft_size`` the two-sided spectral energy equals
``fft_size * sum(x**2)`` (see :func:`two_sided_energy`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE_HZ = 16000
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
NUM_MEL = 40
CONTEXT = 11

FEATURE_MAGIC = b"HACF"
FEATURE_VERSION = 1


class FeatureError(ValueError):
    """Bad audio input or inconsistent feature data."""


class Window(str, Enum):
    HAMMING = "hamming"
    HANN = "hann"
    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class PcmSignal:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise FeatureError("PCM signal must be one-dimensional (mono)")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise FeatureError(
                f"sample rate must be {SAMPLE_RATE_HZ} Hz, got {self.sample_rate_hz}"
            )
        if not np.all(np.isfinite(samples)):
            raise FeatureError("PCM signal contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class FramingConfig:
    """40 ms frames with 50% hop at 16 kHz, Hamming window, 1024-point FFT."""

    frame_length_samples: int = 640
    hop_samples: int = 320
    window: Window = Window.HAMMING
    fft_size: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "window", Window(self.window))
        if not 0 < self.hop_samples <= self.frame_length_samples <= self.fft_size:
            raise FeatureError(
                "need 0 < hop_samples <= frame_length_samples <= fft_size, got "
                f"{self.hop_samples}, {self.frame_length_samples}, {self.fft_size}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_values(self) -> np.ndarray:
        n = self.frame_length_samples
        if self.window is Window.RECTANGULAR:
            return np.ones(n)
        # periodic=False: symmetric windows, as used for analysis frames
        from scipy.signal import get_window

        return get_window(self.window.value, n, fftbins=False)


@dataclass(frozen=True)
class MelFilterBank:
    filters: np.ndarray
    center_freqs_hz: np.ndarray
    min_freq_hz: float = 0.0
    max_freq_hz: float = SAMPLE_RATE_HZ / 2

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]


@dataclass(frozen=True)
class MelFeatureSequence:
    frames: np.ndarray
    segment_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise FeatureError("feature sequence must be a T x dim matrix")
        if not np.all(np.isfinite(frames)):
            raise FeatureError("feature sequence contains non-finite values")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class ContextFeatureSequence:
    vectors: np.ndarray
    center_indices: np.ndarray
    segment_id: str = ""

    def __len__(self):
        return self.vectors.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    stddev: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.stddev, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise FeatureError("mean and stddev must be vectors of equal length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", np.maximum(std, STD_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def load_wav(path) -> PcmSignal:
    """Read a 16 kHz RIFF/WAVE file (16-bit PCM or 32-bit float) as mono.

    Stereo channels are averaged. Files at any other rate are rejected;
    there is no resampling.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError, struct.error) as exc:
        raise FeatureError(f"{path}: malformed WAV file ({exc})") from exc
    if rate != SAMPLE_RATE_HZ:
        raise FeatureError(f"{path}: unsupported sample rate {rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FeatureError(f"{path}: unsupported encoding {data.dtype}")
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise FeatureError(f"{path}: {samples.shape[1]} channels, expected 1 or 2")
        samples = samples.mean(axis=1)
    return PcmSignal(samples, rate)


def frame_count(length: int, frame_length: int, hop: int) -> int:
    return (length - frame_length) // hop + 1


def frame_signal(signal: PcmSignal, cfg: FramingConfig = FramingConfig()) -> np.ndarray:
    """Slice the signal into windowed frames, shape (n_frames, frame_length)."""
    n = len(signal)
    if n < cfg.frame_length_samples:
        raise FeatureError(
            f"signal has {n} samples, shorter than one frame "
            f"({cfg.frame_length_samples})"
        )
    frames = np.lib.stride_tricks.sliding_window_view(
        signal.samples, cfg.frame_length_samples
    )[:: cfg.hop_samples]
    return frames * cfg.window_values()


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """One-sided ``|rfft|**2`` of each frame, zero-padded to ``fft_size``."""
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return spec.real**2 + spec.imag**2


def two_sided_energy(power: np.ndarray, fft_size: int) -> np.ndarray:
    """Energy over all ``fft_size`` bins from a one-sided power spectrum."""
    if fft_size % 2:
        return power[..., 0] + 2.0 * power[..., 1:].sum(axis=-1)
    return power[..., 0] + power[..., -1] + 2.0 * power[..., 1:-1].sum(axis=-1)


def build_mel_filterbank(
    cfg: FramingConfig = FramingConfig(),
    num_filters: int = NUM_MEL,
    min_freq_hz: float = 0.0,
    max_freq_hz: float = SAMPLE_RATE_HZ / 2,
) -> MelFilterBank:
    """Triangular filters equally spaced on the mel scale, peak height 1.

    Filter edges live on the continuous frequency axis, so narrow low
    filters still get weight on at least the nearest FFT bin.
    """
    if num_filters < 1:
        raise FeatureError("num_filters must be >= 1")
    nyquist = SAMPLE_RATE_HZ / 2
    if not 0 <= min_freq_hz < max_freq_hz <= nyquist:
        raise FeatureError(
            f"invalid frequency range [{min_freq_hz}, {max_freq_hz}] "
            f"(must satisfy 0 <= min < max <= {nyquist})"
        )
    edges_hz = mel_to_hz(
        np.linspace(hz_to_mel(min_freq_hz), hz_to_mel(max_freq_hz), num_filters + 2)
    )
    edges_hz[0], edges_hz[-1] = min_freq_hz, max_freq_hz
    bin_hz = np.arange(cfg.num_bins) * SAMPLE_RATE_HZ / cfg.fft_size
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    filters = np.maximum(0.0, np.minimum(rising, falling))

    for i, row in enumerate(filters):
        if row.max() <= 0.0:
            # filter narrower than the bin spacing: put its peak on the nearest bin
            row[np.argmin(np.abs(bin_hz - center[i, 0]))] = 1.0
    filters /= filters.max(axis=1, keepdims=True)
    filters.setflags(write=False)
    return MelFilterBank(filters, edges_hz[1:-1].copy(), float(min_freq_hz), float(max_freq_hz))


def extract_log_mel(
    signal: PcmSignal,
    cfg: FramingConfig = FramingConfig(),
    fb: MelFilterBank | None = None,
    segment_id: str = "",
) -> MelFeatureSequence:
    if fb is None:
        fb = build_mel_filterbank(cfg)
    if fb.filters.shape[1] != cfg.num_bins:
        raise FeatureError(
            f"filterbank has {fb.filters.shape[1]} bins, framing needs {cfg.num_bins}"
        )
    power = power_spectrum(frame_signal(signal, cfg), cfg.fft_size)
    energies = power @ fb.filters.T
    return MelFeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)), segment_id)


def stack_context(features: MelFeatureSequence, context: int = CONTEXT) -> ContextFeatureSequence:
    """Concatenate each frame with its neighbours, clamping at the edges.

    Output row ``t`` is frames ``t-k .. t+k`` (``k = context // 2``) laid out
    in time order, so the sequence length is unchanged.
    """
    if context < 1 or context % 2 == 0:
        raise FeatureError(f"context must be a positive odd integer, got {context}")
    frames = features.frames
    T = frames.shape[0]
    if T == 0:
        raise FeatureError("cannot stack context on an empty sequence")
    half = context // 2
    idx = np.clip(np.arange(T)[:, None] + np.arange(-half, half + 1)[None, :], 0, T - 1)
    vectors = frames[idx].reshape(T, context * frames.shape[1])
    return ContextFeatureSequence(vectors, np.arange(T), features.segment_id)


def compute_norm_stats(training_vectors) -> NormStats:
    x = np.asarray(training_vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise FeatureError("need a non-empty N x dim collection of vectors")
    return NormStats(x.mean(axis=0), x.std(axis=0))


def normalize(vectors, stats: NormStats) -> np.ndarray:
    x = np.asarray(vectors)
    if x.shape[-1] != stats.dim:
        raise FeatureError(f"vector dimension {x.shape[-1]} != stats dimension {stats.dim}")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return ((x - stats.mean) / stats.stddev).astype(dtype, copy=False)


# -- binary feature files ----------------------------------------------------

_HEADER = struct.Struct("<4sIII")


def write_feature_file(path, matrix) -> None:
    """Write a T x dim matrix as little-endian float32 with a HACF header."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise FeatureError("feature matrix must be two-dimensional")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureError(f"{path}: truncated feature file")
    magic, version, T, dim = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FeatureError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureError(f"{path}: unsupported feature file version {version}")
    if len(data) != _HEADER.size + 4 * T * dim:
        raise FeatureError(f"{path}: expected {T}x{dim} floats, file size disagrees")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, dim).astype(np.float32)


def save_norm_stats(path, stats: NormStats) -> None:
    write_feature_file(path, np.stack([stats.mean, stats.stddev]))


def load_norm_stats(path) -> NormStats:
    m = read_feature_file(path)
    if m.shape[0] != 2:
        raise FeatureError(f"{path}: norm stats file must have 2 rows, found {m.shape[0]}")
    return NormStats(m[0].astype(np.float64), m[1].astype(np.float64))


def wav_to_features(path, cfg: FramingConfig = FramingConfig(), fb: MelFilterBank | None = None) -> MelFeatureSequence:
    return extract_log_mel(load_wav(path), cfg, fb, segment_id=Path(path).stem)
