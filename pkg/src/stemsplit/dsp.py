"""STFT/iSTFT, window quantization, BS.1770 loudness and gain utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer


class UnmeasurableLoudness(ValueError):
    """Every loudness block fell below the absolute gate."""


def quantize_window(window_ms: float, sample_rate: int) -> int:
    """Nearest power of two to ``window_ms`` worth of samples; midpoints round up."""
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    n = window_ms * sample_rate / 1000.0
    lo = 1 << max(0, math.floor(math.log2(n)))
    if lo > n:  # n < 1
        return 1
    hi = lo * 2
    return hi if (hi - n) <= (n - lo) else lo


@dataclass(frozen=True)
class StftConfig:
    window_samples: int
    hop_samples: int
    sample_rate: int
    window_ms: float | None = None

    def __post_init__(self):
        w = self.window_samples
        if w <= 0 or w & (w - 1):
            raise ValueError(f"window_samples must be a power of two, got {w}")
        if not 0 < self.hop_samples <= w:
            raise ValueError(f"hop_samples must be in (0, {w}], got {self.hop_samples}")

    @classmethod
    def from_ms(cls, window_ms: float, sample_rate: int, hop_samples: int | None = None) -> "StftConfig":
        w = quantize_window(window_ms, sample_rate)
        return cls(w, hop_samples or w // 4, sample_rate, window_ms)

    @property
    def n_bins(self) -> int:
        return self.window_samples // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + length // self.hop_samples


@dataclass
class Spectrogram:
    """Complex STFT bins, shape ``(..., frames, bins)``."""

    bins: np.ndarray
    config: StftConfig

    @property
    def n_frames(self) -> int:
        return self.bins.shape[-2]


@lru_cache(maxsize=64)
def sqrt_hann(n: int) -> np.ndarray:
    w = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))
    w.setflags(write=False)
    return w


@lru_cache(maxsize=64)
def _ola_envelope(window: int, hop: int, length: int) -> np.ndarray:
    """Sum of squared synthesis windows seen by each output sample."""
    n_frames = 1 + length // hop
    w2 = sqrt_hann(window) ** 2
    env = np.zeros((n_frames - 1) * hop + window)
    for n in range(n_frames):
        env[n * hop : n * hop + window] += w2
    env = env[window // 2 : window // 2 + length].copy()
    env.setflags(write=False)
    return env


def frame_signal(x: np.ndarray, config: StftConfig) -> np.ndarray:
    """Center-padded, windowed frames of ``x`` (last axis), shape ``(..., N, W)``."""
    w, hop = config.window_samples, config.hop_samples
    length = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(w // 2, w // 2)]
    xp = np.pad(x, pad)
    n_frames = config.n_frames(length)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(w)[None, :]
    return xp[..., idx] * sqrt_hann(w)


def stft(buffer, config: StftConfig) -> Spectrogram:
    """One-sided STFT with a sqrt-Hann window and center padding.

    Accepts an :class:`AudioBuffer` or a raw array whose last axis is time.
    """
    x = buffer.samples if isinstance(buffer, AudioBuffer) else np.asarray(buffer, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("cannot take the STFT of an empty signal")
    return Spectrogram(np.fft.rfft(frame_signal(x, config), axis=-1), config)


def overlap_add(frames: np.ndarray, config: StftConfig, length: int) -> np.ndarray:
    """Overlap-add time frames ``(..., N, W)`` and undo the window envelope."""
    w, hop = config.window_samples, config.hop_samples
    n_frames = frames.shape[-2]
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * hop + w,))
    for n in range(n_frames):
        out[..., n * hop : n * hop + w] += frames[..., n, :]
    out = out[..., w // 2 : w // 2 + length]
    if out.shape[-1] < length:
        out = np.pad(out, [(0, 0)] * (out.ndim - 1) + [(0, length - out.shape[-1])])
    env = _ola_envelope(w, hop, max(length, 1))[:length]
    return out / np.maximum(env, 1e-12)


def istft_array(bins: np.ndarray, config: StftConfig, length: int) -> np.ndarray:
    w = config.window_samples
    frames = np.fft.irfft(bins, n=w, axis=-1) * sqrt_hann(w)
    return overlap_add(frames, config, length)


def istft(spectrogram: Spectrogram, length: int) -> AudioBuffer:
    """Inverse of :func:`stft`, truncated or zero-padded to ``length``."""
    return AudioBuffer(istft_array(spectrogram.bins, spectrogram.config, length), spectrogram.config.sample_rate)


def istft_adjoint(grad: np.ndarray, config: StftConfig, n_frames: int) -> np.ndarray:
    """Adjoint of the frame synthesis in :func:`istft_array`.

    Maps a time-domain gradient ``(..., length)`` to per-frame time gradients
    ``(..., N, W)`` of the irfft outputs, already multiplied by the window.
    """
    w, hop = config.window_samples, config.hop_samples
    length = grad.shape[-1]
    env = _ola_envelope(w, hop, max(length, 1))[:length]
    g = grad / np.maximum(env, 1e-12)
    total = (n_frames - 1) * hop + w
    gp = np.zeros(grad.shape[:-1] + (total,))
    keep = min(length, total - w // 2)
    gp[..., w // 2 : w // 2 + keep] = g[..., :keep]
    idx = np.arange(n_frames)[:, None] * hop + np.arange(w)[None, :]
    return gp[..., idx] * sqrt_hann(w)


# --------------------------------------------------------------------------
# Loudness (ITU-R BS.1770-4, mono)
# --------------------------------------------------------------------------


@lru_cache(maxsize=32)
def k_weighting(sample_rate: int) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Pre-filter shelf and RLB high-pass biquads redesigned for ``sample_rate``."""
    # high shelf
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / sample_rate)
    vh = 10 ** (gain_db / 20)
    vb = vh**0.4996667741545416
    a0 = 1 + k / q + k * k
    shelf_b = np.array([(vh + vb * k / q + k * k) / a0, 2 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0])
    shelf_a = np.array([1.0, 2 * (k * k - 1) / a0, (1 - k / q + k * k) / a0])
    # RLB high-pass
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / sample_rate)
    a0 = 1 + k / q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2 * (k * k - 1) / a0, (1 - k / q + k * k) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


BLOCK_S = 0.4
ABSOLUTE_GATE = -70.0
RELATIVE_GATE = -10.0


def _block_powers(x: np.ndarray, sample_rate: int) -> np.ndarray:
    (b1, a1), (b2, a2) = k_weighting(sample_rate)
    y = signal.lfilter(b2, a2, signal.lfilter(b1, a1, x))
    block = int(round(BLOCK_S * sample_rate))
    step = int(round(BLOCK_S * sample_rate / 4))
    n_blocks = 1 + (len(y) - block) // step
    csum = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = np.arange(n_blocks) * step
    return (csum[starts + block] - csum[starts]) / block


def integrated_lufs(buffer: AudioBuffer) -> float:
    """Gated integrated loudness of a mono buffer in LUFS.

    Raises :class:`UnmeasurableLoudness` when every block is below the
    -70 LUFS absolute gate (e.g. digital silence).
    """
    block = int(round(BLOCK_S * buffer.sample_rate))
    if len(buffer) < block:
        raise ValueError(f"need at least {BLOCK_S * 1000:.0f} ms of audio, got {len(buffer)} samples")
    z = _block_powers(buffer.samples, buffer.sample_rate)
    with np.errstate(divide="ignore"):
        loud = -0.691 + 10 * np.log10(z)
    z = z[loud > ABSOLUTE_GATE]
    if z.size == 0:
        raise UnmeasurableLoudness("all blocks below the absolute gate")
    threshold = -0.691 + 10 * math.log10(z.mean()) + RELATIVE_GATE
    with np.errstate(divide="ignore"):
        z = z[-0.691 + 10 * np.log10(z) > threshold]
    return -0.691 + 10 * math.log10(z.mean())


def db_to_gain(gain_db: float) -> float:
    return 10.0 ** (gain_db / 20.0)


def apply_gain_db(buffer: AudioBuffer, gain_db: float) -> AudioBuffer:
    return AudioBuffer(buffer.samples * db_to_gain(gain_db), buffer.sample_rate)


def trim_silence(buffer: AudioBuffer, threshold_db: float = -60.0, frame_s: float = 0.01) -> AudioBuffer:
    """Drop leading/trailing 10 ms frames whose RMS is below ``threshold_db`` dBFS."""
    span = trim_bounds(buffer, threshold_db, frame_s)
    return AudioBuffer(buffer.samples[span[0] : span[1]], buffer.sample_rate)


def trim_bounds(buffer: AudioBuffer, threshold_db: float = -60.0, frame_s: float = 0.01) -> tuple[int, int]:
    """Sample range ``[start, stop)`` kept by :func:`trim_silence`."""
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    frame = max(1, int(round(frame_s * buffer.sample_rate)))
    x = buffer.samples
    n = -(-len(x) // frame)
    padded = np.pad(x, (0, n * frame - len(x)))
    rms = np.sqrt(np.mean(padded.reshape(n, frame) ** 2, axis=1)) if n else np.zeros(0)
    loud = np.flatnonzero(rms >= 10 ** (threshold_db / 20))
    if loud.size == 0:
        return 0, 0
    return int(loud[0] * frame), int(min(len(x), (loud[-1] + 1) * frame))
