"""WAV files, annotation manifests and sample-rate conversion."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np
from scipy import signal

CLASSES = ("music", "speech", "sfx_fg", "sfx_bg")
MIN_RATE, MAX_RATE = 8000, 192000

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedWavError(WavFormatError):
    """Well-formed WAV in an encoding this module does not read."""


class ManifestError(ValueError):
    """Manifest violates the schema or one of its invariants."""


def _check_rate(rate: int) -> int:
    if int(rate) != rate or not MIN_RATE <= rate <= MAX_RATE:
        raise ValueError(f"sample rate must be an integer in [{MIN_RATE}, {MAX_RATE}], got {rate}")
    return int(rate)


@dataclass
class AudioBuffer:
    """Mono float64 samples plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64).reshape(-1)
        self.sample_rate = _check_rate(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------


def read_wav(path) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file, averaging channels to mono."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated '{chunk_id.decode('latin-1')}' chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _FMT_EXTENSIBLE and size >= 26:
                # sub-format GUID starts with the real format tag
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {channels} channels (only 1 or 2 supported)")
    if tag == _FMT_PCM and bits == 16:
        frames = np.frombuffer(data[: len(data) - len(data) % block_align], dtype="<i2")
        samples = frames.astype(np.float64) / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        frames = np.frombuffer(data[: len(data) - len(data) % block_align], dtype="<f4")
        samples = frames.astype(np.float64)
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag} with {bits} bits is not PCM16/float32")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioBuffer(samples, rate)


def write_wav(path, buffer: AudioBuffer, encoding: str = "float32") -> None:
    """Write a mono WAV file.

    ``pcm16`` clips to the int16 range; ``float32`` stores samples unclipped.
    """
    x = buffer.samples
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _FMT_PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    else:
        raise ValueError(f"encoding must be 'pcm16' or 'float32', got {encoding!r}")
    block_align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, buffer.sample_rate, buffer.sample_rate * block_align, block_align, bits)
    pad = b"\x00" if len(payload) & 1 else b""
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload + pad
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


def _polyphase_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc lowpass for the ``up/down`` polyphase resampler."""
    half_width = TAPS_PER_PHASE // 2
    # cutoff relative to the upsampled rate's Nyquist, slightly inside the narrower band
    cutoff = 0.95 / max(up, down)
    n = np.arange(-half_width * up, half_width * up + 1)
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(len(n), KAISER_BETA)
    return h * up


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling to ``target_rate``.

    Output length is ``round(len * target / source)``.
    """
    target_rate = _check_rate(target_rate)
    if target_rate == buffer.sample_rate:
        return AudioBuffer(buffer.samples.copy(), target_rate)
    ratio = Fraction(target_rate, buffer.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    out_len = int(round(len(buffer) * target_rate / buffer.sample_rate))
    if len(buffer) == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    h = _polyphase_filter(up, down)
    # pad the filter front so its group delay is a whole number of output samples
    delay = (len(h) - 1) // 2
    lead = (-delay) % down
    h = np.concatenate([np.zeros(lead), h])
    start = (delay + lead) // down
    y = signal.upfirdn(h, buffer.samples, up, down)
    y = y[start : start + out_len]
    if len(y) < out_len:
        y = np.pad(y, (0, out_len - len(y)))
    return AudioBuffer(y, target_rate)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass
class Event:
    cls: str
    source_file: str
    source_start_s: float
    onset_s: float
    offset_s: float
    gain_db: float
    metadata: dict[str, Any] | None = None

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s

    def to_json(self) -> dict:
        return {
            "class": self.cls,
            "source_file": self.source_file,
            "source_start_s": self.source_start_s,
            "onset_s": self.onset_s,
            "offset_s": self.offset_s,
            "gain_db": self.gain_db,
            "metadata": self.metadata,
        }


@dataclass
class AnnotationManifest:
    mixture_id: str
    duration_s: float
    sample_rate: int
    class_lufs: dict[str, float] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mixture_id": self.mixture_id,
            "duration_s": self.duration_s,
            "sample_rate": self.sample_rate,
            "class_lufs": dict(self.class_lufs),
            "events": [e.to_json() for e in self.events],
        }

    def events_of(self, *classes: str) -> list[Event]:
        return [e for e in self.events if e.cls in classes]


def _require(obj: dict, key: str, kinds, where: str):
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    if key not in obj:
        raise ManifestError(f"{where}.{key}: missing required field")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ManifestError(f"{where}.{key}: expected {getattr(kinds, '__name__', kinds)}, got {type(value).__name__}")
    if isinstance(value, float) and not math.isfinite(value):
        raise ManifestError(f"{where}.{key}: must be finite")
    return value


def validate_manifest(manifest: AnnotationManifest) -> AnnotationManifest:
    """Check the manifest invariants; raise :class:`ManifestError` naming the field."""
    if manifest.duration_s <= 0:
        raise ManifestError("duration_s: must be positive")
    try:
        _check_rate(manifest.sample_rate)
    except ValueError as exc:
        raise ManifestError(f"sample_rate: {exc}") from None
    for cls in manifest.class_lufs:
        if cls not in CLASSES:
            raise ManifestError(f"class_lufs.{cls}: unknown class")
    for i, ev in enumerate(manifest.events):
        where = f"events[{i}]"
        if ev.cls not in CLASSES:
            raise ManifestError(f"{where}.class: unknown class {ev.cls!r}")
        if not (0 <= ev.onset_s < ev.offset_s <= manifest.duration_s):
            raise ManifestError(
                f"{where}.offset_s: need 0 <= onset_s < offset_s <= duration_s, "
                f"got onset_s={ev.onset_s}, offset_s={ev.offset_s}, duration_s={manifest.duration_s}"
            )
        if not math.isfinite(ev.gain_db):
            raise ManifestError(f"{where}.gain_db: must be finite")
        if ev.source_start_s < 0:
            raise ManifestError(f"{where}.source_start_s: must be non-negative")
    for cls in CLASSES:
        idx = [i for i, e in enumerate(manifest.events) if e.cls == cls]
        idx.sort(key=lambda i: manifest.events[i].onset_s)
        for a, b in zip(idx, idx[1:]):
            if manifest.events[b].onset_s < manifest.events[a].offset_s:
                raise ManifestError(f"events[{b}].onset_s: overlaps events[{a}] of the same class {cls!r}")
    return manifest


def manifest_from_json(obj: dict) -> AnnotationManifest:
    where = "manifest"
    mixture_id = _require(obj, "mixture_id", str, where)
    duration = float(_require(obj, "duration_s", (int, float), where))
    rate = _require(obj, "sample_rate", int, where)
    class_lufs_raw = _require(obj, "class_lufs", dict, where)
    class_lufs = {}
    for k in class_lufs_raw:
        class_lufs[k] = float(_require(class_lufs_raw, k, (int, float), f"{where}.class_lufs"))
    events = []
    for i, ev in enumerate(_require(obj, "events", list, where)):
        ew = f"events[{i}]"
        metadata = ev.get("metadata") if isinstance(ev, dict) else None
        if metadata is not None and not isinstance(metadata, dict):
            raise ManifestError(f"{ew}.metadata: expected object or null")
        events.append(
            Event(
                cls=_require(ev, "class", str, ew),
                source_file=_require(ev, "source_file", str, ew),
                source_start_s=float(_require(ev, "source_start_s", (int, float), ew)),
                onset_s=float(_require(ev, "onset_s", (int, float), ew)),
                offset_s=float(_require(ev, "offset_s", (int, float), ew)),
                gain_db=float(_require(ev, "gain_db", (int, float), ew)),
                metadata=metadata,
            )
        )
    return validate_manifest(AnnotationManifest(mixture_id, duration, rate, class_lufs, events))


def read_manifest(path) -> AnnotationManifest:
    with open(path, encoding="utf-8") as f:
        return manifest_from_json(json.load(f))


def write_manifest(path, manifest: AnnotationManifest) -> None:
    validate_manifest(manifest)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent=2, ensure_ascii=False)
        f.write("\n")
