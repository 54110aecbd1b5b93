"""On-disk mixture corpus layout: one directory per mixture."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, read_manifest, read_wav, resample, write_manifest, write_wav
from .metrics import SOURCES

MIX_FILE = "mix.wav"
MANIFEST_FILE = "manifest.json"


def write_mixture(directory, rendered, encoding: str = "float32") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_wav(d / MIX_FILE, rendered.mixture, encoding)
    for name in SOURCES:
        write_wav(d / f"{name}.wav", rendered.stems[name], encoding)
    write_manifest(d / MANIFEST_FILE, rendered.manifest)
    return d


def list_mixtures(root) -> list[Path]:
    """Mixture directories under ``root`` (those holding a manifest), sorted by name."""
    return sorted(p.parent for p in Path(root).glob(f"*/{MANIFEST_FILE}"))


def read_stems(directory) -> dict[str, AudioBuffer]:
    d = Path(directory)
    return {name: read_wav(d / f"{name}.wav") for name in SOURCES}


def load_mixture(directory):
    d = Path(directory)
    return read_wav(d / MIX_FILE), read_stems(d), read_manifest(d / MANIFEST_FILE)


def chunk_corpus(root, sample_rate: int, chunk_s: float, dtype=np.float32) -> list[tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping ``chunk_s`` chunks of every mixture as ``(mix, stems[3])`` pairs.

    Audio is resampled to ``sample_rate`` if needed; a mixture shorter than
    one chunk is zero-padded, a trailing partial chunk is dropped.
    """
    n = int(round(chunk_s * sample_rate))
    out = []
    for d in list_mixtures(root):
        mix, stems, _ = load_mixture(d)
        signals = [mix] + [stems[s] for s in SOURCES]
        arrays = [(resample(b, sample_rate) if b.sample_rate != sample_rate else b).samples for b in signals]
        length = len(arrays[0])
        if length < n:
            arrays = [np.pad(a, (0, n - length)) for a in arrays]
            length = n
        for start in range(0, length - n + 1, n):
            seg = [a[start : start + n].astype(dtype) for a in arrays]
            out.append((seg[0], np.stack(seg[1:])))
    return out
