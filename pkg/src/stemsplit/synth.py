"""Synthetic stand-ins for speech, music and sound-effect recordings.

Used for the toy training preset and for fixture clip pools, so everything
runs without external corpora.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer, write_wav
from .dsp import apply_gain_db, integrated_lufs

CLASS_TARGET_LUFS = {"music": -24.0, "speech": -17.0, "sfx_fg": -21.0, "sfx_bg": -29.0}


def _normalize(x: np.ndarray, sample_rate: int, target_lufs: float) -> np.ndarray:
    buf = AudioBuffer(x, sample_rate)
    return apply_gain_db(buf, target_lufs - integrated_lufs(buf)).samples


def sine_sweep(n: int, sample_rate: int, f0: float, f1: float, rng=None) -> np.ndarray:
    t = np.arange(n) / sample_rate
    dur = n / sample_rate
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * dur))
    # a fifth above adds some harmonic structure
    return 0.5 * np.sin(phase) + 0.25 * np.sin(1.5 * phase)


def pulse_train(n: int, sample_rate: int, f0: float, rng: np.random.Generator, syllable_s: float = 0.25) -> np.ndarray:
    """Glottal-like pulse train through a resonator, gated into syllables."""
    x = np.zeros(n)
    period = sample_rate / f0
    pos = 0.0
    while pos < n:
        x[int(pos)] = 1.0
        pos += period * (1 + 0.03 * rng.standard_normal())
    b, a = signal.iirpeak(min(700.0, 0.4 * sample_rate / 2), 4.0, fs=sample_rate)
    x = signal.lfilter(b, a, x)
    seg = max(1, int(syllable_s * sample_rate))
    gate = np.repeat(rng.random(-(-n // seg)) < 0.8, seg)[:n].astype(float)
    gate = np.convolve(gate, np.hanning(seg // 4 + 1) / (seg // 8 + 0.5), mode="same")
    return x * np.clip(gate, 0, 1)


def band_noise(n: int, sample_rate: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    hi = min(hi, 0.45 * sample_rate)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def toy_training_example(sample_rate: int = 8000, duration_s: float = 9.0, seed: int = 0):
    """One fixed mixture: sweep "music", pulse-train "speech", band-noise "SFX".

    Sources are leveled to the default class loudness targets (music -24,
    speech -17, SFX -21 LUFS). Returns ``(mixture, stems)`` with stems
    ordered music, speech, sfx.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    music = _normalize(sine_sweep(n, sample_rate, 200.0, 600.0), sample_rate, CLASS_TARGET_LUFS["music"])
    speech = _normalize(pulse_train(n, sample_rate, 110.0, rng), sample_rate, CLASS_TARGET_LUFS["speech"])
    sfx = _normalize(band_noise(n, sample_rate, 1800.0, 3200.0, rng), sample_rate, CLASS_TARGET_LUFS["sfx_fg"])
    stems = np.stack([music, speech, sfx])
    return stems.sum(axis=0), stems


# --------------------------------------------------------------------------
# fixture clip pools
# --------------------------------------------------------------------------

# (min, max) clip durations in seconds, loosely following the source corpora
FIXTURE_DURATIONS = {
    "music": (20.0, 30.0),
    "speech": (4.0, 16.0),
    "sfx_fg": (1.0, 6.0),
    "sfx_bg": (10.0, 30.0),
}
GENRES = ("rock", "folk", "electronic", "classical")
FG_LABELS = ("dog_bark", "door_knock", "glass_break", "footsteps")
BG_LABELS = ("traffic", "rain", "crowd", "wind")


def synth_clip(cls: str, n: int, sample_rate: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    if cls == "music":
        root = rng.uniform(110, 330)
        notes = [root * r for r in (1.0, 1.25, 1.5, 2.0)]
        t = np.arange(n) / sample_rate
        x = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / (k + 1) for k, f in enumerate(notes))
        beat = 0.6 + 0.4 * (np.sin(2 * np.pi * rng.uniform(1.5, 2.5) * t) > 0)
        return x * beat, {"genre": str(rng.choice(GENRES))}
    if cls == "speech":
        x = pulse_train(n, sample_rate, rng.uniform(90, 220), rng)
        words = int(rng.integers(3, 12))
        return x, {"transcript": " ".join(["la"] * words)}
    if cls == "sfx_fg":
        lo = rng.uniform(300, 1500)
        x = band_noise(n, sample_rate, lo, lo * rng.uniform(1.5, 3.0), rng)
        fade = np.minimum(1.0, np.minimum(np.arange(n), n - 1 - np.arange(n)) / (0.05 * sample_rate))
        wobble = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * np.arange(n) / sample_rate)
        env = fade * wobble
        # pad with silence so ingestion trimming has work to do
        pad = int(0.1 * sample_rate)
        x = np.concatenate([np.zeros(pad), (x * env)[: n - 2 * pad], np.zeros(pad)])
        return x, {"labels": [str(rng.choice(FG_LABELS))]}
    if cls == "sfx_bg":
        lo = rng.uniform(60, 300)
        return band_noise(n, sample_rate, lo, lo * 8, rng), {"labels": [str(rng.choice(BG_LABELS))]}
    raise ValueError(f"unknown class {cls!r}")


def make_fixture_corpus(
    root,
    sample_rate: int = 44100,
    clips_per_class: dict | None = None,
    splits=("train", "validation", "test"),
    seed: int = 0,
) -> Path:
    """Write synthetic labeled clips under ``root/<split>/<class>/`` with JSON sidecars."""
    root = Path(root)
    clips_per_class = clips_per_class or {"music": 6, "speech": 12, "sfx_fg": 12, "sfx_bg": 6}
    ss = np.random.SeedSequence(seed)
    for split, child in zip(splits, ss.spawn(len(splits))):
        rng = np.random.default_rng(child)
        for cls, count in clips_per_class.items():
            d = root / split / cls
            d.mkdir(parents=True, exist_ok=True)
            lo, hi = FIXTURE_DURATIONS[cls]
            for k in range(count):
                n = int(rng.uniform(lo, hi) * sample_rate)
                x, meta = synth_clip(cls, n, sample_rate, rng)
                x = 0.5 * x / max(np.max(np.abs(x)), 1e-9)
                stem = d / f"{cls}_{k:03d}"
                write_wav(stem.with_suffix(".wav"), AudioBuffer(x, sample_rate), "pcm16")
                stem.with_suffix(".json").write_text(json.dumps(meta))
    return root
