"""Soundtrack mixture synthesis: clip pools, event planning, loudness leveling, rendering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import CLASSES, AnnotationManifest, AudioBuffer, Event, read_wav, resample, validate_manifest
from .dsp import UnmeasurableLoudness, db_to_gain, integrated_lufs, trim_bounds

SPLITS = ("train", "validation", "test")
STEM_CLASSES = {"music": ("music",), "speech": ("speech",), "sfx": ("sfx_fg", "sfx_bg")}
MIN_EVENT_S = 0.4  # shortest excerpt the loudness meter can measure
MAX_RETRIES = 100


class MixgenError(ValueError):
    pass


@dataclass
class ClassMixProfile:
    cls: str
    lam: float
    target_lufs: float
    mixture_jitter_lu: float = 2.0
    clip_jitter_lu: float = 1.0
    min_excerpt_s: float | None = None
    gap_max_s: float | None = None

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise MixgenError(f"profiles.{self.cls}: unknown class")
        if self.lam < 0:
            raise MixgenError(f"profiles.{self.cls}.lambda: must be >= 0 (0 disables the class)")
        if self.mixture_jitter_lu < 0 or self.clip_jitter_lu < 0:
            raise MixgenError(f"profiles.{self.cls}: jitters must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.lam > 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        del d["cls"]
        return d


DEFAULT_MIN_EXCERPT_S = {"music": 3.0, "speech": None, "sfx_fg": 1.0, "sfx_bg": 1.0}
DEFAULT_CLASS_PROFILES = {"music": (7.0, -24.0), "speech": (8.0, -17.0), "sfx_fg": (12.0, -21.0), "sfx_bg": (6.0, -29.0)}


def default_profiles() -> dict[str, ClassMixProfile]:
    return {c: ClassMixProfile(c, lam, lufs) for c, (lam, lufs) in DEFAULT_CLASS_PROFILES.items()}


def profiles_from_json(obj: dict) -> dict[str, ClassMixProfile]:
    out = default_profiles()
    for cls, spec in obj.items():
        if cls not in CLASSES:
            raise MixgenError(f"profiles.{cls}: unknown class")
        if not isinstance(spec, dict):
            raise MixgenError(f"profiles.{cls}: expected an object")
        base = out[cls]
        try:
            out[cls] = ClassMixProfile(
                cls,
                float(spec.get("lambda", base.lam)),
                float(spec.get("target_lufs", base.target_lufs)),
                float(spec.get("mixture_jitter_lu", base.mixture_jitter_lu)),
                float(spec.get("clip_jitter_lu", base.clip_jitter_lu)),
                spec.get("min_excerpt_s", base.min_excerpt_s),
                spec.get("gap_max_s", base.gap_max_s),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, MixgenError):
                raise
            raise MixgenError(f"profiles.{cls}: {exc}") from None
    return out


# --------------------------------------------------------------------------
# clip pools
# --------------------------------------------------------------------------


@dataclass
class Clip:
    path: str
    duration_s: float
    start_s: float = 0.0  # offset of the usable region after silence trimming
    metadata: dict | None = None


@dataclass
class ClipPool:
    """Clips per split and class. Paths are relative to ``root`` unless absolute."""

    splits: dict[str, dict[str, list[Clip]]]
    sample_rate: int
    root: str = "."

    def clips(self, split: str, cls: str) -> list[Clip]:
        return self.splits.get(split, {}).get(cls, [])

    def resolve(self, clip: Clip) -> Path:
        p = Path(clip.path)
        return p if p.is_absolute() else Path(self.root) / p

    def validate(self) -> "ClipPool":
        seen: dict[str, str] = {}
        for split, classes in self.splits.items():
            for cls, clips in classes.items():
                if cls not in CLASSES:
                    raise MixgenError(f"pools.splits.{split}.{cls}: unknown class")
                for i, clip in enumerate(clips):
                    if clip.duration_s <= 0:
                        raise MixgenError(f"pools.splits.{split}.{cls}[{i}].duration_s: must be positive")
                    prev = seen.setdefault(clip.path, split)
                    if prev != split:
                        raise MixgenError(f"pools.splits.{split}.{cls}[{i}].path: {clip.path} also in split {prev}")
        return self

    def to_json(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "splits": {s: {c: [asdict(clip) for clip in clips] for c, clips in cls.items()} for s, cls in self.splits.items()},
        }

    @classmethod
    def from_json(cls, obj: dict, root=".") -> "ClipPool":
        try:
            splits = {
                s: {c: [Clip(**clip) for clip in clips] for c, clips in classes.items()}
                for s, classes in obj["splits"].items()
            }
            return cls(splits, int(obj["sample_rate"]), str(root)).validate()
        except KeyError as exc:
            raise MixgenError(f"pools.{exc.args[0]}: missing required field") from None
        except TypeError as exc:
            raise MixgenError(f"pools: {exc}") from None


def load_pool(path) -> ClipPool:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return ClipPool.from_json(json.load(f), root=path.parent)


def save_pool(path, pool: ClipPool) -> None:
    Path(path).write_text(json.dumps(pool.to_json(), indent=2) + "\n", encoding="utf-8")


def build_pool(root, trim_classes=("sfx_fg", "sfx_bg"), threshold_db: float = -60.0) -> ClipPool:
    """Index ``root/<split>/<class>/*.wav`` (with optional ``.json`` metadata sidecars).

    Leading/trailing silence of ``trim_classes`` is excluded by recording the
    kept region; clips that are entirely silent are skipped.
    """
    root = Path(root)
    splits: dict[str, dict[str, list[Clip]]] = {}
    rate = None
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for cls_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if cls_dir.name not in CLASSES:
                continue
            clips = []
            for wav in sorted(cls_dir.glob("*.wav")):
                buf = read_wav(wav)
                if rate is None:
                    rate = buf.sample_rate
                elif buf.sample_rate != rate:
                    raise MixgenError(f"{wav}: sample rate {buf.sample_rate} differs from pool rate {rate}")
                start, stop = trim_bounds(buf, threshold_db) if cls_dir.name in trim_classes else (0, len(buf))
                if stop <= start:
                    continue
                sidecar = wav.with_suffix(".json")
                meta = json.loads(sidecar.read_text()) if sidecar.exists() else None
                clips.append(Clip(str(wav.relative_to(root)), (stop - start) / buf.sample_rate, start / buf.sample_rate, meta))
            splits.setdefault(split_dir.name, {})[cls_dir.name] = clips
    if rate is None:
        raise MixgenError(f"{root}: no WAV clips found")
    return ClipPool(splits, rate, str(root)).validate()


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------


def sample_ztp(lam: float, rng: np.random.Generator) -> int:
    """Zero-truncated Poisson draw by rejecting zeros; tiny ``lam`` degenerates to 1."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if lam < 1e-6:
        return 1
    while True:
        k = int(rng.poisson(lam))
        if k >= 1:
            return k


def ztp_mean(lam: float) -> float:
    return lam / -math.expm1(-lam)


def expected_excerpt_s(cls: str, clips: list[Clip], min_len_s: float | None) -> float:
    """Mean excerpt length drawn from ``clips`` (whole clip for speech)."""
    if cls == "speech" or min_len_s is None:
        return float(np.mean([c.duration_s for c in clips]))
    return float(np.mean([(min(min_len_s, c.duration_s) + c.duration_s) / 2 for c in clips]))


def default_gap_max(profile: ClassMixProfile, clips: list[Clip], duration_s: float, min_len_s: float | None) -> float:
    """Gap bound making the expected clips plus gaps span the mixture.

    Solves ``E[k] * (E[len] + gap_max / 2) = duration``, floored at zero and
    capped at the mixture duration.
    """
    expected_k = ztp_mean(profile.lam) if profile.lam > 1e-6 else 1.0
    slack = duration_s / expected_k - expected_excerpt_s(profile.cls, clips, min_len_s)
    return float(min(duration_s, max(0.0, 2.0 * slack)))


def plan_class_track(
    profile: ClassMixProfile,
    clips: list[Clip],
    duration_s: float,
    rng: np.random.Generator,
    sample_rate: int = 44100,
) -> list[Event]:
    """Place ``k ~ ZTP(lambda)`` non-overlapping clips of one class left to right.

    Speech utterances are used whole; other classes use a random excerpt of
    uniform length in ``[min_excerpt, full]`` at a uniform internal start.
    Gaps before each clip are ``U(0, gap_max)``; events overrunning the end are
    truncated and those shorter than 0.4 s are dropped.
    """
    if not clips:
        raise MixgenError(f"pool has no clips for class {profile.cls!r}")
    total = int(round(duration_s * sample_rate))
    min_len_s = profile.min_excerpt_s if profile.min_excerpt_s is not None else DEFAULT_MIN_EXCERPT_S[profile.cls]
    gap_max_s = profile.gap_max_s
    if gap_max_s is None:
        gap_max_s = default_gap_max(profile, clips, duration_s, min_len_s)
    min_event = int(round(MIN_EVENT_S * sample_rate))
    for _ in range(MAX_RETRIES):
        k = sample_ztp(profile.lam, rng)
        events = []
        cursor = 0
        for _ in range(k):
            clip = clips[int(rng.integers(len(clips)))]
            full = int(math.floor(clip.duration_s * sample_rate))
            if profile.cls == "speech" or min_len_s is None:
                length, start = full, 0
            else:
                lo = min(int(round(min_len_s * sample_rate)), full)
                length = int(round(rng.uniform(lo, full)))
                start = int(round(rng.uniform(0, full - length)))
            onset = cursor + int(round(rng.uniform(0, gap_max_s) * sample_rate))
            if onset >= total:
                break
            length = min(length, total - onset)
            if length < min_event:
                cursor = onset
                continue
            offset = onset + length
            events.append(
                Event(
                    cls=profile.cls,
                    source_file=clip.path,
                    source_start_s=(int(round(clip.start_s * sample_rate)) + start) / sample_rate,
                    onset_s=onset / sample_rate,
                    offset_s=offset / sample_rate,
                    gain_db=0.0,
                    metadata=clip.metadata,
                )
            )
            cursor = offset
        if events:
            return events
    raise MixgenError(f"could not fit a {profile.cls} clip into {duration_s} s after {MAX_RETRIES} attempts")


# --------------------------------------------------------------------------
# leveling and rendering
# --------------------------------------------------------------------------


class ClipCache:
    """Read-through cache of pool audio keyed by path."""

    def __init__(self, pool: ClipPool):
        self.pool = pool
        self._cache: dict[str, np.ndarray] = {}

    def excerpt(self, event: Event, sample_rate: int) -> np.ndarray:
        if event.source_file not in self._cache:
            buf = read_wav(self.pool.resolve(Clip(event.source_file, 1.0)))
            if buf.sample_rate != sample_rate:
                buf = resample(buf, sample_rate)
            self._cache[event.source_file] = buf.samples
        x = self._cache[event.source_file]
        start = int(round(event.source_start_s * sample_rate))
        n = int(round(event.offset_s * sample_rate)) - int(round(event.onset_s * sample_rate))
        seg = x[start : start + n]
        if len(seg) < n:
            seg = np.pad(seg, (0, n - len(seg)))
        return seg


def excerpt_lufs(x: np.ndarray, sample_rate: int) -> float:
    """Loudness of an excerpt as it sits in a class track: flanked by one block of silence."""
    pad = int(round(0.4 * sample_rate))
    return integrated_lufs(AudioBuffer(np.pad(x, (pad, pad)), sample_rate))


def assign_levels(
    manifest: AnnotationManifest,
    profiles: dict[str, ClassMixProfile],
    cache: ClipCache,
    rng: np.random.Generator,
) -> AnnotationManifest:
    """Draw per-mixture class loudness and per-event gains; drop unmeasurable excerpts."""
    class_lufs = {}
    for cls in CLASSES:
        p = profiles[cls]
        class_lufs[cls] = float(rng.uniform(p.target_lufs - p.mixture_jitter_lu, p.target_lufs + p.mixture_jitter_lu))
    kept = []
    for ev in manifest.events:
        p = profiles[ev.cls]
        jitter = float(rng.uniform(-p.clip_jitter_lu, p.clip_jitter_lu))
        try:
            measured = excerpt_lufs(cache.excerpt(ev, manifest.sample_rate), manifest.sample_rate)
        except (UnmeasurableLoudness, ValueError):
            continue
        ev.gain_db = class_lufs[ev.cls] - measured + jitter
        kept.append(ev)
    manifest.class_lufs = {c: v for c, v in class_lufs.items() if profiles[c].enabled}
    manifest.events = kept
    return manifest


@dataclass
class MixConfig:
    duration_s: float = 60.0
    sample_rate: int = 44100
    split: str = "train"
    profiles: dict[str, ClassMixProfile] = field(default_factory=default_profiles)


@dataclass
class RenderedMixture:
    mixture: AudioBuffer
    stems: dict[str, AudioBuffer]
    manifest: AnnotationManifest
    class_tracks: dict[str, np.ndarray] = field(default_factory=dict)


def mixture_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for mixture ``index`` of a corpus seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def plan_mixture(mixture_id: str, pool: ClipPool, config: MixConfig, cache: ClipCache, rng: np.random.Generator) -> AnnotationManifest:
    events = []
    for cls in CLASSES:
        profile = config.profiles[cls]
        if not profile.enabled:
            continue
        clips = pool.clips(config.split, cls)
        if not clips:
            raise MixgenError(f"pools.splits.{config.split}.{cls}: no clips for class {cls!r} with lambda > 0")
        events.extend(plan_class_track(profile, clips, config.duration_s, rng, config.sample_rate))
    manifest = AnnotationManifest(mixture_id, config.duration_s, config.sample_rate, {}, events)
    return validate_manifest(assign_levels(manifest, config.profiles, cache, rng))


def render(manifest: AnnotationManifest, cache: ClipCache) -> RenderedMixture:
    """Place gained excerpts at their onsets; mixture is the exact sum of the three stems."""
    sr = manifest.sample_rate
    total = int(round(manifest.duration_s * sr))
    tracks = {c: np.zeros(total) for c in CLASSES}
    for ev in manifest.events:
        seg = cache.excerpt(ev, sr) * db_to_gain(ev.gain_db)
        onset = int(round(ev.onset_s * sr))
        tracks[ev.cls][onset : onset + len(seg)] += seg
    stems = {
        "music": tracks["music"],
        "speech": tracks["speech"],
        "sfx": tracks["sfx_fg"] + tracks["sfx_bg"],
    }
    mixture = stems["music"] + stems["speech"] + stems["sfx"]
    return RenderedMixture(
        AudioBuffer(mixture, sr),
        {k: AudioBuffer(v, sr) for k, v in stems.items()},
        manifest,
        tracks,
    )


def generate_mixture(index: int, pool: ClipPool, config: MixConfig, seed: int, cache: ClipCache | None = None) -> RenderedMixture:
    cache = cache or ClipCache(pool)
    rng = mixture_rng(seed, index)
    manifest = plan_mixture(f"{config.split}_{index:05d}", pool, config, cache, rng)
    return render(manifest, cache)


# --------------------------------------------------------------------------
# corpus statistics
# --------------------------------------------------------------------------


def frame_activity(manifest: AnnotationManifest, frame_s: float = 1.0) -> np.ndarray:
    """Boolean ``(frames, 3)`` activity of music/speech/sfx from annotations alone."""
    n = int(math.floor(manifest.duration_s / frame_s + 1e-9))
    act = np.zeros((n, 3), dtype=bool)
    for j, classes in enumerate(STEM_CLASSES.values()):
        for ev in manifest.events_of(*classes):
            first = int(math.floor(ev.onset_s / frame_s))
            last = int(math.ceil(ev.offset_s / frame_s))  # exclusive
            act[first:min(last, n), j] = True
    return act


def corpus_overlap_stats(manifests, frame_s: float = 1.0) -> dict[str, float]:
    """Fractions of frames with 3, 2, 1 and 0 active sources."""
    counts = np.zeros(4, dtype=np.int64)
    for m in manifests:
        n_active = frame_activity(m, frame_s).sum(axis=1)
        counts += np.bincount(n_active, minlength=4)
    total = counts.sum()
    if total == 0:
        return {"3": 0.0, "2": 0.0, "1": 0.0, "0": 0.0, "frames": 0}
    fr = counts / total
    return {"3": float(fr[3]), "2": float(fr[2]), "1": float(fr[1]), "0": float(fr[0]), "frames": int(total)}
