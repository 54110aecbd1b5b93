"""SI-SDR, PES, overlap-scenario evaluation and the oracle phase-sensitive mask."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AnnotationManifest, AudioBuffer
from .dsp import StftConfig, istft_array, stft

EPS = 1e-8
SOURCES = ("music", "speech", "sfx")
SOURCE_CLASSES = {"music": ("music",), "speech": ("speech",), "sfx": ("sfx_fg", "sfx_bg")}
# Table-4 column order
SCENARIOS = ("MSX", "SX", "MX", "MS", "M", "S", "X")
ACTIVITY_FLOOR_DB = -60.0


def _arr(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped near +80 dB by the epsilon guard."""
    est, ref = _arr(estimate), _arr(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: estimate {est.shape} vs reference {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= EPS:
        raise ValueError("reference is silent; use pes() for silent targets")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    t_energy = float(np.dot(target, target))
    err = target - est
    return 10 * math.log10(t_energy / (float(np.dot(err, err)) + EPS * t_energy))


def si_sdr_improvement(estimate, reference, mixture) -> float:
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


def pes(estimate_segment) -> float:
    """Predicted energy at silence: ``10 log10(mean(x^2) + eps)``."""
    x = _arr(estimate_segment)
    return 10 * math.log10(float(np.mean(x * x)) + EPS)


def scenario_name(active: tuple[bool, bool, bool]) -> str:
    return "".join(tag for tag, on in zip("MSX", active) if on)


def segment_activity(
    manifest: AnnotationManifest,
    segment_s: float = 1.0,
    references: dict | None = None,
) -> list[tuple[bool, bool, bool]]:
    """Per-segment (music, speech, sfx) activity.

    A source is active in ``[k*seg, (k+1)*seg)`` when one of its events
    intersects the segment and, if ``references`` are given, the reference
    stem's RMS there exceeds -60 dBFS. The trailing partial segment is dropped.
    """
    n_seg = int(math.floor(manifest.duration_s / segment_s + 1e-9))
    floor = 10 ** (ACTIVITY_FLOOR_DB / 20)
    seg_len = int(round(segment_s * manifest.sample_rate))
    out = []
    for k in range(n_seg):
        lo, hi = k * segment_s, (k + 1) * segment_s
        flags = []
        for src in SOURCES:
            on = any(e.onset_s < hi and e.offset_s > lo for e in manifest.events_of(*SOURCE_CLASSES[src]))
            if on and references is not None:
                seg = _arr(references[src])[k * seg_len : (k + 1) * seg_len]
                on = seg.size > 0 and math.sqrt(float(np.mean(seg * seg))) > floor
            flags.append(on)
        out.append(tuple(flags))
    return out


@dataclass
class Cell:
    """Mean of one source's per-segment values in one scenario."""

    kind: str  # "improvement" | "absolute" | "pes"
    values: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def marker(self) -> str:
        return {"improvement": "", "absolute": "*", "pes": "†"}[self.kind]


@dataclass
class EvalReport:
    per_source: dict[str, dict[str, float]]
    per_scenario: dict[str, dict[str, Cell]]
    frame_counts: dict[str, int]
    segment_s: float = 1.0

    def to_json(self) -> dict:
        return {
            "global": self.per_source,
            "scenarios": {
                sc: {src: {"kind": c.kind, "value": _finite_or_none(c.mean), "count": len(c.values)} for src, c in cells.items()}
                for sc, cells in self.per_scenario.items()
            },
            "segment_s": self.segment_s,
            "frame_counts": dict(self.frame_counts),
        }


def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def _cell_kind(src_index: int, active: tuple[bool, bool, bool]) -> str:
    if not active[src_index]:
        return "pes"
    return "absolute" if sum(active) == 1 else "improvement"


def evaluate(estimates: dict, references: dict, mixture, manifest: AnnotationManifest, segment_s: float = 1.0) -> EvalReport:
    """Global and per-scenario scores for one mixture.

    ``estimates`` and ``references`` map ``music``/``speech``/``sfx`` to signals.
    """
    mix = _arr(mixture)
    est = {s: _arr(estimates[s]) for s in SOURCES}
    ref = {s: _arr(references[s]) for s in SOURCES}
    for s in SOURCES:
        if est[s].shape != mix.shape or ref[s].shape != mix.shape:
            raise ValueError(f"length mismatch for {s}: estimate {est[s].shape}, reference {ref[s].shape}, mixture {mix.shape}")

    per_source = {}
    for s in SOURCES:
        if float(np.dot(ref[s], ref[s])) > EPS:
            score = si_sdr(est[s], ref[s])
            per_source[s] = {"si_sdr_db": score, "si_sdri_db": score - si_sdr(mix, ref[s])}
        else:
            per_source[s] = {"si_sdr_db": None, "si_sdri_db": None, "pes_db": pes(est[s])}

    activity = segment_activity(manifest, segment_s, ref)
    seg_len = int(round(segment_s * manifest.sample_rate))
    per_scenario = {sc: {} for sc in SCENARIOS}
    counts = {sc: 0 for sc in SCENARIOS}
    counts["silent"] = 0
    for k, active in enumerate(activity):
        if not any(active):
            counts["silent"] += 1
            continue
        sc = scenario_name(active)
        counts[sc] += 1
        window = slice(k * seg_len, (k + 1) * seg_len)
        for i, s in enumerate(SOURCES):
            kind = _cell_kind(i, active)
            if kind == "pes":
                value = pes(est[s][window])
            elif kind == "absolute":
                value = si_sdr(est[s][window], ref[s][window])
            else:
                value = si_sdr_improvement(est[s][window], ref[s][window], mix[window])
            per_scenario[sc].setdefault(s, Cell(kind)).values.append(value)
    for sc in SCENARIOS:
        for i, s in enumerate(SOURCES):
            active = tuple(tag in sc for tag in "MSX")
            per_scenario[sc].setdefault(s, Cell(_cell_kind(i, active)))
    return EvalReport(per_source, per_scenario, counts, segment_s)


def merge_reports(reports: list[EvalReport]) -> EvalReport:
    """Pool segment values across mixtures; global scores are per-track means."""
    if not reports:
        raise ValueError("no reports to merge")
    per_source = {}
    for s in SOURCES:
        entry = {}
        for key in ("si_sdr_db", "si_sdri_db", "pes_db"):
            vals = [r.per_source[s].get(key) for r in reports if r.per_source[s].get(key) is not None]
            if vals:
                entry[key] = float(np.mean(vals))
        per_source[s] = entry
    per_scenario = {sc: {} for sc in SCENARIOS}
    counts = {k: 0 for k in list(SCENARIOS) + ["silent"]}
    for r in reports:
        for k, v in r.frame_counts.items():
            counts[k] += v
        for sc in SCENARIOS:
            for s, cell in r.per_scenario[sc].items():
                per_scenario[sc].setdefault(s, Cell(cell.kind)).values.extend(cell.values)
    return EvalReport(per_source, per_scenario, counts, reports[0].segment_s)


def format_table(report: EvalReport) -> str:
    """Plain-text scenario table; ``*`` marks absolute SI-SDR, ``†`` marks PES."""
    head = ["Source"] + ["{" + ",".join(t if t in sc else "∅" for t in "MSX") + "}" for sc in SCENARIOS]
    rows = [head, ["Frames"] + [str(report.frame_counts[sc]) for sc in SCENARIOS]]
    for s in SOURCES:
        row = [s]
        for sc in SCENARIOS:
            cell = report.per_scenario[sc][s]
            row.append("-" if not cell.values else f"{cell.mean:.2f}{cell.marker}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(2, "-" * len(lines[0]))
    glob = ", ".join(
        f"{s}: SI-SDR {v['si_sdr_db']:.2f} dB (SI-SDRi {v['si_sdri_db']:.2f})" if v.get("si_sdr_db") is not None else f"{s}: silent"
        for s, v in report.per_source.items()
    )
    return "\n".join(lines) + "\nGlobal: " + glob + "\n"


def psf_masks(mixture_spec: np.ndarray, source_specs: list[np.ndarray]) -> list[np.ndarray]:
    """Phase-sensitive masks ``clamp(|X| cos(angle X - angle Y) / |Y|, 0, 1)``."""
    power = np.abs(mixture_spec) ** 2
    out = []
    for spec in source_specs:
        num = np.real(spec * np.conj(mixture_spec))
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.where(power > 0, num / power, 0.0)
        out.append(np.clip(m, 0.0, 1.0))
    return out


def oracle_psf(mixture, references, stft_config: StftConfig | None = None) -> list[AudioBuffer]:
    """Separate ``mixture`` with oracle phase-sensitive masks computed from ``references``."""
    mix = mixture if isinstance(mixture, AudioBuffer) else AudioBuffer(mixture, 44100)
    if stft_config is None:
        stft_config = StftConfig.from_ms(32, mix.sample_rate)
    y = stft(mix, stft_config).bins
    refs = [_arr(r) for r in references]
    masks = psf_masks(y, [stft(r, stft_config).bins for r in refs])
    return [AudioBuffer(istft_array(m * y, stft_config, len(mix)), mix.sample_rate) for m in masks]
