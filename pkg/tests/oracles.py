"""Independent reference implementations used as test oracles.

These are coded from the textbook definitions with plain loops and a
different algebraic form from the package code, so agreement is evidence
rather than tautology.
"""

import math
from fractions import Fraction

import numpy as np

from stemsplit.audio_io import AnnotationManifest, Event

EPS = 1e-8
SCENARIO_ORDER = ("MSX", "SX", "MX", "MS", "M", "S", "X")


def si_sdr_direct(estimate, reference) -> float:
    """Textbook projection form evaluated in exact rational arithmetic, rounded once at the log."""
    est = [Fraction(float(v)) for v in estimate]
    ref = [Fraction(float(v)) for v in reference]
    alpha = sum(a * b for a, b in zip(est, ref)) / sum(b * b for b in ref)
    target = [alpha * b for b in ref]
    t_energy = sum(t * t for t in target)
    e_energy = sum((a - t) ** 2 for a, t in zip(est, target))
    return 10 * math.log10(t_energy / (e_energy + Fraction(EPS) * t_energy))


def pes_direct(x) -> float:
    return 10 * math.log10(math.fsum(float(v) ** 2 for v in x) / len(x) + EPS)


def scripted_manifest(pattern: list[str], sample_rate: int) -> AnnotationManifest:
    """One event per active (second, source); ``pattern[k]`` lists the active tags of second ``k``."""
    events = []
    classes = {"M": "music", "S": "speech", "X": "sfx_fg"}
    for k, tags in enumerate(pattern):
        for tag in tags:
            events.append(Event(classes[tag], f"{tag}.wav", 0.0, float(k), float(k + 1), 0.0))
    return AnnotationManifest("scripted", float(len(pattern)), sample_rate, {}, events)


def brute_force_cells(pattern, estimates, references, mixture, sample_rate):
    """Per-(scenario, source) cell means straight from the script, one segment at a time."""
    cells = {}
    for k, tags in enumerate(pattern):
        if not tags:
            continue
        scenario = "".join(t for t in "MSX" if t in tags)
        lo, hi = k * sample_rate, (k + 1) * sample_rate
        for tag, src in zip("MSX", ("music", "speech", "sfx")):
            est = estimates[src][lo:hi]
            if tag not in tags:
                kind, value = "pes", pes_direct(est)
            elif len(tags) == 1:
                kind, value = "absolute", si_sdr_direct(est, references[src][lo:hi])
            else:
                kind = "improvement"
                value = si_sdr_direct(est, references[src][lo:hi]) - si_sdr_direct(mixture[lo:hi], references[src][lo:hi])
            cells.setdefault((scenario, src), (kind, []))[1].append(value)
    return {key: (kind, float(np.mean(vals))) for key, (kind, vals) in cells.items()}


def scripted_signals(pattern, sample_rate, seed=0, leak=0.1):
    """References active exactly where scripted, plus leaky noisy estimates."""
    rng = np.random.default_rng(seed)
    n = len(pattern) * sample_rate
    refs = {}
    for tag, src in zip("MSX", ("music", "speech", "sfx")):
        x = np.zeros(n)
        for k, tags in enumerate(pattern):
            if tag in tags:
                x[k * sample_rate : (k + 1) * sample_rate] = rng.standard_normal(sample_rate) * rng.uniform(0.05, 0.5)
        refs[src] = x
    mixture = refs["music"] + refs["speech"] + refs["sfx"]
    ests = {s: refs[s] + leak * rng.uniform(0.1, 1.0) * mixture + 0.01 * rng.standard_normal(n) for s in refs}
    return refs, ests, mixture
