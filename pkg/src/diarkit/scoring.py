"""Diarization and speech-type evaluation.

DER is computed in continuous time: the union of reference and hypothesis
boundaries (plus collar edges) cuts the recording into elementary
intervals, and each interval contributes miss / false-alarm / confusion
seconds under the standard rich-transcription accounting. The
hypothesis-to-reference speaker mapping is the one-to-one assignment that
maximises correctly attributed time, solved exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotation import Annotation, merge_intervals


@dataclass
class ScoredPiece:
    start: float
    end: float
    ref_active: frozenset
    hyp_active: frozenset

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class DerResult:
    miss: float
    falarm: float
    confusion: float
    total_ref: float
    der: float
    mapping: dict[str, str] = field(default_factory=dict)  # hyp -> ref

    @property
    def der_pct(self) -> float:
        return 100.0 * self.der


@dataclass
class TypeMetrics:
    """Per speech type: false-alarm rate, miss rate, F1, all in percent."""

    fa: float
    miss: float
    f1: float


def scored_timeline(ref: Annotation, hyp: Annotation, collar: float = 0.0,
                    score_overlap: bool = True) -> list[ScoredPiece]:
    """Elementary intervals that survive collar (and overlap) exclusion.

    The collar removes +-collar around every reference interval boundary.
    With score_overlap off, intervals where the reference has two or more
    active speakers are excluded entirely.
    """
    ref_iv = ref.speaker_intervals()
    hyp_iv = hyp.speaker_intervals()

    zones: list[tuple[float, float]] = []
    if collar > 0.0:
        for ivs in ref_iv.values():
            for s, e in ivs:
                zones.append((s - collar, s + collar))
                zones.append((e - collar, e + collar))
        zones = merge_intervals(zones)

    points: set[float] = {0.0}
    for ivs in list(ref_iv.values()) + list(hyp_iv.values()):
        for s, e in ivs:
            points.update((s, e))
    for s, e in zones:
        points.update((s, e))
    times = sorted(p for p in points if p >= 0.0)
    if len(times) < 2:
        return []

    def active_at(ivs: dict, t0: float, t1: float) -> frozenset:
        mid = 0.5 * (t0 + t1)
        return frozenset(spk for spk, spans in ivs.items()
                         if any(s <= mid < e for s, e in spans))

    pieces: list[ScoredPiece] = []
    zi = 0
    for t0, t1 in zip(times, times[1:]):
        if t1 - t0 <= 0.0:
            continue
        mid = 0.5 * (t0 + t1)
        while zi < len(zones) and zones[zi][1] <= t0:
            zi += 1
        if zi < len(zones) and zones[zi][0] <= mid < zones[zi][1]:
            continue
        ref_set = active_at(ref_iv, t0, t1)
        if not score_overlap and len(ref_set) >= 2:
            continue
        pieces.append(ScoredPiece(t0, t1, ref_set, active_at(hyp_iv, t0, t1)))
    return pieces


def _overlap_matrix(pieces: list[ScoredPiece]) -> tuple[list[str], list[str], np.ndarray]:
    ref_spk = sorted({s for p in pieces for s in p.ref_active})
    hyp_spk = sorted({s for p in pieces for s in p.hyp_active})
    grid = np.zeros((len(ref_spk), len(hyp_spk)))
    r_idx = {s: i for i, s in enumerate(ref_spk)}
    h_idx = {s: i for i, s in enumerate(hyp_spk)}
    for p in pieces:
        for r in p.ref_active:
            for h in p.hyp_active:
                grid[r_idx[r], h_idx[h]] += p.length
    return ref_spk, hyp_spk, grid


def optimal_mapping(pieces: list[ScoredPiece]) -> dict[str, str]:
    """hyp speaker -> ref speaker map maximising co-occurring scored time."""
    ref_spk, hyp_spk, grid = _overlap_matrix(pieces)
    if not ref_spk or not hyp_spk:
        return {}
    rows, cols = linear_sum_assignment(-grid)
    return {hyp_spk[c]: ref_spk[r] for r, c in zip(rows, cols) if grid[r, c] > 0.0}


def der(ref: Annotation, hyp: Annotation, collar: float = 0.0,
        score_overlap: bool = True) -> DerResult:
    """Diarization error rate with exact collar handling.

    An empty (or fully collar-excluded) reference leaves the rate
    undefined: der is NaN while the false-alarm seconds stay meaningful.
    """
    pieces = scored_timeline(ref, hyp, collar, score_overlap)
    mapping = optimal_mapping(pieces)
    ref_of = mapping  # alias: mapping is hyp -> ref
    miss = falarm = confusion = total_ref = 0.0
    for p in pieces:
        nr, nh = len(p.ref_active), len(p.hyp_active)
        matched = sum(1 for h in p.hyp_active if ref_of.get(h) in p.ref_active)
        total_ref += p.length * nr
        miss += p.length * max(0, nr - nh)
        falarm += p.length * max(0, nh - nr)
        confusion += p.length * (min(nr, nh) - matched)
    rate = (miss + falarm + confusion) / total_ref if total_ref > 0 else math.nan
    return DerResult(miss, falarm, confusion, total_ref, rate, mapping)


def jer(ref: Annotation, hyp: Annotation, collar: float = 0.0) -> float:
    """Jaccard error rate in percent.

    Mean over reference speakers of 1 - |intersection| / |union| against
    the optimally mapped hypothesis speaker; reference speakers without a
    mapped partner count as 100.
    """
    pieces = scored_timeline(ref, hyp, collar, score_overlap=True)
    mapping = optimal_mapping(pieces)
    hyp_of = {r: h for h, r in mapping.items()}
    ref_speakers = sorted({s for p in pieces for s in p.ref_active})
    if not ref_speakers:
        return math.nan
    rates = []
    for r in ref_speakers:
        h = hyp_of.get(r)
        if h is None:
            rates.append(1.0)
            continue
        inter = union = 0.0
        for p in pieces:
            in_r, in_h = r in p.ref_active, h in p.hyp_active
            if in_r and in_h:
                inter += p.length
            if in_r or in_h:
                union += p.length
        rates.append(1.0 - inter / union if union > 0 else 0.0)
    return 100.0 * float(np.mean(rates))


def aggregate_der(results: list[DerResult]) -> DerResult:
    """Corpus-level DER: sum component seconds, then divide."""
    miss = sum(r.miss for r in results)
    falarm = sum(r.falarm for r in results)
    confusion = sum(r.confusion for r in results)
    total = sum(r.total_ref for r in results)
    rate = (miss + falarm + confusion) / total if total > 0 else math.nan
    return DerResult(miss, falarm, confusion, total, rate)


# ---------------------------------------------------------------------------
# speaker counting


@dataclass
class CountingResult:
    matrix: np.ndarray  # matrix[pred][ref]
    accuracy: float


def speaker_count_confusion(pairs: list[tuple[int, int]]) -> CountingResult:
    """Confusion matrix over (reference count, predicted count) pairs."""
    if not pairs:
        return CountingResult(np.zeros((1, 1), dtype=int), math.nan)
    top = max(max(r, h) for r, h in pairs)
    matrix = np.zeros((top + 1, top + 1), dtype=int)
    for ref_count, hyp_count in pairs:
        matrix[hyp_count, ref_count] += 1
    accuracy = float(np.trace(matrix)) / len(pairs)
    return CountingResult(matrix, 100.0 * accuracy)


# ---------------------------------------------------------------------------
# speech-type detection metrics

SPEECH_TYPES = ("speech", "single", "overlap")


def reference_type_frames(ref: Annotation, n_frames: int,
                          frame_period: float) -> dict[str, np.ndarray]:
    """Boolean frame masks for speech / single-speaker / overlap regions."""
    mids = (np.arange(n_frames) + 0.5) * frame_period
    counts = np.zeros(n_frames, dtype=int)
    for ivs in ref.speaker_intervals().values():
        for s, e in ivs:
            counts += ((mids >= s) & (mids < e)).astype(int)
    return {
        "speech": counts >= 1,
        "single": counts == 1,
        "overlap": counts >= 2,
    }


def speech_type_metrics(ref: Annotation, predicted: dict[str, np.ndarray],
                        n_frames: int, frame_period: float) -> dict[str, TypeMetrics]:
    """Frame-level FA / MISS / F1 for each speech type, scored independently.

    `predicted` maps each type name to a sorted array of positive frame
    indices; conflicting predictions across types are allowed and each
    type is judged on its own.
    """
    ref_masks = reference_type_frames(ref, n_frames, frame_period)
    out: dict[str, TypeMetrics] = {}
    for kind in SPEECH_TYPES:
        pred = np.zeros(n_frames, dtype=bool)
        idx = np.asarray(predicted.get(kind, ()), dtype=int)
        if idx.size:
            pred[idx] = True
        refm = ref_masks[kind]
        tp = float(np.sum(pred & refm))
        fp = float(np.sum(pred & ~refm))
        fn = float(np.sum(~pred & refm))
        neg = float(np.sum(~refm))
        pos = float(np.sum(refm))
        fa = 100.0 * fp / neg if neg > 0 else 0.0
        miss = 100.0 * fn / pos if pos > 0 else 0.0
        if tp + fp + fn == 0:
            f1 = 100.0  # nothing to find and nothing claimed
        else:
            precision = tp / (tp + fp) if tp + fp > 0 else 0.0
            recall = tp / (tp + fn) if tp + fn > 0 else 0.0
            f1 = (100.0 * 2 * precision * recall / (precision + recall)
                  if precision + recall > 0 else 0.0)
        out[kind] = TypeMetrics(fa, miss, f1)
    return out


# ---------------------------------------------------------------------------
# reporting


def format_report(rows: list[tuple[str, DerResult, float]]) -> str:
    """Aligned text table over per-file results plus a component-sum total."""
    header = f"{'file':<20} {'miss':>9} {'falarm':>9} {'conf':>9} {'ref':>9} {'DER%':>8} {'JER%':>8}"
    lines = [header, "-" * len(header)]
    for file_id, result, jer_pct in rows:
        lines.append(
            f"{file_id:<20} {result.miss:>9.3f} {result.falarm:>9.3f} "
            f"{result.confusion:>9.3f} {result.total_ref:>9.3f} "
            f"{result.der_pct:>8.3f} {jer_pct:>8.3f}"
        )
    total = aggregate_der([r for _, r, _ in rows])
    mean_jer = float(np.mean([j for _, _, j in rows])) if rows else math.nan
    lines.append("-" * len(header))
    lines.append(
        f"{'TOTAL':<20} {total.miss:>9.3f} {total.falarm:>9.3f} "
        f"{total.confusion:>9.3f} {total.total_ref:>9.3f} "
        f"{total.der_pct:>8.3f} {mean_jer:>8.3f}"
    )
    return "\n".join(lines) + "\n"


def report_records(rows: list[tuple[str, DerResult, float]]) -> str:
    """Line-delimited JSON records mirroring the text table."""
    out = []
    for file_id, result, jer_pct in rows:
        out.append(json.dumps({
            "file": file_id,
            "miss": result.miss,
            "falarm": result.falarm,
            "confusion": result.confusion,
            "total_ref": result.total_ref,
            "der": result.der,
            "jer": jer_pct,
        }, sort_keys=True))
    return "\n".join(out) + ("\n" if out else "")
