"""Conversation simulation with synthetic acoustic features.

Two regimes:

* SM ("simulated mixtures"): every speaker is an independent timeline of
  utterances separated by exponential pauses with mean beta; the recording
  is the union of the timelines, so overlap emerges from independence and
  shrinks as beta grows.
* SC ("simulated conversations"): one shared timeline where turns follow
  each other with pauses or overlaps drawn from empirical histograms
  extracted from a seed corpus, giving much lower overlap ratios.

Features are a stand-in for real filterbanks: each speaker gets a unit
signature vector, a frame is the sum of the signatures of the speakers
active at its midpoint plus Gaussian noise. With zero noise, frames of
different speaker sets are linearly separable by construction.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .annotation import Annotation, overlap_and_speech
from .errors import ConfigError, StatsError

_HIST_QUANTUM = 1e-3  # histogram keys are rounded to milliseconds


@dataclass
class SimStats:
    """Empirical histograms (seconds -> count) from a reference corpus."""

    pauses: dict[float, int]
    overlaps: dict[float, int]
    utterances: dict[float, int]
    speaker_counts: dict[int, int]
    source: str = ""

    def overlap_proportion(self) -> float:
        """Fraction of turn transitions that overlap rather than pause."""
        n_ovl = sum(self.overlaps.values())
        n_pause = sum(self.pauses.values())
        return n_ovl / (n_ovl + n_pause) if n_ovl + n_pause else 0.0

    def mean_pause(self) -> float:
        total = sum(self.pauses.values())
        return sum(k * c for k, c in self.pauses.items()) / total if total else 0.0


@dataclass
class UtterancePool:
    """Log-normal utterance durations, truncated to a sane range."""

    median: float = 2.5
    sigma_log: float = 0.6
    min_dur: float = 0.3
    max_dur: float = 10.0

    def sample(self, rng: np.random.Generator) -> float:
        while True:
            d = float(rng.lognormal(math.log(self.median), self.sigma_log))
            if self.min_dur <= d <= self.max_dur:
                return d


@dataclass
class SynthProfile:
    """Feature-space signatures standing in for real speaker acoustics."""

    signatures: np.ndarray        # (n_speakers, dim), unit rows
    non_speech: np.ndarray        # (dim,)
    noise_sigma: float

    MAX_COSINE = 0.8

    @classmethod
    def build(cls, n_speakers: int, dim: int, noise_sigma: float,
              rng: np.random.Generator) -> "SynthProfile":
        rows: list[np.ndarray] = []
        guard = 0
        while len(rows) < n_speakers:
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if all(abs(float(v @ u)) <= cls.MAX_COSINE for u in rows):
                rows.append(v)
            guard += 1
            if guard > 1000 * n_speakers:
                raise ConfigError("cannot place pairwise separated signatures")
        sigs = np.stack(rows) if rows else np.zeros((0, dim))
        return cls(sigs, np.zeros(dim), noise_sigma)


@dataclass
class SimConfig:
    regime: str = "sm"            # "sm" or "sc"
    n_speakers: int = 2
    n_mixtures: int = 1
    beta: float = 2.0             # SM pause mean (paper pairs 2/5/9/13 with 2-5 spk)
    stats: Optional[SimStats] = None
    pool: UtterancePool = field(default_factory=UtterancePool)
    utterances_per_speaker: tuple[int, int] = (10, 20)
    target_duration: float = 90.0  # SC stops once the timeline passes this
    feature_dim: int = 23
    frame_period: float = 0.01
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.regime not in ("sm", "sc"):
            raise ConfigError(f"unknown simulation regime {self.regime!r}")
        if self.n_speakers < 1:
            raise ConfigError("n_speakers must be >= 1")
        if self.regime == "sm" and self.beta <= 0:
            raise ConfigError("beta must be positive for the SM regime")


def _recording_rng(cfg: SimConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index])


def _file_id(cfg: SimConfig, index: int) -> str:
    return f"{cfg.regime}{cfg.n_speakers}spk_{index:05d}"


# ---------------------------------------------------------------------------
# statistics extraction


def _histogram(values: Iterable[float]) -> dict[float, int]:
    return dict(Counter(round(v / _HIST_QUANTUM) * _HIST_QUANTUM for v in values))


def extract_stats(corpus: list[Annotation], source: str = "") -> SimStats:
    """Pause / overlap / utterance-duration histograms from annotations.

    Consecutive segments (sorted by onset) with positive gaps feed the
    pause histogram; negative gaps feed the overlap histogram.
    """
    pauses: list[float] = []
    overlaps: list[float] = []
    utterances: list[float] = []
    counts: list[int] = []
    n_segments = 0
    for ann in corpus:
        segs = sorted(ann.segments, key=lambda s: (s.start, s.end))
        n_segments += len(segs)
        counts.append(len(ann.speakers()))
        for seg in segs:
            utterances.append(seg.duration)
        for prev, cur in zip(segs, segs[1:]):
            gap = cur.start - prev.end
            if gap >= 0:
                pauses.append(gap)
            else:
                overlaps.append(-gap)
    if n_segments < 2:
        raise StatsError("need at least two segments to extract statistics")
    return SimStats(_histogram(pauses), _histogram(overlaps),
                    _histogram(utterances), dict(Counter(counts)), source)


def _sample_hist(hist: dict[float, int], rng: np.random.Generator) -> float:
    keys = np.array(sorted(hist))
    weights = np.array([hist[k] for k in keys], dtype=float)
    return float(rng.choice(keys, p=weights / weights.sum()))


# ---------------------------------------------------------------------------
# generators


def simulate_sm_annotation(cfg: SimConfig, index: int = 0) -> Annotation:
    rng = _recording_rng(cfg, index)
    ann = Annotation(_file_id(cfg, index))
    for i in range(cfg.n_speakers):
        n_utts = int(rng.integers(*cfg.utterances_per_speaker, endpoint=True))
        t = 0.0
        for _ in range(n_utts):
            t += float(rng.exponential(cfg.beta))
            d = cfg.pool.sample(rng)
            ann.add(f"spk{i + 1}", t, t + d)
            t += d
    return ann


def simulate_sc_annotation(cfg: SimConfig, index: int = 0) -> Annotation:
    if cfg.stats is None:
        raise ConfigError("SC simulation needs extracted statistics")
    stats = cfg.stats
    if not stats.utterances:
        raise ConfigError("statistics carry no utterance durations")
    rng = _recording_rng(cfg, index)
    ann = Annotation(_file_id(cfg, index))
    n = cfg.n_speakers

    # Same-speaker turns never overlap themselves, so the raw transition
    # proportion is rescaled to land back on the measured value.
    p_raw = stats.overlap_proportion()
    p_change = min(1.0, p_raw * n / (n - 1)) if n > 1 and stats.overlaps else 0.0

    # Open with a permutation of all speakers so each one is present.
    order = list(rng.permutation(n))
    speaker_at = lambda k: f"spk{int(order[k]) + 1}" if k < n else f"spk{int(rng.integers(n)) + 1}"

    turn = 0
    prev_start, prev_end, prev_spk = 0.0, 0.0, None
    while prev_end < cfg.target_duration or turn < n:
        spk = speaker_at(turn)
        dur = _sample_hist(stats.utterances, rng)
        if prev_spk is None:
            onset = 0.0
        elif spk != prev_spk and rng.random() < p_change:
            shift = _sample_hist(stats.overlaps, rng)
            onset = max(prev_start, prev_end - shift)
        else:
            onset = prev_end + (_sample_hist(stats.pauses, rng) if stats.pauses else 0.0)
        ann.add(spk, onset, onset + dur)
        prev_start, prev_end, prev_spk = onset, onset + dur, spk
        turn += 1
    return ann


def simulate_annotation(cfg: SimConfig, index: int = 0) -> Annotation:
    if cfg.regime == "sm":
        return simulate_sm_annotation(cfg, index)
    return simulate_sc_annotation(cfg, index)


def synthesize_features(ann: Annotation, profile: SynthProfile, frame_period: float,
                        rng: np.random.Generator,
                        speaker_order: Optional[list[str]] = None) -> np.ndarray:
    """Frame matrix: sum of active speakers' signatures plus Gaussian noise."""
    speakers = speaker_order if speaker_order is not None else ann.speakers()
    if len(speakers) > profile.signatures.shape[0]:
        raise ConfigError("profile has fewer signatures than speakers")
    n_frames = max(1, int(math.ceil(ann.duration() / frame_period - 1e-9)))
    mids = (np.arange(n_frames) + 0.5) * frame_period
    frames = np.tile(profile.non_speech, (n_frames, 1))
    for row, spk in enumerate(speakers):
        active = np.zeros(n_frames, dtype=bool)
        for s, e in ann.speaker_intervals().get(spk, []):
            active |= (mids >= s) & (mids < e)
        frames[active] += profile.signatures[row]
    if profile.noise_sigma > 0:
        frames = frames + rng.normal(0.0, profile.noise_sigma, size=frames.shape)
    return frames


def simulate(cfg: SimConfig, index: int = 0) -> tuple[Annotation, np.ndarray, float]:
    """One recording: annotation plus raw features and their frame period."""
    ann = simulate_annotation(cfg, index)
    rng = np.random.default_rng([cfg.seed, index, 1])
    profile = SynthProfile.build(cfg.n_speakers, cfg.feature_dim, cfg.noise_sigma, rng)
    feats = synthesize_features(ann, profile, cfg.frame_period, rng)
    return ann, feats, cfg.frame_period


# ---------------------------------------------------------------------------
# corpus statistics table


@dataclass
class CorpusReport:
    rows: list[dict]
    overlap_pct: float
    total_hours: float

    def table(self) -> str:
        header = f"{'file':<22} {'dur(s)':>9} {'spk':>4} {'ovl%':>7}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row['id']:<22} {row['duration']:>9.2f} {row['n_speakers']:>4d} "
                f"{row['overlap_pct']:>7.2f}"
            )
        lines.append("-" * len(header))
        lines.append(f"{'TOTAL':<22} {self.total_hours:>8.3f}h {'':>4} {self.overlap_pct:>7.2f}")
        return "\n".join(lines) + "\n"


def corpus_report(corpus: list[Annotation]) -> CorpusReport:
    """Overlap ratio (time with >= 2 speakers over time with >= 1) and sizes."""
    rows = []
    ovl_total = speech_total = 0.0
    hours = 0.0
    for ann in corpus:
        ovl, speech = overlap_and_speech(ann)
        ovl_total += ovl
        speech_total += speech
        hours += ann.duration() / 3600.0
        rows.append({
            "id": ann.file_id,
            "duration": ann.duration(),
            "n_speakers": len(ann.speakers()),
            "overlap_pct": 100.0 * ovl / speech if speech > 0 else 0.0,
        })
    pct = 100.0 * ovl_total / speech_total if speech_total > 0 else 0.0
    return CorpusReport(rows, pct, hours)
