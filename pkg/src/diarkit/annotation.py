"""Speaker segment annotations shared by simulation, training, and scoring."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True, order=True)
class Segment:
    speaker: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Annotation:
    """A set of (speaker, start, end) speech segments for one recording.

    Ground truth and hypotheses share this type; segments of one speaker may
    overlap segments of another (or, in sloppy hypotheses, themselves).
    """

    file_id: str
    segments: list[Segment] = field(default_factory=list)

    def add(self, speaker: str, start: float, end: float) -> None:
        if end <= start:
            raise ValueError(f"segment for {speaker!r} has non-positive duration")
        self.segments.append(Segment(speaker, start, end))

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def duration(self) -> float:
        return max((s.end for s in self.segments), default=0.0)

    def speaker_intervals(self) -> dict[str, list[tuple[float, float]]]:
        """Per-speaker intervals with same-speaker overlaps merged."""
        by_spk: dict[str, list[tuple[float, float]]] = {}
        for seg in sorted(self.segments):
            by_spk.setdefault(seg.speaker, []).append((seg.start, seg.end))
        return {spk: merge_intervals(ivs) for spk, ivs in by_spk.items()}

    def crop(self, t0: float, t1: float) -> "Annotation":
        """Clip to [t0, t1) and shift so the window starts at zero."""
        out = Annotation(self.file_id)
        for seg in self.segments:
            s, e = max(seg.start, t0), min(seg.end, t1)
            if e > s:
                out.segments.append(Segment(seg.speaker, s - t0, e - t0))
        return out


def merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    if not intervals:
        return []
    intervals = sorted(intervals)
    merged = [intervals[0]]
    for s, e in intervals[1:]:
        ls, le = merged[-1]
        if s <= le:
            merged[-1] = (ls, max(le, e))
        else:
            merged.append((s, e))
    return merged


def activity_timeline(ann: Annotation) -> list[tuple[float, float, frozenset]]:
    """Elementary intervals with the set of speakers active in each.

    Intervals cover [0, duration) without gaps; the empty set marks silence.
    """
    events: list[tuple[float, int, str]] = []
    for spk, ivs in ann.speaker_intervals().items():
        for s, e in ivs:
            events.append((s, +1, spk))
            events.append((e, -1, spk))
    if not events:
        return []
    times = sorted({t for t, _, _ in events} | {0.0})
    out: list[tuple[float, float, frozenset]] = []
    active: set[str] = set()
    by_time: dict[float, list[tuple[int, str]]] = {}
    for t, kind, spk in events:
        by_time.setdefault(t, []).append((kind, spk))
    for i, t in enumerate(times):
        for kind, spk in by_time.get(t, []):
            if kind > 0:
                active.add(spk)
            else:
                active.discard(spk)
        if i + 1 < len(times):
            out.append((t, times[i + 1], frozenset(active)))
    return out


def overlap_and_speech(ann: Annotation) -> tuple[float, float]:
    """(seconds with >= 2 active speakers, seconds with >= 1 active speaker)."""
    ovl = speech = 0.0
    for s, e, active in activity_timeline(ann):
        if len(active) >= 1:
            speech += e - s
        if len(active) >= 2:
            ovl += e - s
    return ovl, speech
