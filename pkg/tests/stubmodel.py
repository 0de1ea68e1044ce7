"""Ground-truth stub model and frame-aligned fixtures for decoding tests.

The stub satisfies the decoding model interface but computes posteriors
straight from a reference annotation: frame embeddings are speaker
indicator vectors, and an enrollment is resolved to the identity with the
largest average indicator. Optional "ghost" stretches inject structured
posterior noise: they appear as extra single-speaker frames belonging to
nobody, each with its own indicator column, which is how over-counting at
small stop lengths is reproduced.
"""

import numpy as np

from diarkit.annotation import Annotation
from diarkit.training import ROW_NON, ROW_OVL, ROW_SGL, build_labels


class OracleStubModel:
    def __init__(self, reference: Annotation, n_frames: int, frame_period: float,
                 hi: float = 0.95, lo: float = 0.05,
                 ghosts: list[tuple[int, int]] = ()):  # [start, end) frame spans
        labels = build_labels(reference, n_frames, frame_period, reference.speakers())
        self.n_frames = n_frames
        self.n_true = labels.n_speakers
        self.hi, self.lo = hi, lo
        self.speaker_active = labels.values[3:].astype(bool)
        self.ghost_active = np.zeros((len(ghosts), n_frames), dtype=bool)
        for g, (a, b) in enumerate(ghosts):
            self.ghost_active[g, a:b] = True
        if np.any(self.ghost_active[:, labels.values[ROW_NON] == 0]):
            raise ValueError("ghost spans must sit inside silence")
        self.non = (labels.values[ROW_NON] == 1) & ~self.ghost_active.any(axis=0)
        self.sgl = (labels.values[ROW_SGL] == 1) | self.ghost_active.any(axis=0)
        self.ovl = labels.values[ROW_OVL] == 1
        self.identity_active = np.concatenate(
            [self.speaker_active, self.ghost_active], axis=0
        )

    @property
    def dim(self) -> int:
        return self.identity_active.shape[0]

    def frame_embeddings(self, features) -> np.ndarray:
        return self.identity_active.T.astype(float)

    def _row(self, mask: np.ndarray) -> np.ndarray:
        return np.where(mask, self.hi, self.lo)

    def enrollment_posteriors(self, emb: np.ndarray,
                              speaker_enrolls: np.ndarray) -> np.ndarray:
        rows = [self._row(self.non), self._row(self.sgl), self._row(self.ovl)]
        for vec in np.atleast_2d(speaker_enrolls):
            if vec.size == 0:
                continue
            identity = int(np.argmax(vec))
            rows.append(self._row(self.identity_active[identity]))
        return np.stack(rows)


def grid_conversation(rng, n_speakers: int, frame_period: float = 0.1,
                      n_turns: int = 12, min_solo_frames: int = 12,
                      max_turn_frames: int = None,
                      file_id: str = "fixture") -> Annotation:
    """A frame-aligned conversation where decoding can be exact.

    All boundaries are multiples of the frame period; different-speaker
    turns are separated by at least one frame of pause or overlap, so
    single-speaker runs never straddle a speaker change; every speaker
    gets at least one turn of min_solo_frames frames.
    """
    if max_turn_frames is None:
        max_turn_frames = min_solo_frames + 24
    ann = Annotation(file_id)
    t = int(rng.integers(2, 8))  # leading silence, frames
    prev_end = t
    order = [i % n_speakers for i in range(n_turns)]
    rng.shuffle(order)
    for k, spk in enumerate(order):
        dur = int(rng.integers(min_solo_frames + 4, max_turn_frames + 1))
        if k == 0:
            start = prev_end
        elif rng.random() < 0.75:
            start = prev_end + int(rng.integers(1, 12))  # pause >= 1 frame
        else:
            start = prev_end - int(rng.integers(1, min(4, dur - min_solo_frames)))
        ann.add(f"ref{spk + 1}", start * frame_period, (start + dur) * frame_period)
        prev_end = start + dur
    # make sure every speaker is present even for tiny n_turns
    for spk in range(n_speakers):
        if f"ref{spk + 1}" not in ann.speakers():
            start = prev_end + 2
            ann.add(f"ref{spk + 1}", start * frame_period,
                    (start + min_solo_frames + 6) * frame_period)
            prev_end = start + min_solo_frames + 6
    return ann
