"""Teacher-forced training: labels, enrollment sampling, losses, optimisation.

Each training segment is labelled with an (S+3) x T binary matrix whose
first three rows mark non-speech, single-speaker speech, and overlapped
speech, followed by one row per speaker. Speaker enrollments are averaged
frame embeddings from a randomly chosen single-speaker stretch of that same
segment, so each posterior row is tied to the speaker that produced its
enrollment and no permutation search is ever needed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as tt
from .annotation import Annotation
from .errors import ConfigError
from .nn import DiarizationModel
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

ROW_NON, ROW_SGL, ROW_OVL = 0, 1, 2
CLAMP_EPS = 1e-7


@dataclass
class LabelMatrix:
    """(S+3) x T binary activity matrix plus its frame period."""

    values: np.ndarray
    speaker_order: list[str]
    frame_period: float

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_order)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def speaker_row(self, index: int) -> np.ndarray:
        return self.values[3 + index]


@dataclass
class TrainConfig:
    segment_len: float = 50.0
    batch_size: int = 64
    el_range: tuple[float, float] = (1.0, 3.0)
    enroll_drop_p: float = 0.5
    drop_mode: str = "per_speaker"  # or "all_speakers"
    warmup_steps: int = 200_000
    epochs: int = 100
    max_steps: Optional[int] = None
    adapt_lr: float = 1e-5
    downsample: int = 10
    log_every: int = 10

    def __post_init__(self):
        if self.el_range[0] > self.el_range[1] or self.el_range[0] <= 0:
            raise ConfigError(f"bad enrollment length range {self.el_range}")
        if not 0.0 <= self.enroll_drop_p <= 1.0:
            raise ConfigError(f"bad enrollment dropout probability {self.enroll_drop_p}")
        if self.drop_mode not in ("per_speaker", "all_speakers"):
            raise ConfigError(f"unknown drop mode {self.drop_mode!r}")


def build_labels(ann: Annotation, n_frames: int, frame_period: float,
                 speaker_order: Sequence[str]) -> LabelMatrix:
    """Rasterise segments onto the frame grid using frame midpoints.

    Frame t is active for a speaker iff the midpoint of [t*p, (t+1)*p)
    falls inside one of that speaker's segments. The three activity rows
    are derived so that exactly one of them is set per frame.
    """
    missing = set(ann.speakers()) - set(speaker_order)
    if missing:
        raise ConfigError(f"speaker_order misses speakers {sorted(missing)}")
    values = np.zeros((3 + len(speaker_order), n_frames), dtype=np.int8)
    mids = (np.arange(n_frames) + 0.5) * frame_period
    intervals = ann.speaker_intervals()
    for i, spk in enumerate(speaker_order):
        for s, e in intervals.get(spk, []):
            values[3 + i][(mids >= s) & (mids < e)] = 1
    counts = values[3:].sum(axis=0)
    values[ROW_NON] = counts == 0
    values[ROW_SGL] = counts == 1
    values[ROW_OVL] = counts >= 2
    return LabelMatrix(values, list(speaker_order), frame_period)


# ---------------------------------------------------------------------------
# enrollment construction


@dataclass
class SpeakerEnrollment:
    row: int          # index into the label speaker order
    speaker: str
    vector: Tensor    # 1 x D averaged embedding
    frames: np.ndarray


def _runs(mask: np.ndarray) -> list[np.ndarray]:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    return np.split(idx, breaks + 1)


def sample_enrollments(labels: LabelMatrix, emb: Tensor,
                       el_range: tuple[float, float],
                       rng: np.random.Generator) -> tuple[list[SpeakerEnrollment], list[int]]:
    """One averaged-embedding enrollment per speaker with single-speaker frames.

    The enrollment length is drawn uniformly from el_range (seconds) and
    truncated to the longest available run when no run is long enough.
    Speakers with no single-speaker frames are dropped and reported.
    """
    enrolls: list[SpeakerEnrollment] = []
    dropped: list[int] = []
    t_total = labels.n_frames
    for i, spk in enumerate(labels.speaker_order):
        solo = (labels.speaker_row(i) == 1) & (labels.values[ROW_SGL] == 1)
        runs = _runs(solo)
        if not runs:
            dropped.append(i)
            continue
        el_sec = rng.uniform(*el_range)
        length = max(1, int(round(el_sec / labels.frame_period)))
        candidates = [r for r in runs if r.size >= length]
        if candidates:
            run = candidates[int(rng.integers(len(candidates)))]
            offset = int(rng.integers(run.size - length + 1))
            frames = run[offset : offset + length]
        else:
            frames = max(runs, key=lambda r: r.size)
        weights = np.zeros((1, t_total))
        weights[0, frames] = 1.0 / frames.size
        vector = tt.matmul(Tensor(weights), emb)
        enrolls.append(SpeakerEnrollment(i, spk, vector, frames))
    return enrolls, dropped


def enrollment_dropout(enrolls: list[SpeakerEnrollment], p: float,
                       rng: np.random.Generator,
                       mode: str = "per_speaker") -> list[SpeakerEnrollment]:
    """Randomly withhold speaker enrollments; activity rows are never dropped.

    per_speaker keeps each enrollment independently with probability 1-p;
    all_speakers makes a single keep-or-drop draw for the whole set.
    """
    if p <= 0.0 or not enrolls:
        return list(enrolls)
    if mode == "all_speakers":
        return [] if rng.random() < p else list(enrolls)
    return [e for e in enrolls if rng.random() >= p]


def stack_enrollments(enrolls: list[SpeakerEnrollment]) -> Optional[Tensor]:
    if not enrolls:
        return None
    return tt.concat_rows([e.vector for e in enrolls])


def select_label_rows(labels: LabelMatrix, enrolls: list[SpeakerEnrollment]) -> np.ndarray:
    """Activity rows plus the rows of the enrolled speakers, in enrollment order."""
    rows = [ROW_NON, ROW_SGL, ROW_OVL] + [3 + e.row for e in enrolls]
    return labels.values[rows].astype(float)


# ---------------------------------------------------------------------------
# losses and schedule


def bce_loss(post: Tensor, label_values: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all retained rows and frames.

    Posteriors outside (eps, 1-eps) are clamped and a warning is recorded;
    with no dropped speakers the denominator is T*(S+3).
    """
    if post.shape != label_values.shape:
        raise ConfigError(f"posterior {post.shape} vs labels {label_values.shape}")
    if np.any(post.data <= CLAMP_EPS) or np.any(post.data >= 1.0 - CLAMP_EPS):
        log.warning("bce_loss: clamping posteriors outside (%g, 1-%g)", CLAMP_EPS, CLAMP_EPS)
    p = tt.clip(post, CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = np.asarray(label_values, dtype=np.float64)
    pos = tt.mul(tt.log(p), Tensor(y))
    neg = tt.mul(tt.log(tt.add_scalar(tt.scale(p, -1.0), 1.0)), Tensor(1.0 - y))
    return tt.scale(tt.tensor_sum(tt.add(pos, neg)), -1.0 / p.size)


def total_loss(post: Tensor, post_enhanced: Optional[Tensor],
               label_values: np.ndarray) -> Tensor:
    """Plain-head loss, plus the enhanced-head loss when that head exists."""
    loss = bce_loss(post, label_values)
    if post_enhanced is not None:
        loss = tt.add(loss, bce_loss(post_enhanced, label_values))
    return loss


def noam_lr(step: int, model_dim: int, warmup: int) -> float:
    """Inverse-sqrt schedule with a linear warmup ramp."""
    if step < 1:
        raise ConfigError("noam_lr: step starts at 1")
    return model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """First-order adaptive-moment optimiser over a deduplicated parameter list."""

    def __init__(self, params: list[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        unique: dict[int, Parameter] = {}
        for p in params:
            unique.setdefault(id(p), p)
        self.params = list(unique.values())
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.tensor.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSegment:
    features: np.ndarray
    frame_period: float
    annotation: Annotation


@dataclass
class TrainResult:
    model: DiarizationModel
    history: list[dict] = field(default_factory=list)


def segment_dataset(items: Iterable[tuple[np.ndarray, float, Annotation]],
                    segment_len: float) -> list[TrainSegment]:
    """Chop (features, frame_period, annotation) recordings into fixed windows."""
    segments: list[TrainSegment] = []
    for values, period, ann in items:
        frames_per_seg = max(1, int(round(segment_len / period)))
        t_total = values.shape[0]
        start = 0
        while start < t_total:
            stop = min(start + frames_per_seg, t_total)
            if stop - start >= 2:
                window = ann.crop(start * period, stop * period)
                segments.append(TrainSegment(values[start:stop], period, window))
            start = stop
    return segments


def segment_loss(model: DiarizationModel, seg: TrainSegment, cfg: TrainConfig,
                 rng: np.random.Generator, with_dropout: bool = True) -> Tensor:
    """Teacher-forced loss of one segment, honouring enrollment dropout."""
    speakers = seg.annotation.speakers()
    labels = build_labels(seg.annotation, seg.features.shape[0], seg.frame_period, speakers)
    emb = model.encode(seg.features)
    enrolls, _ = sample_enrollments(labels, emb, cfg.el_range, rng)
    if with_dropout:
        enrolls = enrollment_dropout(enrolls, cfg.enroll_drop_p, rng, cfg.drop_mode)
    result = model.heads(emb, stack_enrollments(enrolls))
    return total_loss(result.posteriors, result.enhanced_posteriors,
                      select_label_rows(labels, enrolls))


def train_loop(dataset: list[tuple[np.ndarray, float, Annotation]],
               model: DiarizationModel, cfg: TrainConfig, mode: str = "pretrain",
               seed: int = 0, log_path=None,
               dev_set: Optional[list[tuple[np.ndarray, float, Annotation]]] = None,
               callback=None) -> TrainResult:
    """Optimise the model over segment batches.

    Pretraining follows the warmup-then-decay schedule; adaptation keeps a
    fixed small learning rate. One epoch visits every segment once in a
    seeded random order. `callback(step, loss)` may return True to stop
    early (used by budget-capped experiments).
    """
    if mode not in ("pretrain", "adapt"):
        raise ConfigError(f"unknown training mode {mode!r}")
    segments = segment_dataset(dataset, cfg.segment_len)
    if not segments:
        raise ConfigError("empty training dataset")
    dev_segments = segment_dataset(dev_set, cfg.segment_len) if dev_set else None

    rng = np.random.default_rng(seed)
    optimiser = Adam(model.parameters())
    history: list[dict] = []
    sink = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(record: dict) -> None:
        history.append(record)
        if sink:
            sink.write(json.dumps(record) + "\n")
            sink.flush()

    step = 0
    stop = False
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(segments))
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                step += 1
                model.set_training(True)
                model.zero_grad()
                loss = tt.scale(
                    _sum_losses([segment_loss(model, segments[i], cfg, rng) for i in batch]),
                    1.0 / len(batch),
                )
                tt.backward(loss)
                lr = (noam_lr(step, model.cfg.attn_dim, cfg.warmup_steps)
                      if mode == "pretrain" else cfg.adapt_lr)
                optimiser.step(lr)
                value = float(loss.data)
                if step % cfg.log_every == 0 or step == 1:
                    emit({"epoch": epoch, "step": step, "loss": value, "lr": lr})
                if callback is not None and callback(step, value):
                    stop = True
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stop = True
                if stop:
                    break
            if dev_segments and not stop:
                emit({"epoch": epoch, "step": step,
                      "dev_loss": _dev_loss(model, dev_segments, cfg, seed + 7177)})
            if stop:
                break
    finally:
        model.set_training(False)
        if sink:
            sink.close()
    return TrainResult(model, history)


def _sum_losses(losses: list[Tensor]) -> Tensor:
    acc = losses[0]
    for item in losses[1:]:
        acc = tt.add(acc, item)
    return acc


def _dev_loss(model: DiarizationModel, segments: list[TrainSegment],
              cfg: TrainConfig, seed: int) -> float:
    rng = np.random.default_rng(seed)
    model.set_training(False)
    with tt.no_grad():
        values = [float(segment_loss(model, s, cfg, rng, with_dropout=False).data)
                  for s in segments]
    model.set_training(True)
    return float(np.mean(values))
