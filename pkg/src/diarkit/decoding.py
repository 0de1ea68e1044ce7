"""Iterative enrollment decoding.

Inference runs the model once with only the three activity enrollments to
find non-speech / single-speaker / overlap frames, then repeatedly:
takes the single-speaker frames no decoded speaker has claimed yet, picks a
contiguous stretch believed to contain exactly one speaker (four selection
strategies), averages its frame embeddings into a new enrollment, and
reruns the model with all enrollments gathered so far. Decoding stops when
the longest unclaimed stretch falls below the stop decoding length, or,
when the speaker count is known in advance, once that many speakers exist.

The model is anything exposing `frame_embeddings(features) -> (T, D)` and
`enrollment_posteriors(embeddings, speaker_rows) -> (S+3, T)`; tests drive
the loop with a ground-truth stub through the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
from scipy.linalg import eigh

from .annotation import Annotation
from .errors import ConfigError

STRATEGIES = ("init", "rand", "sc", "sc-local")


class DecodableModel(Protocol):
    def frame_embeddings(self, features: np.ndarray) -> np.ndarray: ...

    def enrollment_posteriors(self, emb: np.ndarray,
                              speaker_enrolls: np.ndarray) -> np.ndarray: ...


@dataclass
class DecodeConfig:
    strategy: str = "sc"
    el: float = 0.5          # enrollment length, seconds
    sdl: float = 1.0         # stop decoding length, seconds
    threshold: float = 0.5
    max_speakers: Optional[int] = None  # oracle-count mode
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, pick from {STRATEGIES}")
        if self.el <= 0 or self.sdl <= 0:
            raise ConfigError("enrollment and stop lengths must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly inside (0, 1)")


@dataclass
class DecodeResult:
    speaker_frames: list[np.ndarray]
    non_frames: np.ndarray
    sgl_frames: np.ndarray
    ovl_frames: np.ndarray
    n_frames: int
    frame_period: float
    trace: list[dict] = field(default_factory=list)
    speaker_names: Optional[list[str]] = None

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_frames)

    def to_annotation(self, file_id: str) -> Annotation:
        ann = Annotation(file_id)
        names = self.speaker_names or [f"spk{i + 1}" for i in range(self.n_speakers)]
        for name, frames in zip(names, self.speaker_frames):
            for run in continuous_segments(frames):
                ann.add(name, run[0] * self.frame_period, (run[-1] + 1) * self.frame_period)
        return ann

    def speech_type_predictions(self) -> dict[str, np.ndarray]:
        """Per-type frame indices; speech is the inverted non-speech row."""
        all_frames = np.arange(self.n_frames)
        return {
            "speech": np.setdiff1d(all_frames, self.non_frames),
            "single": self.sgl_frames,
            "overlap": self.ovl_frames,
        }


# ---------------------------------------------------------------------------
# index plumbing


def binarize(post: np.ndarray, threshold: float) -> list[np.ndarray]:
    """Strictly-greater thresholding of each posterior row into frame indices."""
    return [np.flatnonzero(row > threshold) for row in post]


def continuous_segments(indices: np.ndarray) -> list[np.ndarray]:
    """Maximal runs of consecutive indices, in time order."""
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    return np.split(idx, breaks + 1)


def filter_segs(segments: list[np.ndarray], min_len: int) -> list[np.ndarray]:
    return [seg for seg in segments if seg.size >= min_len]


def _longest(segments: list[np.ndarray]) -> np.ndarray:
    return max(segments, key=lambda s: s.size)  # ties resolve to the earliest


# ---------------------------------------------------------------------------
# spectral clustering


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
            n_init: int = 5, iters: int = 60) -> np.ndarray:
    n = x.shape[0]
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        # k-means++ seeding
        centers = [x[int(rng.integers(n))]]
        for _ in range(1, k):
            d2 = np.min(
                [np.sum((x - c) ** 2, axis=1) for c in centers], axis=0
            )
            total = d2.sum()
            if total <= 0:
                centers.append(x[int(rng.integers(n))])
                continue
            centers.append(x[int(rng.choice(n, p=d2 / total))])
        centers = np.stack(centers)
        labels = np.full(n, -1, dtype=int)
        for _ in range(iters):
            dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = dists.argmin(axis=1)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                members = x[labels == j]
                if members.size:
                    centers[j] = members.mean(axis=0)
                else:
                    far = int(dists.min(axis=1).argmax())
                    centers[j] = x[far]
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def spectral_cluster(indices: np.ndarray, vectors: np.ndarray,
                     rng: np.random.Generator, max_clusters: int = 8) -> list[np.ndarray]:
    """Partition frame indices by clustering their embeddings.

    Cosine affinities are clipped to [0, 1]; the cluster count is the
    largest eigengap of the normalised graph Laplacian, capped at
    min(max_clusters, n); k-means on the spectral embedding is fully
    seeded, so results replay bit-exactly.
    """
    indices = np.asarray(indices, dtype=int)
    n = indices.size
    if n != vectors.shape[0]:
        raise ConfigError("index list and embedding rows disagree")
    if n == 0:
        return []
    if n == 1:
        return [indices.copy()]

    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    affinity = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(affinity, 1.0)

    inv_sqrt_deg = 1.0 / np.sqrt(affinity.sum(axis=1))
    lap = np.eye(n) - inv_sqrt_deg[:, None] * affinity * inv_sqrt_deg[None, :]
    cap = min(max_clusters, n)
    top = min(cap, n - 1)
    vals, vecs = eigh(lap, subset_by_index=(0, top))
    gaps = np.diff(vals[: top + 1])
    k = int(np.argmax(gaps)) + 1 if gaps.size else 1

    if k == 1:
        return [indices.copy()]
    embedding = vecs[:, :k]
    row_norm = np.linalg.norm(embedding, axis=1)
    embedding = embedding / np.where(row_norm > 0, row_norm, 1.0)[:, None]
    labels = _kmeans(embedding, k, rng)
    clusters = [indices[labels == j] for j in range(k) if np.any(labels == j)]
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


# ---------------------------------------------------------------------------
# enrollment selection


def _sub_run(run: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    offset = int(rng.integers(run.size - length + 1))
    return run[offset : offset + length]


def _sample_from_cluster(cluster: np.ndarray, length: int,
                         rng: np.random.Generator) -> np.ndarray:
    runs = continuous_segments(cluster)
    fitting = filter_segs(runs, length)
    if fitting:
        run = fitting[int(rng.integers(len(fitting)))]
        return _sub_run(run, length, rng)
    return _longest(runs)


def select_enrollment(strategy: str, qualified: list[np.ndarray],
                      remaining: np.ndarray, longest: np.ndarray, l_tmp: int,
                      emb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pick the contiguous frame stretch to average into a new enrollment."""
    if strategy == "init":
        return qualified[0][:l_tmp]
    if strategy == "rand":
        run = qualified[int(rng.integers(len(qualified)))]
        return _sub_run(run, l_tmp, rng)
    if strategy == "sc":
        clusters = spectral_cluster(remaining, emb[remaining], rng)
    else:  # sc-local: cluster only inside the longest stretch
        clusters = spectral_cluster(longest, emb[longest], rng)
    biggest = _longest(clusters)
    return _sample_from_cluster(biggest, l_tmp, rng)


# ---------------------------------------------------------------------------
# the decoding loop


def iterative_decode(model: DecodableModel, features: np.ndarray,
                     frame_period: float, cfg: DecodeConfig,
                     keep_trace: bool = False) -> DecodeResult:
    rng = np.random.default_rng(cfg.seed)
    emb = model.frame_embeddings(features)
    n_frames = emb.shape[0]
    el_frames = max(1, int(round(cfg.el / frame_period)))
    sdl_frames = max(1, int(round(cfg.sdl / frame_period)))

    post = model.enrollment_posteriors(emb, np.zeros((0, emb.shape[1])))
    rows = binarize(post, cfg.threshold)
    non_idx, sgl_idx, ovl_idx = rows[0], rows[1], rows[2]

    enrolls: list[np.ndarray] = []
    claimed = np.empty(0, dtype=int)
    trace: list[dict] = []
    # Termination guard: a cooperative model claims at least one stretch of
    # sdl frames per accepted speaker, so this bound is never the binding
    # stop; it keeps adversarial posteriors from looping forever. With a
    # known speaker count that count is the bound.
    if cfg.max_speakers is not None:
        hard_cap = cfg.max_speakers
    else:
        hard_cap = max(1, int(np.ceil(n_frames * frame_period / cfg.sdl)))

    while True:
        if len(enrolls) >= hard_cap:
            break
        if cfg.max_speakers is not None and len(enrolls) >= cfg.max_speakers:
            break
        remaining = np.setdiff1d(sgl_idx, claimed)
        runs = continuous_segments(remaining)
        if not runs:
            break
        longest = _longest(runs)
        if cfg.max_speakers is None and sdl_frames > longest.size:
            break
        qualified = filter_segs(runs, el_frames)
        if not qualified:
            qualified = [longest]
        l_tmp = min(longest.size, el_frames)
        chosen = select_enrollment(cfg.strategy, qualified, remaining, longest,
                                   l_tmp, emb, rng)
        enrolls.append(emb[chosen].mean(axis=0))
        post = model.enrollment_posteriors(emb, np.stack(enrolls))
        speaker_rows = binarize(post, cfg.threshold)[3:]
        claimed = (np.unique(np.concatenate(speaker_rows))
                   if speaker_rows else np.empty(0, dtype=int))
        if keep_trace:
            trace.append({
                "iteration": len(enrolls),
                "enroll_start": int(chosen[0]),
                "enroll_len": int(chosen.size),
                "remaining": int(remaining.size),
                "claimed": int(claimed.size),
            })

    if enrolls:
        speaker_frames = binarize(post, cfg.threshold)[3:]
    else:
        speaker_frames = []
    return DecodeResult(speaker_frames, non_idx, sgl_idx, ovl_idx,
                        n_frames, frame_period, trace)


def gt_decode(model: DecodableModel, features: np.ndarray, frame_period: float,
              reference: Annotation, el: float = 0.5, threshold: float = 0.5,
              seed: int = 0) -> DecodeResult:
    """Teacher-forced decoding: enrollments sampled from reference labels.

    Posterior rows keep the reference speaker identities; speakers without
    any single-speaker frames cannot be enrolled and are left out.
    """
    from . import tensor as tt
    from .training import build_labels, sample_enrollments

    rng = np.random.default_rng(seed)
    emb = model.frame_embeddings(features)
    labels = build_labels(reference, emb.shape[0], frame_period, reference.speakers())
    with tt.no_grad():
        enrolls, _ = sample_enrollments(labels, tt.Tensor(emb), (el, el), rng)
    if enrolls:
        vectors = np.concatenate([e.vector.data for e in enrolls], axis=0)
    else:
        vectors = np.zeros((0, emb.shape[1]))
    post = model.enrollment_posteriors(emb, vectors)
    rows = binarize(post, threshold)
    return DecodeResult(rows[3:], rows[0], rows[1], rows[2], emb.shape[0],
                        frame_period, speaker_names=[e.speaker for e in enrolls])
