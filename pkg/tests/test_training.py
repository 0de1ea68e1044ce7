import numpy as np
import pytest

from diarkit import tensor as tt
from diarkit import training as tr
from diarkit.annotation import Annotation
from diarkit.errors import ConfigError
from diarkit.nn import DiarizationModel, ModelConfig
from diarkit.tensor import Tensor

from gradcheck import assert_grads_match


def ann_from(segus, file_id="f"):
    ann = Annotation(file_id)
    for spk, s, e in segus:
        ann.add(spk, s, e)
    return ann


class TestBuildLabels:
    def test_single_speaker_first_second(self):
        labels = tr.build_labels(ann_from([("a", 0.0, 1.0)]), 20, 0.1, ["a"])
        np.testing.assert_array_equal(labels.speaker_row(0)[:10], 1)
        np.testing.assert_array_equal(labels.speaker_row(0)[10:], 0)
        np.testing.assert_array_equal(labels.values[tr.ROW_SGL], labels.speaker_row(0))
        np.testing.assert_array_equal(labels.values[tr.ROW_NON][10:], 1)
        np.testing.assert_array_equal(labels.values[tr.ROW_OVL], 0)

    def test_identical_segments_are_overlap(self):
        labels = tr.build_labels(
            ann_from([("a", 0.0, 1.0), ("b", 0.0, 1.0)]), 15, 0.1, ["a", "b"]
        )
        np.testing.assert_array_equal(labels.values[tr.ROW_OVL][:10], 1)
        np.testing.assert_array_equal(labels.values[tr.ROW_SGL], 0)

    def test_empty_annotation_is_all_non(self):
        labels = tr.build_labels(Annotation("f"), 8, 0.1, [])
        np.testing.assert_array_equal(labels.values[tr.ROW_NON], 1)

    def test_activity_rows_partition_frames(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            segs = []
            for spk in "abc":
                for _ in range(rng.integers(1, 4)):
                    s = rng.uniform(0, 8)
                    segs.append((spk, s, s + rng.uniform(0.2, 3.0)))
            labels = tr.build_labels(ann_from(segs), 100, 0.1, list("abc"))
            np.testing.assert_array_equal(labels.values[:3].sum(axis=0), 1)

    def test_unknown_speaker_rejected(self):
        with pytest.raises(ConfigError):
            tr.build_labels(ann_from([("x", 0, 1)]), 10, 0.1, ["a"])


class TestSampleEnrollments:
    def _labels(self):
        # a: solo on [0,2); b: solo on [3,5); overlap on [2,3)
        return tr.build_labels(
            ann_from([("a", 0.0, 3.0), ("b", 2.0, 5.0)]), 50, 0.1, ["a", "b"]
        )

    def test_forced_choice_when_exact_length(self):
        labels = tr.build_labels(ann_from([("a", 0.0, 1.0)]), 10, 0.1, ["a"])
        rng = np.random.default_rng(1)
        emb = Tensor(np.arange(10.0)[:, None] * np.ones((1, 4)))
        enrolls, dropped = tr.sample_enrollments(labels, emb, (1.0, 1.0), rng)
        assert not dropped
        np.testing.assert_array_equal(enrolls[0].frames, np.arange(10))

    def test_constant_embeddings_average_to_constant(self):
        labels = self._labels()
        emb = Tensor(np.full((50, 4), 3.25))
        enrolls, _ = tr.sample_enrollments(labels, emb, (1.0, 3.0), np.random.default_rng(2))
        for e in enrolls:
            np.testing.assert_allclose(e.vector.data, 3.25)

    def test_seeded_reproducibility(self):
        labels = self._labels()
        emb = Tensor(np.random.default_rng(3).normal(size=(50, 4)))
        a, _ = tr.sample_enrollments(labels, emb, (0.5, 2.0), np.random.default_rng(42))
        b, _ = tr.sample_enrollments(labels, emb, (0.5, 2.0), np.random.default_rng(42))
        for ea, eb in zip(a, b):
            np.testing.assert_array_equal(ea.frames, eb.frames)

    def test_speaker_without_solo_frames_dropped(self):
        # b is entirely inside a's segment, so b has no single-speaker frames
        labels = tr.build_labels(
            ann_from([("a", 0.0, 5.0), ("b", 1.0, 2.0)]), 50, 0.1, ["a", "b"]
        )
        emb = Tensor(np.zeros((50, 4)))
        enrolls, dropped = tr.sample_enrollments(labels, emb, (1.0, 3.0), np.random.default_rng(4))
        assert dropped == [1]
        assert [e.speaker for e in enrolls] == ["a"]

    def test_truncates_to_longest_run(self):
        labels = tr.build_labels(ann_from([("a", 0.0, 0.5)]), 20, 0.1, ["a"])
        emb = Tensor(np.zeros((20, 4)))
        enrolls, _ = tr.sample_enrollments(labels, emb, (3.0, 3.0), np.random.default_rng(5))
        assert enrolls[0].frames.size == 5


class TestEnrollmentDropout:
    def _enrolls(self, n):
        return [
            tr.SpeakerEnrollment(i, f"s{i}", Tensor(np.zeros((1, 2))), np.array([i]))
            for i in range(n)
        ]

    def test_p_zero_keeps_all(self):
        kept = tr.enrollment_dropout(self._enrolls(5), 0.0, np.random.default_rng(0))
        assert len(kept) == 5

    def test_p_one_drops_all(self):
        kept = tr.enrollment_dropout(self._enrolls(5), 1.0, np.random.default_rng(0))
        assert kept == []

    def test_retention_rate(self):
        rng = np.random.default_rng(6)
        kept = sum(
            len(tr.enrollment_dropout(self._enrolls(1), 0.5, rng)) for _ in range(10_000)
        )
        assert abs(kept / 10_000 - 0.5) < 0.02

    def test_all_speakers_mode_is_all_or_nothing(self):
        rng = np.random.default_rng(7)
        sizes = {
            len(tr.enrollment_dropout(self._enrolls(4), 0.5, rng, mode="all_speakers"))
            for _ in range(200)
        }
        assert sizes == {0, 4}


class TestBceLoss:
    def test_half_posterior_gives_ln2(self):
        post = Tensor(np.full((4, 6), 0.5))
        labels = np.random.default_rng(8).integers(0, 2, size=(4, 6)).astype(float)
        loss = tr.bce_loss(post, labels)
        np.testing.assert_allclose(float(loss.data), np.log(2.0), rtol=1e-12)

    def test_perfect_prediction_is_clamp_scale(self):
        labels = np.random.default_rng(9).integers(0, 2, size=(3, 7)).astype(float)
        loss = tr.bce_loss(Tensor(labels), labels)
        assert float(loss.data) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        raw = rng.normal(size=(4, 5))
        labels = rng.integers(0, 2, size=(4, 5)).astype(float)
        assert_grads_match(lambda x: tr.bce_loss(tt.sigmoid(x), labels), [raw])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            tr.bce_loss(Tensor(np.full((2, 3), 0.5)), np.zeros((3, 3)))


class TestTotalLoss:
    def test_without_enhancer_equals_bce(self):
        rng = np.random.default_rng(11)
        post = Tensor(rng.uniform(0.1, 0.9, size=(5, 8)))
        labels = rng.integers(0, 2, size=(5, 8)).astype(float)
        a = float(tr.total_loss(post, None, labels).data)
        b = float(tr.bce_loss(post, labels).data)
        assert a == b

    def test_identical_heads_double_the_loss(self):
        rng = np.random.default_rng(12)
        post = Tensor(rng.uniform(0.1, 0.9, size=(5, 8)))
        labels = rng.integers(0, 2, size=(5, 8)).astype(float)
        total = float(tr.total_loss(post, post, labels).data)
        np.testing.assert_allclose(total, 2 * float(tr.bce_loss(post, labels).data), rtol=1e-12)

    def test_both_heads_receive_gradient(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.uniform(0.2, 0.8, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.2, 0.8, size=(3, 4)), requires_grad=True)
        labels = rng.integers(0, 2, size=(3, 4)).astype(float)
        tt.backward(tr.total_loss(a, b, labels))
        assert np.abs(a.grad).max() > 0 and np.abs(b.grad).max() > 0


class TestNoamSchedule:
    def test_crossover_at_warmup(self):
        w = 4000
        lhs = 256 ** -0.5 * w ** -0.5
        rhs = 256 ** -0.5 * w * w ** -1.5
        np.testing.assert_allclose(tr.noam_lr(w, 256, w), lhs)
        np.testing.assert_allclose(lhs, rhs)

    def test_monotone_warmup_phase(self):
        values = [tr.noam_lr(s, 256, 1000) for s in range(1, 1000)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_decay_ratio(self):
        w = 500
        ratio = tr.noam_lr(2 * w, 64, w) / tr.noam_lr(w, 64, w)
        np.testing.assert_allclose(ratio, 2 ** -0.5, rtol=1e-12)


class TestTeacherForcingAlignment:
    def test_swapping_enrollments_and_labels_preserves_loss(self):
        """Tying each posterior row to its enrollment makes speaker order moot."""
        rng = np.random.default_rng(14)
        cfg = ModelConfig(input_dim=8, attn_dim=16, heads=2, enc_layers=1,
                          dec_layers=2, ff_dim=24, dropout=0.0)
        model = DiarizationModel(cfg, seed=1)
        model.set_training(False)
        ann = ann_from([("a", 0.0, 2.0), ("b", 1.5, 4.0)])
        labels = tr.build_labels(ann, 40, 0.1, ["a", "b"])
        feats = rng.normal(size=(40, 8))
        with tt.no_grad():
            emb = model.encode(feats)
            enrolls, _ = tr.sample_enrollments(labels, emb, (1.0, 1.0),
                                               np.random.default_rng(0))
            base = model.heads(emb, tr.stack_enrollments(enrolls))
            loss_base = float(tr.total_loss(base.posteriors, None,
                                            tr.select_label_rows(labels, enrolls)).data)
            swapped = list(reversed(enrolls))
            post = model.heads(emb, tr.stack_enrollments(swapped))
            loss_swap = float(tr.total_loss(post.posteriors, None,
                                            tr.select_label_rows(labels, swapped)).data)
        assert abs(loss_base - loss_swap) < 1e-10


def toy_dataset(seed=0, n=3, t=60, f=8):
    rng = np.random.default_rng(seed)
    items = []
    for k in range(n):
        ann = ann_from([("a", 0.0, 3.0), ("b", 2.5, 6.0)], file_id=f"r{k}")
        items.append((rng.normal(size=(t, f)), 0.1, ann))
    return items


class TestTrainLoop:
    def _model(self, seed=2):
        cfg = ModelConfig(input_dim=8, attn_dim=8, heads=2, enc_layers=1,
                          dec_layers=1, ff_dim=16, dropout=0.0)
        return DiarizationModel(cfg, seed=seed)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            tr.train_loop([], self._model(), tr.TrainConfig(epochs=1))

    def test_adapt_mode_has_constant_lr(self):
        cfg = tr.TrainConfig(segment_len=3.0, batch_size=2, epochs=2,
                             warmup_steps=10, adapt_lr=1e-4, log_every=1)
        result = tr.train_loop(toy_dataset(), self._model(), cfg, mode="adapt", seed=3)
        lrs = {rec["lr"] for rec in result.history if "lr" in rec}
        assert lrs == {1e-4}

    def test_deterministic_replay(self):
        cfg = tr.TrainConfig(segment_len=3.0, batch_size=2, epochs=2,
                             warmup_steps=50, log_every=1)

        def run():
            result = tr.train_loop(toy_dataset(), self._model(seed=4), cfg, seed=5)
            return [rec["loss"] for rec in result.history if "loss" in rec]

        assert run() == run()

    def test_one_batch_overfit(self):
        """Loss on a repeated two-speaker segment falls well under 0.05."""
        rng = np.random.default_rng(15)
        sig_a, sig_b = np.eye(8)[0] * 2, np.eye(8)[1] * 2
        feats = np.zeros((60, 8))
        feats[:30] += sig_a
        feats[25:55] += sig_b
        feats += rng.normal(scale=0.01, size=feats.shape)
        ann = ann_from([("a", 0.0, 3.0), ("b", 2.5, 5.5)])
        data = [(feats, 0.1, ann)]
        cfg = tr.TrainConfig(segment_len=6.0, batch_size=1, epochs=400,
                             warmup_steps=30, enroll_drop_p=0.0, el_range=(1.0, 1.0),
                             max_steps=400, log_every=1)
        result = tr.train_loop(data, self._model(seed=6), cfg, seed=7)
        losses = [rec["loss"] for rec in result.history if "loss" in rec]
        smoothed = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert smoothed[-1] < 0.05
        assert smoothed[-1] < smoothed[0]
