import numpy as np
import pytest

from diarkit import io as dio
from diarkit import tensor as tt
from diarkit.annotation import Annotation
from diarkit.errors import ConfigError, FormatError, RttmParseError
from diarkit.nn import DiarizationModel, ModelConfig


class TestRttm:
    def test_single_record(self):
        anns = dio.rttm_parse("SPEAKER f 1 0.50 1.20 <NA> <NA> spkA <NA> <NA>\n")
        assert len(anns) == 1
        seg = anns[0].segments[0]
        assert (seg.speaker, seg.start, seg.end) == ("spkA", 0.5, 1.7)

    def test_empty_input(self):
        assert dio.rttm_parse("") == []

    def test_non_speaker_lines_ignored(self):
        text = (
            ";; a comment\n"
            "SPKR-INFO f 1 <NA> <NA> <NA> unknown spkA <NA>\n"
            "SPEAKER   f  1   1.0   2.0  <NA> <NA> spkA <NA> <NA>\n"
        )
        anns = dio.rttm_parse(text)
        assert len(anns) == 1 and len(anns[0].segments) == 1

    def test_malformed_numeric_field_reports_line(self):
        text = "SPEAKER f 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER f 1 zero 1.0 <NA> <NA> a <NA> <NA>\n"
        with pytest.raises(RttmParseError) as err:
            dio.rttm_parse(text)
        assert err.value.line_number == 2

    def test_round_trip_within_quantisation(self):
        ann = Annotation("file7")
        rng = np.random.default_rng(0)
        for i in range(20):
            s = float(rng.uniform(0, 50))
            ann.add(f"spk{i % 3}", s, s + float(rng.uniform(0.1, 5.0)))
        back = dio.rttm_parse(dio.rttm_emit(ann))[0]
        assert back.file_id == "file7"
        got = sorted((s.speaker, s.start, s.end) for s in back.segments)
        want = sorted((s.speaker, s.start, s.end) for s in ann.segments)
        for (gs, g0, g1), (ws, w0, w1) in zip(got, want):
            assert gs == ws and abs(g0 - w0) <= 1e-3 + 1e-9 and abs(g1 - w1) <= 2e-3

    def test_emit_sorted_by_onset(self):
        ann = Annotation("f")
        ann.add("b", 3.0, 4.0)
        ann.add("a", 1.0, 2.0)
        lines = dio.rttm_emit(ann).splitlines()
        assert lines[0].split()[3] == "1.000"

    def test_overlapping_segments_allowed(self):
        text = (
            "SPEAKER f 1 0.0 2.0 <NA> <NA> a <NA> <NA>\n"
            "SPEAKER f 1 1.0 2.0 <NA> <NA> b <NA> <NA>\n"
        )
        assert len(dio.rttm_parse(text)[0].segments) == 2


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        fm = dio.FeatureMatrix(rng.normal(size=(37, 23)).astype(np.float32).astype(np.float64), 0.01)
        path = tmp_path / "x.feat"
        dio.write_features(path, fm)
        back = dio.read_features(path)
        np.testing.assert_array_equal(back.values, fm.values)
        assert back.frame_period == 0.01

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.feat"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError):
            dio.read_features(path)

    def test_truncated_payload_rejected(self, tmp_path):
        fm = dio.FeatureMatrix(np.zeros((4, 3)), 0.1)
        path = tmp_path / "x.feat"
        dio.write_features(path, fm)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            dio.read_features(path)

    def test_write_is_atomic(self, tmp_path):
        fm = dio.FeatureMatrix(np.ones((2, 2)), 0.1)
        path = tmp_path / "x.feat"
        dio.write_features(path, fm)
        dio.write_features(path, fm)  # overwrite leaves no temp litter
        assert [p.name for p in tmp_path.iterdir()] == ["x.feat"]


class TestStacking:
    def test_23_to_345_columns(self):
        fm = dio.FeatureMatrix(np.zeros((50, 23)), 0.01)
        out = dio.stack_and_subsample(fm, context=7, factor=10)
        assert out.dim == 345

    def test_identity(self):
        fm = dio.FeatureMatrix(np.arange(12.0).reshape(4, 3), 0.01)
        out = dio.stack_and_subsample(fm, context=0, factor=1)
        np.testing.assert_array_equal(out.values, fm.values)
        assert out.frame_period == fm.frame_period

    def test_frame_count_and_period(self):
        fm = dio.FeatureMatrix(np.zeros((100, 5)), 0.01)
        out = dio.stack_and_subsample(fm, context=7, factor=10)
        assert out.n_frames == 10
        np.testing.assert_allclose(out.frame_period, 0.1)

    def test_stacked_window_content(self):
        values = np.arange(6.0)[:, None]
        fm = dio.FeatureMatrix(values, 0.01)
        out = dio.stack_and_subsample(fm, context=1, factor=1)
        # column blocks are offsets -1, 0, +1 with edge replication
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0, 1.0])
        np.testing.assert_array_equal(out.values[3], [2.0, 3.0, 4.0])
        np.testing.assert_array_equal(out.values[5], [4.0, 5.0, 5.0])

    def test_bad_factor_rejected(self):
        with pytest.raises(ConfigError):
            dio.stack_and_subsample(dio.FeatureMatrix(np.zeros((4, 2)), 0.01), factor=0)


class TestCheckpoint:
    def _model(self, **kw):
        base = dict(input_dim=6, attn_dim=8, heads=2, enc_layers=1, dec_layers=2,
                    ff_dim=12, dropout=0.0)
        base.update(kw)
        return DiarizationModel(ModelConfig(**base), seed=3)

    def test_round_trip_preserves_outputs(self, tmp_path):
        model = self._model(enh_layers=2)
        path = tmp_path / "model.ckpt"
        dio.save_checkpoint(path, model)
        loaded = dio.load_checkpoint(path)
        x = np.random.default_rng(2).normal(size=(5, 6))
        with tt.no_grad():
            a = model.forward_full(x).posteriors.data
            b = loaded.forward_full(x).posteriors.data
        # float32 storage costs ~1e-7 relative precision
        np.testing.assert_allclose(a, b, atol=1e-6)
        assert loaded.cfg == model.cfg

    def test_shared_layers_stored_once(self, tmp_path):
        shared = self._model(dec_layers=4, enh_layers=4, share_dec_enh_layers_2_to_4=True)
        plain = self._model(dec_layers=4, enh_layers=0)
        p_shared = tmp_path / "s.ckpt"
        p_plain = tmp_path / "p.ckpt"
        dio.save_checkpoint(p_shared, shared)
        dio.save_checkpoint(p_plain, plain)
        loaded = dio.load_checkpoint(p_shared)
        assert loaded.decoder_layers[1] is loaded.decoder_layers[3]
        assert abs(p_shared.stat().st_size - p_plain.stat().st_size) < 4096

    def test_missing_blob_rejected(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.ckpt"
        dio.save_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        # lower the blob count by one
        config_len = int.from_bytes(blob[8:12], "little")
        count_at = 12 + config_len
        count = int.from_bytes(blob[count_at : count_at + 4], "little")
        blob[count_at : count_at + 4] = (count - 1).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            dio.load_checkpoint(path)

    def test_byte_identical_rewrites(self, tmp_path):
        model = self._model()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        dio.save_checkpoint(a, model)
        dio.save_checkpoint(b, model)
        assert a.read_bytes() == b.read_bytes()


class TestKvConfig:
    def test_parse_with_comments(self):
        text = "# settings\nmodel.attn_dim = 64\ndecode.el=0.5\n\n"
        assert dio.parse_kv_text(text) == {"model.attn_dim": "64", "decode.el": "0.5"}

    def test_bad_line_rejected(self):
        with pytest.raises(ConfigError):
            dio.parse_kv_text("just words\n")


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [{"id": "a", "duration": 3.5}, {"id": "b", "duration": 1.0}]
        path = tmp_path / "manifest.jsonl"
        dio.write_manifest(path, entries)
        assert dio.read_manifest(path) == entries
