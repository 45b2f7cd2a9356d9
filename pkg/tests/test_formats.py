import os
import struct

import numpy as np
import pytest

from wsag.article import Article, Sentence
from wsag.errors import FormatError, InvalidArgument
from wsag.formats import (
    ArticleEntry,
    VideoEntry,
    load_checkpoint,
    read_article,
    read_features,
    read_gt,
    read_lock,
    read_manifest,
    read_predictions,
    read_train_log,
    append_log_record,
    save_checkpoint,
    write_article,
    write_features,
    write_gt,
    write_lock,
    write_manifest,
    write_predictions,
)
from wsag.geometry import Segment
from wsag.inference import Prediction
from wsag.model import ParamLayout, ModelParams, init_params


class TestFeatures:
    def test_round_trip_exact(self, tmp_path):
        path = str(tmp_path / "f.bin")
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((5, 7)).astype(np.float32)
        write_features(path, arr)
        back = read_features(path)
        np.testing.assert_array_equal(back, arr)
        assert back.dtype == np.float32

    def test_file_size_arithmetic(self, tmp_path):
        path = str(tmp_path / "f.bin")
        write_features(path, np.zeros((3, 4), dtype=np.float32))
        assert os.path.getsize(path) == 6 + 8 + 4 * 3 * 4

    def test_bad_magic_offset_zero(self, tmp_path):
        path = str(tmp_path / "f.bin")
        with open(path, "wb") as fh:
            fh.write(b"NOTWSF" + b"\x00" * 20)
        with pytest.raises(FormatError) as e:
            read_features(path)
        assert e.value.offset == 0

    def test_truncated_payload_offset(self, tmp_path):
        path = str(tmp_path / "f.bin")
        write_features(path, np.zeros((3, 4), dtype=np.float32))
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[:-5])
        with pytest.raises(FormatError) as e:
            read_features(path)
        assert e.value.offset == len(blob) - 5

    def test_trailing_bytes_offset(self, tmp_path):
        path = str(tmp_path / "f.bin")
        write_features(path, np.zeros((3, 4), dtype=np.float32))
        with open(path, "ab") as fh:
            fh.write(b"xx")
        with pytest.raises(FormatError) as e:
            read_features(path)
        assert e.value.offset == 6 + 8 + 48

    def test_zero_clip_count_rejected(self, tmp_path):
        path = str(tmp_path / "f.bin")
        with open(path, "wb") as fh:
            fh.write(b"WSAGF1" + struct.pack("<II", 0, 4))
        with pytest.raises(FormatError):
            read_features(path)

    def test_expectation_mismatches(self, tmp_path):
        path = str(tmp_path / "f.bin")
        write_features(path, np.zeros((3, 4), dtype=np.float32))
        with pytest.raises(FormatError):
            read_features(path, expect_clips=8)
        with pytest.raises(FormatError):
            read_features(path, expect_dim=16)

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(InvalidArgument):
            write_features(str(tmp_path / "f.bin"), np.zeros(5))


class TestCheckpoint:
    def make_params(self):
        return init_params(4, 4, 6, seed=3)

    def test_bare_round_trip(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        p = self.make_params()
        save_checkpoint(path, p, 8)
        ck = load_checkpoint(path)
        np.testing.assert_array_equal(ck.params.theta, p.theta)
        assert ck.num_clips == 8
        assert ck.adam is None
        assert ck.next_epoch is None

    def test_full_round_trip(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        p = self.make_params()
        rng = np.random.default_rng(1)
        m = rng.standard_normal(p.layout.size)
        v = np.abs(rng.standard_normal(p.layout.size))
        save_checkpoint(path, p, 16, adam=(42, m, v), next_epoch=7)
        ck = load_checkpoint(path)
        np.testing.assert_array_equal(ck.params.theta, p.theta)
        assert ck.adam[0] == 42
        np.testing.assert_array_equal(ck.adam[1], m)
        np.testing.assert_array_equal(ck.adam[2], v)
        assert ck.next_epoch == 7

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        with open(path, "wb") as fh:
            fh.write(b"BADMAGIC" + b"\x00" * 40)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_params(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(path, self.make_params(), 8)
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(path, self.make_params(), 8)
        with open(path, "ab") as fh:
            fh.write(b"JUNK\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_adam_shape_mismatch_on_save(self, tmp_path):
        p = self.make_params()
        with pytest.raises(InvalidArgument):
            save_checkpoint(str(tmp_path / "c.ckpt"), p, 8,
                            adam=(1, np.zeros(3), np.zeros(3)))


class TestPredictions:
    def test_round_trip_six_decimals(self, tmp_path):
        path = str(tmp_path / "p.tsv")
        preds = [Prediction("v0", 2, Segment(4.0, 12.0), 0.123456789),
                 Prediction("v1", 0, Segment(0.0, 64.0), 1.0)]
        write_predictions(path, preds)
        back = read_predictions(path)
        assert back[0].score == pytest.approx(0.123457)
        assert back[0].segment == Segment(4.0, 12.0)
        assert back[1].video_id == "v1"

    def test_field_count_error(self, tmp_path):
        path = str(tmp_path / "p.tsv")
        with open(path, "w") as fh:
            fh.write("v0\t1\t2.0\n")
        with pytest.raises(FormatError):
            read_predictions(path)

    def test_bad_score_becomes_format_error(self, tmp_path):
        path = str(tmp_path / "p.tsv")
        with open(path, "w") as fh:
            fh.write("v0\t1\t2.0\t4.0\t1.5\n")
        with pytest.raises(FormatError):
            read_predictions(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = str(tmp_path / "p.tsv")
        with open(path, "w") as fh:
            fh.write("\nv0\t1\t2.0\t4.0\t0.500000\n\n")
        assert len(read_predictions(path)) == 1


class TestGroundTruthFile:
    def test_round_trip_exact(self, tmp_path):
        path = str(tmp_path / "gt.tsv")
        recs = [("v0", 3, Segment(0.1, 7.3)), ("v1", 0, Segment(8.0, 64.0))]
        write_gt(path, recs)
        back = read_gt(path)
        assert back == recs

    def test_reversed_segment_rejected(self, tmp_path):
        path = str(tmp_path / "gt.tsv")
        with open(path, "w") as fh:
            fh.write("v0\t1\t9.0\t3.0\n")
        with pytest.raises(FormatError):
            read_gt(path)


class TestArticleFile:
    def make_article(self):
        rng = np.random.default_rng(5)
        sents = (
            Sentence(0, "high", None, rng.standard_normal(6)),
            Sentence(1, "low", 0, rng.standard_normal(6)),
            Sentence(2, "low", 0, rng.standard_normal(6)),
        )
        return Article(article_id="a0", sentences=sents)

    def test_round_trip_exact_embeddings(self, tmp_path):
        path = str(tmp_path / "a.tsv")
        art = self.make_article()
        write_article(path, art)
        back = read_article(path)
        assert back.article_id == "a0"
        for sa, sb in zip(art.sentences, back.sentences):
            assert (sa.index, sa.scale, sa.parent) == (sb.index, sb.scale, sb.parent)
            np.testing.assert_array_equal(sa.embedding, sb.embedding)

    def test_missing_header(self, tmp_path):
        path = str(tmp_path / "a.tsv")
        with open(path, "w") as fh:
            fh.write("0\thigh\tnone\t1.0,2.0\n")
        with pytest.raises(FormatError):
            read_article(path)

    def test_structural_violation_becomes_format_error(self, tmp_path):
        path = str(tmp_path / "a.tsv")
        with open(path, "w") as fh:
            fh.write("article\ta0\n")
            fh.write("0\tlow\tnone\t1.0,2.0\n")
            fh.write("1\tlow\t0\t1.0,2.0\n")  # parent is low scale
        with pytest.raises(FormatError):
            read_article(path)


class TestManifest:
    def setup_tree(self, tmp_path):
        (tmp_path / "feat").mkdir()
        (tmp_path / "art").mkdir()
        write_features(str(tmp_path / "feat" / "v0.bin"),
                       np.zeros((4, 3), dtype=np.float32))
        art = Article(article_id="a0", sentences=(
            Sentence(0, "high", None, np.ones(3)),))
        write_article(str(tmp_path / "art" / "t0.tsv"), art)

    def test_round_trip_and_path_resolution(self, tmp_path):
        self.setup_tree(tmp_path)
        path = str(tmp_path / "m.tsv")
        write_manifest(path,
                       [VideoEntry("t0", "v0", "feat/v0.bin", 4, 64.0)],
                       [ArticleEntry("t0", "art/t0.tsv")])
        man = read_manifest(path)
        assert man.videos[0].num_clips == 4
        assert os.path.exists(man.video_path(man.videos[0]))
        assert os.path.exists(man.article_path(man.articles[0]))

    def test_missing_feature_file(self, tmp_path):
        self.setup_tree(tmp_path)
        path = str(tmp_path / "m.tsv")
        write_manifest(path,
                       [VideoEntry("t0", "v0", "feat/absent.bin", 4, 64.0)],
                       [ArticleEntry("t0", "art/t0.tsv")])
        with pytest.raises(FormatError):
            read_manifest(path)

    def test_duplicate_video_id(self, tmp_path):
        self.setup_tree(tmp_path)
        path = str(tmp_path / "m.tsv")
        write_manifest(path,
                       [VideoEntry("t0", "v0", "feat/v0.bin", 4, 64.0),
                        VideoEntry("t0", "v0", "feat/v0.bin", 4, 64.0)],
                       [ArticleEntry("t0", "art/t0.tsv")])
        with pytest.raises(FormatError):
            read_manifest(path)

    def test_video_without_article(self, tmp_path):
        self.setup_tree(tmp_path)
        path = str(tmp_path / "m.tsv")
        write_manifest(path,
                       [VideoEntry("tX", "v0", "feat/v0.bin", 4, 64.0)],
                       [ArticleEntry("t0", "art/t0.tsv")])
        with pytest.raises(FormatError):
            read_manifest(path)

    def test_unknown_row_kind(self, tmp_path):
        path = str(tmp_path / "m.tsv")
        with open(path, "w") as fh:
            fh.write("widget\ta\tb\n")
        with pytest.raises(FormatError):
            read_manifest(path)


class TestLockAndLog:
    def test_lock_round_trip_sorted(self, tmp_path):
        path = str(tmp_path / "run.lock")
        write_lock(path, {"zeta": "1", "alpha": "x=y", "mid": ""})
        lines = open(path).read().splitlines()
        assert lines == ["alpha=x=y", "mid=", "zeta=1"]
        assert read_lock(path) == {"alpha": "x=y", "mid": "", "zeta": "1"}

    def test_lock_duplicate_key(self, tmp_path):
        path = str(tmp_path / "run.lock")
        with open(path, "w") as fh:
            fh.write("a=1\na=2\n")
        with pytest.raises(FormatError):
            read_lock(path)

    def test_lock_missing_equals(self, tmp_path):
        path = str(tmp_path / "run.lock")
        with open(path, "w") as fh:
            fh.write("justakey\n")
        with pytest.raises(FormatError):
            read_lock(path)

    def test_log_round_trip(self, tmp_path):
        path = str(tmp_path / "train.log")
        with open(path, "w") as fh:
            append_log_record(fh, 3, 1, "warmup", 0.1 + 0.2, 0.0, 0.30000000000000004, 12.3456)
        recs = read_train_log(path)
        assert recs[0]["epoch"] == 3
        assert recs[0]["phase"] == "warmup"
        assert recs[0]["mil"] == 0.1 + 0.2
        assert recs[0]["total"] == 0.30000000000000004
        assert recs[0]["wall"] == pytest.approx(12.346, abs=5e-4)

    def test_log_field_count(self, tmp_path):
        path = str(tmp_path / "train.log")
        with open(path, "w") as fh:
            fh.write("1\t2\tfull\t0.5\n")
        with pytest.raises(FormatError):
            read_train_log(path)
