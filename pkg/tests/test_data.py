import gzip

import numpy as np
import pytest

from cvxmarg.data import (
    ExperimentReport,
    ImageSet,
    METRIC_COLUMNS,
    PAPER_COLUMN_NAMES,
    corrupt,
    emit_report,
    images_to_csv,
    load_images,
    make_samples,
    read_csv_images,
    read_idx,
    read_pbm,
    read_report,
    run_experiment,
    synthetic_shapes,
    write_idx,
)
from cvxmarg.errors import InvalidArgument, ParseError
from cvxmarg.trainer import TrainConfig

from conftest import make_rng


class TestIdx:
    def test_header_arithmetic(self):
        data = bytes.fromhex("00000803") + (2).to_bytes(4, "big") * 3 + bytes(range(8))
        arr = read_idx(data)
        assert arr.shape == (2, 2, 2)
        np.testing.assert_array_equal(arr.ravel(), np.arange(8))

    def test_round_trip(self):
        arr = make_rng(81).integers(0, 256, (3, 5, 4)).astype(np.uint8)
        raw = write_idx(arr)
        assert raw[:4] == bytes.fromhex("00000803")
        back = read_idx(raw)
        np.testing.assert_array_equal(back, arr)
        assert write_idx(back) == raw

    def test_gzip(self):
        arr = np.arange(12, dtype=np.uint8).reshape(1, 3, 4)
        np.testing.assert_array_equal(read_idx(gzip.compress(write_idx(arr))), arr)

    def test_bad_magic(self):
        with pytest.raises(ParseError, match="byte 0"):
            read_idx(bytes.fromhex("01000803") + bytes(12))

    def test_bad_type(self):
        with pytest.raises(ParseError, match="byte 2"):
            read_idx(bytes.fromhex("00000d01") + (1).to_bytes(4, "big") + bytes(4))

    def test_short_payload(self):
        data = bytes.fromhex("00000803") + (2).to_bytes(4, "big") * 3 + bytes(7)
        with pytest.raises(ParseError, match="byte 16"):
            read_idx(data)

    def test_threshold(self, tmp_path):
        path = tmp_path / "t.idx"
        path.write_bytes(write_idx(np.array([[[200, 127], [128, 0]]], dtype=np.uint8)))
        imgs = load_images(path, binarize_threshold=0.5)
        np.testing.assert_array_equal(imgs.images[0], [[1, 0], [1, 0]])

    def test_threshold_required(self, tmp_path):
        path = tmp_path / "t.idx"
        path.write_bytes(write_idx(np.zeros((1, 2, 2), np.uint8)))
        with pytest.raises(InvalidArgument):
            load_images(path)


class TestTextFormats:
    def test_pbm(self):
        np.testing.assert_array_equal(read_pbm("P1\n2 2\n1 0\n0 1\n"), [[[1, 0], [0, 1]]])

    def test_pbm_multiple_and_packed(self):
        arr = read_pbm("P1\n# comment\n3 1\n101\nP1 3 1 0 1 0\n")
        np.testing.assert_array_equal(arr, [[[1, 0, 1]], [[0, 1, 0]]])

    def test_pbm_non_binary(self):
        with pytest.raises(ParseError, match="line 3"):
            read_pbm("P1\n2 2\n1 2\n0 1\n")

    def test_pbm_bad_magic(self):
        with pytest.raises(ParseError, match="line 1"):
            read_pbm("P4\n2 2\n")

    def test_csv(self):
        arr = read_csv_images("0,1\n1,1\n\n1,0\n0,0\n")
        np.testing.assert_array_equal(arr, [[[0, 1], [1, 1]], [[1, 0], [0, 0]]])

    def test_csv_round_trip(self):
        imgs = synthetic_shapes(4, 5, 6, seed=3).images
        np.testing.assert_array_equal(read_csv_images(images_to_csv(imgs)), imgs)

    def test_csv_errors(self):
        with pytest.raises(ParseError, match="line 2"):
            read_csv_images("0,1\n0,3\n")
        with pytest.raises(ParseError, match="line 2"):
            read_csv_images("0,1\n0,1,1\n")

    def test_load_by_extension(self, tmp_path):
        (tmp_path / "a.pbm").write_text("P1\n2 1\n1 0\n")
        (tmp_path / "a.csv").write_text("1,0\n")
        assert load_images(tmp_path / "a.pbm").images.tolist() == [[[1, 0]]]
        assert load_images(tmp_path / "a.csv").images.tolist() == [[[1, 0]]]
        with pytest.raises(InvalidArgument):
            load_images(tmp_path / "a.txt")


class TestCorrupt:
    def test_rate_zero(self):
        imgs = synthetic_shapes(5, seed=1)
        np.testing.assert_array_equal(corrupt(imgs, 0.0, 9).images, imgs.images)

    def test_rate_one_is_coin_flips(self):
        imgs = ImageSet(np.zeros((200, 10, 10), np.uint8))
        agree = np.mean(corrupt(imgs, 1.0, 2).images == imgs.images)
        assert abs(agree - 0.5) <= 0.02

    def test_flip_fraction(self):
        imgs = ImageSet(np.zeros((1000, 10, 10), np.uint8))
        flipped = np.mean(corrupt(imgs, 0.3, 3).images != imgs.images)
        assert abs(flipped - 0.15) <= 0.01

    def test_always_flip(self):
        imgs = ImageSet(np.zeros((1000, 10, 10), np.uint8))
        flipped = np.mean(corrupt(imgs, 0.3, 3, always_flip=True).images != imgs.images)
        assert abs(flipped - 0.3) <= 0.01

    def test_seeded(self):
        imgs = synthetic_shapes(10, seed=4)
        a, b, c = corrupt(imgs, 0.3, 5), corrupt(imgs, 0.3, 5), corrupt(imgs, 0.3, 6)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.images.tobytes() != c.images.tobytes()

    def test_frozen_stream(self):
        # guards the documented generator choice against silent changes
        out = corrupt(ImageSet(np.zeros((1, 2, 4), np.uint8)), 0.5, 0).images
        u = np.random.Generator(np.random.PCG64(0)).random((2, 1, 2, 4))
        np.testing.assert_array_equal(out[0], ((u[0] < 0.5) & (u[1] < 0.5))[0])

    def test_bad_rate(self):
        with pytest.raises(InvalidArgument):
            corrupt(synthetic_shapes(1), 1.5, 0)


class TestImageSet:
    def test_non_binary(self):
        with pytest.raises(InvalidArgument):
            ImageSet(np.full((1, 2, 2), 2))

    def test_synthetic_shapes(self):
        imgs = synthetic_shapes(20, 8, 8, seed=0)
        assert imgs.images.shape == (20, 8, 8)
        assert imgs.images.sum(axis=(1, 2)).min() > 0
        np.testing.assert_array_equal(imgs.images, synthetic_shapes(20, 8, 8, seed=0).images)

    def test_make_samples(self):
        clean = synthetic_shapes(3, 4, 4)
        noisy = corrupt(clean, 0.5, 1)
        samples = make_samples(clean, noisy)
        np.testing.assert_array_equal(samples[1].hidden, clean.images[1].ravel())
        np.testing.assert_array_equal(samples[1].observed, noisy.images[1].ravel())


class TestReport:
    def test_emit_and_read(self, tmp_path):
        rows = [("a", {"classif": 0.1, "regress": 1 / 3, "l_log": np.pi, "l_quad": -0.5}),
                ("b", {"classif": 0.0, "regress": 2 / 7, "l_log": 1e-17, "l_quad": -1.0})]
        report = ExperimentReport(rows=rows, metadata={"seed": 7, "noise_rate": 0.3})
        report.beliefs["a"] = np.array([[[1.0, 0.25]]])
        path = tmp_path / "r.csv"
        emit_report(report, path)
        text = path.read_text().splitlines()
        assert text[:2] == ["# noise_rate=0.3", "# seed=7"]
        assert text[2] == "method," + ",".join(METRIC_COLUMNS)
        assert len(text) == 5
        back, meta = read_report(path)
        assert back == rows
        assert meta == {"noise_rate": "0.3", "seed": "7"}
        dump = (tmp_path / "r.beliefs.csv").read_text().splitlines()
        assert dump[:2] == ["# method=a image=0", "1,0.25"]

    def test_column_names(self):
        assert PAPER_COLUMN_NAMES == ("Classif.", "Regress.", "L_log", "L_quad")


class TestRunExperiment:
    def test_identical_sets_without_noise(self):
        imgs = synthetic_shapes(4, 3, 3, seed=2)
        cfg = TrainConfig(stage1_iters=3, stage2_iters=2)
        report = run_experiment(imgs, imgs, 0.0, ("log",), cfg)
        assert report.metrics("L_log/train") == report.metrics("L_log/test")
        assert report.metrics("initial/test")["l_log"] == pytest.approx(np.log(2), abs=1e-9)

    def test_rows_and_metadata(self):
        tr, te = synthetic_shapes(4, 3, 3, seed=3), synthetic_shapes(3, 3, 3, seed=4)
        report = run_experiment(tr, te, 0.3, ("log", "quad"), TrainConfig(stage1_iters=2, stage2_iters=2), seed=5)
        names = [m for m, _ in report.rows]
        assert names == [f"{n}/{s}" for s in ("train", "test") for n in ("initial", "L_log", "L_quad")]
        assert report.metadata["n_train"] == 4 and report.metadata["n_test"] == 3
        assert report.beliefs["L_quad/test"].shape == (3, 3, 3)
        assert set(report.traces) == {"L_log", "L_quad"}

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            run_experiment(synthetic_shapes(2, 3, 3), synthetic_shapes(2, 4, 4), 0.3)
