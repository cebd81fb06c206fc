"""Datasets, IDX and model persistence, image grids, result tables."""

import json
import struct

import numpy as np
import pytest

from dpmdce.data import (
    IMAGE_PIXELS,
    MODEL_MAGIC,
    RESULTS_HEADER,
    Dataset,
    IdxCountMismatchError,
    IdxError,
    IdxMagicError,
    IdxTruncatedError,
    ModelFormatError,
    ResultRow,
    export_image_grid,
    find_mnist,
    load_idx,
    load_model,
    load_or_synthesize,
    read_results,
    save_idx,
    save_model,
    synthesize_digits,
    write_results,
)
from dpmdce.nn import DenseNet, Layer, init_dense_net


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 100)), np.zeros(3, dtype=int))
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, IMAGE_PIXELS)), np.zeros(4, dtype=int))
        bad = np.zeros((2, IMAGE_PIXELS))
        bad[0, 0] = 1.5
        with pytest.raises(ValueError):
            Dataset(bad, np.zeros(2, dtype=int))

    def test_len_and_subset(self):
        ds = synthesize_digits(30, 0)
        assert len(ds) == 30
        sub = ds.subset(np.arange(5))
        assert len(sub) == 5
        assert sub.split == ds.split
        assert np.array_equal(sub.labels, ds.labels[:5])


class TestSynthesize:
    def test_deterministic(self):
        a = synthesize_digits(40, 7)
        b = synthesize_digits(40, 7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_content(self):
        a = synthesize_digits(40, 7)
        b = synthesize_digits(40, 8)
        assert not np.array_equal(a.images, b.images)

    def test_shape_range_and_split(self):
        ds = synthesize_digits(50, 0, "test")
        assert ds.images.shape == (50, IMAGE_PIXELS)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.split == "test"
        assert set(np.unique(ds.labels)) <= set(range(10))

    def test_classes_roughly_balanced(self):
        ds = synthesize_digits(2000, 3)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.min() > 100  # uniform draw, ~200 each

    def test_digits_are_distinguishable(self):
        # mean images of different digits should differ visibly
        ds = synthesize_digits(600, 1)
        means = [ds.images[ds.labels == d].mean(axis=0) for d in (0, 1)]
        assert np.abs(means[0] - means[1]).max() > 0.2


class TestIdx:
    def test_round_trip(self, tmp_path):
        ds = synthesize_digits(25, 2)
        img, lab = tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte"
        save_idx(ds, img, lab)
        back = load_idx(img, lab)
        assert back.split == "train"
        assert np.array_equal(back.labels, ds.labels)
        # pixels go through one byte quantization
        quantized = np.clip(np.floor(ds.images * 255.0 + 0.5), 0, 255) / 255.0
        assert np.allclose(back.images, quantized)

    def test_split_detected_from_filename(self, tmp_path):
        ds = synthesize_digits(5, 0)
        img, lab = tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte"
        save_idx(ds, img, lab)
        assert load_idx(img, lab).split == "test"

    def test_bad_image_magic(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        img.write_bytes(struct.pack(">iiii", 1234, 1, 28, 28) + bytes(784))
        lab.write_bytes(struct.pack(">ii", 2049, 1) + bytes(1))
        with pytest.raises(IdxMagicError):
            load_idx(img, lab)

    def test_bad_label_magic(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        img.write_bytes(struct.pack(">iiii", 2051, 1, 28, 28) + bytes(784))
        lab.write_bytes(struct.pack(">ii", 9999, 1) + bytes(1))
        with pytest.raises(IdxMagicError):
            load_idx(img, lab)

    def test_truncated_pixels(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        img.write_bytes(struct.pack(">iiii", 2051, 2, 28, 28) + bytes(784))  # one image short
        lab.write_bytes(struct.pack(">ii", 2049, 2) + bytes(2))
        with pytest.raises(IdxTruncatedError):
            load_idx(img, lab)

    def test_truncated_header(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        img.write_bytes(b"\x00\x00")
        lab.write_bytes(struct.pack(">ii", 2049, 0))
        with pytest.raises(IdxTruncatedError):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        img.write_bytes(struct.pack(">iiii", 2051, 1, 28, 28) + bytes(784))
        lab.write_bytes(struct.pack(">ii", 2049, 2) + bytes(2))
        with pytest.raises(IdxCountMismatchError):
            load_idx(img, lab)

    def test_wrong_image_size(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        img.write_bytes(struct.pack(">iiii", 2051, 1, 14, 14) + bytes(196))
        lab.write_bytes(struct.pack(">ii", 2049, 1) + bytes(1))
        with pytest.raises(IdxError):
            load_idx(img, lab)


class TestMnistDiscovery:
    def test_find_mnist_env_var(self, tmp_path, monkeypatch):
        ds = synthesize_digits(8, 0)
        for prefix in ("train", "t10k"):
            save_idx(ds, tmp_path / f"{prefix}-images-idx3-ubyte",
                     tmp_path / f"{prefix}-labels-idx1-ubyte")
        monkeypatch.setenv("DPMDCE_MNIST_DIR", str(tmp_path))
        found = find_mnist()
        assert found is not None and found[0].parent == tmp_path
        loaded = load_or_synthesize("train", 99, 0)
        assert len(loaded) == 8  # real files win over synthesis

    def test_load_or_synthesize_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DPMDCE_MNIST_DIR", str(tmp_path / "nope"))
        monkeypatch.chdir(tmp_path)
        ds = load_or_synthesize("test", 12, 5)
        assert len(ds) == 12 and ds.split == "test"
        # train and test streams must differ
        tr = load_or_synthesize("train", 12, 5)
        assert not np.array_equal(tr.images, ds.images)


class TestModelFiles:
    def roundtrip(self, tmp_path, net):
        path = tmp_path / "net.model"
        save_model(path, net)
        return path, load_model(path)

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        net = init_dense_net([10, 6, 4], ["relu", "identity"], rng, role="blackbox")
        net.meta["accuracy"] = 0.93
        _, back = self.roundtrip(tmp_path, net)
        assert back.role == "blackbox"
        assert back.meta["accuracy"] == 0.93
        for a, b in zip(net.layers, back.layers):
            assert a.activation == b.activation
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.model"
        p.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "x.model"
        p.write_bytes(MODEL_MAGIC + struct.pack("<II", 99, 2) + b"{}")
        with pytest.raises(ModelFormatError, match="version"):
            load_model(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "x.model"
        p.write_bytes(MODEL_MAGIC + struct.pack("<II", 1, 50) + b"{}")
        with pytest.raises(ModelFormatError, match="truncated header"):
            load_model(p)

    def test_corrupt_header_json(self, tmp_path):
        p = tmp_path / "x.model"
        blob = b"{not json"
        p.write_bytes(MODEL_MAGIC + struct.pack("<II", 1, len(blob)) + blob)
        with pytest.raises(ModelFormatError, match="corrupt header"):
            load_model(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(1)
        net = init_dense_net([4, 3], ["identity"], rng, role="encoder")
        p = tmp_path / "x.model"
        save_model(p, net)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ModelFormatError, match="truncated parameter"):
            load_model(p)

    def test_trailing_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        net = init_dense_net([4, 3], ["identity"], rng, role="encoder")
        p = tmp_path / "x.model"
        save_model(p, net)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(ModelFormatError, match="trailing"):
            load_model(p)

    def test_header_is_sorted_json(self, tmp_path):
        rng = np.random.default_rng(2)
        net = init_dense_net([4, 3], ["identity"], rng, role="encoder")
        p = tmp_path / "x.model"
        save_model(p, net)
        raw = p.read_bytes()
        hlen = struct.unpack("<II", raw[4:12])[1]
        header = json.loads(raw[12 : 12 + hlen])
        assert list(header) == sorted(header)
        assert header["shapes"] == [[3, 4]]


class TestImageGrid:
    def read_pgm(self, path):
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n")
        rest = raw[3:]
        dims, maxval, pixels = rest.split(b"\n", 2)
        w, h = map(int, dims.split())
        assert maxval == b"255"
        return w, h, np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)

    def test_nested_rows_layout(self, tmp_path):
        imgs = [[np.full(784, 0.5), np.zeros(784), np.ones(784)],
                [np.ones(784), np.zeros(784), np.full(784, 0.5)]]
        path = tmp_path / "g.pgm"
        export_image_grid(imgs, path)
        w, h, canvas = self.read_pgm(path)
        assert (w, h) == (3 * 28 + 2 * 2, 2 * 28 + 2)
        assert canvas[0, 0] == 128  # 0.5 rounds half-up
        assert canvas[0, 30] == 0  # second column starts at 28+2
        assert canvas[0, 60] == 255
        assert canvas[30, 0] == 255  # second row
        assert canvas[28, 0] == 0  # gutter row

    def test_flat_with_n_cols(self, tmp_path):
        imgs = [np.zeros(784)] * 4
        path = tmp_path / "g.pgm"
        export_image_grid(imgs, path, n_cols=2)
        w, h, _ = self.read_pgm(path)
        assert (w, h) == (2 * 28 + 2, 2 * 28 + 2)

    def test_clipping(self, tmp_path):
        img = np.zeros(784)
        img[0] = 1.0
        path = tmp_path / "g.pgm"
        export_image_grid([[img * 2 - 0.5]], path)  # values outside [0,1] clamp
        *_, canvas = self.read_pgm(path)
        assert canvas[0, 0] == 255 and canvas[0, 1] == 0

    def test_ragged_grid_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="ragged"):
            export_image_grid([[np.zeros(784)], [np.zeros(784), np.zeros(784)]], tmp_path / "g.pgm")

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            export_image_grid([], tmp_path / "g.pgm")


class TestResultsCsv:
    def test_header_exact(self):
        assert RESULTS_HEADER == (
            "method,blackbox,norm,fe_dist_mean,fe_dist_std,"
            "pixel_dist_mean,pixel_dist_std,opt_time_mean,opt_time_std,suc_rate"
        )

    def test_round_trip_exact_floats(self, tmp_path):
        rows = [
            ResultRow("dpmdce", "blackbox5", "l2", 1.0 / 3, 0.1, 2.5, 0.25, 0.017, 0.003, 0.96),
            ResultRow("piece", "blackbox5", "l1", float("nan"), float("nan"), 1.0, 0.0, 2.0, 0.1, 0.0),
        ]
        path = tmp_path / "results.csv"
        write_results(rows, path)
        back = read_results(path)
        assert len(back) == 2
        assert back[0].method == "dpmdce" and back[0].norm == "l2"
        assert back[0].fe_dist_mean == rows[0].fe_dist_mean  # repr round-trips doubles
        assert np.isnan(back[1].fe_dist_mean)
        assert back[1].suc_rate == 0.0

    def test_header_validated_on_read(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_results(path)

    def test_fields_match_header(self):
        assert ",".join(ResultRow.FIELDS) == RESULTS_HEADER
