import struct

import numpy as np
import pytest

from silofl import data


def write_idx_pair(tmp_path, images, labels):
    """Images: (n, rows, cols) uint8; labels: (n,) uint8."""
    n, rows, cols = images.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes())
    return img_path, lbl_path


class TestIdx:
    def test_parses_header_and_scales(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
        images[0, 0, 0] = 255
        labels = np.array([3, 7], dtype=np.uint8)
        ds = data.load_idx(*write_idx_pair(tmp_path, images, labels))
        assert len(ds) == 2 and ds.dim == 784
        assert ds.samples[0, 0] == 1.0
        assert ds.labels.tolist() == [3, 7]

    def test_bad_magic_reports_offset(self, tmp_path):
        img = tmp_path / "bad.idx"
        img.write_bytes(struct.pack(">IIII", 0x00000999, 1, 2, 2) + b"\x00" * 4)
        lbl = tmp_path / "lbl.idx"
        lbl.write_bytes(struct.pack(">II", 0x00000801, 1) + b"\x00")
        with pytest.raises(data.IdxFormatError, match="byte 0"):
            data.load_idx(img, lbl)

    def test_truncated_reports_offset(self, tmp_path):
        img = tmp_path / "short.idx"
        img.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 3)
        lbl = tmp_path / "lbl.idx"
        lbl.write_bytes(struct.pack(">II", 0x00000801, 2) + b"\x00\x00")
        with pytest.raises(data.IdxFormatError, match="truncated"):
            data.load_idx(img, lbl)

    def test_count_mismatch(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
        labels = np.array([0, 1], dtype=np.uint8)
        with pytest.raises(data.IdxFormatError, match="mismatch"):
            data.load_idx(*write_idx_pair(tmp_path, images, labels))


class TestDownsample:
    def test_factor_one_identity(self, rng):
        ds = data.LabeledDataset(rng.random((3, 16)), np.zeros(3, dtype=int), 1)
        assert data.downsample(ds, 1) is ds

    def test_constant_image_stays_constant(self):
        ds = data.LabeledDataset(np.full((1, 16), 0.25), np.zeros(1, dtype=int), 1)
        out = data.downsample(ds, 2)
        np.testing.assert_array_equal(out.samples, np.full((1, 4), 0.25))

    def test_hand_block_means(self):
        img = np.array([[0.0, 1.0, 0.5, 0.5], [1.0, 0.0, 0.5, 0.5],
                        [0.2, 0.2, 1.0, 0.0], [0.2, 0.2, 0.0, 1.0]])
        ds = data.LabeledDataset(img.reshape(1, 16), np.zeros(1, dtype=int), 1)
        out = data.downsample(ds, 2)
        np.testing.assert_allclose(out.samples.reshape(2, 2), [[0.5, 0.5], [0.2, 0.5]])

    def test_indivisible_rejected(self):
        ds = data.LabeledDataset(np.zeros((1, 49)), np.zeros(1, dtype=int), 1)
        with pytest.raises(ValueError):
            data.downsample(ds, 4)


class TestDirichletPartition:
    def test_single_client_gets_all(self, rng):
        labels = np.array([0, 1, 1, 0, 2])
        plan = data.dirichlet_partition(labels, 1, 0.5, rng)
        assert plan.client_indices[0].tolist() == [0, 1, 2, 3, 4]

    def test_disjoint_cover_every_draw(self):
        labels = np.random.default_rng(3).integers(0, 5, size=200)
        for seed in range(10):
            plan = data.dirichlet_partition(labels, 4, 0.5, np.random.default_rng(seed))
            merged = np.sort(np.concatenate(plan.client_indices))
            np.testing.assert_array_equal(merged, np.arange(200))
            assert all(len(ci) >= 1 for ci in plan.client_indices)

    def test_near_iid_limit(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, size=2000)
        global_hist = np.bincount(labels, minlength=4) / labels.size
        plan = data.dirichlet_partition(labels, 4, 1e6, rng)
        for ci in plan.client_indices:
            hist = np.bincount(labels[ci], minlength=4) / ci.size
            assert np.max(np.abs(hist - global_hist)) < 0.05

    def test_skew_decreases_with_concentration(self):
        # mean total-variation distance from the global label mix, many seeds
        labels = np.random.default_rng(9).integers(0, 5, size=500)
        global_hist = np.bincount(labels, minlength=5) / labels.size

        def mean_tv(tau):
            tvs = []
            for seed in range(100):
                plan = data.dirichlet_partition(labels, 5, tau, np.random.default_rng(seed))
                for ci in plan.client_indices:
                    hist = np.bincount(labels[ci], minlength=5) / ci.size
                    tvs.append(0.5 * np.abs(hist - global_hist).sum())
            return float(np.mean(tvs))

        curve = [mean_tv(tau) for tau in (0.1, 0.5, 10.0, 1e6)]
        assert all(a >= b for a, b in zip(curve, curve[1:]))

    def test_too_few_samples_rejected(self, rng):
        with pytest.raises(ValueError):
            data.dirichlet_partition(np.array([0, 1]), 3, 0.5, rng)


class TestSplitTrainVal:
    def test_half_split_sizes(self, rng):
        train, val = data.split_train_val(np.arange(10), 0.5, rng)
        assert len(train) == 5 and len(val) == 5

    def test_disjoint_cover(self, rng):
        idx = np.arange(37)
        train, val = data.split_train_val(idx, 0.3, rng)
        np.testing.assert_array_equal(np.sort(np.concatenate([train, val])), idx)

    def test_seeded_determinism(self):
        a = data.split_train_val(np.arange(20), 0.25, np.random.default_rng(4))
        b = data.split_train_val(np.arange(20), 0.25, np.random.default_rng(4))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_stratified_keeps_class_mix(self, rng):
        labels = np.array([0] * 40 + [1] * 20)
        train, val = data.split_train_val(np.arange(60), 0.5, rng, labels=labels)
        assert np.sum(labels[val] == 0) == 20 and np.sum(labels[val] == 1) == 10

    def test_rejects_bad_fraction(self, rng):
        for frac in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                data.split_train_val(np.arange(5), frac, rng)


class TestToyAndFormats:
    def test_two_moons_bounds_and_classes(self, rng):
        ds = data.two_moons(100, 0.05, rng)
        assert ds.samples.min() >= 0 and ds.samples.max() <= 1
        assert set(np.unique(ds.labels)) == {0, 1}

    def test_digits14_geometry(self):
        ds = data.digits14()
        assert ds.dim == 196 and ds.n_classes == 10
        assert len(ds) > 1000

    def test_cifar_batch_roundtrip(self, tmp_path, rng):
        records = []
        for label in (1, 5):
            records.append(bytes([label]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
        path = tmp_path / "batch.bin"
        path.write_bytes(b"".join(records))
        ds = data.load_cifar_batch(path)
        assert len(ds) == 2 and ds.dim == 3072
        assert ds.labels.tolist() == [1, 5]

    def test_csv_roundtrip(self, tmp_path):
        path = tmp_path / "ds.csv"
        path.write_text("f0,label,f1\n0.5,2,0.25\n1.0,0,0.0\n")
        ds = data.load_csv_dataset(path)
        assert ds.labels.tolist() == [2, 0]
        np.testing.assert_allclose(ds.samples, [[0.5, 0.25], [1.0, 0.0]])

    def test_audited_dataset_counts_reads(self, rng):
        ds = data.LabeledDataset(rng.random((4, 2)), np.zeros(4, dtype=int), 1)
        audited = data.AuditedDataset(ds)
        assert audited.reads == 0
        _ = audited.samples
        _ = audited.labels
        assert audited.reads == 2
        assert len(audited) == 4 and audited.reads == 2

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            data.LabeledDataset(np.array([[1.5]]), np.array([0]), 1)
        with pytest.raises(ValueError):
            data.LabeledDataset(np.array([[0.5]]), np.array([1]), 1)
        with pytest.raises(ValueError):
            data.LabeledDataset(np.array([[np.nan]]), np.array([0]), 1)
