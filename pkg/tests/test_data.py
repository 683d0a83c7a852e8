import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpoislab import data, nn
from fedpoislab.errors import FormatError, InputError


def write_idx_pair(tmp_path, pixels, labels):
    """pixels: (n, rows, cols) uint8; labels: (n,) uint8."""
    n, rows, cols = pixels.shape
    img = tmp_path / "images.idx3-ubyte"
    lab = tmp_path / "labels.idx1-ubyte"
    img.write_bytes(struct.pack(">IIII", data.IMAGE_MAGIC, n, rows, cols) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", data.LABEL_MAGIC, len(labels)) + labels.tobytes())
    return img, lab


class TestLoadIdx:
    def test_shapes_and_counts(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=5, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, pixels, labels)
        ds = data.load_idx(img, lab)
        assert ds.features.shape == (5, 784)
        assert len(ds) == 5

    def test_normalization_endpoints(self, tmp_path):
        pixels = np.array([[[0, 255]]], dtype=np.uint8).reshape(1, 1, 2)
        labels = np.array([3], dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, pixels, labels)
        ds = data.load_idx(img, lab)
        assert ds.features[0, 0] == -1.0
        assert ds.features[0, 1] == 1.0

    def test_count_mismatch(self, tmp_path):
        pixels = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        img = tmp_path / "img"
        lab = tmp_path / "lab"
        img.write_bytes(struct.pack(">IIII", data.IMAGE_MAGIC, 3, 2, 2) + pixels.tobytes())
        lab.write_bytes(struct.pack(">II", data.LABEL_MAGIC, 2) + labels.tobytes())
        with pytest.raises(FormatError, match="count"):
            data.load_idx(img, lab)

    def test_wrong_magic(self, tmp_path):
        img = tmp_path / "img"
        lab = tmp_path / "lab"
        img.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 1, 1) + b"\x00")
        lab.write_bytes(struct.pack(">II", data.LABEL_MAGIC, 1) + b"\x00")
        with pytest.raises(FormatError, match="magic"):
            data.load_idx(img, lab)

    def test_truncated_file(self, tmp_path):
        img = tmp_path / "img"
        lab = tmp_path / "lab"
        img.write_bytes(struct.pack(">IIII", data.IMAGE_MAGIC, 4, 2, 2) + b"\x00" * 7)
        lab.write_bytes(struct.pack(">II", data.LABEL_MAGIC, 4) + b"\x00" * 4)
        with pytest.raises(FormatError, match="truncated"):
            data.load_idx(img, lab)

    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, size=(7, 4, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, size=7, dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, pixels, labels)
        ds = data.load_idx(img, lab)
        assert np.array_equal(data.features_to_bytes(ds.features), pixels.reshape(7, 16))
        assert np.abs((ds.features + 1.0) * 127.5 - pixels.reshape(7, 16)).max() < 1.0 / 255.0


class TestSynthMixture:
    def test_counts_per_class(self):
        ds = data.synth_mixture(2, 50, 8, 3.0, seed=0)
        assert len(ds) == 100
        assert (ds.labels == 0).sum() == 50
        assert (ds.labels == 1).sum() == 50

    def test_zero_separation_centers_coincide(self):
        centers = data.class_centers(2, 8, 0.0)
        assert np.array_equal(centers, np.zeros((2, 8)))
        ds = data.synth_mixture(2, 400, 8, 0.0, seed=1)
        for c in (0, 1):
            mean = ds.features[ds.labels == c].mean(axis=0)
            assert np.abs(mean).max() < 0.15

    def test_deterministic(self):
        a = data.synth_mixture(3, 20, 6, 2.0, seed=9)
        b = data.synth_mixture(3, 20, 6, 2.0, seed=9)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_range_and_dim_check(self):
        ds = data.synth_mixture(3, 30, 5, 5.0, seed=2)
        assert ds.features.min() >= -1.0 and ds.features.max() <= 1.0
        with pytest.raises(InputError):
            data.synth_mixture(2, 10, 1, 1.0, seed=0)

    def test_central_training_calibration(self):
        # default classifier on separation-3 data clears 0.95 test accuracy
        ds = data.synth_mixture(classes=4, n_per_class=600, dim=16, separation=3.0, seed=7)
        train, test = data.train_test_split(ds, 0.2, seed=8)
        net = nn.init_network(nn.NetworkSpec((16, 128, 4)), seed=1)
        net = nn.train_network(net, train.features, train.labels,
                               epochs=15, batch_size=32, lr=0.05, seed=2)
        assert nn.evaluate_accuracy(net, test.features, test.labels) >= 0.95


class TestPartitionIid:
    def test_even_split(self):
        ds = data.synth_mixture(2, 50, 4, 1.0, seed=0)
        plan = data.partition_iid(ds, 4, seed=1)
        assert [len(a) for a in plan.assignments] == [25, 25, 25, 25]

    def test_uneven_split_sizes(self):
        ds = data.synth_mixture(2, 51, 4, 1.0, seed=0).subset(np.arange(101))
        plan = data.partition_iid(ds, 4, seed=1)
        assert sorted(len(a) for a in plan.assignments) == [25, 25, 25, 26]

    def test_exact_cover(self):
        ds = data.synth_mixture(2, 50, 4, 1.0, seed=0)
        plan = data.partition_iid(ds, 7, seed=3)
        combined = np.sort(np.concatenate(plan.assignments))
        assert np.array_equal(combined, np.arange(100))

    def test_bad_client_count(self):
        ds = data.synth_mixture(2, 5, 4, 1.0, seed=0)
        with pytest.raises(InputError):
            data.partition_iid(ds, 0, seed=0)
        with pytest.raises(InputError):
            data.partition_iid(ds, 11, seed=0)


class TestPartitionDirichlet:
    def test_per_class_totals_preserved(self):
        ds = data.synth_mixture(3, 40, 4, 1.0, seed=0)
        plan = data.partition_dirichlet(ds, 5, alpha=0.5, seed=2)
        plan.validate_against(len(ds))
        for c in range(3):
            total = sum((ds.labels[a] == c).sum() for a in plan.assignments)
            assert total == 40

    def test_large_alpha_near_uniform(self):
        ds = data.synth_mixture(2, 1000, 4, 1.0, seed=0)
        plan = data.partition_dirichlet(ds, 10, alpha=1e6, seed=3)
        for c in range(2):
            counts = np.array([(ds.labels[a] == c).sum() for a in plan.assignments])
            assert np.abs(counts - 100).max() <= 20  # within 20% of uniform

    def test_skew_lowers_label_entropy_vs_iid(self):
        def mean_entropy(ds, plan):
            ents = []
            for a in plan.assignments:
                _, counts = np.unique(ds.labels[a], return_counts=True)
                p = counts / counts.sum()
                ents.append(float(-(p * np.log(p)).sum()))
            return np.mean(ents)

        ds = data.synth_mixture(4, 250, 4, 1.0, seed=0)
        diri, iid = [], []
        for seed in range(20):
            diri.append(mean_entropy(ds, data.partition_dirichlet(ds, 10, 0.5, seed)))
            iid.append(mean_entropy(ds, data.partition_iid(ds, 10, seed)))
        assert np.mean(diri) < np.mean(iid)

    def test_alpha_validation(self):
        ds = data.synth_mixture(2, 10, 4, 1.0, seed=0)
        with pytest.raises(InputError):
            data.partition_dirichlet(ds, 3, alpha=0.0, seed=0)

    def test_no_empty_clients(self):
        # tiny alpha concentrates classes; the repair rule must still fill everyone
        ds = data.synth_mixture(2, 30, 4, 1.0, seed=0)
        for seed in range(10):
            plan = data.partition_dirichlet(ds, 8, alpha=0.05, seed=seed)
            plan.validate_against(len(ds))


@given(st.integers(2, 6), st.integers(10, 60), st.integers(1, 8), st.integers(0, 500),
       st.sampled_from(["iid", "dirichlet"]))
@settings(max_examples=25, deadline=None)
def test_partitions_are_exact(classes, n_per_class, n_clients, seed, mode):
    ds = data.synth_mixture(classes, n_per_class, 4, 1.0, seed=0)
    if mode == "iid":
        plan = data.partition_iid(ds, n_clients, seed)
    else:
        plan = data.partition_dirichlet(ds, n_clients, 0.5, seed)
    plan.validate_against(len(ds))


def test_dataset_to_csv(tmp_path):
    ds = data.synth_mixture(2, 3, 4, 1.0, seed=5)
    path = tmp_path / "dump.csv"
    data.dataset_to_csv(ds, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "x0,x1,x2,x3,label"
    assert len(lines) == 7
    first = lines[1].split(",")
    assert float(first[0]) == ds.features[0, 0]
    assert int(first[-1]) == ds.labels[0]
