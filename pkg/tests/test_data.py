import struct

import numpy as np
import pytest

from fedbnn import data as D


def _write_pair(tmp_path, images, labels):
    n, rows, cols = images.shape
    ip = tmp_path / "imgs"
    lp = tmp_path / "lbls"
    with open(ip, "wb") as f:
        f.write(struct.pack(">IIII", D.IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(lp, "wb") as f:
        f.write(struct.pack(">II", D.IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())
    return str(ip), str(lp)


class TestLoadIdx:
    def test_hand_built_fixture(self, tmp_path):
        images = np.zeros((2, 28, 28), dtype=np.uint8)
        images[0, 0, 0] = 255
        images[1, 3, 4] = 128
        ip, lp = _write_pair(tmp_path, images, np.array([7, 2]))
        ds = D.load_idx(ip, lp)
        assert ds.images.shape == (2, 1, 28, 28)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[1, 0, 3, 4] == pytest.approx(128 / 255)
        assert ds.labels.tolist() == [7, 2]

    def test_wrong_magic(self, tmp_path):
        images = np.zeros((1, 4, 4), dtype=np.uint8)
        ip, lp = _write_pair(tmp_path, images, np.array([0]))
        raw = bytearray(open(ip, "rb").read())
        raw[3] = 0x99
        open(ip, "wb").write(bytes(raw))
        with pytest.raises(D.IdxFormatError):
            D.load_idx(ip, lp)

    def test_truncated_payload(self, tmp_path):
        images = np.zeros((2, 4, 4), dtype=np.uint8)
        ip, lp = _write_pair(tmp_path, images, np.array([0, 1]))
        raw = open(ip, "rb").read()
        open(ip, "wb").write(raw[:-5])
        with pytest.raises(D.IdxTruncatedError):
            D.load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((2, 4, 4), dtype=np.uint8)
        ip, _ = _write_pair(tmp_path, images, np.array([0, 1]))
        lp2 = tmp_path / "lbls3"
        with open(lp2, "wb") as f:
            f.write(struct.pack(">II", D.IDX_LABELS_MAGIC, 3))
            f.write(bytes([0, 1, 2]))
        with pytest.raises(D.IdxCountMismatchError):
            D.load_idx(ip, str(lp2))

    def test_write_read_roundtrip(self, tmp_path):
        ds = D.synthetic_dataset(20, 4, seed=5, image_hw=6)
        ip = str(tmp_path / "im")
        lp = str(tmp_path / "lb")
        D.write_idx(ds, ip, lp)
        back = D.load_idx(ip, lp)
        assert np.array_equal(back.labels, ds.labels)
        assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-12


class TestSyntheticDataset:
    def test_deterministic(self):
        a = D.synthetic_dataset(50, 5, seed=9)
        b = D.synthetic_dataset(50, 5, seed=9)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_noise_free_nearest_prototype_is_perfect(self):
        ds = D.synthetic_dataset(40, 4, seed=3, noise=0.0)
        protos = np.stack([ds.images[ds.labels == c][0] for c in range(4)])
        flat = ds.images.reshape(len(ds), -1)
        pf = protos.reshape(4, -1)
        d2 = ((flat[:, None, :] - pf[None]) ** 2).sum(-1)
        assert np.array_equal(np.argmin(d2, axis=1), ds.labels)

    def test_balanced_classes(self):
        ds = D.synthetic_dataset(43, 5, seed=0)
        counts = np.bincount(ds.labels, minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            D.synthetic_dataset(3, 5, seed=0)


class TestFmnistLike:
    def test_shape_and_range(self):
        ds = D.fmnist_like_dataset(30, seed=2)
        assert ds.images.shape == (30, 1, 28, 28)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.n_classes == 10

    def test_deterministic(self):
        a = D.fmnist_like_dataset(25, seed=4)
        b = D.fmnist_like_dataset(25, seed=4)
        assert np.array_equal(a.images, b.images)

    def test_classes_distinguishable_by_mean_template(self):
        ds = D.fmnist_like_dataset(600, seed=1)
        templates = np.stack([ds.images[ds.labels == c].mean(axis=0)
                              for c in range(10)])
        flat = ds.images.reshape(len(ds), -1)
        tf = templates.reshape(10, -1)
        d2 = ((flat[:, None, :] - tf[None]) ** 2).sum(-1)
        acc = (np.argmin(d2, axis=1) == ds.labels).mean()
        assert acc > 0.65  # far above the 0.1 chance level


class TestSplitValTest:
    def test_equal_halves(self):
        ds = D.synthetic_dataset(100, 4, seed=1)
        val, test = D.split_val_test(ds, seed=0)
        assert len(val) == 50 and len(test) == 50

    def test_odd_split(self):
        ds = D.synthetic_dataset(31, 3, seed=1)
        val, test = D.split_val_test(ds, seed=0)
        assert abs(len(val) - len(test)) <= 1
        assert len(val) + len(test) == 31

    def test_disjoint_and_deterministic(self):
        ds = D.synthetic_dataset(60, 4, seed=1)
        v1, t1 = D.split_val_test(ds, seed=5)
        v2, _ = D.split_val_test(ds, seed=5)
        assert np.array_equal(v1.images, v2.images)
        joined = np.concatenate([v1.images, t1.images]).reshape(60, -1)
        assert len(np.unique(joined, axis=0)) == 60


def _coverage(parts, n):
    all_idx = np.concatenate(parts)
    assert len(np.unique(all_idx)) == len(all_idx), "partitions overlap"
    return len(all_idx) / n


class TestPartition:
    def test_iid_equal_shares(self):
        ds = D.synthetic_dataset(100, 5, seed=0)
        parts = D.partition(ds, D.PartitionSpec("iid", 4, seed=1))
        assert sorted(len(p) for p in parts) == [25, 25, 25, 25]
        assert _coverage(parts, 100) == 1.0

    def test_iid_remainder_to_low_clients(self):
        ds = D.synthetic_dataset(10, 2, seed=0)
        parts = D.partition(ds, D.PartitionSpec("iid", 3, seed=1))
        assert [len(p) for p in parts] == [4, 3, 3]

    def test_deterministic(self):
        ds = D.synthetic_dataset(90, 3, seed=0)
        spec = D.PartitionSpec("dirichlet", 5, seed=7)
        a = D.partition(ds, spec)
        b = D.partition(ds, spec)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_dirichlet_covers_everything(self):
        ds = D.synthetic_dataset(200, 4, seed=0)
        parts = D.partition(ds, D.PartitionSpec("dirichlet", 6, seed=3))
        assert _coverage(parts, 200) == 1.0

    def test_dirichlet_huge_alpha_is_near_iid(self):
        ds = D.synthetic_dataset(10000, 10, seed=0)
        parts = D.partition(ds, D.PartitionSpec("dirichlet", 5, seed=2,
                                                dirichlet_alpha=1e6))
        for p in parts:
            hist = np.bincount(ds.labels[p], minlength=10) / len(p)
            assert np.max(np.abs(hist - 0.1)) / 0.1 < 0.2

    def test_label_count_max_labels(self):
        ds = D.synthetic_dataset(500, 10, seed=0)
        parts = D.partition(ds, D.PartitionSpec("label_count", 8, seed=4,
                                                labels_per_client=3))
        for p in parts:
            assert len(np.unique(ds.labels[p])) <= 3
        assert _coverage(parts, 500) == 1.0

    def test_label_count_covers_all_labels(self):
        ds = D.synthetic_dataset(300, 10, seed=0)
        parts = D.partition(ds, D.PartitionSpec("label_count", 5, seed=4,
                                                labels_per_client=3))
        seen = set()
        for p in parts:
            seen |= set(np.unique(ds.labels[p]).tolist())
        assert seen == set(range(10))

    def test_label_count_infeasible(self):
        ds = D.synthetic_dataset(100, 10, seed=0)
        with pytest.raises(D.PartitionConfigError):
            D.partition(ds, D.PartitionSpec("label_count", 2, seed=0,
                                            labels_per_client=3))

    def test_too_few_samples(self):
        ds = D.synthetic_dataset(4, 2, seed=0)
        with pytest.raises(D.PartitionConfigError):
            D.partition(ds, D.PartitionSpec("iid", 10, seed=0))

    def test_dirichlet_skew_exceeds_iid(self):
        # mean KL(client histogram || uniform), 20 seeds each scheme
        ds = D.synthetic_dataset(2000, 10, seed=0)

        def mean_kl(scheme, alpha, seed):
            parts = D.partition(ds, D.PartitionSpec(scheme, 8, seed=seed,
                                                    dirichlet_alpha=alpha))
            kls = []
            for p in parts:
                if len(p) == 0:
                    continue
                h = np.bincount(ds.labels[p], minlength=10) / len(p)
                h = h[h > 0]
                kls.append(float(np.sum(h * np.log(h * 10))))
            return np.mean(kls)

        iid_kl = np.mean([mean_kl("iid", 0.3, s) for s in range(20)])
        dir_kl = np.mean([mean_kl("dirichlet", 0.3, s) for s in range(20)])
        assert dir_kl > iid_kl

    def test_manifest_export(self, tmp_path):
        import json
        ds = D.synthetic_dataset(30, 3, seed=0)
        parts = D.partition(ds, D.PartitionSpec("iid", 3, seed=0))
        path = str(tmp_path / "manifest.json")
        D.export_partition_manifest(parts, path)
        with open(path) as f:
            loaded = json.load(f)
        assert sorted(loaded) == ["0", "1", "2"]
        assert loaded["0"] == parts[0].tolist()


class TestPartitionSpecValidation:
    def test_bad_scheme(self):
        with pytest.raises(D.PartitionConfigError):
            D.PartitionSpec("uniform", 3)

    def test_bad_alpha(self):
        with pytest.raises(D.PartitionConfigError):
            D.PartitionSpec("dirichlet", 3, dirichlet_alpha=0.0)
