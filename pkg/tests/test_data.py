import numpy as np
import pytest
from hypothesis import given, strategies as st

from memo_tta import data as D


@pytest.fixture(scope="module")
def small():
    return D.generate_synthetic(4, 10, image_size=16, seed=3, split="test_clean")


class TestSynthetic:
    def test_shape_labels_and_range(self, small):
        assert small.images.shape == (40, 1, 16, 16) and small.images.dtype == np.float32
        assert np.bincount(small.labels).tolist() == [10] * 4
        assert 0.0 <= small.images.min() and small.images.max() <= 1.0

    def test_empty(self):
        ds = D.generate_synthetic(3, 0, 16)
        assert len(ds) == 0 and ds.images.shape == (0, 1, 16, 16)

    def test_deterministic(self):
        a = D.generate_synthetic(3, 4, 16, seed=9)
        b = D.generate_synthetic(3, 4, 16, seed=9)
        np.testing.assert_array_equal(a.images, b.images)
        c = D.generate_synthetic(3, 4, 16, seed=10)
        assert not np.array_equal(a.images, c.images)

    def test_classes_are_visually_distinct(self):
        # noiseless renders of different shapes at the same pose differ
        imgs = [D.render_shape(s, 32, 16, 16, 10, 0.3, 0.8, 0.2) for s in D.SHAPES]
        for i in range(len(imgs)):
            for j in range(i + 1, len(imgs)):
                assert np.abs(imgs[i] - imgs[j]).mean() > 0.01, (D.SHAPES[i], D.SHAPES[j])

    @pytest.mark.parametrize("kw", [dict(num_classes=1), dict(num_classes=11), dict(image_size=8)])
    def test_rejects_bad_arguments(self, kw):
        args = dict(num_classes=4, n_per_class=2) | kw
        with pytest.raises(ValueError):
            D.generate_synthetic(**args)

    def test_dataset_validation(self):
        with pytest.raises(D.LabelRangeError):
            D.Dataset(np.zeros((1, 1, 2, 2)), np.array([5]), 4)
        with pytest.raises(ValueError):
            D.Dataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), 4)


class TestCorruptions:
    def test_severity_table_lookup(self):
        assert D.CorruptionSpec("gaussian_noise", 3).param == 0.12

    @pytest.mark.parametrize("kind", list(D.SEVERITY_TABLE))
    def test_tables_monotone_in_strength(self, kind):
        t = np.array(D.SEVERITY_TABLE[kind])
        # noise sigma, blur radius, brightness shift grow; photon count, contrast and pixel scale shrink
        increasing = kind in ("gaussian_noise", "speckle_noise", "defocus_blur_approx", "brightness")
        assert np.all(np.diff(t) > 0) if increasing else np.all(np.diff(t) < 0)

    @pytest.mark.parametrize("sev", [0, 6])
    def test_severity_range(self, sev):
        with pytest.raises(ValueError):
            D.CorruptionSpec("gaussian_noise", sev)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            D.CorruptionSpec("fog", 1)

    def test_zero_sigma_is_identity(self, small):
        img = small.images[0]
        out = D.apply_corruption(img, "gaussian_noise", 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    @pytest.mark.parametrize("kind", list(D.SEVERITY_TABLE))
    def test_corrupt_deterministic_and_tagged(self, small, kind):
        spec = D.CorruptionSpec(kind, 4, seed=1)
        a, b = D.corrupt(small, spec), D.corrupt(small, spec)
        np.testing.assert_array_equal(a.images, b.images)
        assert a.split == f"test_shifted({kind},4)"
        np.testing.assert_array_equal(a.labels, small.labels)
        assert 0.0 <= a.images.min() and a.images.max() <= 1.0

    def test_corrupt_does_not_mutate_input(self, small):
        before = small.images.copy()
        D.corrupt(small, D.CorruptionSpec("gaussian_noise", 5))
        np.testing.assert_array_equal(small.images, before)

    def test_per_image_streams_independent_of_subset(self, small):
        spec = D.CorruptionSpec("shot_noise", 3)
        full = D.corrupt(small, spec)
        part = D.corrupt(small.subset(5), spec)
        np.testing.assert_array_equal(full.images[:5], part.images)

    def test_noise_distance_grows_with_severity(self, small):
        dist = [np.abs(D.corrupt(small, D.CorruptionSpec("gaussian_noise", s)).images - small.images).mean()
                for s in range(1, 6)]
        assert all(a < b for a, b in zip(dist, dist[1:]))

    def test_pixelate_constant_cells(self):
        img = np.random.default_rng(0).random((1, 8, 8))
        out = D._pixelate(img, 0.5)
        np.testing.assert_allclose(out[0, :2, :2], img[0, :2, :2].mean())


class TestIdx:
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
    def test_round_trip(self, tmp_path_factory, dims):
        path = tmp_path_factory.mktemp("idx") / "a.idx"
        arr = np.random.default_rng(len(dims)).integers(0, 256, size=dims, dtype=np.uint8)
        D.write_idx(path, arr)
        np.testing.assert_array_equal(D.read_idx(path), arr)

    def test_hand_built_fixture(self, tmp_path):
        header = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2])
        (tmp_path / "i.idx").write_bytes(header + bytes([0, 51, 102, 255, 255, 0, 0, 204]))
        (tmp_path / "l.idx").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 2, 1, 0]))
        ds = D.load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=2)
        np.testing.assert_array_equal(ds.images[0, 0], np.array([[0, 0.2], [0.4, 1.0]], np.float32))
        np.testing.assert_array_equal(ds.images[1, 0], np.array([[1.0, 0], [0, 0.8]], np.float32))
        assert ds.labels.tolist() == [1, 0]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.idx"
        p.write_bytes(b"\x00\x00\x0d\x01" + b"\x00\x00\x00\x01\x00")
        with pytest.raises(D.BadMagic):
            D.read_idx(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.idx"
        D.write_idx(p, np.zeros((4, 3), np.uint8))
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(D.TruncatedData):
            D.read_idx(p)

    def test_export_and_load(self, tmp_path, small):
        ip, lp = D.export_idx(small, tmp_path / "clean")
        back = D.load_idx(ip, lp, num_classes=4)
        np.testing.assert_array_equal(back.labels, small.labels)
        assert np.abs(back.images - small.images).max() <= 0.5 / 255 + 1e-6

    def test_load_rejects_label_out_of_range(self, tmp_path):
        D.write_idx(tmp_path / "i.idx", np.zeros((2, 4, 4), np.uint8))
        D.write_idx(tmp_path / "l.idx", np.array([0, 7], np.uint8))
        with pytest.raises(D.LabelRangeError):
            D.load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=4)


class TestCifar:
    def rows(self, labels):
        rng = np.random.default_rng(0)
        return b"".join(bytes([y]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes() for y in labels)

    def test_parse(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(self.rows([3, 9]))
        ds = D.load_cifar_binary(p)
        assert ds.images.shape == (2, 3, 32, 32) and ds.labels.tolist() == [3, 9]

    def test_truncated(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(self.rows([1])[:-1])
        with pytest.raises(D.TruncatedData):
            D.load_cifar_binary(p)

    def test_label_out_of_range_names_row(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(self.rows([1, 255]))
        with pytest.raises(D.LabelRangeError, match="row 1"):
            D.load_cifar_binary(p)
