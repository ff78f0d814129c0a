"""Dataset, PNM I/O, fold-split, and episode-sampling tests.

Image/mask round-trips are checked bit-exactly; mask downsampling against a
per-block loop oracle; generation determinism by generating twice.
"""

import numpy as np
import pytest

from reflseg import episodes as ep


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    ep.generate_dataset(n_per_class=3, seed=7, out_dir=root)
    return ep.load_manifest(root)


class TestShapeClass:
    def test_twenty_unique_classes(self):
        seen = {(c.family, c.texture_freq) for c in map(ep.ShapeClass.from_id, range(20))}
        assert len(seen) == 20

    def test_families_cycle(self):
        assert ep.ShapeClass.from_id(0).family == ep.ShapeClass.from_id(5).family
        assert ep.ShapeClass.from_id(0).family != ep.ShapeClass.from_id(1).family

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ep.ShapeClass.from_id(20)


class TestRendering:
    @pytest.mark.parametrize("class_id", [0, 7, 13, 19])
    def test_sample_contract(self, class_id):
        img, mask = ep.render_sample(class_id, np.random.default_rng(0))
        assert img.shape == (3, 64, 64) and mask.shape == (64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.sum() >= ep.MIN_FOREGROUND

    def test_deterministic_in_rng(self):
        a = ep.render_sample(3, np.random.default_rng([1, 2]))
        b = ep.render_sample(3, np.random.default_rng([1, 2]))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_asymmetric_families_orient(self):
        # a wedge drawn with orient -1 is the mirror of orient +1
        a = ep._shape_mask("triangle", 32.0, 32.0, 12.0, 1)
        b = ep._shape_mask("triangle", 31.0, 32.0, 12.0, -1)
        np.testing.assert_array_equal(a, b[:, ::-1])
        assert not np.array_equal(a, a[:, ::-1])  # genuinely chiral


class TestPnmIO:
    def test_ppm_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.random((3, 8, 5)) * 255.0) / 255.0
        path = tmp_path / "x.ppm"
        ep.write_ppm(path, img)
        np.testing.assert_allclose(ep.read_ppm(path), img, atol=1e-12)

    def test_pgm_roundtrip_bit_exact(self, tmp_path):
        mask = (np.random.default_rng(1).random((6, 9)) > 0.5).astype(np.uint8)
        path = tmp_path / "m.pgm"
        ep.write_pgm(path, mask)
        np.testing.assert_array_equal(ep.read_pgm(path), mask)

    def test_header_with_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes([0, 255, 255, 0])
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + payload)
        np.testing.assert_array_equal(ep.read_pgm(path), [[0, 1], [1, 0]])

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError):
            ep.read_ppm(path)


class TestGeneration:
    def test_manifest_shape(self, tiny_dataset):
        assert len(tiny_dataset.rows) == 20 * 3
        assert sorted(tiny_dataset.by_class) == list(range(20))
        for idxs in tiny_dataset.by_class.values():
            assert len(idxs) == 3

    def test_load_sample(self, tiny_dataset):
        s = tiny_dataset.load(0)
        assert s.image.shape == (3, 64, 64)
        assert s.mask.shape == (64, 64)
        assert s.class_id == tiny_dataset.rows[0][1]

    def test_generation_is_deterministic(self, tmp_path):
        ep.generate_dataset(2, seed=7, out_dir=tmp_path / "a")
        ep.generate_dataset(2, seed=7, out_dir=tmp_path / "b")
        ma = ep.load_manifest(tmp_path / "a")
        mb = ep.load_manifest(tmp_path / "b")
        for i in range(len(ma.rows)):
            np.testing.assert_array_equal(ma.load(i).image, mb.load(i).image)
            np.testing.assert_array_equal(ma.load(i).mask, mb.load(i).mask)

    def test_different_seed_differs(self, tmp_path):
        ep.generate_dataset(1, seed=1, out_dir=tmp_path / "a")
        ep.generate_dataset(1, seed=2, out_dir=tmp_path / "b")
        a = ep.load_manifest(tmp_path / "a").load(0)
        b = ep.load_manifest(tmp_path / "b").load(0)
        assert np.abs(a.image - b.image).max() > 0


class TestFolds:
    def test_partition(self):
        all_novel = []
        for fold in range(4):
            split = ep.split_folds(fold)
            assert len(split.novel_classes) == 5
            assert len(split.base_classes) == 15
            assert not set(split.novel_classes) & set(split.base_classes)
            all_novel.extend(split.novel_classes)
        assert sorted(all_novel) == list(range(20))

    def test_bad_fold(self):
        with pytest.raises(ValueError):
            ep.split_folds(4)


class TestDownsampleMask:
    def test_matches_block_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            m = (rng.random((16, 16)) > 0.5).astype(np.uint8)
            got = ep.downsample_mask(m, 4)
            want = np.zeros((4, 4), dtype=np.uint8)
            for i in range(4):
                for j in range(4):
                    block = m[4 * i:4 * i + 4, 4 * j:4 * j + 4]
                    want[i, j] = 1 if block.mean() >= 0.5 else 0
            np.testing.assert_array_equal(got, want)

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            ep.downsample_mask(np.zeros((10, 10)), 4)

    def test_flip_commutes(self):
        m = (np.random.default_rng(6).random((16, 16)) > 0.5).astype(np.uint8)
        np.testing.assert_array_equal(
            ep.downsample_mask(m[:, ::-1], 4), ep.downsample_mask(m, 4)[:, ::-1])


class TestSampleEpisode:
    def test_train_uses_base_classes(self, tiny_dataset):
        split = ep.split_folds(0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            epi = ep.sample_episode(tiny_dataset, split, "train", 1, rng)
            assert epi.class_id in split.base_classes
            assert len(epi.supports) == 1

    def test_test_uses_novel_classes(self, tiny_dataset):
        split = ep.split_folds(0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            epi = ep.sample_episode(tiny_dataset, split, "test", 1, rng)
            assert epi.class_id in split.novel_classes

    def test_query_not_in_supports(self, tiny_dataset):
        rng = np.random.default_rng(1)
        for _ in range(30):
            epi = ep.sample_episode(tiny_dataset, ep.split_folds(1), "train", 2, rng)
            support_ids = {s.sample_id for s in epi.supports}
            assert epi.query.sample_id not in support_ids
            assert len(support_ids) == 2

    def test_deterministic_in_rng(self, tiny_dataset):
        a = ep.sample_episode(tiny_dataset, ep.split_folds(0), "test", 1,
                              np.random.default_rng(42))
        b = ep.sample_episode(tiny_dataset, ep.split_folds(0), "test", 1,
                              np.random.default_rng(42))
        assert a.query.sample_id == b.query.sample_id
        assert [s.sample_id for s in a.supports] == [s.sample_id for s in b.supports]

    def test_k_too_large(self, tiny_dataset):
        with pytest.raises(ValueError):
            ep.sample_episode(tiny_dataset, ep.split_folds(0), "train", 3,
                              np.random.default_rng(0))

    def test_bad_phase(self, tiny_dataset):
        with pytest.raises(ValueError):
            ep.sample_episode(tiny_dataset, ep.split_folds(0), "val", 1,
                              np.random.default_rng(0))
