import numpy as np
import pytest

from pyrmask.data import (MIN_SHAPE_PIXELS, SceneDataset, generate_scene,
                          hflip_sample, palette)
from pyrmask.errors import ConfigError, ShapeError


class TestPalette:
    def test_background_slot_is_dark(self):
        colors = palette(8)
        assert colors.shape == (8, 3)
        assert colors[0].max() < 0.2

    def test_shape_colors_distinct(self):
        colors = palette(8)
        for i in range(1, 8):
            for j in range(i + 1, 8):
                assert np.abs(colors[i] - colors[j]).max() > 0.05


class TestGenerateScene:
    def test_bit_determinism(self):
        a = generate_scene(11, 64, 64, 8)
        b = generate_scene(11, 64, 64, 8)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label_map, b.label_map)

    def test_different_seeds_differ(self):
        a = generate_scene(0, 64, 64, 8)
        b = generate_scene(1, 64, 64, 8)
        assert not np.array_equal(a.label_map, b.label_map) or \
            not np.array_equal(a.image, b.image)

    def test_shapes_and_ranges(self):
        s = generate_scene(3, 64, 96, 8)
        assert s.image.shape == (3, 64, 96)
        assert s.label_map.shape == (64, 96)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.label_map.min() >= 0 and s.label_map.max() < 8

    def test_size_must_be_multiple_of_32(self):
        with pytest.raises(ShapeError):
            generate_scene(0, 60, 64, 8)

    def test_needs_background_plus_shapes(self):
        with pytest.raises(ConfigError):
            generate_scene(0, 64, 64, 1)

    def test_two_categories_uses_only_one_shape_class(self):
        for seed in range(20):
            s = generate_scene(seed, 64, 64, 2)
            assert set(np.unique(s.label_map)) <= {0, 1}

    def test_shape_count_and_minimum_size(self):
        for seed in range(100):
            s = generate_scene(seed, 64, 64, 8)
            assert 1 <= len(s.shapes) <= 4
            for sh in s.shapes:
                assert sh.pixel_count >= MIN_SHAPE_PIXELS
                assert 1 <= sh.category < 8

    def test_background_always_visible(self):
        for seed in range(50):
            s = generate_scene(seed, 64, 64, 8)
            assert (s.label_map == 0).sum() > 0

    def test_label_counts_match_shape_records(self):
        # shapes never overlap, so per-category label counts are exactly the
        # sums of the recorded pixel counts
        for seed in range(50):
            s = generate_scene(seed, 64, 64, 8)
            by_cat = {}
            for sh in s.shapes:
                by_cat[sh.category] = by_cat.get(sh.category, 0) + sh.pixel_count
            for k in range(1, 8):
                assert (s.label_map == k).sum() == by_cat.get(k, 0)

    def test_pixel_count_tracks_analytic_area(self):
        # rasterization error is a boundary effect, so it is bounded by the
        # perimeter plus a small constant
        for seed in range(200):
            s = generate_scene(seed, 64, 64, 8)
            for sh in s.shapes:
                assert abs(sh.pixel_count - sh.analytic_area) <= sh.perimeter + 4.0

    def test_every_category_appears_often_enough(self):
        seen = np.zeros(8)
        n = 300
        for seed in range(n):
            s = generate_scene(seed, 64, 64, 8)
            for k in set(sh.category for sh in s.shapes):
                seen[k] += 1
        assert (seen[1:] / n).min() >= 0.15


class TestSceneDataset:
    def test_lazy_indexing_matches_generator(self):
        ds = SceneDataset("train", 8, 7, 64, 64, 8)
        direct = generate_scene(ds.seed_of(3), 64, 64, 8)
        assert np.array_equal(ds[3].image, direct.image)

    def test_split_seed_streams_disjoint(self):
        train = SceneDataset("train", 500, 7, 64, 64, 8)
        val = SceneDataset("val", 500, 7, 64, 64, 8)
        t = {train.seed_of(i) for i in range(len(train))}
        v = {val.seed_of(i) for i in range(len(val))}
        assert not (t & v)

    def test_bounds_checked(self):
        ds = SceneDataset("train", 4, 0, 64, 64, 8)
        assert len(ds) == 4
        with pytest.raises(IndexError):
            ds[4]
        with pytest.raises(IndexError):
            ds[-1]

    def test_unknown_split_rejected(self):
        with pytest.raises(ConfigError):
            SceneDataset("test", 4, 0, 64, 64, 8)


class TestHflip:
    def test_involution(self):
        s = generate_scene(5, 64, 64, 8)
        back = hflip_sample(hflip_sample(s))
        assert np.array_equal(back.image, s.image)
        assert np.array_equal(back.label_map, s.label_map)

    def test_mirrors_columns(self):
        s = generate_scene(6, 64, 64, 8)
        f = hflip_sample(s)
        assert np.array_equal(f.label_map[:, 0], s.label_map[:, -1])
        assert np.array_equal(f.image[:, :, 0], s.image[:, :, -1])
        assert f.seed == s.seed
