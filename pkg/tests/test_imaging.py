import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from charcascade.imaging import (
    IntegralImage, Rect, build_integral, integral_table, iter_window_grids, load_image,
    pyramid_scales, resample_bilinear, to_grayscale, window_grid,
)

gray_images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)))


@st.composite
def image_and_rect(draw, min_side=1):
    h = draw(st.integers(min_side, 14))
    w = draw(st.integers(min_side, 14))
    img = draw(arrays(np.uint8, (h, w)))
    rw = draw(st.integers(min_side, w))
    rh = draw(st.integers(min_side, h))
    return img, Rect(draw(st.integers(0, w - rw)), draw(st.integers(0, h - rh)), rw, rh)


class TestGrayscale:
    def test_single_channel_is_identity(self, rng):
        img = rng.integers(0, 256, (7, 9), dtype=np.uint8)
        assert np.array_equal(to_grayscale(img), img)
        assert np.array_equal(to_grayscale(img[:, :, None]), img)

    @pytest.mark.parametrize("v", [0, 1, 127, 128, 254, 255])
    def test_equal_channels_are_a_fixed_point(self, v):
        img = np.full((3, 4, 3), v, dtype=np.uint8)
        assert np.all(to_grayscale(img) == v)

    def test_color_matches_per_pixel_weighted_sum(self, rng):
        img = rng.integers(0, 256, (11, 13, 3), dtype=np.uint8)
        assert np.array_equal(to_grayscale(img), oracles.luminance(img))

    def test_alpha_channel_is_ignored(self, rng):
        img = rng.integers(0, 256, (5, 6, 4), dtype=np.uint8)
        assert np.array_equal(to_grayscale(img), oracles.luminance(img[:, :, :3]))

    @pytest.mark.parametrize("channels", [2, 5])
    def test_unsupported_channel_count(self, channels):
        with pytest.raises(ValueError, match="channel"):
            to_grayscale(np.zeros((4, 4, channels), dtype=np.uint8))

    def test_out_of_range_intensities_rejected(self):
        with pytest.raises(ValueError):
            to_grayscale(np.array([[0, 300]]))


class TestIntegral:
    def test_one_pixel(self):
        ii = build_integral(np.array([[5]], dtype=np.uint8))
        assert ii.table[1, 1] == 5
        assert ii.table.shape == (2, 2)

    @given(img=gray_images)
    def test_table_invariants(self, img):
        t = integral_table(img)
        assert t.dtype == np.int64
        assert t.shape == (img.shape[0] + 1, img.shape[1] + 1)
        assert not t[0].any() and not t[:, 0].any()
        assert np.all(np.diff(t, axis=0) >= 0) and np.all(np.diff(t, axis=1) >= 0)
        y = img.shape[0] // 2
        x = img.shape[1] // 2
        assert t[y, x] == oracles.rect_sum(img, 0, 0, x, y)

    @given(c=st.integers(0, 255), args=image_and_rect())
    def test_constant_image(self, c, args):
        img, r = args
        ii = build_integral(np.full_like(img, c))
        assert ii.rect_sum(r) == c * r.w * r.h
        assert ii.region_mean(r) == c

    @settings(max_examples=200)
    @given(args=image_and_rect())
    def test_rect_sum_matches_double_loop(self, args):
        img, r = args
        assert build_integral(img).rect_sum(r) == oracles.rect_sum(img, *r)

    def test_no_overflow_on_large_bright_frame(self):
        img = np.full((480, 640), 255, dtype=np.uint8)
        assert build_integral(img).rect_sum(Rect(0, 0, 640, 480)) == 255 * 640 * 480

    def test_stack_matches_single(self, rng):
        stack = rng.integers(0, 256, (4, 6, 5), dtype=np.uint8)
        t = integral_table(stack)
        for i in range(4):
            assert np.array_equal(t[i], integral_table(stack[i]))

    def test_table_is_read_only(self):
        ii = build_integral(np.ones((3, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            ii.table[0, 0] = 1

    @pytest.mark.parametrize("r", [Rect(-1, 0, 2, 2), Rect(0, 0, 5, 1), Rect(2, 2, 2, 2), Rect(0, 0, 0, 1)])
    def test_out_of_bounds_rect_rejected(self, r):
        with pytest.raises(ValueError):
            build_integral(np.zeros((3, 3), dtype=np.uint8)).region_mean(r)


class TestMeans:
    def test_two_by_two(self):
        ii = build_integral(np.array([[1, 2], [3, 4]], dtype=np.uint8))
        assert ii.region_mean(Rect(0, 0, 2, 2)) == 2.5

    @given(args=image_and_rect())
    def test_region_mean_matches_brute_force(self, args):
        img, r = args
        expect = oracles.rect_sum(img, *r) / (r.w * r.h)
        assert build_integral(img).region_mean(r) == pytest.approx(expect, rel=1e-9, abs=0)

    def test_three_by_three_cells_are_the_pixels(self, rng):
        img = rng.integers(0, 256, (3, 3), dtype=np.uint8)
        assert build_integral(img).subregion_means(Rect(0, 0, 3, 3)) == [float(v) for v in img.ravel()]

    def test_six_by_nine_cells(self, rng):
        img = rng.integers(0, 256, (12, 10), dtype=np.uint8)
        r = Rect(2, 1, 6, 9)
        got = build_integral(img).subregion_means(r)
        assert got == pytest.approx([float(m) for m in oracles.cell_means(img, *r)], rel=1e-12)

    @given(args=image_and_rect(min_side=3))
    def test_cells_partition_the_rect(self, args):
        img, r = args
        ii = build_integral(img)
        sums, areas = ii.cell_sums(r)
        assert sum(areas) == r.w * r.h
        assert sum(sums) == ii.rect_sum(r)
        assert [float(m) for m in oracles.cell_means(img, *r)] == pytest.approx(
            ii.subregion_means(r), rel=1e-12)

    def test_cells_reject_small_rect(self):
        with pytest.raises(ValueError, match="3x3"):
            build_integral(np.zeros((5, 5), np.uint8)).subregion_means(Rect(0, 0, 2, 5))


class TestLattice:
    def test_pyramid_stops_when_window_exceeds_frame(self):
        scales = pyramid_scales(100, 40, 20, 10, 1.5)
        assert scales[0] == 1.0
        for s in scales:
            assert round(20 * s) <= 100 and round(10 * s) <= 40
        assert len(pyramid_scales(19, 40, 20, 10)) == 0

    def test_max_scale_caps_pyramid(self):
        assert pyramid_scales(1000, 1000, 10, 10, 2.0, 1.0, 4.0) == [1.0, 2.0, 4.0]

    @pytest.mark.parametrize("bad", [dict(scale_step=1.0), dict(min_scale=0.5)])
    def test_pyramid_rejects_bad_config(self, bad):
        with pytest.raises(ValueError):
            pyramid_scales(100, 100, 10, 10, **bad)

    def test_grid_covers_frame(self):
        g = window_grid(30, 20, 12, 8, 1.0, 3)
        assert g.xs.tolist() == list(range(0, 19, 3))
        assert g.ys.tolist() == list(range(0, 13, 3))
        assert len(g) == 7 * 5
        for g in iter_window_grids(80, 60, 12, 8, 2, 1.3):
            assert g.xs.max() + g.w <= 80 and g.ys.max() + g.h <= 60


class TestResample:
    def test_same_size_is_a_crop(self, rng):
        img = rng.integers(0, 256, (30, 40), dtype=np.uint8)
        r = Rect(5, 7, 20, 11)
        assert np.array_equal(resample_bilinear(img, r, 20, 11), img[7:18, 5:25])

    def test_reduction_averages_the_footprint(self, rng):
        img = rng.integers(0, 256, (64, 96), dtype=np.uint8)
        out = resample_bilinear(img, Rect(0, 0, 96, 64), 12, 8)
        blocks = img.reshape(8, 8, 12, 8).astype(float).mean(axis=(1, 3))
        # point sampling would leave the pixel noise (std ~74) in place
        assert np.abs(out - blocks).mean() < 12
        assert abs(out.mean() - img.mean()) < 1

    @given(c=st.integers(0, 255), w=st.integers(1, 30), h=st.integers(1, 30))
    def test_constant_stays_constant(self, c, w, h):
        img = np.full((20, 25), c, dtype=np.uint8)
        assert np.all(resample_bilinear(img, Rect(1, 2, 17, 9), w, h) == c)

    def test_rejects_outside_and_degenerate(self):
        img = np.zeros((10, 10), np.uint8)
        with pytest.raises(ValueError):
            resample_bilinear(img, Rect(5, 5, 6, 2), 3, 3)
        with pytest.raises(ValueError):
            resample_bilinear(img, Rect(0, 0, 0, 2), 3, 3)


def test_load_image_formats(tmp_path, rng):
    from PIL import Image

    rgb = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "a.png")
    assert np.array_equal(load_image(tmp_path / "a.png"), oracles.luminance(rgb))
    gray = rng.integers(0, 256, (4, 5), dtype=np.uint8)
    np.save(tmp_path / "b.npy", gray)
    assert np.array_equal(load_image(tmp_path / "b.npy"), gray)


def test_integral_image_wraps_table(rng):
    img = rng.integers(0, 256, (4, 6), dtype=np.uint8)
    ii = IntegralImage.from_image(img)
    assert (ii.width, ii.height) == (6, 4)
