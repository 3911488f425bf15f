import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsbench.errors import (
    ChannelCountMismatch,
    EmptyInput,
    MaskedResizeUnsupported,
    PipelineStepError,
)
from rsbench.preprocess import (
    IMAGENET_RGB_MEANS,
    IMAGENET_RGB_STDS,
    MinMaxNormalize,
    PercentileClip,
    Reflectance,
    ResizeSpec,
    Standardize,
    apply_pipeline,
    normalize,
    parse_pipeline,
    percentile,
    resize_bilinear,
)
from rsbench.raster import RasterImage

from conftest import random_image


def bilinear_reference(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct per-pixel evaluation of the half-pixel-center formula."""
    c, in_h, in_w = src.shape
    out = np.zeros((c, out_h, out_w), dtype=np.float64)

    def taps(d, n_in, n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        i0 = math.floor(s)
        frac = s - i0
        clamp = lambda i: min(max(i, 0), n_in - 1)
        return clamp(i0), clamp(i0 + 1), frac

    for ch in range(c):
        for oy in range(out_h):
            y0, y1, fy = taps(oy, in_h, out_h)
            for ox in range(out_w):
                x0, x1, fx = taps(ox, in_w, out_w)
                out[ch, oy, ox] = (
                    src[ch, y0, x0] * (1 - fy) * (1 - fx)
                    + src[ch, y1, x0] * fy * (1 - fx)
                    + src[ch, y0, x1] * (1 - fy) * fx
                    + src[ch, y1, x1] * fy * fx
                )
    return out


class TestResizeBilinear:
    def test_hand_derived_row(self):
        img = RasterImage(data=np.array([[[0.0, 10.0]]], dtype=np.float32))
        out = resize_bilinear(img, ResizeSpec(1, 4))
        np.testing.assert_allclose(out.data[0, 0], [0.0, 2.5, 7.5, 10.0], atol=1e-6)

    def test_identity_at_same_size(self, rng):
        img = random_image(rng, 1, 2, 2)
        out = resize_bilinear(img, ResizeSpec(2, 2))
        np.testing.assert_array_equal(out.data, img.data)

    def test_constant_stays_constant(self, rng):
        img = RasterImage(data=np.full((2, 3, 5), 7.25, dtype=np.float32))
        out = resize_bilinear(img, ResizeSpec(11, 4))
        np.testing.assert_allclose(out.data, 7.25, atol=1e-6)

    def test_matches_reference_on_random_cases(self, rng):
        for _ in range(10):
            c = int(rng.integers(1, 4))
            in_h, in_w = rng.integers(1, 9, size=2)
            out_h, out_w = rng.integers(1, 17, size=2)
            img = random_image(rng, c, int(in_h), int(in_w))
            got = resize_bilinear(img, ResizeSpec(int(out_h), int(out_w)))
            want = bilinear_reference(img.data.astype(np.float64), int(out_h), int(out_w))
            np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-4)

    def test_affine_images_reproduced_at_interior(self, rng):
        # values affine in pixel-center coordinates survive interpolation
        for _ in range(5):
            in_h, in_w = (int(v) for v in rng.integers(2, 12, size=2))
            out_h, out_w = (int(v) for v in rng.integers(2, 30, size=2))
            a, b, c0 = rng.uniform(-3, 3, size=3)
            yy, xx = np.mgrid[0:in_h, 0:in_w]
            img = RasterImage(data=(a * xx + b * yy + c0)[None].astype(np.float32))
            out = resize_bilinear(img, ResizeSpec(out_h, out_w))
            sy = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
            sx = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
            interior_y = (sy >= 0) & (sy <= in_h - 1)
            interior_x = (sx >= 0) & (sx <= in_w - 1)
            expected = a * sx[None, :] + b * sy[:, None] + c0
            got = out.data[0][np.ix_(interior_y, interior_x)]
            want = expected[np.ix_(interior_y, interior_x)]
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_output_bounded_by_input_range(self, rng):
        img = random_image(rng, 2, 5, 6, lo=-40, hi=90)
        out = resize_bilinear(img, ResizeSpec(13, 3))
        for ch in range(2):
            assert out.data[ch].min() >= img.data[ch].min() - 1e-4
            assert out.data[ch].max() <= img.data[ch].max() + 1e-4

    def test_masked_resize_rejected(self):
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        img = RasterImage(data=np.zeros((1, 2, 2), dtype=np.float32),
                          nodata_mask=mask)
        with pytest.raises(MaskedResizeUnsupported):
            resize_bilinear(img, ResizeSpec(4, 4))


class TestNormalize:
    def test_reflectance_paper_value(self):
        img = RasterImage(data=np.full((1, 1, 1), 10000.0, dtype=np.float32))
        out = normalize(img, Reflectance(divisor=10000.0))
        assert out.data[0, 0, 0] == 1.0

    def test_standardize_derived_value(self):
        img = RasterImage(data=np.full((1, 1, 1), 0.5, dtype=np.float32))
        out = normalize(img, Standardize(means=(0.485,), stds=(0.229,)))
        np.testing.assert_allclose(out.data[0, 0, 0], 0.0655021834, atol=1e-7)

    def test_standardize_channel_mismatch(self):
        img = RasterImage(data=np.zeros((4, 2, 2), dtype=np.float32))
        with pytest.raises(ChannelCountMismatch):
            normalize(img, Standardize(means=IMAGENET_RGB_MEANS,
                                       stds=IMAGENET_RGB_STDS))

    def test_standardize_inverts(self, rng):
        img = random_image(rng, 3, 4, 4, lo=0, hi=1)
        spec = Standardize(means=IMAGENET_RGB_MEANS, stds=IMAGENET_RGB_STDS)
        out = normalize(img, spec)
        recovered = (out.data * np.array(spec.stds)[:, None, None]
                     + np.array(spec.means)[:, None, None])
        np.testing.assert_allclose(recovered, img.data, rtol=1e-6, atol=1e-6)

    def test_minmax_per_image_derived(self):
        img = RasterImage(data=np.array([[[100.0, 2050.0, 4000.0]]], dtype=np.float32))
        out = normalize(img, MinMaxNormalize())
        np.testing.assert_allclose(out.data[0, 0], [0.0, 0.5, 1.0], atol=1e-7)

    def test_minmax_constant_channel_is_zero(self):
        img = RasterImage(data=np.full((1, 2, 2), 42.0, dtype=np.float32))
        out = normalize(img, MinMaxNormalize())
        np.testing.assert_array_equal(out.data, 0.0)

    def test_minmax_attains_bounds(self, rng):
        img = random_image(rng, 3, 6, 6, lo=-50, hi=2000)
        out = normalize(img, MinMaxNormalize())
        for ch in range(3):
            assert out.data[ch].min() == 0.0
            assert out.data[ch].max() == 1.0

    def test_minmax_fixed_range_clamps(self):
        img = RasterImage(data=np.array([[[-10.0, 0.0, 128.0, 255.0, 300.0]]],
                                        dtype=np.float32))
        out = normalize(img, MinMaxNormalize(lo=0.0, hi=255.0))
        np.testing.assert_allclose(out.data[0, 0],
                                   [0.0, 0.0, 128 / 255, 1.0, 1.0], atol=1e-7)

    def test_percentile_clip_bounds_and_minmax_equivalence(self, rng):
        img = random_image(rng, 2, 8, 8, lo=0, hi=1000)
        clipped = normalize(img, PercentileClip(lo_pct=0.0, hi_pct=100.0))
        minmax = normalize(img, MinMaxNormalize())
        np.testing.assert_allclose(clipped.data, minmax.data, atol=1e-6)
        mid = normalize(img, PercentileClip(lo_pct=2.0, hi_pct=98.0))
        assert mid.data.min() >= 0.0 and mid.data.max() <= 1.0

    def test_masked_pixels_excluded_and_zeroed(self):
        data = np.array([[[0.0, 50.0], [100.0, 9999.0]]], dtype=np.float32)
        mask = np.array([[False, False], [False, True]])
        img = RasterImage(data=data, nodata_mask=mask)
        out = normalize(img, MinMaxNormalize())
        # stats over {0, 50, 100}; the masked 9999 never participates
        np.testing.assert_allclose(out.data[0], [[0.0, 0.5], [1.0, 0.0]], atol=1e-7)


class TestPercentile:
    def test_derived_midpoint(self):
        assert percentile([1, 2, 3, 4], 50) == 2.5

    def test_extremes(self, rng):
        vals = rng.uniform(-100, 100, size=17)
        assert percentile(vals, 0) == vals.min()
        assert percentile(vals, 100) == vals.max()

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            percentile([], 50)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50),
           st.floats(0, 100))
    @settings(max_examples=100, deadline=None)
    def test_matches_rank_formula(self, values, q):
        # independent oracle: sort and interpolate at rank q/100 * (n-1)
        v = sorted(values)
        r = q / 100 * (len(v) - 1)
        lo = math.floor(r)
        frac = r - lo
        want = v[lo] + frac * (v[min(lo + 1, len(v) - 1)] - v[lo])
        got = percentile(values, q)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


class TestApplyPipeline:
    def test_empty_pipeline_is_identity(self, rng):
        img = random_image(rng, 2, 3, 3)
        out = apply_pipeline(img, [])
        np.testing.assert_array_equal(out.data, img.data)

    def test_reflectance_then_resize(self, rng):
        img = random_image(rng, 13, 8, 8, lo=0, hi=10000)
        out = apply_pipeline(img, [Reflectance(10000), ResizeSpec(16, 16)])
        assert out.data.shape == (13, 16, 16)
        assert out.data.max() <= 1.0 + 1e-6

    def test_resize_idempotent_at_fixed_size(self, rng):
        img = random_image(rng, 1, 5, 5)
        once = apply_pipeline(img, [ResizeSpec(9, 9)])
        twice = apply_pipeline(img, [ResizeSpec(9, 9), ResizeSpec(9, 9)])
        np.testing.assert_array_equal(once.data, twice.data)

    def test_concatenation_associativity(self, rng):
        img = random_image(rng, 3, 6, 6, lo=0, hi=255)
        p1 = [MinMaxNormalize(lo=0, hi=255)]
        p2 = [ResizeSpec(10, 10), Standardize(means=IMAGENET_RGB_MEANS,
                                              stds=IMAGENET_RGB_STDS)]
        left = apply_pipeline(apply_pipeline(img, p1), p2)
        right = apply_pipeline(img, list(p1) + list(p2))
        np.testing.assert_array_equal(left.data, right.data)

    def test_step_errors_carry_index(self):
        img = RasterImage(data=np.zeros((2, 4, 4), dtype=np.float32))
        bad = Standardize(means=(0.0,), stds=(1.0,))  # wrong channel count
        with pytest.raises(PipelineStepError) as exc:
            apply_pipeline(img, [Reflectance(), bad])
        assert exc.value.step_index == 1


class TestParsePipeline:
    def test_records_round_trip(self):
        records = [
            {"op": "reflectance", "divisor": 10000},
            {"op": "minmax", "lo": 0, "hi": 1},
            {"op": "standardize", "preset": "imagenet"},
            {"op": "percentile_clip", "lo": 2, "hi": 98},
            {"op": "resize", "height": 224, "width": 224},
        ]
        steps = parse_pipeline(records)
        assert isinstance(steps[0], Reflectance)
        assert steps[1] == MinMaxNormalize(lo=0.0, hi=1.0)
        assert steps[2].means == IMAGENET_RGB_MEANS
        assert isinstance(steps[3], PercentileClip)
        assert steps[4] == ResizeSpec(224, 224)

    def test_unknown_op_rejected(self):
        from rsbench.errors import ConfigError

        with pytest.raises(ConfigError):
            parse_pipeline([{"op": "sharpen"}])

    def test_unknown_keys_rejected(self):
        from rsbench.errors import ConfigError

        with pytest.raises(ConfigError):
            parse_pipeline([{"op": "resize", "height": 8, "width": 8, "mode": "x"}])
