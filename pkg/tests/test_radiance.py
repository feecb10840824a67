import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdrforge.radiance import (
    CalibrationError,
    CrfTable,
    ExposureStack,
    LdrImage,
    RadianceImage,
    ShapeError,
    TonemapParams,
    build_network_input,
    linearize,
    mu_law,
    mu_law_inverse,
    to_hdr_domain,
    tonemap,
    tonemap_inverse,
)


def const_image(value, shape=(4, 5), bias=0.0, time=None):
    return LdrImage(np.full(shape + (3,), value), exposure_bias=bias, exposure_time=time)


# ---------------------------------------------------------------------------
# types and invariants

class TestTypes:
    def test_ldr_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            LdrImage(np.full((2, 2, 3), 1.5))

    def test_ldr_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            LdrImage(np.zeros((2, 2)))

    def test_exposure_time_defaults_to_two_power_bias(self):
        assert const_image(0.5, bias=2.0).exposure_time == 4.0
        assert const_image(0.5, bias=-1.0).exposure_time == 0.5

    def test_exposure_time_must_be_positive(self):
        with pytest.raises(ValueError, match="exposure_time"):
            const_image(0.5, time=0.0)

    def test_stack_requires_ascending_bias(self):
        frames = (const_image(0.1, bias=0.0), const_image(0.2, bias=-2.0))
        with pytest.raises(ValueError, match="ascending"):
            ExposureStack(frames, 0)

    def test_stack_allows_bias_ties(self):
        frames = (const_image(0.1, bias=0.0), const_image(0.2, bias=0.0))
        assert len(ExposureStack(frames, 0)) == 2

    def test_stack_requires_equal_sizes(self):
        frames = (const_image(0.1, shape=(4, 5)), const_image(0.2, shape=(4, 6)))
        with pytest.raises(ShapeError):
            ExposureStack(frames, 0)

    def test_stack_reference_range(self):
        with pytest.raises(ValueError, match="reference_index"):
            ExposureStack((const_image(0.1),), 1)

    def test_relative_times_normalize_reference_to_one(self):
        stack = ExposureStack(
            (const_image(0.1, bias=-2.0), const_image(0.2, bias=0.0), const_image(0.3, bias=2.0)), 1)
        assert stack.relative_times() == (0.25, 1.0, 4.0)

    def test_tonemap_params_validation(self):
        with pytest.raises(ValueError):
            TonemapParams(0.0)

    def test_crf_table_rejects_non_monotone(self):
        bad = np.linspace(0, 1, 16)[:, None].repeat(3, axis=1)
        bad[5] = 0.9
        with pytest.raises(CalibrationError, match="non-decreasing"):
            CrfTable(bad)

    def test_crf_table_rejects_bad_endpoints(self):
        bad = np.linspace(0.1, 1, 16)[:, None].repeat(3, axis=1)
        with pytest.raises(CalibrationError, match="endpoints"):
            CrfTable(bad)


# ---------------------------------------------------------------------------
# linearize

class TestLinearize:
    def test_identity_table_is_identity(self):
        grid = np.linspace(0, 1, 257)
        crf = CrfTable(np.stack([grid] * 3, axis=1))
        img = LdrImage(np.random.default_rng(0).random((6, 7, 3)))
        out = linearize(img, crf)
        np.testing.assert_allclose(out.pixels, img.pixels, atol=1e-12)

    def test_absent_crf_passes_through(self):
        img = const_image(0.3)
        assert linearize(img, None) is img
        assert linearize(img).pixels[0, 0, 0] == 0.3

    def test_square_table_matches_closed_form(self):
        # s -> s**2 sampled on 257 points; 0.5 sits exactly on the grid
        grid = np.linspace(0, 1, 257)
        crf = CrfTable(np.stack([grid ** 2] * 3, axis=1))
        out = linearize(const_image(0.5), crf)
        assert out.pixels[0, 0, 0] == pytest.approx(0.25, abs=1e-12)
        # off-grid points: piecewise-linear interpolation of s**2 is within h**2/4
        img = LdrImage(np.random.default_rng(1).random((8, 9, 3)))
        out = linearize(img, crf)
        np.testing.assert_allclose(out.pixels, img.pixels ** 2, atol=(1 / 256) ** 2 / 4 + 1e-12)

    def test_metadata_preserved(self):
        grid = np.linspace(0, 1, 257)
        crf = CrfTable(np.stack([grid] * 3, axis=1))
        out = linearize(const_image(0.5, bias=2.0), crf)
        assert out.exposure_bias == 2.0 and out.exposure_time == 4.0


# ---------------------------------------------------------------------------
# gamma-domain exposure encoding

class TestToHdrDomain:
    def test_zero_maps_to_zero(self):
        assert to_hdr_domain(const_image(0.0), 2.2).pixels.max() == 0.0

    def test_one_at_unit_time_maps_to_one(self):
        assert to_hdr_domain(const_image(1.0, time=1.0), 2.2).pixels.min() == 1.0

    def test_half_at_gamma_22(self):
        expected = math.exp(2.2 * math.log(0.5))  # 0.5**2.2 = 0.21763764082403103
        out = to_hdr_domain(const_image(0.5, time=1.0), 2.2)
        assert out.pixels[0, 0, 0] == pytest.approx(expected, abs=1e-9)

    def test_exposure_ratio_two_stops(self):
        out = to_hdr_domain(const_image(1.0, bias=2.0), 2.2)  # t = 4
        assert out.pixels[0, 0, 0] == pytest.approx(0.25, abs=1e-12)

    def test_short_exposure_clamps_to_one(self):
        out = to_hdr_domain(const_image(1.0, bias=-2.0), 2.2)  # I**g / 0.25 = 4
        assert out.pixels.max() == 1.0

    def test_explicit_time_overrides_frame_time(self):
        out = to_hdr_domain(const_image(1.0, bias=0.0), 2.2, exposure_time=2.0)
        assert out.pixels[0, 0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_gamma_must_exceed_one(self):
        with pytest.raises(ValueError, match="gamma"):
            to_hdr_domain(const_image(0.5), 1.0)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1.01, 4), st.floats(0.1, 10))
    def test_monotone_in_intensity(self, a, b, gamma, t):
        lo, hi = sorted((a, b))
        out = to_hdr_domain(const_image_pair(lo, hi), gamma, exposure_time=t).pixels
        assert out[0, 0, 0] <= out[0, 1, 0]


def const_image_pair(a, b):
    px = np.zeros((1, 2, 3))
    px[0, 0], px[0, 1] = a, b
    return LdrImage(px)


# ---------------------------------------------------------------------------
# mu-law tonemapping

class TestTonemap:
    def test_endpoints_exact(self):
        px = np.zeros((1, 2, 3))
        px[0, 1] = 1.0
        out = tonemap(RadianceImage(px))
        assert out.pixels[0, 0, 0] == 0.0
        assert out.pixels[0, 1, 0] == 1.0

    def test_spot_values_mu_5000(self):
        # ln(51)/ln(5001) = 0.46162278..., ln(2501)/ln(5001) = 0.91864193...
        assert mu_law(0.01, 5000.0) == pytest.approx(math.log(51) / math.log(5001), abs=1e-12)
        assert mu_law(0.5, 5000.0) == pytest.approx(math.log(2501) / math.log(5001), abs=1e-12)

    def test_strictly_monotone_on_grid(self):
        grid = np.linspace(0.0, 1.0, 1000)
        mapped = mu_law(grid)
        assert np.all(np.diff(mapped) > 0)

    def test_output_in_unit_interval(self):
        vals = mu_law(np.linspace(0, 1, 101))
        assert vals.min() >= 0.0 and vals.max() <= 1.0

    def test_inverse_endpoints(self):
        assert mu_law_inverse(0.0) == 0.0
        assert mu_law_inverse(1.0) == pytest.approx(1.0, abs=1e-12)

    def test_round_trip_named_points(self):
        for x in (0.1, 0.37, 0.99):
            assert mu_law_inverse(mu_law(x)) == pytest.approx(x, abs=1e-9)

    def test_inverse_spot_value(self):
        assert mu_law_inverse(math.log(51) / math.log(5001)) == pytest.approx(0.01, abs=1e-9)

    @given(st.floats(0, 1), st.floats(1, 1e6))
    def test_round_trip_property(self, x, mu):
        assert mu_law_inverse(mu_law(x, mu), mu) == pytest.approx(x, abs=1e-9)

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=8))
    def test_monotone_property(self, xs):
        xs = sorted(xs)
        ys = mu_law(np.array(xs))
        assert np.all(np.diff(ys) >= 0)

    def test_image_round_trip(self):
        img = RadianceImage(np.random.default_rng(2).random((5, 6, 3)))
        back = tonemap_inverse(tonemap(img))
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-9)


# ---------------------------------------------------------------------------
# network input assembly

class TestBuildNetworkInput:
    def make_stack(self, k=3, h=8, w=9):
        rng = np.random.default_rng(3)
        biases = np.linspace(-2, 2, k)
        frames = tuple(LdrImage(rng.random((h, w, 3)), exposure_bias=b) for b in biases)
        return ExposureStack(frames, k // 2)

    def test_shape_three_frames_256(self):
        stack = self.make_stack(3, 256, 256)
        out = build_network_input(stack)
        assert out.planes.shape == (3, 256, 256, 6)
        assert out.planes.dtype == np.float32
        assert out.reference_index == 1

    def test_two_frame_stack(self):
        out = build_network_input(self.make_stack(2, 16, 16))
        assert out.planes.shape == (2, 16, 16, 6)

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            build_network_input(ExposureStack((const_image(0.5),), 0))

    def test_ldr_channels_are_the_frames(self):
        stack = self.make_stack()
        out = build_network_input(stack)
        for i, frame in enumerate(stack.frames):
            np.testing.assert_array_equal(out.planes[i, :, :, :3],
                                          frame.pixels.astype(np.float32))

    def test_hdr_channels_match_independent_recomputation(self, rng):
        gamma = 2.2
        stack = self.make_stack()
        out = build_network_input(stack, gamma)
        times = stack.relative_times()
        for i, frame in enumerate(stack.frames):
            expected = np.clip(np.power(frame.pixels, gamma) / times[i], 0.0, 1.0)
            np.testing.assert_allclose(out.planes[i, :, :, 3:], expected, atol=1e-7)

    def test_reference_hdr_plane_is_unit_time(self):
        stack = self.make_stack()
        out = build_network_input(stack, 2.2)
        ref = stack.reference
        expected = to_hdr_domain(ref, 2.2, exposure_time=1.0)
        np.testing.assert_allclose(out.planes[stack.reference_index, :, :, 3:],
                                   expected.pixels, atol=1e-7)
