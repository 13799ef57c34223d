import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bilinear_scalar, distort_scalar

from volcap.core import (
    CameraIntrinsics,
    CameraModel,
    ColorFrame,
    DepthFrame,
    DistortionModel,
    RigidTransform,
)
from volcap.projection import (
    INVALID,
    DistortionSingularityError,
    GridPoint,
    distort_point,
    grid_vertex_world,
    lookup_color,
    lookup_depth,
    project_to_pixel,
    projector_for,
    sample_bilinear,
    unproject_pixel,
)

ZERO = DistortionModel()
finite = st.floats(-0.6, 0.6, allow_nan=False, allow_subnormal=False)
ray_coord = finite.filter(lambda v: v == 0 or abs(v) > 1e-290)


def lens_camera():
    """Distorted lenses and a small rotation/offset between the sensors."""
    a = 0.02
    R = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    return CameraModel(
        depth_intrinsics=CameraIntrinsics(252.0, 252.0, 160.3, 143.8),
        color_intrinsics=CameraIntrinsics(330.0, 331.0, 319.2, 179.7),
        depth_distortion=DistortionModel(0.11, -0.05, 0.003, 0.02, 0.001, -0.0005, 0.0007, -0.0004),
        color_distortion=DistortionModel(0.07, -0.02, 0.001, 0.0, 0.0, 0.0, -0.0003, 0.0005),
        color_extrinsics=RigidTransform(R, np.array([-0.032, 0.002, 0.004])),
        depth_size=(320, 288),
        color_size=(640, 360),
    )


class TestDistortion:
    def test_zero_is_identity(self):
        assert distort_point(0.2, -0.1, ZERO) == (0.2, -0.1)

    def test_origin_fixed(self):
        m = DistortionModel(0.3, 0.2, 0.1, 0.05, 0.02, 0.01, 0.004, -0.003)
        assert distort_point(0.0, 0.0, m) == (0.0, 0.0)

    def test_k1_hand_value(self):
        x, y = distort_point(0.1, 0.1, DistortionModel(k1=0.1))
        assert x == pytest.approx(0.1002, abs=1e-15)
        assert y == pytest.approx(0.1002, abs=1e-15)

    def test_tangential_terms_match_scalar_reference(self):
        m = DistortionModel(p1=0.01, p2=-0.02)
        got = distort_point(0.3, -0.2, m)
        want = distort_scalar(0.3, -0.2, vars(m))
        assert got == pytest.approx(want, abs=1e-15)

    def test_singular_denominator(self):
        m = DistortionModel(k4=-1.0)  # 1 + k4 r^2 = 0 at r = 1
        with pytest.raises(DistortionSingularityError):
            distort_point(1.0, 0.0, m)

    @settings(max_examples=200, deadline=None)
    @given(finite, finite)
    def test_vectorised_equals_scalar(self, x, y):
        m = DistortionModel(0.12, -0.04, 0.002, 0.01, -0.002, 0.0004, 0.001, -0.002)
        xd, yd = distort_point(np.array([x]), np.array([y]), m)
        rx, ry = distort_scalar(x, y, vars(m))
        assert abs(xd[0] - rx) <= 1e-12 and abs(yd[0] - ry) <= 1e-12


class TestPinhole:
    def test_principal_point(self):
        assert project_to_pixel(0, 0, CameraIntrinsics(500, 500, 160, 144)) == (160, 144)

    def test_unit_offset(self):
        assert project_to_pixel(1, 0, CameraIntrinsics(500, 500, 160, 144)) == (660, 144)

    def test_scalar_evaluation(self):
        u, v = project_to_pixel(0.2, -0.1, CameraIntrinsics(505.5, 505.5, 161.2, 145.1))
        assert u == pytest.approx(262.3, abs=1e-12)
        assert v == pytest.approx(94.55, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(finite, finite)
    def test_round_trip(self, x, y):
        intr = CameraIntrinsics(505.5, 504.25, 161.2, 145.1)
        u, v = project_to_pixel(x, y, intr)
        xb, yb = unproject_pixel(u, v, intr)
        assert abs(xb - x) <= 1e-12 and abs(yb - y) <= 1e-12


class TestGridVertex:
    def test_examples(self):
        np.testing.assert_allclose(grid_vertex_world(0.0, 0.0, 1000), [0, 0, 1.0])
        np.testing.assert_allclose(grid_vertex_world(0.5, -0.5, 2000), [1.0, -1.0, 2.0])
        np.testing.assert_allclose(grid_vertex_world(0.25, 0.1, 1234), [0.3085, 0.1234, 1.234], atol=1e-15)

    # products must stay clear of the subnormal range for doubling to be exact
    @given(ray_coord, ray_coord, st.integers(1, 2**16 - 1))
    def test_linear_in_depth(self, X, Y, d):
        if 2 * d >= 2**16:
            d //= 2
        # scaling by two is exact in binary floating point
        np.testing.assert_array_equal(grid_vertex_world(X, Y, 2 * d), 2 * grid_vertex_world(X, Y, d))

    def test_grid_orientation(self):
        P = GridPoint(0, 0)
        assert (P.X, P.Y, P.Z) == (-0.5, 0.5, 1.0)
        Q = GridPoint(287, 319)
        assert (Q.X, Q.Y) == (0.5, -0.5)
        with pytest.raises(IndexError):
            GridPoint(288, 0)


class TestDepthLookup:
    def test_centre_of_flat_frame(self):
        m = CameraModel(CameraIntrinsics(300, 300, 159.5, 143.5), CameraIntrinsics(300, 300, 159.5, 143.5))
        frame = DepthFrame(0, 0, np.full((288, 320), 1000, np.uint16))
        assert lookup_depth(GridPoint(143, 160), frame, m) == 1000

    def test_out_of_image_is_invalid(self):
        m = CameraModel(CameraIntrinsics(900, 900, 159.5, 143.5), CameraIntrinsics(300, 300, 0, 0))
        frame = DepthFrame(0, 0, np.full((288, 320), 1000, np.uint16))
        assert lookup_depth(GridPoint(0, 0), frame, m) == INVALID

    def test_boundary_rounds_down(self):
        # u lands exactly on width - 0.5 at the right-most column
        m = CameraModel(CameraIntrinsics(320, 288, 159.5, 143.5), CameraIntrinsics(1, 1, 0, 0))
        data = np.zeros((288, 320), np.uint16)
        data[:, 319] = 777
        assert lookup_depth(GridPoint(100, 319), DepthFrame(0, 0, data), m) == 777

    def test_standard_camera_hits_pixel_centres(self, camera):
        data = np.arange(288 * 320, dtype=np.uint32).reshape(288, 320) % 60000 + 1
        frame = DepthFrame(0, 0, data.astype(np.uint16))
        for i, j in [(0, 0), (287, 319), (10, 200), (143, 160)]:
            assert lookup_depth(GridPoint(i, j), frame, camera) == frame.data[287 - i, j]

    def test_projector_matches_scalar_lookup_with_distortion(self):
        m = lens_camera()
        rng = np.random.default_rng(3)
        frame = DepthFrame(0, 0, rng.integers(1, 5000, (288, 320), dtype=np.uint16))
        table = projector_for(m, 288, 320).depth_lookup(frame).reshape(288, 320)
        for i, j in list(zip(rng.integers(0, 288, 300), rng.integers(0, 320, 300))) + [(0, 0), (287, 319)]:
            assert table[i, j] == lookup_depth(GridPoint(int(i), int(j)), frame, m)


class TestColorLookup:
    def test_uniform_green(self, camera):
        img = np.zeros((360, 640, 3), np.uint8)
        img[..., 1] = 255
        rgb, inside = lookup_color(GridPoint(50, 70), 1000, ColorFrame(0, 0, img), camera)
        assert rgb == (0, 255, 0) and inside

    def test_pixel_centre_of_checkerboard(self):
        img = np.zeros((9, 9, 3), np.uint8)
        img[(np.add.outer(np.arange(9), np.arange(9)) % 2) == 1] = 255
        m = CameraModel(CameraIntrinsics(8, 8, 4, 4), CameraIntrinsics(8, 8, 4, 4), color_size=(9, 9))
        # X = 3/8 - 0.5 maps to u = 3; Y = 0.5 - 5/8 maps to v = 3
        rgb, _ = lookup_color(GridPoint(5, 3, height=9, width=9), 1000, ColorFrame(0, 0, img), m)
        assert rgb == (0, 0, 0)  # (3 + 3) is even
        rgb, _ = lookup_color(GridPoint(5, 4, height=9, width=9), 1000, ColorFrame(0, 0, img), m)
        assert rgb == (255, 255, 255)

    def test_half_pixel_is_mean_of_four(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (40, 30, 3)).astype(np.uint8)
        vals, inside = sample_bilinear(img, np.array(10.5), np.array(20.5))
        want = img[20:22, 10:12].reshape(4, 3).astype(float).mean(axis=0)
        np.testing.assert_allclose(vals, want, atol=1e-12)
        assert inside

    def test_outside_clamps_and_flags(self):
        img = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        vals, inside = sample_bilinear(img, np.array([-4.0, 1.0]), np.array([0.0, 9.0]))
        np.testing.assert_array_equal(vals[0], img[0, 0])
        np.testing.assert_array_equal(vals[1], img[1, 1])
        assert not inside.any()

    def test_non_finite_coordinates_flagged(self):
        img = np.zeros((4, 4, 3), np.uint8)
        _, inside = sample_bilinear(img, np.array([np.nan]), np.array([1.0]))
        assert not inside[0]

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-3, 33, allow_nan=False), st.floats(-3, 43, allow_nan=False))
    def test_bilinear_matches_scalar(self, u, v):
        img = np.random.default_rng(1).integers(0, 256, (40, 30, 3)).astype(np.uint8)
        vals, _ = sample_bilinear(img, np.array(u), np.array(v))
        np.testing.assert_allclose(vals, bilinear_scalar(img, u, v), atol=1e-9)

    def test_projector_matches_scalar_lookup(self):
        m = lens_camera()
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (360, 640, 3)).astype(np.uint8)
        depth = rng.integers(400, 3000, (288, 320)).astype(np.uint16)
        proj = projector_for(m, 288, 320)
        colors, inside = proj.color_lookup(ColorFrame(0, 0, img), depth)
        for i, j in zip(rng.integers(0, 288, 300), rng.integers(0, 320, 300)):
            rgb, ok = lookup_color(GridPoint(int(i), int(j)), int(depth[i, j]), ColorFrame(0, 0, img), m)
            # float32 table path vs float64 scalar path: at most one RGB8 level apart
            assert np.abs(np.array(rgb) - colors[i, j].astype(int)).max() <= 1
            assert ok == inside[i, j]

    def test_depth_independent_plan_matches_scalar_lookup(self):
        m = replace(lens_camera(), color_extrinsics=RigidTransform(lens_camera().color_extrinsics.R, np.zeros(3)))
        proj = projector_for(m, 288, 320)
        assert proj.color_plan is not None and projector_for(lens_camera(), 288, 320).color_plan is None
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, (360, 640, 3)).astype(np.uint8)
        depth = rng.integers(0, 3000, (288, 320)).astype(np.uint16)
        colors, inside = proj.color_lookup(ColorFrame(0, 0, img), depth)
        for i, j in zip(rng.integers(0, 288, 300), rng.integers(0, 320, 300)):
            rgb, ok = lookup_color(GridPoint(int(i), int(j)), int(depth[i, j]), ColorFrame(0, 0, img), m)
            assert ok == inside[i, j]
            if depth[i, j] > 0:
                assert np.abs(np.array(rgb) - colors[i, j].astype(int)).max() <= 1
