"""Grid-ray camera math: lens distortion, pinhole projection, depth/color lookup.

Every function accepts scalars or broadcastable numpy arrays. The grid lattice
is ``height x width`` with ``X = j/(width-1) - 0.5`` and ``Y = 0.5 - i/(height-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import CameraIntrinsics, CameraModel, ColorFrame, DepthFrame, DistortionModel, VolcapError

SINGULAR_TOL = 1e-12
INVALID = 0


class DistortionSingularityError(VolcapError, ArithmeticError):
    pass


@dataclass(frozen=True)
class GridPoint:
    i: int  # row
    j: int  # column
    height: int = 288
    width: int = 320

    def __post_init__(self):
        if not (0 <= self.i < self.height and 0 <= self.j < self.width):
            raise IndexError(f"grid index ({self.i}, {self.j}) outside {self.height}x{self.width}")

    @property
    def X(self) -> float:
        return self.j / (self.width - 1) - 0.5

    @property
    def Y(self) -> float:
        return 0.5 - self.i / (self.height - 1)

    @property
    def Z(self) -> float:
        return 1.0


def grid_coordinates(height: int, width: int) -> tuple[NDArray, NDArray]:
    """Return ``(X, Y)`` arrays of shape ``(height, width)``."""
    j = np.arange(width, dtype=float)
    i = np.arange(height, dtype=float)
    X = j / (width - 1) - 0.5
    Y = 0.5 - i / (height - 1)
    return np.broadcast_to(X, (height, width)), np.broadcast_to(Y[:, None], (height, width))


def distort_point(x, y, model: DistortionModel):
    """Apply rational radial + tangential distortion to normalized coordinates."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = x * x + y * y
    r4 = r2 * r2
    r6 = r4 * r2
    den = 1.0 + model.k4 * r2 + model.k5 * r4 + model.k6 * r6
    if np.any(np.abs(den) < SINGULAR_TOL):
        raise DistortionSingularityError("radial distortion denominator vanishes")
    radial = (1.0 + model.k1 * r2 + model.k2 * r4 + model.k3 * r6) / den
    xy = x * y
    xd = x * radial + 2.0 * model.p1 * xy + model.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + model.p1 * (r2 + 2.0 * y * y) + 2.0 * model.p2 * xy
    if xd.ndim == 0:
        return float(xd), float(yd)
    return xd, yd


def project_to_pixel(x, y, intr: CameraIntrinsics):
    u = intr.fx * np.asarray(x, dtype=float) + intr.cx
    v = intr.fy * np.asarray(y, dtype=float) + intr.cy
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def unproject_pixel(u, v, intr: CameraIntrinsics):
    """Inverse of :func:`project_to_pixel` (no distortion involved)."""
    return (np.asarray(u, dtype=float) - intr.cx) / intr.fx, (np.asarray(v, dtype=float) - intr.cy) / intr.fy


def _nearest_index(u, size: int):
    """Nearest pixel index and in-range mask; ``size - 0.5`` rounds down."""
    u = np.asarray(u, dtype=float)
    idx = np.floor(u + 0.5)
    idx = np.where(u == size - 0.5, size - 1, idx)
    ok = (u >= -0.5) & (u <= size - 0.5) & np.isfinite(u)
    return np.where(ok, idx, 0).astype(np.int64), ok


def depth_pixel(X, Y, model: CameraModel):
    """Integer depth pixel ``(row, col)`` for grid rays plus an in-image mask."""
    xd, yd = distort_point(X, Y, model.depth_distortion)
    u, v = project_to_pixel(xd, yd, model.depth_intrinsics)
    w, h = model.depth_size
    col, ok_u = _nearest_index(u, w)
    row, ok_v = _nearest_index(v, h)
    return row, col, ok_u & ok_v


def lookup_depth(P: GridPoint, depth: DepthFrame, model: CameraModel) -> int:
    """Depth in millimetres seen along the grid ray, or ``INVALID`` (0)."""
    row, col, ok = depth_pixel(P.X, P.Y, model)
    if not ok or row >= depth.height or col >= depth.width:
        return INVALID
    return int(depth.data[row, col])


def grid_vertex_world(X, Y, d):
    """Vertex position in metres: ``(X, Y, 1) * d * 1e-3``."""
    s = np.asarray(d, dtype=float) * 1e-3
    return np.stack(np.broadcast_arrays(np.asarray(X) * s, np.asarray(Y) * s, s), axis=-1)


def color_pixel(X, Y, d, model: CameraModel):
    """Continuous color-image coordinates ``(u, v)`` and a projectable mask.

    The grid ray is distorted with the color lens model, scaled to the metric
    depth, moved into the color camera frame and projected.
    """
    xd, yd = distort_point(X, Y, model.color_distortion)
    P = grid_vertex_world(xd, yd, d)
    Pc = P @ model.color_extrinsics.R.T + model.color_extrinsics.t
    z = Pc[..., 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u, v = project_to_pixel(Pc[..., 0] / zs, Pc[..., 1] / zs, model.color_intrinsics)
    return np.asarray(u), np.asarray(v), np.asarray(front)


@dataclass(frozen=True, eq=False)
class BilinearPlan:
    """Corner pixel indices and weights for sampling fixed ``(u, v)`` positions."""

    height: int
    width: int
    index: NDArray[np.intp]  # (4, n) flat pixel index of corners 00, 01, 10, 11
    weight: NDArray  # (4, n)
    inside: NDArray[np.bool_]

    @classmethod
    def build(cls, height: int, width: int, u, v) -> BilinearPlan:
        h, w = height, width
        dtype = np.result_type(np.asarray(u).dtype, np.float32)
        u = np.asarray(u, dtype=dtype)
        v = np.asarray(v, dtype=dtype)
        finite = np.isfinite(u) & np.isfinite(v)
        inside = finite & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        uc = np.clip(np.where(finite, u, 0), 0, w - 1)
        vc = np.clip(np.where(finite, v, 0), 0, h - 1)
        u0 = np.minimum(np.floor(uc), max(w - 2, 0))
        v0 = np.minimum(np.floor(vc), max(h - 2, 0))
        fu = uc - u0
        fv = vc - v0
        w11 = fu * fv
        w01 = fu - w11  # fu * (1 - fv)
        w10 = fv - w11  # (1 - fu) * fv
        w00 = 1 - fu - w10
        du = 1 if w > 1 else 0
        dv = w if h > 1 else 0
        i00 = v0.astype(np.intp) * w + u0.astype(np.intp)
        index = np.stack([i00, i00 + du, i00 + dv, i00 + dv + du])
        return cls(h, w, index, np.stack([w00, w01, w10, w11]), inside)

    def sample(self, image: NDArray) -> NDArray:
        h, w, nc = image.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"plan is for {self.width}x{self.height} images, got {w}x{h}")
        planar = np.ascontiguousarray(np.moveaxis(image, -1, 0)).reshape(nc, -1)
        vals = planar.take(self.index[0], axis=1) * self.weight[0]
        for k in (1, 2, 3):
            vals += planar.take(self.index[k], axis=1) * self.weight[k]
        return np.moveaxis(vals, 0, -1)


def sample_bilinear(image: NDArray, u, v):
    """Bilinear sample of an ``(h, w, c)`` image at pixel-centre coordinates.

    Returns ``(values, inside)``; samples outside the image clamp to the edge
    and non-finite coordinates sample the origin. Computes in float32 when
    ``u`` is float32, otherwise float64.
    """
    h, w, _ = image.shape
    plan = BilinearPlan.build(h, w, u, v)
    return plan.sample(image), plan.inside


def to_rgb8(values):
    values = np.asarray(values)
    return np.clip(np.floor(values + values.dtype.type(0.5)), 0, 255).astype(np.uint8)


def lookup_color(P: GridPoint, d: int, color: ColorFrame, model: CameraModel):
    """RGB8 color for grid point ``P`` at depth ``d`` mm.

    Returns ``(rgb, in_image)``; ``in_image`` is False when the point projected
    outside the color image (or behind the camera) and the sample was clamped.
    """
    u, v, front = color_pixel(P.X, P.Y, d, model)
    vals, inside = sample_bilinear(color.data, u, v)
    return tuple(int(c) for c in to_rgb8(vals)), bool(inside & front)


@dataclass(frozen=True, eq=False)
class GridProjector:
    """Precomputed per-grid-point lookup tables for one camera model.

    The grid is static, so depth pixel indices and the color-lens distorted
    ray directions (rotated into the color frame) are computed once.
    """

    model: CameraModel
    height: int
    width: int
    X: NDArray
    Y: NDArray
    depth_row: NDArray
    depth_col: NDArray
    depth_ok: NDArray
    ray_x: NDArray
    ray_y: NDArray
    ray_z: NDArray
    # with no translation between the sensors the color pixel of a ray does not depend on depth
    color_plan: BilinearPlan | None = None

    @classmethod
    def build(cls, model: CameraModel, height: int, width: int) -> GridProjector:
        X, Y = grid_coordinates(height, width)
        row, col, ok = depth_pixel(X, Y, model)
        xd, yd = distort_point(X, Y, model.color_distortion)
        R = model.color_extrinsics.R
        # color-frame direction of the distorted unit-depth ray, scaled by depth later
        rays = [(R[k, 0] * xd + R[k, 1] * yd + R[k, 2]).astype(np.float32) for k in range(3)]
        arrays = [np.ascontiguousarray(a) for a in (X, Y, row, col, ok, *rays)]
        for a in arrays:
            a.setflags(write=False)
        proj = cls(model, height, width, *arrays)
        if not model.color_extrinsics.t.any():
            u, v, _ = proj._color_uv(np.float32(1))
            cw, ch = model.color_size
            object.__setattr__(proj, "color_plan", BilinearPlan.build(ch, cw, u, v))
        return proj

    def depth_lookup(self, depth: DepthFrame) -> NDArray[np.uint16]:
        dh, dw = depth.data.shape
        ok = self.depth_ok & (self.depth_row < dh) & (self.depth_col < dw)
        vals = depth.data.reshape(-1).take(np.where(ok, self.depth_row * dw + self.depth_col, 0))
        vals[~ok] = INVALID
        return vals

    def _color_uv(self, s):
        t = self.model.color_extrinsics.t.astype(np.float32)
        xc = self.ray_x * s + t[0]
        yc = self.ray_y * s + t[1]
        zc = self.ray_z * s + t[2]
        front = zc > 0
        zs = np.where(front, zc, np.float32(1))
        intr = self.model.color_intrinsics
        u = xc / zs * np.float32(intr.fx) + np.float32(intr.cx)
        v = yc / zs * np.float32(intr.fy) + np.float32(intr.cy)
        return u, v, front

    def color_lookup(self, color: ColorFrame, d):
        """Vectorised :func:`lookup_color` for depth map ``d`` (mm) over the grid.

        Runs in float32; agrees with the scalar path to within one RGB8 level.
        The color of a point that is not in front of the color camera is
        unspecified (a clamped sample) and flagged by the returned mask.
        """
        s = np.asarray(d, dtype=np.float32) * np.float32(1e-3)
        plan = self.color_plan
        if plan is not None and color.data.shape[:2] == (plan.height, plan.width):
            front = (self.ray_z > 0) & (s > 0)
            return to_rgb8(plan.sample(color.data)), plan.inside & front
        u, v, front = self._color_uv(s)
        vals, inside = sample_bilinear(color.data, u, v)
        return to_rgb8(vals), inside & front


_PROJECTORS: dict[tuple, GridProjector] = {}
_MAX_PROJECTORS = 8


def projector_for(model: CameraModel, height: int, width: int) -> GridProjector:
    key = (model.cache_key(), height, width)
    proj = _PROJECTORS.get(key)
    if proj is None:
        if len(_PROJECTORS) >= _MAX_PROJECTORS:
            _PROJECTORS.pop(next(iter(_PROJECTORS)))
        proj = _PROJECTORS[key] = GridProjector.build(model, height, width)
    return proj
