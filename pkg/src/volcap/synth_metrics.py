"""Synthetic RGBD scenes with controllable sensor noise, and stability metrics.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64). Per frame
the draws are, in order: Gaussian depth noise for every pixel (row-major),
one uniform per pixel for i.i.d. dropout, then one uniform per pixel for
burst starts when bursts are enabled.
"""

from __future__ import annotations

import json
import os
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import NDArray

from .core import CameraModel, ColorFrame, DepthFrame, FramePair, ValidationError
from .projection import unproject_pixel

GEOMETRIES = ("flat", "step", "sphere")


@dataclass(frozen=True)
class BurstDropout:
    """Temporally correlated dropout: a pixel that starts a burst stays invalid ``length`` frames."""

    start_rate: float = 0.0
    length: int = 1


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma_mm: float = 0.0
    dropout_rate: float = 0.0
    burst_dropout: BurstDropout | None = None


@dataclass(frozen=True)
class SceneSpec:
    geometry: str = "flat"
    base_depth_mm: float = 1000.0
    drift_mm_per_frame: float = 0.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    frames: int = 60
    seed: int = 7
    fps: float = 30.0
    step_height_mm: float = 300.0  # "step": right half sits this much farther away
    sphere_radius_mm: float = 250.0  # "sphere": ball resting on the plane, centred on the axis

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValidationError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        if self.frames < 1:
            raise ValidationError("frames must be >= 1")
        if not 0 <= self.noise.dropout_rate <= 1:
            raise ValidationError("dropout_rate must lie in [0, 1]")
        if self.noise.gaussian_sigma_mm < 0:
            raise ValidationError("gaussian_sigma_mm must be non-negative")
        if self.base_depth_mm <= 0 or self.fps <= 0:
            raise ValidationError("base_depth_mm and fps must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> SceneSpec:
        doc = dict(doc)
        noise = dict(doc.pop("noise", {}) or {})
        burst = noise.pop("burst_dropout", None)
        try:
            return cls(noise=NoiseSpec(burst_dropout=BurstDropout(**burst) if burst else None, **noise), **doc)
        except TypeError as e:
            raise ValidationError(f"scene spec: {e}") from None


def load_scene_spec(path: str | os.PathLike) -> SceneSpec:
    with open(path) as f:
        return SceneSpec.from_json(json.load(f))


def standard_scene(frames: int = 60, seed: int = 7) -> SceneSpec:
    """Flat plane at 1 m, 2 mm Gaussian noise, 5% i.i.d. dropout."""
    return SceneSpec("flat", 1000.0, noise=NoiseSpec(2.0, 0.05), frames=frames, seed=seed)


def ideal_depth(spec: SceneSpec, model: CameraModel, frame_index: int = 0) -> NDArray[np.float64]:
    """Noise-free z-depth (mm) per depth pixel; pixel rays ignore lens distortion."""
    w, h = model.depth_size
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    x, y = unproject_pixel(u, v, model.depth_intrinsics)
    base = spec.base_depth_mm + spec.drift_mm_per_frame * frame_index
    z = np.full((h, w), base)
    if spec.geometry == "step":
        z = np.where(x >= 0, base + spec.step_height_mm, base)
    elif spec.geometry == "sphere":
        r = spec.sphere_radius_mm
        c = base - r  # centre on the optical axis, touching the plane
        # ray (x, y, 1) * s hits the sphere |p - (0,0,c)| = r
        a = x * x + y * y + 1.0
        disc = c * c - a * (c * c - r * r)
        s = (c - np.sqrt(np.maximum(disc, 0.0))) / a
        z = np.where(disc > 0, np.minimum(s, base), base)
    return z


def _color_image(model: CameraModel, frame_index: int) -> NDArray[np.uint8]:
    cw, ch = model.color_size
    uu, vv = np.meshgrid(np.arange(cw), np.arange(ch))
    img = np.empty((ch, cw, 3), np.uint8)
    img[..., 0] = (uu * 255 // max(cw - 1, 1)).astype(np.uint8)
    img[..., 1] = (vv * 255 // max(ch - 1, 1)).astype(np.uint8)
    img[..., 2] = np.where(((uu // 32) + (vv // 32) + frame_index) % 2 == 0, 200, 40).astype(np.uint8)
    return img


def generate_scene(spec: SceneSpec, model: CameraModel) -> list[FramePair]:
    rng = np.random.default_rng(spec.seed)
    w, h = model.depth_size
    noise = spec.noise
    burst_left = np.zeros((h, w), np.int64)
    pairs = []
    for t in range(spec.frames):
        ts = int(round(t * 1_000_000 / spec.fps))
        z = ideal_depth(spec, model, t) + noise.gaussian_sigma_mm * rng.standard_normal((h, w))
        depth = np.clip(np.floor(z + 0.5), 1, 2**16 - 1).astype(np.uint16)
        depth[rng.random((h, w)) < noise.dropout_rate] = 0
        if noise.burst_dropout is not None and noise.burst_dropout.start_rate > 0:
            starts = (rng.random((h, w)) < noise.burst_dropout.start_rate) & (burst_left == 0)
            burst_left[starts] = noise.burst_dropout.length
            depth[burst_left > 0] = 0
            burst_left = np.maximum(burst_left - 1, 0)
        pairs.append(FramePair(DepthFrame(t, ts, depth), ColorFrame(t, ts, _color_image(model, t))))
    return pairs


# -- metrics ------------------------------------------------------------------


def _stack(frames: Sequence[DepthFrame] | NDArray) -> NDArray:
    if isinstance(frames, np.ndarray):
        return frames
    return np.stack([f.data for f in frames])


def _need_two(d: NDArray) -> None:
    if d.shape[0] < 2:
        raise ValidationError("metric needs at least 2 frames")


def jitter_metric(frames) -> float:
    """Mean over consecutive frame pairs of the summed |depth change| (m) on pixels valid in both."""
    d = _stack(frames).astype(np.int64)
    _need_two(d)
    a, b = d[:-1], d[1:]
    both = (a > 0) & (b > 0)
    per_pair = np.where(both, np.abs(b - a), 0).sum(axis=(1, 2)) * 1e-3
    return float(per_pair.mean())


def flicker_metric(frames) -> float:
    """Mean number of valid<->invalid toggles per consecutive frame pair."""
    v = _stack(frames) > 0
    _need_two(v)
    return float((v[1:] != v[:-1]).sum(axis=(1, 2)).mean())


def recovered_vertex_ratio(raw, filtered) -> float:
    """Fraction of raw-invalid pixel-frames that are valid after filtering."""
    r = _stack(raw)
    f = _stack(filtered)
    if r.shape != f.shape:
        raise ValidationError(f"raw and filtered streams differ in shape: {r.shape} vs {f.shape}")
    lost = r == 0
    n_lost = int(lost.sum())
    if n_lost == 0:
        return 0.0
    return float((lost & (f > 0)).sum() / n_lost)


def stream_metrics(raw, filtered) -> dict:
    return {
        "jitter_raw_m": jitter_metric(raw),
        "jitter_filtered_m": jitter_metric(filtered),
        "flicker_raw": flicker_metric(raw),
        "flicker_filtered": flicker_metric(filtered),
        "recovered_vertex_ratio": recovered_vertex_ratio(raw, filtered),
    }
