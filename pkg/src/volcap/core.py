"""Shared frame types, the ``.vmsh`` frame-stream container and camera-model config."""

from __future__ import annotations

import csv
import json
import os
import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

DEPTH_SIZE = (320, 288)  # (width, height), NFOV 2x2 binned
COLOR_SIZE = (1920, 1080)

MAGIC = b"VMSH"
VERSION = 1
RECORD_DEPTH = 0
RECORD_COLOR = 1
_HEADER = struct.Struct("<4sH")
_RECORD = struct.Struct("<BIQHH")

ORTHO_TOL = 1e-9


class VolcapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(VolcapError, ValueError):
    pass


class StreamError(VolcapError, ValueError):
    pass


class FormatError(StreamError):
    pass


class TruncationError(StreamError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class PairingError(StreamError):
    def __init__(self, message: str, frame_number: int):
        super().__init__(message)
        self.frame_number = frame_number


class OrderingError(StreamError):
    pass


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """One depth image: row-major ``(height, width)`` uint16 millimetres, 0 = invalid."""

    frame_number: int
    timestamp_us: int
    data: NDArray[np.uint16]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"depth data must be 2-D (height, width), got shape {data.shape}")
        if data.dtype != np.uint16:
            if data.size and (data.min() < 0 or data.max() >= 2**16):
                raise ValidationError("depth values must lie in [0, 2^16)")
            data = data.astype(np.uint16)
        if not 0 <= self.frame_number < 2**32:
            raise ValidationError(f"frame_number {self.frame_number} outside u32 range")
        if self.timestamp_us < 0:
            raise ValidationError("timestamp_us must be non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def replace_data(self, data: NDArray) -> DepthFrame:
        return DepthFrame(self.frame_number, self.timestamp_us, data)

    def __eq__(self, other):
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return (
            self.frame_number == other.frame_number
            and self.timestamp_us == other.timestamp_us
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class ColorFrame:
    """One RGB8 image stored as ``(height, width, 3)`` uint8."""

    frame_number: int
    timestamp_us: int
    data: NDArray[np.uint8]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValidationError(f"color data must be (height, width, 3), got shape {data.shape}")
        if data.dtype != np.uint8:
            data = data.astype(np.uint8)
        if not 0 <= self.frame_number < 2**32:
            raise ValidationError(f"frame_number {self.frame_number} outside u32 range")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ColorFrame):
            return NotImplemented
        return (
            self.frame_number == other.frame_number
            and self.timestamp_us == other.timestamp_us
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class FramePair:
    depth: DepthFrame
    color: ColorFrame

    def __post_init__(self):
        if self.depth.frame_number != self.color.frame_number:
            raise PairingError(
                f"depth frame {self.depth.frame_number} paired with color frame "
                f"{self.color.frame_number}",
                self.depth.frame_number,
            )

    @property
    def frame_number(self) -> int:
        return self.depth.frame_number

    @property
    def timestamp_us(self) -> int:
        return self.depth.timestamp_us


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float  # focal length, pixels
    fy: float
    cx: float  # principal point, pixels
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")


@dataclass(frozen=True)
class DistortionModel:
    """Rational radial (k1..k6) plus tangential (p1, p2) lens distortion."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    k5: float = 0.0
    k6: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    @property
    def is_zero(self) -> bool:
        return not any((self.k1, self.k2, self.k3, self.k4, self.k5, self.k6, self.p1, self.p2))


def check_rotation(R: NDArray, name: str = "R", tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValidationError(f"{name}: expected 3x3 matrix, got shape {R.shape}")
    dev = np.abs(R.T @ R - np.eye(3)).max()
    if dev > tol:
        raise ValidationError(f"{name}: R^T R = I violated (max deviation {dev:.3g} > {tol:g})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ValidationError(f"{name}: det(R) = +1 violated (det = {det:.6g}); reflections are rejected")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps ``x -> R @ x + t``; ``t`` in metres."""

    R: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    t: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(-1)
        check_rotation(R)
        if t.shape != (3,):
            raise ValidationError(f"t: expected 3-vector, got shape {t.shape}")
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "t", _frozen(t))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def apply(self, points: NDArray) -> NDArray:
        """Transform an ``(..., 3)`` array of points."""
        return np.asarray(points) @ self.R.T + self.t

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def to_json(self) -> dict:
        return {"R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_json(cls, doc: dict, name: str = "transform") -> RigidTransform:
        try:
            R = np.asarray(doc["R"], dtype=float)
            t = np.asarray(doc["t"], dtype=float)
        except KeyError as e:
            raise ValidationError(f"{name}: missing key {e.args[0]!r}") from None
        if R.size != 9 or t.size != 3:
            raise ValidationError(f"{name}: R needs 9 values and t needs 3")
        try:
            return cls(R.reshape(3, 3), t)
        except ValidationError as e:
            raise ValidationError(f"{name}.{e}") from None

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)


@dataclass(frozen=True)
class CameraModel:
    """Depth + color sensor calibration.

    ``color_extrinsics`` maps depth-camera (world) coordinates into the color
    camera frame. Image sizes are ``(width, height)``.
    """

    depth_intrinsics: CameraIntrinsics
    color_intrinsics: CameraIntrinsics
    depth_distortion: DistortionModel = DistortionModel()
    color_distortion: DistortionModel = DistortionModel()
    color_extrinsics: RigidTransform = field(default_factory=RigidTransform)
    depth_size: tuple[int, int] = DEPTH_SIZE
    color_size: tuple[int, int] = COLOR_SIZE

    def cache_key(self) -> tuple:
        return (
            self.depth_intrinsics,
            self.color_intrinsics,
            self.depth_distortion,
            self.color_distortion,
            tuple(self.color_extrinsics.R.reshape(-1)),
            tuple(self.color_extrinsics.t),
            self.depth_size,
            self.color_size,
        )

    def to_json(self) -> dict:
        def sensor(intr, dist, size):
            doc = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}
            doc.update(vars(dist))
            doc["width"], doc["height"] = size
            return doc

        return {
            "depth": sensor(self.depth_intrinsics, self.depth_distortion, self.depth_size),
            "color": sensor(self.color_intrinsics, self.color_distortion, self.color_size),
            "color_extrinsics": self.color_extrinsics.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> CameraModel:
        def sensor(name, default_size):
            if name not in doc:
                raise ValidationError(f"camera model: missing section {name!r}")
            sec = doc[name]
            try:
                intr = CameraIntrinsics(*(float(sec[k]) for k in ("fx", "fy", "cx", "cy")))
            except KeyError as e:
                raise ValidationError(f"{name}: missing key {e.args[0]!r}") from None
            except ValidationError as e:
                raise ValidationError(f"{name}: {e}") from None
            dist = DistortionModel(
                **{k: float(sec.get(k, 0.0)) for k in ("k1", "k2", "k3", "k4", "k5", "k6", "p1", "p2")}
            )
            size = (int(sec.get("width", default_size[0])), int(sec.get("height", default_size[1])))
            if size[0] <= 0 or size[1] <= 0:
                raise ValidationError(f"{name}: image size must be positive, got {size}")
            return intr, dist, size

        d_intr, d_dist, d_size = sensor("depth", DEPTH_SIZE)
        c_intr, c_dist, c_size = sensor("color", COLOR_SIZE)
        ext = doc.get("color_extrinsics", {"R": np.eye(3).reshape(-1).tolist(), "t": [0, 0, 0]})
        return cls(
            depth_intrinsics=d_intr,
            color_intrinsics=c_intr,
            depth_distortion=d_dist,
            color_distortion=c_dist,
            color_extrinsics=RigidTransform.from_json(ext, "color_extrinsics"),
            depth_size=d_size,
            color_size=c_size,
        )


def load_camera_model(path: str | os.PathLike) -> CameraModel:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from None
    return CameraModel.from_json(doc)


def save_camera_model(model: CameraModel, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=2))


def standard_camera(color_size: tuple[int, int] = (640, 360)) -> CameraModel:
    """Pinhole model whose depth grid lands exactly on depth pixel centres.

    fx = width-1 maps X in [-0.5, 0.5] onto u in [0, width-1]; likewise for y.
    The color camera shares the optical centre and field of view.
    """
    w, h = DEPTH_SIZE
    cw, ch = color_size
    return CameraModel(
        depth_intrinsics=CameraIntrinsics(w - 1, h - 1, (w - 1) / 2, (h - 1) / 2),
        color_intrinsics=CameraIntrinsics(cw - 1, ch - 1, (cw - 1) / 2, (ch - 1) / 2),
        depth_size=DEPTH_SIZE,
        color_size=color_size,
    )


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Paired 3-D points (metres): row n of ``A`` corresponds to row n of ``B``."""

    A: NDArray[np.float64]
    B: NDArray[np.float64]

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 2 or A.shape[1] != 3 or A.shape != B.shape:
            raise ValidationError(f"correspondences need matching (N, 3) arrays, got {A.shape} and {B.shape}")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))

    def __len__(self) -> int:
        return self.A.shape[0]


def read_correspondences(path: str | os.PathLike) -> CorrespondenceSet:
    """Parse ``ax,ay,az,bx,by,bz`` rows; blank lines and ``#`` comments are ignored."""
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 6:
                raise ValidationError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if not rows and lineno == 1:  # tolerate a header line
                    continue
                raise ValidationError(f"{path}:{lineno}: non-numeric value") from None
    arr = np.asarray(rows, dtype=float).reshape(-1, 6)
    return CorrespondenceSet(arr[:, :3], arr[:, 3:])


def write_correspondences(corr: CorrespondenceSet, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for a, b in zip(corr.A, corr.B):
            w.writerow([repr(float(v)) for v in (*a, *b)])


# -- frame-stream container -------------------------------------------------


def _record_bytes(kind: int, frame_number: int, timestamp_us: int, data: NDArray) -> bytes:
    h, w = data.shape[:2]
    if w >= 2**16 or h >= 2**16:
        raise ValidationError(f"frame {frame_number}: {w}x{h} exceeds u16 dimensions")
    dtype = "<u2" if kind == RECORD_DEPTH else "u1"
    return _RECORD.pack(kind, frame_number, timestamp_us, w, h) + np.ascontiguousarray(data, dtype=dtype).tobytes()


def encode_depth(frame: DepthFrame) -> bytes:
    return _record_bytes(RECORD_DEPTH, frame.frame_number, frame.timestamp_us, frame.data)


def encode_pair(pair: FramePair) -> bytes:
    return encode_depth(pair.depth) + _record_bytes(
        RECORD_COLOR, pair.color.frame_number, pair.color.timestamp_us, pair.color.data
    )


def write_stream(pairs: Iterable[FramePair], path: str | os.PathLike) -> int:
    """Write pairs to a ``.vmsh`` file; returns the number of pairs written."""
    count = 0
    last = -1
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION))
        for pair in pairs:
            if pair.frame_number <= last:
                raise OrderingError(
                    f"frame numbers must strictly increase: {pair.frame_number} follows {last}"
                )
            last = pair.frame_number
            f.write(encode_pair(pair))
            count += 1
    return count


def _read_record(buf: memoryview, offset: int):
    if offset + _RECORD.size > len(buf):
        raise TruncationError("truncated record header", offset)
    kind, n, ts, w, h = _RECORD.unpack_from(buf, offset)
    if kind == RECORD_DEPTH:
        nbytes = 2 * w * h
    elif kind == RECORD_COLOR:
        nbytes = 3 * w * h
    else:
        raise FormatError(f"unknown record type {kind} at byte offset {offset}")
    start = offset + _RECORD.size
    if start + nbytes > len(buf):
        raise TruncationError(f"truncated payload for frame {n}", offset)
    raw = buf[start : start + nbytes]
    if kind == RECORD_DEPTH:
        frame = DepthFrame(n, ts, np.frombuffer(raw, dtype="<u2").reshape(h, w).astype(np.uint16))
    else:
        frame = ColorFrame(n, ts, np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3))
    return kind, frame, start + nbytes


def decode_depth(blob: bytes) -> DepthFrame:
    kind, frame, _ = _read_record(memoryview(blob), 0)
    if kind != RECORD_DEPTH:
        raise FormatError("expected a depth record")
    return frame


def iter_stream(path: str | os.PathLike) -> Iterator[FramePair]:
    data = Path(path).read_bytes()
    buf = memoryview(data)
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the stream header")
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported stream version {version}")
    offset = _HEADER.size
    last = -1
    while offset < len(buf):
        rec_offset = offset
        kind, depth, offset = _read_record(buf, offset)
        if kind != RECORD_DEPTH:
            raise PairingError(
                f"color record for frame {depth.frame_number} at byte offset {rec_offset} "
                "is not preceded by its depth record",
                depth.frame_number,
            )
        if offset >= len(buf):
            raise TruncationError(f"depth frame {depth.frame_number} has no color record", offset)
        kind, color, offset = _read_record(buf, offset)
        if kind != RECORD_COLOR or color.frame_number != depth.frame_number:
            raise PairingError(
                f"depth record for frame {depth.frame_number} is not followed by its color record",
                depth.frame_number,
            )
        if depth.frame_number <= last:
            raise OrderingError(f"frame {depth.frame_number} follows {last} at byte offset {rec_offset}")
        last = depth.frame_number
        yield FramePair(depth, color)


def read_stream(path: str | os.PathLike) -> list[FramePair]:
    return list(iter_stream(path))


def depth_stack(frames: Sequence[DepthFrame]) -> NDArray[np.uint16]:
    return np.stack([f.data for f in frames])
