"""Consumer-side grid meshing and edge refinement.

Vertices live on the fixed ``height x width`` ray lattice; vertex ``(i, j)``
has flat index ``i * width + j``. Each grid quad is split along its
top-left -> bottom-right diagonal::

    a=(i,j) ---- b=(i,j+1)
       |  \\        |
       |    \\      |
    c=(i+1,j) -- d=(i+1,j+1)

    upper triangle (a, b, d), lower triangle (a, d, c)

The 8-neighbourhood is numbered clockwise from the top-left (see
``NEIGHBOR_OFFSETS``). The edge-vertex displacement rule is documented in
``docs/edge_refinement.md``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .core import CameraModel, FramePair, ValidationError, VolcapError
from .projection import grid_vertex_world, projector_for

MAX_EDGE_M = 0.1

# (di, dj) clockwise from the top-left neighbour
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


class ShapeError(VolcapError, ValueError):
    pass


# edge family -> grid offsets of its two endpoints relative to the array index
_FAMILIES = (
    ("h", (0, 0), (0, 1)),
    ("v", (0, 0), (1, 0)),
    ("d", (0, 0), (1, 1)),
    ("a", (0, 1), (1, 0)),
)


@dataclass(frozen=True)
class LatticeEdges:
    """Connectivity of the four edge families of a grid, ``True`` = both ends
    valid and closer than the threshold.

    ``h[i, j]``: (i,j)-(i,j+1); ``v[i, j]``: (i,j)-(i+1,j);
    ``d[i, j]``: (i,j)-(i+1,j+1); ``a[i, j]``: (i,j+1)-(i+1,j).
    """

    h: NDArray[np.bool_]
    v: NDArray[np.bool_]
    d: NDArray[np.bool_]
    a: NDArray[np.bool_]

    @classmethod
    def compute(cls, positions: NDArray, valid: NDArray, max_dist: float = MAX_EDGE_M) -> LatticeEdges:
        lim = max_dist * max_dist
        H, W = valid.shape
        coords = [np.ascontiguousarray(positions[..., k]) for k in range(3)]
        # two scratch planes reused by every family keep allocations (and page faults) down
        acc_buf = np.empty(H * W)
        tmp_buf = np.empty(H * W)
        out = {}
        for name, (di0, dj0), (di1, dj1) in _FAMILIES:
            fh, fw = H - max(di0, di1), W - max(dj0, dj1)
            s0 = (slice(di0, di0 + fh), slice(dj0, dj0 + fw))
            s1 = (slice(di1, di1 + fh), slice(dj1, dj1 + fw))
            acc = acc_buf[: fh * fw].reshape(fh, fw)
            tmp = tmp_buf[: fh * fw].reshape(fh, fw)
            for k, c in enumerate(coords):
                if k == 0:
                    np.subtract(c[s0], c[s1], out=acc)
                    np.multiply(acc, acc, out=acc)
                else:
                    np.subtract(c[s0], c[s1], out=tmp)
                    np.multiply(tmp, tmp, out=tmp)
                    np.add(acc, tmp, out=acc)
            m = np.less(acc, lim)
            m &= valid[s0]
            m &= valid[s1]
            out[name] = m
        return cls(**out)

    def triangle_mask(self) -> NDArray[np.bool_]:
        """``(h-1, w-1, 2)``: upper (a,b,d) and lower (a,d,c) triangle of each quad."""
        upper = self.h[:-1, :] & self.v[:, 1:] & self.d
        lower = self.d & self.v[:, :-1] & self.h[1:, :]
        return np.stack([upper, lower], axis=-1)

    def neighbor_mask(self) -> NDArray[np.bool_]:
        """``(8, h, w)`` presence of each clockwise-numbered neighbour."""
        H, W = self.v.shape[0] + 1, self.h.shape[1] + 1
        m = np.zeros((8, H, W), bool)
        m[0, 1:, 1:] = self.d  # top-left
        m[1, 1:, :] = self.v  # top
        m[2, 1:, :-1] = self.a  # top-right
        m[3, :, :-1] = self.h  # right
        m[4, :-1, :-1] = self.d  # bottom-right
        m[5, :-1, :] = self.v  # bottom
        m[6, :-1, 1:] = self.a  # bottom-left
        m[7, :, 1:] = self.h  # left
        return m

    def neighbor_counts(self) -> NDArray[np.int8]:
        cached = self.__dict__.get("_counts")
        if cached is not None:
            return cached
        H, W = self.v.shape[0] + 1, self.h.shape[1] + 1
        c = np.zeros((H, W), np.int8)
        h, v, d, a = (x.view(np.int8) for x in (self.h, self.v, self.d, self.a))
        c[:, :-1] += h
        c[:, 1:] += h
        c[:-1, :] += v
        c[1:, :] += v
        c[:-1, :-1] += d
        c[1:, 1:] += d
        c[:-1, 1:] += a
        c[1:, :-1] += a
        c.setflags(write=False)
        object.__setattr__(self, "_counts", c)
        return c

    def offset_sums(self) -> tuple[NDArray, NDArray]:
        """Sum of ``(di, dj)`` offsets over present neighbours, per vertex."""
        H, W = self.v.shape[0] + 1, self.h.shape[1] + 1
        si = np.zeros((H, W), np.int8)
        sj = np.zeros((H, W), np.int8)
        h, v, d, a = (x.view(np.int8) for x in (self.h, self.v, self.d, self.a))
        sj[:, :-1] += h
        sj[:, 1:] -= h
        si[:-1, :] += v
        si[1:, :] -= v
        si[:-1, :-1] += d
        sj[:-1, :-1] += d
        si[1:, 1:] -= d
        sj[1:, 1:] -= d
        si[:-1, 1:] += a
        sj[:-1, 1:] -= a
        si[1:, :-1] -= a
        sj[1:, :-1] += a
        return si, sj


@dataclass(frozen=True, eq=False)
class GridMesh:
    """Grid-lattice mesh. Triangles are kept as a per-quad mask; see :attr:`triangles`."""

    positions: NDArray[np.float64]  # (h, w, 3) metres
    colors: NDArray[np.uint8]  # (h, w, 3)
    alpha: NDArray[np.float64]  # (h, w), multiples of 1/8
    valid: NDArray[np.bool_]  # (h, w)
    tri_mask: NDArray[np.bool_]  # (h-1, w-1, 2): upper (a,b,d), lower (a,d,c)
    frame_number: int = 0

    def __post_init__(self):
        for name in ("positions", "colors", "alpha", "valid", "tri_mask"):
            getattr(self, name).setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def triangles(self) -> NDArray[np.int64]:
        """``(m, 3)`` flat vertex indices, quad by quad in row-major order."""
        h, w = self.shape
        if h < 2 or w < 2:
            return np.zeros((0, 3), np.int64)
        return grid_triangles(h, w)[self.tri_mask.reshape(-1)]

    def edges(self) -> LatticeEdges:
        cached = self.__dict__.get("_edges")
        if cached is None:
            cached = LatticeEdges.compute(self.positions, self.valid)
            object.__setattr__(self, "_edges", cached)
        return cached

    def edge_lengths(self) -> NDArray[np.float64]:
        """``(m, 3)`` lengths of edges ab, bc, ca for every triangle."""
        p = self.positions.reshape(-1, 3)[self.triangles]
        return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)


def _derive(mesh: GridMesh, **changes) -> GridMesh:
    """``dataclasses.replace`` that keeps the edge cache when geometry is unchanged."""
    new = replace(mesh, **changes)
    if "positions" not in changes and "valid" not in changes and "_edges" in mesh.__dict__:
        object.__setattr__(new, "_edges", mesh.__dict__["_edges"])
    return new


def neighbor_mask(positions: NDArray, valid: NDArray, max_dist: float = MAX_EDGE_M) -> NDArray[np.bool_]:
    """``(8, h, w)``: neighbour k of each vertex is valid and closer than ``max_dist``."""
    return LatticeEdges.compute(positions, valid, max_dist).neighbor_mask()


def neighbor_counts(positions: NDArray, valid: NDArray, max_dist: float = MAX_EDGE_M) -> NDArray[np.int64]:
    return LatticeEdges.compute(positions, valid, max_dist).neighbor_counts()


@lru_cache(maxsize=4)
def grid_triangles(height: int, width: int) -> NDArray[np.int64]:
    """All ``2 * (h-1) * (w-1)`` lattice triangles, quad by quad in row-major order."""
    i, j = np.meshgrid(np.arange(height - 1), np.arange(width - 1), indexing="ij")
    a = (i * width + j).reshape(-1)
    b, c, d = a + 1, a + width, a + width + 1
    tri = np.stack([np.stack([a, b, d], 1), np.stack([a, d, c], 1)], axis=1).reshape(-1, 3)
    tri.setflags(write=False)
    return tri


def triangulate(positions: NDArray, valid: NDArray, max_edge: float = MAX_EDGE_M) -> NDArray[np.int64]:
    """Triangles of the lattice whose vertices are valid and pairwise closer than ``max_edge``."""
    h, w = valid.shape
    if h < 2 or w < 2:
        return np.zeros((0, 3), np.int64)
    keep = LatticeEdges.compute(positions, valid, max_edge).triangle_mask()
    return grid_triangles(h, w)[keep.reshape(-1)]


def build_grid_mesh(pair: FramePair, model: CameraModel) -> GridMesh:
    """Look up depth and color for every grid ray and connect short quads."""
    w, h = model.depth_size
    if pair.depth.data.shape != (h, w):
        raise ShapeError(
            f"frame {pair.frame_number}: depth image {pair.depth.width}x{pair.depth.height} "
            f"does not match camera model {w}x{h}"
        )
    cw, ch = model.color_size
    if pair.color.data.shape[:2] != (ch, cw):
        raise ShapeError(
            f"frame {pair.frame_number}: color image {pair.color.width}x{pair.color.height} "
            f"does not match camera model {cw}x{ch}"
        )
    proj = projector_for(model, h, w)
    d = proj.depth_lookup(pair.depth)
    valid = d > 0
    positions = grid_vertex_world(proj.X, proj.Y, d)
    colors, _ = proj.color_lookup(pair.color, d)
    colors[~valid] = 0
    edges = LatticeEdges.compute(positions, valid)
    mesh = GridMesh(
        positions=positions,
        colors=colors,
        alpha=valid.astype(float),
        valid=valid,
        tri_mask=edges.triangle_mask(),
        frame_number=pair.frame_number,
    )
    object.__setattr__(mesh, "_edges", edges)
    return mesh


def edge_displacement(present: NDArray[np.bool_]) -> NDArray[np.float64]:
    """Grid-space displacement ``(di, dj)`` for neighbour presence masks.

    ``present`` has shape ``(8, ...)`` in clockwise neighbour order.
    """
    off = np.asarray(NEIGHBOR_OFFSETS, float)
    n = present.sum(axis=0)
    si = np.tensordot(off[:, 0], present, axes=1)
    sj = np.tensordot(off[:, 1], present, axes=1)
    return _half_cell_toward(si, sj, n)


def _half_cell_toward(si, sj, n):
    """With 1..7 neighbours move half a cell toward the centroid of the present
    neighbour offsets; with 0 or 8 neighbours, or a centroid at the origin,
    stay put."""
    si = np.asarray(si, float)
    sj = np.asarray(sj, float)
    norm = np.hypot(si, sj)
    move = (n > 0) & (n < 8) & (norm > 1e-12)
    scale = np.where(move, 0.5 / np.where(move, norm, 1.0), 0.0)
    return np.stack([si * scale, sj * scale], axis=-1)


def refine_edge_vertices(mesh: GridMesh) -> GridMesh:
    """Slide boundary vertices half a cell toward their surviving neighbours.

    The move keeps each vertex's depth: only its ray parameters (X, Y) shift,
    so the displacement stays parallel to the image plane.
    """
    h, w = mesh.shape
    edges = mesh.edges()
    counts = edges.neighbor_counts()
    si, sj = edges.offset_sums()
    # only boundary vertices with a non-zero centroid move
    idx = np.flatnonzero((counts > 0) & (counts < 8) & ((si != 0) | (sj != 0)))
    positions = mesh.positions.copy()
    if idx.size:
        disp = _half_cell_toward(si.reshape(-1)[idx], sj.reshape(-1)[idx], counts.reshape(-1)[idx])
        flat = positions.reshape(-1, 3)
        z = flat[idx, 2]
        # +j steps X by 1/(w-1); +i steps Y by -1/(h-1)
        flat[idx, 0] += disp[:, 1] * (z / max(w - 1, 1))
        flat[idx, 1] -= disp[:, 0] * (z / max(h - 1, 1))
    return replace(mesh, positions=positions)


def feather_alpha(mesh: GridMesh) -> GridMesh:
    """alpha = (valid neighbours within 10 cm) / 8; invalid vertices get 0."""
    counts = mesh.edges().neighbor_counts()
    return _derive(mesh, alpha=np.where(mesh.valid, counts / 8.0, 0.0))


def prune_long_triangles(mesh: GridMesh, max_edge: float = MAX_EDGE_M) -> GridMesh:
    """Drop triangles with any edge >= ``max_edge`` at the current positions."""
    edges = mesh.edges() if max_edge == MAX_EDGE_M else LatticeEdges.compute(mesh.positions, mesh.valid, max_edge)
    return _derive(mesh, tri_mask=mesh.tri_mask & edges.triangle_mask())


def reconstruct(pair: FramePair, model: CameraModel, refine: bool = True) -> GridMesh:
    """Full consumer-side chain: build, feather, refine, prune.

    Feathering runs before the vertex move so alpha reflects the same
    neighbourhood that decided the move.
    """
    mesh = feather_alpha(build_grid_mesh(pair, model))
    if refine:
        mesh = refine_edge_vertices(mesh)
    return prune_long_triangles(mesh)


def ply_bytes(mesh: GridMesh) -> bytes:
    """ASCII PLY of valid vertices (densely re-indexed) and their faces."""
    valid = mesh.valid.reshape(-1)
    remap = np.full(valid.size, -1, np.int64)
    remap[valid] = np.arange(int(valid.sum()))
    faces = remap[mesh.triangles]
    if faces.size and faces.min() < 0:
        raise ValidationError("mesh has triangles referencing invalid vertices")
    pos = mesh.positions.reshape(-1, 3)[valid]
    col = mesh.colors.reshape(-1, 3)[valid]
    alpha = np.clip(np.floor(mesh.alpha.reshape(-1)[valid] * 255 + 0.5), 0, 255).astype(int)

    header = (
        "ply\nformat ascii 1.0\n"
        f"comment frame {mesh.frame_number}\n"
        f"element vertex {len(pos)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nproperty uchar alpha\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vrows = np.concatenate([pos.astype(object), np.column_stack([col, alpha]).astype(object)], axis=1)
    body = ("%.6f %.6f %.6f %d %d %d %d\n" * len(pos)) % tuple(vrows.reshape(-1))
    body += ("3 %d %d %d\n" * len(faces)) % tuple(faces.reshape(-1).tolist())
    return (header + body).encode("ascii")


def export_ply(mesh: GridMesh, path: str | os.PathLike) -> None:
    try:
        with open(path, "wb") as f:
            f.write(ply_bytes(mesh))
    except OSError as e:
        raise OSError(e.errno, f"cannot write PLY to {path}: {e.strerror}") from e
