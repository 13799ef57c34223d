"""Least-squares rigid registration and coordinate-frame bookkeeping."""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import CorrespondenceSet, RigidTransform, ValidationError, VolcapError

RANK_TOL = 1e-9
CYCLE_TOL = 1e-6


class AlignmentError(VolcapError, ValueError):
    pass


class ArityError(AlignmentError):
    pass


class RankError(AlignmentError):
    pass


class PathError(AlignmentError, LookupError):
    pass


def fit_rigid(corr: CorrespondenceSet) -> RigidTransform:
    """Rotation and translation minimising ``sum ||R a + t - b||^2`` (Kabsch).

    A reflection is corrected by flipping the right singular vector belonging
    to the smallest singular value.
    """
    A, B = corr.A, corr.B
    n = len(corr)
    if n < 3:
        raise ArityError(f"need at least 3 correspondences, got {n}")
    ca = A.mean(axis=0)
    cb = B.mean(axis=0)
    A0 = A - ca
    B0 = B - cb
    spread = np.linalg.svd(A0, compute_uv=False)
    if spread[0] == 0 or spread[1] <= RANK_TOL * spread[0]:
        raise RankError("source points are collinear or coincident; rotation is undetermined")

    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    R = V @ U.T
    if np.linalg.det(R) < 0:
        V[:, 2] = -V[:, 2]
        R = V @ U.T
    return RigidTransform(R, cb - R @ ca)


def residual(corr: CorrespondenceSet, T: RigidTransform) -> float:
    """Sum of squared distances ``||R a + t - b||^2`` in m^2."""
    d = T.apply(corr.A) - corr.B
    return float(np.sum(d * d))


def point_errors(corr: CorrespondenceSet, T: RigidTransform) -> NDArray[np.float64]:
    return np.linalg.norm(T.apply(corr.A) - corr.B, axis=1)


class FrameGraph:
    """Named coordinate frames joined by rigid transforms.

    An edge ``(source, target, T)`` means ``x_target = T.R @ x_source + T.t``.
    Every cycle must compose to the identity (within ``CYCLE_TOL``).
    """

    def __init__(self, edges: Iterable[tuple[str, str, RigidTransform]] = ()):
        self._adj: dict[str, list[tuple[str, RigidTransform, bool]]] = {}
        self._edges: list[tuple[str, str, RigidTransform]] = []
        for src, dst, T in edges:
            self._add(src, dst, T)

    def _add(self, src: str, dst: str, T: RigidTransform) -> None:
        if src == dst:
            raise ValidationError(f"self-loop on frame {src!r}")
        if src in self._adj and dst in self._adj:
            try:
                existing = self.transform(src, dst)
            except PathError:
                existing = None
            if existing is not None:
                dev = max(np.abs(existing.R - T.R).max(), np.abs(existing.t - T.t).max())
                if dev > CYCLE_TOL:
                    raise ValidationError(
                        f"edge {src!r}->{dst!r} closes an inconsistent cycle (deviation {dev:.3g})"
                    )
        self._adj.setdefault(src, []).append((dst, T, True))
        self._adj.setdefault(dst, []).append((src, T, False))
        self._edges.append((src, dst, T))

    def with_edge(self, src: str, dst: str, T: RigidTransform) -> FrameGraph:
        return FrameGraph([*self._edges, (src, dst, T)])

    @property
    def frames(self) -> list[str]:
        return sorted(self._adj)

    @property
    def edges(self) -> list[tuple[str, str, RigidTransform]]:
        return list(self._edges)

    def path(self, src: str, dst: str) -> list[tuple[str, RigidTransform, bool]]:
        """Breadth-first path as ``(next_frame, edge_transform, forward)`` steps."""
        for f in (src, dst):
            if f not in self._adj:
                raise PathError(f"unknown frame {f!r}")
        prev: dict[str, tuple[str, RigidTransform, bool] | None] = {src: None}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            if cur == dst:
                break
            for nxt, T, fwd in self._adj[cur]:
                if nxt not in prev:
                    prev[nxt] = (cur, T, fwd)
                    queue.append(nxt)
        if dst not in prev:
            raise PathError(f"no path from {src!r} to {dst!r}")
        steps = []
        node = dst
        while prev[node] is not None:
            parent, T, fwd = prev[node]
            steps.append((node, T, fwd))
            node = parent
        return steps[::-1]

    def transform(self, src: str, dst: str) -> RigidTransform:
        """Transform mapping coordinates in ``src`` to coordinates in ``dst``."""
        total = RigidTransform.identity()
        for _, T, fwd in self.path(src, dst):
            total = (T if fwd else T.inverse()).compose(total)
        return total


def _to_parent(R2: NDArray, t2: NDArray, R3: NDArray, t3: NDArray) -> tuple[NDArray, NDArray]:
    """Pose ``(R3, t3)`` re-expressed through the inverse of ``(R2, t2)``."""
    R2inv = R2.T
    return R2inv @ R3, R2inv @ (t3 - t2)


def change_of_frame(pose_R, pose_t, from_frame: str, to_frame: str, graph: FrameGraph):
    """Re-express a pose given in ``from_frame`` coordinates in ``to_frame``.

    Edges traversed against their direction apply ``R = R2^-1 R3``,
    ``t = R2^-1 (t3 - t2)``; edges traversed along their direction apply the
    transform itself.
    """
    R = np.asarray(pose_R, dtype=float)
    t = np.asarray(pose_t, dtype=float).reshape(3)
    for _, T, fwd in graph.path(from_frame, to_frame):
        if fwd:
            R, t = T.R @ R, T.R @ t + T.t
        else:
            R, t = _to_parent(T.R, T.t, R, t)
    return R, t


@dataclass(frozen=True)
class AlignmentReport:
    mean_error_m: float
    sigma_m: float

    def to_json(self) -> dict:
        return {"mean_error_m": self.mean_error_m, "sigma_m": self.sigma_m}


def evaluate_alignment(points_true, points_mapped) -> AlignmentReport:
    """Mean and (population) standard deviation of per-point Euclidean errors."""
    a = np.asarray(points_true, dtype=float).reshape(-1, 3)
    b = np.asarray(points_mapped, dtype=float).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValidationError(f"point sets differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValidationError("no points to evaluate")
    err = np.linalg.norm(a - b, axis=1)
    return AlignmentReport(float(err.mean()), float(err.std()))


def random_rotation(rng: np.random.Generator) -> NDArray[np.float64]:
    """Uniformly distributed rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# Marker layout (m): four markers on a static object around the work area,
# and four check points on the border of a smaller region inside it.
MARKERS = np.array([[-0.15, -0.10, 0.00], [0.15, -0.10, 0.02], [0.15, 0.10, 0.00], [-0.15, 0.10, 0.03]])
CHECK_POINTS = np.array([[-0.06, 0.0, 0.01], [0.0, -0.04, 0.01], [0.06, 0.0, 0.01], [0.0, 0.04, 0.01]])


@dataclass(frozen=True)
class MonteCarloResult:
    setups: int
    mean_error_m: float
    sigma_m: float  # spread of per-setup mean errors
    per_setup: NDArray[np.float64]


def simulate_alignment_error(
    setups: int = 1000,
    n_points: int = 4,
    noise_sigma_m: float = 0.008,
    seed: int = 0,
    markers: NDArray | None = None,
    check_points: NDArray | None = None,
) -> MonteCarloResult:
    """Monte-Carlo of the setup procedure.

    Each setup draws a random true transform, perturbs the marker positions
    seen in both frames with i.i.d. Gaussian noise per axis, fits, and
    measures how far the check points land from their true mapped positions.
    """
    rng = np.random.default_rng(seed)
    markers = MARKERS if markers is None else np.asarray(markers, float)
    checks = CHECK_POINTS if check_points is None else np.asarray(check_points, float)
    if n_points > len(markers):
        extra = rng.uniform(-0.15, 0.15, size=(n_points - len(markers), 3)) * [1, 1, 0.2]
        markers = np.vstack([markers, extra])
    markers = markers[:n_points]
    per_setup = np.empty(setups)
    for k in range(setups):
        true = RigidTransform(random_rotation(rng), rng.uniform(-1.0, 1.0, 3))
        A = markers + rng.normal(0.0, noise_sigma_m, markers.shape)
        B = true.apply(markers) + rng.normal(0.0, noise_sigma_m, markers.shape)
        est = fit_rigid(CorrespondenceSet(A, B))
        per_setup[k] = evaluate_alignment(true.apply(checks), est.apply(checks)).mean_error_m
    return MonteCarloResult(setups, float(per_setup.mean()), float(per_setup.std()), per_setup)
