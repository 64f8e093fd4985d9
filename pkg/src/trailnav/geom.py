"""Core geometric types: point clouds, rigid transforms, and the kd-tree index."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

FRAME_LIDAR = "L"
FRAME_ROBOT = "R"
FRAME_MAP = "G"
VALID_FRAMES = (FRAME_LIDAR, FRAME_ROBOT, FRAME_MAP)

# Extra neighbors fetched from the kd-tree so that equal-distance ties can be
# broken deterministically (lower point index wins) before truncating to k.
_TIE_SLACK = 8


class FrameMismatchError(ValueError):
    """A transform was applied to a cloud expressed in a different frame."""


def _as_f64(a, shape_tail, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != tuple(shape_tail):
        if shape_tail == () and arr.ndim == 1:
            return arr
        raise ValueError(f"{name} must have shape (n, {shape_tail})")
    return arr


@dataclass
class PointCloud:
    """Positions with optional per-point normals, timestamps and dynamic probabilities.

    All optional attributes, when present, have exactly one entry per point.
    ``labels`` is a free-form integer tag per point (e.g. simulator ground-truth
    class); it rides along through transforms and filters but is never part of
    any on-disk format.
    """

    points: np.ndarray
    frame: str = FRAME_LIDAR
    normals: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    dyn_prob: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if self.frame not in VALID_FRAMES:
            raise ValueError(f"unknown frame tag {self.frame!r}")
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ValueError("normals must match points length")
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("normals must have unit norm within 1e-6")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
            if self.timestamps.shape != (n,):
                raise ValueError("timestamps must match points length")
        if self.dyn_prob is not None:
            self.dyn_prob = np.asarray(self.dyn_prob, dtype=np.float64)
            if self.dyn_prob.shape != (n,):
                raise ValueError("dyn_prob must match points length")
            if n and (self.dyn_prob.min() < 0.0 or self.dyn_prob.max() > 1.0):
                raise ValueError("dyn_prob values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels must match points length")

    def __len__(self):
        return len(self.points)

    def select(self, mask_or_idx) -> "PointCloud":
        """New cloud restricted to the given boolean mask or index array."""
        def pick(a):
            return None if a is None else a[mask_or_idx]

        return PointCloud(
            points=self.points[mask_or_idx],
            frame=self.frame,
            normals=pick(self.normals),
            timestamps=pick(self.timestamps),
            dyn_prob=pick(self.dyn_prob),
            labels=pick(self.labels),
        )

    def copy(self) -> "PointCloud":
        def cp(a):
            return None if a is None else a.copy()

        return PointCloud(self.points.copy(), self.frame, cp(self.normals),
                          cp(self.timestamps), cp(self.dyn_prob), cp(self.labels))


def concat_clouds(clouds) -> PointCloud:
    """Concatenate clouds sharing one frame; optional fields kept only if present everywhere."""
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return PointCloud(np.zeros((0, 3)), frame=FRAME_MAP)
    frame = clouds[0].frame
    if any(c.frame != frame for c in clouds):
        raise FrameMismatchError("cannot concatenate clouds from different frames")

    def cat(attr):
        vals = [getattr(c, attr) for c in clouds]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    return PointCloud(np.concatenate([c.points for c in clouds]), frame,
                      cat("normals"), cat("timestamps"), cat("dyn_prob"), cat("labels"))


@dataclass
class RigidTransform:
    """SE(3) transform taking coordinates in ``from_frame`` to ``to_frame``."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str = FRAME_LIDAR
    to_frame: str = FRAME_MAP

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls, frame=FRAME_MAP, to_frame=None):
        return cls(np.eye(3), np.zeros(3), frame, frame if to_frame is None else to_frame)

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0), from_frame=FRAME_LIDAR,
                 to_frame=FRAME_MAP):
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64), from_frame, to_frame)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(_orthonormalize(rt), -rt @ self.translation,
                              self.to_frame, self.from_frame)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: applies ``other`` first."""
        if other.to_frame != self.from_frame:
            raise FrameMismatchError(
                f"cannot compose {self.from_frame}->{self.to_frame} "
                f"with {other.from_frame}->{other.to_frame}")
        return RigidTransform(_orthonormalize(self.rotation @ other.rotation),
                              self.rotation @ other.translation + self.translation,
                              other.from_frame, self.to_frame)

    def __matmul__(self, other):
        return self.compose(other)

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def retagged(self, from_frame, to_frame) -> "RigidTransform":
        return RigidTransform(self.rotation, self.translation, from_frame, to_frame)


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3) (guards drift from repeated composition)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Re-express a cloud in ``t.to_frame``; timestamps, dyn_prob and labels ride along."""
    if t.from_frame != cloud.frame:
        raise FrameMismatchError(
            f"transform expects frame {t.from_frame!r}, cloud is in {cloud.frame!r}")
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.apply(cloud.points), t.to_frame, normals,
                      None if cloud.timestamps is None else cloud.timestamps.copy(),
                      None if cloud.dyn_prob is None else cloud.dyn_prob.copy(),
                      None if cloud.labels is None else cloud.labels.copy())


@dataclass
class NeighborSet:
    """Up to n_m reference-cloud neighbors of one query point, distances ascending."""

    query_index: int
    neighbor_indices: np.ndarray
    distances: np.ndarray


@dataclass
class SpatialIndex:
    """Immutable kd-tree snapshot over a cloud's positions."""

    points: np.ndarray
    tree: cKDTree = field(repr=False)

    def __len__(self):
        return len(self.points)


def build_index(cloud: PointCloud) -> SpatialIndex:
    if len(cloud) == 0:
        raise ValueError("cannot build a spatial index over an empty cloud")
    pts = cloud.points.copy()
    return SpatialIndex(points=pts, tree=cKDTree(pts))


def _tiebreak_rows(dist, idx, k):
    """Sort candidate neighbors by (distance, index) and truncate to k."""
    order = np.lexsort((idx, dist))
    return dist[order][:k], idx[order][:k]


def knn(index: SpatialIndex, query, n_m: int, d_max: float, eps: float = 0.0,
        query_index: int = -1) -> NeighborSet:
    """k-nearest neighbors within d_max; eps > 0 allows (1+eps)-approximate results.

    Equal-distance ties are broken toward the lower point index.
    """
    if n_m < 1:
        raise ValueError("n_m must be >= 1")
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    k = min(n_m + _TIE_SLACK, len(index))
    dist, idx = index.tree.query(q, k=k, eps=eps, distance_upper_bound=d_max)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    valid = np.isfinite(dist)
    dist, idx = _tiebreak_rows(dist[valid], idx[valid], n_m)
    return NeighborSet(query_index=query_index, neighbor_indices=idx.astype(np.int64),
                       distances=dist)


def knn_brute_force(points: np.ndarray, query, n_m: int, d_max: float,
                    query_index: int = -1) -> NeighborSet:
    """Exhaustive-scan oracle with the same tie-break rule as :func:`knn`."""
    q = np.asarray(query, dtype=np.float64).reshape(3)
    dist = np.linalg.norm(points - q, axis=1)
    keep = dist <= d_max
    idx = np.nonzero(keep)[0]
    dist, idx = _tiebreak_rows(dist[keep], idx, n_m)
    return NeighborSet(query_index=query_index, neighbor_indices=idx.astype(np.int64),
                       distances=dist)
