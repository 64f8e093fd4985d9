"""Reference trajectories: ordered timestamped poses with cumulative arc length."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import FRAME_MAP, FRAME_ROBOT, RigidTransform


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _matrix_to_quat(m):
    """Shepperd's method: branch on the largest of trace and diagonal entries."""
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > max(m[0, 0], m[1, 1], m[2, 2]):
        s = 2.0 * np.sqrt(1.0 + t)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


@dataclass
class Projection:
    """Orthogonal projection of a planar point onto the trajectory polyline."""

    seg_index: int
    t_along: float          # meters from the segment start to the foot point
    foot: np.ndarray        # (2,) foot point
    tangent_heading: float
    signed_normal: float    # positive = left of path direction
    distance: float         # Euclidean point-to-foot distance
    arc_position: float     # cumulative arc length at the foot point
    nearest_pose_index: int


class ReferenceTrajectory:
    """Ordered (stamp, pose) samples in the map frame with cumulative arc length."""

    def __init__(self, stamps, positions, quats, arc_length=None):
        self.stamps = np.asarray(stamps, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        n = len(self.stamps)
        if len(self.positions) != n or len(self.quats) != n:
            raise ValueError("stamps, positions and quats must have equal length")
        if arc_length is None:
            arc_length = cumulative_arc_length(self.positions)
        self.arc_length = np.asarray(arc_length, dtype=np.float64).reshape(-1)
        if len(self.arc_length) != n:
            raise ValueError("arc_length must match pose count")
        if n > 1 and np.any(np.diff(self.arc_length) < -1e-12):
            raise ValueError("arc_length must be non-decreasing")

    def __len__(self):
        return len(self.stamps)

    @classmethod
    def from_poses(cls, stamps, poses) -> "ReferenceTrajectory":
        positions = np.array([p.translation for p in poses]).reshape(-1, 3)
        quats = np.array([_matrix_to_quat(p.rotation) for p in poses]).reshape(-1, 4)
        return cls(np.asarray(stamps, dtype=np.float64), positions, quats)

    def pose(self, i: int) -> RigidTransform:
        return RigidTransform(_quat_to_matrix(self.quats[i]), self.positions[i],
                              FRAME_ROBOT, FRAME_MAP)

    @property
    def xy(self) -> np.ndarray:
        return self.positions[:, :2]

    def headings(self) -> np.ndarray:
        mats = np.array([_quat_to_matrix(q) for q in self.quats])
        return np.arctan2(mats[:, 1, 0], mats[:, 0, 0])

    def total_length(self) -> float:
        return float(self.arc_length[-1]) if len(self) else 0.0

    def reversed(self) -> "ReferenceTrajectory":
        """Path traversed the other way: pose order reversed, headings flipped by pi."""
        flip = np.diag([-1.0, -1.0, 1.0])  # rotation by pi about z
        quats = np.array([
            _matrix_to_quat(_quat_to_matrix(q) @ flip) for q in self.quats[::-1]
        ])
        return ReferenceTrajectory(self.stamps[::-1].copy() * -1.0 + self.stamps[-1],
                                   self.positions[::-1].copy(), quats)

    def project(self, xy) -> Projection:
        """Closest-segment orthogonal projection; ties go to the lower segment index."""
        if len(self) < 2:
            raise ValueError("projection needs at least 2 poses")
        p = np.asarray(xy, dtype=np.float64).reshape(2)
        a = self.xy[:-1]
        b = self.xy[1:]
        ab = b - a
        seg_len2 = np.einsum("ij,ij->i", ab, ab)
        seg_len2 = np.where(seg_len2 < 1e-300, 1e-300, seg_len2)
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / seg_len2, 0.0, 1.0)
        foot = a + t[:, None] * ab
        d2 = np.einsum("ij,ij->i", p - foot, p - foot)
        i = int(np.argmin(d2))  # argmin returns the first (lowest index) on ties
        seg = ab[i]
        seg_len = float(np.sqrt(seg_len2[i]))
        heading = float(np.arctan2(seg[1], seg[0]))
        offset = p - foot[i]
        signed = float((seg[0] * offset[1] - seg[1] * offset[0]) / max(seg_len, 1e-300))
        t_along = float(t[i]) * seg_len
        arc = float(self.arc_length[i] + t_along)
        nearest = i if float(t[i]) <= 0.5 else i + 1
        return Projection(seg_index=i, t_along=t_along, foot=foot[i],
                          tangent_heading=heading, signed_normal=signed,
                          distance=float(np.sqrt(d2[i])), arc_position=arc,
                          nearest_pose_index=nearest)

    def save_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stamp", "x", "y", "z", "qw", "qx", "qy", "qz", "arc_length"])
            for i in range(len(self)):
                w.writerow([repr(float(v)) for v in (
                    self.stamps[i], *self.positions[i], *self.quats[i],
                    self.arc_length[i])])

    @classmethod
    def load_csv(cls, path) -> "ReferenceTrajectory":
        rows = []
        with open(Path(path), newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0] == "stamp":
                    continue
                rows.append([float(v) for v in row])
        data = np.array(rows, dtype=np.float64).reshape(-1, 9)
        return cls(data[:, 0], data[:, 1:4], data[:, 4:8], data[:, 8])


def cumulative_arc_length(positions) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return np.zeros(0)
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def subsample_by_distance(positions, min_spacing: float) -> np.ndarray:
    """Greedy index subset keeping poses at least min_spacing apart.

    The first and last indices are always kept.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n <= 2:
        return np.arange(n)
    kept = [0]
    for i in range(1, n - 1):
        # Small slack so exact-spacing inputs are not dropped to rounding.
        if np.linalg.norm(positions[i] - positions[kept[-1]]) >= \
                min_spacing - 1e-12:
            kept.append(i)
    kept.append(n - 1)
    return np.array(kept, dtype=np.int64)
