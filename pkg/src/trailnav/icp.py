"""Point-to-plane ICP: input filters, kd-tree matching, trimmed outlier weights,
translation+yaw minimization, and the iteration loop with transformation checkers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (FRAME_MAP, PointCloud, RigidTransform, SpatialIndex,
                   build_index, transform_cloud)

# Default bounding boxes mask the robot body and its sensor trailer.
DEFAULT_BBOX_1 = (-1.5, 0.5, -1.0, 1.0, -1.0, 0.5)
DEFAULT_BBOX_2 = (-10.0, -1.5, -2.5, 2.5, -1.0, 1.0)

_Z = np.array([0.0, 0.0, 1.0])

# Named RNG sub-stream for the random subsampling filter.
SUBSAMPLE_STREAM = 81


class RegistrationFailure(RuntimeError):
    """No usable matches between reading and reference."""


class DegenerateRegistration(RuntimeError):
    """The normal system does not constrain all of (t_x, t_y, t_z, yaw)."""

    def __init__(self, msg, null_direction=None):
        super().__init__(msg)
        self.null_direction = null_direction


class MissingNormalError(ValueError):
    def __init__(self, reference_index):
        super().__init__(f"reference point {reference_index} has no surface normal")
        self.reference_index = int(reference_index)


@dataclass
class RegistrationConfig:
    eta_s: float = 0.7
    bboxes: list = field(default_factory=lambda: [DEFAULT_BBOX_1, DEFAULT_BBOX_2])
    r: float = 80.0
    n_m: int = 7
    d_max: float = 2.0
    eps: float = 1.0
    eta_d: float = 0.7
    eps_t_min: float = 0.01
    eps_theta_min: float = 0.001
    i_max: int = 40
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta_s <= 1.0:
            raise ValueError("eta_s must lie in [0, 1]")
        if not 0.0 <= self.eta_d <= 1.0:
            raise ValueError("eta_d must lie in [0, 1]")
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.n_m < 1:
            raise ValueError("n_m must be >= 1")
        if self.i_max < 1:
            raise ValueError("i_max must be >= 1")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        for b in self.bboxes:
            if len(b) != 6 or b[0] >= b[1] or b[2] >= b[3] or b[4] >= b[5]:
                raise ValueError(f"bounding box {b} must satisfy min < max per axis")


@dataclass
class MatchSet:
    """Reading-to-reference pairs with binary trim weights."""

    reading_indices: np.ndarray
    reference_indices: np.ndarray
    distances: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.reading_indices)

    @property
    def kept(self) -> np.ndarray:
        return self.weights == 1


@dataclass
class RegistrationResult:
    T_hat: RigidTransform
    reading_in_map: PointCloud
    iterations: int
    final_error: float
    converged: bool


def apply_input_filters(scan: PointCloud, cfg: RegistrationConfig) -> PointCloud:
    """Bounding-box removal, radius cut, then seeded random subsampling.

    Returns an empty cloud when nothing survives; the caller skips registration
    for that scan.
    """
    if len(scan) == 0:
        raise ValueError("input filter expects a non-empty scan")
    pts = scan.points
    keep = np.ones(len(pts), dtype=bool)
    for b in cfg.bboxes:
        inside = ((pts[:, 0] > b[0]) & (pts[:, 0] < b[1]) &
                  (pts[:, 1] > b[2]) & (pts[:, 1] < b[3]) &
                  (pts[:, 2] > b[4]) & (pts[:, 2] < b[5]))
        keep &= ~inside
    keep &= np.linalg.norm(pts, axis=1) <= cfg.r
    out = scan.select(keep)
    if cfg.eta_s < 1.0 and len(out):
        rng = np.random.default_rng([cfg.rng_seed, SUBSAMPLE_STREAM])
        out = out.select(rng.random(len(out)) < cfg.eta_s)
    return out


def match(reading_in_g: PointCloud, ref_index: SpatialIndex,
          cfg: RegistrationConfig) -> MatchSet:
    """Up to n_m neighbors within d_max per reading point, all weights 1.

    Pair order is canonical: sorted by (reading index, distance, reference index).
    """
    pts = reading_in_g.points
    if len(pts) == 0:
        return MatchSet(np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros(0), np.zeros(0, np.int8))
    k = min(cfg.n_m, len(ref_index))
    dist, idx = ref_index.tree.query(pts, k=k, eps=cfg.eps,
                                     distance_upper_bound=cfg.d_max)
    dist = np.atleast_2d(dist.reshape(len(pts), -1))
    idx = np.atleast_2d(idx.reshape(len(pts), -1))
    valid = np.isfinite(dist)
    rd_idx = np.broadcast_to(np.arange(len(pts))[:, None], dist.shape)[valid]
    rf_idx = idx[valid]
    d = dist[valid]
    order = np.lexsort((rf_idx, d, rd_idx))
    return MatchSet(rd_idx[order].astype(np.int64), rf_idx[order].astype(np.int64),
                    d[order], np.ones(len(d), dtype=np.int8))


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5))


def trim_outliers(m: MatchSet, eta_d: float) -> MatchSet:
    """Keep (weight 1) the round(eta_d * K) smallest-distance pairs.

    Ties at equal distance break by (reading index, reference index) ascending.
    """
    if len(m) == 0:
        raise ValueError("trim_outliers expects a non-empty match set")
    kept_count = _round_half_away(eta_d * len(m))
    order = np.lexsort((m.reference_indices, m.reading_indices, m.distances))
    weights = np.zeros(len(m), dtype=np.int8)
    weights[order[:kept_count]] = 1
    return MatchSet(m.reading_indices, m.reference_indices, m.distances, weights)


def _residuals(m: MatchSet, reading: PointCloud, reference: PointCloud):
    p = reading.points[m.reading_indices]
    q = reference.points[m.reference_indices]
    if reference.normals is None:
        raise MissingNormalError(m.reference_indices[0] if len(m) else -1)
    n = reference.normals[m.reference_indices]
    bad = ~np.isfinite(n).all(axis=1)
    if np.any(bad):
        raise MissingNormalError(m.reference_indices[np.argmax(bad)])
    return p, q, n, np.einsum("ij,ij->i", p - q, n)


def point_to_plane_error(m: MatchSet, reading: PointCloud,
                         reference: PointCloud) -> float:
    """Sum of w_k * ((p_k - q_k) . n_k)^2 over all pairs (squared form)."""
    _, _, _, res = _residuals(m, reading, reference)
    return float(np.sum(m.weights * res ** 2))


def minimize_step(m: MatchSet, reading: PointCloud, reference: PointCloud,
                  current: RigidTransform | None = None) -> RigidTransform:
    """Least-squares minimizer of the linearized point-to-plane residuals over
    (t_x, t_y, t_z, yaw); roll and pitch are identically zero.

    ``reading`` is in the map frame. When ``current`` is given, the increment is
    expressed in that transform's source frame (right-composition); otherwise the
    reading's own frame is used.
    """
    keep = m.kept
    if int(keep.sum()) < 4:
        raise DegenerateRegistration(
            f"need at least 4 weighted pairs, got {int(keep.sum())}")
    sub = MatchSet(m.reading_indices[keep], m.reference_indices[keep],
                   m.distances[keep], m.weights[keep])
    p_g, _, n, res = _residuals(sub, reading, reference)
    if current is None:
        rot = np.eye(3)
        p_local = p_g
    else:
        rot = current.rotation
        p_local = (p_g - current.translation) @ rot
    n_local = n @ rot  # rot^T applied row-wise
    yaw_col = np.einsum("ij,ij->i", np.cross(np.broadcast_to(_Z, p_local.shape),
                                             p_local), n_local)
    a = np.column_stack([n_local, yaw_col])
    b = -res
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[0] <= 0 or s[-1] < 1e-9 * s[0]:
        raise DegenerateRegistration(
            "normal system is rank deficient", null_direction=vt[-1])
    x = vt.T @ ((u.T @ b) / s)
    delta = RigidTransform.from_yaw(x[3], x[:3], from_frame="L", to_frame="L")
    if current is not None:
        delta = delta.retagged(current.from_frame, current.from_frame)
    return delta


def _delta_magnitudes(delta: RigidTransform):
    return float(np.linalg.norm(delta.translation)), abs(delta.yaw)


def register(reading: PointCloud, reference: PointCloud, prior: RigidTransform,
             cfg: RegistrationConfig, ref_index: SpatialIndex | None = None,
             prefiltered: bool = True) -> RegistrationResult:
    """Iterate match -> trim -> minimize from the prior until the differential
    update drops below (eps_t_min, eps_theta_min) or i_max is reached.

    ``prefiltered=False`` applies the input filters first. The returned cloud is
    the (filtered) reading expressed in the map frame.
    """
    if len(reference) == 0 or reference.normals is None:
        raise ValueError("reference must be non-empty and carry normals")
    if prior.from_frame != reading.frame or prior.to_frame != reference.frame:
        raise ValueError("prior frames must map reading frame to reference frame")
    if not prefiltered:
        reading = apply_input_filters(reading, cfg)
    if len(reading) == 0:
        raise RegistrationFailure("reading is empty after input filters")
    if ref_index is None:
        ref_index = build_index(reference)

    t = prior
    converged = False
    iterations = 0
    final_error = np.nan
    for iterations in range(1, cfg.i_max + 1):
        reading_g = transform_cloud(reading, t)
        m = match(reading_g, ref_index, cfg)
        if len(m) == 0:
            raise RegistrationFailure(
                f"empty match set at iteration {iterations}")
        m = trim_outliers(m, cfg.eta_d)
        err_before = point_to_plane_error(m, reading_g, reference)
        delta = minimize_step(m, reading_g, reference, current=t)
        # Halve the step while it would increase the objective on this match set
        # (keeps the per-iteration error monotone despite linearization).
        cand = t @ delta
        err_after = point_to_plane_error(
            m, transform_cloud(reading, cand), reference)
        for _ in range(8):
            if err_after <= err_before + 1e-12:
                break
            delta = RigidTransform.from_yaw(0.5 * delta.yaw, 0.5 * delta.translation,
                                            delta.from_frame, delta.to_frame)
            cand = t @ delta
            err_after = point_to_plane_error(
                m, transform_cloud(reading, cand), reference)
        t = cand
        final_error = err_after
        dt_norm, dyaw = _delta_magnitudes(delta)
        if dt_norm < cfg.eps_t_min and dyaw < cfg.eps_theta_min:
            converged = True
            break

    return RegistrationResult(
        T_hat=t,
        reading_in_map=transform_cloud(reading, t),
        iterations=iterations,
        final_error=final_error,
        converged=converged,
    )
