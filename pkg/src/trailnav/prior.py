"""High-frequency localization prior from IMU + wheel odometry, and scan deskewing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .geom import FRAME_LIDAR, FRAME_MAP, PointCloud, RigidTransform

GRAVITY = 9.81
DEFAULT_BETA = 0.1
DEFAULT_RATE_HZ = 100.0


class PriorCoverageError(ValueError):
    """A scan timestamp falls outside the prior trajectory window."""


@dataclass
class ImuSample:
    gyro: np.ndarray      # rad/s, body frame
    accel: np.ndarray     # m/s^2, body frame (specific force, +z up at rest)
    stamp: float

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=np.float64).reshape(3)
        self.accel = np.asarray(self.accel, dtype=np.float64).reshape(3)


@dataclass
class OdomSample:
    linear_speed: float   # m/s along robot x
    stamp: float


def _quat_normalize(q):
    return q / np.linalg.norm(q)


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_from_rotvec(v):
    angle = np.linalg.norm(v)
    if angle < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class OrientationState:
    """Unit quaternion (w, x, y, z) mapping body coordinates to world."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.quat = _quat_normalize(np.asarray(self.quat, dtype=np.float64).reshape(4))

    @property
    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    @property
    def yaw(self) -> float:
        m = self.matrix
        return float(np.arctan2(m[1, 0], m[0, 0]))

    @property
    def roll_pitch(self) -> tuple[float, float]:
        m = self.matrix
        pitch = float(np.arcsin(np.clip(-m[2, 0], -1.0, 1.0)))
        roll = float(np.arctan2(m[2, 1], m[2, 2]))
        return roll, pitch


def update_orientation(state: OrientationState, imu: ImuSample, dt: float,
                       beta: float = DEFAULT_BETA) -> OrientationState:
    """One complementary-filter step: gyro integration plus gravity tilt correction.

    The tilt correction is applied about a horizontal world axis only, so yaw is
    driven purely by the gyro. A zero-norm accelerometer sample skips the
    correction step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    q = state.quat
    # Body-frame gyro integration (right-multiplicative).
    q = _quat_mul(q, _quat_from_rotvec(imu.gyro * dt))
    a_norm = np.linalg.norm(imu.accel)
    if a_norm > 1e-12:
        a_hat = imu.accel / a_norm
        up_world = _quat_to_matrix(q) @ a_hat           # measured up, world frame
        err = np.cross(up_world, np.array([0.0, 0.0, 1.0]))  # z component is zero
        q = _quat_mul(_quat_from_rotvec(beta * dt * err), q)
    return OrientationState(_quat_normalize(q))


@dataclass
class PriorTrajectory:
    """Ordered (stamp, pose L->G) samples at the IMU rate."""

    stamps: np.ndarray
    translations: np.ndarray   # (n, 3)
    quats: np.ndarray          # (n, 4) wxyz

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=np.float64).reshape(-1)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        if not (len(self.stamps) == len(self.translations) == len(self.quats)):
            raise ValueError("stamps, translations and quats must have equal length")
        if len(self.stamps) > 1 and np.any(np.diff(self.stamps) <= 0):
            raise ValueError("stamps must be strictly increasing")

    def __len__(self):
        return len(self.stamps)

    def pose_at_index(self, i: int) -> RigidTransform:
        return RigidTransform(_quat_to_matrix(self.quats[i]), self.translations[i],
                              FRAME_LIDAR, FRAME_MAP)

    @property
    def samples(self):
        return [(float(self.stamps[i]), self.pose_at_index(i)) for i in range(len(self))]

    def tail(self, t_from: float) -> "PriorTrajectory":
        """Samples covering [t_from, end], including the sample just before t_from."""
        i = int(np.searchsorted(self.stamps, t_from, side="right")) - 1
        i = max(i, 0)
        return PriorTrajectory(self.stamps[i:], self.translations[i:], self.quats[i:])


class PriorIntegrator:
    """Accumulates the 100 Hz prior: orientation filter + odometry dead reckoning."""

    def __init__(self, start_stamp: float = 0.0, start_position=(0.0, 0.0, 0.0),
                 start_orientation: OrientationState | None = None,
                 beta: float = DEFAULT_BETA):
        self.beta = beta
        self.orientation = start_orientation or OrientationState()
        self.position = np.asarray(start_position, dtype=np.float64).copy()
        self._stamps = [start_stamp]
        self._translations = [self.position.copy()]
        self._quats = [self.orientation.quat.copy()]

    def step(self, imu: ImuSample, odom: OdomSample, dt: float) -> RigidTransform:
        self.orientation = update_orientation(self.orientation, imu, dt, self.beta)
        pose = integrate_prior(self.position, odom, self.orientation, dt)
        self.position = pose.translation.copy()
        self._stamps.append(imu.stamp)
        self._translations.append(self.position.copy())
        self._quats.append(self.orientation.quat.copy())
        return pose

    def trajectory(self) -> PriorTrajectory:
        return PriorTrajectory(np.array(self._stamps), np.array(self._translations),
                               np.array(self._quats))


def integrate_prior(position, odom: OdomSample, orientation: OrientationState,
                    dt: float) -> RigidTransform:
    """Advance the pose along the orientation's forward axis by linear_speed * dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    rot = orientation.matrix
    new_pos = np.asarray(position, dtype=np.float64) + odom.linear_speed * dt * rot[:, 0]
    return RigidTransform(rot, new_pos, FRAME_LIDAR, FRAME_MAP)


def _interp_poses(prior: PriorTrajectory, times: np.ndarray):
    """Linear translation / slerp rotation interpolation at the given times."""
    trans = np.column_stack([
        np.interp(times, prior.stamps, prior.translations[:, i]) for i in range(3)
    ])
    if len(prior) == 1:
        rots = Rotation.from_quat(np.tile(prior.quats[0][[1, 2, 3, 0]], (len(times), 1)))
    else:
        key = Rotation.from_quat(prior.quats[:, [1, 2, 3, 0]])  # to xyzw
        rots = Slerp(prior.stamps, key)(times)
    return trans, rots


def deskew(scan: PointCloud, prior: PriorTrajectory) -> PointCloud:
    """Re-express every point in the lidar pose at the scan-end stamp.

    p' = T(t_end)^-1 . T(t_point) . p with translation interpolated linearly and
    rotation spherically between prior samples.
    """
    if scan.timestamps is None:
        raise ValueError("deskew requires per-point timestamps")
    if len(scan) == 0:
        return scan.copy()
    ts = scan.timestamps
    lo, hi = prior.stamps[0], prior.stamps[-1]
    bad = (ts < lo) | (ts > hi)
    if np.any(bad):
        t_bad = float(ts[np.argmax(bad)])
        raise PriorCoverageError(
            f"point stamp {t_bad} outside prior coverage [{lo}, {hi}]")
    t_end = float(ts.max())
    trans, rots = _interp_poses(prior, np.append(ts, t_end))
    rot_end = rots[-1]
    trans_end = trans[-1]
    # World-frame point at its own stamp, then back into the scan-end frame.
    world = rots[:-1].apply(scan.points) + trans[:-1]
    pts = rot_end.inv().apply(world - trans_end)
    out = scan.copy()
    out.points = pts
    out.timestamps = np.full(len(scan), t_end)
    if out.normals is not None:
        rel = (rot_end.inv() * rots[:-1])
        out.normals = rel.apply(scan.normals)
    return out


def load_imu_csv(path) -> list[ImuSample]:
    """CSV format: stamp,gx,gy,gz,ax,ay,az."""
    samples = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "stamp":
                continue
            vals = [float(v) for v in row]
            samples.append(ImuSample(gyro=vals[1:4], accel=vals[4:7], stamp=vals[0]))
    return samples


def load_odom_csv(path) -> list[OdomSample]:
    """CSV format: stamp,v."""
    samples = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "stamp":
                continue
            samples.append(OdomSample(linear_speed=float(row[1]), stamp=float(row[0])))
    return samples
