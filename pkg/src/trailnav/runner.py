"""Closed-loop simulation drivers: scripted teach runs, autonomous repeat runs,
and replay of logged scan sequences. Glues the simulator, prior integration,
the teach/repeat mission, and run logging together."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GlobalConfig
from .controller import Pose2D, Status, wrap_angle
from .geom import RigidTransform
from .mission import (InitResult, MissionState, RepeatStepResult, finalize_teach,
                      initialize_localization, load_database, new_repeat_state,
                      new_teach_state, repeat_step, teach_step)
from .npcd import read_npcd, write_npcd
from .prior import (GRAVITY, ImuSample, OdomSample, OrientationState,
                    PriorIntegrator, PriorTrajectory, load_imu_csv,
                    load_odom_csv)
from .simworld import LidarParams, RobotState, World, simulate_lidar, step_robot
from .trajectory import ReferenceTrajectory

RUN_LOG_HEADER = ["stamp", "x", "y", "theta", "x_n", "d_g", "v_x", "omega",
                  "status"]


@dataclass
class LogRow:
    stamp: float
    x: float
    y: float
    theta: float
    x_n: float
    d_g: float
    v_x: float
    omega: float
    status: str


def save_run_log(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_LOG_HEADER)
        for r in rows:
            w.writerow([repr(float(v)) for v in
                        (r.stamp, r.x, r.y, r.theta, r.x_n, r.d_g, r.v_x,
                         r.omega)] + [r.status])


@dataclass
class ScanLog:
    """Accumulates raw scans plus IMU/odometry streams for later replay."""

    scans: list = field(default_factory=list)        # (stamp, PointCloud)
    imu: list = field(default_factory=list)          # ImuSample
    odom: list = field(default_factory=list)         # OdomSample

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "scans.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stamp", "file"])
            for i, (stamp, scan) in enumerate(self.scans):
                name = f"scan_{i:05d}.npcd"
                write_npcd(out_dir / name, scan)
                w.writerow([repr(float(stamp)), name])
        with open(out_dir / "imu.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stamp", "gx", "gy", "gz", "ax", "ay", "az"])
            for s in self.imu:
                w.writerow([repr(float(v)) for v in
                            (s.stamp, *s.gyro, *s.accel)])
        with open(out_dir / "odom.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stamp", "v"])
            for s in self.odom:
                w.writerow([repr(float(s.stamp)), repr(float(s.linear_speed))])
        return out_dir


def load_scan_log(scans_dir):
    """Read a logged run back: [(stamp, scan)], imu samples, odom samples."""
    scans_dir = Path(scans_dir)
    scans = []
    with open(scans_dir / "scans.csv", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "stamp":
                continue
            scans.append((float(row[0]),
                          read_npcd(scans_dir / row[1], frame="L")))
    imu = load_imu_csv(scans_dir / "imu.csv")
    odom = load_odom_csv(scans_dir / "odom.csv")
    return scans, imu, odom


# -- true-motion rollout and simulated sensing --------------------------------


def _rollout(world: World, state: RobotState, v: float, omega: float,
             slip_rot: float, period: float, n_sub: int = 20):
    """Integrate the true motion over one scan period with fine substeps.

    Returns (pose_fn over absolute time, final RobotState); pose_fn
    interpolates the substep poses (heading unwrapped)."""
    dt = period / n_sub
    times = [state.stamp]
    xs = [state.pose.x]
    ys = [state.pose.y]
    ths = [state.pose.theta_r]
    s = state
    for _ in range(n_sub):
        s = step_robot(world, s, (v, omega), dt, slip_rot)
        times.append(s.stamp)
        xs.append(s.pose.x)
        ys.append(s.pose.y)
        ths.append(s.pose.theta_r)
    times = np.array(times)
    xs = np.array(xs)
    ys = np.array(ys)
    ths = np.unwrap(np.array(ths))

    def pose_fn(t):
        return (float(np.interp(t, times, xs)), float(np.interp(t, times, ys)),
                float(np.interp(t, times, ths)))

    return pose_fn, s


def _yaw_orientation(yaw: float) -> OrientationState:
    half = 0.5 * yaw
    return OrientationState(np.array([np.cos(half), 0.0, 0.0, np.sin(half)]))


def _prior_window(anchor: RigidTransform, t0: float, period: float,
                  rate_hz: float, beta: float, gyro_z: float, speed: float,
                  log: ScanLog | None = None) -> PriorTrajectory:
    """Integrate the IMU/odometry prior over one scan window, anchored at the
    last registered pose. Simulated IMU: planar motion, gravity along +z."""
    n = max(int(round(rate_hz * period)), 1)
    dt = period / n
    integ = PriorIntegrator(start_stamp=t0, start_position=anchor.translation,
                            start_orientation=_yaw_orientation(anchor.yaw),
                            beta=beta)
    for i in range(1, n + 1):
        imu = ImuSample(gyro=(0.0, 0.0, gyro_z), accel=(0.0, 0.0, GRAVITY),
                        stamp=t0 + i * dt)
        odom = OdomSample(linear_speed=speed, stamp=t0 + i * dt)
        integ.step(imu, odom, dt)
        if log is not None:
            log.imu.append(imu)
            log.odom.append(odom)
    return integ.trajectory()


def _sensor_anchor(world: World, state: RobotState,
                   mount_height: float) -> RigidTransform:
    z = float(world.ground_height(state.pose.x, state.pose.y)) + mount_height
    return RigidTransform.from_yaw(state.pose.theta_r,
                                   [state.pose.x, state.pose.y, z],
                                   from_frame="L", to_frame="G")


# -- teach --------------------------------------------------------------------


@dataclass
class TeachRunResult:
    state: MissionState
    db_dir: Path | None
    truth: ReferenceTrajectory
    scan_log: ScanLog


def _waypoint_command(pose: Pose2D, waypoint, v_teach: float):
    bearing = float(np.arctan2(waypoint[1] - pose.y, waypoint[0] - pose.x))
    err = wrap_angle(bearing - pose.theta_r)
    omega = float(np.clip(2.0 * err, -1.0, 1.0))
    v = v_teach if abs(err) < 0.8 else 0.3 * v_teach
    return v, omega


def run_teach(world: World, cfg: GlobalConfig, waypoints,
              out_dir=None, start: Pose2D | None = None,
              v_teach: float = 1.0, wp_tol: float = 1.0,
              max_ticks: int = 5000) -> TeachRunResult:
    """Drive the scripted waypoint follower (using ground-truth pose) while the
    teach pipeline builds the map; optionally persist the database to out_dir."""
    waypoints = [np.asarray(w, dtype=np.float64)[:2] for w in waypoints]
    if not waypoints:
        raise ValueError("run_teach needs at least one waypoint")
    lp = cfg.sim.lidar
    period = 1.0 / lp.rate
    if start is None:
        start = Pose2D(0.0, 0.0, 0.0)
    state = RobotState(pose=start,
                       z=float(world.ground_height(start.x, start.y)))
    mission = new_teach_state(cfg.registration, cfg.mapping)
    log = ScanLog()
    truth_stamps = []
    truth_poses = []
    wp_i = 0
    anchor = _sensor_anchor(world, state, lp.mount_height)

    for tick in range(max_ticks):
        if wp_i >= len(waypoints):
            break
        v, omega = _waypoint_command(state.pose, waypoints[wp_i], v_teach)
        t0 = state.stamp
        pose_fn, next_state = _rollout(world, state, v, omega,
                                       cfg.sim.slip_rot, period)
        scan = simulate_lidar(world, pose_fn, lp, seed=(cfg.seed, tick), t0=t0)
        log.scans.append((t0, scan))
        tail = _prior_window(anchor, t0, period, cfg.prior.rate_hz,
                             cfg.prior.beta, omega * (1.0 - cfg.sim.slip_rot),
                             v, log)
        teach_step(mission, scan, tail)
        if mission.current_pose is not None:
            anchor = mission.current_pose
        state = next_state
        truth_stamps.append(state.stamp)
        truth_poses.append(_sensor_anchor(world, state, lp.mount_height)
                           .retagged("R", "G"))
        if np.hypot(state.pose.x - waypoints[wp_i][0],
                    state.pose.y - waypoints[wp_i][1]) < wp_tol:
            wp_i += 1

    db_dir = None
    if out_dir is not None:
        db_dir = finalize_teach(mission, cfg.mission.d_ref, out_dir)
    truth = ReferenceTrajectory.from_poses(truth_stamps, truth_poses)
    return TeachRunResult(state=mission, db_dir=db_dir, truth=truth,
                          scan_log=log)


# -- repeat -------------------------------------------------------------------


@dataclass
class RepeatRunResult:
    status: Status | None
    init: InitResult
    mission: MissionState | None
    log_rows: list
    executed: ReferenceTrajectory | None
    truth: ReferenceTrajectory | None


def run_repeat(world: World, database, cfg: GlobalConfig,
               start: Pose2D, reverse: bool = False,
               max_ticks: int = 5000, scan_seed_base: int = 10_000,
               spill_dir=None) -> RepeatRunResult:
    """Autonomous repeat of a taught database in the given (possibly changed)
    world. ``database`` is a directory path or a (VoxelMap, trajectory) pair."""
    if isinstance(database, (str, Path)):
        vmap, trajectory = load_database(database, spill_dir=spill_dir)
    else:
        vmap, trajectory = database
    if reverse:
        trajectory = trajectory.reversed()
    lp = cfg.sim.lidar
    period = 1.0 / lp.rate
    state = RobotState(pose=start,
                       z=float(world.ground_height(start.x, start.y)))
    anchor = _sensor_anchor(world, state, lp.mount_height)

    # Localization init on a stationary scan at the start pose.
    scan0 = simulate_lidar(world, state.pose, lp,
                           seed=(cfg.seed, scan_seed_base), t0=state.stamp)
    tail0 = _prior_window(anchor, state.stamp, period, cfg.prior.rate_hz,
                          cfg.prior.beta, 0.0, 0.0)
    init = initialize_localization(vmap, scan0, tail0, cfg.registration,
                                   cfg.mission.init_overlap_floor)
    if not init.success:
        return RepeatRunResult(status=None, init=init, mission=None,
                               log_rows=[], executed=None, truth=None)

    mission = new_repeat_state(vmap, trajectory, cfg.registration, cfg.mapping,
                               init.pose)
    anchor = init.pose
    state = RobotState(pose=state.pose, z=state.z, stamp=state.stamp + period)
    v_cmd, om_cmd = 0.0, 0.0
    rows = []
    exec_stamps, exec_poses = [], []
    truth_stamps, truth_poses = [], []
    status = Status.CONTINUE

    for tick in range(max_ticks):
        t0 = state.stamp
        pose_fn, next_state = _rollout(world, state, v_cmd, om_cmd,
                                       cfg.sim.slip_rot, period)
        scan = simulate_lidar(world, pose_fn, lp,
                              seed=(cfg.seed, scan_seed_base + 1 + tick), t0=t0)
        tail = _prior_window(anchor, t0, period, cfg.prior.rate_hz,
                             cfg.prior.beta,
                             om_cmd * (1.0 - cfg.sim.slip_rot), v_cmd)
        step: RepeatStepResult = repeat_step(mission, scan, tail,
                                             cfg.path_following)
        state = next_state
        status = step.status
        if step.pose is not None and not step.skipped:
            anchor = step.pose
            exec_stamps.append(state.stamp)
            exec_poses.append(step.pose.retagged("R", "G"))
            truth_stamps.append(state.stamp)
            truth_poses.append(_sensor_anchor(world, state, lp.mount_height)
                               .retagged("R", "G"))
        if step.frenet is not None:
            cmd = step.command
            rows.append(LogRow(
                stamp=state.stamp,
                x=float(step.pose.translation[0]),
                y=float(step.pose.translation[1]),
                theta=step.pose.yaw,
                x_n=step.frenet.x_n, d_g=step.frenet.d_g,
                v_x=0.0 if cmd is None else cmd.v_x,
                omega=0.0 if cmd is None else cmd.omega,
                status=step.status.value))
        if status is not Status.CONTINUE:
            break
        if step.command is not None:
            v_cmd, om_cmd = step.command.v_x, step.command.omega
    else:
        status = Status.SAFETY_ABORT

    executed = (ReferenceTrajectory.from_poses(exec_stamps, exec_poses)
                if len(exec_poses) >= 2 else None)
    truth = (ReferenceTrajectory.from_poses(truth_stamps, truth_poses)
             if len(truth_poses) >= 2 else None)
    return RepeatRunResult(status=status, init=init, mission=mission,
                           log_rows=rows, executed=executed, truth=truth)


# -- replay -------------------------------------------------------------------


def run_replay(scans_dir, cfg: GlobalConfig, out_dir) -> Path:
    """Run a logged scan sequence back through the teach pipeline, rebuilding
    the prior from the logged IMU/odometry streams, and persist a database."""
    scans, imu, odom = load_scan_log(scans_dir)
    if not scans:
        raise ValueError(f"no scans found in {scans_dir}")
    integ = PriorIntegrator(start_stamp=min(s.stamp for s in imu) - 1e-6,
                            beta=cfg.prior.beta)
    odom_stamps = np.array([o.stamp for o in odom])
    odom_speeds = np.array([o.linear_speed for o in odom])
    prev = integ.trajectory().stamps[0]
    for s in imu:
        dt = s.stamp - prev
        if dt <= 0:
            continue
        speed = float(np.interp(s.stamp, odom_stamps, odom_speeds))
        integ.step(s, OdomSample(speed, s.stamp), dt)
        prev = s.stamp
    prior = integ.trajectory()
    mission = new_teach_state(cfg.registration, cfg.mapping)
    for stamp, scan in scans:
        teach_step(mission, scan, prior.tail(stamp))
    return finalize_teach(mission, cfg.mission.d_ref, out_dir)
