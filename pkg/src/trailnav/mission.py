"""Teach/repeat orchestration: teach builds the map and reference trajectory,
repeat localizes in the frozen map and drives the path follower."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import scan_overlap
from .controller import (Command, ControllerConfig, Pose2D, Status,
                         check_termination, compute_command, project_onto_path)
from .geom import PointCloud, RigidTransform, build_index, transform_cloud
from .icp import (RegistrationConfig, RegistrationFailure,
                  DegenerateRegistration, apply_input_filters, register)
from .mapping import (MappingConfig, VoxelMap, filter_dynamic, insert_scan,
                      load_map, refresh_normals, retile, save_map)
from .prior import PriorTrajectory, deskew
from .trajectory import ReferenceTrajectory, subsample_by_distance

INIT_OVERLAP_THRESHOLD = 0.5   # m, overlap distance used at localization init
DEFAULT_OVERLAP_FLOOR = 40.0   # %


class Phase(enum.Enum):
    TEACH = "teach"
    REPEAT = "repeat"


class TeachAbort(RuntimeError):
    """Registration failed during teach; carries the scan id and last good pose."""

    def __init__(self, msg, scan_id, last_pose):
        super().__init__(msg)
        self.scan_id = scan_id
        self.last_pose = last_pose


class MissionAbort(RuntimeError):
    """A mission-level failure (localization init, safety abort) for callers
    that want an exception rather than a status."""


@dataclass
class MissionState:
    phase: Phase
    map: VoxelMap
    reg_cfg: RegistrationConfig
    map_cfg: MappingConfig
    trajectory: ReferenceTrajectory | None = None
    current_pose: RigidTransform | None = None
    localized: bool = False
    intervention_count: int = 0
    scan_count: int = 0
    raw_stamps: list = field(default_factory=list)
    raw_poses: list = field(default_factory=list)
    # Registration-reference cache, keyed on the map's internal cache identity;
    # avoids rebuilding the kd-tree every tick while the map is unchanged.
    _ref_token: object = None
    _ref_cloud: PointCloud | None = None
    _ref_index: object = None


@dataclass
class InitResult:
    success: bool
    pose: RigidTransform | None
    overlap: float
    reason: str = ""


@dataclass
class RepeatStepResult:
    command: Command | None
    status: Status
    frenet: object = None
    pose: RigidTransform | None = None
    skipped: bool = False


def new_teach_state(reg_cfg: RegistrationConfig, map_cfg: MappingConfig,
                    spill_dir=None) -> MissionState:
    return MissionState(phase=Phase.TEACH, map=VoxelMap(map_cfg.v_s, spill_dir),
                        reg_cfg=reg_cfg, map_cfg=map_cfg)


def new_repeat_state(vmap: VoxelMap, trajectory: ReferenceTrajectory,
                     reg_cfg: RegistrationConfig, map_cfg: MappingConfig,
                     pose: RigidTransform) -> MissionState:
    return MissionState(phase=Phase.REPEAT, map=vmap, reg_cfg=reg_cfg,
                        map_cfg=map_cfg, trajectory=trajectory,
                        current_pose=pose, localized=True)


def _localize(state: MissionState, scan: PointCloud,
              prior_tail: PriorTrajectory):
    """Deskew, filter, register against the local map. Returns
    (T_hat, reading_in_map) or (prior pose, None) when the filtered scan is
    empty (skip signal)."""
    scan_d = deskew(scan, prior_tail)
    filtered = apply_input_filters(scan_d, state.reg_cfg)
    prior_pose = prior_tail.pose_at_index(len(prior_tail) - 1)
    if len(filtered) == 0:
        return prior_pose, None
    if state.map.local_point_count() == 0:
        return prior_pose, transform_cloud(filtered, prior_pose)
    state.map._local_arrays()
    if state._ref_token is not state.map._cache or state._ref_cloud is None:
        reference = state.map.local_cloud()
        if reference.normals is None:
            raise RegistrationFailure("local map has no usable normals")
        state._ref_token = state.map._cache
        state._ref_cloud = reference
        state._ref_index = build_index(reference)
    result = register(filtered, state._ref_cloud, prior_pose, state.reg_cfg,
                      ref_index=state._ref_index)
    return result.T_hat, result.reading_in_map


def teach_step(state: MissionState, scan: PointCloud,
               prior_tail: PriorTrajectory) -> MissionState:
    """One teach tick: deskew, filter, register against the local map, insert,
    dynamic-filter, retile; the registered pose joins the raw trajectory."""
    if state.phase is not Phase.TEACH:
        raise ValueError("teach_step requires the Teach phase")
    scan_id = state.scan_count
    state.scan_count += 1
    try:
        t_hat, reading_in_map = _localize(state, scan, prior_tail)
    except (RegistrationFailure, DegenerateRegistration) as exc:
        raise TeachAbort(f"teach registration failed on scan {scan_id}: {exc}",
                         scan_id=scan_id, last_pose=state.current_pose) from exc
    if reading_in_map is None:   # nothing survived the input filters
        return state
    sensor = t_hat.translation
    insert_scan(state.map, reading_in_map, sensor, state.map_cfg.rho)
    if state.map.last_inserted:
        refresh_normals(state.map, state.map_cfg, state.map.last_inserted)
    filter_dynamic(state.map, reading_in_map, sensor, state.map_cfg)
    retile(state.map, sensor, state.map_cfg)
    stamp = float(scan.timestamps.max()) if scan.timestamps is not None else 0.0
    state.raw_stamps.append(stamp)
    state.raw_poses.append(t_hat)
    state.current_pose = t_hat
    return state


def finalize_teach(state: MissionState, d_ref: float, out_dir) -> Path:
    """Subsample the raw trajectory (consecutive kept poses >= d_ref apart,
    endpoints always kept) and persist map + trajectory as a database."""
    if state.phase is not Phase.TEACH:
        raise ValueError("finalize_teach requires the Teach phase")
    if len(state.raw_poses) < 2:
        raise ValueError("finalize_teach needs at least 2 raw poses")
    positions = np.array([p.translation for p in state.raw_poses])
    idx = subsample_by_distance(positions, d_ref)
    trajectory = ReferenceTrajectory.from_poses(
        np.asarray(state.raw_stamps, dtype=np.float64)[idx],
        [state.raw_poses[i] for i in idx])
    out_dir = Path(out_dir)
    save_map(state.map, out_dir)
    trajectory.save_csv(out_dir / "trajectory.csv")
    state.trajectory = trajectory
    return out_dir


def load_database(db_dir, spill_dir=None):
    db_dir = Path(db_dir)
    vmap = load_map(db_dir, spill_dir=spill_dir)
    trajectory = ReferenceTrajectory.load_csv(db_dir / "trajectory.csv")
    return vmap, trajectory


def initialize_localization(vmap: VoxelMap, scan: PointCloud,
                            prior_tail: PriorTrajectory,
                            reg_cfg: RegistrationConfig,
                            overlap_floor: float = DEFAULT_OVERLAP_FLOOR,
                            threshold: float = INIT_OVERLAP_THRESHOLD) -> InitResult:
    """Register the first deskewed scan at the start prior; success requires
    convergence and scan overlap at or above the floor."""
    scan_d = deskew(scan, prior_tail)
    filtered = apply_input_filters(scan_d, reg_cfg)
    prior_pose = prior_tail.pose_at_index(len(prior_tail) - 1)
    if len(filtered) == 0:
        return InitResult(False, None, 0.0, "scan empty after input filters")
    reference = vmap.local_cloud()
    if reference.normals is None or len(reference) == 0:
        return InitResult(False, None, 0.0, "map has no usable normals")
    try:
        result = register(filtered, reference, prior_pose, reg_cfg)
    except (RegistrationFailure, DegenerateRegistration) as exc:
        return InitResult(False, None, 0.0, f"registration failed: {exc}")
    overlap = scan_overlap(result.reading_in_map, vmap, threshold)
    if not result.converged:
        return InitResult(False, result.T_hat, overlap,
                          f"no convergence in {result.iterations} iterations; "
                          f"overlap {overlap:.1f}%")
    if overlap < overlap_floor:
        return InitResult(False, result.T_hat, overlap,
                          f"overlap {overlap:.1f}% below floor {overlap_floor}%")
    return InitResult(True, result.T_hat, overlap)


def repeat_step(state: MissionState, scan: PointCloud,
                prior_tail: PriorTrajectory,
                ctrl_cfg: ControllerConfig) -> RepeatStepResult:
    """One repeat tick: localize in the frozen map (no insertion, no dynamic
    filtering; retile for locality only) and compute the next command."""
    if state.phase is not Phase.REPEAT:
        raise ValueError("repeat_step requires the Repeat phase")
    if not state.localized:
        raise ValueError("repeat_step requires an initialized localization")
    state.scan_count += 1
    try:
        t_hat, reading_in_map = _localize(state, scan, prior_tail)
    except (RegistrationFailure, DegenerateRegistration):
        state.intervention_count += 1
        return RepeatStepResult(None, Status.SAFETY_ABORT,
                                pose=state.current_pose)
    if reading_in_map is None:
        return RepeatStepResult(None, Status.CONTINUE, pose=state.current_pose,
                                skipped=True)
    retile(state.map, t_hat.translation, state.map_cfg)
    state.current_pose = t_hat
    pose2d = Pose2D(float(t_hat.translation[0]), float(t_hat.translation[1]),
                    t_hat.yaw)
    frenet = project_onto_path(pose2d, state.trajectory)
    status = check_termination(frenet, ctrl_cfg)
    if status is not Status.CONTINUE:
        return RepeatStepResult(Command(0.0, 0.0), status, frenet, t_hat)
    cmd = compute_command(frenet, ctrl_cfg)
    # Re-assert the clamps at the mission boundary.
    cmd = Command(float(np.clip(cmd.v_x, 0.0, ctrl_cfg.v_max)),
                  float(np.clip(cmd.omega, -ctrl_cfg.omega_m, ctrl_cfg.omega_m)))
    return RepeatStepResult(cmd, status, frenet, t_hat)
