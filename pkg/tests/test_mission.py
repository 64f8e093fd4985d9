import hashlib

import numpy as np
import pytest

from trailnav.config import GlobalConfig
from trailnav.controller import ControllerConfig, Pose2D, Status
from trailnav.geom import FRAME_MAP, PointCloud, RigidTransform
from trailnav.mission import (MissionState, Phase, finalize_teach,
                              load_database, new_teach_state, repeat_step,
                              teach_step)
from trailnav.prior import PriorTrajectory
from trailnav.runner import (_prior_window, load_scan_log, run_repeat,
                             run_teach)
from trailnav.simworld import LidarParams, WorldParams, generate_world


def _small_cfg(seed=0):
    cfg = GlobalConfig(seed=seed)
    cfg.sim.lidar = LidarParams(beams=8, azimuth_steps=240, rate=5.0,
                                max_range=20.0, range_noise_sd=0.01)
    cfg.registration.r = 20.0
    cfg.mapping.r = 20.0
    cfg.mapping.v_s = 10.0
    cfg.mapping.rho = 0.15
    return cfg


def _small_world(seed=0, length=15.0):
    return generate_world(seed, WorldParams(
        trail_length=length, tree_density=0.05,
        extent=(-10.0, length + 10.0, -15.0, 15.0)))


@pytest.fixture(scope="module")
def taught(tmp_path_factory):
    cfg = _small_cfg()
    world = _small_world()
    out = tmp_path_factory.mktemp("db")
    result = run_teach(world, cfg, waypoints=[(15.0, 0.0)], out_dir=out,
                       v_teach=1.0)
    return world, cfg, result


def _stationary_tail(pose: RigidTransform, cfg) -> PriorTrajectory:
    return _prior_window(pose, 0.0, 1.0 / cfg.sim.lidar.rate,
                         cfg.prior.rate_hz, cfg.prior.beta, 0.0, 0.0)


def test_teach_bootstraps_empty_map(taught):
    world, cfg, _ = taught
    from trailnav.runner import _sensor_anchor
    from trailnav.simworld import RobotState, simulate_lidar
    state = new_teach_state(cfg.registration, cfg.mapping)
    rs = RobotState(pose=Pose2D(0.0, 0.0, 0.0))
    anchor = _sensor_anchor(world, rs, cfg.sim.lidar.mount_height)
    scan = simulate_lidar(world, rs.pose, cfg.sim.lidar, seed=0)
    teach_step(state, scan, _stationary_tail(anchor, cfg))
    assert state.map.local_point_count() > 100
    assert len(state.raw_poses) == 1
    # The bootstrap pose equals the prior anchor.
    assert np.allclose(state.raw_poses[0].translation, anchor.translation,
                       atol=1e-9)


def test_teach_produces_database(taught):
    world, cfg, result = taught
    db = result.db_dir
    assert (db / "manifest.json").exists()
    assert (db / "trajectory.csv").exists()
    vmap, traj = load_database(db)
    assert vmap.point_count() > 1000
    assert len(traj) >= 2
    # Reference poses honor the subsampling distance.
    gaps = np.linalg.norm(np.diff(traj.positions[:-1], axis=0), axis=1)
    assert np.all(gaps >= cfg.mission.d_ref - 1e-9)
    # The taught path ends near the waypoint.
    assert traj.positions[-1][0] == pytest.approx(15.0, abs=1.5)
    # Teach pose error vs ground truth stays small over the short trail.
    est_end = traj.positions[-1][:2]
    true_end = result.truth.positions[-1][:2]
    assert np.linalg.norm(est_end - true_end) < 0.5


def test_teach_is_deterministic(taught):
    world, cfg, result = taught
    again = run_teach(world, cfg, waypoints=[(15.0, 0.0)], v_teach=1.0)
    a = result.state.map.all_points_cloud().points
    b = again.state.map.all_points_cloud().points
    assert np.array_equal(np.sort(a.ravel()), np.sort(b.ravel()))
    pa = np.array([p.translation for p in result.state.raw_poses])
    pb = np.array([p.translation for p in again.state.raw_poses])
    assert np.array_equal(pa, pb)


def test_finalize_teach_subsampling_example(tmp_path):
    cfg = _small_cfg()
    state = new_teach_state(cfg.registration, cfg.mapping)
    from trailnav.mapping import insert_scan
    insert_scan(state.map, PointCloud(np.zeros((1, 3)), FRAME_MAP),
                [0, 0, 1.0], cfg.mapping.rho)
    # Raw poses every 1 cm; d_ref = 5 cm keeps every 5th plus the endpoint.
    for i in range(101):
        state.raw_stamps.append(0.1 * i)
        state.raw_poses.append(RigidTransform.from_yaw(
            0.0, [0.01 * i, 0.0, 0.0], "R", "G"))
    finalize_teach(state, 0.05, tmp_path / "db")
    traj = state.trajectory
    assert len(traj) == 21
    assert np.allclose(traj.positions[:3, 0], [0.0, 0.05, 0.10])
    assert traj.arc_length[-1] == pytest.approx(1.0, abs=1e-9)


def _chunk_digest(vmap):
    h = hashlib.sha256()
    for key in sorted(vmap.voxels):
        c = vmap.voxels[key]
        h.update(np.ascontiguousarray(c.points).tobytes())
        h.update(np.ascontiguousarray(c.dyn_prob).tobytes())
    return h.hexdigest()


def test_repeat_reaches_goal_and_map_stays_frozen(taught, tmp_path):
    world, cfg, result = taught
    vmap, traj = load_database(result.db_dir, spill_dir=tmp_path)
    before = _chunk_digest(vmap)
    rr = run_repeat(world, (vmap, traj), cfg,
                    start=Pose2D(0.2, 0.15, 0.05), max_ticks=400)
    assert rr.init.success
    assert rr.status is Status.GOAL_REACHED
    assert rr.mission.intervention_count == 0
    assert _chunk_digest(vmap) == before
    # The executed path hugs the taught reference.
    from trailnav.analysis import cross_track_series
    series = cross_track_series(rr.executed, traj)
    assert np.median(series.eps_ct) < 0.1
    # The run log carries one row per controlled tick.
    assert len(rr.log_rows) > 10
    assert rr.log_rows[-1].status == "goal_reached"


def test_init_corrects_small_start_offset(taught):
    world, cfg, result = taught
    vmap, traj = load_database(result.db_dir)
    rr = run_repeat(world, (vmap, traj), cfg,
                    start=Pose2D(0.3, 0.2, 0.05), max_ticks=1)
    assert rr.init.success
    assert rr.init.overlap > 60.0
    # Lateral and vertical correction are tight; the along-trail direction is
    # weakly constrained by the corridor, so only bound it loosely.
    true_sensor = np.array([0.3, 0.2, float(world.ground_height(0.3, 0.2)) +
                            cfg.sim.lidar.mount_height])
    delta = rr.init.pose.translation - true_sensor
    assert abs(delta[1]) < 0.05
    assert abs(delta[2]) < 0.05
    assert np.linalg.norm(delta) < 0.5


def test_init_fails_far_from_map(taught):
    world, cfg, result = taught
    vmap, traj = load_database(result.db_dir)
    rr = run_repeat(world, (vmap, traj), cfg,
                    start=Pose2D(40.0, 0.0, 0.0), max_ticks=1)
    assert not rr.init.success
    assert rr.init.overlap < cfg.mission.init_overlap_floor
    assert rr.status is None and rr.mission is None
    assert rr.init.reason != ""


def test_repeat_step_requires_phase_and_localization(taught):
    world, cfg, _ = taught
    state = new_teach_state(cfg.registration, cfg.mapping)
    with pytest.raises(ValueError):
        repeat_step(state, PointCloud(np.zeros((1, 3)), "L"),
                    None, ControllerConfig())
    state.phase = Phase.REPEAT
    state.localized = False
    with pytest.raises(ValueError):
        repeat_step(state, PointCloud(np.zeros((1, 3)), "L"),
                    None, ControllerConfig())


def test_scan_log_round_trip(taught, tmp_path):
    _, _, result = taught
    log = result.scan_log
    out = log.save(tmp_path / "scans")
    scans, imu, odom = load_scan_log(out)
    assert len(scans) == len(log.scans)
    assert len(imu) == len(log.imu)
    assert len(odom) == len(log.odom)
    assert scans[0][0] == log.scans[0][0]
    assert np.array_equal(scans[3][1].points, log.scans[3][1].points)
    assert np.array_equal(scans[3][1].timestamps, log.scans[3][1].timestamps)
    assert imu[5].stamp == log.imu[5].stamp
    assert odom[5].linear_speed == log.odom[5].linear_speed
