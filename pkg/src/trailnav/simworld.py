"""Deterministic synthetic subarctic-forest world: procedural terrain, tree and
building primitives, skid-steer kinematics, ray-cast lidar with intrascan motion,
snowfall noise, and heterogeneous snow accumulation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .controller import Pose2D, wrap_angle
from .geom import FRAME_LIDAR, PointCloud

# Ground-truth point class labels carried in PointCloud.labels.
CLASS_GROUND = 1
CLASS_VEGETATION = 2
CLASS_BUILDING = 3
CLASS_DYNAMIC = 4
CLASS_SNOWFALL = 5

_STREAM_TERRAIN = 11
_STREAM_TREES = 12
_STREAM_FOLIAGE = 13
_STREAM_NOISE = 14
_STREAM_SNOWFALL = 15


def _rng(seed, stream):
    """Named sub-stream RNG; seed may be an int or a sequence of ints."""
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(entropy + [stream])


@dataclass
class LidarParams:
    beams: int = 16
    azimuth_steps: int = 900
    rate: float = 10.0           # Hz
    max_range: float = 80.0      # m
    range_noise_sd: float = 0.02  # m
    fov_low_deg: float = -15.0
    fov_high_deg: float = 15.0
    mount_height: float = 1.3    # sensor height above local ground (m)

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.azimuth_steps < 1:
            raise ValueError("azimuth_steps must be >= 1")


@dataclass
class WorldParams:
    trail_width: float = 4.5
    trail_length: float = 200.0
    tree_density: float = 0.03           # trees per m^2
    extent: tuple | None = None          # (xmin, xmax, ymin, ymax)
    cell: float = 1.0                    # heightfield cell size (m)
    terrain_amplitude: float = 0.5
    terrain_scale: float = 25.0          # dominant undulation wavelength (m)
    centerline: list | None = None       # [(x, y), ...]; default straight +x
    buildings: list = field(default_factory=list)  # (cx, cy, sx, sy, height)
    clearing_center: tuple | None = None
    clearing_radius: float = 0.0
    canopy_porosity: float = 0.3
    trunk_height: tuple = (2.0, 5.0)
    trunk_radius: tuple = (0.12, 0.3)
    foliage_radius: tuple = (1.0, 2.5)
    foliage_jitter_sd: float = 0.08      # radial blob texture (m)

    def __post_init__(self):
        if self.trail_width <= 0 or self.trail_length <= 0:
            raise ValueError("trail width and length must be positive")
        if self.tree_density < 0:
            raise ValueError("tree density must be >= 0")

    def resolved_centerline(self) -> np.ndarray:
        if self.centerline is not None:
            line = np.asarray(self.centerline, dtype=np.float64).reshape(-1, 2)
            if len(line) < 2:
                raise ValueError("centerline needs at least 2 points")
            return line
        return np.array([[0.0, 0.0], [self.trail_length, 0.0]])

    def resolved_extent(self) -> tuple:
        if self.extent is not None:
            return tuple(float(v) for v in self.extent)
        line = self.resolved_centerline()
        margin = 40.0
        return (float(line[:, 0].min() - margin), float(line[:, 0].max() + margin),
                float(line[:, 1].min() - margin), float(line[:, 1].max() + margin))


@dataclass
class Heightfield:
    x0: float
    y0: float
    cell: float
    grid: np.ndarray   # (ny, nx) node heights

    def sample(self, x, y):
        """Bilinear height; coordinates outside the grid clamp to the border."""
        gx = np.clip((np.asarray(x) - self.x0) / self.cell, 0.0,
                     self.grid.shape[1] - 1.000001)
        gy = np.clip((np.asarray(y) - self.y0) / self.cell, 0.0,
                     self.grid.shape[0] - 1.000001)
        ix = gx.astype(np.int64)
        iy = gy.astype(np.int64)
        fx = gx - ix
        fy = gy - iy
        g = self.grid
        return ((g[iy, ix] * (1 - fx) + g[iy, ix + 1] * fx) * (1 - fy) +
                (g[iy + 1, ix] * (1 - fx) + g[iy + 1, ix + 1] * fx) * fy)


@dataclass
class Trees:
    xy: np.ndarray             # (t, 2) trunk centers
    trunk_radius: np.ndarray   # (t,)
    trunk_top: np.ndarray      # (t,) absolute z of trunk top
    base_z: np.ndarray         # (t,) ground level at the trunk
    foliage_center: np.ndarray  # (t, 3)
    foliage_radius: np.ndarray  # (t,)

    def __len__(self):
        return len(self.xy)


@dataclass
class Building:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    z_base: float
    z_top: float


@dataclass
class DynamicObject:
    """Moving box; position linearly interpolated along a waypoint schedule."""

    size: tuple                 # (sx, sy, height)
    schedule: np.ndarray        # (m, 3) rows of (stamp, x, y)

    def box_at(self, t: float, ground: Heightfield) -> Building:
        s = np.asarray(self.schedule, dtype=np.float64)
        x = float(np.interp(t, s[:, 0], s[:, 1]))
        y = float(np.interp(t, s[:, 0], s[:, 2]))
        zb = float(ground.sample(x, y))
        sx, sy, h = self.size
        return Building(x - sx / 2, x + sx / 2, y - sy / 2, y + sy / 2, zb, zb + h)


@dataclass
class World:
    ground: Heightfield
    trees: Trees
    buildings: list
    dynamic_objects: list
    seed: int
    params: WorldParams

    def ground_height(self, x, y):
        return self.ground.sample(x, y)


@dataclass
class RobotState:
    pose: Pose2D
    z: float = 0.0
    v: float = 0.0
    omega: float = 0.0
    stamp: float = 0.0


def _dist_to_polyline(pts: np.ndarray, line: np.ndarray) -> np.ndarray:
    """Distance of each 2D point to the polyline."""
    best = np.full(len(pts), np.inf)
    for a, b in zip(line[:-1], line[1:]):
        ab = b - a
        denom = max(float(ab @ ab), 1e-300)
        t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
        foot = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(pts - foot, axis=1))
    return best


def generate_world(seed: int, params: WorldParams) -> World:
    """Procedural forest with a cleared trail corridor; bitwise-reproducible
    from (seed, params)."""
    extent = params.resolved_extent()
    xmin, xmax, ymin, ymax = extent
    cell = params.cell
    nx = int(np.ceil((xmax - xmin) / cell)) + 1
    ny = int(np.ceil((ymax - ymin) / cell)) + 1

    rng_t = _rng(seed, _STREAM_TERRAIN)
    xs = xmin + cell * np.arange(nx)
    ys = ymin + cell * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.zeros((ny, nx))
    if params.terrain_amplitude > 0:
        for _ in range(6):
            wavelength = params.terrain_scale * rng_t.uniform(0.6, 1.8)
            phi = rng_t.uniform(0, 2 * np.pi)
            psi = rng_t.uniform(0, 2 * np.pi)
            amp = params.terrain_amplitude / 6.0 * rng_t.uniform(0.5, 1.5)
            k = 2 * np.pi / wavelength
            grid += amp * np.sin(k * (gx * np.cos(phi) + gy * np.sin(phi)) + psi)
    ground = Heightfield(xmin, ymin, cell, grid)

    rng_tr = _rng(seed, _STREAM_TREES)
    area = (xmax - xmin) * (ymax - ymin)
    count = int(rng_tr.poisson(params.tree_density * area))
    xy = np.column_stack([rng_tr.uniform(xmin, xmax, count),
                          rng_tr.uniform(ymin, ymax, count)])
    trunk_h = rng_tr.uniform(*params.trunk_height, count)
    trunk_r = rng_tr.uniform(*params.trunk_radius, count)
    fol_r = rng_tr.uniform(*params.foliage_radius, count)

    line = params.resolved_centerline()
    keep = _dist_to_polyline(xy, line) > params.trail_width / 2.0 + trunk_r
    if params.clearing_center is not None and params.clearing_radius > 0:
        c = np.asarray(params.clearing_center, dtype=np.float64)
        keep &= np.linalg.norm(xy - c, axis=1) > params.clearing_radius
    for spec in params.buildings:
        cx, cy, sx, sy, _ = spec
        inside = ((np.abs(xy[:, 0] - cx) < sx / 2 + 1.0) &
                  (np.abs(xy[:, 1] - cy) < sy / 2 + 1.0))
        keep &= ~inside
    xy, trunk_h, trunk_r, fol_r = xy[keep], trunk_h[keep], trunk_r[keep], fol_r[keep]

    base_z = np.asarray(ground.sample(xy[:, 0], xy[:, 1]), dtype=np.float64)
    trees = Trees(
        xy=xy, trunk_radius=trunk_r, trunk_top=base_z + trunk_h, base_z=base_z,
        foliage_center=np.column_stack([xy, base_z + trunk_h]),
        foliage_radius=fol_r,
    )

    buildings = []
    for cx, cy, sx, sy, h in params.buildings:
        zb = float(ground.sample(cx, cy))
        buildings.append(Building(cx - sx / 2, cx + sx / 2, cy - sy / 2,
                                  cy + sy / 2, zb, zb + h))

    return World(ground=ground, trees=trees, buildings=buildings,
                 dynamic_objects=[], seed=seed, params=params)


def step_robot(world: World, state: RobotState, u, dt: float,
               slip_rot: float = 0.0) -> RobotState:
    """Unicycle step with a rotational slip efficiency factor; elevation tracks
    the heightfield."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, omega = (u.v_x, u.omega) if hasattr(u, "v_x") else (u[0], u[1])
    x = state.pose.x + v * np.cos(state.pose.theta_r) * dt
    y = state.pose.y + v * np.sin(state.pose.theta_r) * dt
    theta = wrap_angle(state.pose.theta_r + omega * (1.0 - slip_rot) * dt)
    return RobotState(pose=Pose2D(x, y, theta), z=float(world.ground_height(x, y)),
                      v=v, omega=omega, stamp=state.stamp + dt)


# -- ray casting -------------------------------------------------------------


def _ray_ground(origins, dirs, ground: Heightfield, max_range,
                coarse_step=0.5, refine_iters=30):
    """First ray/heightfield crossing per ray via coarse march + bisection."""
    n_steps = max(int(np.ceil(max_range / coarse_step)) + 1, 2)
    ts = np.linspace(0.0, max_range, n_steps)
    px = origins[:, 0:1] + dirs[:, 0:1] * ts
    py = origins[:, 1:2] + dirs[:, 1:2] * ts
    pz = origins[:, 2:3] + dirs[:, 2:3] * ts
    below = pz < ground.sample(px, py)
    below[:, 0] = False  # sensor is above ground
    first = np.argmax(below, axis=1)
    hit = below[np.arange(len(first)), first]
    t_hit = np.full(len(origins), np.inf)
    rows = np.nonzero(hit)[0]
    if len(rows):
        t_lo = ts[first[rows] - 1]
        t_hi = ts[first[rows]]
        o = origins[rows]
        d = dirs[rows]
        for _ in range(refine_iters):
            t_mid = 0.5 * (t_lo + t_hi)
            p = o + d * t_mid[:, None]
            under = p[:, 2] < ground.sample(p[:, 0], p[:, 1])
            t_hi = np.where(under, t_mid, t_hi)
            t_lo = np.where(under, t_lo, t_mid)
        t_hit[rows] = 0.5 * (t_lo + t_hi)
    return t_hit


def _ray_cylinders(origins, dirs, trees: Trees, max_range, t_min=0.05):
    """Nearest finite-cylinder (trunk) hit per ray."""
    best = np.full(len(origins), np.inf)
    ox, oy, oz = origins[:, 0], origins[:, 1], origins[:, 2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    for i in range(len(trees)):
        cx, cy = trees.xy[i]
        r = trees.trunk_radius[i]
        fx = ox - cx
        fy = oy - cy
        b = 2 * (fx * dx + fy * dy)
        c = fx * fx + fy * fy - r * r
        disc = b * b - 4 * a * c
        valid = (disc > 0) & (a > 1e-12)
        t = np.where(valid, (-b - np.sqrt(np.maximum(disc, 0.0))) /
                     np.where(a > 1e-12, 2 * a, 1.0), np.inf)
        z = oz + dz * t
        good = valid & (t > t_min) & (t < max_range) & \
            (z >= trees.base_z[i] - 0.5) & (z <= trees.trunk_top[i])
        best = np.where(good & (t < best), t, best)
    return best


def _ray_spheres(origins, dirs, centers, radii, max_range, t_min=0.05):
    """Two nearest sphere (foliage shell) entry hits per ray."""
    n = len(origins)
    best1 = np.full(n, np.inf)
    best2 = np.full(n, np.inf)
    for i in range(len(centers)):
        f = origins - centers[i]
        b = 2 * np.einsum("ij,ij->i", f, dirs)
        c = np.einsum("ij,ij->i", f, f) - radii[i] ** 2
        disc = b * b - 4 * c
        valid = disc > 0
        t = np.where(valid, (-b - np.sqrt(np.maximum(disc, 0.0))) / 2.0, np.inf)
        good = valid & (t > t_min) & (t < max_range)
        t = np.where(good, t, np.inf)
        closer = t < best1
        best2 = np.where(closer, best1, np.minimum(best2, t))
        best1 = np.where(closer, t, best1)
    return best1, best2


def _ray_boxes(origins, dirs, boxes, max_range, t_min=0.05):
    """Nearest axis-aligned box entry hit per ray (slab method)."""
    best = np.full(len(origins), np.inf)
    for bx in boxes:
        lo = np.array([bx.xmin, bx.ymin, bx.z_base])
        hi = np.array([bx.xmax, bx.ymax, bx.z_top])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origins) * inv
            t2 = (hi - origins) * inv
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        good = (t_near <= t_far) & (t_near > t_min) & (t_near < max_range)
        best = np.where(good & (t_near < best), t_near, best)
    return best


def simulate_lidar(world: World, pose_fn, lp: LidarParams, seed: int,
                   t0: float = 0.0) -> PointCloud:
    """One revolution of the spinning lidar, swept over the scan period.

    ``pose_fn`` maps an absolute time to the true planar robot pose (Pose2D or
    (x, y, yaw)); a constant pose may be passed directly. Points are expressed
    in the instantaneous sensor frame at their own timestamp (frame L, skewed),
    ordered beam-major / azimuth-minor.
    """
    period = 1.0 / lp.rate
    if not callable(pose_fn):
        const = pose_fn
        pose_fn = lambda _t: const  # noqa: E731

    az = 2 * np.pi * np.arange(lp.azimuth_steps) / lp.azimuth_steps
    col_times = t0 + period * np.arange(lp.azimuth_steps) / lp.azimuth_steps
    poses = [pose_fn(t) for t in col_times]
    poses = [(p.x, p.y, p.theta_r) if isinstance(p, Pose2D) else tuple(p)
             for p in poses]
    px = np.array([p[0] for p in poses])
    py = np.array([p[1] for p in poses])
    yaw = np.array([p[2] for p in poses])
    pz = np.asarray(world.ground_height(px, py)) + lp.mount_height

    elev = np.deg2rad(np.linspace(lp.fov_low_deg, lp.fov_high_deg, lp.beams))
    ce, se = np.cos(elev), np.sin(elev)
    # Sensor-frame directions (beams, az, 3).
    dir_local = np.stack([
        np.outer(ce, np.cos(az)),
        np.outer(ce, np.sin(az)),
        np.repeat(se[:, None], lp.azimuth_steps, axis=1),
    ], axis=-1)
    cy, sy = np.cos(yaw), np.sin(yaw)
    dir_world = np.empty_like(dir_local)
    dir_world[..., 0] = dir_local[..., 0] * cy - dir_local[..., 1] * sy
    dir_world[..., 1] = dir_local[..., 0] * sy + dir_local[..., 1] * cy
    dir_world[..., 2] = dir_local[..., 2]

    n = lp.beams * lp.azimuth_steps
    origins = np.tile(np.column_stack([px, py, pz]), (lp.beams, 1))
    dirs = dir_world.reshape(n, 3)
    dloc = dir_local.reshape(n, 3)
    times = np.tile(col_times, lp.beams)

    t_ground = _ray_ground(origins, dirs, world.ground, lp.max_range)
    t_trunk = _ray_cylinders(origins, dirs, world.trees, lp.max_range)
    boxes = list(world.buildings)
    dyn_start = len(boxes)
    boxes += [obj.box_at(t0, world.ground) for obj in world.dynamic_objects]
    t_building = _ray_boxes(origins, dirs, world.buildings, lp.max_range) \
        if world.buildings else np.full(n, np.inf)
    t_dynamic = _ray_boxes(origins, dirs, boxes[dyn_start:], lp.max_range) \
        if world.dynamic_objects else np.full(n, np.inf)

    t_solid = np.minimum.reduce([t_ground, t_trunk, t_building, t_dynamic])
    cls = np.select(
        [t_solid == t_dynamic, t_solid == t_building, t_solid == t_trunk],
        [CLASS_DYNAMIC, CLASS_BUILDING, CLASS_VEGETATION],
        default=CLASS_GROUND,
    )

    rng = _rng(seed, _STREAM_FOLIAGE)
    s1, s2 = _ray_spheres(origins, dirs, world.trees.foliage_center,
                          world.trees.foliage_radius, lp.max_range) \
        if len(world.trees) else (np.full(n, np.inf), np.full(n, np.inf))
    porosity = world.params.canopy_porosity
    draw1 = rng.random(n)
    draw2 = rng.random(n)
    jitter = rng.normal(0.0, world.params.foliage_jitter_sd, n)
    hit1 = (s1 < t_solid) & (draw1 >= porosity)
    hit2 = (~hit1) & (s2 < t_solid) & (draw2 >= porosity)
    t_hit = np.where(hit1, s1 + jitter, np.where(hit2, s2 + jitter, t_solid))
    cls = np.where(hit1 | hit2, CLASS_VEGETATION, cls)

    returned = np.isfinite(t_hit) & (t_hit <= lp.max_range)
    rng_noise = _rng(seed, _STREAM_NOISE)
    noise = rng_noise.normal(0.0, lp.range_noise_sd, n) if lp.range_noise_sd > 0 \
        else np.zeros(n)
    ranges = t_hit + noise

    pts = dloc[returned] * ranges[returned, None]
    return PointCloud(points=pts, frame=FRAME_LIDAR,
                      timestamps=times[returned],
                      labels=cls[returned].astype(np.int64))


def apply_snowfall(scan: PointCloud, particle_count: int, near_radius: float,
                   seed: int) -> PointCloud:
    """Append spurious returns uniformly distributed in a sphere around the
    sensor, with timestamps inside the scan window."""
    if particle_count < 0:
        raise ValueError("particle_count must be >= 0")
    if particle_count == 0:
        return scan.copy()
    rng = _rng(seed, _STREAM_SNOWFALL)
    v = rng.normal(size=(particle_count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    radii = near_radius * rng.random(particle_count) ** (1.0 / 3.0)
    pts = v * radii[:, None]
    if scan.timestamps is not None and len(scan):
        t_lo, t_hi = float(scan.timestamps.min()), float(scan.timestamps.max())
    else:
        t_lo = t_hi = 0.0
    ts = rng.uniform(t_lo, t_hi, particle_count) if t_hi > t_lo \
        else np.full(particle_count, t_lo)
    out = scan.copy()
    if out.labels is None:
        out.labels = np.zeros(len(out), dtype=np.int64)
    if out.timestamps is None:
        out.timestamps = np.zeros(len(out))
    out.points = np.vstack([out.points, pts])
    out.timestamps = np.concatenate([out.timestamps, ts])
    out.labels = np.concatenate([out.labels,
                                 np.full(particle_count, CLASS_SNOWFALL,
                                         dtype=np.int64)])
    if out.normals is not None or out.dyn_prob is not None:
        raise ValueError("snowfall injection expects a raw scan")
    return out


def accumulate_snow(world: World, depth: float, class_factors: dict) -> World:
    """Heterogeneous accumulation: ground raised by depth*factor('ground'),
    building tops by depth*factor('building'), foliage shells displaced outward
    by depth*factor('vegetation'). Returns a new world."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    fg = float(class_factors.get("ground", 0.0))
    fv = float(class_factors.get("vegetation", 0.0))
    fb = float(class_factors.get("building", 0.0))
    ground = Heightfield(world.ground.x0, world.ground.y0, world.ground.cell,
                         world.ground.grid + depth * fg)
    trees = Trees(
        xy=world.trees.xy.copy(),
        trunk_radius=world.trees.trunk_radius.copy(),
        trunk_top=world.trees.trunk_top.copy(),
        base_z=world.trees.base_z.copy(),
        foliage_center=world.trees.foliage_center.copy(),
        foliage_radius=world.trees.foliage_radius + depth * fv,
    )
    buildings = [Building(b.xmin, b.xmax, b.ymin, b.ymax, b.z_base,
                          b.z_top + depth * fb) for b in world.buildings]
    return World(ground=ground, trees=trees, buildings=buildings,
                 dynamic_objects=list(world.dynamic_objects), seed=world.seed,
                 params=world.params)


# -- world spec file ---------------------------------------------------------


def save_world_spec(path, seed: int, params: WorldParams) -> None:
    """Key-value text file from which the world regenerates deterministically."""
    lines = [f"seed = {json.dumps(seed)}"]
    for key, value in asdict(params).items():
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_world_spec(path):
    seed = None
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = json.loads(value.strip())
        if key == "seed":
            seed = int(value)
        else:
            fields[key] = value
    if seed is None:
        raise ValueError(f"{path}: world spec is missing a seed")
    if fields.get("extent") is not None:
        fields["extent"] = tuple(fields["extent"])
    if fields.get("clearing_center") is not None:
        fields["clearing_center"] = tuple(fields["clearing_center"])
    for tup in ("trunk_height", "trunk_radius", "foliage_radius"):
        if tup in fields:
            fields[tup] = tuple(fields[tup])
    if fields.get("buildings"):
        fields["buildings"] = [tuple(b) for b in fields["buildings"]]
    if fields.get("centerline") is not None:
        fields["centerline"] = [tuple(p) for p in fields["centerline"]]
    return seed, WorldParams(**fields)
