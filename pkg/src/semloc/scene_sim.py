"""Procedural labeled worlds and a gravity-aligned depth + semantics camera.

Worlds are built from axis-aligned boxes and vertical cylinders standing on
a labeled ground plane at z = 0, so every rendered pixel has an exact
analytic intersection.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Pose, body_pose, camera_pose, is_gravity_aligned, wrap_angle

# desk-scale label set
GROUND, ROAD, BUILDING, WALL, FENCE, POLE, VEGETATION, VEHICLE = range(1, 9)
LABEL_NAMES = ("ground", "road", "building", "wall", "fence", "pole", "vegetation", "vehicle")
N_LABELS = len(LABEL_NAMES)

SCENARIOS = ("Loop0", "Loop90", "Loop180", "CrossTime")
LAYOUTS = ("none", "loop", "cross", "straight")

FRAME_MAGIC = b"SVLF"
FRAME_VERSION = 1


class GenerationError(RuntimeError):
    pass


class TrajectoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectGroup:
    shape: str  # "box" or "cylinder"
    label: int
    count: tuple[int, int]
    # box: footprint sides and height; cylinder: radius range in size_x, height in size_z
    size_x: tuple[float, float] = (1.0, 1.0)
    size_y: tuple[float, float] = (1.0, 1.0)
    size_z: tuple[float, float] = (1.0, 1.0)
    # fraction of objects placed within roadside_band meters of a road edge
    roadside: float = 0.0


@dataclass(frozen=True)
class WorldSpec:
    extent: tuple[float, float, float, float, float, float] = (-30.0, -30.0, -1.0, 30.0, 30.0, 12.0)
    n_labels: int = N_LABELS
    ground_label: int = GROUND
    layout: str = "none"
    road_label: int = ROAD
    road_width: float = 6.0
    road_half_size: float = 15.0  # loop: half side of the square ring
    roadside_band: float = 6.0
    min_gap: float = 0.6
    require_all_labels: bool = False
    objects: tuple[ObjectGroup, ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["extent"] = tuple(d["extent"])
        d["objects"] = tuple(
            ObjectGroup(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in g.items()})
            for g in d.get("objects", ())
        )
        return cls(**d)


def desk_world_spec(layout: str = "loop", **overrides) -> WorldSpec:
    """Default urban-ish desk scene: roads, buildings, walls, fences, poles, trees, cars."""
    groups = (
        ObjectGroup("box", BUILDING, (6, 9), (4.0, 9.0), (4.0, 9.0), (3.0, 8.0), roadside=0.7),
        ObjectGroup("box", WALL, (4, 7), (0.4, 0.6), (3.0, 8.0), (1.5, 3.0), roadside=0.6),
        ObjectGroup("box", FENCE, (4, 7), (3.0, 7.0), (0.2, 0.3), (0.8, 1.2), roadside=0.8),
        ObjectGroup("cylinder", POLE, (8, 14), (0.15, 0.25), (0.0, 0.0), (3.0, 5.0), roadside=1.0),
        ObjectGroup("cylinder", VEGETATION, (8, 14), (0.8, 2.0), (0.0, 0.0), (1.5, 4.5), roadside=0.7),
        ObjectGroup("box", VEHICLE, (4, 8), (3.8, 4.6), (1.6, 1.9), (1.3, 1.7), roadside=1.0),
    )
    spec = WorldSpec(layout=layout, objects=groups, require_all_labels=True)
    return replace(spec, **overrides)


@dataclass(frozen=True)
class Box:
    label: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Cylinder:
    label: int
    center: tuple[float, float]
    radius: float
    z0: float
    z1: float


@dataclass(frozen=True)
class GroundTruthWorld:
    extent: tuple[float, ...]
    boxes: tuple[Box, ...]
    cylinders: tuple[Cylinder, ...]
    ground_label: int
    n_labels: int
    seed: int
    layout: str = "none"
    road_width: float = 6.0
    road_half_size: float = 15.0

    @property
    def objects(self) -> list:
        return [*self.boxes, *self.cylinders]

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "boxes": [asdict(b) for b in self.boxes],
            "cylinders": [asdict(c) for c in self.cylinders],
            "ground_label": self.ground_label,
            "n_labels": self.n_labels,
            "seed": self.seed,
            "layout": self.layout,
            "road_width": self.road_width,
            "road_half_size": self.road_half_size,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthWorld":
        return cls(
            extent=tuple(d["extent"]),
            boxes=tuple(Box(b["label"], tuple(b["lo"]), tuple(b["hi"])) for b in d["boxes"]),
            cylinders=tuple(
                Cylinder(c["label"], tuple(c["center"]), c["radius"], c["z0"], c["z1"]) for c in d["cylinders"]
            ),
            ground_label=d["ground_label"],
            n_labels=d["n_labels"],
            seed=d["seed"],
            layout=d.get("layout", "none"),
            road_width=d.get("road_width", 6.0),
            road_half_size=d.get("road_half_size", 15.0),
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 64
    height: int = 48
    fx: float = 40.0
    fy: float = 40.0
    cx: float = 32.0
    cy: float = 24.0
    max_range: float = 15.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.max_range <= 0:
            raise ValueError("focal lengths and max_range must be positive")

    def pixel_rays(self) -> np.ndarray:
        """(H*W, 3) camera-frame directions with unit z, row-major."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        x = (u.ravel() - self.cx) / self.fx
        y = (v.ravel() - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=1)


@dataclass
class SensorFrame:
    depth: np.ndarray  # (H, W) float, NaN = no return
    labels: np.ndarray  # (H, W) uint16, 0 where depth is NaN
    pose: Pose
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    frame_id: int = 0

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space hit points and their labels for every finite pixel."""
        ok = np.isfinite(self.depth).ravel()
        rays = self.intrinsics.pixel_rays()[ok]
        pts_cam = rays * self.depth.ravel()[ok, None]
        return self.pose.apply(pts_cam), self.labels.ravel()[ok].astype(np.int64)


# --------------------------------------------------------------------------- worlds


def _road_rects(spec: WorldSpec) -> list[tuple[float, float, float, float]]:
    """Road surfaces as (x0, y0, x1, y1) rectangles."""
    x0, y0, _, x1, y1, _ = spec.extent
    hw = spec.road_width / 2
    if spec.layout == "none":
        return []
    if spec.layout == "straight":
        return [(x0, -hw, x1, hw)]
    if spec.layout == "cross":
        return [(x0, -hw, x1, hw), (-hw, y0, hw, y1)]
    if spec.layout == "loop":
        a = spec.road_half_size
        return [
            (-a - hw, -a - hw, a + hw, -a + hw),
            (-a - hw, a - hw, a + hw, a + hw),
            (-a - hw, -a + hw, -a + hw, a - hw),
            (a - hw, -a + hw, a + hw, a - hw),
        ]
    raise ValueError(f"unknown layout {spec.layout!r}")


def _rect_gap(a, b) -> float:
    """Chebyshev-style gap between two rectangles (negative when overlapping)."""
    dx = max(b[0] - a[2], a[0] - b[2])
    dy = max(b[1] - a[3], a[1] - b[3])
    return max(dx, dy)


def _point_rect_dist(px, py, r) -> float:
    dx = max(r[0] - px, 0.0, px - r[2])
    dy = max(r[1] - py, 0.0, py - r[3])
    return float(np.hypot(dx, dy))


def generate_world(spec: WorldSpec, seed: int, max_attempts: int = 400) -> GroundTruthWorld:
    if spec.n_labels < 2:
        raise ValueError("need at least two labels")
    for g in spec.objects:
        if g.count[0] > g.count[1] or g.count[0] < 0:
            raise ValueError(f"empty object-count range {g.count}")
        if not 1 <= g.label <= spec.n_labels:
            raise ValueError(f"label {g.label} outside 1..{spec.n_labels}")
    rng = np.random.default_rng(seed)
    x0, y0, z0, x1, y1, z1 = spec.extent
    roads = _road_rects(spec)
    footprints = [r for r in roads]
    boxes = [Box(spec.road_label, (r[0], r[1], -0.3), (r[2], r[3], 0.0)) for r in roads]
    cylinders: list[Cylinder] = []

    counts = [int(rng.integers(g.count[0], g.count[1] + 1)) for g in spec.objects]
    if spec.require_all_labels:
        counts = [max(c, 1) if g.count[1] > 0 else c for c, g in zip(counts, spec.objects)]

    for g, n in zip(spec.objects, counts):
        for _ in range(n):
            for _attempt in range(max_attempts):
                if g.shape == "box":
                    sx, sy = rng.uniform(*g.size_x), rng.uniform(*g.size_y)
                    if rng.random() < 0.5:
                        sx, sy = sy, sx
                    hx, hy = sx / 2, sy / 2
                elif g.shape == "cylinder":
                    hx = hy = rng.uniform(*g.size_x)
                else:
                    raise ValueError(f"unknown shape {g.shape!r}")
                h = rng.uniform(*g.size_z)
                cx, cy = _sample_position(rng, spec, roads, g, hx, hy)
                rect = (cx - hx, cy - hy, cx + hx, cy + hy)
                inside = rect[0] >= x0 and rect[1] >= y0 and rect[2] <= x1 and rect[3] <= y1 and h <= z1
                if not inside:
                    continue
                if any(_rect_gap(rect, f) < spec.min_gap for f in footprints):
                    continue
                footprints.append(rect)
                if g.shape == "box":
                    boxes.append(Box(g.label, (rect[0], rect[1], 0.0), (rect[2], rect[3], h)))
                else:
                    cylinders.append(Cylinder(g.label, (cx, cy), hx, 0.0, h))
                break
            else:
                raise GenerationError(f"could not place object of label {g.label} after {max_attempts} attempts")

    world = GroundTruthWorld(
        extent=tuple(float(v) for v in spec.extent),
        boxes=tuple(boxes),
        cylinders=tuple(cylinders),
        ground_label=spec.ground_label,
        n_labels=spec.n_labels,
        seed=int(seed),
        layout=spec.layout,
        road_width=spec.road_width,
        road_half_size=spec.road_half_size,
    )
    return _as_float(world)


def _sample_position(rng, spec, roads, g, hx, hy):
    x0, y0, _, x1, y1, _ = spec.extent
    if roads and rng.random() < g.roadside:
        r = roads[int(rng.integers(len(roads)))]
        # pick a side of the road rectangle and an offset into the band
        band = rng.uniform(spec.min_gap, spec.roadside_band)
        horizontal = (r[2] - r[0]) >= (r[3] - r[1])
        if horizontal:
            cx = rng.uniform(r[0], r[2])
            cy = r[3] + hy + band if rng.random() < 0.5 else r[1] - hy - band
        else:
            cy = rng.uniform(r[1], r[3])
            cx = r[2] + hx + band if rng.random() < 0.5 else r[0] - hx - band
        return float(cx), float(cy)
    return float(rng.uniform(x0 + hx, x1 - hx)), float(rng.uniform(y0 + hy, y1 - hy))


def _as_float(world: GroundTruthWorld) -> GroundTruthWorld:
    # plain Python floats keep JSON serialization stable
    boxes = tuple(Box(int(b.label), tuple(map(float, b.lo)), tuple(map(float, b.hi))) for b in world.boxes)
    cyl = tuple(
        Cylinder(int(c.label), tuple(map(float, c.center)), float(c.radius), float(c.z0), float(c.z1))
        for c in world.cylinders
    )
    return replace(world, boxes=boxes, cylinders=cyl)


def perturb_world(world: GroundTruthWorld, remove_fraction: float, add_count: int, seed: int) -> GroundTruthWorld:
    """Drop a fraction of non-road objects and add a few trees: a cheap seasonal-change proxy."""
    rng = np.random.default_rng(seed)
    road = [b for b in world.boxes if b.hi[2] <= 0.0]
    others = [o for o in world.objects if not (isinstance(o, Box) and o.hi[2] <= 0.0)]
    keep = rng.random(len(others)) >= remove_fraction
    kept = [o for o, k in zip(others, keep) if k]
    x0, y0, _, x1, y1, _ = world.extent
    added = []
    hw = world.road_width / 2
    while len(added) < add_count:
        cx, cy = rng.uniform(x0 + 2, x1 - 2), rng.uniform(y0 + 2, y1 - 2)
        if any(b.lo[0] - 1.5 <= cx <= b.hi[0] + 1.5 and b.lo[1] - 1.5 <= cy <= b.hi[1] + 1.5 for b in road):
            continue
        added.append(Cylinder(VEGETATION, (cx, cy), rng.uniform(0.6, 1.5), 0.0, rng.uniform(1.5, 4.0)))
    del hw
    boxes = tuple(road + [o for o in kept if isinstance(o, Box)])
    cyl = tuple([o for o in kept if isinstance(o, Cylinder)] + added)
    return _as_float(replace(world, boxes=boxes, cylinders=cyl))


def save_world_spec(spec: WorldSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))


def load_world_spec(path) -> WorldSpec:
    return WorldSpec.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- rendering


def _ray_boxes(o, d, lo, hi):
    """Entry distances of rays (P,3) into boxes (M,3); inf where missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo[None, :, :] - o[None, None, :]) * inv[:, None, :]
        t2 = (hi[None, :, :] - o[None, None, :]) * inv[:, None, :]
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = d[:, None, :] == 0
    inside = (o[None, None, :] >= lo[None]) & (o[None, None, :] <= hi[None])
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tn = tmin.max(axis=2)
    tf = tmax.min(axis=2)
    hit = (tn <= tf) & (tn > 1e-9)
    return np.where(hit, tn, np.inf)


def _ray_cylinders(o, d, centers, radius, z0, z1):
    """Entry distances into vertical capped cylinders; inf where missed."""
    P, M = d.shape[0], centers.shape[0]
    ox = o[0] - centers[None, :, 0]
    oy = o[1] - centers[None, :, 1]
    dx, dy, dz = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius[None, :] ** 2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = (-b - np.sqrt(disc)) / (2 * a)
    zs = o[2] + ts * dz
    side = (disc >= 0) & (a > 0) & (ts > 1e-9) & (zs >= z0[None]) & (zs <= z1[None])
    t = np.where(side, ts, np.inf)
    # caps (camera is never inside a solid, so the nearest valid cap is the entry)
    with np.errstate(divide="ignore", invalid="ignore"):
        for zc in (z0, z1):
            tc = (zc[None, :] - o[2]) / dz
            px = ox + tc * dx
            py = oy + tc * dy
            ok = (tc > 1e-9) & (px * px + py * py <= radius[None, :] ** 2) & np.isfinite(tc)
            t = np.minimum(t, np.where(ok, tc, np.inf))
    assert t.shape == (P, M)
    return t


def trace(world: GroundTruthWorld, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-hit ray parameter and label for rays ``origin + t * dirs``.

    Objects win exact ties with the ground plane so that flush road
    surfaces keep their label.
    """
    origin = np.asarray(origin, dtype=np.float64)
    P = dirs.shape[0]
    best_t = np.full(P, np.inf)
    best_l = np.zeros(P, dtype=np.int64)
    if world.boxes:
        lo = np.array([b.lo for b in world.boxes])
        hi = np.array([b.hi for b in world.boxes])
        t = _ray_boxes(origin, dirs, lo, hi)
        idx = np.argmin(t, axis=1)
        tb = t[np.arange(P), idx]
        lab = np.array([b.label for b in world.boxes])[idx]
        better = tb < best_t
        best_t = np.where(better, tb, best_t)
        best_l = np.where(better, lab, best_l)
    if world.cylinders:
        cen = np.array([c.center for c in world.cylinders])
        rad = np.array([c.radius for c in world.cylinders])
        z0 = np.array([c.z0 for c in world.cylinders])
        z1 = np.array([c.z1 for c in world.cylinders])
        t = _ray_cylinders(origin, dirs, cen, rad, z0, z1)
        idx = np.argmin(t, axis=1)
        tc = t[np.arange(P), idx]
        lab = np.array([c.label for c in world.cylinders])[idx]
        better = tc < best_t
        best_t = np.where(better, tc, best_t)
        best_l = np.where(better, lab, best_l)
    # ground plane z = 0 bounded by the world extent
    x0, y0, _, x1, y1, _ = world.extent
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origin[2] / dirs[:, 2]
    gx = origin[0] + tg * dirs[:, 0]
    gy = origin[1] + tg * dirs[:, 1]
    gok = (dirs[:, 2] < 0) & (tg > 1e-9) & (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)
    tg = np.where(gok, tg, np.inf)
    better = tg < best_t
    best_t = np.where(better, tg, best_t)
    best_l = np.where(better, world.ground_label, best_l)
    return best_t, best_l


def render_view(
    world: GroundTruthWorld, pose: Pose, intrinsics: CameraIntrinsics | None = None, frame_id: int = 0
) -> SensorFrame:
    intr = intrinsics or CameraIntrinsics()
    if not is_gravity_aligned(pose):
        raise ValueError("camera pose is not gravity-aligned")
    rays_cam = intr.pixel_rays()
    dirs = rays_cam @ pose.rotation.T
    # rays have unit camera-z, so the ray parameter is the z-depth
    t, lab = trace(world, pose.translation, dirs)
    ok = np.isfinite(t) & (t <= intr.max_range)
    depth = np.where(ok, t, np.nan).reshape(intr.height, intr.width)
    labels = np.where(ok, lab, 0).astype(np.uint16).reshape(intr.height, intr.width)
    return SensorFrame(depth, labels, pose, intr, frame_id)


def perturb_labels(frame: SensorFrame, flip_rate: float, seed: int, n_labels: int = N_LABELS) -> SensorFrame:
    if not 0 <= flip_rate < 1:
        raise ValueError("flip_rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = frame.labels.copy().ravel()
    finite = np.flatnonzero(np.isfinite(frame.depth).ravel())
    n_flip = int(np.floor(flip_rate * finite.size))
    chosen = rng.choice(finite, size=n_flip, replace=False) if n_flip else np.empty(0, dtype=np.int64)
    # uniform over the other L - 1 labels
    shift = rng.integers(1, n_labels, size=n_flip)
    labels[chosen] = ((labels[chosen].astype(np.int64) - 1 + shift) % n_labels + 1).astype(np.uint16)
    return SensorFrame(frame.depth.copy(), labels.reshape(frame.labels.shape), frame.pose, frame.intrinsics, frame.frame_id)


# --------------------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class TrajectoryParams:
    spacing: float = 1.5
    camera_height: float = 1.5
    lane_offset: float = 1.5
    yaw_jitter_deg: float = 0.0
    # Loop90/Loop180: database covers |s| <= reach along road A; query runs
    # along road B (or back along A) up to the intersection
    reach: float = 24.0
    query_start: float = -20.0
    query_stop: float = 2.0
    seed: int = 0


@dataclass
class Trajectories:
    scenario: str
    database: list[Pose]
    query: list[Pose]
    label_noise: bool = False

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "label_noise": self.label_noise,
            "database": [p.as_array().tolist() for p in self.database],
            "query": [p.as_array().tolist() for p in self.query],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectories":
        return cls(
            d["scenario"],
            [Pose.from_array(v) for v in d["database"]],
            [Pose.from_array(v) for v in d["query"]],
            d.get("label_noise", False),
        )


def _line(start, heading, length, spacing, height, jitter, rng):
    n = int(np.floor(length / spacing)) + 1
    d = np.array([np.cos(heading), np.sin(heading)])
    out = []
    for i in range(n):
        xy = np.asarray(start, dtype=float) + d * i * spacing
        yaw = heading + np.deg2rad(jitter) * rng.uniform(-1, 1)
        out.append(camera_pose([xy[0], xy[1], height], yaw))
    return out


def generate_trajectory(world: GroundTruthWorld, scenario: str, params: TrajectoryParams | None = None) -> Trajectories:
    p = params or TrajectoryParams()
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(p.seed)
    h, lane, sp, jit = p.camera_height, p.lane_offset, p.spacing, p.yaw_jitter_deg
    label_noise = False
    if scenario in ("Loop0", "CrossTime"):
        if world.layout != "loop":
            raise TrajectoryError(f"{scenario} needs a loop world, got {world.layout!r}")
        a = world.road_half_size - lane  # drive counter-clockwise in the inner lane
        db: list[Pose] = []
        corners = [(-a, -a), (a, -a), (a, a), (-a, a)]
        for k in range(4):
            s, e = np.array(corners[k]), np.array(corners[(k + 1) % 4])
            heading = float(np.arctan2(*(e - s)[::-1]))
            seg = _line(s, heading, np.linalg.norm(e - s) - 1e-9, sp, h, jit, rng)
            db.extend(seg)
        query = list(db)
        label_noise = scenario == "CrossTime"
    elif scenario == "Loop90":
        if world.layout != "cross":
            raise TrajectoryError("Loop90 needs a cross world")
        r = p.reach
        db = _line((-r, -lane), 0.0, 2 * r, sp, h, jit, rng) + _line((r, lane), np.pi, 2 * r, sp, h, jit, rng)
        query = _line((lane, p.query_start), np.pi / 2, p.query_stop - p.query_start, sp, h, jit, rng)
    else:  # Loop180
        if world.layout not in ("cross", "straight"):
            raise TrajectoryError("Loop180 needs a straight or cross world")
        r = p.reach
        db = _line((-r, -lane), 0.0, 2 * r, sp, h, jit, rng)
        query = _line((-p.query_start, lane), np.pi, p.query_stop - p.query_start, sp, h, jit, rng)
    x0, y0, _, x1, y1, _ = world.extent
    for pose in db + query:
        x, y = pose.translation[:2]
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise TrajectoryError(f"trajectory leaves the world at ({x:.2f}, {y:.2f})")
    return Trajectories(scenario, db, query, label_noise)


def nearest_yaw_differences(database: list[Pose], query: list[Pose]) -> np.ndarray:
    """Absolute heading difference (degrees, in [0, 180]) of each query to its spatially nearest database pose."""
    dpos = np.array([p.translation for p in database])
    dyaw = np.array([body_pose(p).yaw for p in database])
    out = []
    for q in query:
        i = int(np.argmin(np.linalg.norm(dpos - q.translation, axis=1)))
        out.append(abs(np.rad2deg(wrap_angle(body_pose(q).yaw - dyaw[i]))))
    return np.array(out)


def save_trajectories(traj: Trajectories, path) -> None:
    Path(path).write_text(json.dumps(traj.to_dict()))


def load_trajectories(path) -> Trajectories:
    return Trajectories.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- frame files


def save_frame(frame: SensorFrame, path) -> None:
    h, w = frame.depth.shape
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<III", FRAME_VERSION, w, h))
        f.write(frame.depth.astype("<f4").tobytes())
        f.write(frame.labels.astype("<u2").tobytes())
        f.write(frame.pose.as_array().astype("<f8").tobytes())


def load_frame(path, intrinsics: CameraIntrinsics | None = None, frame_id: int = 0) -> SensorFrame:
    data = Path(path).read_bytes()
    if data[:4] != FRAME_MAGIC:
        raise ValueError("not a sensor frame file")
    version, w, h = struct.unpack_from("<III", data, 4)
    if version != FRAME_VERSION:
        raise ValueError(f"unsupported frame version {version}")
    off = 16
    need = off + 4 * w * h + 2 * w * h + 96
    if len(data) != need:
        raise ValueError("truncated or oversized frame file")
    depth = np.frombuffer(data, "<f4", w * h, off).reshape(h, w).astype(np.float64)
    off += 4 * w * h
    labels = np.frombuffer(data, "<u2", w * h, off).reshape(h, w).copy()
    off += 2 * w * h
    pose = Pose.from_array(np.frombuffer(data, "<f8", 12, off))
    intr = intrinsics or CameraIntrinsics(width=w, height=h, cx=w / 2, cy=h / 2)
    return SensorFrame(depth, labels, pose, intr, frame_id)
