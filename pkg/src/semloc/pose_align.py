"""Pose hypotheses from word matches, semantic overlap verification, ICP refinement and ranking."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import Pose, rot_z, wrap_angle, yaw_of
from .voxel_map import SemanticVoxelMap

YAW_BUCKET = np.deg2rad(20.0)


class DegenerateFitError(ValueError):
    pass


@dataclass
class VerificationConfig:
    kappa: float = 3.0
    tau: float = 0.3
    icp_max_iters: int = 20
    icp_convergence_eps: float = 1e-3
    icp_mode: str = "se3"  # or "yaw"
    icp_target: str = "plane"  # "plane": targets projected on the local surface; "point": voxel centers

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.icp_mode not in ("se3", "yaw"):
            raise ValueError(f"unknown icp mode {self.icp_mode!r}")
        if self.icp_target not in ("plane", "point"):
            raise ValueError(f"unknown icp target {self.icp_target!r}")


@dataclass
class PoseHypothesis:
    yaw: float
    translation: np.ndarray
    source: tuple[int, int] = (-1, -1)
    rotation: np.ndarray | None = None  # set after refinement; pure yaw before
    ratio: float = 0.0
    rms: float = float("inf")
    n_corr: int = 0
    order: int = 0

    @property
    def pose(self) -> Pose:
        r = rot_z(self.yaw) if self.rotation is None else self.rotation
        return Pose(r, self.translation)


# --------------------------------------------------------------------------- nearest voxel lookup


class VoxelNNIndex:
    """Exact nearest occupied database voxel within a radius."""

    def __init__(self, smap: SemanticVoxelMap, kappa: float):
        idx, labels = smap.occupied()
        self.kappa = float(kappa)
        self.voxel_size = smap.voxel_size
        self.centers = smap.voxel_centers(idx)
        self.labels = labels
        self._tree = cKDTree(self.centers) if len(labels) else None
        self._normals = None

    @property
    def normals(self) -> np.ndarray:
        """Unit surface normal per voxel from neighborhood PCA; NaN where the neighborhood is not planar."""
        if self._normals is None:
            out = np.full((len(self.labels), 3), np.nan)
            if self._tree is not None:
                groups = self._tree.query_ball_point(self.centers, 2.01 * self.voxel_size)
                for i, nb in enumerate(groups):
                    if len(nb) < 5:
                        continue
                    p = self.centers[nb] - self.centers[nb].mean(0)
                    ev, evec = np.linalg.eigh(p.T @ p)
                    if ev[0] < 0.3 * ev[1]:
                        out[i] = evec[:, 0]
            self._normals = out
        return self._normals

    def __len__(self) -> int:
        return self.labels.size

    def nearest(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distance and database row of the nearest voxel strictly closer than kappa (else inf, -1)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return np.full(len(points), np.inf), np.full(len(points), -1, np.int64)
        d, i = self._tree.query(points, k=1, distance_upper_bound=self.kappa)
        far = ~(d < self.kappa)
        d[far] = np.inf
        i = np.where(far, -1, i).astype(np.int64)
        return d, i


@dataclass
class Verification:
    ratio: float
    n_occupied: int
    query_points: np.ndarray  # query-frame centers of correctly aligned voxels
    db_points: np.ndarray
    distances: np.ndarray
    empty_query: bool = False
    db_rows: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def n_corr(self) -> int:
        return len(self.distances)

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.distances**2))) if self.n_corr else float("inf")

    @property
    def correspondences(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.query_points, self.db_points))


def _query_occupied(query) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(query, SemanticVoxelMap):
        idx, labels = query.occupied()
        return query.voxel_centers(idx), labels
    pts, labels = query
    return np.asarray(pts, dtype=np.float64), np.asarray(labels)


def verify(query, index: VoxelNNIndex, pose: Pose, kappa: float | None = None) -> Verification:
    """Fraction of occupied query voxels whose nearest database voxel is within kappa and has the same label.

    ``query`` is a map or a ``(centers, labels)`` pair of its occupied voxels.
    """
    pts, labels = _query_occupied(query)
    if len(labels) == 0:
        e = np.empty((0, 3))
        return Verification(0.0, 0, e, e, np.empty(0), empty_query=True)
    if kappa is not None and kappa != index.kappa:
        raise ValueError("kappa differs from the index radius")
    moved = pose.apply(pts)
    d, i = index.nearest(moved)
    ok = i >= 0
    ok[ok] = index.labels[i[ok]] == labels[ok]
    return Verification(float(ok.sum()) / len(labels), len(labels), pts[ok], index.centers[i[ok]], d[ok], db_rows=i[ok])


# --------------------------------------------------------------------------- hypotheses


def hypothesis_arrays(q_centers, q_yaws, d_centers, dedupe_grid: float):
    """Vectorised hypothesis construction; returns (yaws, translations, kept match rows)."""
    q_centers = np.asarray(q_centers, dtype=np.float64).reshape(-1, 3)
    d_centers = np.asarray(d_centers, dtype=np.float64).reshape(-1, 3)
    yaws = np.asarray(q_yaws, dtype=np.float64).reshape(-1)
    if len(yaws) == 0:
        return np.empty(0), np.empty((0, 3)), np.empty(0, np.int64)
    c, s = np.cos(yaws), np.sin(yaws)
    rq = np.stack([c * q_centers[:, 0] - s * q_centers[:, 1], s * q_centers[:, 0] + c * q_centers[:, 1], q_centers[:, 2]], 1)
    t = d_centers - rq
    n_buckets = int(round(2 * np.pi / YAW_BUCKET))
    bucket = np.mod(np.round(np.mod(yaws, 2 * np.pi) / YAW_BUCKET).astype(np.int64), n_buckets)
    cells = np.floor(t / dedupe_grid).astype(np.int64)
    keys = np.column_stack([bucket, cells])
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(first)
    return yaws[keep], t[keep], keep


def hypotheses_from_matches(matches, dedupe_grid: float) -> list[PoseHypothesis]:
    """``matches`` holds (query word, database word) pairs of :class:`SemanticWord`-like objects."""
    if len(matches) == 0:
        return []
    q_c = np.array([q.center for q, _ in matches])
    q_y = np.array([q.yaw for q, _ in matches])
    d_c = np.array([d.center for _, d in matches])
    yaws, ts, keep = hypothesis_arrays(q_c, q_y, d_c, dedupe_grid)
    return [PoseHypothesis(float(y), t, (int(k), int(k)), order=n) for n, (y, t, k) in enumerate(zip(yaws, ts, keep))]


class LabelScreen:
    """Dense approximate verifier: per grid cell, the label of the nearest database voxel if within kappa."""

    def __init__(self, smap: SemanticVoxelMap, kappa: float):
        idx, labels = smap.occupied()
        self.voxel_size = smap.voxel_size
        self.origin = smap.origin
        if len(labels) == 0:
            self.lo = np.zeros(3, np.int64)
            self.grid = np.zeros((1, 1, 1), np.uint8)
            return
        pad = int(np.ceil(kappa / smap.voxel_size)) + 1
        self.lo = idx.min(0).astype(np.int64) - pad
        shape = tuple(idx.max(0).astype(np.int64) + pad - self.lo + 1)
        occ = np.zeros(shape, bool)
        lab = np.zeros(shape, np.uint8)
        rel = idx - self.lo
        occ[rel[:, 0], rel[:, 1], rel[:, 2]] = True
        lab[rel[:, 0], rel[:, 1], rel[:, 2]] = labels
        dist, near = ndimage.distance_transform_edt(~occ, return_indices=True)
        grid = lab[near[0], near[1], near[2]]
        grid[dist * smap.voxel_size >= kappa] = 0
        self.grid = grid

    def scores(self, pts: np.ndarray, labels: np.ndarray, yaws: np.ndarray, translations: np.ndarray, chunk: int = 8_000_000) -> np.ndarray:
        n = max(len(labels), 1)
        out = np.zeros(len(yaws))
        shape = np.array(self.grid.shape)
        per = max(1, chunk // n)
        for s in range(0, len(yaws), per):
            y, t = yaws[s : s + per], translations[s : s + per]
            c, si = np.cos(y)[:, None], np.sin(y)[:, None]
            x = c * pts[None, :, 0] - si * pts[None, :, 1] + t[:, 0:1]
            yy = si * pts[None, :, 0] + c * pts[None, :, 1] + t[:, 1:2]
            z = pts[None, :, 2] + t[:, 2:3]
            cell = np.stack([x, yy, z], -1)
            cell = np.floor((cell - self.origin) / self.voxel_size).astype(np.int64) - self.lo
            ok = np.all((cell >= 0) & (cell < shape), axis=-1)
            cell = np.where(ok[..., None], cell, 0)
            hit = self.grid[cell[..., 0], cell[..., 1], cell[..., 2]] == labels[None, :]
            out[s : s + per] = (hit & ok).sum(1) / n
        return out


# --------------------------------------------------------------------------- fitting


def rigid_fit(pairs=None, *, src=None, dst=None, yaw_only: bool = False) -> Pose:
    """Least-squares rigid transform with R @ src + t ≈ dst."""
    if pairs is not None:
        if len(pairs) == 0:
            raise DegenerateFitError("no correspondences")
        src = np.array([p[0] for p in pairs], dtype=np.float64)
        dst = np.array([p[1] for p in pairs], dtype=np.float64)
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3:
        raise DegenerateFitError(f"need at least 3 correspondences, got {len(src)}")
    cs, cd = src.mean(0), dst.mean(0)
    a, b = src - cs, dst - cd
    if yaw_only:
        h = a[:, :2].T @ b[:, :2]
        if np.linalg.matrix_rank(a[:, :2], tol=1e-9) < 1:
            raise DegenerateFitError("correspondences are degenerate")
        yaw = np.arctan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
        r = rot_z(yaw)
    else:
        h = a.T @ b
        if np.linalg.matrix_rank(a, tol=1e-9) < 2:
            raise DegenerateFitError("correspondences are collinear")
        u, _, vt = np.linalg.svd(h)
        dfix = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
        r = vt.T @ np.diag([1.0, 1.0, dfix]) @ u.T
    return Pose(r, cd - r @ cs)


@dataclass
class IcpResult:
    pose: Pose
    verification: Verification
    ratio_trace: list[float] = field(default_factory=list)
    rms_trace: list[float] = field(default_factory=list)
    iterations: int = 0


def _icp_pairs(ver: Verification, index: VoxelNNIndex, pose: Pose, target: str):
    """Query points in map coordinates and their targets; planar targets slide to the query point's foot."""
    q = pose.apply(ver.query_points)
    tgt = ver.db_points.copy()
    if target == "plane" and len(tgt):
        n = index.normals[ver.db_rows]
        flat = np.isfinite(n[:, 0])
        r = tgt[flat] - q[flat]
        tgt[flat] = q[flat] + n[flat] * (r * n[flat]).sum(1, keepdims=True)
    return q, tgt


def _rms(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean(((a - b) ** 2).sum(1)))) if len(a) else float("inf")


def icp_refine(query, index: VoxelNNIndex, p0: Pose, config: VerificationConfig) -> IcpResult:
    """Refit on the correctly aligned voxels until the update is tiny or the RMS would grow.

    With the ``plane`` target, each database voxel on a planar patch is replaced by the
    foot of the query point on that patch.  Point-to-point fits on two voxel lattices
    otherwise lock onto integer-voxel shifts wherever large flat surfaces dominate.
    """
    pose = p0
    ver = verify(query, index, pose)
    q, tgt = _icp_pairs(ver, index, pose, config.icp_target)
    rms = _rms(q, tgt)
    ratios, rmss = [ver.ratio], [rms]
    it = 0
    while it < config.icp_max_iters and ver.n_corr > 0:
        try:
            step = rigid_fit(src=q, dst=tgt, yaw_only=config.icp_mode == "yaw")
        except DegenerateFitError:
            break
        new = step.compose(pose)
        nver = verify(query, index, new)
        if nver.n_corr == 0:
            break
        nq, ntgt = _icp_pairs(nver, index, new, config.icp_target)
        nrms = _rms(nq, ntgt)
        if nrms > rms:
            break
        it += 1
        dt = np.linalg.norm(step.translation)
        dr = np.degrees(np.arccos(np.clip((np.trace(step.rotation) - 1) / 2, -1.0, 1.0)))
        pose, ver, q, tgt, rms = new, nver, nq, ntgt, nrms
        ratios.append(ver.ratio)
        rmss.append(rms)
        if dt < config.icp_convergence_eps and dr < 0.1:
            break
    return IcpResult(pose, ver, ratios, rmss, it)


def refine(hyp: PoseHypothesis, query, index: VoxelNNIndex, config: VerificationConfig) -> PoseHypothesis:
    res = icp_refine(query, index, hyp.pose, config)
    return PoseHypothesis(
        yaw=yaw_of(res.pose.rotation), translation=res.pose.translation, source=hyp.source,
        rotation=res.pose.rotation, ratio=res.verification.ratio, rms=res.verification.rms,
        n_corr=res.verification.n_corr, order=hyp.order,
    )


def polish(hyp: PoseHypothesis, query, index: VoxelNNIndex, screen: LabelScreen, max_steps: int = 10,
           yaw_step_deg: float = 1.0) -> PoseHypothesis:
    """Greedy local search over yaw and translation that maximizes label agreement.

    ICP minimizes distances, not label agreement, so it can settle a voxel or two
    away from the pose with the highest ratio. Neighbors are one voxel along each axis and +-1/+-2 yaw steps
    about the query centroid; moves are scored with the dense screen and the result
    is kept only if exact verification agrees it is better.
    """
    pts, labels = query
    if max_steps <= 0 or len(labels) == 0:
        return hyp
    vs = screen.voxel_size
    dt = [np.r_[sx, sy, sz] * vs for sx, sy, sz in
          [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (1, 1, 0), (1, -1, 0), (-1, 1, 0), (-1, -1, 0), (0, 0, 1), (0, 0, -1)]]
    dy = np.radians(yaw_step_deg) * np.array([1.0, -1.0, 2.0, -2.0])
    centroid = pts.mean(0)
    yaw, t = hyp.yaw, np.asarray(hyp.translation, dtype=np.float64)
    best = screen.scores(pts, labels, np.r_[yaw], t[None])[0]
    for _ in range(max_steps):
        c = rot_z(yaw) @ centroid + t
        yaws = np.r_[np.full(len(dt), yaw), yaw + dy]
        ts = np.vstack([t + d for d in dt] + [c - rot_z(yaw + d) @ centroid for d in dy])
        sc = screen.scores(pts, labels, yaws, ts)
        j = int(np.argmax(sc))
        if sc[j] <= best:
            break
        best, yaw, t = sc[j], float(yaws[j]), ts[j]
    if yaw == hyp.yaw and np.array_equal(t, hyp.translation):
        return hyp
    v = verify(query, index, Pose(rot_z(yaw), t))
    if v.ratio <= hyp.ratio:
        return hyp
    return PoseHypothesis(yaw=yaw, translation=t, source=hyp.source, rotation=None, ratio=v.ratio, rms=v.rms,
                          n_corr=v.n_corr, order=hyp.order)


def rank_hypotheses(hyps, tau: float) -> list[PoseHypothesis]:
    keep = [h for h in hyps if h.ratio >= tau]
    return sorted(keep, key=lambda h: (-h.ratio, h.rms, h.order))


def write_hypotheses_csv(hyps, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "ratio", "yaw_deg", "tx", "ty", "tz", "rms", "n_corr"])
        for r, h in enumerate(hyps, 1):
            yaw = np.degrees(wrap_angle(h.yaw))
            w.writerow([r, f"{h.ratio:.6f}", f"{yaw:.4f}", *(f"{v:.6f}" for v in h.translation), f"{h.rms:.6f}", h.n_corr])
