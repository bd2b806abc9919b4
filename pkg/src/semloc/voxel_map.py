"""Semantic voxel maps: ray-carving fusion and oriented subvolume extraction.

Subvolume cells use one byte per cell:
``0`` unobserved, ``1`` free, ``1 + l`` occupied with class ``l``.
Map files store resolved states as ``0`` free and ``l`` for class ``l``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Pose, body_pose

UNOBSERVED = 0
FREE = 1

MAP_MAGIC = b"SVLM"
MAP_VERSION = 1
SUBVOLUME_MAGIC = b"SVLV"

ROLES = ("database", "query", "training-complete", "training-incomplete")

# nudge hit points into the surface so boundary hits land in the solid voxel
_HIT_NUDGE = 1e-6
_KEY_BIAS = 1 << 20


def pack_keys(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64) + _KEY_BIAS
    return (idx[..., 0] << 42) | (idx[..., 1] << 21) | idx[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << 21) - 1
    return np.stack([(keys >> 42) & mask, (keys >> 21) & mask, keys & mask], axis=-1) - _KEY_BIAS


def code_of_state(state):
    """Map-file state (0 free, l class) to subvolume cell code."""
    return np.asarray(state) + 1


@dataclass
class VoxelVotes:
    """Per-voxel evidence: column 0 counts free traversals, column l counts class-l hits."""

    voxel_size: float
    n_labels: int
    keys: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    counts: np.ndarray = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.counts is None:
            self.counts = np.zeros((0, self.n_labels + 1), dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @classmethod
    def from_votes(cls, voxel_size, n_labels, keys, votes, origin=None) -> "VoxelVotes":
        """Aggregate raw (packed key, vote column) pairs."""
        if len(keys) == 0:
            return cls(voxel_size, n_labels, origin=origin if origin is not None else np.zeros(3))
        ukeys, inv = np.unique(keys, return_inverse=True)
        flat = np.bincount(inv * (n_labels + 1) + votes, minlength=ukeys.size * (n_labels + 1))
        counts = flat.reshape(ukeys.size, n_labels + 1).astype(np.int64)
        return cls(voxel_size, n_labels, ukeys, counts, origin if origin is not None else np.zeros(3))

    def merge(self, other: "VoxelVotes") -> "VoxelVotes":
        if other.voxel_size != self.voxel_size or other.n_labels != self.n_labels:
            raise ValueError("cannot merge votes with different grids")
        keys = np.concatenate([self.keys, other.keys])
        counts = np.concatenate([self.counts, other.counts])
        ukeys, inv = np.unique(keys, return_inverse=True)
        out = np.zeros((ukeys.size, self.n_labels + 1), dtype=np.int64)
        np.add.at(out, inv, counts)
        return VoxelVotes(self.voxel_size, self.n_labels, ukeys, out, self.origin)

    def resolve(self, min_hits: int = 1, role: str = "database") -> "SemanticVoxelMap":
        free = self.counts[:, 0]
        lab = self.counts[:, 1:]
        occ_sum = lab.sum(axis=1)
        occupied = (occ_sum >= free) & (occ_sum >= min_hits)
        is_free = ~occupied & (free >= min_hits)
        states = np.where(occupied, np.argmax(lab, axis=1) + 1, 0).astype(np.uint8)
        keep = occupied | is_free
        return SemanticVoxelMap(
            self.voxel_size, self.origin.copy(), unpack_keys(self.keys[keep]).astype(np.int32), states[keep],
            self.n_labels, role,
        )


@dataclass
class SemanticVoxelMap:
    voxel_size: float
    origin: np.ndarray
    indices: np.ndarray  # (n, 3) int32, lexicographically sorted
    states: np.ndarray  # (n,) uint8: 0 free, l class
    n_labels: int
    role: str = "database"
    _dense: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int32).reshape(-1, 3)
        self.states = np.asarray(self.states, dtype=np.uint8)
        order = np.lexsort(self.indices.T[::-1])
        self.indices = self.indices[order]
        self.states = self.states[order]

    def __len__(self) -> int:
        return self.states.size

    @property
    def occupied_mask(self) -> np.ndarray:
        return self.states > 0

    def occupied(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices and labels of occupied voxels."""
        m = self.occupied_mask
        return self.indices[m], self.states[m]

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)

    def _dense_grid(self):
        if self._dense is None:
            if len(self) == 0:
                self._dense = (np.zeros(3, np.int64), np.zeros((1, 1, 1), np.uint8))
            else:
                lo = self.indices.min(axis=0).astype(np.int64)
                hi = self.indices.max(axis=0).astype(np.int64)
                grid = np.zeros(tuple(hi - lo + 1), dtype=np.uint8)
                rel = self.indices - lo
                grid[rel[:, 0], rel[:, 1], rel[:, 2]] = code_of_state(self.states)
                self._dense = (lo, grid)
        return self._dense

    def codes_at(self, idx: np.ndarray) -> np.ndarray:
        """Cell codes for integer voxel indices (..., 3); unobserved outside the map."""
        lo, grid = self._dense_grid()
        rel = np.asarray(idx, dtype=np.int64) - lo
        shape = np.array(grid.shape)
        ok = np.all((rel >= 0) & (rel < shape), axis=-1)
        out = np.zeros(rel.shape[:-1], dtype=np.uint8)
        r = rel[ok]
        out[ok] = grid[r[:, 0], r[:, 1], r[:, 2]]
        return out

    def transformed(self, pose: Pose) -> "SemanticVoxelMap":
        """Re-voxelize occupied and free voxel centers under a rigid transform (exact for grid-preserving poses)."""
        pts = pose.apply(self.voxel_centers(self.indices))
        idx = self.voxel_of(pts)
        keys = pack_keys(idx)
        _, first = np.unique(keys, return_index=True)
        return SemanticVoxelMap(self.voxel_size, self.origin, idx[first], self.states[first], self.n_labels, self.role)


# --------------------------------------------------------------------------- fusion


def _dda(start: np.ndarray, end: np.ndarray, origin: np.ndarray, vs: float):
    """Voxels strictly before the end voxel along each segment, plus the end voxels.

    Amanatides-Woo traversal, vectorized over segments.  Steps on an axis
    stop once that axis has reached the end voxel, so every ray terminates
    exactly at its end voxel even under floating-point ties.
    """
    v = np.floor((start - origin) / vs).astype(np.int64)
    v_end = np.floor((end - origin) / vs).astype(np.int64)
    d = end - start
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(step != 0, vs / np.abs(d), np.inf)
        boundary = origin + (v + (step > 0)) * vs
        t_max = np.where(step != 0, (boundary - start) / d, np.inf)
    remaining = np.abs(v_end - v)
    # a ray may only step along an axis that still has steps left
    t_max = np.where(remaining > 0, t_max, np.inf)
    n_steps = remaining.sum(axis=1)
    free = []
    rows = np.arange(v.shape[0])
    active = np.flatnonzero(n_steps > 0)
    v = v.copy()
    while active.size:
        free.append(v[active].copy())
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        r = active
        v[r, axis] += step[r, axis]
        remaining[r, axis] -= 1
        t_max[r, axis] = np.where(remaining[r, axis] > 0, t_max[r, axis] + t_delta[r, axis], np.inf)
        n_steps[r] -= 1
        active = active[n_steps[active] > 0]
    del rows
    free_vox = np.concatenate(free) if free else np.empty((0, 3), np.int64)
    return free_vox, v_end


def frame_votes(
    frame,
    voxel_size: float,
    n_labels: int,
    origin=None,
    to_map: Pose | None = None,
    discard_labels: Iterable[int] = (),
    label_map: np.ndarray | None = None,
) -> VoxelVotes:
    """Votes cast by one frame; ``to_map`` re-expresses world points in the map frame."""
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    pts, labels = frame.points()
    center = frame.pose.translation
    if to_map is not None:
        pts = to_map.apply(pts)
        center = to_map.apply(center)
    if label_map is not None:
        labels = label_map[labels]
    discard = np.isin(labels, list(discard_labels)) if discard_labels else np.zeros(labels.size, bool)
    pts, labels = pts[~discard], labels[~discard]
    if pts.shape[0] == 0:
        return VoxelVotes(voxel_size, n_labels, origin=origin)
    d = pts - center
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    end = pts + _HIT_NUDGE * d
    start = np.broadcast_to(center, pts.shape)
    free, hit = _dda(start, end, origin, voxel_size)
    keys = np.concatenate([pack_keys(free), pack_keys(hit)])
    votes = np.concatenate([np.zeros(free.shape[0], np.int64), labels])
    return VoxelVotes.from_votes(voxel_size, n_labels, keys, votes, origin)


def fuse_votes(frames: Sequence, voxel_size: float, n_labels: int, **kw) -> VoxelVotes:
    if len(frames) == 0:
        raise ValueError("fuse needs at least one frame")
    total = None
    for fr in frames:
        v = frame_votes(fr, voxel_size, n_labels, **kw)
        total = v if total is None else total.merge(v)
    return total


def fuse(
    frames: Sequence,
    voxel_size: float,
    n_labels: int = 8,
    min_hits: int = 1,
    role: str = "database",
    **kw,
) -> SemanticVoxelMap:
    """Fuse depth + label frames into a resolved semantic voxel map.

    Extra keywords (``origin``, ``to_map``, ``discard_labels``, ``label_map``)
    are forwarded to :func:`frame_votes`.
    """
    return fuse_votes(frames, voxel_size, n_labels, **kw).resolve(min_hits, role)


def fuse_in_body_frame(frames: Sequence, anchor, voxel_size: float, n_labels: int, **kw) -> SemanticVoxelMap:
    """Fuse frames into the gravity-aligned body frame of ``anchor`` (a camera pose)."""
    to_map = body_pose(anchor).inverse()
    return fuse(frames, voxel_size, n_labels, to_map=to_map, **kw)


# --------------------------------------------------------------------------- subvolumes


@dataclass
class Subvolume:
    grid: np.ndarray  # (V, V, V) uint8 codes, axes x, y, z
    center: np.ndarray
    yaw: float
    role: str = "incomplete"

    @property
    def V(self) -> int:
        return self.grid.shape[0]


def _check_side(V: int) -> None:
    if V < 1 or V & (V - 1):
        raise ValueError(f"subvolume side {V} is not a power of two")


def _cell_offsets(V: int, voxel_size: float) -> np.ndarray:
    """(V, V, V, 3) cell-center offsets from the subvolume center."""
    r = (np.arange(V) - V / 2 + 0.5) * voxel_size
    gx, gy, gz = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def extract_subvolumes(smap: SemanticVoxelMap, centers: np.ndarray, yaw: float, V: int) -> np.ndarray:
    """Batch extraction, returns (n, V, V, V) codes.

    The subvolume shows the map content rotated by ``+yaw`` about the center:
    cell (i, j, k) samples the map at ``c + R_z(-yaw) (p_ijk - c)``.
    """
    _check_side(V)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    yaw = float(yaw) % (2 * np.pi)
    off = _cell_offsets(V, smap.voxel_size).reshape(-1, 3)
    c, s = np.cos(-yaw), np.sin(-yaw)
    rot = off @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]).T
    # snap to the exact lattice when the rotation is the identity
    if yaw == 0.0:
        rot = off
    out = np.empty((centers.shape[0], V, V, V), dtype=np.uint8)
    for i, cen in enumerate(centers):
        idx = smap.voxel_of(cen + rot)
        out[i] = smap.codes_at(idx).reshape(V, V, V)
    return out


def extract_subvolume(smap: SemanticVoxelMap, center, yaw: float, V: int) -> Subvolume:
    grid = extract_subvolumes(smap, np.asarray(center)[None], yaw, V)[0]
    return Subvolume(grid, np.asarray(center, dtype=np.float64), float(yaw) % (2 * np.pi))


def occupied_subvolume_centers(smap: SemanticVoxelMap, V: int, stride: int) -> np.ndarray:
    """Lattice centers whose axis-aligned V^3 window holds at least one occupied voxel.

    Center lattice index m sits at ``origin + m * stride * voxel_size``; its
    window spans voxel indices ``m*stride - V/2 .. m*stride + V/2 - 1``.
    Returns world centers sorted by lattice index.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _check_side(V)
    occ, _ = smap.occupied()
    if occ.shape[0] == 0:
        return np.empty((0, 3))
    occ = occ.astype(np.int64)
    h = V // 2
    lo = occ.min(axis=0)
    hi = occ.max(axis=0)
    # lattice range whose windows can touch the occupied bounding box
    m_lo = -((-(lo - h + 1)) // stride)
    m_hi = (hi + h) // stride
    # 3D prefix sums over an occupancy grid padded so every window is in range
    base = m_lo * stride - h
    shape = tuple((m_hi * stride + h) - base + 1)
    occ_grid = np.zeros(shape, dtype=np.int32)
    rel = occ - base
    occ_grid[rel[:, 0], rel[:, 1], rel[:, 2]] = 1
    csum = np.zeros(tuple(s + 1 for s in shape), dtype=np.int64)
    csum[1:, 1:, 1:] = occ_grid.cumsum(0).cumsum(1).cumsum(2)
    axes = [np.arange(a, b + 1) for a, b in zip(m_lo, m_hi)]
    # window [m*stride - h, m*stride + h - 1] -> prefix indices [start, start + V)
    st = [ax * stride - h - base[i] for i, ax in enumerate(axes)]
    x0, y0, z0 = np.ix_(st[0], st[1], st[2])
    x1, y1, z1 = x0 + V, y0 + V, z0 + V
    count = (
        csum[x1, y1, z1] - csum[x0, y1, z1] - csum[x1, y0, z1] - csum[x1, y1, z0]
        + csum[x0, y0, z1] + csum[x0, y1, z0] + csum[x1, y0, z0] - csum[x0, y0, z0]
    )
    sel = np.argwhere(count > 0)  # row-major order is lexicographic
    lattice = sel + m_lo
    return smap.origin + lattice * stride * smap.voxel_size


# --------------------------------------------------------------------------- training data


def training_pairs(
    frames: Sequence,
    voxel_size: float,
    V: int,
    samples: int,
    seed: int,
    n_labels: int = 8,
    stride: int | None = None,
    random_yaw: bool = True,
    min_hits: int = 1,
    label_map: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Incomplete/complete subvolume pairs, returned as two (samples, V, V, V) code arrays.

    The complete map fuses every frame; each incomplete map fuses one frame.
    A sample picks a frame uniformly, then one of that frame's occupied
    lattice centers uniformly, and extracts both subvolumes at the same
    center and yaw.
    """
    if len(frames) < 2:
        raise ValueError("training pairs need at least two frames")
    stride = stride or max(V // 4, 1)
    rng = np.random.default_rng(seed)
    per_frame = [frame_votes(f, voxel_size, n_labels, label_map=label_map) for f in frames]
    complete_votes = per_frame[0]
    for v in per_frame[1:]:
        complete_votes = complete_votes.merge(v)
    complete = complete_votes.resolve(min_hits, "training-complete")
    partial = [v.resolve(min_hits, "training-incomplete") for v in per_frame]
    centers = [occupied_subvolume_centers(m, V, stride) for m in partial]
    usable = [i for i, c in enumerate(centers) if len(c)]
    if not usable:
        raise ValueError("no occupied voxels in any training frame")
    fi = rng.choice(usable, size=samples)
    inc = np.empty((samples, V, V, V), np.uint8)
    com = np.empty_like(inc)
    for n, f in enumerate(fi):
        c = centers[f][rng.integers(len(centers[f]))]
        yaw = rng.uniform(0, 2 * np.pi) if random_yaw else 0.0
        inc[n] = extract_subvolumes(partial[f], c, yaw, V)[0]
        com[n] = extract_subvolumes(complete, c, yaw, V)[0]
    return inc, com


# --------------------------------------------------------------------------- files


def save_map(smap: SemanticVoxelMap, path) -> None:
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<Id", MAP_VERSION, smap.voxel_size))
        f.write(np.asarray(smap.origin, "<f8").tobytes())
        f.write(struct.pack("<Q", len(smap)))
        rec = np.zeros(len(smap), dtype=[("x", "<i4"), ("y", "<i4"), ("z", "<i4"), ("s", "u1")])
        rec["x"], rec["y"], rec["z"] = smap.indices.T
        rec["s"] = smap.states
        f.write(rec.tobytes())


def load_map(path, n_labels: int = 8, role: str = "database") -> SemanticVoxelMap:
    data = Path(path).read_bytes()
    if data[:4] != MAP_MAGIC:
        raise ValueError("not a voxel map file")
    version, vs = struct.unpack_from("<Id", data, 4)
    if version != MAP_VERSION:
        raise ValueError(f"unsupported map version {version}")
    origin = np.frombuffer(data, "<f8", 3, 16)
    (n,) = struct.unpack_from("<Q", data, 40)
    dt = np.dtype([("x", "<i4"), ("y", "<i4"), ("z", "<i4"), ("s", "u1")])
    if len(data) != 48 + n * dt.itemsize:
        raise ValueError("truncated map file")
    rec = np.frombuffer(data, dt, n, 48)
    idx = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    return SemanticVoxelMap(vs, origin.copy(), idx, rec["s"].copy(), n_labels, role)


def save_subvolumes(grids: np.ndarray, path) -> None:
    grids = np.asarray(grids, dtype=np.uint8)
    n, V = grids.shape[0], grids.shape[1]
    with open(path, "wb") as f:
        f.write(SUBVOLUME_MAGIC)
        f.write(struct.pack("<II", V, n))
        # x-fastest: flat index i + V*j + V*V*k
        f.write(np.ascontiguousarray(grids.transpose(0, 3, 2, 1)).tobytes())


def load_subvolumes(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SUBVOLUME_MAGIC:
        raise ValueError("not a subvolume batch file")
    V, n = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + n * V**3:
        raise ValueError("truncated subvolume file")
    arr = np.frombuffer(data, np.uint8, n * V**3, 12).reshape(n, V, V, V)
    return arr.transpose(0, 3, 2, 1).copy()
