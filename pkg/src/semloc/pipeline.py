"""End-to-end localization: database building, query localization, evaluation and scenario runs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import completion_net as cn
from .geometry import Pose, body_pose, wrap_angle
from .pose_align import (
    LabelScreen,
    PoseHypothesis,
    VerificationConfig,
    VoxelNNIndex,
    YAW_BUCKET,
    hypothesis_arrays,
    polish,
    rank_hypotheses,
    refine,
    write_hypotheses_csv,
)
from .scene_sim import (
    N_LABELS,
    GroundTruthWorld,
    TrajectoryParams,
    desk_world_spec,
    generate_trajectory,
    generate_world,
    nearest_yaw_differences,
    perturb_labels,
    perturb_world,
    render_view,
)
from .semantic_words import WordBag, bag_of_words, default_orientations, load_words, oriented_bags, save_words
from .voxel_map import SemanticVoxelMap, fuse, fuse_in_body_frame, load_map, save_map, training_pairs
from .vocab_index import (
    build_index,
    load_embedding,
    load_index,
    load_tree,
    query_knn_batch,
    save_embedding,
    save_index,
    save_tree,
    train_hamming,
    train_vocabulary,
)

log = logging.getLogger(__name__)

SEMANTIC_MODES = ("semantic", "geometric")
# fields that must agree between a database and the queries run against it
_COMPAT_FIELDS = ("voxel_size", "V", "stride", "N", "widths", "fc", "semantic_mode", "n_labels",
                  "vocab_branching", "vocab_depth", "n_bits", "min_hits")


class ConfigMismatchError(ValueError):
    pass


@dataclass
class PipelineConfig:
    voxel_size: float = 0.3
    V: int = 16
    stride: int = 4
    query_stride: int | None = 8  # lattice for query words; None uses ``stride``
    N: int = 32
    widths: tuple[int, int, int] = (16, 32, 64)
    fc: int = 256
    n_orientations: int = 18
    K: int = 5
    kappa: float = 3.0
    tau: float = 0.3
    vocab_branching: int = 8
    vocab_depth: int = 2
    n_bits: int = 32
    h_max: int | None = None
    multi_assign: int = 1
    semantic_mode: str = "semantic"
    query_window: int = 1
    n_labels: int = N_LABELS
    min_hits: int = 1
    screen_top: int = 20  # hypotheses refined on the full query map
    coarse_top: int = 100  # hypotheses polished on the point subsample
    coarse_iters: int = 8
    screen_points: int = 400
    dedupe_grid: float | None = None  # defaults to one voxel
    icp_mode: str = "se3"
    icp_max_iters: int = 20
    polish_steps: int = 10  # label-agreement hill climb after ICP, 0 disables
    max_rank: int = 10
    train_pairs: int = 5000
    train_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        for name in ("voxel_size", "V", "stride", "N", "n_orientations", "K", "kappa", "query_window",
                     "vocab_branching", "vocab_depth", "n_bits", "screen_top", "max_rank"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.query_window < 1:
            raise ValueError("query_window must be >= 1")

    @property
    def map_labels(self) -> int:
        """Label count inside maps and the net (1 in geometric mode)."""
        return 1 if self.semantic_mode == "geometric" else self.n_labels

    @property
    def label_map(self) -> np.ndarray | None:
        if self.semantic_mode == "semantic":
            return None
        return np.array([0] + [1] * self.n_labels, dtype=np.int64)

    @property
    def arch(self) -> cn.NetArchitecture:
        return cn.NetArchitecture(V=self.V, n_labels=self.map_labels, widths=self.widths, fc=self.fc, N=self.N)

    @property
    def verification(self) -> VerificationConfig:
        return VerificationConfig(kappa=self.kappa, tau=self.tau, icp_max_iters=self.icp_max_iters, icp_mode=self.icp_mode)

    def compat(self) -> dict:
        d = asdict(self)
        return {k: (list(d[k]) if isinstance(d[k], tuple) else d[k]) for k in _COMPAT_FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": PipelineConfig(),
    "large": PipelineConfig(V=32, N=256, widths=(8, 16, 32), stride=8, vocab_branching=256, vocab_depth=2, n_bits=64),
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def net_digest(net: cn.CompletionNet) -> str:
    h = hashlib.sha256()
    for _, p in net.named_parameters():
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- database


@dataclass
class Vocabulary:
    tree: object
    embedding: object


@dataclass
class Database:
    config: PipelineConfig
    map: SemanticVoxelMap
    words: WordBag
    index: object
    manifest: dict = field(default_factory=dict)
    _nn: VoxelNNIndex | None = field(default=None, repr=False)
    _screen: LabelScreen | None = field(default=None, repr=False)

    @property
    def nn(self) -> VoxelNNIndex:
        if self._nn is None:
            self._nn = VoxelNNIndex(self.map, self.config.kappa)
        return self._nn

    @property
    def screen(self) -> LabelScreen:
        if self._screen is None:
            self._screen = LabelScreen(self.map, self.config.kappa)
        return self._screen


def fuse_frames(frames, config: PipelineConfig, role: str = "database") -> SemanticVoxelMap:
    return fuse(frames, config.voxel_size, config.map_labels, min_hits=config.min_hits, role=role, label_map=config.label_map)


def train_vocab(descriptors, config: PipelineConfig) -> Vocabulary:
    tree = train_vocabulary(descriptors, config.vocab_branching, config.vocab_depth, seed=config.seed)
    emb = train_hamming(tree, descriptors, config.n_bits, seed=config.seed)
    return Vocabulary(tree, emb)


_DB_FILES = {"map": "map.svlm", "words": "words.svlw", "tree": "vocab.svlt", "embedding": "hamming.svlh", "index": "index.svli"}


def build_database(frames, net: cn.CompletionNet, vocab: Vocabulary, config: PipelineConfig, out_dir=None) -> Database:
    """Fuse the database frames, describe every occupied subvolume and index the words."""
    _check_net(net, config)
    smap = fuse_frames(frames, config)
    words = bag_of_words(smap, net, config.V, config.stride, map_id="database")
    if len(words) == 0:
        raise ValueError("database map has no occupied subvolumes")
    index = build_index(vocab.tree, vocab.embedding, words.descriptors)
    db = Database(config, smap, words, index)
    if out_dir is not None:
        write_database(db, out_dir, net)
    return db


def write_database(db: Database, out_dir, net: cn.CompletionNet | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_map(db.map, out / _DB_FILES["map"])
    save_words(db.words, out / _DB_FILES["words"])
    save_tree(db.index.tree, out / _DB_FILES["tree"])
    save_embedding(db.index.embedding, out / _DB_FILES["embedding"])
    save_index(db.index, out / _DB_FILES["index"])
    manifest = {
        "version": 1,
        "config": db.config.compat(),
        "net_sha256": net_digest(net) if net is not None else None,
        "n_words": len(db.words),
        "n_voxels": len(db.map),
        "files": {name: sha256_file(out / name) for name in sorted(_DB_FILES.values())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    db.manifest = manifest
    return manifest


def load_database(db_dir, config: PipelineConfig) -> Database:
    d = Path(db_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest["config"] != config.compat():
        raise ConfigMismatchError(f"database at {d} was built with an incompatible config")
    for name, digest in manifest["files"].items():
        if sha256_file(d / name) != digest:
            raise ValueError(f"checksum mismatch for {name}")
    tree = load_tree(d / _DB_FILES["tree"])
    emb = load_embedding(d / _DB_FILES["embedding"])
    return Database(
        config,
        load_map(d / _DB_FILES["map"], n_labels=config.map_labels),
        load_words(d / _DB_FILES["words"], map_id="database"),
        load_index(d / _DB_FILES["index"], tree, emb),
        manifest,
    )


def _check_net(net: cn.CompletionNet, config: PipelineConfig) -> None:
    if net.arch != config.arch:
        raise ConfigMismatchError(f"network architecture {net.arch} does not match config {config.arch}")


# --------------------------------------------------------------------------- localization


@dataclass
class LocalizationResult:
    query_id: str
    ranked: list[PoseHypothesis]
    ground_truth: Pose | None = None
    n_words: int = 0
    n_hypotheses: int = 0
    seconds: float = 0.0

    @property
    def poses(self) -> list[Pose]:
        return [h.pose for h in self.ranked]

    @property
    def position_errors(self) -> np.ndarray:
        if self.ground_truth is None:
            return np.full(len(self.ranked), np.nan)
        return np.array([np.linalg.norm(h.translation - self.ground_truth.translation) for h in self.ranked])

    @property
    def yaw_errors_deg(self) -> np.ndarray:
        if self.ground_truth is None:
            return np.full(len(self.ranked), np.nan)
        return np.array([abs(np.degrees(wrap_angle(h.yaw - self.ground_truth.yaw))) for h in self.ranked])


def _dedupe_refined(ranked: list[PoseHypothesis], grid: float) -> list[PoseHypothesis]:
    seen, out = set(), []
    n_buckets = int(round(2 * np.pi / YAW_BUCKET))
    for h in ranked:
        key = (int(np.round(np.mod(h.yaw, 2 * np.pi) / YAW_BUCKET)) % n_buckets, *np.floor(h.translation / grid).astype(int))
        if key not in seen:
            seen.add(key)
            out.append(h)
    return out


def localize_map(qmap: SemanticVoxelMap, db: Database, net: cn.CompletionNet, config: PipelineConfig, query_id: str = "q",
                 ground_truth: Pose | None = None) -> LocalizationResult:
    """Estimate the pose mapping query-map coordinates into database coordinates."""
    t0 = time.perf_counter()
    if db.config.compat() != config.compat():
        raise ConfigMismatchError("query config does not match the database config")
    _check_net(net, config)
    idx, labels = qmap.occupied()
    if len(labels) == 0:
        return LocalizationResult(query_id, [], ground_truth, seconds=time.perf_counter() - t0)
    pts = qmap.voxel_centers(idx)
    bags = oriented_bags(qmap, net, config.V, config.query_stride or config.stride,
                         default_orientations(config.n_orientations), map_id=query_id)
    words = WordBag.concat(bags)
    if len(words) == 0:
        return LocalizationResult(query_id, [], ground_truth, seconds=time.perf_counter() - t0)
    refs, _ = query_knn_batch(db.index, words.descriptors, config.K, config.h_max, config.multi_assign)
    counts = np.array([len(r) for r in refs])
    qi = np.repeat(np.arange(len(words)), counts)
    di = np.concatenate(refs) if counts.sum() else np.empty(0, np.int64)
    grid = config.dedupe_grid or config.voxel_size
    yaws, ts, keep = hypothesis_arrays(words.centers[qi], words.yaws[qi], db.words.centers[di], grid)
    if len(yaws) == 0:
        return LocalizationResult(query_id, [], ground_truth, len(words), 0, time.perf_counter() - t0)
    # screen everything on a point subsample, polish the best few hundred
    # with short ICP runs on that subsample, then fully refine the survivors
    step = max(1, int(np.ceil(len(labels) / config.screen_points)))
    sub = (pts[::step], labels[::step])
    scores = db.screen.scores(sub[0], sub[1], yaws, ts)
    top = np.argsort(-scores, kind="stable")[: config.coarse_top]
    vcfg = config.verification
    coarse_cfg = replace(vcfg, icp_max_iters=config.coarse_iters)
    coarse = [
        refine(PoseHypothesis(float(yaws[i]), ts[i], (int(qi[keep[i]]), int(di[keep[i]])), order=int(i)), sub, db.nn, coarse_cfg)
        for i in top
    ]
    survivors = _dedupe_refined(rank_hypotheses(coarse, 0.0), grid)[: config.screen_top]
    refined = [refine(h, (pts, labels), db.nn, vcfg) for h in survivors]
    refined = [polish(h, (pts, labels), db.nn, db.screen, config.polish_steps) for h in refined]
    ranked = _dedupe_refined(rank_hypotheses(refined, config.tau), grid)
    return LocalizationResult(query_id, ranked, ground_truth, len(words), len(yaws), time.perf_counter() - t0)


def localize(frames, db: Database, net: cn.CompletionNet, config: PipelineConfig, query_id: str = "q",
             ground_truth: Pose | None = None) -> LocalizationResult:
    """Fuse a query window in the body frame of its last frame and localize it."""
    if len(frames) == 0:
        raise ValueError("empty query window")
    if db.config.compat() != config.compat():
        raise ConfigMismatchError("query config does not match the database config")
    qmap = fuse_in_body_frame(frames, frames[-1].pose, config.voxel_size, config.map_labels,
                              min_hits=config.min_hits, role="query", label_map=config.label_map)
    return localize_map(qmap, db, net, config, query_id, ground_truth)


# --------------------------------------------------------------------------- evaluation


def evaluate(results, thresholds=(1.0, 5.0), max_rank: int = 10) -> list[tuple]:
    """Rows (rank, recall at each threshold): fraction of queries with a rank <= r pose within the threshold."""
    for r in results:
        if r.ground_truth is None:
            raise ValueError(f"result {r.query_id} carries no ground truth")
    n = len(results)
    best = np.full((n, max_rank), np.inf)
    for i, r in enumerate(results):
        err = r.position_errors[:max_rank]
        if len(err):
            best[i, : len(err)] = np.minimum.accumulate(err)
            best[i, len(err):] = best[i, len(err) - 1]
    rows = []
    for rank in range(1, max_rank + 1):
        rows.append((rank, *[float((best[:, rank - 1] < th).mean()) if n else 0.0 for th in thresholds]))
    return rows


def write_recall_csv(rows, path, thresholds=(1.0, 5.0)) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", *[f"recall_{th:g}m" for th in thresholds]])
        for rank, *vals in rows:
            w.writerow([rank, *[f"{v:.6f}" for v in vals]])


def recall_at(rows, rank: int, column: int) -> float:
    return rows[rank - 1][column]


# --------------------------------------------------------------------------- scenarios


@dataclass
class ScenarioSpec:
    scenario: str = "Loop0"
    seed: int = 0
    n_worlds: int = 20  # intersections for Loop90/Loop180
    queries_per_world: int = 2
    query_spacing: int = 3  # frames between consecutive query anchors
    max_queries: int = 72
    flip_rate: float = 0.1
    remove_fraction: float = 0.1
    add_count: int = 4
    viewpoint_tolerance_deg: float = 20.0
    spacing: float = 1.5
    reach: float = 15.0  # database extent along road A for Loop90/Loop180
    train_seed_offset: int = 10_000
    config: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        cfg = PipelineConfig.from_dict(d.pop("config", {}))
        return cls(config=cfg, **d)


_TARGET_YAW = {"Loop0": None, "CrossTime": None, "Loop90": 90.0, "Loop180": 180.0}


def render_frames(world: GroundTruthWorld, poses) -> list:
    return [render_view(world, p, frame_id=i) for i, p in enumerate(poses)]


def training_world(spec: ScenarioSpec) -> GroundTruthWorld:
    return generate_world(desk_world_spec("loop"), spec.seed + spec.train_seed_offset)


def train_scenario_net(spec: ScenarioSpec, on_epoch=None):
    """Train a net on a separate training world; returns (net, log, training frames)."""
    cfg = spec.config
    world = training_world(spec)
    traj = generate_trajectory(world, "Loop0", TrajectoryParams(spacing=1.0, seed=spec.seed))
    frames = render_frames(world, traj.database)
    inc, com = training_pairs(frames, cfg.voxel_size, cfg.V, cfg.train_pairs, spec.seed, n_labels=cfg.map_labels,
                              stride=cfg.stride, label_map=cfg.label_map)
    tcfg = cn.TrainConfig(epochs=cfg.train_epochs, seed=spec.seed)
    net, tlog = cn.train(inc, com, cfg.arch, tcfg, on_epoch=on_epoch)
    return net, tlog, frames


def scenario_vocabulary(spec: ScenarioSpec, net: cn.CompletionNet, frames=None) -> Vocabulary:
    """Vocabulary trained on training-world descriptors, never on an evaluation database."""
    cfg = spec.config
    if frames is None:
        world = training_world(spec)
        frames = render_frames(world, generate_trajectory(world, "Loop0", TrajectoryParams(spacing=1.0, seed=spec.seed)).database)
    words = bag_of_words(fuse_frames(frames, cfg), net, cfg.V, cfg.stride)
    return train_vocab(words.descriptors, cfg)


@dataclass
class _Query:
    qid: str
    world: int
    frames: list
    gt: Pose
    yaw_diff: float


def _eval_worlds(spec: ScenarioSpec):
    """Yields (world index, world, database poses, list of (query id, query window poses, anchor))."""
    cfg = spec.config
    w = cfg.query_window
    if spec.scenario in ("Loop0", "CrossTime"):
        world = generate_world(desk_world_spec("loop"), spec.seed)
        traj = generate_trajectory(world, spec.scenario, TrajectoryParams(spacing=spec.spacing, seed=spec.seed))
        n = len(traj.query)
        anchors = np.linspace(0, n - 1, min(spec.max_queries, n)).round().astype(int)
        queries = [(f"q{a:03d}", [traj.query[(a - k) % n] for k in range(w - 1, -1, -1)]) for a in anchors]
        yield 0, world, traj.database, queries
        return
    layout = "cross"
    for k in range(spec.n_worlds):
        seed = spec.seed + k
        world = generate_world(desk_world_spec(layout), seed)
        traj = generate_trajectory(world, spec.scenario, TrajectoryParams(spacing=spec.spacing, reach=spec.reach, seed=seed))
        n = len(traj.query)
        anchors = [n - 1 - j * spec.query_spacing for j in range(spec.queries_per_world)]
        anchors = sorted(a for a in anchors if a - (w - 1) >= 0)
        queries = [(f"w{k:02d}q{a:02d}", traj.query[a - w + 1 : a + 1]) for a in anchors]
        yield k, world, traj.database, queries


def _filter_viewpoints(db_poses, query_poses, target: float | None, tol: float):
    if target is None or not query_poses:
        return list(db_poses)
    qyaw = np.mean([body_pose(p).yaw for p in query_poses])
    keep = [p for p in db_poses if abs(abs(np.degrees(wrap_angle(body_pose(p).yaw - qyaw))) - target) <= tol]
    return keep


def run_scenario(spec: ScenarioSpec, out_dir, net: cn.CompletionNet | None = None, vocab: Vocabulary | None = None,
                 keep_databases: bool = False) -> Path:
    """Run a full scenario and write its report directory.

    The report holds ``recall.csv``, per-query top-3 poses in ``queries.csv``,
    a database/query heading audit in ``pose_audit.csv``, ``config.json`` and a
    checksum ``manifest.json``.  On failure, partial results are flushed next
    to a ``FAILED`` marker and the exception is re-raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = spec.config
    (out / "config.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    results: list[LocalizationResult] = []
    audit: list[tuple] = []
    artifacts: dict[str, str] = {}
    t_start = time.perf_counter()
    try:
        if net is None:
            net, tlog, train_frames = train_scenario_net(spec)
            tlog.write_csv(out / "train_log.csv")
            cn.save_params(net, out / "net.svln")
            vocab = vocab or scenario_vocabulary(spec, net, train_frames)
        _check_net(net, cfg)
        vocab = vocab or scenario_vocabulary(spec, net)
        artifacts["net"] = net_digest(net)
        target = _TARGET_YAW[spec.scenario]
        for k, world, db_poses, queries in _eval_worlds(spec):
            qposes = [q[1][-1] for q in queries]
            db_poses = _filter_viewpoints(db_poses, qposes, target, spec.viewpoint_tolerance_deg)
            if not db_poses:
                raise RuntimeError(f"viewpoint filter removed every database pose in world {k}")
            db_dir = out / "db" / f"world{k:02d}"
            db = build_database(render_frames(world, db_poses), net, vocab, cfg, out_dir=db_dir)
            for name, digest in db.manifest["files"].items():
                artifacts[f"world{k:02d}/{name}"] = digest
            if not keep_databases:
                for name in db.manifest["files"]:
                    (db_dir / name).unlink()
            qworld = world
            if spec.scenario == "CrossTime":
                qworld = perturb_world(world, spec.remove_fraction, spec.add_count, spec.seed + 1)
            diffs = nearest_yaw_differences(db_poses, qposes) if qposes else []
            for (qid, window), diff in zip(queries, diffs):
                frames = render_frames(qworld, window)
                if spec.scenario == "CrossTime":
                    frames = [perturb_labels(f, spec.flip_rate, spec.seed + 7 * i + 1, cfg.n_labels) for i, f in enumerate(frames)]
                gt = body_pose(window[-1])
                res = localize(frames, db, net, cfg, query_id=qid, ground_truth=gt)
                results.append(res)
                audit.append((qid, k, float(diff), target))
                log.info("%s: %d hypotheses, top error %s", qid, len(res.ranked),
                         f"{res.position_errors[0]:.2f} m" if res.ranked else "none")
    except Exception as exc:
        _write_reports(out, spec, results, audit, artifacts)
        (out / "FAILED").write_text(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                                "traceback": traceback.format_exc()}, indent=2) + "\n")
        raise
    _write_reports(out, spec, results, audit, artifacts)
    elapsed = time.perf_counter() - t_start
    (out / "timing.json").write_text(json.dumps({
        "seconds": elapsed, "queries": len(results),
        "seconds_per_query": float(np.mean([r.seconds for r in results])) if results else None}, indent=2) + "\n")
    return out


def _write_reports(out: Path, spec: ScenarioSpec, results, audit, artifacts) -> None:
    cfg = spec.config
    rows = evaluate(results, max_rank=cfg.max_rank)
    write_recall_csv(rows, out / "recall.csv")
    with open(out / "queries.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "rank", "ratio", "pos_err_m", "yaw_err_deg", "tx", "ty", "tz", "yaw_deg",
                    "gt_tx", "gt_ty", "gt_tz", "gt_yaw_deg"])
        for r in results:
            g = r.ground_truth
            gt_cols = [f"{v:.4f}" for v in g.translation] + [f"{np.degrees(g.yaw):.3f}"]
            if not r.ranked:
                w.writerow([r.query_id, 0, "", "", "", "", "", "", "", *gt_cols])
            for rank, (h, pe, ye) in enumerate(zip(r.ranked[:3], r.position_errors, r.yaw_errors_deg), 1):
                w.writerow([r.query_id, rank, f"{h.ratio:.6f}", f"{pe:.4f}", f"{ye:.3f}",
                            *(f"{v:.4f}" for v in h.translation), f"{np.degrees(wrap_angle(h.yaw)):.3f}", *gt_cols])
    with open(out / "pose_audit.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "world", "yaw_diff_to_nearest_db_deg", "target_deg", "within_tolerance"])
        for qid, k, diff, target in audit:
            ok = True if target is None else abs(diff - target) <= spec.viewpoint_tolerance_deg
            w.writerow([qid, k, f"{diff:.3f}", "" if target is None else f"{target:g}", int(ok)])
    report_files = ["config.json", "recall.csv", "queries.csv", "pose_audit.csv"]
    manifest = {
        "scenario": spec.scenario,
        "seed": spec.seed,
        "n_queries": len(results),
        "reports": {name: sha256_file(out / name) for name in report_files},
        "artifacts": dict(sorted(artifacts.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def dump_hypotheses(result: LocalizationResult, path) -> None:
    write_hypotheses_csv(result.ranked, path)
