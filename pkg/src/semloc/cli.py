"""Command line interface: ``semloc <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import completion_net as cn
from . import pipeline as pl
from .scene_sim import (
    LAYOUTS,
    SCENARIOS,
    GroundTruthWorld,
    TrajectoryParams,
    desk_world_spec,
    generate_trajectory,
    generate_world,
    load_frame,
    load_trajectories,
    load_world_spec,
    render_view,
    save_frame,
    save_trajectories,
    save_world_spec,
)
from .geometry import body_pose
from .voxel_map import load_subvolumes, save_map, save_subvolumes, training_pairs
from .vocab_index import load_embedding, load_tree, save_embedding, save_tree
from .semantic_words import bag_of_words


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args) -> pl.PipelineConfig:
    base = pl.PRESETS[args.preset].to_dict()
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        overrides = overrides.get("config", overrides)
        base.update(overrides)
    base["seed"] = args.seed
    return pl.PipelineConfig.from_dict(base)


def _load_frames(frames_dir):
    d = Path(frames_dir)
    paths = sorted(d.glob("frame_*.svlf"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.svlf files in {d}")
    return [load_frame(p, frame_id=i) for i, p in enumerate(paths)]


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# --------------------------------------------------------------------------- subcommands


def cmd_gen_world(args):
    spec = load_world_spec(args.world_spec) if args.world_spec else desk_world_spec(args.layout)
    world = generate_world(spec, args.seed)
    out = _out(args)
    save_world_spec(spec, out / "world_spec.json")
    (out / "world.json").write_text(world.to_json())
    _emit({"world": str(out / "world.json"), "boxes": len(world.boxes), "cylinders": len(world.cylinders)})


def cmd_render(args):
    world = GroundTruthWorld.from_dict(json.loads(Path(args.world).read_text()))
    traj = generate_trajectory(world, args.scenario, TrajectoryParams(spacing=args.spacing, seed=args.seed))
    out = _out(args)
    save_trajectories(traj, out / "trajectories.json")
    for part in ("database", "query"):
        d = out / part
        d.mkdir(exist_ok=True)
        for i, pose in enumerate(getattr(traj, part)):
            save_frame(render_view(world, pose, frame_id=i), d / f"frame_{i:04d}.svlf")
    _emit({"database": len(traj.database), "query": len(traj.query), "out": str(out)})


def cmd_fuse(args):
    cfg = _config(args)
    smap = pl.fuse_frames(_load_frames(args.frames), cfg)
    out = _out(args)
    save_map(smap, out / "map.svlm")
    _emit({"voxels": len(smap), "occupied": int(smap.occupied_mask.sum()), "map": str(out / "map.svlm")})


def cmd_make_pairs(args):
    cfg = _config(args)
    inc, com = training_pairs(_load_frames(args.frames), cfg.voxel_size, cfg.V, args.samples, args.seed,
                              n_labels=cfg.map_labels, stride=cfg.stride, label_map=cfg.label_map)
    out = _out(args)
    save_subvolumes(inc, out / "incomplete.svlv")
    save_subvolumes(com, out / "complete.svlv")
    _emit({"pairs": len(inc), "majority_baseline": cn.majority_baseline(com)})


def cmd_train_net(args):
    cfg = _config(args)
    inc = load_subvolumes(Path(args.pairs) / "incomplete.svlv")
    com = load_subvolumes(Path(args.pairs) / "complete.svlv")
    tcfg = cn.TrainConfig(epochs=args.epochs or cfg.train_epochs, seed=args.seed)
    net, tlog = cn.train(inc, com, cfg.arch, tcfg)
    out = _out(args)
    cn.save_params(net, out / "net.svln")
    tlog.write_csv(out / "train_log.csv")
    _emit({"net": str(out / "net.svln"), "final_delta": tlog.delta[-1]})


def cmd_grad_check(args):
    arch = cn.NetArchitecture(V=8, n_labels=3, widths=(2, 3, 4), fc=8, N=8)
    net = cn.build_net(arch, seed=args.seed, dtype=cn.torch.float64)
    rng = np.random.default_rng(args.seed)
    inc = rng.integers(0, arch.c_in, size=(2, 8, 8, 8)).astype(np.uint8)
    com = rng.integers(0, arch.c_in, size=(2, 8, 8, 8)).astype(np.uint8)
    rep = cn.gradient_check(net, inc, com, args.h, n_params=args.n_params, seed=args.seed, return_details=True)
    _emit({"max_rel_error": rep.max_rel_error, "checked": rep.n_checked, "skipped": rep.n_skipped})


def cmd_build_vocab(args):
    cfg = _config(args)
    net = cn.load_params(args.net, cfg.arch)
    words = bag_of_words(pl.fuse_frames(_load_frames(args.frames), cfg), net, cfg.V, cfg.stride)
    vocab = pl.train_vocab(words.descriptors, cfg)
    out = _out(args)
    save_tree(vocab.tree, out / "vocab.svlt")
    save_embedding(vocab.embedding, out / "hamming.svlh")
    _emit({"training_words": len(words), "leaves": vocab.tree.n_leaves, "padded_nodes": vocab.tree.padded_nodes})


def cmd_build_db(args):
    cfg = _config(args)
    net = cn.load_params(args.net, cfg.arch)
    vocab = pl.Vocabulary(load_tree(Path(args.vocab) / "vocab.svlt"), load_embedding(Path(args.vocab) / "hamming.svlh"))
    db = pl.build_database(_load_frames(args.frames), net, vocab, cfg, out_dir=_out(args))
    _emit({"words": len(db.words), "voxels": len(db.map), "manifest": str(Path(args.out) / "manifest.json")})


def cmd_localize(args):
    cfg = _config(args)
    net = cn.load_params(args.net, cfg.arch)
    db = pl.load_database(args.db, cfg)
    frames = _load_frames(args.frames)
    if args.anchor is not None:
        lo = args.anchor - cfg.query_window + 1
        if lo < 0:
            raise ValueError("query window reaches before the first frame")
        frames = frames[lo : args.anchor + 1]
    res = pl.localize(frames, db, net, cfg, query_id=args.query_id, ground_truth=body_pose(frames[-1].pose))
    out = _out(args)
    pl.dump_hypotheses(res, out / f"{args.query_id}_hypotheses.csv")
    (out / f"{args.query_id}_result.json").write_text(json.dumps(result_to_dict(res), indent=2) + "\n")
    top = res.ranked[0] if res.ranked else None
    _emit({"query": args.query_id, "hypotheses": len(res.ranked),
           "top_ratio": top.ratio if top else None,
           "top_position_error_m": float(res.position_errors[0]) if top else None})


def result_to_dict(res: pl.LocalizationResult) -> dict:
    return {
        "query_id": res.query_id,
        "ground_truth": res.ground_truth.as_array().tolist() if res.ground_truth else None,
        "ranked": [{"ratio": h.ratio, "rms": h.rms, "n_corr": h.n_corr, "pose": h.pose.as_array().tolist()}
                   for h in res.ranked],
    }


def result_from_dict(d: dict) -> pl.LocalizationResult:
    ranked = []
    for n, h in enumerate(d["ranked"]):
        pose = pl.Pose.from_array(h["pose"])
        ranked.append(pl.PoseHypothesis(pose.yaw, pose.translation, rotation=pose.rotation, ratio=h["ratio"],
                                        rms=h["rms"], n_corr=h["n_corr"], order=n))
    gt = pl.Pose.from_array(d["ground_truth"]) if d["ground_truth"] is not None else None
    return pl.LocalizationResult(d["query_id"], ranked, gt)


def cmd_evaluate(args):
    paths = []
    for r in args.results:
        p = Path(r)
        paths.extend(sorted(p.glob("*_result.json")) if p.is_dir() else [p])
    results = [result_from_dict(json.loads(p.read_text())) for p in paths]
    cfg = _config(args)
    rows = pl.evaluate(results, max_rank=cfg.max_rank)
    out = _out(args)
    pl.write_recall_csv(rows, out / "recall.csv")
    _emit({"queries": len(results), "recall_at_1": {"1m": rows[0][1], "5m": rows[0][2]}})


def cmd_run_scenario(args):
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    spec = pl.ScenarioSpec.from_dict({k: v for k, v in data.items() if k != "config"}) if data else pl.ScenarioSpec()
    cfg_dict = pl.PRESETS[args.preset].to_dict()
    cfg_dict.update(data.get("config", {}))
    cfg_dict["seed"] = args.seed
    spec.config = pl.PipelineConfig.from_dict(cfg_dict)
    spec.seed = args.seed
    if args.scenario:
        spec.scenario = args.scenario
    net = vocab = None
    if args.net:
        net = cn.load_params(args.net, spec.config.arch)
    out = pl.run_scenario(spec, args.out, net=net, vocab=vocab)
    rows = list(pl.csv.reader(open(out / "recall.csv")))
    _emit({"report": str(out), "recall_at_1": dict(zip(rows[0][1:], rows[1][1:]))})


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with config overrides")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".")
    common.add_argument("--preset", choices=sorted(pl.PRESETS), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="semloc", description="Semantic visual localization on synthetic scenes.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-world", parents=[common], help="generate a synthetic world")
    s.add_argument("--layout", choices=LAYOUTS, default="loop")
    s.add_argument("--world-spec", help="world spec JSON (overrides --layout)")
    s.set_defaults(func=cmd_gen_world)

    s = sub.add_parser("render", parents=[common], help="render database and query frames")
    s.add_argument("--world", required=True)
    s.add_argument("--scenario", choices=SCENARIOS, default="Loop0")
    s.add_argument("--spacing", type=float, default=1.5)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fuse", parents=[common], help="fuse frames into a semantic voxel map")
    s.add_argument("--frames", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("make-pairs", parents=[common], help="extract incomplete/complete training pairs")
    s.add_argument("--frames", required=True)
    s.add_argument("--samples", type=int, default=5000)
    s.set_defaults(func=cmd_make_pairs)

    s = sub.add_parser("train-net", parents=[common], help="train the completion network")
    s.add_argument("--pairs", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_net)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check on a tiny net")
    s.add_argument("--h", type=float, default=1e-3)
    s.add_argument("--n-params", type=int, default=200)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("build-vocab", parents=[common], help="train vocabulary tree and Hamming embedding")
    s.add_argument("--frames", required=True, help="training frames (not the evaluation database)")
    s.add_argument("--net", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("build-db", parents=[common], help="build a database directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--net", required=True)
    s.add_argument("--vocab", required=True)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("localize", parents=[common], help="localize a query window against a database")
    s.add_argument("--frames", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--net", required=True)
    s.add_argument("--anchor", type=int, help="index of the last frame of the window")
    s.add_argument("--query-id", default="q")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", parents=[common], help="rank-recall table from localization results")
    s.add_argument("results", nargs="+", help="result JSON files or directories")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-scenario", parents=[common], help="run a full scenario and write a report")
    s.add_argument("--scenario", choices=SCENARIOS)
    s.add_argument("--net", help="pretrained network (skips training)")
    s.set_defaults(func=cmd_run_scenario)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # report every failure as a machine-readable record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
