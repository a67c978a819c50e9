"""Command-line entry point: ``hdformer {train,eval,infer,attn,synth,validate}``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import asdict

from . import dataio
from .attention import dump_attention, read_attention_map, save_dump
from .config import load_run_config
from .errors import HDFormerError
from .estimator import HDFormerRegressor
from .metrics import PROTOCOLS, evaluate
from .network import load_checkpoint
from .skeleton import build_skeleton, load_topology, parse_topology

log = logging.getLogger("hdformer")

POSE_EXT = ".pose"


def _pairs(directory):
    """(name, 2D path, 3D path) for every ``<name>_2d.pose`` with a ``_3d`` twin."""
    out = []
    for p2 in sorted(glob.glob(os.path.join(directory, f"*_2d{POSE_EXT}"))):
        name = os.path.basename(p2)[: -len(f"_2d{POSE_EXT}")]
        p3 = os.path.join(directory, f"{name}_3d{POSE_EXT}")
        if os.path.exists(p3):
            out.append((name, p2, p3))
    if not out:
        raise HDFormerError(f"no *_2d{POSE_EXT} / *_3d{POSE_EXT} pairs found in {directory}")
    return out


def _load_pairs(directory):
    seqs = []
    for name, p2, p3 in _pairs(directory):
        s2 = dataio.load_sequence(p2, channels=2)
        s3 = dataio.load_sequence(p3, channels=3)
        seqs.append((name, s2, s3))
    return seqs


def write_synthetic(out_dir, topology, sequences, frames, seed, noise=0.0):
    graph = load_topology(topology)
    os.makedirs(out_dir, exist_ok=True)
    s2, s3 = dataio.synth_dataset(graph, sequences, frames, seed, noise=noise)
    paths = []
    for k, (a, b) in enumerate(zip(s2, s3)):
        base = os.path.join(out_dir, f"synth_{k:03d}")
        dataio.save_sequence(base + f"_2d{POSE_EXT}", dataio.PoseSequence(a, topology, action="synthetic"))
        dataio.save_sequence(base + f"_3d{POSE_EXT}", dataio.PoseSequence(b, topology, action="synthetic"))
        paths.append(base)
    return paths


def _estimator_from_run(run):
    m = run.raw["model"]
    o = run.raw["optim"]
    kw = {k: v for k, v in m.items() if k != "joints"}
    for key in ("channels", "hoa_placement"):
        kw[key] = tuple(kw[key])
    return HDFormerRegressor(
        **kw,
        lr=o["lr"], lr_decay=o["decay"], milestones=tuple(o["milestones"]), epochs=o["epochs"],
        batch_size=o["batch_size"], weight_decay=o["weight_decay"], optimizer=o["method"],
        max_steps=o["max_steps"], lam=run.raw["loss"]["lam"],
        motion_intervals=tuple(run.raw["loss"]["intervals"]), random_state=run.seed)


# ------------------------------------------------------------------- commands


def cmd_train(args):
    run = load_run_config(args.config, args.set)
    out_dir = args.out or run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    run.raw["out_dir"] = out_dir
    run.dump(os.path.join(out_dir, "resolved_config.yaml"))
    model_cfg = run.model_config()
    graph = load_topology(model_cfg.topology)
    if graph.joint_count != model_cfg.joints:
        raise HDFormerError(f"model.joints: {model_cfg.joints} does not match topology "
                            f"{model_cfg.topology!r} with {graph.joint_count} joints")
    data = run.data
    if data["train"] is None:
        syn = data["synthetic"]
        train_dir = os.path.join(out_dir, "data")
        write_synthetic(train_dir, model_cfg.topology, syn["sequences"], syn["frames"],
                        syn["seed"], syn.get("noise", 0.0))
    else:
        train_dir = data["train"]
    seqs = _load_pairs(train_dir)
    T = model_cfg.frames
    ds = dataio.make_windows([s[1].data for s in seqs], [s[2].data for s in seqs], T,
                             data["window_stride"])
    if len(ds) == 0:
        raise HDFormerError(f"no complete {T}-frame windows in {train_dir}")
    X_val = y_val = None
    if data["val"]:
        vs = _load_pairs(data["val"])
        vds = dataio.make_windows([s[1].data for s in vs], [s[2].data for s in vs], T, data["window_stride"])
        X_val, y_val = vds.x, vds.y
    est = _estimator_from_run(run)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w") as fh:
        def log_fn(rec):
            fh.write(json.dumps(asdict(rec)) + "\n")
            fh.flush()
            print(f"epoch {rec.epoch:4d}  lr {rec.lr:.2e}  loss {rec.train_loss:.6f}  "
                  f"val {rec.val_mpjpe:.6f} (normalised units)")

        est.fit(ds.x, ds.y, X_val, y_val, out_dir=out_dir, log_fn=log_fn)
    est.save(os.path.join(out_dir, "last.ckpt"))
    print(f"trained {est.report_.steps} steps on {len(ds)} windows; "
          f"params {est.model_.num_parameters()}; outputs in {out_dir}")
    return 0


def _load_estimator(path):
    if not os.path.exists(path):
        raise HDFormerError(f"checkpoint not found: {path}")
    return HDFormerRegressor.load(path)


def cmd_eval(args):
    est = _load_estimator(args.checkpoint)
    root = est.graph_.root
    samples = []
    for name, s2, s3 in _load_pairs(args.data):
        pred = est.predict_sequence(s2.data, step=args.step)
        gt, _ = dataio.root_center(s3.data, root)
        samples.append((s3.action or name, pred, gt))
    report = evaluate(samples, args.protocol)
    print(report.to_text())
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report.to_json())
    return 0


def _read_input(path, est):
    if path.endswith(POSE_EXT) or not os.path.splitext(path)[1]:
        return dataio.load_sequence(path, channels=2)
    return dataio.import_text(path, est.model_.cfg.joints, 2, est.model_.cfg.topology)


def cmd_infer(args):
    est = _load_estimator(args.checkpoint)
    seq = _read_input(args.input, est)
    pred = est.predict_sequence(seq.data, step=args.step, stitch=args.stitch)
    dataio.save_sequence(args.out, dataio.PoseSequence(pred, seq.topology, seq.fps, seq.action))
    print(f"wrote {len(pred)} frames to {args.out}")
    return 0


def cmd_attn(args):
    est = _load_estimator(args.checkpoint)
    seq = _read_input(args.input, est)
    T = est.model_.cfg.frames
    if len(seq.data) < T:
        raise HDFormerError(f"sequence of {len(seq.data)} frames is shorter than T={T}; "
                            f"pad the sequence to at least {T} frames")
    if not 0 <= args.offset <= len(seq.data) - T:
        raise HDFormerError(f"--offset must lie in [0, {len(seq.data) - T}] for this sequence")
    window = est.scaler_in_.transform(seq.data[None, args.offset:args.offset + T])
    est.model_.set_recording(True)
    dump = dump_attention(est.model_, window)
    paths = save_dump(dump, args.out_dir, est.model_.index)
    print(f"wrote {len(dump)} attention maps to {args.out_dir}")
    for p in paths:
        print("  " + p)
    return 0


def cmd_synth(args):
    paths = write_synthetic(args.out, args.topology, args.sequences, args.frames, args.seed, args.noise)
    print(f"wrote {len(paths)} sequence pairs to {args.out}")
    return 0


def _validate_one(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"HDFPOSE"):
        s = dataio.load_sequence(path)
        return f"pose sequence: {s.frames} frames, {s.joints} joints, {s.channels} channels"
    if head.startswith(b"HDFCKPT"):
        model, _ = load_checkpoint(path)
        return f"checkpoint: {model.num_parameters()} parameters, step {model.step}"
    if head.startswith(b"HDFATTN"):
        a = read_attention_map(path)
        return f"attention map: {a.block} {a.kind} {a.weights.shape}"
    if path.endswith((".yaml", ".yml")):
        load_run_config(path)
        return "run config"
    with open(path) as fh:
        g = build_skeleton(parse_topology(fh.read()))
    return f"topology: {g.joint_count} joints, root {g.root}"


def cmd_validate(args):
    bad = 0
    for path in args.files:
        try:
            print(f"OK   {path}: {_validate_one(path)}")
        except (HDFormerError, OSError, ValueError) as exc:
            bad += 1
            print(f"FAIL {path}: {exc}")
    return 1 if bad else 0


# --------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="hdformer", description="2D-to-3D pose lifting with HDFormer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", help="YAML run config (defaults are used for missing keys)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, dotted or unambiguous leaf name; repeatable")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a directory of pose pairs")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="directory with <name>_2d.pose / <name>_3d.pose pairs")
    e.add_argument("--protocol", default="mpjpe", choices=sorted(PROTOCOLS),
                   help="metric set to report")
    e.add_argument("--step", type=int, default=5, help="sliding window step")
    e.add_argument("--json", help="also write the report as JSON here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="lift a 2D sequence to 3D")
    i.add_argument("--checkpoint", required=True, help="checkpoint file")
    i.add_argument("--input", required=True, help="2D pose file (.pose, .json or text)")
    i.add_argument("--out", required=True, help="output 3D .pose file")
    i.add_argument("--step", type=int, default=5, help="sliding window step")
    i.add_argument("--stitch", default="mean", choices=["mean", "last"], help="overlap resolution")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("attn", help="dump attention maps for one window")
    a.add_argument("--checkpoint", required=True, help="checkpoint file")
    a.add_argument("--input", required=True, help="2D pose file")
    a.add_argument("--out-dir", required=True, help="directory for .attn files and legend.txt")
    a.add_argument("--offset", type=int, default=0, help="first frame of the window")
    a.set_defaults(func=cmd_attn)

    s = sub.add_parser("synth", help="write synthetic 2D/3D sequence pairs")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--topology", default="h36m", help="built-in name or topology file")
    s.add_argument("--sequences", type=int, default=8, help="number of sequences")
    s.add_argument("--frames", type=int, default=96, help="frames per sequence")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--noise", type=float, default=0.0, help="2D noise std")
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="check pose, checkpoint, attention, config or topology files")
    v.add_argument("files", nargs="+", help="files to check")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HDFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
