"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import kernels
from .conditioning import ConditionBundle
from .dataset import SyntheticSpec, generate_synthetic_dataset, load_manifest, read_dataset, read_clip
from .denoiser import load_model, save_model
from .errors import ArtifactError
from .evaluation import evaluate_run, make_landmark_basis
from .motion import KINDS, NormalizationStats
from .pipeline import GenerationRequest, export_for_renderer, generate_talking_motion, read_export
from .tensor import NumericsError
from .trainer import TrainConfig, train_model

log = logging.getLogger("talkmotion")
OUT_ENV = "TALKMOTION_OUT"


class UsageError(Exception):
    pass


def _default_out(sub):
    base = os.environ.get(OUT_ENV)
    return Path(base) / sub if base else None


def _positive(value):
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="talkmotion", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    spec = SyntheticSpec()
    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--clips", type=_positive, default=spec.clips)
    g.add_argument("--frames", type=_positive, default=spec.frames)
    g.add_argument("--seed", type=int, default=spec.seed)
    g.add_argument("--train-ratio", type=float, default=0.8)
    g.add_argument("--dwell-min", type=_positive, default=spec.dwell_min)
    g.add_argument("--dwell-max", type=_positive, default=spec.dwell_max)
    g.add_argument("--audio-dim", type=_positive, default=spec.audio_dim)
    g.add_argument("--text-dim", type=_positive, default=spec.text_dim)
    g.add_argument("--out", type=Path, default=_default_out("data"))

    tc = TrainConfig()
    t = sub.add_parser("train", help="train one kind-specific denoiser")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--kind", choices=KINDS, required=True)
    t.add_argument("--out", type=Path, default=None, help="checkpoint path")
    t.add_argument("--log", type=Path, default=None, help="per-step JSON-lines loss log")
    for f in fields(TrainConfig):
        if f.name in ("kind", "zero_conditions"):
            continue
        t.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(tc, f.name)),
                       default=getattr(tc, f.name))
    t.add_argument("--zero-conditions", action="store_true",
                   help="replace every condition by zeros (unconditional baseline)")

    gen = sub.add_parser("generate", help="generate motion for dataset clips and export it")
    gen.add_argument("--data", type=Path, required=True)
    for kind in KINDS:
        gen.add_argument(f"--{kind}", type=Path, required=True, help=f"{kind} checkpoint")
    gen.add_argument("--out", type=Path, default=_default_out("generated"))
    gen.add_argument("--split", default="test")
    gen.add_argument("--chunk", type=_positive, default=32)
    gen.add_argument("--total-frames", type=_positive, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--limit", type=_positive, default=None, help="only the first N clips")
    gen.add_argument("--no-head-pose", action="store_true", help="freeze head pose at frame 1")

    e = sub.add_parser("eval", help="F-LMD / M-LMD of generated motion against ground truth")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--gen", type=Path, required=True)
    e.add_argument("--out", type=Path, default=_default_out("eval"))
    e.add_argument("--split", default="test")
    e.add_argument("--basis-seed", type=int, default=0)

    i = sub.add_parser("inspect", help="describe a checkpoint, dataset, or export")
    i.add_argument("path", type=Path)
    return p


def cmd_gen_data(args):
    if not 0 < args.train_ratio < 1:
        raise UsageError("--train-ratio must lie strictly between 0 and 1")
    if args.dwell_max < args.dwell_min:
        raise UsageError("--dwell-max must be >= --dwell-min")
    spec = SyntheticSpec(clips=args.clips, frames=args.frames, seed=args.seed, dwell_min=args.dwell_min,
                         dwell_max=args.dwell_max, audio_dim=args.audio_dim, text_dim=args.text_dim)
    manifest = generate_synthetic_dataset(spec, args.out, train_ratio=args.train_ratio)
    print(manifest.path)


def cmd_train(args):
    manifest = load_manifest(args.data)
    clips = read_dataset(manifest, split="train")
    if not clips:
        raise ValueError("dataset has no training clips")
    cfg = TrainConfig(kind=args.kind, **{f.name: getattr(args, f.name) for f in fields(TrainConfig)
                                         if f.name != "kind"})
    stats = NormalizationStats.fit([c.motion for c in clips])
    out = args.out or Path(f"{args.kind}.tmdm")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out.with_suffix(".log.jsonl")
    with open(log_path, "w") as fh:
        model, report = train_model(clips, cfg, stats, manifest.layout, log=fh,
                                    checkpoint_dir=out.parent, vocab=manifest.vocab)
    save_model(model, out)
    print(json.dumps({"checkpoint": str(out), "log": str(log_path), "initial_loss": report.initial_loss,
                      "final_loss": report.final_loss, "wall_time_s": round(report.wall_time, 2)}))


def cmd_generate(args):
    manifest = load_manifest(args.data)
    ids = manifest.ids(args.split)
    if args.limit:
        ids = ids[:args.limit]
    if not ids:
        raise ValueError(f"no clips in split {args.split!r}")
    shortest = min(manifest.entry(i)["frames"] for i in ids)
    if args.total_frames and args.total_frames > shortest:
        raise UsageError(f"--total-frames {args.total_frames} exceeds the shortest condition ({shortest} frames)")
    models = {}
    for kind in KINDS:
        path = getattr(args, kind)
        if not path.exists():
            raise FileNotFoundError(f"{kind} checkpoint not found: {path}")
        models[kind] = load_model(path)
        if models[kind].config.kind != kind:
            raise ValueError(f"{path} holds a {models[kind].config.kind} model, expected {kind}")
    args.out.mkdir(parents=True, exist_ok=True)
    for n, clip_id in enumerate(ids):
        clip = read_clip(manifest, clip_id)
        cond = ConditionBundle(clip.audio_feats, clip.phonemes, clip.text_embedding, clip.motion[0])
        req = GenerationRequest(cond, chunk=args.chunk, total_frames=args.total_frames or clip.frames,
                                seed=[args.seed, n], head_pose_mode="frozen" if args.no_head_pose else "generated")
        result = generate_talking_motion(models, req)
        export_for_renderer(result.motion, args.out / f"{clip_id}.json", fps=clip.fps,
                            layout=manifest.layout, clip_id=clip_id)
        log.info("generated %s (%d frames, %d chunks)", clip_id, len(result.motion), len(result.boundaries))
    print(args.out)


def cmd_eval(args):
    manifest = load_manifest(args.data)
    if not args.gen.is_dir():
        raise FileNotFoundError(f"generation directory not found: {args.gen}")
    basis = make_landmark_basis(args.basis_seed, manifest.layout)
    report = evaluate_run(args.gen, manifest, basis, split=args.split)
    paths = report.write(args.out)
    summary = report.summary()
    print(f"clips={summary['clips']} F-LMD={summary['mean_f_lmd']:.6f} M-LMD={summary['mean_m_lmd']:.6f}")
    print(f"report: {paths[0]}  table: {paths[1]}")


def cmd_inspect(args):
    path = args.path
    if path.is_dir() or path.name == "manifest.json":
        m = load_manifest(path)
        info = {"dataset": str(m.path), "clips": len(m.clips), "train": len(m.ids("train")),
                "test": len(m.ids("test")), "audio_dim": m.audio_dim, "text_dim": m.text_dim, "vocab": m.vocab}
    elif path.suffix == ".json":
        motion, header = read_export(path)
        info = {"export": str(path), "clip_id": header["clip_id"], "frames": header["frames"],
                "fps": header["fps"], "finite": bool(np.all(np.isfinite(motion)))}
    else:
        model = load_model(path)
        info = {"checkpoint": str(path), "config": vars(model.config),
                "parameters": int(sum(p.size for p in model.parameters()))}
    print(json.dumps(info, indent=1, default=str))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "generate": cmd_generate,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    if getattr(args, "out", "unset") is None and args.command in ("gen-data", "generate", "eval"):
        parser.error(f"--out is required (or set {OUT_ENV})")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, ArtifactError, ValueError, NumericsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
