"""Command-line entry points: synth, train, eval, hitl, render, serve.

Every subcommand accepts --config (a JSON file with the same keys as its
flags); explicit flags override the file. Training and simulation runs
write metrics as JSONL plus a CSV mirror next to it.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .encoding import HashGridConfig
from .field import FieldConfig
from .objective import LossWeights
from .scene import (
    export_segmentation,
    load_checkpoint,
    load_indexed_png,
    load_scene,
    save_checkpoint,
)
from .synthetic import generate_synthetic_scene, spec_from_json, standard_scene_spec
from .training import (
    HitlConfig,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    run_hitl,
    train,
    write_metrics,
)

log = logging.getLogger(__name__)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _train_config(values: dict) -> TrainConfig:
    """TrainConfig from a flat-ish dict (JSON file merged with flags)."""
    kwargs = dict(values)
    if "weights" in kwargs and isinstance(kwargs["weights"], dict):
        kwargs["weights"] = LossWeights(**kwargs["weights"])
    field_kwargs = kwargs.pop("field", {})
    if isinstance(field_kwargs, dict):
        if "grid" in field_kwargs and isinstance(field_kwargs["grid"], dict):
            grid = dict(field_kwargs["grid"])
            if "hash_primes" in grid:
                grid["hash_primes"] = tuple(grid["hash_primes"])
            field_kwargs["grid"] = HashGridConfig(**grid)
        kwargs["field"] = FieldConfig(**field_kwargs)
    if kwargs.get("train_frames") is not None:
        kwargs["train_frames"] = tuple(kwargs["train_frames"])
    valid = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(kwargs) - valid
    if unknown:
        raise SystemExit(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**kwargs)


def _merge_flags(cfg: dict, args, names) -> dict:
    out = dict(cfg)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    return out


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-samples", dest="num_samples", type=int)
    p.add_argument("--encoder", choices=("freq", "hashgrid", "hybrid"))
    p.add_argument("--lambda-depth", dest="lambda_depth", type=float)
    p.add_argument("--lambda-semantic", dest="lambda_semantic", type=float)
    p.add_argument("--lambda-feature", dest="lambda_feature", type=float)
    p.add_argument("--train-frames", dest="train_frames", type=int, nargs="*")


def _resolve_train_config(args) -> TrainConfig:
    cfg = _load_config_file(args.config)
    cfg = _merge_flags(cfg, args, ("iterations", "batch_size", "seed", "num_samples",
                                   "train_frames"))
    weights = dict(cfg.get("weights", {}))
    for flag, key in (("lambda_depth", "depth"), ("lambda_semantic", "semantic"),
                      ("lambda_feature", "feature")):
        v = getattr(args, flag, None)
        if v is not None:
            weights[key] = v
    if weights:
        cfg["weights"] = weights
    if getattr(args, "encoder", None):
        field = dict(cfg.get("field", {}))
        field["encoder_mode"] = args.encoder
        cfg["field"] = field
    return _train_config(cfg)


def cmd_synth(args) -> int:
    if args.spec:
        spec = spec_from_json(json.loads(Path(args.spec).read_text()))
    else:
        spec = standard_scene_spec(seed=args.seed or 0)
    manifest = generate_synthetic_scene(spec, args.out)
    print(f"wrote scene to {manifest}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    dataset = load_scene(Path(args.scene) / "manifest.json")
    annotations = None
    if args.annotations:
        from .scene import load_annotations

        annotations = load_annotations(args.annotations, num_classes=len(dataset.classes))
    out = Path(args.out or Path(args.scene) / "runs")
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        checkpoint, metrics = train(dataset, annotations, config, checkpoint=resume)
    except TrainingDiverged as e:
        save_checkpoint(out / "last_good.ckpt", e.checkpoint)
        print(f"error: {e}; last good checkpoint written to {out/'last_good.ckpt'}",
              file=sys.stderr)
        return 2
    save_checkpoint(out / "checkpoint.ckpt", checkpoint)
    write_metrics(metrics, out / "metrics.jsonl", out / "metrics.csv")
    print(f"checkpoint: {out/'checkpoint.ckpt'}")
    print(f"metrics: {out/'metrics.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        print("no prediction PNGs found", file=sys.stderr)
        return 2
    from .training import evaluate_iou

    pred_maps, ref_maps = [], []
    for p in preds:
        r = ref_dir / p.name
        if not r.exists():
            print(f"missing reference for {p.name}", file=sys.stderr)
            return 2
        pred_maps.append(load_indexed_png(p))
        ref_maps.append(load_indexed_png(r))
    ids = sorted({int(v) for m in ref_maps + pred_maps for v in np.unique(m)})
    per_class, miou = evaluate_iou(pred_maps, ref_maps, ids)
    result = {"miou": miou, "iou_per_class": {str(k): v for k, v in per_class.items()}}
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_hitl(args) -> int:
    config = _resolve_train_config(args)
    dataset = load_scene(Path(args.scene) / "manifest.json")
    hitl_cfg = _load_config_file(args.hitl_config)
    hitl_cfg = _merge_flags(hitl_cfg, args, ("rounds",))
    if args.pretrain is not None:
        hitl_cfg["pretrain_iterations"] = args.pretrain
    if args.hitl_seed is not None:
        hitl_cfg["seed"] = args.hitl_seed
    if hitl_cfg.get("eval_frames") is not None:
        hitl_cfg["eval_frames"] = tuple(hitl_cfg["eval_frames"])
    hitl = HitlConfig(**hitl_cfg)
    out = Path(args.out or Path(args.scene) / "hitl")
    out.mkdir(parents=True, exist_ok=True)
    result = run_hitl(dataset, hitl, config)
    write_metrics(result.rounds, out / "hitl.jsonl", out / "hitl.csv")
    save_checkpoint(out / "checkpoint.ckpt", result.checkpoint)
    final = result.rounds[-1]
    print(f"rounds: {len(result.rounds) - 1}, labels: {final['labels']}, "
          f"final mIoU: {final['miou']:.3f}, success: {result.success}")
    print(f"metrics: {out/'hitl.jsonl'}")
    return 0


def cmd_render(args) -> int:
    config = _resolve_train_config(args)
    dataset = load_scene(Path(args.scene) / "manifest.json")
    checkpoint = load_checkpoint(args.checkpoint)
    annotations = dataset.new_annotation_set()
    trainer = Trainer(dataset, annotations, config, checkpoint=checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame_ids = args.frames if args.frames else [f.id for f in dataset.frames]
    class_maps = {}
    from .scene import save_rgb

    for fid in frame_ids:
        frame = dataset.frame_by_id(fid)
        r = trainer.render_frame(frame.camera, heads=("color", "semantic"))
        save_rgb(out / f"rgb_{fid:04d}.png", r.rgb)
        class_maps[fid] = r.class_map
    export_segmentation(class_maps, dataset.classes, out / "segmentation")
    print(f"rendered {len(frame_ids)} frames to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import Session, create_app

    config = _resolve_train_config(args)
    dataset = load_scene(Path(args.scene) / "manifest.json")
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    session = Session(dataset, config, checkpoint=checkpoint,
                      refresh_every=args.refresh_every)
    frontend = args.frontend
    if frontend is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        frontend = str(bundled) if bundled.exists() else None
    app = create_app(session, frontend_dir=frontend)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    finally:
        session.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scribblefield",
        description="volumetric scribble propagation: fit, evaluate, annotate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D scene")
    p.add_argument("--spec", help="scene spec JSON (defaults to the standard scene)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="fit a field to a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--annotations", help="annotations JSONL")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="IoU between two directories of indexed PNGs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("hitl", help="simulated human-in-the-loop labeling")
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.add_argument("--rounds", type=int)
    p.add_argument("--pretrain", type=int)
    p.add_argument("--hitl-seed", dest="hitl_seed", type=int)
    p.add_argument("--hitl-config", dest="hitl_config")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_hitl)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, nargs="*")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--refresh-every", dest="refresh_every", type=int, default=250)
    p.add_argument("--frontend", help="directory with the built browser UI")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
