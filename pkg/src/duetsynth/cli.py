"""Command-line pipeline surface.

Subcommands: gendata, train, retarget, generate, eval, export.  Exit codes:
0 success, 1 validation or configuration error, 2 numerical failure.  Every
command writes its resolved configuration beside its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .clipio import load_clip, save_bvh_lite, save_clip, save_csv
from .config import RunConfig, load_config, parse_scale_range, save_config
from .core import BoneScaleVector
from .data import (
    SPLIT_KINDS,
    SplitProtocol,
    gen_dataset,
    load_dataset,
    save_dataset,
    split,
)
from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    FormatError,
    ShapeError,
    TrainingDivergedError,
)
from .metrics import evaluate, train_feature_extractor, write_metrics_csv, write_summary_json
from .net import ModelConfig, generate_clips, load_checkpoint, retarget_clip, save_checkpoint
from .train import save_history, train

EXPORT_FORMATS = ("csv", "bvh-lite")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------- resolution


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig()


def _replace(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def _resolve(args) -> RunConfig:
    """Config file first, then command-line flags on top."""
    cfg = _base_config(args)
    ds_over = {}
    seed = getattr(args, "seed", None)
    if args.cmd == "gendata":
        if args.kinds:
            ds_over["base_kinds"] = tuple(k.strip() for k in args.kinds.split(","))
        if args.scales:
            ds_over.update(parse_scale_range(args.scales))
        if args.frames is not None:
            ds_over["n_frames"] = args.frames
        if args.modes:
            ds_over["scaling_modes"] = tuple(m.strip() for m in args.modes.split(","))
        if args.single_bones:
            ds_over["single_bones"] = tuple(int(b) for b in args.single_bones.split(","))
        if seed is not None:
            ds_over["seed"] = seed
    dataset = _replace(cfg.dataset, **ds_over)
    tr = _replace(
        cfg.train,
        batch_size=getattr(args, "batch", None),
        learning_rate=getattr(args, "lr", None),
        epochs=getattr(args, "epochs", None),
        seed=seed,
        val_fraction=getattr(args, "val_fraction", None),
        kl_warmup_epochs=getattr(args, "kl_warmup", None),
    )
    if getattr(args, "teacher_forcing", False):
        tr = dataclasses.replace(tr, teacher_forcing=True)
    sp = cfg.split
    if getattr(args, "split", None) or getattr(args, "test_fraction", None) is not None:
        sp = SplitProtocol(
            getattr(args, "split", None) or cfg.split.kind,
            test_fraction=(
                args.test_fraction
                if getattr(args, "test_fraction", None) is not None
                else cfg.split.test_fraction
            ),
        )
    me = _replace(
        cfg.metrics,
        n_generate=getattr(args, "count", None),
        z_samples=getattr(args, "z_samples", None),
    )
    return RunConfig(
        dataset=dataset,
        train=tr,
        split=sp,
        net=cfg.net,
        metrics=me,
        seed=seed if seed is not None else cfg.seed,
        out_dir=str(getattr(args, "out", cfg.out_dir)),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_bone_scales(text: str, n_bones: int) -> BoneScaleVector:
    """Either one uniform factor or a comma list with one entry per bone."""
    parts = [p for p in text.split(",") if p.strip()]
    try:
        values = [float(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"non-numeric bone scale in {text!r}") from e
    if len(values) == 1:
        return BoneScaleVector.uniform(n_bones, values[0])
    if len(values) != n_bones:
        raise ConfigError(f"expected {n_bones} bone scales, got {len(values)}")
    return BoneScaleVector(np.array(values))


# ---------------------------------------------------------------- commands


def cmd_gendata(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    dataset = gen_dataset(cfg.dataset)
    save_dataset(dataset, out, spec=cfg.dataset)
    save_config(cfg, out / "config.ini", extra={"command": "gendata"})
    per_kind = {k: 0 for k in cfg.dataset.base_kinds}
    for clip in dataset.variations:
        per_kind[clip.interaction_kind] += 1
    requested = len(cfg.dataset.grid()) - 1  # grid entries besides the template
    print(f"wrote {dataset.n_clips} clips ({len(dataset.failures)} dropped) to {out}")
    if requested == 0:  # templates-only request is valid
        return 0
    starved = [k for k, n in per_kind.items() if n == 0]
    if starved:
        print(f"error: no variation survived for kinds: {', '.join(starved)}", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    train_ds, test_ds = split(dataset, cfg.split, seed=cfg.seed)
    model_config = None
    if cfg.net:
        skeleton = train_ds.clips[0].skeleton_B
        model_config = ModelConfig.for_skeleton(skeleton, **cfg.net)
    model, history = train(train_ds, config=cfg.train, model_config=model_config)
    save_checkpoint(
        model,
        out / "checkpoint",
        extra={"protocol": cfg.split.kind, "dataset": str(args.data), "epochs": cfg.train.epochs},
    )
    save_history(history, out / "history.csv")
    _write_split_audit(out / "split_audit.json", cfg, train_ds, test_ds)
    save_config(cfg, out / "config.ini", extra={"command": "train", "data": str(args.data)})
    final = history[-1]["total"] if history else float("nan")
    print(f"trained {cfg.train.epochs} epochs; final total loss {final:.6f}; wrote {out}")
    return 0


def _write_split_audit(path: Path, cfg: RunConfig, train_ds, test_ds) -> None:
    def rows(ds):
        return [
            {
                "clip_id": c.clip_id,
                "kind": c.interaction_kind,
                "scale_label": c.scale_B.label(),
                "scales": [float(s) for s in c.scale_B.scales],
            }
            for c in ds.variations
        ]

    payload = {
        "protocol": cfg.split.kind,
        "seed": cfg.seed,
        "test_fraction": cfg.split.test_fraction,
        "train_band": list(cfg.split.train_band),
        "test_bands": [list(b) for b in cfg.split.test_bands],
        "train": rows(train_ds),
        "test": rows(test_ds),
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def cmd_retarget(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    model = load_checkpoint(args.ckpt)
    template = load_clip(args.template)
    scales = _parse_bone_scales(args.scales, template.skeleton_B.n_bones)
    t0 = time.perf_counter()
    clip = retarget_clip(model, template, scales)
    wall = time.perf_counter() - t0
    name = f"retarget_{clip.interaction_kind}_{scales.label()}.json"
    save_clip(clip, out / name)
    save_config(
        cfg,
        out / "config.ini",
        extra={
            "command": "retarget",
            "ckpt": str(args.ckpt),
            "template": str(args.template),
            "scales": args.scales,
        },
    )
    print(f"retargeted in {wall:.3f} s; wrote {out / name}")
    return 0


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    model = load_checkpoint(args.ckpt)
    template = load_clip(args.template)
    if args.count < 0:
        raise ConfigError("count must be >= 0")
    clips = generate_clips(model, template, args.count, seed=cfg.seed)
    for i, clip in enumerate(clips):
        save_clip(clip, out / f"gen_{i:03d}.json")
    save_config(
        cfg,
        out / "config.ini",
        extra={
            "command": "generate",
            "ckpt": str(args.ckpt),
            "template": str(args.template),
            "count": args.count,
        },
    )
    print(f"generated {len(clips)} clips in {out}")
    return 0


def _report_has_nan(report) -> bool:
    def bad(x):
        return x is not None and not math.isfinite(x)

    for row in report.rows:
        if any(bad(row[k]) for k in ("E_r", "E_b", "JPD")):
            return True
    if any(bad(v) for v in report.aggregates.values()):
        return True
    if report.fid_by_kind and any(bad(v) for v in report.fid_by_kind.values()):
        return True
    return False


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    train_ds, test_ds = split(dataset, cfg.split, seed=cfg.seed)
    target = train_ds if args.on == "train" else test_ds
    extractor = None
    if args.mode == "generate" and len(train_ds.kinds) >= 2:
        extractor = train_feature_extractor(
            train_ds,
            window=cfg.metrics.window,
            epochs=cfg.metrics.extractor_epochs,
            seed=cfg.seed,
        )
    report = evaluate(
        model,
        target,
        args.mode,
        protocol=cfg.split.kind,
        extractor=extractor,
        n_generate=cfg.metrics.n_generate,
        seed=cfg.seed,
        z_samples=cfg.metrics.z_samples,
    )
    write_metrics_csv([report], out / "metrics.csv")
    write_summary_json([report], out / "summary.json")
    save_config(
        cfg,
        out / "config.ini",
        extra={"command": "eval", "ckpt": str(args.ckpt), "data": str(args.data), "mode": args.mode, "on": args.on},
    )
    print(f"evaluated {args.mode}/{cfg.split.kind} on {args.on} split; wrote {out}")
    if _report_has_nan(report):
        print("error: NaN metric in report", file=sys.stderr)
        return 2
    return 0


def cmd_export(args) -> int:
    cfg = _resolve(args)
    clip = load_clip(args.clip)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        save_csv(clip, out)
    else:
        save_bvh_lite(clip, out)
    save_config(
        cfg,
        out.with_suffix(out.suffix + ".ini"),
        extra={"command": "export", "clip": str(args.clip), "format": args.format},
    )
    print(f"exported {clip.clip_id} as {args.format} to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="duetsynth", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file; flags override it")
        p.add_argument("--seed", type=int, help="global seed")

    p = sub.add_parser("gendata", help="generate the procedural interaction dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--kinds", help="comma list of interaction kinds")
    p.add_argument("--scales", help="bone-scale grid as min:max:step")
    p.add_argument("--frames", type=int, help="frames per clip")
    p.add_argument("--modes", help="comma list of scaling modes")
    p.add_argument("--single-bones", dest="single_bones", help="comma list of bone indices")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train the retargeting model on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gendata")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--batch", type=int, help="batch size (default 32)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
    p.add_argument("--epochs", type=int, help="training epochs (default 50)")
    p.add_argument("--split", choices=SPLIT_KINDS, help="split protocol")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--kl-warmup", dest="kl_warmup", type=int)
    p.add_argument("--teacher-forcing", dest="teacher_forcing", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retarget", help="retarget a template clip to given bone scales")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--template", required=True, help="template clip JSON")
    p.add_argument("--scales", required=True, help="uniform factor or comma list per bone")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("generate", help="sample skeletons from the prior and decode motions")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--template", required=True, help="template clip JSON")
    p.add_argument("--count", type=int, default=10, help="number of samples")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="compute the metric table for a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", required=True, choices=("retarget", "generate"))
    p.add_argument("--split", choices=SPLIT_KINDS, help="split protocol")
    p.add_argument("--on", choices=("train", "test"), default="test", help="which side to score")
    p.add_argument("--count", type=int, help="generations per kind in generate mode")
    p.add_argument("--z-samples", dest="z_samples", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="convert a clip JSON to csv or bvh-lite")
    common(p)
    p.add_argument("--clip", required=True, help="clip JSON file")
    p.add_argument("--format", required=True, choices=EXPORT_FORMATS)
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DomainError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DivergenceError, TrainingDivergedError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
