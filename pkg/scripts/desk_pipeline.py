"""End-to-end desk run: data, training, retargeting, generation, metrics.

Drives the command-line interface through one complete workflow inside a
single workspace directory. Useful as a smoke test after installation and
as a template for composing custom runs.

    python3 scripts/desk_pipeline.py --out runs/desk
    python3 scripts/desk_pipeline.py --out runs/quick --epochs 5 --frames 16
"""

import argparse
import json
import sys
from pathlib import Path

from duetsynth.cli import main as cli

EVAL_INI = """\
[metrics]
window = 16
extractor_epochs = 40
"""


def run(args) -> int:
    rc = cli(args)
    if rc != 0:
        print(f"step failed (exit {rc}): {' '.join(args)}", file=sys.stderr)
        raise SystemExit(rc)
    return rc


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk", help="workspace directory")
    ap.add_argument("--kinds", default="circle,hold,lean,lift")
    ap.add_argument("--scales", default="0.85:1.15:0.05", help="min:max:step bone-scale grid")
    ap.add_argument("--frames", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    cfg = ap.parse_args()

    ws = Path(cfg.out)
    ws.mkdir(parents=True, exist_ok=True)
    data, model = ws / "data", ws / "model"
    seed = str(cfg.seed)

    run(["gendata", "--out", str(data), "--kinds", cfg.kinds, "--scales", cfg.scales,
         "--frames", str(cfg.frames), "--seed", seed])
    run(["train", "--data", str(data), "--out", str(model), "--epochs", str(cfg.epochs),
         "--batch", str(cfg.batch), "--seed", seed])

    ckpt = str(model / "checkpoint")
    first_kind = cfg.kinds.split(",")[0]
    template = next(data.glob(f"clips/*_{first_kind}_template.json"))
    for scale in ("0.85", "1.15"):
        run(["retarget", "--ckpt", ckpt, "--template", str(template),
             "--scales", scale, "--out", str(ws / "retargeted")])
    run(["generate", "--ckpt", ckpt, "--template", str(template),
         "--count", "5", "--seed", seed, "--out", str(ws / "generated")])

    eval_ini = ws / "eval.ini"
    eval_ini.write_text(EVAL_INI)
    run(["eval", "--ckpt", ckpt, "--data", str(data), "--mode", "retarget",
         "--out", str(ws / "eval_retarget")])
    run(["eval", "--ckpt", ckpt, "--data", str(data), "--mode", "generate",
         "--count", "8", "--config", str(eval_ini), "--out", str(ws / "eval_generate")])

    gen_clip = sorted((ws / "generated").glob("gen_*.json"))[0]
    run(["export", "--clip", str(gen_clip), "--format", "bvh-lite",
         "--out", str(ws / "export" / (gen_clip.stem + ".bvh"))])

    print(f"\nworkspace: {ws.resolve()}")
    for mode in ("retarget", "generate"):
        summary = json.loads((ws / f"eval_{mode}" / "summary.json").read_text())
        for key, report in summary.items():
            print(f"{key}: {json.dumps(report['aggregates'], sort_keys=True)}")
            if report.get("fid"):
                print(f"{key} fid: {json.dumps(report['fid'], sort_keys=True)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
