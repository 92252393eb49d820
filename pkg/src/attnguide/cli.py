"""attnguide {train|sample|eval} --config <file> [overrides]

Exit codes: 0 success, 2 usage, 3 numeric failure, 4 IO.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import scenes
from .config import RunConfig, load_config, write_manifest
from .diffusion import DenoiserModel, build_schedule, load_checkpoint, parse_prompt, train
from .diffusion.checkpoint import save_checkpoint
from .diffusion.train import TrainConfig
from .diffusion.vocab import SHAPES
from .errors import AttnGuideError, NumericError, ParameterError, UsageError
from .evaluation import Condition, check_pairing, run_eval, write_report
from .guidance import GuidanceConfig, LayoutSpec
from .imageio import write_heatmap, write_image
from .sampler import sample

log = logging.getLogger("attnguide")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _box(text: str) -> list:
    """'4:0.5,0,1,1' -> [4, [0.5, 0.0, 1.0, 1.0]]"""
    try:
        tok, coords = text.split(":", 1)
        vals = [float(v) for v in coords.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"box must look like TOKEN:x0,y0,x1,y1, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"box needs 4 coordinates, got {text!r}")
    return [int(tok), vals]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnguide", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy denoiser")
    t.add_argument("--config", type=Path)
    t.add_argument("--dataset", help="directory written by scenes.export_dataset")
    t.add_argument("--synthetic", type=int, metavar="N", help="generate N scenes in memory instead")
    t.add_argument("--data-seed", type=int, default=None)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--model-seed", type=int)
    t.add_argument("--out")

    s = sub.add_parser("sample", help="generate one image with optional guidance")
    s.add_argument("--config", type=Path)
    s.add_argument("--checkpoint")
    s.add_argument("--prompt")
    s.add_argument("--subjects", type=_int_list, help="0-based token positions, e.g. 1,4")
    s.add_argument("--box", type=_box, action="append", help="TOKEN:x0,y0,x1,y1 (repeatable)")
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha0", type=float)
    s.add_argument("--t-end", type=int)
    s.add_argument("--no-refine", action="store_true", help="drop all refinement milestones")
    s.add_argument("--no-guidance", action="store_true", help="plain sampler")
    s.add_argument("--out")

    e = sub.add_parser("eval", help="paired seed sweep over conditions")
    e.add_argument("--config", type=Path)
    e.add_argument("--checkpoint")
    e.add_argument("--seeds", type=int, help="number of seeds (0..N-1)")
    e.add_argument("--master-seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--out")
    return p


def _overrides(args) -> dict:
    if args.command == "train":
        ov = {"dataset": args.dataset, "steps": args.steps, "batch": args.batch, "lr": args.lr,
              "seed": args.seed, "model_seed": args.model_seed, "out": args.out}
        if args.synthetic is not None:
            ov["synthetic"] = {"n": args.synthetic, "seed": 0 if args.data_seed is None else args.data_seed}
        return ov
    if args.command == "sample":
        return {"checkpoint": args.checkpoint, "prompt": args.prompt, "subjects": args.subjects,
                "boxes": args.box, "seed": args.seed, "out": args.out,
                "no_guidance": True if args.no_guidance else None}
    return {"checkpoint": args.checkpoint, "seeds": args.seeds, "master_seed": args.master_seed,
            "workers": args.workers, "out": args.out}


def _resolve(args) -> RunConfig:
    cfg = load_config(args.command, args.config, _overrides(args))
    if args.command == "sample":
        g = dict(cfg["guidance"] or {})
        if args.alpha0 is not None:
            g["alpha0"] = args.alpha0
        if args.t_end is not None:
            g["T_end"] = args.t_end
        if args.no_refine:
            g["milestones"] = []
        cfg.values["guidance"] = g
    return cfg


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig) -> int:
    c = cfg.values
    if c["dataset"]:
        if not Path(c["dataset"], "index.json").exists():
            raise UsageError(f"dataset {c['dataset']} not found (expected index.json)")
        images, ids, _ = scenes.load_dataset(c["dataset"])
    elif c["synthetic"]:
        images, ids, _ = scenes.make_dataset(int(c["synthetic"]["n"]), int(c["synthetic"]["seed"]))
    else:
        raise UsageError("train needs a dataset path (--dataset) or a synthetic spec (--synthetic N)")
    tcfg = TrainConfig(**{k: c[k] for k in TrainConfig.__dataclass_fields__ if k in c})
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = DenoiserModel(seed=int(c["model_seed"]))
    sched = build_schedule()
    if tcfg.steps == 0:
        save_checkpoint(out / "checkpoint", model.requires_grad_(False), sched,
                        {"config": c, "steps_done": 0}, {"train": tcfg.seed, "init": model.seed})
        result_losses = np.empty(0)
    else:
        res = train(model, (images, ids), sched, tcfg, out_dir=out / "checkpoint")
        result_losses = res.losses
        log.info("trained %d steps in %.1fs (cpu %.1fs)", tcfg.steps, res.seconds, res.cpu_seconds)
    files = sorted(p.relative_to(out).as_posix() for p in (out / "checkpoint").rglob("*") if p.is_file())
    write_manifest(out, cfg, {"train": tcfg.seed, "model_init": int(c["model_seed"]),
                              "data": c["synthetic"]["seed"] if c["synthetic"] else None}, files)
    if len(result_losses):
        print(f"final loss (last {min(500, len(result_losses))} steps): {result_losses[-500:].mean():.5f}")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


def _prompt_and_layout(c: dict):
    prompt = parse_prompt(c["prompt"], c["subjects"])
    words = prompt.words
    shape_pos = [i for i, w in enumerate(words) if w in SHAPES]
    for pos in prompt.subject_positions:
        if words[pos] not in SHAPES:
            log.warning("subject position %d is %r, not a shape word (shape words sit at %s)",
                        pos, words[pos], shape_pos)
    try:
        layout = LayoutSpec(tuple((int(i), tuple(b)) for i, b in c["boxes"] or []))
        layout.check_prompt(prompt)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    return prompt, layout


def cmd_sample(cfg: RunConfig) -> int:
    c = cfg.values
    prompt, layout = _prompt_and_layout(c)
    ckpt = Path(c["checkpoint"])
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model, sched, _ = load_checkpoint(ckpt)
    try:
        gcfg = None if c["no_guidance"] else GuidanceConfig.from_dict(c["guidance"] or {})
    except (ParameterError, TypeError) as exc:
        raise UsageError(f"bad guidance settings: {exc}") from None
    res = sample(model, prompt, layout if len(layout) else None, gcfg, seed=int(c["seed"]), sched=sched,
                 map_every=int(c["map_every"]), eta=float(c["eta"]))

    out = Path(c["out"])
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    files = [write_image(res.image, out / "image.ppm")]
    words = prompt.words
    for step, grids in sorted(res.maps.items()):
        for i, w in enumerate(words):
            if w != "<pad>":
                files.append(write_heatmap(grids[i], out / "heatmaps" / f"step{step:02d}_tok{i}_{w}.ppm"))
    with open(out / "trace.jsonl", "w") as fh:
        for rec in res.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "step_stats.jsonl", "w") as fh:
        for rec in res.step_stats:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    det = scenes.detect(res.image)
    (out / "detections.json").write_text(json.dumps(det.to_dict(), indent=2, sort_keys=True) + "\n")
    files += [out / "trace.jsonl", out / "step_stats.jsonl", out / "detections.json"]
    write_manifest(out, cfg, {"sampler": int(c["seed"])}, [Path(f).relative_to(out).as_posix() for f in files])
    print(f"{prompt.text()}: {len(res.trace)} guided steps; detected "
          f"{[(b.color, b.shape) for b in det.blobs]}; outputs in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    c = cfg.values
    seeds = cfg.seed_list()
    check_pairing(c["conditions"], seeds)
    try:
        conditions = [Condition.from_dict(d) for d in c["conditions"]]
        for cond in conditions:
            cond.gcfg()
    except (ParameterError, TypeError, KeyError) as exc:
        raise UsageError(f"bad condition list: {exc}") from None
    ckpt = Path(c["checkpoint"])
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")

    def progress(i, n):
        if i % 25 == 0 or i == n:
            log.info("%d/%d samples", i, n)

    report = run_eval(ckpt, conditions, seeds, int(c["master_seed"]), c["workers"], int(c["n_perm"]), progress)
    out = write_report(report, c["out"])
    write_manifest(out, cfg, {"master": int(c["master_seed"]), "seeds": seeds},
                   ["report.json", "report.txt", "records.jsonl"])
    print(report.table())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](_resolve(args))
    except (UsageError, ParameterError) as exc:
        print(f"attnguide: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"attnguide: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"attnguide: IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AttnGuideError as exc:
        print(f"attnguide: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
