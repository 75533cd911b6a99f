"""Command-line entry point: gen, train, eval, infer, gradcheck, ablate, bench, stats.

Configuration comes from an INI file ([model] / [train] / [gen] sections)
with command-line flags taking precedence; every run echoes its resolved
configuration and writes it next to the artifacts. Exit codes: 0 success,
1 usage error, 2 validation failure, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ablation, config as precision_config
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .data import (
    SynthSceneSpec,
    dataset_stats,
    load_manifest,
    read_image_array,
    read_mask,
    write_mask,
    write_overlay,
)
from .edges import edge_scales_array, hierarchical_edges, load_edge_maps, stack_edges
from .gradcheck import run_suite
from .metrics import ConfusionMatrix, mean_iou, per_class_iou, pixel_accuracy, predict_mask
from .model import ModelConfig, build_model
from .train import StageSpec, TrainConfig, load_stage_plan, progressive_train, train_stage

USAGE_ERROR, VALIDATION_ERROR, RUNTIME_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_ERROR)


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v != "")


def _read_ini(path):
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
    return parser


def _model_config(ini, args) -> ModelConfig:
    sec = ini["model"] if ini.has_section("model") else {}
    kwargs = dict(
        stage_channels=_ints(sec.get("stage_channels", "8,16,24,32")),
        blocks_per_stage=_ints(sec.get("blocks_per_stage", "1,1,1,1")),
        gft_stages=tuple(s for s in str(sec.get("gft_stages", "")).replace(" ", "").split(",") if s),
        conditioning=sec.get("conditioning", "gft"),
        atrous_rates=_ints(sec.get("atrous_rates", "1,6,12")),
        aspp_channels=int(sec.get("aspp_channels", 24)),
        num_classes=int(sec.get("num_classes", 6)),
        seed=int(sec.get("seed", 0)),
    )
    if getattr(args, "stages", None) is not None:
        kwargs["gft_stages"] = tuple(s for s in args.stages.replace(" ", "").split(",") if s)
    if getattr(args, "conditioning", None):
        kwargs["conditioning"] = args.conditioning
    if getattr(args, "num_classes", None):
        kwargs["num_classes"] = args.num_classes
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    if getattr(args, "depth", None) == "mini":
        kwargs["stage_channels"], kwargs["blocks_per_stage"] = (8, 16, 24, 32), (1, 1, 1, 1)
    elif getattr(args, "depth", None) == "mini-deep":
        kwargs["stage_channels"], kwargs["blocks_per_stage"] = (16, 32, 48, 64), (2, 2, 2, 2)
    return ModelConfig(**kwargs)


def _train_config(ini, args) -> TrainConfig:
    sec = ini["train"] if ini.has_section("train") else {}
    kwargs = dict(
        base_lr=float(sec.get("base_lr", 0.001)),
        power=float(sec.get("power", 0.9)),
        momentum=float(sec.get("momentum", 0.9)),
        weight_decay=float(sec.get("weight_decay", 0.0001)),
        epochs=int(sec.get("epochs", 100)),
        batch_size=int(sec.get("batch_size", 8)),
        crop_size=int(sec.get("crop_size", 32)),
        scale_range=(float(sec.get("scale_min", 0.5)), float(sec.get("scale_max", 2.0))),
        seed=int(sec.get("seed", 0)),
        augment=sec.get("augment", "full"),
        ignore_index=int(sec.get("ignore_index", 255)),
        eval_every=int(sec.get("eval_every", 1)),
        eval_limit=int(sec.get("eval_limit", 0)),
    )
    for key in ("base_lr", "epochs", "batch_size", "crop_size", "augment"):
        value = getattr(args, key, None)
        if value is not None:
            kwargs[key] = value
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    return TrainConfig(**kwargs)


def _echo_config(sections: dict, out_dir: Path | None):
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    text = "\n".join(lines)
    print(text.rstrip())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved.cfg").write_text(text)


def _write_csv(path, rows, fieldnames):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path}")


def _eval_samples_from_manifest(model, manifest, edges_mode: str):
    samples = []
    for entry in manifest.entries:
        img = read_image_array(entry.image)
        tensor = Tensor(img[None, None].astype(precision_config.dtype()))
        edges = None
        if model.uses_edges:
            if edges_mode == "manifest":
                if entry.edges is None:
                    raise ValueError(f"{entry.image}: manifest has no edge-map column")
                edges = load_edge_maps(entry.edges, img.shape)
            else:
                edges = stack_edges([edge_scales_array(img)])
        mask = read_mask(entry.mask, manifest.num_classes)
        samples.append((tensor, mask, edges, entry))
    return samples


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    ini = _read_ini(args.config)
    sec = ini["gen"] if ini.has_section("gen") else {}
    spec = SynthSceneSpec(
        size=args.size or int(sec.get("size", 32)),
        num_objects=_ints(sec.get("num_objects", "3,6")),
        blur_sigma=float(sec.get("blur_sigma", 0.7)),
        noise_sigma=float(sec.get("noise_sigma", 0.02)),
        crossover_rate=args.crossover if args.crossover is not None else float(sec.get("crossover_rate", 0.0)),
        intensity_jitter=float(sec.get("intensity_jitter", 0.03)),
    )
    count = args.count or int(sec.get("count", 50))
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    out_dir = Path(args.out)
    _echo_config({"gen": {**asdict(spec), "count": count, "seed": seed, "split": args.split}}, out_dir)
    from .data import thermogen
    manifest = thermogen(spec, count, seed=seed, out_dir=out_dir, split=args.split)
    print(f"wrote {len(manifest)} scenes under {out_dir}")
    return 0


def cmd_train(args):
    ini = _read_ini(args.config)
    model_cfg = _model_config(ini, args)
    train_cfg = _train_config(ini, args)
    if args.dtype:
        precision_config.set_dtype(args.dtype)
    out_dir = Path(args.out)
    _echo_config({"model": asdict(model_cfg), "train": asdict(train_cfg),
                  "run": {"dtype": np.dtype(precision_config.dtype()).name}}, out_dir)
    if args.plan:
        plan = load_stage_plan(args.plan)
        result = progressive_train(plan, model_cfg, train_cfg, out_dir)
    else:
        if not args.data:
            raise ValueError("train needs --data MANIFEST (or --plan PLAN)")
        manifest = load_manifest(args.data, validate_labels=False)
        if manifest.num_classes != model_cfg.num_classes:
            from dataclasses import replace
            model_cfg = replace(model_cfg, num_classes=manifest.num_classes)
        model = build_model(model_cfg)
        result = train_stage(model, StageSpec(dataset=args.data), train_cfg, out_dir, tag="train")
    last = result.history[-1]
    print(f"final epoch {last['epoch']}: loss {last['loss']:.4f} "
          f"miou {last['miou']:.4f} (best {result.best_miou:.4f})")
    return 0


def cmd_eval(args):
    ini = _read_ini(args.config)
    model_cfg = _model_config(ini, args)
    manifest = load_manifest(args.data, validate_labels=False)
    if manifest.num_classes != model_cfg.num_classes:
        from dataclasses import replace
        model_cfg = replace(model_cfg, num_classes=manifest.num_classes)
    model = build_model(model_cfg)
    model.load_state_dict(load_arrays(args.checkpoint))
    out_dir = Path(args.out)
    _echo_config({"model": asdict(model_cfg),
                  "eval": {"checkpoint": args.checkpoint, "data": args.data, "edges": args.edges}},
                 out_dir)
    cm = ConfusionMatrix(model_cfg.num_classes)
    for tensor, mask, edges, _ in _eval_samples_from_manifest(model, manifest, args.edges):
        cm.update(predict_mask(model, tensor, edges), mask[None])
    ious = per_class_iou(cm)
    rows = [{"class_name": manifest.class_names[k],
             "iou": "" if np.isnan(ious[k]) else f"{ious[k]:.6f}"}
            for k in range(model_cfg.num_classes)]
    _write_csv(out_dir / "eval.csv", rows, ["class_name", "iou"])
    print(f"pixacc {pixel_accuracy(cm):.6f} miou {mean_iou(cm):.6f}")
    return 0


def cmd_infer(args):
    ini = _read_ini(args.config)
    model_cfg = _model_config(ini, args)
    model = build_model(model_cfg)
    model.load_state_dict(load_arrays(args.checkpoint))
    out_dir = Path(args.out)
    _echo_config({"model": asdict(model_cfg),
                  "infer": {"checkpoint": args.checkpoint, "edges": args.edges}}, out_dir)
    if args.image:
        img = read_image_array(args.image)
        tensor = Tensor(img[None, None].astype(precision_config.dtype()))
        edges = None
        if model.uses_edges:
            edges = (hierarchical_edges(tensor) if args.edges == "computed"
                     else load_edge_maps(args.edges, img.shape))
        pred = predict_mask(model, tensor, edges)[0]
        stem = Path(args.image).stem
        write_mask(pred, out_dir / f"{stem}_mask.png")
        write_overlay(img, pred, out_dir / f"{stem}_overlay.png")
        print(f"wrote {out_dir / (stem + '_mask.png')}")
        return 0
    if not args.data:
        raise ValueError("infer needs --image FILE or --data MANIFEST")
    manifest = load_manifest(args.data, validate_labels=False)
    for tensor, _, edges, entry in _eval_samples_from_manifest(model, manifest, args.edges):
        pred = predict_mask(model, tensor, edges)[0]
        stem = Path(entry.image).stem
        write_mask(pred, out_dir / f"{stem}_mask.png")
        write_overlay(tensor.data[0, 0], pred, out_dir / f"{stem}_overlay.png")
    print(f"wrote {len(manifest)} masks + overlays under {out_dir}")
    return 0


def cmd_gradcheck(args):
    out_dir = Path(args.out) if args.out else None
    _echo_config({"gradcheck": {"seed": args.seed if args.seed is not None else 0}}, out_dir)
    results = run_suite(seed=args.seed if args.seed is not None else 0)
    rows = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:24s} rel_error {r.error:.3e}  tol {r.tolerance:.0e}  {status}")
        rows.append({"layer": r.name, "rel_error": f"{r.error:.6e}",
                     "tolerance": f"{r.tolerance:.0e}", "status": status})
    if out_dir is not None:
        _write_csv(out_dir / "gradcheck.csv", rows, ["layer", "rel_error", "tolerance", "status"])
    if not all(r.passed for r in results):
        print("gradient check FAILED")
        return VALIDATION_ERROR
    print("all layers pass")
    return 0


def cmd_ablate(args):
    seeds = _ints(args.seeds) if args.seeds else ablation.DEFAULT_SEEDS
    out_dir = Path(args.out)
    data_dir = Path(args.data_dir) if args.data_dir else out_dir / "data"
    _echo_config({"ablate": {"axis": args.axis, "seeds": seeds, "data_dir": data_dir}}, out_dir)
    datasets = ablation.ensure_datasets(data_dir)
    log = print if args.verbose else None
    if args.axis == "conditioning":
        rows = ablation.conditioning_table(datasets, seeds, log=log)
    elif args.axis == "stage":
        rows = ablation.stage_table(datasets, seeds, log=log)
    else:
        rows = ablation.init_table(datasets, seeds, log=log)
    table = [{"config": r.label,
              "pixacc": f"{r.mean_pixacc:.6f}",
              "miou": f"{r.mean_miou:.6f}",
              **{f"miou_seed{s}": f"{v:.6f}" for s, v in zip(seeds, r.per_seed_miou)}}
             for r in rows]
    fields = ["config", "pixacc", "miou"] + [f"miou_seed{s}" for s in seeds]
    _write_csv(out_dir / f"ablation_{args.axis}.csv", table, fields)
    for r in rows:
        print(f"{r.label:20s} pixacc {r.mean_pixacc:.4f}  miou {r.mean_miou:.4f}")
    return 0


def cmd_bench(args):
    out_dir = Path(args.out)
    _echo_config({"bench": {"warmup": args.warmup, "reps": args.reps}}, out_dir)
    rows = ablation.bench_table(warmup=args.warmup, reps=args.reps,
                                seed=args.seed if args.seed is not None else 0)
    table = [{"config": r["config"], "mean_s": f"{r['mean_s']:.6f}", "median_s": f"{r['median_s']:.6f}"}
             for r in rows]
    _write_csv(out_dir / "bench.csv", table, ["config", "mean_s", "median_s"])
    for r in table:
        print(f"{r['config']:12s} mean {r['mean_s']}s median {r['median_s']}s")
    return 0


def cmd_stats(args):
    manifest = load_manifest(args.data, validate_labels=False)
    out_dir = Path(args.out) if args.out else None
    _echo_config({"stats": {"data": args.data}}, out_dir)
    rows = dataset_stats(manifest)
    for r in rows:
        print(f"{r['class']:3d} {r['name']:12s} images {r['images']:5d}  pixels {r['pixels']}")
    if out_dir is not None:
        _write_csv(out_dir / "stats.csv", rows, ["class", "name", "images", "pixels"])
    return 0


def make_parser() -> _Parser:
    parser = _Parser(prog="thermoseg",
                     description="edge-guided thermal-style segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--crossover", type=float)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model (single stage or staged plan)")
    common(p)
    p.add_argument("--data", help="training manifest")
    p.add_argument("--plan", help="stage plan INI for progressive training")
    p.add_argument("--stages", help="comma list of GFT stages, e.g. conv2_x,conv3_x")
    p.add_argument("--conditioning", choices=["gft", "sft"])
    p.add_argument("--depth", choices=["mini", "mini-deep"])
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop-size", dest="crop_size", type=int)
    p.add_argument("--augment", choices=["none", "mirror", "full"])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stages")
    p.add_argument("--conditioning", choices=["gft", "sft"])
    p.add_argument("--depth", choices=["mini", "mini-deep"])
    p.add_argument("--edges", default="computed", help="computed | manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write predicted masks and overlays")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--image")
    p.add_argument("--stages")
    p.add_argument("--conditioning", choices=["gft", "sft"])
    p.add_argument("--depth", choices=["mini", "mini-deep"])
    p.add_argument("--edges", default="computed",
                   help="computed | manifest | path to a saved edge stack (with --image)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run one ablation axis end to end")
    common(p)
    p.add_argument("--axis", required=True, choices=["conditioning", "stage", "init"])
    p.add_argument("--seeds", help="comma list, default 0,1,2,3,4")
    p.add_argument("--data-dir", dest="data_dir", help="reuse/generate datasets here")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="inference timing per configuration")
    common(p)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--reps", type=int, default=7)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="per-class dataset statistics")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
