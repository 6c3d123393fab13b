"""Command-line entry point: ``shgnet <subcommand> [options]``.

Exit codes: 0 success, 2 usage/config error, 3 data or checkpoint error,
4 numeric failure. The default output root comes from ``SHGNET_OUT``.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import LABELS, __version__
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .dataset import (
    FoldPlan,
    compute_class_weights,
    holdout_split,
    load_manifest,
    per_fold_class_counts,
    stratified_kfold,
    to_binary_view,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .gradcam import grad_cam, render_overlay, write_heatmap_csv
from .imaging import AugmentParams, load_dual, preprocess, write_rgb
from .metrics import build_report
from .models import ModelConfig, build_model, load_backbone
from .report import render_report
from .synth import PretextSpec, SynthSpec, generate_dataset, generate_pretext_dataset
from .trainer import ImageSet, TrainRecipe, evaluate, run_kfold, train

ENV_OUT = "SHGNET_OUT"
RUN_CONFIG = "run_config.json"
INCOMPLETE = "INCOMPLETE"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# named architectures for `kfold --configs`; digits select a depth preset
TOY_BLOCKS = (1, 1, 1)


def _out_root() -> Path:
    return Path(os.environ.get(ENV_OUT, "runs"))


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- shared option groups --------------------------------------------------------

def _add_out(p: argparse.ArgumentParser, name: str) -> None:
    p.add_argument("--out", type=Path, default=None,
                   help=f"output directory (default: ${ENV_OUT}/{name}, or runs/{name})")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--depth", type=int, choices=(18, 34, 50), default=None,
                   help="residual depth preset (default: --blocks)")
    g.add_argument("--blocks", type=_ints, default=(2, 2, 2, 2), help="blocks per stage")
    g.add_argument("--width", type=int, default=16, help="base channel width")
    g.add_argument("--head-hidden", type=int, default=512)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--image-size", type=int, default=64, help="network input size (pixels)")
    g.add_argument("--model-seed", type=int, default=0)


def _add_recipe(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training recipe")
    g.add_argument("--epochs", type=int, default=60)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--smoothing", type=float, default=0.1)
    g.add_argument("--mixup", type=float, default=0.2, help="mixup alpha (0 disables)")
    g.add_argument("--clip", type=float, default=1.0)
    g.add_argument("--rotation", type=float, default=30.0, help="rotation limit in degrees")
    g.add_argument("--freeze", choices=("full", "frozen_backbone"), default="full")
    g.add_argument("--selection", choices=("best", "last"), default="best")
    g.add_argument("--no-class-weights", action="store_true")
    g.add_argument("--seed", type=int, default=0)


def _model_config(a, num_classes: int) -> ModelConfig:
    kw = dict(base_width=a.width, num_classes=num_classes, head_hidden=a.head_hidden,
              head_dropout=a.dropout, input_size=a.image_size, seed=a.model_seed)
    if a.depth is not None:
        return ModelConfig.from_depth(a.depth, **kw)
    return ModelConfig(block_counts=a.blocks, **kw)


def _recipe(a) -> TrainRecipe:
    aug = AugmentParams(rotation_limit_deg=a.rotation, rotate=a.rotation > 0)
    return TrainRecipe(lr=a.lr, weight_decay=a.weight_decay, batch_size=a.batch_size,
                       epochs=a.epochs, label_smoothing=a.smoothing, mixup_alpha=a.mixup,
                       clip_norm=a.clip, freeze=a.freeze, seed=a.seed, augment=aug,
                       selection=a.selection, use_class_weights=not a.no_class_weights)


def _versions() -> dict:
    return {"shgnet": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _run_config(out: Path, args, **extra) -> None:
    params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
              if k != "func"}
    _write_json(out / RUN_CONFIG, {"subcommand": args.command, "args": params,
                                   "versions": _versions(), **extra})


def _load_data(manifest_path, size: int, binary: bool):
    manifest = load_manifest(manifest_path)
    if binary:
        manifest = to_binary_view(manifest)
    return manifest, ImageSet.from_manifest(manifest, size)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(a, out: Path) -> None:
    counts = a.counts
    if len(counts) != len(LABELS):
        raise ConfigError(f"--counts needs {len(LABELS)} values ({','.join(LABELS)})")
    spec = SynthSpec(counts=dict(zip(LABELS, counts)), image_size=a.size, noise=a.noise, seed=a.seed)
    manifest = generate_dataset(spec, out)
    _run_config(out, a, counts=manifest.counts)
    print(f"wrote {len(manifest)} samples to {out}")


def cmd_preprocess(a, out: Path) -> None:
    manifest = load_manifest(a.manifest)
    (out / "fused").mkdir(exist_ok=True)
    lines = ["sample_id,path,label"]
    for r in manifest.records:
        rgb = preprocess(load_dual(manifest.resolve(r.af_path), manifest.resolve(r.shg_path),
                                   r.sample_id), a.size)
        rel = f"fused/{r.sample_id}.png"
        write_rgb(out / rel, rgb)
        lines.append(f"{r.sample_id},{rel},{r.label}")
    (out / "fused_index.csv").write_text("\n".join(lines) + "\n")
    _run_config(out, a)
    print(f"fused {len(manifest)} images into {out / 'fused'}")


def cmd_split(a, out: Path) -> None:
    manifest = load_manifest(a.manifest, check_files=False)
    if a.binary:
        manifest = to_binary_view(manifest)
    plan = stratified_kfold(manifest, a.k, a.seed, a.group_by_patient)
    (out / "folds.json").write_text(plan.to_json() + "\n")
    table = per_fold_class_counts(plan, manifest)
    _run_config(out, a, per_fold_counts={c: table[:, i].tolist()
                                         for i, c in enumerate(manifest.classes)})
    for f in range(a.k):
        print(f"fold {f}: " + " ".join(f"{c}={n}" for c, n in zip(manifest.classes, table[f])))


def cmd_pretrain(a, out: Path) -> None:
    ds = generate_pretext_dataset(PretextSpec(n_per_class=a.n_per_class, n_classes=a.classes,
                                              image_size=a.image_size), seed=a.data_seed)
    data = ImageSet(ds.images, ds.labels, ds.sample_ids, ds.classes)
    config = _model_config(a, len(ds.classes))
    recipe = _recipe(a)
    model, hist = train(build_model(config), data, replace(recipe, selection="last"),
                        None)
    hist.write_csv(out / "history.csv")
    save_checkpoint(model, out / "backbone.ckpt", seed=recipe.seed,
                    extra={"classes": list(ds.classes), "image_size": a.image_size,
                           "recipe": recipe.to_dict(), "task": "pretext"})
    _run_config(out, a, model=config.to_dict(), recipe=recipe.to_dict())
    print(f"pretext backbone saved to {out / 'backbone.ckpt'} "
          f"(final train acc {hist.train_acc[-1]:.3f})")


def _pretrained_state(path, config: ModelConfig):
    header, tensors = read_checkpoint(path)
    src = ModelConfig.from_dict(header["config"])
    if (src.block_counts, src.base_width, src.bottleneck) != (
            config.block_counts, config.base_width, config.bottleneck):
        raise ConfigError(f"pretrained backbone {path} has a different architecture")
    return {k: v for k, v in tensors.items() if not k.startswith("optim.")}


def cmd_train(a, out: Path) -> None:
    manifest, data = _load_data(a.manifest, a.image_size, a.binary)
    if a.folds:
        plan = FoldPlan.from_json(Path(a.folds).read_text())
        train_ids, val_ids = plan.split(a.fold)
    else:
        train_ids, val_ids = holdout_split(manifest, a.holdout, a.seed)
    train_set, val_set = data.subset(train_ids), data.subset(val_ids)
    config = _model_config(a, len(data.classes))
    recipe = _recipe(a)
    model = build_model(config)
    if a.pretrained:
        load_backbone(model, _pretrained_state(a.pretrained, config))
    weights = compute_class_weights(train_set.counts())
    model, hist = train(model, train_set, recipe, weights, val=val_set)
    hist.write_csv(out / "history.csv")
    save_checkpoint(model, out / "model.ckpt", seed=recipe.seed,
                    extra={"classes": list(data.classes), "image_size": a.image_size,
                           "recipe": recipe.to_dict(), "val_ids": val_ids})
    scores, _ = evaluate(model, val_set)
    report = build_report(scores, val_set.labels, val_set.classes)
    report.write(out, "eval")
    _write_json(out / "metrics.json", {
        "accuracy": report.accuracy, "macro_recall": report.macro_recall,
        "macro_precision": report.macro_precision, "macro_f1": report.macro_f1,
        "best_epoch": hist.best_epoch, "class_weights": weights,
        "n_train": len(train_set), "n_val": len(val_set)})
    _run_config(out, a, model=config.to_dict(), recipe=recipe.to_dict())
    print(f"validation accuracy {report.accuracy:.3f}, macro recall {report.macro_recall:.3f}")


def _named_config(name: str, a, num_classes: int) -> ModelConfig:
    kw = dict(num_classes=num_classes, head_hidden=a.head_hidden, head_dropout=a.dropout,
              input_size=a.image_size, seed=a.model_seed)
    if name == "toy":
        return ModelConfig(block_counts=TOY_BLOCKS, base_width=8, **kw)
    if name.isdigit():
        return ModelConfig.from_depth(int(name), base_width=a.width, **kw)
    raise ConfigError(f"unknown config {name!r}; use 'toy' or a depth such as 18")


def cmd_kfold(a, out: Path) -> None:
    manifest, data = _load_data(a.manifest, a.image_size, a.binary)
    recipe = _recipe(a)
    results = {}
    for name in a.configs.split(","):
        config = _named_config(name.strip(), a, len(data.classes))
        pretrained = _pretrained_state(a.pretrained, config) if a.pretrained else None
        res = run_kfold(data, config, recipe, k=a.k, seed=a.seed, pretrained=pretrained,
                        workers=a.workers, group_by_patient=a.group_by_patient,
                        manifest=manifest)
        results[name] = res.to_dict()
        for f, (rep, hist) in enumerate(zip(res.reports, res.histories)):
            rep.write(out / name, f"fold{f}")
            hist.write_csv(out / name / f"fold{f}_history.csv")
        s = res.summary
        print(f"{name}: accuracy {s['accuracy']['mean']:.3f} +/- {s['accuracy']['std']:.3f}")
    _write_json(out / "kfold.json", {"configs": results})
    _run_config(out, a, recipe=recipe.to_dict())


def cmd_eval(a, out: Path) -> None:
    model, _, header = load_checkpoint(a.checkpoint, with_optimizer=True)
    extra = header.get("extra", {})
    manifest, data = _load_data(a.manifest, extra.get("image_size", a.image_size),
                                tuple(extra.get("classes", LABELS)) != LABELS)
    if a.ids == "val" and "val_ids" in extra:
        data = data.subset(extra["val_ids"])
    scores, _ = evaluate(model, data)
    report = build_report(scores, data.labels, data.classes)
    report.write(out, "eval")
    _run_config(out, a)
    print(f"accuracy {report.accuracy:.3f} on {len(data)} samples")


def cmd_gradcam(a, out: Path) -> None:
    model, _, header = load_checkpoint(a.checkpoint, with_optimizer=True)
    extra = header.get("extra", {})
    manifest = load_manifest(a.manifest)
    recs = [r for r in manifest.records if r.sample_id == a.sample_id] if a.sample_id \
        else list(manifest.records[:1])
    if not recs:
        raise DataError(f"sample {a.sample_id!r} not in {a.manifest}")
    r = recs[0]
    image = preprocess(load_dual(manifest.resolve(r.af_path), manifest.resolve(r.shg_path),
                                 r.sample_id), extra.get("image_size", a.image_size))
    classes = extra.get("classes", list(LABELS))
    target = classes.index(a.target) if a.target else classes.index(
        "cancer" if "cancer" in classes else classes[-1])
    hm = grad_cam(model, image, target, a.layer)
    write_rgb(out / f"gradcam_{r.sample_id}.png", render_overlay(image, hm.upsampled))
    write_heatmap_csv(out / f"gradcam_{r.sample_id}.csv", hm.upsampled)
    _run_config(out, a, layer=hm.layer_id, target_class=classes[target])
    print(f"Grad-CAM for {r.sample_id} ({classes[target]}) at {hm.layer_id}")


def cmd_report(a, out: Path) -> None:
    paths = render_report(a.input, out)
    if not paths:
        raise DataError(f"nothing to plot in {a.input} (expected eval.json, kfold.json or history.csv)")
    _run_config(out, a, figures=[p.name for p in paths])
    print(f"wrote {len(paths)} figures to {out}")


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shgnet", description="Dual-modality tissue classifier toolkit")
    parser.add_argument("--version", action="version", version=f"shgnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic SHG/AF dataset")
    p.add_argument("--counts", type=_ints, default=(36, 101, 102), help="normal,fibrosis,cancer")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p, "synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize and fuse every manifest sample to RGB")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=None)
    _add_out(p, "preprocess")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="stratified k-fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group-by-patient", action="store_true")
    p.add_argument("--binary", action="store_true")
    _add_out(p, "split")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="pretrain a backbone on synthetic texture families")
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--data-seed", type=int, default=0)
    _add_model(p)
    _add_recipe(p)
    _add_out(p, "pretrain")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one model (3-class or --binary)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", help="folds.json from `split`; without it a holdout split is used")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--pretrained", help="checkpoint whose backbone initializes the model")
    _add_model(p)
    _add_recipe(p)
    _add_out(p, "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("kfold", help="k-fold comparison across architectures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--configs", default="18,34,50", help="comma list of 'toy' or depths")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--group-by-patient", action="store_true")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--pretrained")
    _add_model(p)
    _add_recipe(p)
    _add_out(p, "kfold")
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ids", choices=("all", "val"), default="all",
                   help="'val' restricts to the checkpoint's validation ids")
    p.add_argument("--image-size", type=int, default=64)
    _add_out(p, "eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="Grad-CAM triptych for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample-id")
    p.add_argument("--target", help="class name to explain (default: cancer)")
    p.add_argument("--layer", help="layer id (default: deepest stage)")
    p.add_argument("--image-size", type=int, default=64)
    _add_out(p, "gradcam")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="render SVG figures from stored results")
    p.add_argument("--input", required=True, type=Path)
    _add_out(p, "report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = args.out or (_out_root() / args.command)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text(f"{args.command} did not finish\n")
    try:
        args.func(args, out)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    marker.unlink()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
