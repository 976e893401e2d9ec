"""Command-line entry points: synth, train, sweep-r, infer, score, eval,
export-heatmaps.

Every command echoes its parameters into a ``run_config.json`` next to its
outputs, so any artifact can be regenerated from that file plus the inputs.
The data root may come from the ``WEGLENET_DATA`` environment variable;
explicit flags win over a ``--config`` JSON file, which wins over defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics as metrics_mod
from .aggregation import AggregationSpec
from .baselines import convert_to_cam, infer_full_core
from .data import load_dataset, merge_background, save_dataset, save_mask_png, split_cores
from .heatmaps import export_core_heatmaps
from .model import WeGleNet, infer_segmentation, prepare_input
from .patches import extract_patches
from .scoring import (
    ScoringConfig,
    class_percentages,
    apply_score_rule,
    score_from_label_pair,
    score_to_ordinal,
    write_scoring_csv,
)
from .synthetic import SynthesisSpec, synthesize_dataset
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_run_config,
)


def _data_root(args) -> Path:
    root = args.data or os.environ.get("WEGLENET_DATA")
    if not root:
        raise SystemExit("no data root: pass --data or set WEGLENET_DATA")
    return Path(root)


def _ensure_out(path: Path, force: bool = True) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise SystemExit(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(out_dir: Path, args, command: str) -> None:
    payload = {
        "command": command,
        "parameters": {k: v for k, v in vars(args).items() if k != "func"},
        "metadata": {"created": time.strftime("%Y-%m-%dT%H:%M:%S")},
    }
    write_run_config(out_dir / "run_config.json", payload)


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config-file values fill flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return
    with open(args.config) as f:
        overrides = json.load(f)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, value in overrides.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) == defaults.get(key):
            setattr(args, key, value)


def cmd_synth(args) -> int:
    if args.n_cores <= 0:
        raise SystemExit("--n-cores must be positive")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise SystemExit(f"output directory {out} is not empty (use --force)")
    spec = SynthesisSpec(side=args.size, benign_fraction=args.benign_fraction)
    cores = synthesize_dataset(args.n_cores, args.seed, spec)
    save_dataset(out, cores, force=True)
    _echo_config(out, args, "synth")
    print(f"wrote {len(cores)} cores to {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    aggregation = AggregationSpec(method=args.agg_method, r=args.r, alpha=args.alpha)
    return TrainConfig(
        model_kind=args.model,
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        optimizer=args.optimizer,
        hs_enabled=args.hs,
        decay_window=args.decay_window,
        seed=args.seed,
        momentum=0.0 if args.plain_sgd else 0.9,
        deterministic=args.deterministic,
        augment_enabled=not args.no_augment,
        input_side=args.input_side,
        backbone=args.backbone,
        aggregation=aggregation,
        base_filters=args.base_filters,
        patch_window=args.patch_window,
        patch_step=args.patch_step,
        class_balanced=args.class_balanced,
    )


def cmd_train(args) -> int:
    root = _data_root(args)
    out = _ensure_out(Path(args.out))
    cores = load_dataset(root)
    config = _train_config_from_args(args).resolved()
    print(f"training {config.model_kind}: epochs={config.epochs} batch={config.batch_size} "
          f"lr={config.base_lr} optimizer={config.optimizer} hs={config.hs_enabled}")
    result = train(None, cores, config)
    ckpt_path = out / f"{config.model_kind}.ckpt"
    save_checkpoint(ckpt_path, result.model, config, result.best_epoch, result.best_val_loss)
    result.write_log_csv(out / "training_log.csv")
    _echo_config(out, args, "train")
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f}); "
          f"checkpoint at {ckpt_path}")
    return 0


def _global_probs(model: WeGleNet, image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        x = prepare_input(image, model.config.input_side).unsqueeze(0)
        probs, _ = model(x)
    return probs.squeeze(0).numpy().astype(np.float64)


def _infer_core(model, kind: str, core):
    if kind == "weglenet":
        cpm, mask = infer_segmentation(model, core.image)
        return cpm, mask, _global_probs(model, core.image)
    cpm, mask = infer_full_core(model, core.image)
    return cpm, mask, None


def cmd_infer(args) -> int:
    root = _data_root(args)
    out = _ensure_out(Path(args.out))
    model, meta = load_checkpoint(args.checkpoint)
    kind = meta["model_kind"]
    if kind == "vgg19sup":
        model = convert_to_cam(model)
    cores = load_dataset(root)
    if args.split != "all":
        cores = split_cores(cores, args.split)
    if not cores:
        raise SystemExit(f"no cores in split {args.split!r}")
    (out / "probmaps").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    def run_one(core):
        cpm, mask, gprobs = _infer_core(model, kind, core)
        payload = {"probs": cpm.probs.astype(np.float32), "source_size": cpm.source_size}
        if gprobs is not None:
            payload["global_probs"] = gprobs.astype(np.float32)
        np.savez_compressed(out / "probmaps" / f"{core.core_id}.npz", **payload)
        save_mask_png(mask, out / "masks" / f"{core.core_id}.png")
        return core.core_id

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            done = list(pool.map(run_one, cores))
    else:
        done = [run_one(c) for c in cores]
    _echo_config(out, args, "infer")
    print(f"inferred {len(done)} cores into {out}")
    return 0


def _load_pred_masks(pred_dir: Path) -> dict[str, np.ndarray]:
    masks_dir = pred_dir / "masks"
    if not masks_dir.exists():
        raise SystemExit(f"{pred_dir} has no masks/ subdirectory (run infer first)")
    out = {}
    for path in sorted(masks_dir.glob("*.png")):
        out[path.stem] = np.asarray(Image.open(path))
    if not out:
        raise SystemExit(f"no predicted masks under {masks_dir}")
    return out


def cmd_score(args) -> int:
    pred_dir = Path(args.pred)
    masks = _load_pred_masks(pred_dir)
    cfg = ScoringConfig(c=args.c, d=args.d)
    rows = []
    for core_id, mask in sorted(masks.items()):
        w = class_percentages(mask)
        rows.append({"core_id": core_id, "w": w, "score": apply_score_rule(w, cfg)})
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_scoring_csv(out_path, rows)
    print(f"scored {len(rows)} cores -> {out_path}")
    return 0


def _eval_against(
    ref_cores,
    pred_masks: dict[str, np.ndarray],
    pred_dir: Path,
    levels: list[str],
    args,
    suffix: str = "",
) -> dict[str, metrics_mod.EvaluationReport]:
    reports = {}
    with_masks = [c for c in ref_cores if c.mask is not None]
    if ("pixel" in levels or "patch" in levels) and not with_masks:
        raise SystemExit("pixel/patch evaluation requested but the reference set has no masks")

    if "pixel" in levels:
        ref = {c.core_id: c.mask for c in with_masks if c.core_id in pred_masks}
        reports["pixel" + suffix] = metrics_mod.pixel_level_eval(pred_masks, ref)

    if "patch" in levels:
        records = []
        for core in with_masks:
            if core.core_id not in pred_masks:
                continue
            records.extend(
                extract_patches(core, window=args.window, step=args.step, labeling="strict")
            )
        reports["patch" + suffix] = metrics_mod.patch_level_eval(
            pred_masks, records, window=args.window
        )

    if "core" in levels:
        cfg = ScoringConfig(c=args.c, d=args.d)
        ref_ord, pred_ord = [], []
        probs, labels = [], []
        for core in ref_cores:
            if core.core_id not in pred_masks or core.score is None:
                continue
            ref_ord.append(score_to_ordinal(score_from_label_pair(*core.score)))
            pred_ord.append(score_to_ordinal(apply_score_rule(class_percentages(pred_masks[core.core_id]), cfg)))
            npz_path = pred_dir / "probmaps" / f"{core.core_id}.npz"
            if npz_path.exists():
                data = np.load(npz_path)
                if "global_probs" in data:
                    probs.append(np.asarray(data["global_probs"])[1:4])
                    labels.append(core.label)
        auc = None
        auc_detail = {}
        if probs and len(probs) == len(ref_ord):
            try:
                auc_detail = metrics_mod.corelevel_auc(np.stack(probs), labels)
                auc = auc_detail["macro_auc"]
            except ValueError:
                auc_detail = {"skipped": "no evaluable class"}
        report = metrics_mod.core_level_eval(pred_ord, ref_ord, auc=auc)
        report.extra["auc_detail"] = auc_detail
        reports["core" + suffix] = report
    return reports


def cmd_eval(args) -> int:
    root = _data_root(args)
    pred_dir = Path(args.pred)
    out = _ensure_out(Path(args.out))
    pred_masks = _load_pred_masks(pred_dir)
    cores = load_dataset(root)
    if args.split != "all":
        cores = split_cores(cores, args.split)
    levels = [lvl.strip() for lvl in args.levels.split(",") if lvl.strip()]
    for lvl in levels:
        if lvl not in ("pixel", "patch", "core"):
            raise SystemExit(f"unknown evaluation level {lvl!r}")

    reports = _eval_against(cores, pred_masks, pred_dir, levels, args)
    if args.second_masks:
        second_dir = Path(args.second_masks)
        cores2 = []
        for core in cores:
            path = second_dir / f"{core.core_id}.png"
            if path.exists():
                mask = merge_background(np.asarray(Image.open(path)))
                core2 = type(core)(
                    core_id=core.core_id, image=core.image, mask=mask,
                    score=core.score, split=core.split,
                )
                cores2.append(core2)
        if not cores2:
            raise SystemExit(f"no alternative masks found under {second_dir}")
        reports.update(
            _eval_against(cores2, pred_masks, pred_dir, [l for l in levels if l != "core"], args, suffix="_ref2")
        )

    for name, report in reports.items():
        report.to_json(out / f"report_{name}.json")
        report.confusion.to_csv(out / f"confusion_{name}.csv")
        auc_txt = f" auc={report.auc:.4f}" if report.auc is not None else ""
        print(f"{name}: kappa={report.kappa:.4f} macro_f1={report.macro_f1:.4f} "
              f"miou={report.miou:.4f} acc={report.accuracy:.4f}{auc_txt}")
    _echo_config(out, args, "eval")
    return 0


def cmd_export_heatmaps(args) -> int:
    root = _data_root(args)
    pred_dir = Path(args.pred)
    out = _ensure_out(Path(args.out))
    cores = load_dataset(root)
    if args.split != "all":
        cores = split_cores(cores, args.split)
    probmaps = pred_dir / "probmaps"
    n = 0
    for core in cores:
        npz_path = probmaps / f"{core.core_id}.npz"
        if not npz_path.exists():
            continue
        data = np.load(npz_path)
        export_core_heatmaps(core.image, np.asarray(data["probs"], dtype=np.float64), out, core.core_id)
        n += 1
    if n == 0:
        raise SystemExit(f"no probability maps under {probmaps} match the selected cores")
    _echo_config(out, args, "export-heatmaps")
    print(f"rendered heatmaps for {n} cores into {out}")
    return 0


def cmd_sweep_r(args) -> int:
    root = _data_root(args)
    out = _ensure_out(Path(args.out))
    try:
        r_values = [float(v) for v in args.r_list.split(",") if v.strip()]
    except ValueError as exc:
        raise SystemExit(f"bad --r-list: {exc}")
    if not r_values:
        raise SystemExit("--r-list is empty")
    cores = load_dataset(root)
    val = split_cores(cores, "val")
    hs_settings = [False, True] if args.hs_both else [args.hs]

    rows = []
    for hs in hs_settings:
        for r in r_values:
            row = {"r": r, "hs": hs, "val_auc": "", "val_pixel_kappa": "", "error": ""}
            try:
                ns = argparse.Namespace(**vars(args))
                ns.model = "weglenet"
                ns.r = r
                ns.hs = hs
                ns.agg_method = "LSE"
                config = _train_config_from_args(ns).resolved()
                result = train(None, cores, config)
                model = result.model
                probs = np.stack([_global_probs(model, c.image)[1:4] for c in val])
                auc = metrics_mod.corelevel_auc(probs, [c.label for c in val])["macro_auc"]
                row["val_auc"] = f"{auc:.4f}"
                ref = {c.core_id: c.mask for c in val if c.mask is not None}
                if ref:
                    pred = {}
                    for core in val:
                        if core.mask is None:
                            continue
                        _, mask = infer_segmentation(model, core.image)
                        pred[core.core_id] = mask
                    kappa = metrics_mod.pixel_level_eval(pred, ref).kappa
                    row["val_pixel_kappa"] = f"{kappa:.4f}"
                save_checkpoint(out / f"weglenet_r{r:g}_hs{int(hs)}.ckpt", model, config,
                                result.best_epoch, result.best_val_loss)
            except Exception as exc:  # a failed r must not abort the sweep
                row["error"] = str(exc)
                print(f"r={r} hs={hs} failed: {exc}", file=sys.stderr)
            rows.append(row)
            print(f"r={row['r']} hs={row['hs']} val_auc={row['val_auc']} "
                  f"val_pixel_kappa={row['val_pixel_kappa']} {row['error']}")

    import csv as _csv

    with open(out / "sweep_report.csv", "w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=["r", "hs", "val_auc", "val_pixel_kappa", "error"])
        writer.writeheader()
        writer.writerows(rows)
    _echo_config(out, args, "sweep-r")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="JSON file with default parameter values")
    parser.add_argument("--deterministic", action="store_true",
                        help="bit-reproducible mode (slower)")
    parser.add_argument("--workers", type=int, default=1)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--optimizer", choices=["sgd", "nadam"], default=None)
    parser.add_argument("--hs", action="store_true", help="enable hide-and-seek")
    parser.add_argument("--decay-window", type=int, default=20)
    parser.add_argument("--plain-sgd", action="store_true", help="SGD without momentum")
    parser.add_argument("--no-augment", action="store_true")
    parser.add_argument("--input-side", type=int, default=None)
    parser.add_argument("--backbone", default="vgg19",
                        help="'vgg19' or 'vgg19_w<N>' (narrower stack)")
    parser.add_argument("--agg-method", choices=["LSE", "GAP", "GMP", "MixP"], default="LSE")
    parser.add_argument("--r", type=float, default=8.0, help="LSE sharpness")
    parser.add_argument("--alpha", type=float, default=0.5, help="MixP initial mix")
    parser.add_argument("--base-filters", type=int, default=64, help="UNet width")
    parser.add_argument("--patch-window", type=int, default=750)
    parser.add_argument("--patch-step", type=int, default=350)
    parser.add_argument("--class-balanced", action="store_true",
                        help="inverse-frequency class weights (vgg19sup)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weglenet",
        description="Weakly-supervised Gleason-grade segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n-cores", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=512, help="core side in pixels")
    p.add_argument("--benign-fraction", type=float, default=0.2)
    p.add_argument("--force", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("model", choices=["weglenet", "unet", "vgg19sup"])
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-r", help="train one model per LSE r value")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--r-list", default="1,5,8,10,15,25")
    p.add_argument("--hs-both", action="store_true",
                   help="run each r with and without hide-and-seek")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep_r)

    p = sub.add_parser("infer", help="segment cores with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="Gleason-score predicted masks")
    p.add_argument("--pred", required=True, help="infer output directory")
    p.add_argument("--out", required=True, help="scoring CSV path")
    p.add_argument("--c", type=float, default=0.03, help="presence threshold")
    p.add_argument("--d", type=float, default=0.70, help="dominance threshold")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate predictions against references")
    p.add_argument("--pred", required=True, help="infer output directory")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--levels", default="pixel,patch,core")
    p.add_argument("--second-masks", default=None,
                   help="directory with an alternative reference mask set")
    p.add_argument("--window", type=int, default=750)
    p.add_argument("--step", type=int, default=350)
    p.add_argument("--c", type=float, default=0.03)
    p.add_argument("--d", type=float, default=0.70)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-heatmaps", help="render per-class overlays")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    _add_common(p)
    p.set_defaults(func=cmd_export_heatmaps)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(args, parser)
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
