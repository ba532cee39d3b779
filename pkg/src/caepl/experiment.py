"""Runners behind the CLI: training, evaluation, the comparison matrix, audits."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import models
from .checkpoint import load_checkpoint, save_checkpoint
from .config import train_config
from .data import CLASS_NAMES, SyntheticSpec, downscale_dataset, generate_synthetic, load_split
from .errors import ConfigError, MissingCheckpointError
from .layers import he_normal_init
from .reports import write_log_csv, write_scores_csv, write_table_csv
from .training import evaluate_autoencoder, evaluate_segmenter, train_autoencoder, train_segmenter

log = logging.getLogger(__name__)


# -- datasets and models ---------------------------------------------------

def load_datasets(cfg):
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        spec = dict(d["synthetic"])
        spec["shapes_per_image"] = tuple(spec["shapes_per_image"])
        splits = generate_synthetic(SyntheticSpec(**spec))
    elif d["kind"] == "directory":
        if not d.get("root"):
            raise ConfigError("dataset.root is required for directory datasets")
        k = d["num_classes"]
        splits = {"train": load_split(d["root"], d["train_split"], k), "val": load_split(d["root"], d["val_split"], k)}
    else:
        raise ConfigError(f"unknown dataset kind {d['kind']!r}")
    factor = int(d.get("downscale", 1) or 1)
    if factor != 1:
        splits = {k: downscale_dataset(v, factor) for k, v in splits.items()}
    return splits


def num_classes(cfg):
    if cfg["experiment"].get("num_classes"):
        return int(cfg["experiment"]["num_classes"])
    d = cfg["dataset"]
    return int(d["synthetic"]["num_classes"] if d["kind"] == "synthetic" else d["num_classes"])


def class_names(cfg):
    k = num_classes(cfg)
    if cfg["dataset"]["kind"] == "synthetic" and k <= len(CLASS_NAMES):
        return list(CLASS_NAMES[:k])
    return [str(i) for i in range(k)]


def ae_variant(variant):
    return variant.lower().replace("-fcn", "")


def build_model(cfg, variant=None, autoencoder=False):
    e = cfg["experiment"]
    variant = (variant or e["variant"]).lower()
    if autoencoder:
        variant = ae_variant(variant)
        if variant in ("fcn", "eb4"):
            raise ConfigError(f"variant {variant!r} has no autoencoder to pre-train")
    return models.build_variant(variant, scale=e["scale"], num_classes=num_classes(cfg),
                                filters=e.get("encoder_filters"), bn_mode=e.get("bn_mode"), divisor=e["divisor"])


def _meta(cfg, kind, variant, seed):
    return {"kind": kind, "variant": variant, "scale": cfg["experiment"]["scale"], "seed": seed,
            "num_classes": num_classes(cfg)}


# -- training --------------------------------------------------------------

def run_train_ae(cfg, out_dir, seed=None, variant=None, splits=None):
    seed = cfg["seed"] if seed is None else seed
    variant = ae_variant(variant or cfg["experiment"]["variant"])
    out_dir = Path(out_dir)
    splits = splits or load_datasets(cfg)
    tcfg = train_config(cfg, "train_ae", seed)
    model = build_model(cfg, variant, autoencoder=True).materialize(tcfg.dtype)
    he_normal_init(model, seed)
    logbook, best = train_autoencoder(model, splits["train"], splits["val"], tcfg)
    meta = _meta(cfg, "autoencoder", variant, seed)
    best.metadata.update(meta)
    write_log_csv(logbook, out_dir / "log.csv", tcfg.record_wall_time)
    save_checkpoint(best, out_dir / "best.ckpt")
    save_checkpoint(model, out_dir / "last.ckpt", {**meta, "epoch": logbook.rows[-1].epoch})
    return {"log": logbook, "best": best, "dir": out_dir}


def init_segmenter(model, cfg, seed, encoder_checkpoint=None):
    """Apply the configured initialization policy; returns a short description."""
    e = cfg["experiment"]
    he_normal_init(model, seed)
    policy = "he_normal"
    if encoder_checkpoint is not None:
        ckpt = encoder_checkpoint if hasattr(encoder_checkpoint, "arrays") else load_checkpoint(encoder_checkpoint)
        models.transfer_encoder_weights(model, ckpt)
        policy = "encoder_from_checkpoint"
    elif e["init"] == "encoder_from_checkpoint":
        if not e.get("encoder_checkpoint"):
            raise ConfigError("init=encoder_from_checkpoint needs experiment.encoder_checkpoint")
        models.transfer_encoder_weights(model, load_checkpoint(e["encoder_checkpoint"]))
        policy = "encoder_from_checkpoint"
    if e["init"] == "name_mapped":
        if not e.get("import_checkpoint"):
            raise ConfigError("init=name_mapped needs experiment.import_checkpoint")
        name_map = e.get("name_map") or models.vgg16_name_map(skip_first=e.get("vgg16_skip_first", False))
        models.import_weights_by_name(model, load_checkpoint(e["import_checkpoint"]), name_map)
        policy += "+name_mapped"
    return policy


def run_train_seg(cfg, out_dir, seed=None, variant=None, encoder_checkpoint=None, splits=None):
    seed = cfg["seed"] if seed is None else seed
    variant = (variant or cfg["experiment"]["variant"]).lower()
    out_dir = Path(out_dir)
    splits = splits or load_datasets(cfg)
    section = "train_fcn" if variant == "fcn" else "train_caepl"
    tcfg = train_config(cfg, section, seed)
    model = build_model(cfg, variant).materialize(tcfg.dtype)
    policy = init_segmenter(model, cfg, seed, encoder_checkpoint)
    logbook, best = train_segmenter(model, splits["train"], splits["val"], tcfg)
    meta = {**_meta(cfg, "segmenter", variant, seed), "init": policy}
    best.metadata.update(meta)
    write_log_csv(logbook, out_dir / "log.csv", tcfg.record_wall_time)
    save_checkpoint(best, out_dir / "best.ckpt")
    save_checkpoint(model, out_dir / "last.ckpt", {**meta, "epoch": logbook.rows[-1].epoch})
    scores = score_checkpoint(best, splits["val"], cfg, "val", out_dir / "scores.csv")
    return {"log": logbook, "best": best, "dir": out_dir, "scores": scores, "init": policy}


# -- evaluation --------------------------------------------------------------

def score_checkpoint(ckpt, dataset, cfg, split, out_path=None):
    model = ckpt.build_model()
    if ckpt.metadata.get("kind") == "autoencoder":
        tcfg = train_config(cfg, "train_ae", ckpt.metadata.get("seed", cfg["seed"]))
        val_loss, recon, corrupted = evaluate_autoencoder(model, dataset, tcfg)
        scores = {"split": split, "val_loss": val_loss, "recon_mse": recon, "corrupted_mse": corrupted}
        if out_path:
            write_table_csv(out_path, ["split", "val_loss", "recon_mse", "corrupted_mse"],
                            [[split, f"{val_loss:.6f}", f"{recon:.6f}", f"{corrupted:.6f}"]])
        return scores
    k = ckpt.metadata.get("num_classes") or num_classes(cfg)
    loss, cm = evaluate_segmenter(model, dataset, num_classes=k)
    names = class_names(cfg) if len(class_names(cfg)) == k else [str(i) for i in range(k)]
    scores = {"split": split, "loss": loss, "mean_iou": cm.mean_iou(), "pix_acc": cm.pixel_accuracy(),
              "per_class_iou": cm.per_class_iou().tolist(), "confusion": cm}
    if out_path:
        write_scores_csv(out_path, split, scores["mean_iou"], scores["pix_acc"], scores["per_class_iou"], names)
    return scores


def run_evaluate(cfg, checkpoint, split="val", out_path=None):
    path = Path(checkpoint)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    splits = load_datasets(cfg)
    if split not in splits:
        raise ConfigError(f"unknown split {split!r}; available: {', '.join(splits)}")
    out_path = out_path or path.with_name(f"scores_{split}.csv")
    return score_checkpoint(ckpt, splits[split], cfg, split, out_path)


# -- comparison matrix ---------------------------------------------------------

SUMMARY_HEADER = ["seed", "model", "encoder_weights", "mean_iou", "pix_acc", "best_epoch", "delta_mean_iou_vs_fcn"]


def _compare_seed(cfg, out_dir, seed):
    out_dir = Path(out_dir) / f"seed_{seed}"
    splits = load_datasets(cfg)
    pretrained = {}
    rows = []
    for run in cfg["compare"]["runs"]:
        variant = run["variant"].lower()
        use = bool(run.get("encoder_weights", False))
        tag = f"{run['name']}_{'use' if use else 'not-use'}".lower().replace(" ", "_")
        ckpt = None
        if use:
            key = ae_variant(variant)
            if key not in pretrained:
                res = run_train_ae(cfg, out_dir / f"pretrain_{key}", seed=seed, variant=key, splits=splits)
                pretrained[key] = res["best"]
            ckpt = pretrained[key]
        res = run_train_seg(cfg, out_dir / tag, seed=seed, variant=variant, encoder_checkpoint=ckpt, splits=splits)
        rows.append({"seed": seed, "model": run["name"], "encoder_weights": "use" if use else "not use",
                     "mean_iou": res["scores"]["mean_iou"], "pix_acc": res["scores"]["pix_acc"],
                     "best_epoch": res["log"].best_epoch, "variant": variant})
    base = next((r["mean_iou"] for r in rows if r["variant"] == "fcn"), math.nan)
    for r in rows:
        r["delta_mean_iou_vs_fcn"] = r["mean_iou"] - base
    return rows


def run_compare(cfg, out_dir, jobs=None):
    """Train every declared run for every seed; write per-seed and aggregated summaries."""
    out_dir = Path(out_dir)
    seeds = [int(s) for s in cfg["compare"]["seeds"]]
    jobs = int(jobs or cfg["compare"].get("jobs", 1) or 1)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_compare_seed, [cfg] * len(seeds), [out_dir] * len(seeds), seeds))
    else:
        per_seed = [_compare_seed(cfg, out_dir, s) for s in seeds]
    rows = [r for batch in per_seed for r in batch]
    table = [[r["seed"], r["model"], r["encoder_weights"], f"{r['mean_iou']:.4f}", f"{r['pix_acc']:.4f}",
              r["best_epoch"], f"{r['delta_mean_iou_vs_fcn']:+.4f}"] for r in rows]
    agg = []
    order = []
    for r in rows:
        key = (r["model"], r["encoder_weights"])
        if key not in order:
            order.append(key)
    for key in order:
        sel = [r for r in rows if (r["model"], r["encoder_weights"]) == key]
        agg.append({"model": key[0], "encoder_weights": key[1],
                    "mean_iou": float(np.mean([r["mean_iou"] for r in sel])),
                    "pix_acc": float(np.mean([r["pix_acc"] for r in sel])),
                    "delta_mean_iou_vs_fcn": float(np.mean([r["delta_mean_iou_vs_fcn"] for r in sel])),
                    "n_seeds": len(sel)})
        table.append(["mean", key[0], key[1], f"{agg[-1]['mean_iou']:.4f}", f"{agg[-1]['pix_acc']:.4f}", "",
                      f"{agg[-1]['delta_mean_iou_vs_fcn']:+.4f}"])
    write_table_csv(out_dir / "summary.csv", SUMMARY_HEADER, table)
    return {"rows": rows, "aggregate": agg, "path": out_dir / "summary.csv"}


# -- audits -----------------------------------------------------------------

def params_report(variant, scale="full", cfg=None, num_classes_=None):
    cfg = cfg or {"experiment": {}}
    e = cfg.get("experiment", {})
    k = num_classes_ or e.get("num_classes") or (20 if scale == "full" else 5)
    model = models.build_variant(variant, scale=scale, num_classes=k, filters=e.get("encoder_filters"),
                                 bn_mode=e.get("bn_mode"), divisor=e.get("divisor", 8))
    report = models.count_parameters(model)
    target = models.REPORTED_COUNTS.get(variant.lower()) if scale == "full" else None
    return model, report, target


def format_params(variant, scale, report, target):
    lines = [f"{'model':<12}{'trainable':>16}{'non-trainable':>16}{'total':>16}",
             f"{variant:<12}{report.trainable:>16,}{report.non_trainable:>16,}{report.total:>16,}"]
    if target:
        lines.append(f"{'reported':<12}{target[0]:>16,}{target[1]:>16,}{target[2]:>16,}")
        d = [report.trainable - target[0], report.non_trainable - target[1], report.total - target[2]]
        lines.append(f"{'delta':<12}{d[0]:>+16,}{d[1]:>+16,}{d[2]:>+16,}")
        lines.append(f"{'delta %':<12}{100 * d[0] / target[0]:>+16.4f}{100 * d[1] / target[1]:>+16.4f}"
                     f"{100 * d[2] / target[2]:>+16.4f}")
    return "\n".join(lines)


def search_report(targets=None, **kw):
    """JSON-ready result of the exhaustive autoencoder width search."""
    targets = targets or models.REPORTED_COUNTS["ae4l"]
    res = models.search_ae_config(targets, **kw)

    def spec(s):
        return {"encoder_filters": s.encoder_filters, "final_bn": s.final_bn}

    return {"targets": {"trainable": targets[0], "non_trainable": targets[1],
                        "total": targets[0] + targets[1]},
            "constraints": res.constraints, "evaluated": res.evaluated,
            "matches": [spec(s) for s in res.matches],
            "closest": [{**spec(s), "relative_error": err, "trainable": t, "non_trainable": n}
                        for err, s, t, n in res.closest]}
