"""CSV schemas and SVG training-curve plots."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .checkpoint import atomic_write_bytes
from .errors import DataError
from .training import LOG_COLUMNS, EpochRow, TrainingLog

LOG_SCHEMA_VERSION = 1
SCORES_SCHEMA_VERSION = 1


def _fmt(v, digits=None):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.{digits}f}" if digits is not None else repr(v)
    return str(v)


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def write_log_csv(logbook, path, record_wall_time=False):
    rows = []
    for r in logbook.rows:
        rows.append([r.epoch, _fmt(r.loss), _fmt(r.val_loss), _fmt(r.acc), _fmt(r.val_acc),
                     _fmt(r.seconds, 3) if record_wall_time else ""])
    atomic_write_bytes(path, _csv_bytes(LOG_COLUMNS, rows))
    meta = {"schema": "caepl-training-log", "version": LOG_SCHEMA_VERSION, "monitor": logbook.monitor,
            "best_epoch": logbook.best_epoch}
    atomic_write_bytes(Path(path).with_suffix(".meta.json"), (json.dumps(meta, sort_keys=True) + "\n").encode())


def read_log_csv(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"log not found: {path}") from None
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
        raise DataError(f"{path}: expected columns {','.join(LOG_COLUMNS)}")

    def num(x):
        return float(x) if x != "" else math.nan

    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    logbook = TrainingLog(meta.get("monitor", "min val_loss"), best_epoch=meta.get("best_epoch"))
    for rec in reader:
        logbook.append(EpochRow(int(rec["epoch"]), num(rec["loss"]), num(rec["val_loss"]), num(rec["acc"]),
                                num(rec["val_acc"]), num(rec["seconds"])))
    return logbook


def scores_header(class_names):
    return ["split", "mean_iou", "pix_acc"] + [f"iou_{c}" for c in class_names]


def write_scores_csv(path, split, mean_iou, pix_acc, per_class, class_names):
    row = [split, _fmt(mean_iou, 4), _fmt(pix_acc, 4)] + [_fmt(float(v), 4) for v in per_class]
    atomic_write_bytes(path, _csv_bytes(scores_header(class_names), [row]))


def write_table_csv(path, header, rows):
    atomic_write_bytes(path, _csv_bytes(header, rows))


# -- SVG curves ------------------------------------------------------------

_COLORS = {"train": "#1f77b4", "val": "#d62728"}


def _panel(x0, y0, w, h, title, series, ylabel):
    """One axis box with polylines; ``series`` is [(label, xs, ys)]."""
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if not math.isnan(y)]
    out = [f'<g transform="translate({x0},{y0})">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="none" stroke="#333"/>',
           f'<text x="{w / 2}" y="-8" text-anchor="middle" font-size="13">{title}</text>',
           f'<text x="-38" y="{h / 2}" font-size="11" transform="rotate(-90 -38 {h / 2})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{w / 2}" y="{h + 32}" text-anchor="middle" font-size="11">epoch</text>']
    if not pts:
        out.append("</g>")
        return out
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(p[1] for p in pts), max(p[1] for p in pts)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymax = ymin + 1
    sx = lambda x: (x - xmin) / (xmax - xmin) * w  # noqa: E731
    sy = lambda y: h - (y - ymin) / (ymax - ymin) * h  # noqa: E731
    for i in range(5):
        yv = ymin + (ymax - ymin) * i / 4
        out.append(f'<text x="-4" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
        xv = xmin + (xmax - xmin) * i / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{h + 14}" text-anchor="middle" font-size="10">{xv:.0f}</text>')
    for k, (label, xs, ys) in enumerate(series):
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if not math.isnan(y))
        color = _COLORS.get(label, "#555")
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{w - 60}" y="{16 + 14 * k}" font-size="11" fill="{color}">{label}</text>')
    out.append("</g>")
    return out


def render_curves_svg(logbook, title=""):
    """Accuracy (left, when present) and loss (right) vs epoch for train and val."""
    ep = logbook.column("epoch")
    panels = []
    has_acc = any(not math.isnan(v) for v in logbook.column("acc") + logbook.column("val_acc"))
    if has_acc:
        panels.append(("Accuracy", [("train", ep, logbook.column("acc")), ("val", ep, logbook.column("val_acc"))],
                       "pixel accuracy"))
    panels.append(("Loss", [("train", ep, logbook.column("loss")), ("val", ep, logbook.column("val_loss"))], "loss"))
    pw, ph, margin = 320, 220, 60
    width = margin + len(panels) * (pw + margin)
    height = ph + 2 * margin + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>')
    for i, (name, series, ylabel) in enumerate(panels):
        parts += _panel(margin + i * (pw + margin), margin, pw, ph, name, series, ylabel)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_curves(log_path, out_path, title=None):
    logbook = read_log_csv(log_path)
    svg = render_curves_svg(logbook, title if title is not None else Path(log_path).parent.name)
    atomic_write_bytes(out_path, svg.encode())
    return out_path
