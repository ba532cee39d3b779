"""Datasets: synthetic shapes, image/label directories, downscaling, batching."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError, SpecError
from .tensor import RngStream

log = logging.getLogger(__name__)

VOID = 255
SHAPE_KINDS = ("circle", "rectangle", "triangle", "line")
CLASS_NAMES = ("background",) + SHAPE_KINDS
IMAGE_EXTS = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")

# base RGB per shape class; drawn colors jitter around these
_BASE_COLORS = {
    "circle": (0.85, 0.2, 0.2),
    "rectangle": (0.2, 0.75, 0.25),
    "triangle": (0.2, 0.3, 0.9),
    "line": (0.9, 0.85, 0.15),
}


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8, VOID for void
    id: str
    shapes: tuple = ()

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.label.shape:
            raise ShapeError(f"sample {self.id}: image {self.image.shape} vs label {self.label.shape}")
        self.image.setflags(write=False)
        self.label.setflags(write=False)


class Dataset:
    """Immutable ordered collection of samples."""

    def __init__(self, samples, num_classes, name=""):
        self.samples = tuple(samples)
        self.num_classes = int(num_classes)
        self.name = name

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def images(self, idx=None):
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in sel]) if sel else np.zeros((0, 3, 0, 0), np.float32)

    def labels(self, idx=None):
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.label for s in sel]) if sel else np.zeros((0, 0, 0), np.uint8)

    def validate(self):
        for s in self.samples:
            bad = (s.label >= self.num_classes) & (s.label != VOID)
            if bad.any():
                raise DataError(f"sample {s.id}: label values {sorted(set(s.label[bad].tolist()))} "
                                f"outside [0, {self.num_classes - 1}] and not void")
        return self


# -- synthetic shapes --------------------------------------------------------

@dataclass
class SyntheticSpec:
    size: int = 64
    num_classes: int = 5
    shapes_per_image: tuple = (2, 4)
    noise: float = 0.03
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    line_width: float = 3.0
    void_border: int = 2

    def to_dict(self):
        d = dict(self.__dict__)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs.astype(np.float64), ys.astype(np.float64)


def shape_mask(shape, size):
    """Boolean mask of a shape record, evaluated at integer pixel centres."""
    kind, g = shape[0], shape[1]
    xs, ys = _grid(size)
    if kind == "circle":
        cx, cy, r = g
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == "rectangle":
        x0, y0, x1, y1 = g
        return (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    if kind == "triangle":
        (ax, ay), (bx, by), (cx, cy) = g[0:2], g[2:4], g[4:6]
        d1 = (xs - bx) * (ay - by) - (ax - bx) * (ys - by)
        d2 = (xs - cx) * (by - cy) - (bx - cx) * (ys - cy)
        d3 = (xs - ax) * (cy - ay) - (cx - ax) * (ys - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    if kind == "line":
        x0, y0, x1, y1, width = g
        dx, dy = x1 - x0, y1 - y0
        t = ((xs - x0) * dx + (ys - y0) * dy) / (dx * dx + dy * dy)
        t = np.clip(t, 0.0, 1.0)
        px, py = x0 + t * dx - xs, y0 + t * dy - ys
        return px * px + py * py <= (width / 2) ** 2
    raise SpecError(f"unknown shape kind {kind!r}")


def _random_shape(kind, size, rng, line_width):
    lo, hi = size * 0.08, size * 0.22
    if kind == "circle":
        r = float(rng.uniform(low=lo, high=hi))
        cx, cy = (float(v) for v in rng.uniform((2,), low=r, high=size - 1 - r))
        return (kind, (cx, cy, r))
    if kind == "rectangle":
        w, h = (float(v) for v in rng.uniform((2,), low=2 * lo, high=2 * hi))
        x0 = float(rng.uniform(low=0, high=size - 1 - w))
        y0 = float(rng.uniform(low=0, high=size - 1 - h))
        return (kind, (x0, y0, x0 + w, y0 + h))
    if kind == "triangle":
        r = float(rng.uniform(low=1.2 * lo, high=1.2 * hi))
        cx, cy = (float(v) for v in rng.uniform((2,), low=r, high=size - 1 - r))
        a0 = float(rng.uniform(low=0, high=2 * np.pi))
        pts = []
        for k in range(3):
            a = a0 + k * 2 * np.pi / 3 + float(rng.uniform(low=-0.3, high=0.3))
            pts += [cx + r * np.cos(a), cy + r * np.sin(a)]
        return (kind, tuple(float(p) for p in pts))
    if kind == "line":
        length = float(rng.uniform(low=size * 0.35, high=size * 0.8))
        a = float(rng.uniform(low=0, high=np.pi))
        cx, cy = (float(v) for v in rng.uniform((2,), low=size * 0.25, high=size * 0.75))
        dx, dy = 0.5 * length * np.cos(a), 0.5 * length * np.sin(a)
        return (kind, (cx - dx, cy - dy, cx + dx, cy + dy, float(line_width)))
    raise SpecError(f"unknown shape kind {kind!r}")


def _background(size, rng):
    xs, ys = _grid(size)
    c0 = 0.35 + 0.3 * rng.uniform((3,))
    c1 = 0.35 + 0.3 * rng.uniform((3,))
    gray0, gray1 = c0.mean(), c1.mean()
    c0 = 0.6 * gray0 + 0.4 * c0
    c1 = 0.6 * gray1 + 0.4 * c1
    a = float(rng.uniform(low=0, high=2 * np.pi))
    t = ((xs * np.cos(a) + ys * np.sin(a)) / size + 1) / 2
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    freq = float(rng.uniform(low=2, high=5)) * 2 * np.pi / size
    phase = rng.uniform((2,), low=0, high=2 * np.pi)
    texture = 0.04 * np.sin(freq * xs + phase[0]) * np.cos(freq * ys + phase[1])
    return img + texture[None]


def render(shapes, colors, size, background, noise_field, void_border=0):
    """Composite shapes in order over the background; returns (image, label)."""
    img = background.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    for (kind, geom), color in zip(shapes, colors):
        m = shape_mask((kind, geom), size)
        img[:, m] = np.asarray(color)[:, None]
        label[m] = SHAPE_KINDS.index(kind) + 1
    img = np.clip(img + noise_field, 0.0, 1.0).astype(np.float32)
    if void_border:
        b = void_border
        label[:b, :] = VOID
        label[-b:, :] = VOID
        label[:, :b] = VOID
        label[:, -b:] = VOID
    return img, label


def generate_synthetic(spec):
    """Generate ``{"train": Dataset, "val": Dataset}`` fully determined by the seed."""
    if spec.size < 16:
        raise SpecError(f"image size {spec.size} is too small to place shapes (need >= 16)")
    if not 2 <= spec.num_classes <= len(CLASS_NAMES):
        raise SpecError(f"num_classes must be in [2, {len(CLASS_NAMES)}], got {spec.num_classes}")
    lo, hi = spec.shapes_per_image
    if lo < 1 or hi < lo:
        raise SpecError(f"invalid shapes_per_image {spec.shapes_per_image}")
    kinds = SHAPE_KINDS[: spec.num_classes - 1]
    root = RngStream(spec.seed)
    out = {}
    for split_id, (split, count) in enumerate((("train", spec.n_train), ("val", spec.n_val))):
        samples = []
        for i in range(count):
            rng = root.spawn(split_id, i)
            n_shapes = int(rng.integers(lo, hi + 1))
            chosen = [kinds[i % len(kinds)]] + [kinds[int(rng.integers(0, len(kinds)))] for _ in range(n_shapes - 1)]
            shapes, colors = [], []
            for kind in chosen:
                shapes.append(_random_shape(kind, spec.size, rng, spec.line_width))
                base = np.asarray(_BASE_COLORS[kind])
                colors.append(tuple(float(c) for c in np.clip(base + rng.uniform((3,), -0.12, 0.12), 0, 1)))
            bg = _background(spec.size, rng)
            noise = rng.normal((3, spec.size, spec.size), std=spec.noise)
            img, label = render(shapes, colors, spec.size, bg, noise, spec.void_border)
            samples.append(SegSample(img, label, f"{split}_{i:05d}", tuple(zip(shapes, colors))))
        out[split] = Dataset(samples, spec.num_classes, name=split)
    present = set()
    for s in out["train"]:
        present.update(np.unique(s.label).tolist())
    missing = set(range(spec.num_classes)) - present
    if missing:
        raise SpecError(f"classes {sorted(missing)} never appear in the train split; add more images")
    return out


# -- directory loader ------------------------------------------------------

def _stems(d):
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_image_label_dirs(image_dir, label_dir, num_classes, void_label=VOID, name=""):
    """Pair 8-bit RGB images with 8-bit train-id label maps by filename stem."""
    from PIL import Image

    imgs, labs = _stems(image_dir), _stems(label_dir)
    unpaired = sorted(set(imgs) ^ set(labs))
    if unpaired:
        raise DataError(f"unpaired files: {', '.join(unpaired)}")
    if not imgs:
        log.warning("no images found in %s", image_dir)
    samples = []
    for stem in sorted(imgs):
        with Image.open(imgs[stem]) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(labs[stem]) as lm:
            if lm.mode not in ("L", "P"):
                raise DataError(f"label {labs[stem].name} is not single-channel (mode {lm.mode})")
            lab = np.asarray(lm, dtype=np.uint8).copy()
        bad = (lab >= num_classes) & (lab != void_label)
        if bad.any():
            raise DataError(f"label {labs[stem].name}: values {sorted(set(lab[bad].tolist()))} "
                            f"outside [0, {num_classes - 1}] and not {void_label}")
        if void_label != VOID:
            lab = np.where(lab == void_label, VOID, lab).astype(np.uint8)
        samples.append(SegSample(np.ascontiguousarray(arr.transpose(2, 0, 1)), lab, stem))
    return Dataset(samples, num_classes, name=name)


def load_split(root, split, num_classes):
    root = Path(root) / split
    return load_image_label_dirs(root / "images", root / "labels", num_classes, name=split)


def write_image_label_dirs(dataset, root):
    """Write ``root/images/<id>.png`` (RGB) and ``root/labels/<id>.png`` (L)."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        rgb = np.rint(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        _atomic_save(Image.fromarray(rgb, "RGB"), root / "images" / f"{s.id}.png")
        _atomic_save(Image.fromarray(s.label, "L"), root / "labels" / f"{s.id}.png")


def _atomic_save(img, path):
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def quantize(dataset):
    """Round images to 8-bit levels, matching what a PNG round trip stores."""
    samples = [SegSample(np.rint(s.image * 255).astype(np.float32) / 255.0, s.label.copy(), s.id, s.shapes)
               for s in dataset]
    return Dataset(samples, dataset.num_classes, dataset.name)


# -- transforms --------------------------------------------------------------

def downscale(sample, factor=2):
    """Area-average the image, take the top-left label of each block."""
    if factor == 1:
        return sample
    c, h, w = sample.image.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} are not divisible by {factor}")
    img = sample.image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    lab = sample.label[::factor, ::factor]
    return SegSample(img.astype(sample.image.dtype), np.ascontiguousarray(lab), sample.id, sample.shapes)


def downscale_dataset(dataset, factor=2):
    return Dataset([downscale(s, factor) for s in dataset], dataset.num_classes, dataset.name)


def batch_indices(n, batch_size, shuffle_seed, epoch):
    """Per-epoch permutation of range(n) cut into batches; the last may be short."""
    if batch_size < 1:
        raise SpecError(f"batch_size must be >= 1, got {batch_size}")
    order = RngStream(shuffle_seed).spawn(epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset, batch_size, shuffle_seed, epoch):
    """Yield ``(images, labels, indices)`` for one epoch, order fixed by (seed, epoch)."""
    for idx in batch_indices(len(dataset), batch_size, shuffle_seed, epoch):
        yield dataset.images(idx), dataset.labels(idx), idx
