"""Corruption, optimizer, L2 penalty and the two training loops."""
from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .checkpoint import Checkpoint
from .data import VOID, batch_indices
from .errors import ConfigError, ContractError, DataError, ParameterError
from .metrics import ConfusionMatrix
from .tensor import RngStream, Tensor

log = logging.getLogger(__name__)

# spawn-key namespaces for derived random streams
_TRAIN_NOISE, _VAL_NOISE = 1, 2


# -- configuration -----------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 4
    l2_map: dict = field(default_factory=lambda: {"*": 1e-3})
    max_epochs: int = 300
    patience: int = 50
    monitor: str = "min val_loss"
    seed: int = 0
    loss: str = "bce"
    p_corrupt: float = 0.5
    p_white: float = 0.5
    corrupt_mode: str = "element"
    dtype: str = "float32"
    eval_batch_size: int = 25
    record_wall_time: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if any(v < 0 for v in self.l2_map.values()):
            raise ConfigError(f"L2 coefficients must be >= 0: {self.l2_map}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.monitor not in ("min val_loss", "max val_acc"):
            raise ConfigError(f"monitor must be 'min val_loss' or 'max val_acc', got {self.monitor!r}")
        if self.loss not in ("bce", "mse"):
            raise ConfigError(f"loss must be 'bce' or 'mse', got {self.loss!r}")
        if self.corrupt_mode not in ("element", "pixel"):
            raise ConfigError(f"corrupt_mode must be 'element' or 'pixel', got {self.corrupt_mode!r}")

    @classmethod
    def autoencoder(cls, **kw):
        kw = {"batch_size": 4, "l2_map": {"*": 1e-3}, "monitor": "min val_loss", **kw}
        return cls(**kw)

    @classmethod
    def segmenter(cls, **kw):
        kw = {"batch_size": 5, "l2_map": {"*": 1e-4}, "monitor": "max val_acc", **kw}
        return cls(**kw)

    @classmethod
    def caepl(cls, **kw):
        kw = {"batch_size": 5, "l2_map": {"encoder.*": 1e-3, "fcn.*": 5e-4}, "monitor": "max val_acc", **kw}
        return cls(**kw)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- corruption ------------------------------------------------------------

def corrupt_salt_pepper(image, p_corrupt=0.5, p_white=0.5, rng=None, mode="element"):
    """Salt-and-pepper noise; returns a new array, the input is untouched.

    Each element (or, with ``mode="pixel"``, each pixel across channels) is
    corrupted with probability ``p_corrupt``; a corrupted value becomes 1 with
    probability ``p_white`` and 0 otherwise.
    """
    for name, p in (("p_corrupt", p_corrupt), ("p_white", p_white)):
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"{name} must be in [0, 1], got {p}")
    if rng is None:
        rng = RngStream(0)
    image = np.asarray(image)
    if mode == "element":
        shape = image.shape
    elif mode == "pixel":
        shape = image.shape[:-3] + (1,) + image.shape[-2:]
    else:
        raise ParameterError(f"unknown corruption mode {mode!r}")
    hit = rng.random(shape) < p_corrupt
    white = rng.random(shape) < p_white
    hit, white = np.broadcast_to(hit, image.shape), np.broadcast_to(white, image.shape)
    out = np.where(hit, np.where(white, 1.0, 0.0), image)
    return out.astype(image.dtype, copy=False)


def corrupt_batch(images, indices, seed, key, p_corrupt, p_white, mode="element"):
    """Corrupt each sample with a stream derived from (seed, key, sample index)."""
    root = RngStream(seed)
    out = np.empty_like(images)
    for j, i in enumerate(indices):
        out[j] = corrupt_salt_pepper(images[j], p_corrupt, p_white, root.spawn(*key, int(i)), mode)
    return out


# -- optimizer and penalty ---------------------------------------------------

def sgd_nesterov_step(params, grads, velocity, lr, momentum):
    """In-place update: v <- mu*v - lr*g ; theta <- theta + mu*v - lr*g."""
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = velocity.setdefault(name, np.zeros_like(theta))
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ContractError(f"{name}: parameter {theta.shape}, gradient {g.shape}, velocity {v.shape}")
        mu = theta.dtype.type(momentum)
        eta = theta.dtype.type(lr)
        v *= mu
        v -= eta * g
        theta += mu * v - eta * g


class SGD:
    """SGD with (Nesterov) momentum over a model's trainable tensors."""

    def __init__(self, params, lr, momentum=0.9, nesterov=True):
        self.params = params
        self.lr, self.momentum, self.nesterov = lr, momentum, nesterov
        self.velocity = {}

    def step(self):
        values = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        if self.nesterov:
            sgd_nesterov_step(values, grads, self.velocity, self.lr, self.momentum)
        else:
            for k, g in grads.items():
                v = self.velocity.setdefault(k, np.zeros_like(g))
                v *= values[k].dtype.type(self.momentum)
                v -= values[k].dtype.type(self.lr) * g
                values[k] += v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def l2_coefficients(names, l2_map, kernels_only=True):
    """Resolve ``pattern -> lambda`` onto parameter names.

    Only conv/transposed-conv kernels are penalized when ``kernels_only``.
    A name matched by patterns with different coefficients is an error.
    """
    coeffs = {}
    for name in names:
        if kernels_only and not name.endswith(".kernel"):
            continue
        hits = {float(lam) for pat, lam in l2_map.items() if fnmatch.fnmatchcase(name, pat)}
        if len(hits) > 1:
            raise ConfigError(f"{name} is matched by L2 patterns with different coefficients {sorted(hits)}")
        lam = hits.pop() if hits else 0.0
        if lam > 0:
            coeffs[name] = lam
    return coeffs


def apply_l2(params, l2_map, kernels_only=True):
    """Penalty sum(lambda * sum(theta**2)) as a differentiable scalar (or None)."""
    coeffs = l2_coefficients(params, l2_map, kernels_only)
    penalty = None
    for name, lam in coeffs.items():
        term = ops.scale(ops.square_sum(params[name]), lam)
        penalty = term if penalty is None else penalty + term
    return penalty


# -- logging -----------------------------------------------------------------

LOG_COLUMNS = ("epoch", "loss", "val_loss", "acc", "val_acc", "seconds")


@dataclass
class EpochRow:
    epoch: int
    loss: float
    val_loss: float
    acc: float = math.nan
    val_acc: float = math.nan
    seconds: float = math.nan


@dataclass
class TrainingLog:
    monitor: str
    rows: list = field(default_factory=list)
    best_epoch: int = None

    def append(self, row):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ContractError("log epochs must increase strictly")
        self.rows.append(row)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def best_row(self):
        for r in self.rows:
            if r.epoch == self.best_epoch:
                return r
        return None

    def monitored_value(self, row):
        return row.val_loss if self.monitor == "min val_loss" else row.val_acc


def is_improvement(monitor, value, best):
    if best is None:
        return not math.isnan(value)
    return value < best if monitor == "min val_loss" else value > best


# -- loops -----------------------------------------------------------------

def _prepare(model, config):
    dtype = np.dtype(config.dtype)
    if not model.params:
        model.materialize(dtype)
    elif model.dtype != dtype:
        model.astype(dtype)
    return dtype


def _penalty_value(model, config):
    pen = apply_l2(model.params, config.l2_map)
    return 0.0 if pen is None else float(pen.item())


def reconstruction_losses(model, images, noisy, config):
    """Mean reconstruction loss of ``model(noisy)`` vs clean ``images`` in infer mode."""
    fn = ops.binary_cross_entropy if config.loss == "bce" else ops.mse
    total, mse_total, n = 0.0, 0.0, len(images)
    for s in range(0, n, config.eval_batch_size):
        x = Tensor(noisy[s : s + config.eval_batch_size], dtype=model.dtype)
        out = model.forward(x, training=False)
        clean = images[s : s + config.eval_batch_size]
        w = len(clean) / n
        total += w * float(fn(out, clean).item())
        mse_total += w * float(ops.mse(out, clean).item())
    return total, mse_total


def validation_noise(dataset, config):
    return corrupt_batch(dataset.images(), range(len(dataset)), config.seed, (_VAL_NOISE,),
                         config.p_corrupt, config.p_white, config.corrupt_mode)


def evaluate_autoencoder(model, dataset, config):
    """``(val_loss, recon_mse, corrupted_mse)`` on the fixed validation noise."""
    clean = dataset.images().astype(model.dtype)
    noisy = validation_noise(dataset, config).astype(model.dtype)
    loss, recon = reconstruction_losses(model, clean, noisy, config)
    corrupted = float(np.mean((noisy.astype(np.float64) - clean) ** 2))
    return loss + _penalty_value(model, config), recon, corrupted


def train_autoencoder(model, train, val, config, on_epoch=None):
    """Denoising training L(x, g(f(corrupt(x)))); returns (log, best checkpoint).

    Fresh noise is drawn every epoch from (seed, epoch, sample index).
    Validation uses one fixed corruption per sample so val_loss is comparable
    across epochs.
    """
    if len(train) == 0:
        raise DataError("autoencoder training set is empty")
    _prepare(model, config)
    fn = ops.binary_cross_entropy if config.loss == "bce" else ops.mse
    opt = SGD(model.params, config.lr, config.momentum, config.nesterov)
    logbook = TrainingLog(config.monitor)
    clean_val = val.images().astype(model.dtype) if len(val) else None
    noisy_val = validation_noise(val, config).astype(model.dtype) if len(val) else None
    best, best_ckpt, stale = None, None, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        run_loss = 0.0
        for idx in batch_indices(len(train), config.batch_size, config.seed, epoch):
            clean = train.images(idx).astype(model.dtype)
            noisy = corrupt_batch(clean, idx, config.seed, (_TRAIN_NOISE, epoch),
                                  config.p_corrupt, config.p_white, config.corrupt_mode)
            opt.zero_grad()
            out = model.forward(Tensor(noisy, dtype=model.dtype), training=True)
            loss = fn(out, clean)
            pen = apply_l2(model.params, config.l2_map)
            if pen is not None:
                loss = loss + pen
            loss.backward()
            opt.step()
            run_loss += float(loss.item()) * len(idx)
        train_loss = run_loss / len(train)
        if clean_val is not None:
            v, _ = reconstruction_losses(model, clean_val, noisy_val, config)
            val_loss = v + _penalty_value(model, config)
        else:
            val_loss = train_loss
        row = EpochRow(epoch, train_loss, val_loss, seconds=time.perf_counter() - t0)
        logbook.append(row)
        if is_improvement(config.monitor, logbook.monitored_value(row), best):
            best, stale = logbook.monitored_value(row), 0
            logbook.best_epoch = epoch
            best_ckpt = _snapshot(model, config, epoch, best)
        else:
            stale += 1
        if on_epoch:
            on_epoch(row, logbook)
        log.info("epoch %d loss %.5f val_loss %.5f", epoch, train_loss, val_loss)
        if stale >= config.patience:
            break
    return logbook, best_ckpt


def _snapshot(model, config, epoch, value):
    return Checkpoint.from_model(model, {"epoch": epoch, "monitor": config.monitor, "value": value,
                                         "seed": config.seed, "config_hash": config.digest()})


def check_labels(dataset, num_classes):
    labels = dataset.labels()
    bad = (labels >= num_classes) & (labels != VOID)
    if bad.any():
        raise DataError(f"labels {sorted(set(labels[bad].tolist()))} are >= {num_classes} and not void")


def predict(model, images, batch_size=25):
    preds = []
    for s in range(0, len(images), batch_size):
        out = model.forward(Tensor(images[s : s + batch_size], dtype=model.dtype), training=False)
        preds.append(out.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(preds) if preds else np.zeros((0,), np.uint8)


def evaluate_segmenter(model, dataset, batch_size=25, num_classes=None):
    """Infer-mode ``(mean CE loss over non-void pixels, ConfusionMatrix)``."""
    k = num_classes or model.channel_plan()[model.output]
    cm = ConfusionMatrix(k)
    loss_sum, pix = 0.0, 0
    images = dataset.images()
    labels = dataset.labels()
    for s in range(0, len(dataset), batch_size):
        x = Tensor(images[s : s + batch_size], dtype=model.dtype)
        y = labels[s : s + batch_size]
        out = model.forward(x, training=False)
        n_valid = int((y != VOID).sum())
        if n_valid:
            loss_sum += float(ops.softmax_cross_entropy(out, y).item()) * n_valid
            pix += n_valid
        cm.accumulate(out.data.argmax(axis=1), y)
    return (loss_sum / pix if pix else 0.0), cm


def train_segmenter(model, train, val, config, on_epoch=None):
    """All-at-once training of a segmentation graph; returns (log, best checkpoint)."""
    if len(train) == 0:
        raise DataError("segmentation training set is empty")
    _prepare(model, config)
    k = model.channel_plan()[model.output]
    h, w = train[0].label.shape
    model.infer_shapes(h, w)
    check_labels(train, k)
    if len(val):
        check_labels(val, k)
    opt = SGD(model.params, config.lr, config.momentum, config.nesterov)
    logbook = TrainingLog(config.monitor)
    best, best_ckpt, stale = None, None, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        run_loss, cm = 0.0, ConfusionMatrix(k)
        for idx in batch_indices(len(train), config.batch_size, config.seed, epoch):
            x = Tensor(train.images(idx), dtype=model.dtype)
            y = train.labels(idx)
            opt.zero_grad()
            out = model.forward(x, training=True)
            loss = ops.softmax_cross_entropy(out, y)
            pen = apply_l2(model.params, config.l2_map)
            if pen is not None:
                loss = loss + pen
            loss.backward()
            opt.step()
            run_loss += float(loss.item()) * len(idx)
            cm.accumulate(out.data.argmax(axis=1), y)
        train_loss = run_loss / len(train)
        acc = cm.pixel_accuracy() if cm.total else math.nan
        if len(val):
            vl, vcm = evaluate_segmenter(model, val, config.eval_batch_size, k)
            val_loss = vl + _penalty_value(model, config)
            val_acc = vcm.pixel_accuracy() if vcm.total else math.nan
        else:
            val_loss, val_acc = train_loss, acc
        row = EpochRow(epoch, train_loss, val_loss, acc, val_acc, seconds=time.perf_counter() - t0)
        logbook.append(row)
        if is_improvement(config.monitor, logbook.monitored_value(row), best):
            best, stale = logbook.monitored_value(row), 0
            logbook.best_epoch = epoch
            best_ckpt = _snapshot(model, config, epoch, best)
        else:
            stale += 1
        if on_epoch:
            on_epoch(row, logbook)
        log.info("epoch %d loss %.5f val_loss %.5f acc %.4f val_acc %.4f", epoch, train_loss, val_loss, acc, val_acc)
        if stale >= config.patience:
            break
    return logbook, best_ckpt


def compare_reconstruction_losses(build_model, train, val, config, init=None):
    """Train the same autoencoder once per loss choice; returns ``{loss: (log, ckpt)}``."""
    out = {}
    for loss in ("mse", "bce"):
        model = build_model()
        if init:
            init(model)
        cfg = TrainConfig(**{**config.to_dict(), "loss": loss})
        out[loss] = train_autoencoder(model, train, val, cfg)
    return out
