"""Slow, obviously-correct reference implementations used as test oracles."""
import contextlib

import numpy as np

from caepl import kernels, ops
from caepl.tensor import Tensor


def conv2d_loop(x, k, b, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b_ in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b_, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b_, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def tconv2d_scatter(x, k, b, stride, crop):
    """Each input pixel scatters ``value * kernel`` into the full output, then crop."""
    n, cin, h, w = x.shape
    _, cout, kh, kw = k.shape
    full = np.zeros((n, cout, stride * (h - 1) + kh, stride * (w - 1) + kw))
    for b_ in range(n):
        for c in range(cin):
            for i in range(h):
                for j in range(w):
                    for o in range(cout):
                        full[b_, o, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[b_, c, i, j] * k[c, o]
    out = full[:, :, crop : full.shape[2] - crop, crop : full.shape[3] - crop]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def maxpool_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for b in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[b, ch, i, j] = max(x[b, ch, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
    return out


def confusion_loop(pred, gt, k, void=255):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g != void:
            cm[g, p] += 1
    return cm


def iou_sets(pred, gt, k, void=255):
    """Per-class IoU from pixel-coordinate sets; None where the union is empty."""
    coords = [i for i, g in enumerate(np.ravel(gt)) if g != void]
    p, g = np.ravel(pred), np.ravel(gt)
    out = []
    for c in range(k):
        a = {i for i in coords if p[i] == c}
        b = {i for i in coords if g[i] == c}
        union = a | b
        out.append(len(a & b) / len(union) if union else None)
    return out


class FrozenBranches:
    """Record ReLU masks and max-pool winners once, then replay them.

    Inside :meth:`replaying`, ``caepl.ops.relu`` and ``caepl.ops.max_pool2d``
    reuse the branch choices made during :meth:`recording`, in call order.
    The network then is a smooth function of its parameters near the
    recorded point, with the same derivative there as the real network.
    """

    def __init__(self):
        self.log, self.pos, self.mode = [], 0, None
        self._orig = (ops.relu, ops.max_pool2d)

    def _relu(self, x):
        if self.mode == "record":
            self.log.append(x.data > 0)
            return self._orig[0](x)
        mask = self.log[self.pos]
        self.pos += 1
        return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))

    def _pool(self, x, window=2, stride=2):
        if self.mode == "record":
            self.log.append(kernels.maxpool2x2_forward(x.data)[1])
            return self._orig[1](x, window, stride)
        idx = self.log[self.pos]
        self.pos += 1
        n, c, h, w = x.shape
        win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
        return Tensor._make(np.ascontiguousarray(out), (x,), lambda g: (kernels.maxpool2x2_backward(g, idx, x.shape),))

    @contextlib.contextmanager
    def _mode(self, mode):
        self.mode, self.pos = mode, 0
        ops.relu, ops.max_pool2d = self._relu, self._pool
        try:
            yield self
        finally:
            ops.relu, ops.max_pool2d = self._orig
            self.mode = None

    def recording(self):
        self.log = []
        return self._mode("record")

    def replaying(self):
        return self._mode("replay")


def numeric_grad_check(loss_fn, tensors, rng, h=1e-5, rtol=1e-4, atol=1e-8, max_coords=None, freeze=False):
    """Compare analytic gradients with central differences.

    ``loss_fn()`` rebuilds the scalar loss from ``tensors`` (float64 leaves).
    Checks every coordinate, or ``max_coords`` random ones per tensor. With
    ``freeze`` the +-h probes replay the base point's ReLU/max-pool branches
    (see :class:`FrozenBranches`), so a probe straddling a kink still
    measures the derivative of the branch that backprop differentiates.
    Returns the worst ``|a - n| / (rtol * max(|a|, |n|) + atol)`` ratio;
    a value <= 1 means every coordinate passed.
    """
    branches = FrozenBranches() if freeze else None
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with branches.recording() if freeze else contextlib.nullcontext():
        loss = loss_fn()
    loss.backward()

    def probe():
        with branches.replaying() if freeze else contextlib.nullcontext():
            return float(loss_fn().data)

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = probe()
            flat[i] = old - h
            fm = probe()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / (rtol * max(abs(a), abs(num)) + atol))
    return worst


def t64(a, requires_grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)
