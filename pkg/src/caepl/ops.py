"""Differentiable operations on :class:`~caepl.tensor.Tensor`.

Each op computes its forward value with numpy (convolution and pooling go
through :mod:`caepl.kernels`) and registers a closure returning the gradient
with respect to each parent.
"""
import logging

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


def _conv_out(h, k, stride, pad, what):
    span = h + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"{what}: extent {h} with kernel {k}, stride {stride}, pad {pad} "
                         "does not give an integral output size")
    return span // stride + 1


# -- elementwise / structural ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, c):
    c = float(c)
    return Tensor._make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(a):
    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor._make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def square_sum(a):
    """sum(a**2); used by the L2 penalty."""
    return Tensor._make(np.asarray(np.dot(a.values, a.values), dtype=a.dtype), (a,),
                        lambda g: (g * 2 * a.data,))


def relu(x):
    mask = x.data > 0
    return Tensor._make(np.maximum(x.data, 0, dtype=x.dtype), (x,), lambda g: (g * mask,))


def modified_tanh(x):
    """0.5 * tanh(x) + 0.5, an output activation with range (0, 1)."""
    t = np.tanh(x.data)
    half = x.dtype.type(0.5)
    return Tensor._make(half * t + half, (x,), lambda g: (g * half * (1 - t * t),))


def softmax(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


# -- convolution -----------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """2-D cross-correlation, NCHW input, kernel (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    ho = _conv_out(h, kh, stride, pad, "conv2d")
    wo = _conv_out(w, kw, stride, pad, "conv2d")

    # cols: (Cin*kh*kw, N*Ho*Wo), so forward and both gradients are single GEMMs
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = kernels.col2im(wmat.T @ g2, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, backward)


def transposed_conv2d(x, kernel, bias=None, stride=2, crop=None):
    """Transposed convolution, kernel (Cin, Cout, k, k).

    Output extent is ``stride*(H-1) + k - 2*crop``. With the default crop
    ``(k - stride) // 2`` and ``k = 2*stride`` this is exactly ``stride*H``.
    The operation is the adjoint of ``conv2d(., kernel, stride, pad=crop)``.
    """
    if stride < 1:
        raise ParameterError(f"transposed_conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-D tensors, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"transposed_conv2d: input has {cin} channels, kernel expects {kcin}")
    if crop is None:
        if (kh - stride) % 2:
            raise ParameterError(f"transposed_conv2d: cannot crop kernel {kh} symmetrically for stride {stride}")
        crop = (kh - stride) // 2
    ho = stride * (h - 1) + kh - 2 * crop
    wo = stride * (w - 1) + kw - 2 * crop
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transposed_conv2d: crop {crop} leaves no output")
    out_shape = (n, cout, ho, wo)

    wmat = kernel.data.reshape(cin, -1)
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, n * h * w)
    out = kernels.col2im(wmat.T @ x2, out_shape, kh, kw, stride, crop)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gcols = kernels.im2col(g, kh, kw, stride, crop)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3))
        gk = (x2 @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, backward)


def max_pool2d(x, window=2, stride=2):
    if window != 2 or stride != 2:
        raise ParameterError("max_pool2d supports only a 2x2 window with stride 2")
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2d: extents {x.shape[2:]} are not divisible by 2")
    out, idx = kernels.maxpool2x2_forward(x.data)
    return Tensor._make(out, (x,), lambda g: (kernels.maxpool2x2_backward(g, idx, x.shape),))


# -- normalization ---------------------------------------------------------

def batch_norm(x, gamma, beta, moving_mean, moving_var, training, eps=1e-5, momentum=0.99):
    """Per-channel batch normalization over (N, H, W).

    ``moving_mean``/``moving_var`` are numpy arrays updated in place in
    training mode as ``m = momentum*m + (1-momentum)*batch_stat``.
    """
    if x.shape[0] == 0:
        raise ParameterError("batch_norm: empty batch")
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    g_ = gamma.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        m = moving_mean.dtype.type(momentum)
        moving_mean *= m
        moving_mean += (1 - m) * mu.reshape(c).astype(moving_mean.dtype)
        moving_var *= m
        moving_var += (1 - m) * var.reshape(c).astype(moving_var.dtype)
        cnt = x.size // c

        def backward(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                gx = (g_ * inv / cnt) * (cnt * g - gb.reshape(bshape) - xhat * gg.reshape(bshape))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(moving_var.astype(x.dtype).reshape(bshape) + x.dtype.type(eps))
        xhat = (x.data - moving_mean.astype(x.dtype).reshape(bshape)) * inv

        def backward(g):
            gx = g * g_ * inv if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + beta.data.reshape(bshape)
    return Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -- losses ----------------------------------------------------------------

def _target_array(target, dtype):
    return np.asarray(target.data if isinstance(target, Tensor) else target, dtype=dtype)


def mse(pred, target):
    t = _target_array(target, pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t
    n = diff.size
    loss = np.asarray(np.dot(diff.reshape(-1), diff.reshape(-1)) / n, dtype=pred.dtype)
    return Tensor._make(loss, (pred,), lambda g: (g * (2.0 / n) * diff,))


def binary_cross_entropy(pred, target):
    """Mean of -[t log p + (1-t) log(1-p)] with p clamped to [1e-7, 1-1e-7]."""
    t = _target_array(target, pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"binary_cross_entropy: shapes {pred.shape} and {t.shape} differ")
    lo, hi = BCE_EPS, 1.0 - BCE_EPS
    p = np.clip(pred.data, lo, hi)
    n = p.size
    terms = t * np.log(p) + (1 - t) * np.log1p(-p)
    loss = np.asarray(-terms.sum() / n, dtype=pred.dtype)
    inside = (pred.data >= lo) & (pred.data <= hi)

    def backward(g):
        return (g * inside * (p - t) / (p * (1 - p)) / n,)

    return Tensor._make(loss, (pred,), backward)


def softmax_cross_entropy(logits, labels, void_label=255):
    """Mean cross-entropy over non-void pixels; logits (N, K, ...), labels (N, ...)."""
    labels = np.asarray(labels)
    if logits.shape[:1] + logits.shape[2:] != labels.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    valid = labels != void_label
    count = int(valid.sum())
    if count == 0:
        log.warning("softmax_cross_entropy: every label is void; loss is 0")
        return Tensor._make(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    if labels[valid].max() >= k or labels[valid].min() < 0:
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {k - 1}] and not void")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = np.asarray(-(picked * valid).sum() / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return (g * (p - onehot) * valid[:, None] / count,)

    return Tensor._make(loss, (logits,), backward)
