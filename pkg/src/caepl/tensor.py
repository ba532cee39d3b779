"""Dense tensor with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a closure mapping the output gradient to
parent gradients; :meth:`Tensor.backward` walks that graph in reverse
topological order.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, order="C", copy=None)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Row-major flat view of the value buffer."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph construction ----------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        """Create an op output, recording the graph only if a parent needs it."""
        out = cls(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it.

        Gradients accumulate across calls; reset explicitly with ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- light arithmetic for composing losses ---------------------------
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import scale

        if isinstance(other, Tensor):
            from .ops import mul

            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale

        return scale(self, -1.0)

    def __sub__(self, other):
        return self + (-other)

    def sum(self):
        from .ops import tsum

        return tsum(self)

    def mean(self):
        from .ops import tsum, scale

        return scale(tsum(self), 1.0 / self.size)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


class RngStream:
    """Seeded random stream with a draw counter.

    ``spawn(*keys)`` derives an independent child stream whose draws depend
    only on ``(seed, keys)``, which is how per-epoch and per-sample noise is
    made reproducible without threading state through loops.
    """

    algorithm = "PCG64"

    def __init__(self, seed=0, _keys=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in _keys)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.draws = 0

    def spawn(self, *keys):
        return RngStream(self.seed, self.keys + tuple(keys))

    def normal(self, shape, std=1.0, dtype=np.float64):
        shape = tuple(shape)
        out = self._gen.standard_normal(shape) * std
        self.draws += int(np.prod(shape))
        return out.astype(dtype, copy=False)

    def uniform(self, shape=None, low=0.0, high=1.0):
        out = self._gen.uniform(low, high, size=shape)
        self.draws += 1 if shape is None else int(np.prod(shape))
        return out

    def random(self, shape=None):
        return self.uniform(shape)

    def integers(self, low, high=None, shape=None):
        out = self._gen.integers(low, high, size=shape)
        self.draws += 1 if shape is None else int(np.prod(shape))
        return out

    def permutation(self, n):
        self.draws += n
        return self._gen.permutation(n)

    def state(self):
        return {"seed": self.seed, "keys": list(self.keys), "algorithm": self.algorithm, "draws": self.draws}
