"""Named layer records and the ordered layer graph that executes them."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ParameterError, ShapeError, SpecError
from .tensor import RngStream, Tensor

KINDS = ("conv", "bn", "relu", "mtanh", "maxpool", "tconv", "softmax", "add")
INPUT = "input"


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], tuple(d.get("inputs", ())), dict(d.get("params", {})))


def conv(name, filters, kernel=3, stride=1, pad=None, bias=True, inputs=()):
    pad = kernel // 2 if pad is None else pad
    return LayerSpec(name, "conv", tuple(inputs),
                     {"filters": filters, "kernel": kernel, "stride": stride, "pad": pad, "bias": bias})


def tconv(name, filters, stride, kernel=None, bias=False, init="bilinear", inputs=()):
    kernel = 2 * stride if kernel is None else kernel
    return LayerSpec(name, "tconv", tuple(inputs),
                     {"filters": filters, "kernel": kernel, "stride": stride, "bias": bias, "init": init})


def bn(name, eps=1e-5, momentum=0.99, inputs=()):
    return LayerSpec(name, "bn", tuple(inputs), {"eps": eps, "momentum": momentum})


def simple(name, kind, inputs=()):
    return LayerSpec(name, kind, tuple(inputs), {})


class ModelGraph:
    """Ordered DAG of named layers with named parameter tensors.

    Parameters are stored flat as ``"<layer>.<param>"``: conv/tconv carry
    ``kernel`` and optionally ``bias``; batch norm carries trainable
    ``gamma``/``beta`` and the non-trainable buffers ``moving_mean`` and
    ``moving_variance``.
    """

    def __init__(self, layers, input_channels=3, name="model", output=None):
        self.name = name
        self.input_channels = int(input_channels)
        self.layers = []
        self._index = {}
        for spec in layers:
            self._append(spec)
        self.output = output or (self.layers[-1].name if self.layers else INPUT)
        self.params = {}
        self.buffers = {}
        self.dtype = None
        self._validate()

    # -- structure -------------------------------------------------------
    def _append(self, spec):
        if spec.kind not in KINDS:
            raise SpecError(f"unknown layer kind {spec.kind!r} for {spec.name!r}")
        if spec.name in self._index or spec.name == INPUT:
            raise SpecError(f"duplicate layer name {spec.name!r}")
        if not spec.inputs:
            spec.inputs = (self.layers[-1].name if self.layers else INPUT,)
        self._index[spec.name] = spec
        self.layers.append(spec)

    def _validate(self):
        known = {INPUT}
        for spec in self.layers:
            for src in spec.inputs:
                if src not in known:
                    raise SpecError(f"layer {spec.name!r} reads {src!r} before it is defined")
            if spec.kind == "add" and len(spec.inputs) != 2:
                raise SpecError(f"add layer {spec.name!r} needs exactly two inputs")
            if spec.kind != "add" and len(spec.inputs) != 1:
                raise SpecError(f"layer {spec.name!r} takes a single input")
            known.add(spec.name)
        if self.output not in known:
            raise SpecError(f"output {self.output!r} is not a layer")
        self.channel_plan()

    def layer(self, name):
        return self._index[name]

    def __contains__(self, name):
        return name in self._index

    def layer_names(self):
        return [spec.name for spec in self.layers]

    def ancestors(self, name):
        out, stack = set(), [name]
        while stack:
            cur = stack.pop()
            if cur == INPUT or cur in out:
                continue
            out.add(cur)
            stack.extend(self._index[cur].inputs)
        return out

    def channel_plan(self):
        """Output channel count of every layer (and of the input)."""
        ch = {INPUT: self.input_channels}
        for spec in self.layers:
            srcs = [ch[s] for s in spec.inputs]
            if spec.kind in ("conv", "tconv"):
                ch[spec.name] = spec.params["filters"]
            elif spec.kind == "add":
                if srcs[0] != srcs[1]:
                    raise SpecError(f"add layer {spec.name!r} joins {srcs[0]} and {srcs[1]} channels")
                ch[spec.name] = srcs[0]
            else:
                ch[spec.name] = srcs[0]
        return ch

    def infer_shapes(self, height, width):
        """Predicted (C, H, W) of every layer output for an H x W input."""
        ch = self.channel_plan()
        hw = {INPUT: (height, width)}
        for spec in self.layers:
            h, w = hw[spec.inputs[0]]
            p = spec.params
            if spec.kind == "conv":
                spans = [x + 2 * p["pad"] - p["kernel"] for x in (h, w)]
                if any(s < 0 or s % p["stride"] for s in spans):
                    raise ShapeError(f"{spec.name}: input {h}x{w} gives a non-integral output")
                hw[spec.name] = tuple(s // p["stride"] + 1 for s in spans)
            elif spec.kind == "tconv":
                crop = (p["kernel"] - p["stride"]) // 2
                hw[spec.name] = tuple(p["stride"] * (x - 1) + p["kernel"] - 2 * crop for x in (h, w))
            elif spec.kind == "maxpool":
                if h % 2 or w % 2:
                    raise ShapeError(f"{spec.name}: input {h}x{w} not divisible by 2")
                hw[spec.name] = (h // 2, w // 2)
            elif spec.kind == "add":
                other = hw[spec.inputs[1]]
                if other != (h, w):
                    raise ShapeError(f"{spec.name}: joins {h}x{w} and {other[0]}x{other[1]}")
                hw[spec.name] = (h, w)
            else:
                hw[spec.name] = (h, w)
        return {k: (ch[k],) + hw[k] for k in hw}

    def param_shapes(self):
        """Ordered ``name -> (shape, trainable)`` for every parameter and buffer."""
        ch = self.channel_plan()
        out = {}
        for spec in self.layers:
            p = spec.params
            cin = ch[spec.inputs[0]]
            if spec.kind == "conv":
                k = p["kernel"]
                out[f"{spec.name}.kernel"] = ((p["filters"], cin, k, k), True)
                if p.get("bias", True):
                    out[f"{spec.name}.bias"] = ((p["filters"],), True)
            elif spec.kind == "tconv":
                k = p["kernel"]
                out[f"{spec.name}.kernel"] = ((cin, p["filters"], k, k), True)
                if p.get("bias", False):
                    out[f"{spec.name}.bias"] = ((p["filters"],), True)
            elif spec.kind == "bn":
                for pname, trainable in (("gamma", True), ("beta", True),
                                         ("moving_mean", False), ("moving_variance", False)):
                    out[f"{spec.name}.{pname}"] = ((cin,), trainable)
        return out

    # -- parameters ------------------------------------------------------
    def materialize(self, dtype=np.float32):
        """Allocate parameter storage (zeros; BN variance and gamma ones)."""
        self.dtype = np.dtype(dtype)
        self.params, self.buffers = {}, {}
        for pname, (shape, trainable) in self.param_shapes().items():
            fill = 1.0 if pname.endswith((".gamma", ".moving_variance")) else 0.0
            arr = np.full(shape, fill, dtype=self.dtype)
            if trainable:
                self.params[pname] = Tensor(arr, requires_grad=True, name=pname)
            else:
                self.buffers[pname] = arr
        return self

    def astype(self, dtype):
        dtype = np.dtype(dtype)
        self.dtype = dtype
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for k in list(self.buffers):
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self):
        state = {k: t.data.copy() for k, t in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state, strict=True):
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        if strict and missing:
            raise SpecError(f"state is missing {sorted(missing)}")
        for k, v in state.items():
            if k in self.params:
                target = self.params[k].data
            elif k in self.buffers:
                target = self.buffers[k]
            elif strict:
                raise SpecError(f"unexpected state entry {k!r}")
            else:
                continue
            if target.shape != tuple(v.shape):
                raise ShapeError(f"{k}: stored shape {tuple(v.shape)} != model shape {target.shape}")
            target[...] = v

    # -- execution -------------------------------------------------------
    def forward(self, x, training=False, keep=None):
        """Run the graph; returns the output tensor, or ``(output, values)``
        with every intermediate when ``keep`` is true."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.input_channels:
            raise ShapeError(f"{self.name}: expected input (N, {self.input_channels}, H, W), got {x.shape}")
        needed = self.ancestors(self.output)
        vals = {INPUT: x}
        for spec in self.layers:
            if spec.name not in needed:
                continue
            vals[spec.name] = self._run(spec, [vals[s] for s in spec.inputs], training)
        out = vals[self.output]
        return (out, vals) if keep else out

    __call__ = forward

    def _run(self, spec, args, training):
        p, n = spec.params, spec.name
        x = args[0]
        if spec.kind == "conv":
            return ops.conv2d(x, self.params[f"{n}.kernel"], self.params.get(f"{n}.bias"),
                              stride=p["stride"], pad=p["pad"])
        if spec.kind == "tconv":
            return ops.transposed_conv2d(x, self.params[f"{n}.kernel"], self.params.get(f"{n}.bias"),
                                         stride=p["stride"])
        if spec.kind == "bn":
            return ops.batch_norm(x, self.params[f"{n}.gamma"], self.params[f"{n}.beta"],
                                  self.buffers[f"{n}.moving_mean"], self.buffers[f"{n}.moving_variance"],
                                  training=training, eps=p.get("eps", 1e-5), momentum=p.get("momentum", 0.99))
        if spec.kind == "relu":
            return ops.relu(x)
        if spec.kind == "mtanh":
            return ops.modified_tanh(x)
        if spec.kind == "maxpool":
            return ops.max_pool2d(x)
        if spec.kind == "softmax":
            return ops.softmax(x, axis=1)
        if spec.kind == "add":
            return ops.add(args[0], args[1])
        raise SpecError(f"cannot execute layer kind {spec.kind!r}")

    # -- serialization ---------------------------------------------------
    def to_spec(self):
        return {"name": self.name, "input_channels": self.input_channels, "output": self.output,
                "layers": [spec.to_dict() for spec in self.layers]}

    @classmethod
    def from_spec(cls, d):
        layers = [LayerSpec.from_dict(x) for x in d["layers"]]
        return cls(layers, input_channels=d["input_channels"], name=d.get("name", "model"), output=d.get("output"))

    def copy_structure(self, layers=None, output=None, input_channels=None, name=None):
        layers = self.layers if layers is None else layers
        return ModelGraph([LayerSpec.from_dict(s.to_dict()) for s in layers],
                          input_channels=self.input_channels if input_channels is None else input_channels,
                          name=name or self.name, output=output or self.output)


# -- initialization --------------------------------------------------------

def _param_stream(seed, pname):
    return RngStream(seed).spawn(zlib.crc32(pname.encode()))


def he_normal(shape, fan_in, rng, dtype=np.float32):
    return rng.normal(shape, std=np.sqrt(2.0 / fan_in)).astype(dtype)


def bilinear_kernel(cin, cout, kernel, stride):
    """Separable bilinear tent filter on the channel diagonal."""
    if kernel != 2 * stride:
        raise ParameterError(f"bilinear init needs kernel == 2*stride, got kernel {kernel}, stride {stride}")
    factor = (kernel + 1) // 2
    center = factor - 1 if kernel % 2 == 1 else factor - 0.5
    og = np.arange(kernel)
    tent = 1 - np.abs(og - center) / factor
    w = np.zeros((cin, cout, kernel, kernel))
    plane = np.outer(tent, tent)
    for i in range(min(cin, cout)):
        w[i, i] = plane
    return w


def bilinear_init(kernel_tensor, stride):
    cin, cout, k, _ = kernel_tensor.shape
    kernel_tensor.data[...] = bilinear_kernel(cin, cout, k, stride)


def he_normal_init(model, seed, only=None):
    """Initialize every parameter of ``model``; returns ``name -> scheme``.

    Conv kernels (and transposed-conv kernels not marked bilinear) get
    He-normal draws with std sqrt(2/fan_in), fan_in = Cin*k*k. Each draw uses
    a stream derived from (seed, parameter name), so a layer's initial
    weights do not depend on what else is in the graph. ``only`` restricts
    initialization to the named layers.
    """
    if not model.params:
        model.materialize()
    ch = model.channel_plan()
    policy = {}
    for spec in model.layers:
        if only is not None and spec.name not in only:
            continue
        n, p = spec.name, spec.params
        if spec.kind in ("conv", "tconv"):
            kt = model.params[f"{n}.kernel"]
            if spec.kind == "tconv" and p.get("init", "bilinear") == "bilinear":
                bilinear_init(kt, p["stride"])
                policy[f"{n}.kernel"] = "bilinear"
            else:
                fan_in = ch[spec.inputs[0]] * p["kernel"] * p["kernel"]
                kt.data[...] = he_normal(kt.shape, fan_in, _param_stream(seed, f"{n}.kernel"), kt.dtype)
                policy[f"{n}.kernel"] = "he_normal"
            if f"{n}.bias" in model.params:
                model.params[f"{n}.bias"].data[...] = 0
                policy[f"{n}.bias"] = "zeros"
        elif spec.kind == "bn":
            model.params[f"{n}.gamma"].data[...] = 1
            model.params[f"{n}.beta"].data[...] = 0
            model.buffers[f"{n}.moving_mean"][...] = 0
            model.buffers[f"{n}.moving_variance"][...] = 1
            for pname in ("gamma", "beta", "moving_mean", "moving_variance"):
                policy[f"{n}.{pname}"] = "ones" if pname in ("gamma", "moving_variance") else "zeros"
    return policy
