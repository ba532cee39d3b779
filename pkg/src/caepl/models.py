"""Builders for the autoencoder / FCN-8s model family and weight utilities."""
from __future__ import annotations

import math
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError, TransferError
from .layers import INPUT, ModelGraph, bn, conv, simple, tconv

log = logging.getLogger(__name__)

VGG16_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
VGG16_FC = 4096
VGG16_LAYER_NAMES = ("conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3",
                     "conv4_1", "conv4_2", "conv4_3", "conv5_1", "conv5_2", "conv5_3")

ENCODER = "encoder"
DECODER = "decoder"
FCN = "fcn"

# Reported full-scale parameter counts: (trainable, non-trainable, total).
REPORTED_COUNTS = {
    "fcn": (134_473_244, 160, 134_473_404),
    "ae4l-fcn": (134_567_020, 704, 134_567_724),
    "ae4l": (163_059, 800, 163_859),
}


# -- specs -----------------------------------------------------------------

@dataclass
class AESpec:
    """Symmetric stride-1 convolutional autoencoder without pooling.

    The decoder mirrors ``encoder_filters`` in reverse and ends in a
    3-channel conv followed by the modified tanh.
    """

    encoder_filters: list
    input_channels: int = 3
    final_bn: bool = False
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    @property
    def code_channels(self):
        return self.encoder_filters[-1]

    @property
    def decoder_filters(self):
        return list(reversed(self.encoder_filters[:-1])) + [self.input_channels]

    def to_dict(self):
        return {"encoder_filters": list(self.encoder_filters), "input_channels": self.input_channels,
                "final_bn": self.final_bn}


@dataclass
class FCNSpec:
    num_classes: int = 20
    plan: tuple = VGG16_PLAN
    fc_channels: int = VGG16_FC
    fc_kernel: int = 7
    bn_mode: str = "score_streams_only"
    input_channels: int = 3
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    @classmethod
    def toy(cls, num_classes=5, divisor=8, **kw):
        plan = tuple(c if c == "M" else max(1, c // divisor) for c in VGG16_PLAN)
        kw.setdefault("bn_mode", "all_convs")
        return cls(num_classes=num_classes, plan=plan, fc_channels=max(1, VGG16_FC // divisor), **kw)

    def to_dict(self):
        return {"num_classes": self.num_classes, "plan": list(self.plan), "fc_channels": self.fc_channels,
                "fc_kernel": self.fc_kernel, "bn_mode": self.bn_mode, "input_channels": self.input_channels}


# -- builders --------------------------------------------------------------

def encoder_layers(filters, prefix=ENCODER, first_input=INPUT, momentum=0.99, eps=1e-5):
    layers = []
    prev = first_input
    for i, f in enumerate(filters, 1):
        layers += [conv(f"{prefix}.conv{i}", f, inputs=(prev,)),
                   bn(f"{prefix}.bn{i}", eps=eps, momentum=momentum),
                   simple(f"{prefix}.relu{i}", "relu")]
        prev = f"{prefix}.relu{i}"
    return layers


def build_autoencoder(spec):
    if not spec.encoder_filters:
        raise SpecError("autoencoder needs at least one encoder layer")
    if any(int(f) < 1 for f in spec.encoder_filters):
        raise SpecError(f"filter counts must be positive: {spec.encoder_filters}")
    layers = encoder_layers(spec.encoder_filters, momentum=spec.bn_momentum, eps=spec.bn_eps)
    dec = spec.decoder_filters
    for i, f in enumerate(dec, 1):
        last = i == len(dec)
        layers.append(conv(f"{DECODER}.conv{i}", f))
        if not last or spec.final_bn:
            layers.append(bn(f"{DECODER}.bn{i}", eps=spec.bn_eps, momentum=spec.bn_momentum))
        layers.append(simple(f"{DECODER}.mtanh" if last else f"{DECODER}.relu{i}", "mtanh" if last else "relu"))
    return ModelGraph(layers, input_channels=spec.input_channels, name="autoencoder")


def encoder_output(model):
    """Name of the last encoder layer (the code)."""
    names = [s.name for s in model.layers if s.name.startswith(ENCODER + ".")]
    if not names:
        raise SpecError(f"{model.name} has no encoder layers")
    return names[-1]


def encoder_submodel(model):
    """The encoder part of ``model`` as its own graph sharing parameter storage."""
    out = encoder_output(model)
    sub = model.copy_structure(layers=[s for s in model.layers if s.name.startswith(ENCODER + ".")],
                               output=out, name="encoder")
    sub.dtype = model.dtype
    sub.params = {k: v for k, v in model.params.items() if k.startswith(ENCODER + ".")}
    sub.buffers = {k: v for k, v in model.buffers.items() if k.startswith(ENCODER + ".")}
    return sub


def fcn8s_layers(spec, first_input=INPUT, prefix=FCN):
    if spec.bn_mode not in ("all_convs", "score_streams_only", "none"):
        raise SpecError(f"unknown bn_mode {spec.bn_mode!r}")
    all_bn = spec.bn_mode == "all_convs"
    score_bn = spec.bn_mode != "none"
    mom, eps = spec.bn_momentum, spec.bn_eps
    p = prefix + "."
    layers = []
    prev = first_input
    block, idx = 1, 1
    pools = {}

    def block_conv(name, filters, kernel=3, pad=None, relu=True):
        nonlocal prev
        layers.append(conv(p + name, filters, kernel=kernel, pad=pad, inputs=(prev,)))
        prev = p + name
        if all_bn:
            layers.append(bn(p + name + "_bn", eps=eps, momentum=mom))
            prev = p + name + "_bn"
        if relu:
            layers.append(simple(p + name + "_relu", "relu"))
            prev = p + name + "_relu"

    for item in spec.plan:
        if item == "M":
            layers.append(simple(f"{p}pool{block}", "maxpool", inputs=(prev,)))
            prev = pools[block] = f"{p}pool{block}"
            block, idx = block + 1, 1
        else:
            block_conv(f"conv{block}_{idx}", int(item))
            idx += 1
    if sorted(pools) != [1, 2, 3, 4, 5]:
        raise SpecError("FCN-8s needs a backbone plan with exactly five pooling stages")

    block_conv("fc6", spec.fc_channels, kernel=spec.fc_kernel)
    block_conv("fc7", spec.fc_channels, kernel=1)
    k = spec.num_classes

    def score(name, src):
        layers.append(conv(p + name, k, kernel=1, inputs=(src,)))
        if score_bn:
            layers.append(bn(p + name + "_bn", eps=eps, momentum=mom))
            return p + name + "_bn"
        return p + name

    top = score("score_fr", prev)
    layers.append(tconv(p + "upscore2", k, stride=2, inputs=(top,)))
    s4 = score("score_pool4", pools[4])
    layers.append(simple(p + "fuse_pool4", "add", inputs=(p + "upscore2", s4)))
    layers.append(tconv(p + "upscore_pool4", k, stride=2, inputs=(p + "fuse_pool4",)))
    s3 = score("score_pool3", pools[3])
    layers.append(simple(p + "fuse_pool3", "add", inputs=(p + "upscore_pool4", s3)))
    layers.append(tconv(p + "upscore8", k, stride=8, inputs=(p + "fuse_pool3",)))
    if score_bn:
        layers.append(bn(p + "upscore8_bn", eps=eps, momentum=mom))
    return layers


def build_fcn8s(spec, input_hw=None):
    """FCN-8s graph producing N x K x H x W logits (no softmax layer)."""
    model = ModelGraph(fcn8s_layers(spec), input_channels=spec.input_channels, name="fcn8s")
    if input_hw is not None:
        check_fcn_input(input_hw)
        model.infer_shapes(*input_hw)
    return model


def check_fcn_input(input_hw):
    from .errors import ShapeError

    h, w = input_hw
    if h % 32 or w % 32:
        raise ShapeError(f"FCN-8s input extents must be divisible by 32, got {h}x{w}")


def build_encoder_block(filters, input_channels=3, momentum=0.99, eps=1e-5):
    """Plain conv+BN+ReLU stack with no autoencoder counterpart (EB4-style)."""
    return ModelGraph(encoder_layers(filters, momentum=momentum, eps=eps), input_channels=input_channels,
                      name="encoder_block")


def compose_caepl(ae_spec, fcn_spec, encoder_filters=None):
    """Encoder layers of ``ae_spec`` followed by FCN-8s in a single graph.

    ``ae_spec`` may also be ``None`` with explicit ``encoder_filters`` for a
    non-autoencoder pre-processing block. The FCN's first conv takes the code
    channels as input.
    """
    filters = list(encoder_filters if encoder_filters is not None else ae_spec.encoder_filters)
    if not filters:
        raise SpecError("pre-processing block needs at least one layer")
    in_ch = ae_spec.input_channels if ae_spec is not None else 3
    if fcn_spec.input_channels not in (filters[-1], 3):
        raise SpecError(f"code has {filters[-1]} channels but FCN expects {fcn_spec.input_channels}")
    if fcn_spec.input_channels != filters[-1]:
        fcn_spec = FCNSpec(**{**fcn_spec.__dict__, "input_channels": filters[-1]})
    momentum = ae_spec.bn_momentum if ae_spec is not None else fcn_spec.bn_momentum
    layers = encoder_layers(filters, momentum=momentum)
    layers += fcn8s_layers(fcn_spec, first_input=layers[-1].name)
    return ModelGraph(layers, input_channels=in_ch, name="caepl")


def strip_encoder(caepl):
    """Remove encoder layers and rewire the FCN to read the raw input."""
    enc = {s.name for s in caepl.layers if s.name.startswith(ENCODER + ".")}
    layers = []
    for s in caepl.layers:
        if s.name in enc:
            continue
        d = s.to_dict()
        d["inputs"] = [INPUT if i in enc else i for i in d["inputs"]]
        layers.append(d)
    from .layers import LayerSpec

    return ModelGraph([LayerSpec.from_dict(d) for d in layers], input_channels=caepl.input_channels,
                      name="fcn8s", output=caepl.output)


def sever_skip_streams(model, prefix=FCN):
    """Drop the pool3/pool4 score streams, leaving a single x32 upsampling path."""
    from .layers import LayerSpec

    p = prefix + "."
    drop = {p + "score_pool4", p + "score_pool4_bn", p + "score_pool3", p + "score_pool3_bn"}
    bypass = {p + "fuse_pool4": p + "upscore2", p + "fuse_pool3": p + "upscore_pool4"}
    layers = []
    for s in model.layers:
        if s.name in drop or s.name in bypass:
            continue
        d = s.to_dict()
        d["inputs"] = [bypass.get(i, i) for i in d["inputs"]]
        layers.append(LayerSpec.from_dict(d))
    return model.copy_structure(layers=layers, name=model.name + "-32s")


# -- weight transfer --------------------------------------------------------

@dataclass
class TransferReport:
    matched: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    ignored: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.matched)


def _arrays_of(source):
    """Accept a Checkpoint, a ModelGraph, or a plain name -> array mapping."""
    if hasattr(source, "arrays"):
        return source.arrays
    if isinstance(source, ModelGraph):
        return source.state_dict()
    return dict(source)


def _assign(model, name, value):
    target = model.params[name].data if name in model.params else model.buffers[name]
    if target.shape != tuple(np.shape(value)):
        layer = name.rsplit(".", 1)[0]
        raise TransferError(f"layer {layer!r}: parameter {name} has shape {target.shape}, "
                            f"source has {tuple(np.shape(value))}")
    target[...] = value


def transfer_encoder_weights(caepl, ae_checkpoint, strict=True):
    """Copy every ``encoder.*`` parameter and BN statistic from the checkpoint."""
    arrays = _arrays_of(ae_checkpoint)
    names = [k for k in list(caepl.params) + list(caepl.buffers) if k.startswith(ENCODER + ".")]
    report = TransferReport()
    for name in names:
        if name in arrays:
            report.matched.append(name)
        else:
            report.missing.append(name)
    if report.missing and strict:
        raise TransferError(f"checkpoint lacks encoder entries: {', '.join(report.missing)}")
    for name in report.matched:
        _assign(caepl, name, arrays[name])
    report.ignored = sorted(k for k in arrays if not k.startswith(ENCODER + "."))
    return report


def import_weights_by_name(model, checkpoint, name_map, strict=True):
    """Copy parameters by layer name: ``name_map`` maps source layer -> model layer."""
    arrays = _arrays_of(checkpoint)
    report = TransferReport()
    if not name_map:
        return report
    own = list(model.params) + list(model.buffers)
    for src_layer, dst_layer in name_map.items():
        dst_names = [k for k in own if k.rsplit(".", 1)[0] == dst_layer]
        if not dst_names:
            raise TransferError(f"model has no layer {dst_layer!r}")
        for dst in dst_names:
            src = src_layer + "." + dst.rsplit(".", 1)[1]
            if src in arrays:
                _assign(model, dst, arrays[src])
                report.matched.append(dst)
            elif strict:
                raise TransferError(f"checkpoint has no entry {src!r} for layer {dst_layer!r}")
            else:
                report.missing.append(dst)
    mapped = set(name_map)
    report.ignored = sorted(k for k in arrays if k.rsplit(".", 1)[0] not in mapped)
    return report


def vgg16_name_map(prefix=FCN, skip_first=False, source_prefix="vgg16"):
    """Source VGG16 layer names -> FCN layer names (conv1_1 .. conv5_3, fc6, fc7).

    ``skip_first`` leaves conv1_1 out of the map so it keeps its own
    initialization, as needed when the FCN sits behind a pre-processing block.
    """
    names = list(VGG16_LAYER_NAMES) + ["fc6", "fc7"]
    if skip_first:
        names = names[1:]
    return {f"{source_prefix}.{n}": f"{prefix}.{n}" for n in names}


# -- parameter audit -------------------------------------------------------

@dataclass
class ParamReport:
    trainable: int
    non_trainable: int
    per_layer: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.trainable + self.non_trainable

    def as_tuple(self):
        return (self.trainable, self.non_trainable, self.total)


def count_parameters(model):
    """Count from declared parameter shapes; does not require allocation."""
    trainable = non = 0
    per_layer = {}
    for name, (shape, is_trainable) in model.param_shapes().items():
        n = int(np.prod(shape))
        layer = name.rsplit(".", 1)[0]
        row = per_layer.setdefault(layer, [0, 0])
        if is_trainable:
            trainable += n
            row[0] += n
        else:
            non += n
            row[1] += n
    return ParamReport(trainable, non, {k: tuple(v) for k, v in per_layer.items()})


def ae_param_counts(filters, final_bn=False, input_channels=3):
    """Closed-form (trainable, non_trainable) for an autoencoder spec."""
    enc = list(filters)
    dec = list(reversed(enc[:-1])) + [input_channels]
    conv_p, prev = 0, input_channels
    for f in enc + dec:
        conv_p += (9 * prev + 1) * f
        prev = f
    bn_ch = sum(enc) + sum(dec[:-1]) + (dec[-1] if final_bn else 0)
    return conv_p + 2 * bn_ch, 2 * bn_ch


@dataclass
class SearchResult:
    matches: list
    closest: list
    constraints: dict
    evaluated: int


def _match_rank(spec):
    f = spec.encoder_filters
    narrowing = all(a >= b for a, b in zip(f, f[1:]))
    return (not narrowing, -math.gcd(*f), f)


def search_ae_config(targets, layers=(3, 4), step=4, max_filters=256, final_bn_modes=(False, True),
                     input_channels=3, top=5):
    """Exhaustively enumerate autoencoder specs with exactly the target counts.

    ``targets`` is a ParamReport or a (trainable, non_trainable[, total])
    tuple. Filters range over multiples of ``step`` up to ``max_filters``.
    Returns a :class:`SearchResult`; ``matches`` may be empty, in which case
    ``closest`` lists the nearest specs by total relative error. Several exact
    matches can exist; they are ranked with encoders that narrow toward the
    code first, then by the coarsest common width grid (largest gcd).
    """
    if isinstance(targets, ParamReport):
        t_train, t_non = targets.trainable, targets.non_trainable
    else:
        t_train, t_non = targets[0], targets[1]
    constraints = {"layers": list(layers), "step": step, "max_filters": max_filters,
                   "final_bn_modes": list(final_bn_modes), "kernel": 3, "symmetric_decoder": True,
                   "bn_after_each_conv": True}
    values = np.arange(step, max_filters + 1, step, dtype=np.int64)
    matches, closest, evaluated = [], [], 0
    if t_train < 0 or t_non < 0:
        return SearchResult([], [], constraints, 0)
    c = input_channels
    for n_layers in layers:
        for final_bn in final_bn_modes:
            # enumerate all but the last encoder width as a grid, loop over the code width
            grids = np.meshgrid(*([values] * (n_layers - 1)), indexing="ij")
            f = [g.reshape(-1) for g in grids]
            for code in values:
                enc = f + [np.full_like(f[0], code)]
                dec = list(reversed(enc[:-1])) + [np.full_like(f[0], c)]
                seq = enc + dec
                conv_p = np.zeros_like(f[0])
                prev = np.full_like(f[0], c)
                for cur in seq:
                    conv_p += (9 * prev + 1) * cur
                    prev = cur
                bn_ch = sum(enc) + sum(dec[:-1]) + (c if final_bn else 0)
                train = conv_p + 2 * bn_ch
                non = 2 * bn_ch
                evaluated += train.size
                hit = np.nonzero((train == t_train) & (non == t_non))[0]
                for i in hit:
                    matches.append(AESpec([int(x[i]) for x in enc], input_channels=c, final_bn=final_bn))
                err = (np.abs(train - t_train) + np.abs(non - t_non)) / max(1, t_train + t_non)
                for i in np.argsort(err, kind="stable")[:top]:
                    closest.append((float(err[i]), AESpec([int(x[i]) for x in enc], input_channels=c,
                                                          final_bn=final_bn), int(train[i]), int(non[i])))
    closest.sort(key=lambda r: (r[0], len(r[1].encoder_filters), r[1].encoder_filters))
    matches.sort(key=_match_rank)
    return SearchResult(matches, closest[:top], constraints, evaluated)


# -- named variants ---------------------------------------------------------

TOY_AE = {
    "ae4l": [12, 8, 8, 6],
    "ae4m": [12, 8, 8, 3],
    "ae4n": [6, 4, 4, 3],
    "ae3": [12, 8, 6],
    "eb4": [8, 8, 8, 8],
}

# Full-scale widths. ae4l is an exact match of the reported autoencoder
# parameter counts found by search_ae_config; the others are derived from it.
FULL_AE = {
    "ae4l": [96, 64, 32, 16],
    "ae4m": [96, 64, 32, 3],
    "ae4n": [48, 32, 16, 8],
    "ae3": [96, 64, 32],
    "eb4": [64, 64, 64, 64],
}

VARIANTS = ("fcn", "ae4l-fcn", "ae4m-fcn", "ae4n-fcn", "ae3-fcn", "eb4-fcn", "ae4l", "ae4m", "ae4n", "ae3")


def ae_spec_for(variant, scale="toy", filters=None):
    key = variant.replace("-fcn", "")
    table = TOY_AE if scale == "toy" else FULL_AE
    if filters is None:
        if key not in table:
            raise SpecError(f"no autoencoder for variant {variant!r}")
        filters = table[key]
    return AESpec(list(filters))


def build_variant(variant, scale="toy", num_classes=None, filters=None, bn_mode=None, divisor=8):
    """Build any named model: an FCN, a CAEPL variant, or a bare autoencoder."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise SpecError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if scale == "toy":
        fcn_spec = FCNSpec.toy(num_classes=num_classes or 5, divisor=divisor)
    elif scale == "full":
        fcn_spec = FCNSpec(num_classes=num_classes or 20)
    else:
        raise SpecError(f"unknown scale {scale!r}")
    if bn_mode:
        fcn_spec.bn_mode = bn_mode
    if variant == "fcn":
        return build_fcn8s(fcn_spec)
    ae = ae_spec_for(variant, scale, filters)
    if not variant.endswith("-fcn"):
        return build_autoencoder(ae)
    if variant == "eb4-fcn":
        return compose_caepl(None, fcn_spec, encoder_filters=ae.encoder_filters)
    return compose_caepl(ae, fcn_spec)
