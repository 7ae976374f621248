"""Four-encoder volumetric segmentation network.

One encoder per MRI modality (FLAIR, T1, T1CE, T2). Each encoder stage
runs 1..3 conv+bn+relu layers with a residual short-circuit, then a
stride-2 conv that halves the resolution and doubles the channels. At
every stage the four encoders' pre-downsample maps are concatenated and
reduced by a 1x1x1 conv into a fused skip map; the deepest downsample
outputs fuse the same way into the bottleneck. The decoder mirrors the
encoder: stride-2 transposed conv (doubles resolution, halves
channels), concat with the fused skip of the matching resolution, then
2..3 conv+bn+relu layers with a projected residual. A 1x1x1 head maps
to the 4 class channels.

Parameter names follow
``encoder{m}.stage{s}.conv{j}.{weight|bias|gamma|beta}`` with
``.down`` / ``.proj`` siblings, ``fuse.stage{s}.*``, ``fuse.bottleneck.*``,
``decoder.stage{t}.{up,conv{j},proj}.*`` and ``head.*``; batch-norm
running statistics live next to their layer as ``.running_mean`` /
``.running_var``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import losses
from .autodiff import EagerRuntime, Recorder
from .errors import InvalidConfig, ShapeMismatch
from .tensor_core import BatchNormState, ConvSpec

MODALITY_KEYS = ("FLAIR", "T1", "T1CE", "T2")


def _default_encoder_convs(num_stages: int) -> tuple[int, ...]:
    return tuple(min(s, 3) for s in range(1, num_stages + 1))


def _default_decoder_convs(num_stages: int) -> tuple[int, ...]:
    return tuple(max(2, min(num_stages - t + 1, 3)) for t in range(1, num_stages + 1))


@dataclass(frozen=True)
class MENetConfig:
    num_stages: int = 4
    base_channels: int = 16
    num_modalities: int = 4
    num_classes: int = 4
    convs_per_encoder_stage: tuple[int, ...] = ()
    convs_per_decoder_stage: tuple[int, ...] = ()
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.num_stages < 1:
            raise InvalidConfig("num_stages must be >= 1")
        if self.base_channels < 1:
            raise InvalidConfig("base_channels must be >= 1")
        if self.num_modalities != 4:
            raise InvalidConfig("the network is built for exactly 4 modalities")
        if self.num_classes != 4:
            raise InvalidConfig("the network is built for exactly 4 classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")
        if not self.convs_per_encoder_stage:
            object.__setattr__(self, "convs_per_encoder_stage",
                               _default_encoder_convs(self.num_stages))
        if not self.convs_per_decoder_stage:
            object.__setattr__(self, "convs_per_decoder_stage",
                               _default_decoder_convs(self.num_stages))
        if len(self.convs_per_encoder_stage) != self.num_stages:
            raise InvalidConfig("convs_per_encoder_stage length must equal num_stages")
        if len(self.convs_per_decoder_stage) != self.num_stages:
            raise InvalidConfig("convs_per_decoder_stage length must equal num_stages")
        if any(not 1 <= c <= 3 for c in self.convs_per_encoder_stage):
            raise InvalidConfig("encoder stages take 1 to 3 convs")
        if any(not 2 <= c <= 3 for c in self.convs_per_decoder_stage):
            raise InvalidConfig("decoder stages take 2 to 3 convs")

    # channel plan: widths double on every downsample
    def encoder_width(self, s: int) -> int:
        return self.base_channels * 2 ** (s - 1)

    def encoder_stage_in(self, s: int) -> int:
        return 1 if s == 1 else 2 * self.encoder_width(s - 1)

    def fused_width(self, s: int) -> int:
        return 2 * self.encoder_width(s)

    @property
    def bottleneck_width(self) -> int:
        return 2 * self.encoder_width(self.num_stages)

    def decoder_width(self, t: int) -> int:
        return self.fused_width(self.num_stages - t + 1)

    def decoder_stage_in(self, t: int) -> int:
        prev = self.bottleneck_width if t == 1 else self.decoder_width(t - 1)
        return prev // 2 + self.fused_width(self.num_stages - t + 1)

    def validate_patch_extents(self, extents):
        div = 2 ** self.num_stages
        if any(e % div != 0 or e < div for e in extents):
            raise InvalidConfig(
                f"patch extents {tuple(extents)} must be divisible by {div}"
            )


def _conv_spec(k: int, s: int, p: int, cin: int, cout: int) -> ConvSpec:
    return ConvSpec((k, k, k), (s, s, s), (p, p, p), cin, cout)


def _iter_layers(config: MENetConfig):
    """Yield (name, spec, kind) for every weighted layer in build order.

    kind is one of conv_bn / deconv_bn (weight+bias+bn), linear
    (weight+bias), proj (weight only).
    """
    for m in range(1, config.num_modalities + 1):
        for s in range(1, config.num_stages + 1):
            cin = config.encoder_stage_in(s)
            width = config.encoder_width(s)
            for j in range(1, config.convs_per_encoder_stage[s - 1] + 1):
                yield (f"encoder{m}.stage{s}.conv{j}",
                       _conv_spec(3, 1, 1, cin if j == 1 else width, width),
                       "conv_bn")
            if cin != width:
                yield (f"encoder{m}.stage{s}.proj",
                       _conv_spec(1, 1, 0, cin, width), "proj")
            yield (f"encoder{m}.stage{s}.down",
                   _conv_spec(3, 2, 1, width, 2 * width), "conv_bn")
    for s in range(1, config.num_stages + 1):
        yield (f"fuse.stage{s}",
               _conv_spec(1, 1, 0, 4 * config.encoder_width(s), config.fused_width(s)),
               "linear")
    yield ("fuse.bottleneck",
           _conv_spec(1, 1, 0, 4 * config.bottleneck_width, config.bottleneck_width),
           "linear")
    for t in range(1, config.num_stages + 1):
        prev = config.bottleneck_width if t == 1 else config.decoder_width(t - 1)
        width = config.decoder_width(t)
        cat = config.decoder_stage_in(t)
        yield (f"decoder.stage{t}.up",
               ConvSpec((2, 2, 2), (2, 2, 2), (0, 0, 0), prev // 2, prev),
               "deconv_bn")
        for j in range(1, config.convs_per_decoder_stage[t - 1] + 1):
            yield (f"decoder.stage{t}.conv{j}",
                   _conv_spec(3, 1, 1, cat if j == 1 else width, width),
                   "conv_bn")
        yield (f"decoder.stage{t}.proj", _conv_spec(1, 1, 0, cat, width), "proj")
    yield ("head", _conv_spec(1, 1, 0, config.decoder_width(config.num_stages),
                              config.num_classes), "linear")


@dataclass
class ModelParams:
    """Complete learnable state of one network, addressable by name."""

    config: MENetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def learnable_names(self) -> list[str]:
        return [n for n in self.tensors
                if not n.endswith((".running_mean", ".running_var"))]

    def num_parameters(self) -> int:
        return sum(self.tensors[n].size for n in self.learnable_names())

    def apply_bn_updates(self, updates: dict[str, BatchNormState]):
        for prefix, state in updates.items():
            self.tensors[prefix + ".running_mean"] = state.mean
            self.tensors[prefix + ".running_var"] = state.var

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def build_menet(config: MENetConfig, rng) -> ModelParams:
    """Initialize all parameters (He-scaled conv weights, identity batch norm)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    tensors: dict[str, np.ndarray] = {}
    for name, spec, kind in _iter_layers(config):
        fan_in = spec.kernel[0] * spec.kernel[1] * spec.kernel[2] * (
            spec.out_channels if kind == "deconv_bn" else spec.in_channels)
        std = np.sqrt(2.0 / fan_in)
        tensors[name + ".weight"] = rng.normal(0.0, std, spec.weight_shape)
        if kind == "proj":
            continue
        bias_ch = spec.in_channels if kind == "deconv_bn" else spec.out_channels
        tensors[name + ".bias"] = np.zeros(bias_ch)
        if kind in ("conv_bn", "deconv_bn"):
            tensors[name + ".gamma"] = np.ones(bias_ch)
            tensors[name + ".beta"] = np.zeros(bias_ch)
            tensors[name + ".running_mean"] = np.zeros(bias_ch)
            tensors[name + ".running_var"] = np.ones(bias_ch)
    return ModelParams(config, tensors)


class EncoderFeatures(NamedTuple):
    """Per-stage products of the encoding pass (handles or arrays)."""

    per_encoder: list  # stage -> [4 post-block maps]
    fused: list        # stage -> fused skip map
    bottleneck: object


def _specs_by_name(config: MENetConfig) -> dict[str, tuple[ConvSpec, str]]:
    return {name: (spec, kind) for name, spec, kind in _iter_layers(config)}


def _bn(rt, x, prefix: str):
    state = BatchNormState(rt.raw(prefix + ".running_mean"),
                           rt.raw(prefix + ".running_var"))
    y, new_state = rt.batch_norm(x, rt.param(prefix + ".gamma"),
                                 rt.param(prefix + ".beta"), state)
    rt.bn_updates[prefix] = new_state
    return y


def _conv_bn_relu(rt, x, prefix: str, spec: ConvSpec):
    y = rt.conv3d(x, rt.param(prefix + ".weight"), rt.param(prefix + ".bias"), spec)
    return rt.relu(_bn(rt, y, prefix))


def _residual_block(rt, x, prefix: str, nconvs: int, specs):
    h = x
    for j in range(1, nconvs + 1):
        name = f"{prefix}.conv{j}"
        h = _conv_bn_relu(rt, h, name, specs[name][0])
    proj_name = f"{prefix}.proj"
    if proj_name in specs:
        shortcut = rt.conv3d(x, rt.param(proj_name + ".weight"), None,
                             specs[proj_name][0])
    else:
        shortcut = x
    return rt.add(h, shortcut)


def _encode(rt, config: MENetConfig, specs) -> EncoderFeatures:
    xs = [rt.input(k) for k in MODALITY_KEYS]
    extents = rt.shape(xs[0])[1:4]
    config.validate_patch_extents(extents)
    for k, x in zip(MODALITY_KEYS, xs):
        if rt.shape(x)[1:4] != tuple(extents) or rt.shape(x)[4] != 1:
            raise ShapeMismatch(f"modality {k} has shape {rt.shape(x)}")
    per_encoder, fused = [], []
    for s in range(1, config.num_stages + 1):
        blocks = [
            _residual_block(rt, x, f"encoder{m}.stage{s}",
                            config.convs_per_encoder_stage[s - 1], specs)
            for m, x in enumerate(xs, 1)
        ]
        fuse_name = f"fuse.stage{s}"
        fused.append(rt.conv3d(rt.concat_channels(blocks),
                               rt.param(fuse_name + ".weight"),
                               rt.param(fuse_name + ".bias"),
                               specs[fuse_name][0]))
        per_encoder.append(blocks)
        xs = [
            _conv_bn_relu(rt, h, f"encoder{m}.stage{s}.down",
                          specs[f"encoder{m}.stage{s}.down"][0])
            for m, h in enumerate(blocks, 1)
        ]
    bottleneck = rt.conv3d(rt.concat_channels(xs),
                           rt.param("fuse.bottleneck.weight"),
                           rt.param("fuse.bottleneck.bias"),
                           specs["fuse.bottleneck"][0])
    return EncoderFeatures(per_encoder, fused, bottleneck)


def _decode(rt, config: MENetConfig, features: EncoderFeatures, specs):
    h = rt.dropout(features.bottleneck, config.dropout_rate)
    for t in range(1, config.num_stages + 1):
        up_name = f"decoder.stage{t}.up"
        up_spec = specs[up_name][0]
        h = rt.conv_transpose3d(h, rt.param(up_name + ".weight"),
                                rt.param(up_name + ".bias"), up_spec)
        h = rt.relu(_bn(rt, h, up_name))
        skip = features.fused[config.num_stages - t]
        h = _residual_block(rt, rt.concat_channels([h, skip]),
                            f"decoder.stage{t}",
                            config.convs_per_decoder_stage[t - 1], specs)
    return rt.conv3d(h, rt.param("head.weight"), rt.param("head.bias"),
                     specs["head"][0])


def forward_program(config: MENetConfig):
    """Program computing pre-softmax logits; run it under a runtime."""
    specs = _specs_by_name(config)

    def program(rt):
        return _decode(rt, config, _encode(rt, config, specs), specs)

    return program


def loss_program(config: MENetConfig, target: np.ndarray,
                 weights=losses.DEFAULT_CLASS_WEIGHTS):
    """Program computing the categorical Dice loss against a one-hot target."""
    specs = _specs_by_name(config)

    def program(rt):
        logits = _decode(rt, config, _encode(rt, config, specs), specs)
        probs = rt.softmax_channels(logits)
        return rt.categorical_dice_loss(probs, rt.constant(target), weights)

    return program


def modality_inputs(patch: np.ndarray) -> dict[str, np.ndarray]:
    """Split a (b, d, h, w, 4) patch into the four single-channel inputs."""
    if patch.ndim != 5 or patch.shape[4] != len(MODALITY_KEYS):
        raise ShapeMismatch(f"expected (b,d,h,w,4) patch, got {patch.shape}")
    return {k: patch[..., i:i + 1] for i, k in enumerate(MODALITY_KEYS)}


def _as_input_dict(inputs) -> dict[str, np.ndarray]:
    if isinstance(inputs, dict):
        return inputs
    seq = list(inputs)
    if len(seq) != len(MODALITY_KEYS):
        raise ShapeMismatch(f"expected {len(MODALITY_KEYS)} modality inputs")
    return dict(zip(MODALITY_KEYS, seq))


def encoder_forward(params: ModelParams, inputs, mode: str = "infer",
                    rng=None) -> EncoderFeatures:
    """Eagerly run the four encoders; returns per-stage maps, fused skips, bottleneck."""
    rt = EagerRuntime(_as_input_dict(inputs), params, mode=mode, rng=rng)
    return _encode(rt, params.config, _specs_by_name(params.config))


def decoder_forward(params: ModelParams, features: EncoderFeatures,
                    mode: str = "infer", rng=None) -> np.ndarray:
    """Eagerly run the decoder on encoder features; returns logits."""
    rt = EagerRuntime({}, params, mode=mode, rng=rng)
    return _decode(rt, params.config, features, _specs_by_name(params.config))


def predict_patch(params: ModelParams, patch: np.ndarray) -> np.ndarray:
    """Inference on one preprocessed patch: per-voxel class probabilities."""
    rt = EagerRuntime(modality_inputs(patch), params, mode="infer")
    specs = _specs_by_name(params.config)
    logits = _decode(rt, params.config, _encode(rt, params.config, specs), specs)
    return rt.softmax_channels(logits)


def record_loss_forward(params: ModelParams, patch: np.ndarray,
                        target: np.ndarray, mode: str, rng,
                        weights=losses.DEFAULT_CLASS_WEIGHTS):
    """Record the full forward + loss; returns (loss value, tape, bn updates)."""
    rec = Recorder(modality_inputs(patch), params, mode=mode, rng=rng)
    out = loss_program(params.config, target, weights)(rec)
    rec.tape.output = out
    return rec.value(out), rec.tape, rec.bn_updates
