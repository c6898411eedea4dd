"""Desk-scale two-branch segmentation network hosting the fusion blocks.

Per stage each branch runs a 3x3 bias-free convolution and a rectifier, is
2x2 mean-pooled, then the branches meet in the ablation-selectable fusion
block. After the last stage the RGB stream is bilinearly upsampled back to
the input resolution and classified by a pointwise head. Rectifiers stay out
of the attention modules. Channel widths double every stage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import attention
from .attention import VARIANTS, FusionParams, kaiming_normal
from .autodiff import TraceGraph
from .convops import ConvSpec
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

ENCODER_SPEC = ConvSpec(kernel=3, dilation=1, grouping="dense")


@dataclass(frozen=True)
class ToyNetConfig:
    stages: int = 3
    base_channels: int = 16
    classes: int = 5
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.base_channels % attention.SQUEEZE_RATIO != 0:
            raise ConfigError(
                f"base_channels must be divisible by {attention.SQUEEZE_RATIO}, "
                f"got {self.base_channels}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    def stage_channels(self) -> list[int]:
        return [self.base_channels * (2 ** i) for i in range(self.stages)]

    def to_dict(self) -> dict:
        return {"stages": self.stages, "base_channels": self.base_channels,
                "classes": self.classes, "variant": self.variant, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "ToyNetConfig":
        return ToyNetConfig(**d)


@dataclass
class ToyNetParams:
    """All learnable tensors, keyed by dotted name, plus the architecture."""

    config: ToyNetConfig
    tensors: dict[str, Tensor]

    def fusion_params(self, stage: int) -> FusionParams:
        p = f"stage{stage}.fusion."
        return FusionParams(
            w1=self.tensors[p + "w1"], w2=self.tensors[p + "w2"],
            w1p=self.tensors[p + "w1p"], w2p=self.tensors[p + "w2p"],
            dca=attention.DCAParams(dw=self.tensors[p + "dca_dw"],
                                    pw=self.tensors[p + "dca_pw"]),
            edca=attention.EDCAParams(dw=self.tensors[p + "edca_dw"],
                                      dwd=self.tensors[p + "edca_dwd"],
                                      pw=self.tensors[p + "edca_pw"]))

    def with_tensors(self, tensors: dict[str, Tensor]) -> "ToyNetParams":
        return ToyNetParams(config=self.config, tensors=dict(tensors))

    def with_variant(self, variant: str) -> "ToyNetParams":
        return ToyNetParams(config=replace(self.config, variant=variant),
                            tensors=self.tensors)


def parameter_names(config: ToyNetConfig) -> list[str]:
    names = []
    for i in range(config.stages):
        names += [f"stage{i}.rgb_conv", f"stage{i}.depth_conv"]
        names += [f"stage{i}.fusion.{n}" for n in attention.FUSION_TENSOR_NAMES]
    names.append("head")
    return names


def model_init(config: ToyNetConfig, dtype: str = "f32") -> ToyNetParams:
    """Deterministic Kaiming init of every stage and the classifier head."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    relu_gain = float(np.sqrt(2.0))
    rgb_in, depth_in = 3, 1
    for i, c in enumerate(config.stage_channels()):
        tensors[f"stage{i}.rgb_conv"] = kaiming_normal(rng, (c, rgb_in, 3, 3), dtype,
                                                       gain=relu_gain)
        tensors[f"stage{i}.depth_conv"] = kaiming_normal(rng, (c, depth_in, 3, 3), dtype,
                                                         gain=relu_gain)
        fp = attention.init_fusion_params(c, rng, dtype)
        for name, t in attention.fusion_tensors(fp).items():
            tensors[f"stage{i}.fusion.{name}"] = t
        rgb_in = depth_in = c
    tensors["head"] = kaiming_normal(rng, (config.classes, rgb_in, 1, 1), dtype)
    return ToyNetParams(config=config, tensors=tensors)


def model_nodes(g: TraceGraph, rgb: int, depth: int, ids: dict[str, int],
                config: ToyNetConfig, variant: str,
                stop_grad_diff: bool = False):
    """Traced forward. Returns (logits_id, [(rgb_attn, depth_attn)] per stage)."""
    h, w = g.value(rgb).shape[2:]
    attn_maps = []
    for i in range(config.stages):
        rgb = g.mean_pool2(g.relu(g.conv2d(rgb, ids[f"stage{i}.rgb_conv"], ENCODER_SPEC)))
        depth = g.mean_pool2(g.relu(g.conv2d(depth, ids[f"stage{i}.depth_conv"], ENCODER_SPEC)))
        fusion_ids = {name: ids[f"stage{i}.fusion.{name}"]
                      for name in attention.FUSION_TENSOR_NAMES}
        rgb, depth, ra, da = attention.variant_nodes(g, rgb, depth, variant,
                                                     fusion_ids, stop_grad_diff)
        attn_maps.append((ra, da))
    up = g.upsample_bilinear(rgb, (h, w))
    logits = g.pointwise(up, ids["head"])
    return logits, attn_maps


def _check_model_inputs(rgb: Tensor, depth: Tensor, config: ToyNetConfig):
    n, c, h, w = rgb.shape
    if c != 3:
        raise ShapeError(f"rgb must have 3 channels, got {c}")
    if depth.shape != (n, 1, h, w):
        raise ShapeError(f"depth must be ({n},1,{h},{w}), got {depth.shape}")
    div = 2 ** config.stages
    if h % div or w % div:
        raise ShapeError(f"spatial extents {(h, w)} must be divisible by {div}")


def _build_forward(rgb: Tensor, depth: Tensor, params: ToyNetParams, variant: str):
    _check_model_inputs(rgb, depth, params.config)
    g = TraceGraph()
    ids = {name: g.leaf(t) for name, t in params.tensors.items()}
    logits, attn = model_nodes(g, g.leaf(rgb), g.leaf(depth), ids,
                               params.config, variant)
    return g, logits, attn


def model_forward(rgb: Tensor, depth: Tensor, params: ToyNetParams,
                  variant: str | None = None) -> Tensor:
    """Logits of shape (n, classes, H, W); variant defaults to the config's."""
    variant = params.config.variant if variant is None else variant
    g, logits, _ = _build_forward(rgb, depth, params, variant)
    return g.value(logits)


def model_forward_with_attention(rgb: Tensor, depth: Tensor, params: ToyNetParams,
                                 variant: str | None = None):
    """Like model_forward but also returns per-stage (rgb, depth) attention maps.

    Branches whose attention path the variant omits yield None entries.
    """
    variant = params.config.variant if variant is None else variant
    g, logits, attn = _build_forward(rgb, depth, params, variant)
    maps = [(None if ra is None else g.value(ra),
             None if da is None else g.value(da)) for ra, da in attn]
    return g.value(logits), maps


# --- checkpoint format -------------------------------------------------------
#
# "DCAP", u32 version=1, u32 header length, JSON header with the net config
# and a manifest of (name, shape, offset into the data section), then the
# concatenated tensor records.

_CKPT_MAGIC = b"DCAP"
_CKPT_HEAD = struct.Struct("<4sII")


def save_checkpoint(path, params: ToyNetParams) -> None:
    records = []
    manifest = []
    offset = 0
    for name, t in params.tensors.items():
        blob = tensor_to_bytes(t)
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        records.append(blob)
        offset += len(blob)
    header = json.dumps({"config": params.config.to_dict(),
                         "tensors": manifest}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(_CKPT_MAGIC, 1, len(header)))
        fh.write(header)
        for blob in records:
            fh.write(blob)


def load_checkpoint(path) -> ToyNetParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint (header)")
    magic, version, hlen = _CKPT_HEAD.unpack_from(buf, 0)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(buf) < _CKPT_HEAD.size + hlen:
        raise FormatError("truncated checkpoint (manifest)")
    head = json.loads(buf[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen].decode("utf-8"))
    config = ToyNetConfig.from_dict(head["config"])
    data_start = _CKPT_HEAD.size + hlen
    tensors: dict[str, Tensor] = {}
    for rec in head["tensors"]:
        t, _ = tensor_from_bytes(buf, data_start + rec["offset"])
        if list(t.shape) != rec["shape"]:
            raise FormatError(f"{rec['name']}: shape {t.shape} != manifest {rec['shape']}")
        tensors[rec["name"]] = t
    if set(tensors) != set(parameter_names(config)):
        raise FormatError("checkpoint tensor names do not match the architecture")
    return ToyNetParams(config=config, tensors=tensors)
