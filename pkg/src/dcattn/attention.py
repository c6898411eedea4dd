"""DCA, EDCA and the two-branch attention-and-fusion block.

DCA: attention = pointwise(diff_depthwise_9x9(F)), output = attention * F.
EDCA: F1 = diff_depthwise_5x5(F); F2 = diff_depthwise_9x9_dilation3(F1);
attention = pointwise(F1 + F2), output = attention * F. The dilated stage
consumes F1 and the attention input is the sum F1 + F2.

The fusion block squeezes channels by 8, runs DCA on the depth branch and
EDCA on the RGB branch, recovers channels, adds residuals, and finally sums
the depth output into the RGB output. Attention maps are raw linear values:
no sigmoid, no bias, no normalization layers anywhere, which keeps zero
inputs producing exactly zero outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import TraceGraph
from .convops import ConvSpec
from .errors import ConfigError, ShapeError
from .tensor import DTYPES, Tensor

DCA_SPEC = ConvSpec(kernel=9, dilation=1, grouping="depthwise")
EDCA_DW_SPEC = ConvSpec(kernel=5, dilation=1, grouping="depthwise")
EDCA_DWD_SPEC = ConvSpec(kernel=9, dilation=3, grouping="depthwise")
SQUEEZE_RATIO = 8

VARIANTS = ("baseline", "dca_only", "edca_only", "full", "swapped")


def kaiming_normal(rng: np.random.Generator, shape, dtype: str = "f32",
                   gain: float = 1.0) -> Tensor:
    """Fan-in scaled normal init: std = gain * sqrt(1 / (c_in_per_group * k*k)).

    Pass gain=sqrt(2) for kernels followed by a rectifier. Attention and 1x1
    maps are never followed by one, and the attention product compounds any
    excess gain across stages, so they use gain 1.
    """
    fan_in = shape[1] * shape[2] * shape[3]
    std = gain / np.sqrt(fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(DTYPES[dtype]))


@dataclass(frozen=True)
class DCAParams:
    dw: Tensor  # depthwise (c, 1, 9, 9)
    pw: Tensor  # pointwise (c, c, 1, 1)

    def __post_init__(self):
        c = self.dw.shape[0]
        if self.dw.shape != (c, 1, 9, 9):
            raise ConfigError(f"DCA depthwise kernel must be (c,1,9,9), got {self.dw.shape}")
        if self.pw.shape != (c, c, 1, 1):
            raise ConfigError(f"DCA pointwise must be ({c},{c},1,1), got {self.pw.shape}")

    @property
    def channels(self) -> int:
        return self.dw.shape[0]


@dataclass(frozen=True)
class EDCAParams:
    dw: Tensor   # depthwise (c, 1, 5, 5), dilation 1
    dwd: Tensor  # depthwise (c, 1, 9, 9), dilation 3
    pw: Tensor   # pointwise (c, c, 1, 1)

    def __post_init__(self):
        c = self.dw.shape[0]
        if self.dw.shape != (c, 1, 5, 5):
            raise ConfigError(f"EDCA dw kernel must be (c,1,5,5), got {self.dw.shape}")
        if self.dwd.shape != (c, 1, 9, 9):
            raise ConfigError(f"EDCA dwd kernel must be (c,1,9,9), got {self.dwd.shape}")
        if self.pw.shape != (c, c, 1, 1):
            raise ConfigError(f"EDCA pointwise must be ({c},{c},1,1), got {self.pw.shape}")

    @property
    def channels(self) -> int:
        return self.dw.shape[0]


@dataclass(frozen=True)
class FusionParams:
    """Per-stage fusion weights at input width c, inner width c / squeeze."""

    w1: Tensor   # depth squeeze (c/r, c, 1, 1)
    w2: Tensor   # depth recover (c, c/r, 1, 1)
    w1p: Tensor  # rgb squeeze
    w2p: Tensor  # rgb recover
    dca: DCAParams    # depth branch, width c/r
    edca: EDCAParams  # rgb branch, width c/r
    squeeze: int = SQUEEZE_RATIO

    def __post_init__(self):
        cr, c = self.w1.shape[0], self.w1.shape[1]
        if c % self.squeeze != 0 or c // self.squeeze != cr:
            raise ConfigError(f"squeeze {self.squeeze} inconsistent with w1 {self.w1.shape}")
        for name, t, shape in (("w2", self.w2, (c, cr, 1, 1)),
                               ("w1p", self.w1p, (cr, c, 1, 1)),
                               ("w2p", self.w2p, (c, cr, 1, 1))):
            if t.shape != shape:
                raise ConfigError(f"{name} must be {shape}, got {t.shape}")
        if self.dca.channels != cr or self.edca.channels != cr:
            raise ConfigError("inner attention widths must equal c/squeeze")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


def init_dca_params(c: int, rng: np.random.Generator, dtype: str = "f32") -> DCAParams:
    return DCAParams(dw=kaiming_normal(rng, (c, 1, 9, 9), dtype),
                     pw=kaiming_normal(rng, (c, c, 1, 1), dtype))


def init_edca_params(c: int, rng: np.random.Generator, dtype: str = "f32") -> EDCAParams:
    return EDCAParams(dw=kaiming_normal(rng, (c, 1, 5, 5), dtype),
                      dwd=kaiming_normal(rng, (c, 1, 9, 9), dtype),
                      pw=kaiming_normal(rng, (c, c, 1, 1), dtype))


def init_fusion_params(c: int, rng: np.random.Generator, dtype: str = "f32",
                       squeeze: int = SQUEEZE_RATIO) -> FusionParams:
    if c % squeeze != 0:
        raise ConfigError(f"channels {c} not divisible by squeeze ratio {squeeze}")
    cr = c // squeeze
    return FusionParams(
        w1=kaiming_normal(rng, (cr, c, 1, 1), dtype),
        w2=kaiming_normal(rng, (c, cr, 1, 1), dtype),
        w1p=kaiming_normal(rng, (cr, c, 1, 1), dtype),
        w2p=kaiming_normal(rng, (c, cr, 1, 1), dtype),
        dca=init_dca_params(cr, rng, dtype),
        edca=init_edca_params(cr, rng, dtype),
        squeeze=squeeze,
    )


# --- traced builders (single source of truth for the block math) ------------

FUSION_TENSOR_NAMES = ("w1", "w2", "w1p", "w2p",
                       "dca_dw", "dca_pw", "edca_dw", "edca_dwd", "edca_pw")


def fusion_tensors(p: FusionParams) -> dict[str, Tensor]:
    return {"w1": p.w1, "w2": p.w2, "w1p": p.w1p, "w2p": p.w2p,
            "dca_dw": p.dca.dw, "dca_pw": p.dca.pw,
            "edca_dw": p.edca.dw, "edca_dwd": p.edca.dwd, "edca_pw": p.edca.pw}


def dca_nodes(g: TraceGraph, f: int, dw: int, pw: int,
              stop_grad_diff: bool = False) -> tuple[int, int]:
    a = g.diff_conv2d(f, dw, DCA_SPEC, stop_grad_diff=stop_grad_diff)
    attn = g.pointwise(a, pw)
    out = g.mul(attn, f)
    return attn, out


def edca_nodes(g: TraceGraph, f: int, dw: int, dwd: int, pw: int,
               stop_grad_diff: bool = False) -> tuple[int, int]:
    f1 = g.diff_conv2d(f, dw, EDCA_DW_SPEC, stop_grad_diff=stop_grad_diff)
    f2 = g.diff_conv2d(f1, dwd, EDCA_DWD_SPEC, stop_grad_diff=stop_grad_diff)
    attn = g.pointwise(g.add(f1, f2), pw)
    out = g.mul(attn, f)
    return attn, out


def _attn_branch(g, x, w_in, block, w_out, stop_grad_diff):
    squeezed = g.pointwise(x, w_in)
    attn, out = block(squeezed, stop_grad_diff)
    recovered = g.pointwise(out, w_out)
    return attn, g.add(recovered, x)


def fusion_nodes(g: TraceGraph, rgb: int, depth: int, ids: dict[str, int],
                 stop_grad_diff: bool = False) -> tuple[int, int, int, int]:
    """Returns (rgb_out, depth_out, rgb_attn, depth_attn) node ids."""
    depth_attn, depth_out = _attn_branch(
        g, depth, ids["w1"],
        lambda s, sg: dca_nodes(g, s, ids["dca_dw"], ids["dca_pw"], sg),
        ids["w2"], stop_grad_diff)
    rgb_attn, rgb_mid = _attn_branch(
        g, rgb, ids["w1p"],
        lambda s, sg: edca_nodes(g, s, ids["edca_dw"], ids["edca_dwd"], ids["edca_pw"], sg),
        ids["w2p"], stop_grad_diff)
    rgb_out = g.add(rgb_mid, depth_out)
    return rgb_out, depth_out, rgb_attn, depth_attn


def variant_nodes(g: TraceGraph, rgb: int, depth: int, variant: str,
                  ids: dict[str, int] | None,
                  stop_grad_diff: bool = False):
    """Ablation wiring. Returns (rgb_out, depth_out, rgb_attn, depth_attn);
    attention ids are None on branches whose attention path is omitted."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant != "baseline" and ids is None:
        raise ConfigError(f"variant {variant!r} requires fusion parameters")
    if variant == "baseline":
        return g.add(rgb, depth), depth, None, None
    if variant == "full":
        return fusion_nodes(g, rgb, depth, ids, stop_grad_diff)
    if variant == "dca_only":
        depth_attn, depth_out = _attn_branch(
            g, depth, ids["w1"],
            lambda s, sg: dca_nodes(g, s, ids["dca_dw"], ids["dca_pw"], sg),
            ids["w2"], stop_grad_diff)
        return g.add(rgb, depth_out), depth_out, None, depth_attn
    if variant == "edca_only":
        rgb_attn, rgb_mid = _attn_branch(
            g, rgb, ids["w1p"],
            lambda s, sg: edca_nodes(g, s, ids["edca_dw"], ids["edca_dwd"],
                                     ids["edca_pw"], sg),
            ids["w2p"], stop_grad_diff)
        return g.add(rgb_mid, depth), depth, rgb_attn, None
    # swapped: EDCA gates the depth branch, DCA gates the RGB branch
    depth_attn, depth_out = _attn_branch(
        g, depth, ids["w1"],
        lambda s, sg: edca_nodes(g, s, ids["edca_dw"], ids["edca_dwd"],
                                 ids["edca_pw"], sg),
        ids["w2"], stop_grad_diff)
    rgb_attn, rgb_mid = _attn_branch(
        g, rgb, ids["w1p"],
        lambda s, sg: dca_nodes(g, s, ids["dca_dw"], ids["dca_pw"], sg),
        ids["w2p"], stop_grad_diff)
    return g.add(rgb_mid, depth_out), depth_out, rgb_attn, depth_attn


# --- pure forward wrappers ----------------------------------------------------


def dca_forward(f: Tensor, p: DCAParams) -> tuple[Tensor, Tensor]:
    """Returns (attention, output); attention has the same shape as the input."""
    if f.shape[1] != p.channels:
        raise ShapeError(f"input has {f.shape[1]} channels, params expect {p.channels}")
    g = TraceGraph()
    attn, out = dca_nodes(g, g.leaf(f), g.leaf(p.dw), g.leaf(p.pw))
    return g.value(attn), g.value(out)


def edca_forward(f: Tensor, p: EDCAParams) -> tuple[Tensor, Tensor]:
    """Returns (attention, output) of the long-range module."""
    if f.shape[1] != p.channels:
        raise ShapeError(f"input has {f.shape[1]} channels, params expect {p.channels}")
    g = TraceGraph()
    attn, out = edca_nodes(g, g.leaf(f), g.leaf(p.dw), g.leaf(p.dwd), g.leaf(p.pw))
    return g.value(attn), g.value(out)


def _leaf_ids(g: TraceGraph, p: FusionParams) -> dict[str, int]:
    return {name: g.leaf(t) for name, t in fusion_tensors(p).items()}


def fusion_forward(rgb_in: Tensor, depth_in: Tensor,
                   p: FusionParams) -> tuple[Tensor, Tensor]:
    """One attention-and-fusion stage; returns (rgb_out, depth_out)."""
    if rgb_in.shape != depth_in.shape:
        raise ShapeError(f"branch shapes differ: {rgb_in.shape} vs {depth_in.shape}")
    if rgb_in.shape[1] != p.channels:
        raise ShapeError(f"input has {rgb_in.shape[1]} channels, params expect {p.channels}")
    g = TraceGraph()
    rgb_out, depth_out, _, _ = fusion_nodes(g, g.leaf(rgb_in), g.leaf(depth_in),
                                            _leaf_ids(g, p))
    return g.value(rgb_out), g.value(depth_out)


def variant_forward(rgb: Tensor, depth: Tensor, variant: str,
                    params: FusionParams | None) -> tuple[Tensor, Tensor]:
    """Ablation-selectable fusion; baseline ignores params entirely."""
    if rgb.shape != depth.shape:
        raise ShapeError(f"branch shapes differ: {rgb.shape} vs {depth.shape}")
    g = TraceGraph()
    ids = None if params is None else _leaf_ids(g, params)
    rgb_out, depth_out, _, _ = variant_nodes(g, g.leaf(rgb), g.leaf(depth),
                                             variant, ids)
    return g.value(rgb_out), g.value(depth_out)


# --- attention-map export -------------------------------------------------


def attention_to_gray(attn: Tensor, sample: int = 0) -> np.ndarray:
    """Channel-mean attention as an 8-bit grayscale image.

    Min-max normalized per map; a constant map renders as mid-gray 128.
    """
    mean_map = attn.array[sample].mean(axis=0)
    lo, hi = float(mean_map.min()), float(mean_map.max())
    if hi == lo:
        return np.full(mean_map.shape, 128, dtype=np.uint8)
    scaled = (mean_map - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ShapeError("write_pgm expects a 2-D uint8 array")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
