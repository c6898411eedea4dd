"""Named gradient-check cases for every differentiable primitive and block.

Each case builds fresh f64 inputs from a seeded generator and a traced forward
ending in a scalar, which `autodiff.grad_check` compares against central
finite differences. Linear ops get the tight 1e-6 default tolerance; anything
through the differential multiplier or a long composition gets 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention
from .autodiff import GradientReport, grad_check
from .convops import ConvSpec
from .network import ToyNetConfig, model_init, model_nodes
from .tensor import Tensor


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _lattice(rng, *shape) -> Tensor:
    """Values on a 0.005 grid: neighbor differences are 0 or >= 0.005, so the
    1e-3 kink margin holds without resampling (exact ties are benign)."""
    return Tensor(rng.integers(-300, 301, size=shape).astype(np.float64) * 0.005)


# Composed blocks feed continuous intermediate features into differential
# convolutions, where some of the thousands of neighbor differences always
# land below 1e-3. The hazard for central differences at h=1e-6 is only a
# sign flip within ~h of the kink, so a 5e-5 margin keeps a 50x safety
# factor while staying reachable by resampling.
COMPOSED_MARGIN = 5e-5


def _case_elementwise(rng):
    leaves = {"x": _t(rng, 1, 2, 4, 4), "y": _t(rng, 1, 2, 4, 4)}

    def forward(g, ids):
        z = g.add(g.mul(ids["x"], ids["y"]), ids["x"])
        return g.scale(g.sum(z), 1.0 / leaves["x"].size)

    return leaves, forward


def _conv_case(spec: ConvSpec, xshape, wshape):
    def build(rng):
        leaves = {"x": _t(rng, *xshape), "w": _t(rng, *wshape)}

        def forward(g, ids):
            if spec.kernel == 1 and spec.grouping == "dense":
                y = g.pointwise(ids["x"], ids["w"])
            else:
                y = g.conv2d(ids["x"], ids["w"], spec)
            return g.scale(g.sum(y), 1.0 / leaves["x"].size)

        return leaves, forward

    return build


def _diff_conv_case(spec: ConvSpec, xshape, wshape):
    def build(rng):
        leaves = {"x": _lattice(rng, *xshape), "w": _t(rng, *wshape)}

        def forward(g, ids):
            y = g.diff_conv2d(ids["x"], ids["w"], spec)
            return g.scale(g.sum(y), 1.0 / leaves["x"].size)

        return leaves, forward

    return build


def _case_relu(rng):
    leaves = {"x": _t(rng, 1, 3, 5, 5)}
    return leaves, lambda g, ids: g.scale(g.sum(g.relu(ids["x"])), 1.0 / 75)


def _case_mean_pool2(rng):
    leaves = {"x": _t(rng, 2, 3, 6, 6)}

    def forward(g, ids):
        p = g.mean_pool2(ids["x"])
        return g.scale(g.sum(g.mul(p, p)), 1.0 / 54)

    return leaves, forward


def _case_upsample(rng):
    leaves = {"x": _t(rng, 1, 2, 4, 4)}

    def forward(g, ids):
        up = g.upsample_bilinear(ids["x"], (9, 9))
        return g.scale(g.sum(g.mul(up, up)), 1.0 / 162)

    return leaves, forward


def _case_cross_entropy(rng):
    leaves = {"logits": _t(rng, 1, 4, 4, 4)}
    labels = rng.integers(0, 4, size=(1, 4, 4))
    return leaves, lambda g, ids: g.cross_entropy(ids["logits"], labels)


def _case_dca(rng):
    c = 4
    leaves = {"f": _lattice(rng, 1, c, 10, 10),
              "dw": _t(rng, c, 1, 9, 9), "pw": _t(rng, c, c, 1, 1)}

    def forward(g, ids):
        _, out = attention.dca_nodes(g, ids["f"], ids["dw"], ids["pw"])
        return g.scale(g.sum(out), 1.0 / leaves["f"].size)

    return leaves, forward


def _scaled(rng, scale, *shape) -> Tensor:
    """Kernel draws compressed toward zero so the differential multipliers of
    downstream features stay bounded away from the finite-difference floor."""
    return Tensor(rng.standard_normal(shape) * scale)


def _case_edca(rng):
    c = 4
    leaves = {"f": _lattice(rng, 1, c, 12, 12),
              "dw": _scaled(rng, 0.15, c, 1, 5, 5),
              "dwd": _scaled(rng, 0.15, c, 1, 9, 9),
              "pw": _scaled(rng, 0.5, c, c, 1, 1)}

    def forward(g, ids):
        _, out = attention.edca_nodes(g, ids["f"], ids["dw"], ids["dwd"], ids["pw"])
        return g.scale(g.sum(out), 1.0 / leaves["f"].size)

    return leaves, forward


def _fusion_leaves(rng, c, prefix=""):
    cr = c // attention.SQUEEZE_RATIO
    return {
        prefix + "w1": _scaled(rng, 0.35, cr, c, 1, 1),
        prefix + "w2": _scaled(rng, 0.35, c, cr, 1, 1),
        prefix + "w1p": _scaled(rng, 0.35, cr, c, 1, 1),
        prefix + "w2p": _scaled(rng, 0.35, c, cr, 1, 1),
        prefix + "dca_dw": _scaled(rng, 0.15, cr, 1, 9, 9),
        prefix + "dca_pw": _scaled(rng, 0.5, cr, cr, 1, 1),
        prefix + "edca_dw": _scaled(rng, 0.15, cr, 1, 5, 5),
        prefix + "edca_dwd": _scaled(rng, 0.15, cr, 1, 9, 9),
        prefix + "edca_pw": _scaled(rng, 0.5, cr, cr, 1, 1),
    }


def _case_fusion(rng):
    c, h, w = 8, 8, 8
    leaves = {"rgb": _t(rng, 1, c, h, w), "depth": _t(rng, 1, c, h, w)}
    leaves.update(_fusion_leaves(rng, c))

    def forward(g, ids):
        fusion_ids = {n: ids[n] for n in attention.FUSION_TENSOR_NAMES}
        rgb_out, depth_out, _, _ = attention.fusion_nodes(g, ids["rgb"], ids["depth"],
                                                          fusion_ids)
        return g.scale(g.sum(g.add(rgb_out, depth_out)), 1.0 / leaves["rgb"].size)

    return leaves, forward


def _case_toy_net(rng):
    cfg = ToyNetConfig(stages=1, base_channels=8, classes=3, variant="full",
                       seed=int(rng.integers(0, 2 ** 31)))
    params = model_init(cfg, dtype="f64")
    leaves = {"rgb": Tensor(rng.standard_normal((1, 3, 8, 8))),
              "depth": Tensor(rng.standard_normal((1, 1, 8, 8)))}
    leaves.update(params.tensors)
    labels = rng.integers(0, cfg.classes, size=(1, 8, 8))

    def forward(g, ids):
        pids = {n: ids[n] for n in params.tensors}
        logits, _ = model_nodes(g, ids["rgb"], ids["depth"], pids, cfg, "full")
        return g.cross_entropy(logits, labels)

    return leaves, forward


@dataclass(frozen=True)
class CheckCase:
    build: object
    tol: float
    margin: float = 1e-3


CHECKS: dict[str, CheckCase] = {
    "elementwise": CheckCase(_case_elementwise, 1e-6),
    "conv2d": CheckCase(_conv_case(ConvSpec(3), (1, 2, 6, 6), (3, 2, 3, 3)), 1e-6),
    "conv2d_depthwise": CheckCase(
        _conv_case(ConvSpec(3, grouping="depthwise"), (1, 3, 6, 6), (3, 1, 3, 3)), 1e-6),
    "diff_conv2d": CheckCase(
        _diff_conv_case(ConvSpec(3), (1, 2, 6, 6), (2, 2, 3, 3)), 1e-4),
    "diff_conv2d_depthwise": CheckCase(
        _diff_conv_case(ConvSpec(5, grouping="depthwise"), (1, 3, 7, 7), (3, 1, 5, 5)), 1e-4),
    "diff_conv2d_dilated": CheckCase(
        _diff_conv_case(ConvSpec(3, dilation=3, grouping="depthwise"),
                        (1, 2, 10, 10), (2, 1, 3, 3)), 1e-4),
    "pointwise_conv": CheckCase(_conv_case(ConvSpec(1), (1, 4, 5, 5), (3, 4, 1, 1)), 1e-6),
    "relu": CheckCase(_case_relu, 1e-6),
    "mean_pool2": CheckCase(_case_mean_pool2, 1e-6),
    "upsample_bilinear": CheckCase(_case_upsample, 1e-6),
    "cross_entropy": CheckCase(_case_cross_entropy, 1e-6),
    "dca": CheckCase(_case_dca, 1e-4),
    "edca": CheckCase(_case_edca, 1e-4, margin=COMPOSED_MARGIN),
    "fusion": CheckCase(_case_fusion, 1e-4, margin=COMPOSED_MARGIN),
    "toy_net": CheckCase(_case_toy_net, 1e-4, margin=COMPOSED_MARGIN),
}


def run_checks(names: list[str] | None = None, seeds: int = 5,
               tol: float | None = None) -> GradientReport:
    """Run the named cases (all by default) and merge their reports."""
    if names is None:
        names = list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient-check ops: {unknown}; known: {sorted(CHECKS)}")
    merged = GradientReport(tol=tol if tol is not None else float("nan"))
    for name in names:
        case = CHECKS[name]
        case_tol = tol if tol is not None else case.tol
        rep = grad_check(name, case.build, tol=case_tol, seeds=seeds,
                         margin=case.margin)
        merged.rows.extend(rep.rows)
    return merged
