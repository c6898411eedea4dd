"""Differential convolution attention: ops, autodiff, toy network, trainer, CLI."""

import os as _os

# Pin BLAS pools to one thread before numpy loads: reductions then have a
# fixed order and training runs are byte-identical regardless of
# DCATTN_THREADS, which only governs process-level parallelism (see cli).
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    _os.environ.setdefault(_var, "1")

try:
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(limits=1)
except Exception:  # pragma: no cover - best effort when numpy was loaded first
    pass

from .attention import (DCAParams, EDCAParams, FusionParams, dca_forward,
                        edca_forward, fusion_forward, variant_forward)
from .convops import (ConvSpec, conv2d, diff_conv2d, diff_conv2d_depthwise,
                      diff_kernel_at, pointwise_conv, receptive_footprint)
from .data import GenConfig, SceneSample, generate_dataset, generate_scene
from .network import ToyNetConfig, ToyNetParams, model_forward, model_init
from .tensor import Tensor, allclose, elementwise_binary, pad_zero, tensor_filled
from .train import TrainConfig, cross_entropy_loss, mean_iou, pixel_accuracy, poly_lr, sgd_step, train

__all__ = [
    "ConvSpec", "DCAParams", "EDCAParams", "FusionParams", "GenConfig",
    "SceneSample", "Tensor", "ToyNetConfig", "ToyNetParams", "TrainConfig",
    "allclose", "conv2d", "cross_entropy_loss", "dca_forward", "diff_conv2d",
    "diff_conv2d_depthwise", "diff_kernel_at", "edca_forward",
    "elementwise_binary", "fusion_forward", "generate_dataset",
    "generate_scene", "mean_iou", "model_forward", "model_init", "pad_zero",
    "pixel_accuracy", "pointwise_conv", "poly_lr", "receptive_footprint",
    "sgd_step", "tensor_filled", "train", "variant_forward",
]

__version__ = "0.1.0"
