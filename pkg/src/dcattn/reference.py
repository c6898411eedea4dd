"""Naive loop oracles for the convolution family.

Everything here trades speed for obviousness: plain Python loops over batch,
channels, output pixels and taps, with explicit bounds checks standing in for
zero padding. Used to validate the vectorized kernels in `convops.py`; do not
"optimize" these, their value is independence.
"""

from __future__ import annotations

import math

import numpy as np

from .convops import ConvSpec, _check_conv_args
from .tensor import Tensor


def _tap_value(x: np.ndarray, n: int, c: int, r: int, col: int) -> float:
    h, w = x.shape[2], x.shape[3]
    if 0 <= r < h and 0 <= col < w:
        return float(x[n, c, r, col])
    return 0.0


def conv2d_reference(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Direct evaluation of the convolution sum, one tap at a time."""
    _check_conv_args(x, w, spec)
    xa, wa = x.array, w.array
    n, cin, h, ww = xa.shape
    k, d = spec.kernel, spec.dilation
    half = (k - 1) // 2
    cout = wa.shape[0]
    out = np.zeros((n, cout, h, ww), dtype=np.float64)
    for b in range(n):
        for co in range(cout):
            channels = [co] if spec.grouping == "depthwise" else range(cin)
            for r in range(h):
                for col in range(ww):
                    acc = 0.0
                    for ci_idx, ci in enumerate(channels):
                        wslice = wa[co, 0 if spec.grouping == "depthwise" else ci_idx]
                        for ky in range(k):
                            for kx in range(k):
                                rr = r + d * (ky - half)
                                cc = col + d * (kx - half)
                                acc += float(wslice[ky, kx]) * _tap_value(xa, b, ci, rr, cc)
                    out[b, co, r, col] = acc
    return Tensor(out.astype(xa.dtype))


def diff_conv2d_reference(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Differential convolution evaluated tap by tap.

    For each output pixel the tap weight is w * exp(-|center - neighbor|),
    with out-of-bounds neighbors read as zero from the padded view.
    """
    _check_conv_args(x, w, spec)
    xa, wa = x.array, w.array
    n, cin, h, ww = xa.shape
    k, d = spec.kernel, spec.dilation
    half = (k - 1) // 2
    cout = wa.shape[0]
    out = np.zeros((n, cout, h, ww), dtype=np.float64)
    for b in range(n):
        for co in range(cout):
            channels = [co] if spec.grouping == "depthwise" else range(cin)
            for r in range(h):
                for col in range(ww):
                    acc = 0.0
                    for ci_idx, ci in enumerate(channels):
                        wslice = wa[co, 0 if spec.grouping == "depthwise" else ci_idx]
                        center = float(xa[b, ci, r, col])
                        for ky in range(k):
                            for kx in range(k):
                                rr = r + d * (ky - half)
                                cc = col + d * (kx - half)
                                tap = _tap_value(xa, b, ci, rr, cc)
                                mult = math.exp(-abs(center - tap))
                                acc += float(wslice[ky, kx]) * mult * tap
                    out[b, co, r, col] = acc
    return Tensor(out.astype(xa.dtype))
