"""Forward convolution kernels: vanilla, differential, depthwise, dilated, pointwise.

A differential convolution reweights every kernel tap by exp(-|center - neighbor|)
of the input window before the weighted sum, so the effective kernel depends on
both the input and the position. All convolutions here use stride 1 and "same"
zero padding; bias terms do not exist anywhere in this codebase.

The vectorized implementations below are checked against the naive loop oracles
in `reference.py`; the two routes are deliberately kept independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, _check_pair

GROUPINGS = ("dense", "depthwise")


@dataclass(frozen=True)
class ConvSpec:
    """Kernel size, dilation and grouping of one convolution (stride 1, "same" pad)."""

    kernel: int
    dilation: int = 1
    grouping: str = "dense"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"grouping must be one of {GROUPINGS}, got {self.grouping!r}")

    @property
    def pad(self) -> int:
        return self.dilation * (self.kernel - 1) // 2


def kernel_offsets(kernel: int, dilation: int = 1) -> list[tuple[int, int]]:
    """(row, col) offsets of the taps in row-major order, center at (0, 0)."""
    half = (kernel - 1) // 2
    return [(dilation * (ky - half), dilation * (kx - half))
            for ky in range(kernel) for kx in range(kernel)]


# --- window extraction ------------------------------------------------------


def _pad_array(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kernel: int, dilation: int, h: int, w: int) -> np.ndarray:
    """Stack the k*k shifted views of the padded input: (n, c, k*k, h*w)."""
    n, c = xp.shape[:2]
    taps = kernel * kernel
    cols = np.empty((n, c, taps, h * w), dtype=xp.dtype)
    t = 0
    for ky in range(kernel):
        for kx in range(kernel):
            r0 = ky * dilation
            c0 = kx * dilation
            cols[:, :, t, :] = xp[:, :, r0:r0 + h, c0:c0 + w].reshape(n, c, h * w)
            t += 1
    return cols


def _col2im(cols: np.ndarray, kernel: int, dilation: int, h: int, w: int,
            pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add tap planes back, then crop the padding."""
    n, c = cols.shape[:2]
    hp, wp = h + 2 * pad, w + 2 * pad
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    t = 0
    for ky in range(kernel):
        for kx in range(kernel):
            r0 = ky * dilation
            c0 = kx * dilation
            xp[:, :, r0:r0 + h, c0:c0 + w] += cols[:, :, t, :].reshape(n, c, h, w)
            t += 1
    if pad == 0:
        return xp
    return xp[:, :, pad:pad + h, pad:pad + w]


def _tap_valid_mask(kernel: int, dilation: int, h: int, w: int) -> np.ndarray:
    """(k*k, h*w) bool: True where the tap lands inside the unpadded image."""
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    mask = np.empty((kernel * kernel, h * w), dtype=bool)
    for t, (dy, dx) in enumerate(kernel_offsets(kernel, dilation)):
        ok = (rows + dy >= 0) & (rows + dy < h) & (cols + dx >= 0) & (cols + dx < w)
        mask[t] = ok.reshape(-1)
    return mask


# --- weight validation -------------------------------------------------------


def _check_conv_args(x: Tensor, w: Tensor, spec: ConvSpec):
    _check_pair_dtype(x, w)
    n, c, h, w_ = x.shape
    co, cipg, kh, kw = w.shape
    if kh != spec.kernel or kw != spec.kernel:
        raise ShapeError(f"kernel tensor is {kh}x{kw}, spec says {spec.kernel}x{spec.kernel}")
    if spec.grouping == "dense":
        if cipg != c:
            raise ShapeError(f"dense kernel expects c_in={c}, got {cipg}")
    else:
        if cipg != 1 or co != c:
            raise ShapeError(f"depthwise kernel must be ({c},1,k,k), got {w.shape}")


def _check_pair_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        from .errors import DtypeError
        raise DtypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


# --- vanilla convolution ------------------------------------------------------


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    n, c, h, ww = x.shape
    k, d = spec.kernel, spec.dilation
    cols = _im2col(_pad_array(x, spec.pad), k, d, h, ww)
    if spec.grouping == "dense":
        co = w.shape[0]
        w2 = w.reshape(co, c * k * k)
        y = np.matmul(w2, cols.reshape(n, c * k * k, h * ww))
        return y.reshape(n, co, h, ww), cols
    w2 = w.reshape(c, k * k)
    y = np.einsum("ct,nctp->ncp", w2, cols)
    return y.reshape(n, c, h, ww), cols


def _conv2d_bwd(gy: np.ndarray, x: np.ndarray, w: np.ndarray, cols: np.ndarray,
                spec: ConvSpec):
    n, c, h, ww = x.shape
    k, d = spec.kernel, spec.dilation
    g = gy.reshape(gy.shape[0], gy.shape[1], h * ww)
    if spec.grouping == "dense":
        co = w.shape[0]
        w2 = w.reshape(co, c * k * k)
        cols2 = cols.reshape(n, c * k * k, h * ww)
        gw = np.matmul(g, cols2.transpose(0, 2, 1)).sum(axis=0)
        gcols = np.matmul(w2.T, g).reshape(n, c, k * k, h * ww)
        return _col2im(gcols, k, d, h, ww, spec.pad), gw.reshape(w.shape)
    w2 = w.reshape(c, k * k)
    gw = np.einsum("ncp,nctp->ct", g, cols)
    gcols = w2[None, :, :, None] * g[:, :, None, :]
    return _col2im(gcols, k, d, h, ww, spec.pad), gw.reshape(w.shape)


def conv2d(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Vanilla convolution, zero-padded to keep the spatial shape."""
    _check_conv_args(x, w, spec)
    y, _ = _conv2d_fwd(x.array, w.array, spec)
    return Tensor(y)


# --- differential convolution ---------------------------------------------


def _diff_conv2d_fwd(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    """Returns (y, saved) where saved carries everything backward needs."""
    n, c, h, ww = x.shape
    k, d = spec.kernel, spec.dilation
    cols = _im2col(_pad_array(x, spec.pad), k, d, h, ww)
    center = x.reshape(n, c, 1, h * ww)
    diff = center - cols
    mult = np.exp(-np.abs(diff))
    mp = mult * cols
    if spec.grouping == "dense":
        co = w.shape[0]
        w2 = w.reshape(co, c * k * k)
        y = np.matmul(w2, mp.reshape(n, c * k * k, h * ww)).reshape(n, co, h, ww)
    else:
        w2 = w.reshape(c, k * k)
        y = np.einsum("ct,nctp->ncp", w2, mp).reshape(n, c, h, ww)
    saved = {"cols": cols, "diff": diff, "mult": mult}
    return y, saved


def _diff_conv2d_bwd(gy: np.ndarray, x: np.ndarray, w: np.ndarray, saved: dict,
                     spec: ConvSpec, stop_grad_diff: bool = False):
    """Gradients w.r.t. input and weights.

    The input gradient has three parts: the direct tap term through the
    effective kernel, and the chain through exp(-|center - tap|) hitting the
    center pixel (+) and the tap pixel (-). sign(0) is taken as 0, which also
    makes the structurally-zero center difference contribute nothing.
    With stop_grad_diff the multiplier is treated as a constant.
    """
    n, c, h, ww = x.shape
    k, d = spec.kernel, spec.dilation
    cols, diff, mult = saved["cols"], saved["diff"], saved["mult"]
    g = gy.reshape(gy.shape[0], gy.shape[1], h * ww)
    if spec.grouping == "dense":
        co = w.shape[0]
        w2 = w.reshape(co, c * k * k)
        mp = (mult * cols).reshape(n, c * k * k, h * ww)
        gw = np.einsum("nop,nip->oi", g, mp).reshape(w.shape)
        gmp = np.matmul(w2.T, g).reshape(n, c, k * k, h * ww)
    else:
        w2 = w.reshape(c, k * k)
        gw = np.einsum("ncp,nctp->ct", g, mult * cols).reshape(w.shape)
        gmp = w2[None, :, :, None] * g[:, :, None, :]
    # direct tap path: d y / d cols through the effective kernel
    gcols = gmp * mult
    if not stop_grad_diff:
        gmult = gmp * cols
        gdiff = -np.sign(diff) * mult * gmult
        gcenter = gdiff.sum(axis=2).reshape(n, c, h, ww)
        gcols = gcols - gdiff
    gx = _col2im(gcols, k, d, h, ww, spec.pad)
    if not stop_grad_diff:
        gx = gx + gcenter
    return gx, gw


def diff_conv2d(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Differential convolution: taps reweighted by exp(-|center - neighbor|).

    The difference term is taken against the zero-padded input, per channel;
    padded taps contribute nothing either way since their value is zero.
    """
    _check_conv_args(x, w, spec)
    y, _ = _diff_conv2d_fwd(x.array, w.array, spec)
    return Tensor(y)


def diff_conv2d_depthwise(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Per-channel differential convolution; output channel j sees only input channel j."""
    if spec.grouping != "depthwise":
        raise ShapeError(f"spec grouping must be depthwise, got {spec.grouping!r}")
    return diff_conv2d(x, w, spec)


def diff_kernel_at(x_patch, w_slice) -> np.ndarray:
    """Effective kernel for one k x k window (out-of-bounds entries already zero).

    Multiplier at the center tap is exp(0) = 1; all multipliers lie in (0, 1].
    """
    patch = np.asarray(x_patch, dtype=np.float64)
    wk = np.asarray(w_slice, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1] or patch.shape[0] % 2 == 0:
        raise ShapeError(f"patch must be square with odd side, got {patch.shape}")
    if wk.shape != patch.shape:
        raise ShapeError(f"kernel shape {wk.shape} != patch shape {patch.shape}")
    half = patch.shape[0] // 2
    center = patch[half, half]
    return wk * np.exp(-np.abs(center - patch))


# --- pointwise convolution --------------------------------------------------


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution: per-pixel linear map across channels, no bias."""
    _check_pair_dtype(x, w)
    n, c, h, ww = x.shape
    co, ci, kh, kw = w.shape
    if (kh, kw) != (1, 1) or ci != c:
        raise ShapeError(f"pointwise kernel must be (c_out,{c},1,1), got {w.shape}")
    y = _pointwise_fwd(x.array, w.array)
    return Tensor(y)


def _pointwise_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, ww = x.shape
    co = w.shape[0]
    y = np.matmul(w.reshape(co, c), x.reshape(n, c, h * ww))
    return y.reshape(n, co, h, ww)


def _pointwise_bwd(gy: np.ndarray, x: np.ndarray, w: np.ndarray):
    n, c, h, ww = x.shape
    co = w.shape[0]
    g = gy.reshape(n, co, h * ww)
    w2 = w.reshape(co, c)
    gx = np.matmul(w2.T, g).reshape(x.shape)
    gw = np.matmul(g, x.reshape(n, c, h * ww).transpose(0, 2, 1)).sum(axis=0)
    return gx, gw.reshape(w.shape)


# --- receptive-field analysis -------------------------------------------------


def receptive_footprint(chain, out_pixel: tuple[int, int],
                        in_shape: tuple[int, int]) -> tuple[int, int, int, int]:
    """Exact bounding box of input pixels that can influence `out_pixel`.

    Computed by sensitivity propagation: mark the output pixel, then dilate the
    mark backward through each layer's tap offsets (all-ones kernels), clipped
    at the image border. Returns (row0, col0, row1, col1), inclusive. For an
    unclipped box the side length is 1 + sum(d_j * (k_j - 1)).
    """
    chain = list(chain)
    if not chain:
        raise ConfigError("chain must be nonempty")
    h, w = in_shape
    r, c = out_pixel
    if not (0 <= r < h and 0 <= c < w):
        raise ShapeError(f"out_pixel {out_pixel} outside {in_shape}")
    mask = np.zeros((h, w), dtype=bool)
    mask[r, c] = True
    for spec in reversed(chain):
        nxt = np.zeros_like(mask)
        for dy, dx in kernel_offsets(spec.kernel, spec.dilation):
            src_r0 = max(0, -dy)
            src_r1 = min(h, h - dy)
            src_c0 = max(0, -dx)
            src_c1 = min(w, w - dx)
            if src_r0 >= src_r1 or src_c0 >= src_c1:
                continue
            nxt[src_r0 + dy:src_r1 + dy, src_c0 + dx:src_c1 + dx] |= \
                mask[src_r0:src_r1, src_c0:src_c1]
        mask = nxt
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])
