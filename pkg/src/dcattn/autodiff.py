"""Reverse-mode differentiation over the operator set.

A TraceGraph is a tape: ops append entries in execution order and `backward`
walks them in exact reverse, accumulating gradients by summation wherever a
value fans out. Forward saves whatever backward needs (padded windows,
difference multipliers), trading memory for exactness at desk scale.

The independent check lives in `finite_diff_grad` / `grad_check`: central
finite differences at f64, with inputs resampled away from the |center-tap|=0
and relu kinks so the comparison is meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import convops
from .convops import ConvSpec
from .errors import ContractError, ShapeError
from .tensor import Tensor

KINK_MARGIN = 1e-3


class _Entry:
    __slots__ = ("op", "inputs", "output", "bwd", "margin_fn")

    def __init__(self, op, inputs, output, bwd, margin_fn=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd
        self.margin_fn = margin_fn


class TraceGraph:
    """Ordered record of executed primitives; node ids are plain ints."""

    def __init__(self):
        self._values: list[Tensor] = []
        self._entries: list[_Entry | None] = []
        self._leaves: list[int] = []

    # -- bookkeeping ----------------------------------------------------

    def leaf(self, t: Tensor) -> int:
        """Register a differentiable input or parameter."""
        if not isinstance(t, Tensor):
            raise TypeError("leaf expects a Tensor")
        nid = len(self._values)
        self._values.append(t)
        self._entries.append(None)
        self._leaves.append(nid)
        return nid

    def value(self, nid: int) -> Tensor:
        return self._values[nid]

    @property
    def leaves(self) -> list[int]:
        return list(self._leaves)

    def _record(self, op, inputs, out_arr, bwd, margin_fn=None) -> int:
        nid = len(self._values)
        out = Tensor(out_arr)
        self._values.append(out)
        self._entries.append(_Entry(op, tuple(inputs), nid, bwd, margin_fn))
        return nid

    # -- primitives -------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        av, bv = self._values[a].array, self._values[b].array
        if av.shape != bv.shape:
            raise ShapeError(f"add shape mismatch: {av.shape} vs {bv.shape}")
        return self._record("add", (a, b), av + bv, lambda g: (g, g))

    def mul(self, a: int, b: int) -> int:
        av, bv = self._values[a].array, self._values[b].array
        if av.shape != bv.shape:
            raise ShapeError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
        return self._record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def conv2d(self, x: int, w: int, spec: ConvSpec) -> int:
        xt, wt = self._values[x], self._values[w]
        convops._check_conv_args(xt, wt, spec)
        y, cols = convops._conv2d_fwd(xt.array, wt.array, spec)

        def bwd(g, _x=xt.array, _w=wt.array, _cols=cols):
            return convops._conv2d_bwd(g, _x, _w, _cols, spec)

        return self._record("conv2d", (x, w), y, bwd)

    def diff_conv2d(self, x: int, w: int, spec: ConvSpec,
                    stop_grad_diff: bool = False) -> int:
        xt, wt = self._values[x], self._values[w]
        convops._check_conv_args(xt, wt, spec)
        y, saved = convops._diff_conv2d_fwd(xt.array, wt.array, spec)

        def bwd(g, _x=xt.array, _w=wt.array, _saved=saved):
            return convops._diff_conv2d_bwd(g, _x, _w, _saved, spec,
                                            stop_grad_diff=stop_grad_diff)

        def margin(_saved=saved, _shape=xt.shape):
            k = spec.kernel
            if k == 1:
                return math.inf
            valid = convops._tap_valid_mask(k, spec.dilation, _shape[2], _shape[3])
            valid = valid.copy()
            valid[(k * k - 1) // 2] = False  # center difference is structurally 0
            if not valid.any():
                return math.inf
            d = np.abs(_saved["diff"])[:, :, valid]
            # exact ties are benign: sign(0)=0 equals the two-sided average,
            # which is what central differences converge to
            d = d[d > 0]
            return math.inf if d.size == 0 else float(d.min())

        return self._record("diff_conv2d", (x, w), y, bwd, margin_fn=margin)

    def pointwise(self, x: int, w: int) -> int:
        xt, wt = self._values[x], self._values[w]
        n, c = xt.shape[:2]
        if wt.shape[1] != c or wt.shape[2:] != (1, 1):
            raise ShapeError(f"pointwise kernel must be (c_out,{c},1,1), got {wt.shape}")
        y = convops._pointwise_fwd(xt.array, wt.array)

        def bwd(g, _x=xt.array, _w=wt.array):
            return convops._pointwise_bwd(g, _x, _w)

        return self._record("pointwise", (x, w), y, bwd)

    def relu(self, x: int) -> int:
        xv = self._values[x].array
        mask = xv > 0

        def margin(_xv=xv):
            return float(np.abs(_xv).min())

        return self._record("relu", (x,), np.where(mask, xv, 0),
                            lambda g: (g * mask,), margin_fn=margin)

    def mean_pool2(self, x: int) -> int:
        xv = self._values[x].array
        n, c, h, w = xv.shape
        if h % 2 or w % 2:
            raise ShapeError(f"mean_pool2 needs even spatial extents, got {(h, w)}")
        y = xv.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def bwd(g):
            quarter = (g * np.asarray(0.25, dtype=g.dtype))
            return (np.repeat(np.repeat(quarter, 2, axis=2), 2, axis=3),)

        return self._record("mean_pool2", (x,), y, bwd)

    def upsample_bilinear(self, x: int, out_hw: tuple[int, int]) -> int:
        xv = self._values[x].array
        h, w = xv.shape[2], xv.shape[3]
        oh, ow = out_hw
        r = _bilinear_matrix(h, oh, xv.dtype)
        c = _bilinear_matrix(w, ow, xv.dtype)
        y = np.matmul(np.matmul(r, xv), c.T)

        def bwd(g, _r=r, _c=c):
            return (np.matmul(np.matmul(_r.T, g), _c),)

        return self._record("upsample", (x,), y, bwd)

    def sum(self, x: int) -> int:
        xv = self._values[x].array
        y = np.full((1, 1, 1, 1), xv.sum(dtype=np.float64), dtype=xv.dtype)

        def bwd(g, _shape=xv.shape, _dtype=xv.dtype):
            return (np.full(_shape, g.reshape(-1)[0], dtype=_dtype),)

        return self._record("sum", (x,), y, bwd)

    def scale(self, x: int, factor: float) -> int:
        xv = self._values[x].array
        c = np.asarray(factor, dtype=xv.dtype)
        return self._record("scale", (x,), xv * c, lambda g: (g * c,))

    def cross_entropy(self, logits: int, labels: np.ndarray) -> int:
        lv = self._values[logits].array
        n, classes, h, w = lv.shape
        lab = np.asarray(labels)
        if lab.shape != (n, h, w):
            raise ShapeError(f"labels shape {lab.shape} != {(n, h, w)}")
        if lab.min() < 0 or lab.max() >= classes:
            raise ContractError(f"labels out of range [0,{classes})")
        z = lv - lv.max(axis=1, keepdims=True)
        ez = np.exp(z)
        softmax = ez / ez.sum(axis=1, keepdims=True)
        logp = z - np.log(ez.sum(axis=1, keepdims=True))
        picked = np.take_along_axis(logp, lab[:, None, :, :], axis=1)
        count = n * h * w
        loss = -picked.sum(dtype=np.float64) / count
        y = np.full((1, 1, 1, 1), loss, dtype=lv.dtype)

        def bwd(g, _sm=softmax, _lab=lab, _count=count):
            onehot = np.zeros_like(_sm)
            np.put_along_axis(onehot, _lab[:, None, :, :], 1.0, axis=1)
            scale = g.reshape(-1)[0] / _count
            return ((_sm - onehot) * scale,)

        return self._record("cross_entropy", (logits,), y, bwd)


def _bilinear_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    """Interpolation matrix for 1-D bilinear resampling, align_corners=False.

    Source coordinate of output index o is (o + 0.5) * in/out - 0.5, clamped
    to [0, in-1]; the two enclosing input samples get weights (1-frac, frac).
    """
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def kink_margin(graph: TraceGraph) -> float:
    """Smallest distance of any recorded op to a nondifferentiable point."""
    margin = math.inf
    for entry in graph._entries:
        if entry is not None and entry.margin_fn is not None:
            margin = min(margin, entry.margin_fn())
    return margin


def backward(graph: TraceGraph, loss_id: int) -> dict[int, Tensor]:
    """Gradient of the scalar at `loss_id` w.r.t. every leaf."""
    loss = graph.value(loss_id)
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"loss must be scalar (1,1,1,1), got {loss.shape}")
    grads: dict[int, np.ndarray] = {
        loss_id: np.ones((1, 1, 1, 1), dtype=loss.array.dtype)
    }
    for entry in reversed(graph._entries):
        if entry is None or entry.output not in grads:
            continue
        gout = grads.pop(entry.output)
        gins = entry.bwd(gout)
        for nid, g in zip(entry.inputs, gins):
            if g is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + g
            else:
                grads[nid] = g
    out = {}
    for nid in graph.leaves:
        if nid in grads:
            out[nid] = Tensor(grads[nid])
        else:
            v = graph.value(nid)
            out[nid] = Tensor(np.zeros(v.shape, dtype=v.array.dtype))
    return out


# --- independent oracle ------------------------------------------------------


def finite_diff_grad(f, x: Tensor, h: float = 1e-6) -> Tensor:
    """Central differences (f(x+h*e_i) - f(x-h*e_i)) / 2h, elementwise."""
    base = x.array.astype(np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    work = base.copy()
    wflat = work.reshape(-1)
    for i in range(wflat.size):
        orig = wflat[i]
        wflat[i] = orig + h
        fp = f(Tensor(work.copy()))
        wflat[i] = orig - h
        fm = f(Tensor(work.copy()))
        wflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


@dataclass
class GradientRow:
    op: str
    tensor: str
    max_rel_err: float
    passed: bool


@dataclass
class GradientReport:
    tol: float
    rows: list[GradientRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_csv(self) -> str:
        lines = ["op,tensor,max_rel_err,pass"]
        for r in self.rows:
            lines.append(f"{r.op},{r.tensor},{r.max_rel_err!r},{str(r.passed).lower()}")
        return "\n".join(lines) + "\n"


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# Nonzero gradient elements below this magnitude sit at the rounding floor of
# central differences at h=1e-6 for O(1) losses: the numeric side cannot
# resolve them to 1e-4 relative error no matter how exact the analytic side
# is. Instances drawing such elements are resampled, like instances too close
# to a kink. Exact zeros are fine: both routes then produce exactly zero.
FRAGILE_GRAD_BAND = 5e-6


def _has_fragile_grads(grads: dict[int, Tensor]) -> bool:
    for t in grads.values():
        a = np.abs(t.array)
        if bool(((a > 0) & (a < FRAGILE_GRAD_BAND)).any()):
            return True
    return False


def grad_check(op_name: str, build, tol: float, seeds: int = 5,
               h: float = 1e-6, margin: float = KINK_MARGIN,
               max_resample: int = 50) -> GradientReport:
    """Compare analytic and finite-difference gradients over several seeds.

    `build(rng)` returns (leaves, forward) where leaves maps tensor names to
    f64 Tensors and forward(graph, ids) returns the scalar loss node. Inputs
    whose trace sits closer than `margin` to a |.| or relu kink, or whose
    gradient has elements inside FRAGILE_GRAD_BAND, are resampled so the
    central differences stay valid; `margin` must stay well above `h`.
    """
    report = GradientReport(tol=tol)
    worst: dict[str, float] = {}
    for s in range(seeds):
        attempt = 0
        while True:
            rng = np.random.default_rng(10_000 * s + attempt)
            leaves, forward = build(rng)
            g = TraceGraph()
            ids = {name: g.leaf(t) for name, t in leaves.items()}
            loss_id = forward(g, ids)
            if kink_margin(g) >= margin:
                grads = backward(g, loss_id)
                if not _has_fragile_grads(grads):
                    break
            attempt += 1
            if attempt > max_resample:
                raise RuntimeError(f"{op_name}: could not sample a well-conditioned instance")
        for name, t in leaves.items():
            def f(x, _name=name):
                l2, fwd2 = leaves.copy(), forward
                l2[_name] = x
                g2 = TraceGraph()
                ids2 = {nm: g2.leaf(tt) for nm, tt in l2.items()}
                return g2.value(fwd2(g2, ids2)).item()

            numeric = finite_diff_grad(f, t, h=h)
            err = _max_rel_err(grads[ids[name]].array, numeric.array)
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        report.rows.append(GradientRow(op_name, name, err, err < tol))
    return report
