"""Synthetic RGB-D scenes where appearance is ambiguous but depth is not.

Each class maps to a fixed depth plane (background is class 0 at depth 1.0),
so pixels sharing a label share a depth up to small clamped noise. Appearance
is made ambiguous two ways, both resolvable from geometry:

  * the designated pair (1, 2) draws from one color distribution in a
    configurable fraction of scenes but sits on well-separated planes, so
    local depth continuity is the only reliable cue there;
  * with five or more classes the size pair (3, 4) shares a single plane and,
    under the same confusion probability, a color distribution; only shape
    extent separates it (small vs large), which takes context well beyond a
    9x9 window at the fusion resolutions.

The palette itself is compressed to slightly above the per-pixel noise, so
single pixels are class-ambiguous and spatial aggregation is required even
for unconfused classes. Scenes are axis-aligned rectangles and ellipses
placed back to front; nearer shapes overdraw farther ones (painter's
algorithm), and labels follow the visible surface.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError, GenerationError
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

_MAGIC = b"DCAD"
_HEAD = struct.Struct("<4sII")

RGB_NOISE_SIGMA = 0.05
# depth noise is clamped at 2.5 sigma so plane separation bounds hold surely
DEPTH_NOISE_CLAMP = 2.5
MIN_VISIBLE_PIXELS = 8
PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class GenConfig:
    height: int = 32
    width: int = 32
    classes: int = 5
    min_shapes: int = 4
    max_shapes: int = 7
    color_confusion: float = 0.5
    depth_noise: float = 0.02
    plane_sep: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"H and W must be divisible by 8, got {(self.height, self.width)}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ConfigError("need 1 <= min_shapes <= max_shapes")
        if not 0.0 <= self.color_confusion <= 1.0:
            raise ConfigError(f"color_confusion must be in [0,1], got {self.color_confusion}")
        if self.depth_noise < 0:
            raise ConfigError(f"depth_noise must be >= 0, got {self.depth_noise}")
        if self.plane_sep <= 0:
            raise ConfigError(f"plane_sep must be > 0, got {self.plane_sep}")
        gap = _min_plane_gap(self.classes)
        if gap < self.plane_sep:
            raise ConfigError(
                f"{self.classes} classes leave a plane gap of {gap:.3f} < "
                f"plane_sep {self.plane_sep}")
        if DEPTH_NOISE_CLAMP * self.depth_noise >= gap / 2:
            raise ConfigError("depth noise amplitude must stay below half the plane gap")


def class_planes(classes: int) -> np.ndarray:
    """Depth plane per class; index 0 is the background at 1.0.

    With five or more classes, the size pair (3, 4) sits on the background
    plane: those shapes are invisible in depth and are told apart by shape
    extent alone, which only long-range context over RGB can supply. All
    other classes own distinct foreground planes; the designated
    color-confusion pair (1, 2) in particular stays depth-separable.
    """
    if classes == 2:
        fg = np.array([0.5])
    elif classes < 5:
        fg = np.linspace(0.2, 0.8, classes - 1)
    else:
        distinct = np.linspace(0.2, 0.8, classes - 3)
        fg = np.concatenate([distinct[:2], [1.0, 1.0], distinct[2:]])
    return np.concatenate([[1.0], fg])


def _min_plane_gap(classes: int) -> float:
    planes = np.unique(class_planes(classes))
    return float(np.diff(planes).min())


def class_colors(classes: int) -> np.ndarray:
    """Mean RGB per class: gray background, hue-spread pastel foreground.

    The palette is deliberately compressed (pairwise distances a bit above
    the per-pixel noise) so single pixels are ambiguous and class colors only
    emerge from spatial aggregation; mean region color still separates every
    class when noise is off.
    """
    cols = [np.array([0.5, 0.5, 0.5])]
    for c in range(classes - 1):
        cols.append(np.array(colorsys.hsv_to_rgb(c / (classes - 1), 0.25, 0.6)))
    return np.stack(cols)


@dataclass(frozen=True)
class SceneSample:
    rgb: Tensor     # (1, 3, H, W) in [0, 1]
    depth: Tensor   # (1, 1, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) int64 in [0, classes)

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (1, 3, h, w) or self.depth.shape != (1, 1, h, w):
            raise ConfigError("rgb/depth/labels shapes inconsistent")


# half-extent ranges: the size pair is separable only by shape extent, which
# needs context wider than a 9x9 window at the first fusion resolution
SMALL_RADIUS = (3, 4)
LARGE_RADIUS = (8, 10)


def _radius_range(cls: int, classes: int, h: int, w: int) -> tuple[int, int]:
    side = min(h, w)
    cap = max(3, min(side // 4, (side - 1) // 2 - 1))
    if classes >= 5 and cls == 3:
        lo, hi = SMALL_RADIUS
    elif classes >= 5 and cls == 4:
        # may exceed the generic cap: the large extent must stay out of reach
        # of a 9x9 window at half resolution
        big_cap = max(3, (side - 1) // 2 - 1)
        return min(LARGE_RADIUS[0], big_cap), min(LARGE_RADIUS[1], big_cap)
    else:
        lo, hi = 3, cap
    return min(lo, cap), min(hi, cap)


# probability that a nearest-plane shape is anchored onto one of the other
# confusion-pair class's shapes, manufacturing internal boundaries that only
# depth can localize when the pair shares its color distribution
OVERLAP_BIAS = 0.8


def _shape_mask(rng: np.random.Generator, h: int, w: int,
                radii: tuple[int, int],
                anchor: tuple[int, int] | None = None) -> np.ndarray:
    """One fully in-bounds random rectangle or ellipse, optionally near anchor."""
    lo, hi = radii
    ry = int(rng.integers(lo, hi + 1))
    rx = int(rng.integers(lo, hi + 1))
    if anchor is None:
        cy = int(rng.integers(ry, h - ry))
        cx = int(rng.integers(rx, w - rx))
    else:
        cy = int(np.clip(anchor[0] + rng.integers(-3, 4), ry, h - ry - 1))
        cx = int(np.clip(anchor[1] + rng.integers(-3, 4), rx, w - rx - 1))
    kind = int(rng.integers(0, 2))
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_scene(cfg: GenConfig, seed: int) -> SceneSample:
    """One scene; a pure function of (cfg, seed)."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    planes = class_planes(cfg.classes)
    palette = class_colors(cfg.classes)
    # two independent confusion events: the designated pair (1, 2) and, when
    # present, the size pair (3, 4) each share a color distribution with the
    # configured probability
    confused_12 = cfg.classes >= 3 and rng.random() < cfg.color_confusion
    confused_34 = cfg.classes >= 5 and rng.random() < cfg.color_confusion

    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    # small size-pair shapes are drawn more often to balance total pixel area
    # against their large counterparts; otherwise the tiny class is starved
    weights = np.ones(cfg.classes - 1)
    if cfg.classes >= 5:
        weights[2] = 2.0
    shape_classes = rng.choice(np.arange(1, cfg.classes), size=count,
                               p=weights / weights.sum())
    # back to front: farthest plane first, nearer shapes occlude earlier ones
    order = np.argsort(-planes[shape_classes], kind="stable")

    placed_masks: list[np.ndarray] = []
    placed_classes: list[int] = []
    placed_centers: list[tuple[int, int]] = []
    for idx in order:
        cls = int(shape_classes[idx])
        radii = _radius_range(cls, cfg.classes, h, w)
        # class 1 (nearest plane) tends to land on class-2 shapes so the pair
        # meets along boundaries that share appearance but not depth
        partners = [ctr for ctr, c in zip(placed_centers, placed_classes) if c == 2]
        anchored = cls == 1 and partners and rng.random() < OVERLAP_BIAS
        for attempt in range(PLACEMENT_RETRIES + 1):
            if attempt == PLACEMENT_RETRIES:
                raise GenerationError(
                    f"could not place shape of class {cls} after {PLACEMENT_RETRIES} tries")
            anchor = partners[int(rng.integers(len(partners)))] if anchored else None
            mask = _shape_mask(rng, h, w, radii, anchor=anchor)
            if mask.sum() < MIN_VISIBLE_PIXELS:
                continue
            if all((vis & ~mask).sum() >= MIN_VISIBLE_PIXELS for vis in placed_masks):
                break
        placed_masks = [vis & ~mask for vis in placed_masks]
        placed_masks.append(mask)
        placed_classes.append(cls)
        ys, xs = np.nonzero(mask)
        placed_centers.append((int(ys.mean()), int(xs.mean())))

    labels = np.zeros((h, w), dtype=np.int64)
    depth = np.full((h, w), planes[0])
    rgb = np.broadcast_to(palette[0][:, None, None], (3, h, w)).copy()
    for mask, cls in zip(placed_masks, placed_classes):
        color_class = cls
        if confused_12 and cls == 2:
            color_class = 1
        elif confused_34 and cls == 4:
            color_class = 3
        color = palette[color_class] + rng.normal(0.0, 0.02, size=3)
        labels[mask] = cls
        depth[mask] = planes[cls]
        rgb[:, mask] = np.clip(color, 0.0, 1.0)[:, None]

    rgb = rgb + rng.normal(0.0, RGB_NOISE_SIGMA, size=rgb.shape)
    clamp = DEPTH_NOISE_CLAMP * cfg.depth_noise
    dnoise = np.clip(rng.normal(0.0, cfg.depth_noise, size=depth.shape), -clamp, clamp)
    depth = np.clip(depth + dnoise, 0.0, 1.0)
    rgb = np.clip(rgb, 0.0, 1.0)
    return SceneSample(
        rgb=Tensor(rgb[None].astype(np.float32)),
        depth=Tensor(depth[None, None].astype(np.float32)),
        labels=labels,
    )


def generate_dataset(cfg: GenConfig, count: int) -> list[SceneSample]:
    """Independently seeded samples: sample i uses seed cfg.seed + i."""
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    return [generate_scene(cfg, cfg.seed + i) for i in range(count)]


# --- dataset file format -----------------------------------------------------
#
# "DCAD", u32 version=1, u32 sample count, then per sample the rgb, depth and
# label tensors as DCAT records (labels stored as f32 integral values).


def save_dataset(samples: list[SceneSample], path) -> None:
    if not samples:
        raise ContractError("refusing to write an empty dataset")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, 1, len(samples)))
        for s in samples:
            fh.write(tensor_to_bytes(s.rgb))
            fh.write(tensor_to_bytes(s.depth))
            fh.write(tensor_to_bytes(Tensor(s.labels[None, None].astype(np.float32))))


def load_dataset(path) -> list[SceneSample]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEAD.size:
        raise FormatError(f"{path}: truncated dataset header")
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad dataset magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if count < 1:
        raise FormatError(f"{path}: empty dataset")
    samples = []
    offset = _HEAD.size
    for _ in range(count):
        rgb, used = tensor_from_bytes(buf, offset)
        offset += used
        depth, used = tensor_from_bytes(buf, offset)
        offset += used
        lab_t, used = tensor_from_bytes(buf, offset)
        offset += used
        lab = lab_t.array[0, 0]
        if not np.array_equal(lab, np.rint(lab)) or lab.min() < 0:
            raise FormatError(f"{path}: labels are not nonnegative integers")
        samples.append(SceneSample(rgb=rgb, depth=depth,
                                   labels=lab.astype(np.int64)))
    if offset != len(buf):
        raise FormatError(f"{path}: trailing bytes after last sample")
    return samples
