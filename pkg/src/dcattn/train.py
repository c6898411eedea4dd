"""Loss, SGD with momentum, poly schedule, segmentation metrics, and the trainer.

The recipe: SGD with momentum 0.9 and weight decay 1e-4, base learning rate
0.008 decayed per iteration by the "poly" policy base_lr * (1 - it/max_it)^0.9.
Metrics are pixel accuracy and mean IoU pooled over the held-out split (the
last 20% of the dataset, fixed by index and never shuffled into training).
Weight decay applies to all weights uniformly. Everything is deterministic
given (seed, config): shuffles come from a dedicated generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import TraceGraph, backward
from .data import SceneSample
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .network import ToyNetParams, model_nodes
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.008
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 8
    batch_size: int = 8
    seed: int = 0
    variant: str = "full"
    # the bias-free multiplicative attention occasionally spikes gradients at
    # this scale (no batch norm anywhere); clipping the global gradient norm
    # before the momentum update keeps every variant finite. 0 disables.
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    pixel_acc: float
    miou: float
    per_class_iou: list[float] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    """Loss or parameters left the finite range during training."""


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - iteration/max_iter) ** power."""
    if max_iter < 1:
        raise ContractError(f"max_iter must be >= 1, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor],
             velocity: dict[str, np.ndarray] | None, lr: float,
             momentum: float, weight_decay: float):
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    if velocity is None:
        velocity = {}
    new_params: dict[str, Tensor] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        pa = p.array
        v = velocity.get(name)
        if v is None:
            v = np.zeros(pa.shape, dtype=pa.dtype)
        wd = np.asarray(weight_decay, dtype=pa.dtype)
        mom = np.asarray(momentum, dtype=pa.dtype)
        v = mom * v + (g.array + wd * pa)
        new_velocity[name] = v
        new_params[name] = Tensor(pa - np.asarray(lr, dtype=pa.dtype) * v)
    return new_params, new_velocity


def clip_gradients(grads: dict[str, Tensor], max_norm: float) -> dict[str, Tensor]:
    """Scale all gradients down so their joint L2 norm is at most max_norm."""
    if max_norm <= 0:
        return grads
    total = 0.0
    for g in grads.values():
        a = g.array.astype(np.float64)
        total += float((a * a).sum())
    norm = math.sqrt(total)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {name: Tensor(g.array * np.asarray(factor, dtype=g.array.dtype))
            for name, g in grads.items()}


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean over pixels of -log softmax(logits)[label], plus its gradient."""
    g = TraceGraph()
    lid = g.leaf(logits)
    loss_id = g.cross_entropy(lid, labels)
    grads = backward(g, loss_id)
    return g.value(loss_id).item(), grads[lid]


# --- metrics -----------------------------------------------------------------


def confusion_matrix(pred: np.ndarray, true: np.ndarray, classes: int) -> np.ndarray:
    """(classes, classes) counts with rows = true label, cols = predicted."""
    if pred.shape != true.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if pred.min() < 0 or true.min() < 0 or pred.max() >= classes or true.max() >= classes:
        raise ContractError(f"labels outside [0, {classes})")
    idx = true.reshape(-1).astype(np.int64) * classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=classes * classes).reshape(classes, classes)


def pixel_accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    """Fraction of pixels whose predicted label equals ground truth."""
    if pred.shape != true.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return float(np.mean(pred == true))


def _iou_from_confusion(cm: np.ndarray) -> tuple[float, list[float]]:
    classes = cm.shape[0]
    per_class = []
    present = []
    for c in range(classes):
        tp = cm[c, c]
        union = cm[c, :].sum() + cm[:, c].sum() - tp
        if union == 0:
            per_class.append(math.nan)  # absent from both pred and true
        else:
            iou = float(tp / union)
            per_class.append(iou)
            present.append(iou)
    return float(np.mean(present)), per_class


def mean_iou(pred: np.ndarray, true: np.ndarray, classes: int) -> tuple[float, list[float]]:
    """Mean over classes of intersection over union.

    Classes absent from both pred and true are excluded from the mean and
    reported as NaN in the per-class list.
    """
    return _iou_from_confusion(confusion_matrix(pred, true, classes))


# --- batched forward helpers ----------------------------------------------


def _stack_batch(samples: list[SceneSample]):
    rgb = Tensor(np.concatenate([s.rgb.array for s in samples], axis=0))
    depth = Tensor(np.concatenate([s.depth.array for s in samples], axis=0))
    labels = np.stack([s.labels for s in samples], axis=0)
    return rgb, depth, labels


def _forward_graph(params: dict[str, Tensor], net_params: ToyNetParams,
                   rgb: Tensor, depth: Tensor, variant: str):
    g = TraceGraph()
    ids = {name: g.leaf(t) for name, t in params.items()}
    logits, _ = model_nodes(g, g.leaf(rgb), g.leaf(depth), ids,
                            net_params.config, variant)
    return g, ids, logits


def evaluate(net_params: ToyNetParams, samples: list[SceneSample],
             variant: str | None = None, batch_size: int = 25):
    """Pooled pixel accuracy and mean IoU over a sample list."""
    if not samples:
        raise ContractError("cannot evaluate on an empty sample list")
    variant = net_params.config.variant if variant is None else variant
    classes = net_params.config.classes
    cm = np.zeros((classes, classes), dtype=np.int64)
    for i in range(0, len(samples), batch_size):
        rgb, depth, labels = _stack_batch(samples[i:i + batch_size])
        g, _, logits = _forward_graph(net_params.tensors, net_params, rgb, depth, variant)
        pred = np.argmax(g.value(logits).array, axis=1)
        cm += confusion_matrix(pred, labels, classes)
    acc = float(cm.trace() / cm.sum())
    miou, per_class = _iou_from_confusion(cm)
    return acc, miou, per_class


def split_dataset(samples: list[SceneSample]):
    """Train/eval split: the last 20% (at least one sample) is held out."""
    if len(samples) < 2:
        raise ContractError("need at least 2 samples to split train/eval")
    n_eval = max(1, len(samples) // 5)
    return samples[:-n_eval], samples[-n_eval:]


def train(net_params: ToyNetParams, dataset: list[SceneSample],
          cfg: TrainConfig) -> tuple[list[MetricsRecord], ToyNetParams]:
    """Train on the first 80% of `dataset`, evaluating on the held-out tail.

    Deterministic given (net_params, dataset, cfg): the per-epoch shuffle comes
    from a dedicated generator seeded with cfg.seed. Raises TrainingDiverged
    if any value leaves the finite range.
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    net_params = net_params.with_variant(cfg.variant)
    if cfg.epochs == 0:
        return [], net_params

    train_set, eval_set = split_dataset(dataset)
    shuffle_rng = np.random.default_rng(cfg.seed)
    params = dict(net_params.tensors)
    velocity: dict[str, np.ndarray] | None = None
    n_train = len(train_set)
    batches_per_epoch = (n_train + cfg.batch_size - 1) // cfg.batch_size
    max_iter = cfg.epochs * batches_per_epoch
    history: list[MetricsRecord] = []
    it = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        try:
            for b in range(batches_per_epoch):
                sel = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = [train_set[int(i)] for i in sel]
                rgb, depth, labels = _stack_batch(batch)
                g, ids, logits = _forward_graph(params, net_params, rgb, depth,
                                                cfg.variant)
                loss_id = g.cross_entropy(logits, labels)
                loss_sum += g.value(loss_id).item() * len(batch)
                grads_by_id = backward(g, loss_id)
                grads = {name: grads_by_id[nid] for name, nid in ids.items()
                         if name in params}
                grads = clip_gradients(grads, cfg.clip_norm)
                lr = poly_lr(it, max_iter, cfg.base_lr, cfg.poly_power)
                params, velocity = sgd_step(params, grads, velocity, lr,
                                            cfg.momentum, cfg.weight_decay)
                it += 1
        except NonFiniteError as e:
            raise TrainingDiverged(
                f"non-finite value at epoch {epoch}, iteration {it}: {e}") from e
        net_now = net_params.with_tensors(params)
        acc, miou, per_class = evaluate(net_now, eval_set, cfg.variant)
        history.append(MetricsRecord(epoch=epoch, loss=loss_sum / n_train,
                                     pixel_acc=acc, miou=miou,
                                     per_class_iou=per_class))
    return history, net_params.with_tensors(params)


def history_to_csv(history: list[MetricsRecord], classes: int) -> str:
    """Fixed-column CSV; floats use repr so runs compare byte for byte."""
    cols = ["epoch", "loss", "pixel_acc", "miou"] + [f"iou_{c}" for c in range(classes)]
    lines = [",".join(cols)]
    for rec in history:
        vals = [str(rec.epoch), repr(rec.loss), repr(rec.pixel_acc), repr(rec.miou)]
        vals += [repr(v) for v in rec.per_class_iou]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
