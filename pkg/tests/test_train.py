import math

import numpy as np
import pytest

from dcattn.data import GenConfig, generate_dataset
from dcattn.errors import ConfigError, ContractError, ShapeError
from dcattn.network import ToyNetConfig, model_init
from dcattn.tensor import Tensor, tensor_filled
from dcattn.train import (MetricsRecord, TrainConfig, TrainingDiverged,
                          clip_gradients, confusion_matrix, cross_entropy_loss,
                          history_to_csv, mean_iou, pixel_accuracy, poly_lr,
                          sgd_step, train)


class TestPolyLr:
    def test_start_is_base(self):
        assert poly_lr(0, 100, 0.008, 0.9) == 0.008

    def test_end_is_zero(self):
        assert poly_lr(100, 100, 0.008, 0.9) == 0.0

    def test_midpoint_value(self):
        assert poly_lr(50, 100, 0.008, 0.9) == pytest.approx(0.008 * 0.5 ** 0.9,
                                                             abs=1e-12)
        assert poly_lr(50, 100, 0.008, 0.9) == pytest.approx(0.004287, abs=1e-6)

    def test_strictly_decreasing(self):
        vals = [poly_lr(i, 50, 0.01, 0.9) for i in range(51)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            poly_lr(101, 100, 0.008, 0.9)
        with pytest.raises(ContractError):
            poly_lr(-1, 100, 0.008, 0.9)


class TestSgdStep:
    def _single(self, value, grad):
        return ({"w": tensor_filled((1, 1, 1, 1), value)},
                {"w": tensor_filled((1, 1, 1, 1), grad)})

    def test_plain_gradient_descent(self):
        params, grads = self._single(1.0, 0.5)
        new, _ = sgd_step(params, grads, None, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert new["w"].item() == pytest.approx(0.95, abs=1e-15)

    def test_zero_grad_fixed_point(self):
        params, grads = self._single(1.23, 0.0)
        new, vel = sgd_step(params, grads, None, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert new["w"].item() == 1.23
        assert np.all(vel["w"] == 0.0)

    def test_two_step_momentum_unroll(self):
        # constant gradient g: after two steps displacement is lr*g*(1 + 1.9)
        g = 0.3
        lr = 0.01
        params, grads = self._single(2.0, g)
        p1, v1 = sgd_step(params, grads, None, lr, momentum=0.9, weight_decay=0.0)
        p2, _ = sgd_step(p1, grads, v1, lr, momentum=0.9, weight_decay=0.0)
        expect = 2.0 - lr * g * (1.0 + 1.9)
        assert abs(p2["w"].item() - expect) < 1e-12

    def test_weight_decay_enters_velocity(self):
        params, grads = self._single(2.0, 0.0)
        new, _ = sgd_step(params, grads, None, lr=0.1, momentum=0.0, weight_decay=0.5)
        assert new["w"].item() == pytest.approx(2.0 - 0.1 * (0.5 * 2.0), abs=1e-12)

    def test_shape_mismatch(self):
        params = {"w": tensor_filled((1, 1, 1, 2), 1.0)}
        grads = {"w": tensor_filled((1, 1, 1, 3), 1.0)}
        with pytest.raises(ShapeError):
            sgd_step(params, grads, None, 0.1, 0.9, 0.0)


class TestClipGradients:
    def test_below_threshold_untouched(self):
        grads = {"a": tensor_filled((1, 1, 1, 1), 3.0)}
        out = clip_gradients(grads, 5.0)
        assert out["a"] is grads["a"]

    def test_scales_to_threshold(self):
        grads = {"a": tensor_filled((1, 1, 1, 2), 3.0),
                 "b": tensor_filled((1, 1, 1, 2), 4.0)}
        out = clip_gradients(grads, 1.0)
        total = sum(float((t.array.astype(np.float64) ** 2).sum()) for t in out.values())
        assert math.sqrt(total) == pytest.approx(1.0, rel=1e-6)

    def test_zero_disables(self):
        grads = {"a": tensor_filled((1, 1, 1, 1), 100.0)}
        assert clip_gradients(grads, 0.0)["a"] is grads["a"]


class TestCrossEntropy:
    def test_uniform_logits_log_classes(self):
        logits = tensor_filled((1, 5, 2, 2), 0.3, "f64")
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        loss, _ = cross_entropy_loss(logits, labels)
        assert loss == pytest.approx(math.log(5), abs=1e-12)

    def test_confident_correct_low_loss(self):
        logits = np.zeros((1, 3, 1, 1))
        logits[0, 1, 0, 0] = 50.0
        loss, _ = cross_entropy_loss(Tensor(logits), np.full((1, 1, 1), 1))
        assert loss < 1e-12

    def test_gradient_matches_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((2, 4, 3, 3))
        labels = rng.integers(0, 4, size=(2, 3, 3))
        _, grad = cross_entropy_loss(Tensor(logits), labels)
        z = logits - logits.max(axis=1, keepdims=True)
        sm = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(sm)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        assert np.allclose(grad.array, (sm - onehot) / 18, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((1, 3, 2, 2)))
        labels = rng.integers(0, 3, size=(1, 2, 2))
        _, grad = cross_entropy_loss(logits, labels)
        from dcattn.autodiff import finite_diff_grad
        numeric = finite_diff_grad(
            lambda t: cross_entropy_loss(t, labels)[0], logits)
        assert np.abs(grad.array - numeric.array).max() < 1e-6

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            cross_entropy_loss(tensor_filled((1, 3, 1, 1), 0.0), np.full((1, 1, 1), 3))


class TestMetrics:
    def test_identical_grids(self):
        lab = np.array([[0, 1], [2, 1]])
        assert pixel_accuracy(lab, lab) == 1.0
        miou, per = mean_iou(lab, lab, 3)
        assert miou == 1.0

    def test_complementary_binary(self):
        a = np.array([[0, 0], [0, 0]])
        b = np.array([[1, 1], [1, 1]])
        assert pixel_accuracy(a, b) == 0.0

    def test_three_of_four(self):
        pred = np.array([[0, 1], [1, 1]])
        true = np.array([[0, 1], [1, 0]])
        assert pixel_accuracy(pred, true) == 0.75

    def test_half_grid_example(self):
        # pred all class 0, true half 0 half 1: IoU0=0.5, IoU1=0, mIoU=0.25
        pred = np.zeros((2, 4), dtype=np.int64)
        true = np.zeros((2, 4), dtype=np.int64)
        true[:, 2:] = 1
        miou, per = mean_iou(pred, true, 2)
        assert per[0] == pytest.approx(0.5)
        assert per[1] == 0.0
        assert miou == pytest.approx(0.25)

    def test_absent_class_excluded(self):
        pred = np.zeros((2, 2), dtype=np.int64)
        true = np.zeros((2, 2), dtype=np.int64)
        miou, per = mean_iou(pred, true, 3)
        assert miou == 1.0
        assert math.isnan(per[1]) and math.isnan(per[2])

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 3, size=(6, 6))
        true = rng.integers(0, 3, size=(6, 6))
        m1, _ = mean_iou(pred, true, 3)
        remap = np.array([2, 0, 1])
        m2, _ = mean_iou(remap[pred], remap[true], 3)
        assert m1 == pytest.approx(m2, abs=1e-12)
        assert pixel_accuracy(pred, true) == pixel_accuracy(remap[pred], remap[true])

    def test_against_bruteforce_confusion(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            classes = int(rng.integers(2, 5))
            pred = rng.integers(0, classes, size=(8, 8))
            true = rng.integers(0, classes, size=(8, 8))
            cm = np.zeros((classes, classes), dtype=np.int64)
            for t in range(classes):
                for p in range(classes):
                    cm[t, p] = int(((true == t) & (pred == p)).sum())
            assert np.array_equal(confusion_matrix(pred, true, classes), cm)
            ious = []
            for c in range(classes):
                inter = cm[c, c]
                union = cm[c, :].sum() + cm[:, c].sum() - inter
                if union:
                    ious.append(inter / union)
            got, _ = mean_iou(pred, true, classes)
            assert got == pytest.approx(float(np.mean(ious)), abs=1e-12)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(GenConfig(height=16, width=16, seed=99,
                                      min_shapes=2, max_shapes=3), 20)


def tiny_net(seed=0, variant="full"):
    return model_init(ToyNetConfig(stages=2, base_channels=8, classes=5,
                                   variant=variant, seed=seed))


class TestTrain:
    def test_zero_epochs_noop(self, tiny_dataset):
        net = tiny_net()
        history, out = train(net, tiny_dataset, TrainConfig(epochs=0))
        assert history == []
        for name in net.tensors:
            assert np.array_equal(out.tensors[name].array, net.tensors[name].array)

    def test_zero_lr_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=0.0)

    def test_training_reduces_loss(self, tiny_dataset):
        net = tiny_net()
        cfg = TrainConfig(epochs=3, batch_size=4, seed=0)
        history, _ = train(net, tiny_dataset, cfg)
        assert len(history) == 3
        assert history[-1].loss < history[0].loss

    def test_bit_reproducible(self, tiny_dataset):
        cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
        h1, p1 = train(tiny_net(5), tiny_dataset, cfg)
        h2, p2 = train(tiny_net(5), tiny_dataset, cfg)
        assert [r.loss for r in h1] == [r.loss for r in h2]
        assert [r.miou for r in h1] == [r.miou for r in h2]
        for name in p1.tensors:
            assert np.array_equal(p1.tensors[name].array, p2.tensors[name].array)

    def test_divergence_detected(self, tiny_dataset):
        cfg = TrainConfig(epochs=1, batch_size=4, base_lr=1e6, clip_norm=0.0)
        with pytest.raises(TrainingDiverged):
            train(tiny_net(), tiny_dataset, cfg)

    def test_history_csv_layout(self):
        rec = MetricsRecord(epoch=0, loss=1.5, pixel_acc=0.5, miou=0.25,
                            per_class_iou=[0.5, float("nan")])
        csv = history_to_csv([rec], classes=2)
        lines = csv.strip().splitlines()
        assert lines[0] == "epoch,loss,pixel_acc,miou,iou_0,iou_1"
        assert lines[1].startswith("0,1.5,0.5,0.25,0.5,nan")

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            train(tiny_net(), [], TrainConfig(epochs=1))
