import numpy as np
import pytest

from dcattn import attention
from dcattn.attention import (DCA_SPEC, EDCA_DW_SPEC, EDCA_DWD_SPEC, DCAParams,
                              EDCAParams, FusionParams, attention_to_gray,
                              dca_forward, edca_forward, fusion_forward,
                              init_dca_params, init_edca_params,
                              init_fusion_params, variant_forward, write_pgm)
from dcattn.autodiff import TraceGraph, backward
from dcattn.convops import diff_conv2d_depthwise, pointwise_conv
from dcattn.errors import ConfigError, ShapeError
from dcattn.tensor import Tensor, allclose, mul, tensor_filled


def rand_t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def delta_depthwise(c, k):
    w = np.zeros((c, 1, k, k))
    w[:, 0, k // 2, k // 2] = 1.0
    return Tensor(w)


def identity_pw(c):
    return Tensor(np.eye(c).reshape(c, c, 1, 1))


class TestDCA:
    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(0)
        p = init_dca_params(4, rng, dtype="f64")
        attn, out = dca_forward(tensor_filled((1, 4, 8, 8), 0.0), p)
        assert np.all(attn.array == 0.0)
        assert np.all(out.array == 0.0)

    def test_identity_composition(self):
        rng = np.random.default_rng(1)
        f = rand_t(rng, 1, 3, 6, 6)
        p = DCAParams(dw=delta_depthwise(3, 9), pw=identity_pw(3))
        attn, out = dca_forward(f, p)
        assert np.array_equal(attn.array, f.array)
        assert np.array_equal(out.array, (f.array * f.array))

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(2)
        f = rand_t(rng, 1, 8, 16, 16)
        p = init_dca_params(8, rng, dtype="f64")
        attn, out = dca_forward(f, p)
        expect_attn = pointwise_conv(diff_conv2d_depthwise(f, p.dw, DCA_SPEC), p.pw)
        ok, err = allclose(attn, expect_attn, atol=1e-12)
        assert ok, err
        ok, err = allclose(out, mul(expect_attn, f), atol=1e-12)
        assert ok, err

    def test_attention_shape_matches_input(self):
        rng = np.random.default_rng(3)
        for shape in [(1, 8, 5, 7), (2, 16, 12, 4), (3, 8, 9, 9)]:
            p = init_dca_params(shape[1], rng, dtype="f64")
            f = rand_t(rng, *shape)
            attn, out = dca_forward(f, p)
            assert attn.shape == f.shape
            assert out.shape == f.shape
            assert np.array_equal(out.array, attn.array * f.array)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(4)
        p = init_dca_params(4, rng)
        with pytest.raises(ShapeError):
            dca_forward(tensor_filled((1, 3, 8, 8), 1.0, "f32"), p)

    def test_param_shape_validation(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ConfigError):
            DCAParams(dw=rand_t(rng, 4, 1, 7, 7), pw=rand_t(rng, 4, 4, 1, 1))


class TestEDCA:
    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(6)
        p = init_edca_params(4, rng, dtype="f64")
        attn, out = edca_forward(tensor_filled((1, 4, 12, 12), 0.0), p)
        assert np.all(attn.array == 0.0)
        assert np.all(out.array == 0.0)

    def test_zero_dilated_branch_reduces_to_5x5_path(self):
        rng = np.random.default_rng(7)
        f = rand_t(rng, 1, 4, 10, 10)
        p = EDCAParams(dw=rand_t(rng, 4, 1, 5, 5),
                       dwd=Tensor(np.zeros((4, 1, 9, 9))),
                       pw=rand_t(rng, 4, 4, 1, 1))
        attn, out = edca_forward(f, p)
        f1 = diff_conv2d_depthwise(f, p.dw, EDCA_DW_SPEC)
        ok, err = allclose(attn, pointwise_conv(f1, p.pw), atol=1e-12)
        assert ok, err

    def test_matches_step_by_step_oracle(self):
        rng = np.random.default_rng(8)
        f = rand_t(rng, 1, 8, 32, 32)
        p = init_edca_params(8, rng, dtype="f64")
        attn, out = edca_forward(f, p)
        f1 = diff_conv2d_depthwise(f, p.dw, EDCA_DW_SPEC)
        f2 = diff_conv2d_depthwise(f1, p.dwd, EDCA_DWD_SPEC)
        expect_attn = pointwise_conv(Tensor(f1.array + f2.array), p.pw)
        ok, err = allclose(attn, expect_attn, atol=1e-12)
        assert ok, err
        ok, err = allclose(out, mul(expect_attn, f), atol=1e-12)
        assert ok, err

    def test_dilated_branch_consumes_f1_not_f(self):
        rng = np.random.default_rng(9)
        f = rand_t(rng, 1, 2, 16, 16)
        p = init_edca_params(2, rng, dtype="f64")
        attn, _ = edca_forward(f, p)
        f1 = diff_conv2d_depthwise(f, p.dw, EDCA_DW_SPEC)
        wrong_f2 = diff_conv2d_depthwise(f, p.dwd, EDCA_DWD_SPEC)
        wrong = pointwise_conv(Tensor(f1.array + wrong_f2.array), p.pw)
        assert not np.allclose(attn.array, wrong.array)


class TestGradientFootprints:
    @staticmethod
    def _attention_input_gradient(block: str, size: int):
        rng = np.random.default_rng(10)
        g = TraceGraph()
        f = g.leaf(Tensor(rng.standard_normal((1, 1, size, size))))
        if block == "dca":
            dw = g.leaf(Tensor(rng.standard_normal((1, 1, 9, 9))))
            pw = g.leaf(Tensor(rng.standard_normal((1, 1, 1, 1))))
            attn, _ = attention.dca_nodes(g, f, dw, pw)
        else:
            dw = g.leaf(Tensor(rng.standard_normal((1, 1, 5, 5))))
            dwd = g.leaf(Tensor(rng.standard_normal((1, 1, 9, 9))))
            pw = g.leaf(Tensor(rng.standard_normal((1, 1, 1, 1))))
            attn, _ = attention.edca_nodes(g, f, dw, dwd, pw)
        # pick one interior pixel of the attention map
        center = size // 2
        pick = np.zeros((1, 1, size, size))
        pick[0, 0, center, center] = 1.0
        loss = g.sum(g.mul(attn, g.leaf(Tensor(pick))))
        return backward(g, loss)[f].array[0, 0], center

    def test_dca_gradient_inside_9x9(self):
        gx, c = self._attention_input_gradient("dca", 41)
        nz = np.nonzero(gx)
        assert nz[0].min() >= c - 4 and nz[0].max() <= c + 4
        assert nz[1].min() >= c - 4 and nz[1].max() <= c + 4
        # the window corners are reached
        assert gx[c - 4, c - 4] != 0 and gx[c + 4, c + 4] != 0

    def test_edca_gradient_inside_29x29(self):
        gx, c = self._attention_input_gradient("edca", 65)
        nz = np.nonzero(gx)
        assert nz[0].min() >= c - 14 and nz[0].max() <= c + 14
        assert nz[1].min() >= c - 14 and nz[1].max() <= c + 14
        assert gx[c - 14, c - 14] != 0 and gx[c + 14, c + 14] != 0


class TestFusion:
    def test_zero_depth_passthrough(self):
        rng = np.random.default_rng(11)
        p = init_fusion_params(16, rng, dtype="f64")
        rgb = rand_t(rng, 1, 16, 8, 8)
        depth = tensor_filled((1, 16, 8, 8), 0.0)
        rgb_out, depth_out = fusion_forward(rgb, depth, p)
        assert np.all(depth_out.array == 0.0)
        rgb_mid, _ = variant_forward(rgb, depth, "edca_only", p)
        assert np.array_equal(rgb_out.array, rgb_mid.array)

    def test_zero_weights_keep_residuals_only(self):
        rgb = Tensor(np.random.default_rng(12).standard_normal((1, 16, 8, 8)))
        depth = Tensor(np.random.default_rng(13).standard_normal((1, 16, 8, 8)))
        zero = lambda *s: Tensor(np.zeros(s))
        p = FusionParams(
            w1=zero(2, 16, 1, 1), w2=zero(16, 2, 1, 1),
            w1p=zero(2, 16, 1, 1), w2p=zero(16, 2, 1, 1),
            dca=DCAParams(dw=zero(2, 1, 9, 9), pw=zero(2, 2, 1, 1)),
            edca=EDCAParams(dw=zero(2, 1, 5, 5), dwd=zero(2, 1, 9, 9),
                            pw=zero(2, 2, 1, 1)))
        rgb_out, depth_out = fusion_forward(rgb, depth, p)
        assert np.array_equal(depth_out.array, depth.array)
        assert np.array_equal(rgb_out.array, rgb.array + depth.array)

    def test_matches_hand_composed_oracle(self):
        rng = np.random.default_rng(14)
        p = init_fusion_params(16, rng, dtype="f64")
        rgb = rand_t(rng, 1, 16, 8, 8)
        depth = rand_t(rng, 1, 16, 8, 8)
        rgb_out, depth_out = fusion_forward(rgb, depth, p)

        d_sq = pointwise_conv(depth, p.w1)
        _, d_att = dca_forward(d_sq, p.dca)
        d_expect = Tensor(pointwise_conv(d_att, p.w2).array + depth.array)
        ok, err = allclose(depth_out, d_expect, atol=1e-12)
        assert ok, err

        r_sq = pointwise_conv(rgb, p.w1p)
        _, r_att = edca_forward(r_sq, p.edca)
        r_expect = pointwise_conv(r_att, p.w2p).array + rgb.array + d_expect.array
        ok, err = allclose(rgb_out, Tensor(r_expect), atol=1e-12)
        assert ok, err

    def test_channel_divisibility_enforced(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ConfigError):
            init_fusion_params(12, rng)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(16)
        p = init_fusion_params(8, rng, dtype="f64")
        with pytest.raises(ShapeError):
            fusion_forward(rand_t(rng, 1, 8, 8, 8), rand_t(rng, 1, 8, 4, 4), p)


class TestVariants:
    def test_baseline_wiring(self):
        rng = np.random.default_rng(17)
        rgb, depth = rand_t(rng, 1, 8, 4, 4), rand_t(rng, 1, 8, 4, 4)
        rgb_out, depth_out = variant_forward(rgb, depth, "baseline", None)
        assert np.array_equal(rgb_out.array, rgb.array + depth.array)
        assert np.array_equal(depth_out.array, depth.array)

    def test_full_delegates_bit_exactly(self):
        rng = np.random.default_rng(18)
        p = init_fusion_params(8, rng, dtype="f64")
        rgb, depth = rand_t(rng, 1, 8, 8, 8), rand_t(rng, 1, 8, 8, 8)
        v = variant_forward(rgb, depth, "full", p)
        f = fusion_forward(rgb, depth, p)
        assert np.array_equal(v[0].array, f[0].array)
        assert np.array_equal(v[1].array, f[1].array)

    def test_swapped_differs_from_full(self):
        rng = np.random.default_rng(19)
        p = init_fusion_params(8, rng, dtype="f64")
        rgb, depth = rand_t(rng, 1, 8, 8, 8), rand_t(rng, 1, 8, 8, 8)
        full = variant_forward(rgb, depth, "full", p)
        swapped = variant_forward(rgb, depth, "swapped", p)
        assert not np.allclose(full[0].array, swapped[0].array)

    def test_dca_only_leaves_rgb_branch_alone(self):
        rng = np.random.default_rng(20)
        p = init_fusion_params(8, rng, dtype="f64")
        rgb, depth = rand_t(rng, 1, 8, 8, 8), rand_t(rng, 1, 8, 8, 8)
        rgb_out, depth_out = variant_forward(rgb, depth, "dca_only", p)
        _, depth_full = fusion_forward(rgb, depth, p)
        assert np.array_equal(depth_out.array, depth_full.array)
        assert np.array_equal(rgb_out.array, rgb.array + depth_out.array)

    def test_missing_params_rejected(self):
        rng = np.random.default_rng(21)
        rgb, depth = rand_t(rng, 1, 8, 4, 4), rand_t(rng, 1, 8, 4, 4)
        for variant in ("dca_only", "edca_only", "full", "swapped"):
            with pytest.raises(ConfigError):
                variant_forward(rgb, depth, variant, None)

    def test_unknown_variant_rejected(self):
        rng = np.random.default_rng(22)
        with pytest.raises(ConfigError):
            variant_forward(rand_t(rng, 1, 8, 4, 4), rand_t(rng, 1, 8, 4, 4),
                            "extra", None)


class TestConstantFieldReduction:
    def test_interior_attention_equals_vanilla_on_constant_input(self):
        # on constant input the differential multipliers are 1 inside the
        # valid region, so DCA equals its vanilla counterpart away from borders
        rng = np.random.default_rng(23)
        c = 4
        p = init_dca_params(c, rng, dtype="f64")
        f = tensor_filled((1, c, 24, 24), 0.37)
        attn, _ = dca_forward(f, p)
        from dcattn.convops import ConvSpec, conv2d
        van = pointwise_conv(conv2d(f, p.dw, DCA_SPEC), p.pw)
        ok, err = allclose(Tensor(attn.array[:, :, 8:16, 8:16].copy()),
                           Tensor(van.array[:, :, 8:16, 8:16].copy()), atol=1e-12)
        assert ok, err


class TestPgmExport:
    def test_gray_scaling(self):
        a = np.zeros((1, 2, 2, 2), dtype=np.float32)
        a[0, 0] = [[0.0, 1.0], [0.5, 0.25]]
        a[0, 1] = [[0.0, 1.0], [0.5, 0.25]]
        gray = attention_to_gray(Tensor(a))
        assert gray.dtype == np.uint8
        assert gray[0, 0] == 0 and gray[0, 1] == 255

    def test_constant_map_mid_gray(self):
        gray = attention_to_gray(tensor_filled((1, 3, 4, 4), 2.5, "f32"))
        assert np.all(gray == 128)

    def test_pgm_bytes(self, tmp_path):
        gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
        path = tmp_path / "m.pgm"
        write_pgm(path, gray)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n3 2\n255\n")
        assert blob[-6:] == bytes(range(6))
