"""Image encoder tests: preprocessing, patch extraction, activations,
layer norm, and the end-to-end forward/backward pair.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microfusion import encoder, nn
from microfusion.errors import InvalidInputError, ShapeError
from microfusion.params import GradStore, make_rng, pack, pack_grads, unpack_into


class TestResizeBilinear:
    def test_identity_when_sizes_match(self):
        plane = np.arange(12.0).reshape(3, 4)
        out = encoder.resize_bilinear(plane, 3, 4)
        np.testing.assert_array_equal(out, plane)
        assert out is not plane

    def test_constant_plane_stays_constant(self):
        out = encoder.resize_bilinear(np.full((4, 4), 7.0), 9, 5)
        np.testing.assert_allclose(out, 7.0, atol=1e-12)

    def test_two_by_two_upscale_hand_values(self):
        plane = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = encoder.resize_bilinear(plane, 4, 4)
        # corner samples clamp to the source corners
        assert out[0, 0] == 0.0
        assert out[0, 3] == 1.0
        assert out[3, 0] == 2.0
        assert out[3, 3] == 3.0
        # pixel (1,1) samples source (0.25, 0.25):
        # 0.75*0.75*0 + 0.75*0.25*1 + 0.25*0.75*2 + 0.25*0.25*3 = 0.75
        assert abs(out[1, 1] - 0.75) < 1e-12

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(6)
        plane = rng.uniform(size=(5, 7))
        out_h, out_w = 3, 4
        got = encoder.resize_bilinear(plane, out_h, out_w)
        expected = np.empty((out_h, out_w))
        for i in range(out_h):
            for j in range(out_w):
                y = min(max((i + 0.5) * 5 / out_h - 0.5, 0.0), 4.0)
                x = min(max((j + 0.5) * 7 / out_w - 0.5, 0.0), 6.0)
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 4), min(x0 + 1, 6)
                wy, wx = y - y0, x - x0
                expected[i, j] = (plane[y0, x0] * (1 - wy) * (1 - wx)
                                  + plane[y0, x1] * (1 - wy) * wx
                                  + plane[y1, x0] * wy * (1 - wx)
                                  + plane[y1, x1] * wy * wx)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_output_bounded_by_input_range(self, in_h, in_w, out_h, out_w, seed):
        plane = np.random.default_rng(seed).uniform(-5, 5, size=(in_h, in_w))
        out = encoder.resize_bilinear(plane, out_h, out_w)
        assert out.min() >= plane.min() - 1e-9
        assert out.max() <= plane.max() + 1e-9

    def test_rejects_empty_and_bad_target(self):
        with pytest.raises(InvalidInputError):
            encoder.resize_bilinear(np.zeros((0, 3)), 2, 2)
        with pytest.raises(InvalidInputError):
            encoder.resize_bilinear(np.zeros((3, 3)), 0, 2)


class TestPreprocess:
    def test_uint8_endpoints_map_to_unit_interval_edges(self):
        black = encoder.preprocess(np.zeros((4, 4), dtype=np.uint8), 4, 1)
        white = encoder.preprocess(np.full((4, 4), 255, dtype=np.uint8), 4, 1)
        np.testing.assert_allclose(black, -1.0, atol=1e-12)
        np.testing.assert_allclose(white, 1.0, atol=1e-12)

    def test_float_midpoint_maps_to_zero(self):
        out = encoder.preprocess(np.full((3, 3), 0.5), 3, 1)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_gray_to_rgb_replicates(self):
        img = np.random.default_rng(0).uniform(size=(5, 5))
        out = encoder.preprocess(img, 5, 3)
        assert out.shape == (5, 5, 3)
        np.testing.assert_array_equal(out[:, :, 0], out[:, :, 1])
        np.testing.assert_array_equal(out[:, :, 0], out[:, :, 2])

    def test_rgb_to_gray_averages(self):
        img = np.zeros((2, 2, 3))
        img[:, :, 0] = 0.9
        # channel mean 0.3, normalized: (0.3 - 0.5) / 0.5 = -0.4
        out = encoder.preprocess(img, 2, 1)
        np.testing.assert_allclose(out, -0.4, atol=1e-12)

    def test_resizes_to_target(self):
        out = encoder.preprocess(np.zeros((10, 7), dtype=np.uint8), 8, 3)
        assert out.shape == (8, 8, 3)

    def test_rejects_nan(self):
        with pytest.raises(InvalidInputError):
            encoder.preprocess(np.array([[np.nan]]), 2, 1)


class TestPatchify:
    def test_expected_patch_grid_at_reference_scale(self):
        img = np.zeros((224, 224, 3))
        patches = encoder.patchify(img, 32)
        assert patches.shape == (49, 32 * 32 * 3)
        assert encoder.num_patches(224, 32) == 49

    def test_row_major_patch_order(self):
        img = np.arange(16.0).reshape(4, 4, 1)
        patches = encoder.patchify(img, 2)
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])
        np.testing.assert_array_equal(patches[3], [10, 11, 14, 15])

    def test_channel_interleaving_inside_patch(self):
        img = np.zeros((2, 2, 2))
        img[0, 0] = [1.0, 2.0]
        img[0, 1] = [3.0, 4.0]
        img[1, 0] = [5.0, 6.0]
        img[1, 1] = [7.0, 8.0]
        patches = encoder.patchify(img, 2)
        np.testing.assert_array_equal(patches[0], [1, 2, 3, 4, 5, 6, 7, 8])

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_lossless(self, grid, patch, chans, seed):
        size = grid * patch
        img = np.random.default_rng(seed).uniform(size=(size, size, chans))
        patches = encoder.patchify(img, patch)
        back = encoder.unpatchify(patches, size, chans)
        np.testing.assert_array_equal(back, img)

    def test_nondivisible_patch_rejected(self):
        with pytest.raises(InvalidInputError):
            encoder.patchify(np.zeros((5, 5, 1)), 2)
        with pytest.raises(InvalidInputError):
            encoder.num_patches(224, 33)


class TestGelu:
    def test_zero_fixed_point(self):
        assert encoder.gelu(np.array([0.0]))[0] == 0.0

    def test_reflection_identity(self):
        # for the tanh form: gelu(x) - gelu(-x) == x exactly in algebra
        x = np.random.default_rng(1).normal(size=50) * 3
        np.testing.assert_allclose(encoder.gelu(x) - encoder.gelu(-x), x, atol=1e-12)

    def test_asymptotes(self):
        assert abs(encoder.gelu(np.array([12.0]))[0] - 12.0) < 1e-9
        assert abs(encoder.gelu(np.array([-12.0]))[0]) < 1e-9

    def test_grad_matches_central_difference(self):
        x = np.linspace(-4, 4, 41)
        eps = 1e-6
        numeric = (encoder.gelu(x + eps) - encoder.gelu(x - eps)) / (2 * eps)
        np.testing.assert_allclose(encoder.gelu_grad(x), numeric, atol=1e-8)


class TestLayerNorm:
    def test_unit_gamma_rows_standardized(self):
        x = np.random.default_rng(2).normal(2.0, 5.0, size=(4, 64))
        out, _ = encoder.layer_norm_forward(x, np.ones(64), np.zeros(64))
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-3)

    def test_affine_applied_after_standardization(self):
        x = np.random.default_rng(3).normal(size=(2, 8))
        gamma = np.full(8, 2.0)
        beta = np.full(8, -1.0)
        base, _ = encoder.layer_norm_forward(x, np.ones(8), np.zeros(8))
        out, _ = encoder.layer_norm_forward(x, gamma, beta)
        np.testing.assert_allclose(out, 2.0 * base - 1.0, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(3, 5))
        reduce_w = rng.normal(size=(3, 5))

        def f(vec):
            x = vec[:15].reshape(3, 5)
            gamma = vec[15:20]
            beta = vec[20:25]
            out, cache = encoder.layer_norm_forward(x, gamma, beta)
            loss = float(np.sum(out * reduce_w))
            d_x, d_gamma, d_beta = encoder.layer_norm_backward(cache, reduce_w)
            return loss, np.concatenate([d_x.ravel(), d_gamma, d_beta])

        x_init = np.concatenate([x0.ravel(), np.ones(5), np.zeros(5)])
        assert nn.grad_check(f, x_init, eps=1e-5) < 1e-6


class TestEncoder:
    def test_reference_scale_shapes(self):
        rng = make_rng(0, 1)
        params = encoder.encoder_init(rng, image_size=224, patch=32, channels=3,
                                      model_dim=64, heads=4, head_dim=16, depth=2)
        assert params.tokens == 50
        img = np.random.default_rng(0).uniform(-1, 1, size=(224, 224, 3))
        tokens, _ = encoder.encoder_forward(img, params)
        assert tokens.shape == (50, 64)
        h_cls = encoder.encode_image(img, params)
        assert h_cls.shape == (64,)
        assert np.all(np.isfinite(h_cls))

    def test_deterministic_across_runs(self):
        img = np.random.default_rng(5).uniform(-1, 1, size=(8, 8, 1))
        runs = []
        for _ in range(2):
            params = encoder.encoder_init(make_rng(123, 7), 8, 4, 1, 8, 2, 4, depth=1)
            runs.append(encoder.encode_image(img, params))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_wrong_image_shape_rejected(self):
        params = encoder.encoder_init(make_rng(0), 8, 4, 1, 8, 2, 4, depth=1)
        with pytest.raises(ShapeError):
            encoder.encode_image(np.zeros((9, 9, 1)), params)

    def test_head_config_must_factor_model_dim(self):
        with pytest.raises(InvalidInputError):
            encoder.encoder_init(make_rng(0), 8, 4, 1, 8, 3, 4)

    def test_full_backward_matches_finite_differences(self):
        params = encoder.encoder_init(make_rng(9), image_size=4, patch=2, channels=1,
                                      model_dim=4, heads=2, head_dim=2, depth=1)
        img = np.random.default_rng(10).uniform(-1, 1, size=(4, 4, 1))
        reduce_w = np.random.default_rng(11).normal(size=(5, 4))

        def f(vec):
            unpack_into(params, vec)
            tokens, cache = encoder.encoder_forward(img, params)
            loss = float(np.sum(tokens * reduce_w))
            store = GradStore()
            encoder.encoder_backward(params, cache, reduce_w, store)
            return loss, pack_grads(params, store)

        assert nn.grad_check(f, pack(params), eps=1e-4) < 1e-4

    def test_cls_row_gradient_only_backward(self):
        # the loss used in training only touches row 0 of the output;
        # make sure that restricted path is also correct
        params = encoder.encoder_init(make_rng(21), image_size=4, patch=2, channels=1,
                                      model_dim=4, heads=1, head_dim=4, depth=1)
        img = np.random.default_rng(22).uniform(-1, 1, size=(4, 4, 1))

        def f(vec):
            unpack_into(params, vec)
            tokens, cache = encoder.encoder_forward(img, params)
            h_cls = tokens[0]
            loss = 0.5 * float(h_cls @ h_cls)
            d_tokens = np.zeros_like(tokens)
            d_tokens[0] = h_cls
            store = GradStore()
            encoder.encoder_backward(params, cache, d_tokens, store)
            return loss, pack_grads(params, store)

        assert nn.grad_check(f, pack(params), eps=1e-4) < 1e-4
