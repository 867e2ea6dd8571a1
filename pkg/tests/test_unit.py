"""Tests for the learned update unit: topology, residual structure, unroll."""

import numpy as np
import pytest

from deconvgd.autodiff import Tensor, finite_diff_check
from deconvgd.degrade import delta_kernel, fidelity_gradient, gen_kernel
from deconvgd.unit import (
    ablate,
    descent_step,
    init_params,
    iter_parameters,
    subnet_forward,
    topology_signature,
    unroll,
    zero_final_layer,
)


def small_params(seed=0, dtype=np.float64):
    return init_params(seed, channels=3, dtype=dtype)


class TestSubnetForward:
    def test_zero_input_zero_final_gives_zero_output(self):
        params = small_params()
        zero_final_layer(params, "r")
        x = Tensor(np.zeros((1, 3, 10, 10)))
        out = subnet_forward(params.r, x, "eval")
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_output_shape_matches_input(self):
        params = small_params()
        x = Tensor(np.random.default_rng(0).random((1, 3, 48, 64)))
        assert subnet_forward(params.r, x, "eval").data.shape == (1, 3, 48, 64)

    def test_channel_mismatch_rejected(self):
        params = small_params()
        with pytest.raises(Exception, match="expects"):
            subnet_forward(params.r, Tensor(np.zeros((1, 2, 8, 8))), "eval")

    def test_bad_mode_rejected(self):
        params = small_params()
        with pytest.raises(ValueError, match="mode"):
            subnet_forward(params.r, Tensor(np.zeros((1, 3, 8, 8))), "test")

    def test_parameter_gradients_match_finite_differences(self):
        params = small_params(seed=3)
        rng = np.random.default_rng(4)
        x = Tensor(rng.random((1, 3, 8, 8)))
        c = rng.standard_normal((1, 3, 8, 8))
        sub = params.r

        def loss_for(weight_holder, setter):
            def f(p):
                old = setter(p)
                out = subnet_forward(sub, x, "train")
                setter(old)
                return (out * Tensor(c)).sum()
            return f

        frng = np.random.default_rng(5)
        for li in (0, 2, 5):
            layer = sub.layers[li]

            def set_w(p, layer=layer):
                old = layer.weight
                layer.weight = p
                return old

            err = finite_diff_check(loss_for(layer, set_w), layer.weight, 1e-4,
                                    coords=20, rng=frng)
            assert err < 1e-3, f"layer {li} weight gradient error {err}"


class TestDescentStep:
    def test_zeroed_d_final_layer_is_identity(self):
        params = small_params(seed=1)
        zero_final_layer(params, "d")
        rng = np.random.default_rng(2)
        x = Tensor(rng.random((1, 3, 16, 16)))
        y = Tensor(rng.random((1, 3, 16, 16)))
        k = gen_kernel(11, 0)
        out = descent_step(params, x, y, k, "eval")
        assert np.array_equal(out.data, x.data)  # bitwise

    def test_delta_kernel_feeds_x_minus_y_to_h(self):
        params = small_params(seed=2)
        rng = np.random.default_rng(3)
        x = Tensor(rng.random((1, 3, 12, 12)))
        y = Tensor(rng.random((1, 3, 12, 12)))
        fid = fidelity_gradient(x, y, delta_kernel())
        np.testing.assert_allclose(fid.data, x.data - y.data, atol=1e-14)
        # the step built from the delta kernel equals one built by splicing
        # x - y in as the data-term gradient
        got = descent_step(params, x, y, delta_kernel(), "eval").data
        r_out = subnet_forward(params.r, x, "eval")
        h_out = subnet_forward(params.h, x - y, "eval")
        want = (x + subnet_forward(params.d, r_out + h_out, "eval")).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_finite_at_initialization(self):
        params = init_params(7)
        rng = np.random.default_rng(8)
        y = Tensor(rng.random((1, 3, 20, 20)).astype(np.float32))
        out = descent_step(params, y, y, gen_kernel(11, 1), "eval")
        assert np.isfinite(out.data).all()
        assert np.linalg.norm(out.data - y.data) < np.inf


class TestUnroll:
    def test_one_step_equals_descent_step(self):
        params = small_params(seed=4)
        rng = np.random.default_rng(5)
        y = Tensor(rng.random((1, 3, 14, 14)))
        k = gen_kernel(11, 2)
        np.testing.assert_array_equal(
            unroll(params, y, y, k, 1, "eval")[0].data,
            descent_step(params, y, y, k, "eval").data,
        )

    def test_five_steps_returns_five_estimates(self):
        params = small_params(seed=5)
        rng = np.random.default_rng(6)
        y = Tensor(rng.random((1, 3, 12, 12)))
        outs = unroll(params, y, y, delta_kernel(), 5, "train")
        assert len(outs) == 5

    def test_prefix_property_in_eval_mode(self):
        params = small_params(seed=6)
        rng = np.random.default_rng(7)
        y = Tensor(rng.random((1, 3, 12, 12)))
        k = gen_kernel(11, 3)
        a = unroll(params, y, y, k, 3, "eval")
        b = unroll(params, y, y, k, 5, "eval")
        for t in range(3):
            np.testing.assert_array_equal(a[t].data, b[t].data)

    def test_zero_steps_rejected(self):
        params = small_params()
        y = Tensor(np.zeros((1, 3, 8, 8)))
        with pytest.raises(ValueError):
            unroll(params, y, y, delta_kernel(), 0, "eval")

    def test_residual_structure_for_any_depth(self):
        params = small_params(seed=8)
        zero_final_layer(params, "d")
        rng = np.random.default_rng(9)
        y = Tensor(rng.random((1, 3, 16, 16)))
        for est in unroll(params, y, y, gen_kernel(11, 4), 4, "eval"):
            assert np.array_equal(est.data, y.data)

    def test_shape_preserved_on_nonsquare_input(self):
        params = small_params(seed=9)
        rng = np.random.default_rng(10)
        y = Tensor(rng.random((1, 3, 33, 47)))
        for est in unroll(params, y, y, gen_kernel(11, 5), 2, "eval"):
            assert est.data.shape == (1, 3, 33, 47)

    def test_eval_unroll_deterministic(self):
        params = small_params(seed=10)
        rng = np.random.default_rng(11)
        y = Tensor(rng.random((1, 3, 12, 12)))
        k = gen_kernel(11, 6)
        a = unroll(params, y, y, k, 3, "eval")[-1].data
        b = unroll(params, y, y, k, 3, "eval")[-1].data
        np.testing.assert_array_equal(a, b)


class TestInitParams:
    def test_deterministic_per_seed(self):
        a = init_params(123)
        b = init_params(123)
        for pa, pb in zip(iter_parameters(a), iter_parameters(b)):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seeds_differ(self):
        a = init_params(1)
        b = init_params(2)
        assert not np.array_equal(a.r.layers[0].weight.data, b.r.layers[0].weight.data)

    def test_weight_std_tracks_fan_in(self):
        params = init_params(42)
        for layer in params.r.layers[1:3]:  # 64->64 convs, 102400 draws each
            fan_in = 64 * 5 * 5
            target = np.sqrt(1.0 / fan_in) / np.sqrt(3.0)  # std of U(-b, b)
            got = float(layer.weight.data.std())
            assert abs(got - target) / target < 0.2

    def test_subnets_have_independent_parameters(self):
        params = init_params(7)
        assert not np.array_equal(params.r.layers[0].weight.data,
                                  params.h.layers[0].weight.data)

    def test_parameter_sharing_across_steps(self):
        # unroll never copies the parameter set: same storage at every step
        params = small_params(seed=11)
        before = [p.data for p in iter_parameters(params)]
        y = Tensor(np.random.default_rng(12).random((1, 3, 10, 10)))
        unroll(params, y, y, delta_kernel(), 3, "eval")
        for stored, now in zip(before, iter_parameters(params)):
            assert stored is now.data


class TestAblate:
    def test_dropped_r_contributes_nothing(self):
        params = small_params(seed=12)
        ab = ablate(params, ["r"])
        rng = np.random.default_rng(13)
        x = Tensor(rng.random((1, 3, 12, 12)))
        y = Tensor(rng.random((1, 3, 12, 12)))
        got = descent_step(ab, x, y, delta_kernel(), "eval").data
        h_out = subnet_forward(ab.h, x - y, "eval")
        want = (x + subnet_forward(ab.d, h_out, "eval")).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_dropped_h_passes_fidelity_gradient_through(self):
        params = small_params(seed=13)
        ab = ablate(params, ["h"])
        rng = np.random.default_rng(14)
        x = Tensor(rng.random((1, 3, 12, 12)))
        y = Tensor(rng.random((1, 3, 12, 12)))
        got = descent_step(ab, x, y, delta_kernel(), "eval").data
        r_out = subnet_forward(ab.r, x, "eval")
        want = (x + subnet_forward(ab.d, r_out + (x - y), "eval")).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_dropped_subnet_is_frozen(self):
        params = small_params(seed=14)
        ab = ablate(params, ["r"])
        trainable = list(iter_parameters(ab))
        all_params = list(iter_parameters(ab, trainable_only=False))
        assert len(all_params) > len(trainable)
        assert all(not p.requires_grad for layer in ab.r.layers for p in (layer.weight, layer.bias))

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            ablate(small_params(), ["q"])


def test_topology_signature_mentions_every_layer():
    sig = topology_signature(3)
    assert sig.count("conv") == 6 and sig.count("tconv") == 3
    assert "3->64" in sig and "64->3" in sig
    assert topology_signature(3) != topology_signature(1)
