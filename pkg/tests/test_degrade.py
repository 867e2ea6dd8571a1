"""Tests for the degradation model: blur operator, adjoint, synthesis."""

import numpy as np
import pytest

from deconvgd.autodiff import Tensor, finite_diff_check
from deconvgd.degrade import (
    Kernel,
    apply_A,
    apply_At,
    degrade,
    delta_kernel,
    fidelity_gradient,
    gen_kernel,
    load_store,
    quantize8,
    read_kernel,
    save_store,
    synth_dataset,
    write_kernel,
)


def blur_matrix(side_k, h, w, kernel=None, rng=None):
    """Explicit matrix of apply_A on an h x w grid, built column by column."""
    k = kernel if kernel is not None else gen_kernel(side_k, rng_seed=0)
    n = h * w
    a = np.zeros((n, n))
    for i in range(n):
        e = np.zeros((1, 1, h, w))
        e.reshape(-1)[i] = 1.0
        a[:, i] = apply_A(Tensor(e), k).data.reshape(-1)
    return a, k


class TestApplyA:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((1, 3, 9, 9)))
        np.testing.assert_array_equal(apply_A(x, delta_kernel()).data, x.data)

    def test_uniform_kernel_preserves_constant_images(self):
        k = Kernel(np.full((3, 3), 1.0 / 9.0))
        x = Tensor(np.full((1, 1, 8, 8), 0.7))
        out = apply_A(x, k).data
        # replicate padding keeps constants constant everywhere, boundary included
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_matches_explicit_matrix(self):
        rng = np.random.default_rng(1)
        a, k = blur_matrix(11, 32, 32)
        x = rng.random((1, 1, 32, 32))
        got = apply_A(Tensor(x), k).data.reshape(-1)
        want = a @ x.reshape(-1)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_kernel_larger_than_image_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            apply_A(Tensor(np.zeros((1, 1, 8, 8))), gen_kernel(11, 0))

    def test_linearity_of_gradient_map(self):
        rng = np.random.default_rng(2)
        k = gen_kernel(11, 3)
        x = rng.random((1, 1, 16, 16))
        d = rng.standard_normal((1, 1, 16, 16))
        y = Tensor(rng.random((1, 1, 16, 16)))
        eps = 0.37
        g0 = fidelity_gradient(Tensor(x), y, k).data
        g1 = fidelity_gradient(Tensor(x + eps * d), y, k).data
        want = eps * apply_At(apply_A(Tensor(d), k), k).data
        np.testing.assert_allclose(g1 - g0, want, atol=1e-10)


class TestApplyAt:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.random((1, 2, 7, 7)))
        np.testing.assert_array_equal(apply_At(x, delta_kernel()).data, x.data)

    def test_symmetric_small_kernel_self_adjoint(self):
        """For a radius-1 symmetric kernel the padded operator is symmetric,
        so forward and adjoint agree exactly."""
        taps = np.array([[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]])
        k = Kernel(taps / taps.sum())
        rng = np.random.default_rng(4)
        x = Tensor(rng.random((1, 1, 10, 10)))
        np.testing.assert_allclose(apply_At(x, k).data, apply_A(x, k).data, atol=1e-12)

    def test_equals_rotated_kernel_in_interior(self):
        rng = np.random.default_rng(5)
        k = gen_kernel(11, 6)
        x = Tensor(rng.random((1, 1, 40, 40)))
        via_rot = apply_A(x, k.rotated()).data
        via_adj = apply_At(x, k).data
        m = k.side  # kernel diameter clears all boundary effects
        np.testing.assert_allclose(via_adj[..., m:-m, m:-m], via_rot[..., m:-m, m:-m], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_inner_product_identity(self, seed):
        rng = np.random.default_rng(10 + seed)
        k = gen_kernel(int(rng.choice([3, 11, 21])), seed)
        x = Tensor(rng.standard_normal((1, 1, 24, 24)))
        z = Tensor(rng.standard_normal((1, 1, 24, 24)))
        lhs = float((apply_A(x, k).data * z.data).sum())
        rhs = float((x.data * apply_At(z, k).data).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_AtA_symmetric_psd(self):
        a, _ = blur_matrix(11, 12, 12)
        ata = a.T @ a
        assert np.abs(ata - ata.T).max() < 1e-10
        eigvals = np.linalg.eigvalsh(ata)
        assert eigvals.min() >= -1e-8


class TestFidelityGradient:
    def test_zero_at_exact_fit(self):
        rng = np.random.default_rng(7)
        k = gen_kernel(11, 8)
        x = Tensor(rng.random((1, 3, 20, 20)))
        y = apply_A(x, k)
        g = fidelity_gradient(x, y, k).data
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_delta_kernel_gives_denoising_gradient(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.random((1, 3, 8, 8)))
        y = Tensor(rng.random((1, 3, 8, 8)))
        np.testing.assert_allclose(
            fidelity_gradient(x, y, delta_kernel()).data, x.data - y.data, atol=1e-14
        )

    def test_matches_finite_difference_of_energy(self):
        rng = np.random.default_rng(9)
        k = gen_kernel(3, 10)
        y = Tensor(rng.random((1, 1, 8, 8)))

        def energy(p):
            r = apply_A(p, k) - y
            return (r * r).sum() * 0.5

        x = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)
        loss = energy(x)
        loss.backward()
        analytic = fidelity_gradient(x.detach(), y, k).data
        np.testing.assert_allclose(x.grad, analytic, atol=1e-12)
        assert finite_diff_check(energy, x.detach(), 1e-5) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fidelity_gradient(
                Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 9, 9))), delta_kernel()
            )


class TestDegrade:
    def test_sigma_zero_delta_kernel_is_quantization(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.random((1, 3, 6, 6)))
        t = degrade(x, delta_kernel(), 0.0, rng_seed=0)
        np.testing.assert_array_equal(t.observed.data, quantize8(x.data))

    def test_quantize_idempotent(self):
        rng = np.random.default_rng(12)
        q = quantize8(rng.random((4, 4)))
        np.testing.assert_array_equal(quantize8(q), q)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.random((1, 3, 12, 12)))
        k = gen_kernel(11, 1)
        a = degrade(x, k, 0.01, rng_seed=42)
        b = degrade(x, k, 0.01, rng_seed=42)
        np.testing.assert_array_equal(a.observed.data, b.observed.data)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            degrade(Tensor(np.zeros((1, 3, 8, 8))), delta_kernel(), -0.1, 0)

    def test_noise_std_matches_sigma(self):
        # constant mid-gray avoids clipping; quantization adds ~1e-5 variance
        x = Tensor(np.full((1, 3, 600, 600), 0.5))
        sigma = 0.05
        t = degrade(x, delta_kernel(), sigma, rng_seed=7)
        emp = float((t.observed.data - 0.5).std())
        assert abs(emp - sigma) / sigma < 0.02


class TestGenKernel:
    @pytest.mark.parametrize("side", [3, 11, 21, 31, 41])
    def test_normalized_and_nonnegative(self, side):
        k = gen_kernel(side, rng_seed=5)
        assert k.taps.min() >= 0
        assert abs(k.taps.sum() - 1.0) < 1e-12
        assert k.side == side

    def test_deterministic(self):
        np.testing.assert_array_equal(gen_kernel(11, 7).taps, gen_kernel(11, 7).taps)

    def test_even_side_rejected(self):
        with pytest.raises(ValueError):
            gen_kernel(10, 0)

    @pytest.mark.parametrize("seed", range(8))
    def test_support_is_4_connected(self, seed):
        k = gen_kernel(21, seed)
        mask = k.taps > 0
        # flood fill from the first support pixel using 4-neighborhood
        idx = np.argwhere(mask)
        seen = np.zeros_like(mask)
        stack = [tuple(idx[0])]
        seen[tuple(idx[0])] = True
        while stack:
            i, j = stack.pop()
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] and mask[a, b] and not seen[a, b]:
                    seen[a, b] = True
                    stack.append((a, b))
        assert seen.sum() == mask.sum(), "kernel support is disconnected"


class TestSynthDataset:
    def make_images(self, n, size=24):
        rng = np.random.default_rng(100)
        return [Tensor(rng.random((1, 3, size, size))) for _ in range(n)]

    def test_counts(self):
        trips = synth_dataset(self.make_images(2, 32), 5, (0.003, 0.015), {11, 21}, rng_seed=0)
        assert len(trips) == 10

    def test_sigma_within_interval(self):
        trips = synth_dataset(self.make_images(8, 32), 5, (0.003, 0.015), {11}, rng_seed=1)
        sigmas = [t.noise_sigma for t in trips]
        assert min(sigmas) >= 0.003 and max(sigmas) <= 0.015

    def test_sizes_drawn_from_set(self):
        trips = synth_dataset(self.make_images(6, 48), 5, (0.003, 0.015), {11, 21, 31, 41}, rng_seed=2)
        sides = {t.kernel.side for t in trips}
        assert sides <= {11, 21, 31, 41}
        assert len(sides) > 1

    def test_empty_truth_set_rejected(self):
        with pytest.raises(ValueError):
            synth_dataset([], 5, (0.003, 0.015), {11}, rng_seed=0)

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            synth_dataset(self.make_images(1, 32), 5, (0.003, 0.015), {13}, rng_seed=0)


class TestStore:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        imgs = [Tensor(quantize8(rng.random((1, 3, 16, 16)))) for _ in range(2)]
        trips = synth_dataset(imgs, 2, (0.005, 0.01), {11}, rng_seed=3)
        save_store(tmp_path / "store", trips)
        loaded = load_store(tmp_path / "store")
        assert len(loaded) == 4
        for a, b in zip(trips, loaded):
            # images are stored at 8 bits, so roundtrip is exact after quantization
            np.testing.assert_allclose(b.truth.data, quantize8(a.truth.data), atol=1e-12)
            np.testing.assert_allclose(b.observed.data, a.observed.data, atol=1e-12)
            np.testing.assert_allclose(b.kernel.taps, a.kernel.taps, atol=1e-12)
            assert b.noise_sigma == a.noise_sigma

    def test_kernel_text_roundtrip(self, tmp_path):
        k = gen_kernel(21, 9)
        write_kernel(tmp_path / "k.txt", k)
        np.testing.assert_allclose(read_kernel(tmp_path / "k.txt").taps, k.taps, atol=1e-15)
