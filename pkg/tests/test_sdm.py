"""Edge-constrained kernels and the semantic difference refinement."""

import numpy as np
import pytest

import pnpnet.tensor as T
from pnpnet.nn import build_module
from pnpnet.optim import AdamW
from pnpnet.sdm import (ConstraintError, EidKernel, SdmParams,
                        build_eid_template, check_eid_kernel, corner_indices,
                        edge_pairs, eid_conv, sdm_forward, sdm_iterate,
                        sdm_reference)


class TestTemplate:
    def test_corner_parity(self):
        fixed, mask = build_eid_template()
        for (i, j, k) in corner_indices():
            want = 1.0 if (i + j + k) // 2 % 2 == 0 else -1.0
            assert fixed[i, j, k] == want
            assert mask[i, j, k] == 0.0
        assert mask.sum() == 19
        assert fixed[mask.astype(bool)].sum() == 0.0

    def test_twelve_opposite_signed_edges(self):
        fixed, _ = build_eid_template()
        pairs = edge_pairs()
        assert len(pairs) == 12
        for a, b in pairs:
            assert fixed[a] * fixed[b] == -1.0

    def test_corner_sum_zero(self):
        fixed, _ = build_eid_template()
        assert sum(fixed[c] for c in corner_indices()) == 0.0

    def test_check_rejects_bad_corner(self):
        kern = build_eid_template()[0].copy()
        kern[0, 0, 0] = 0.5
        with pytest.raises(ConstraintError):
            check_eid_kernel(kern)


class TestEidKernel:
    def test_fresh_kernel_satisfies_constraint(self):
        kern = build_module(EidKernel(4), 0)
        check_eid_kernel(kern.free.data)
        check_eid_kernel(kern.effective().data)
        np.testing.assert_array_equal(kern.effective().data[:, 1, 1, 1], -1.0)

    def test_constant_input_corner_cancellation(self):
        # corners alternate sign, so on a constant field their explicit
        # differences cancel exactly; center starts at -1, so the interior
        # response is -const
        kern = build_module(EidKernel(1), 0)
        x = T.Tensor(np.full((1, 5, 5, 5), 3.0, dtype=np.float32))
        out = eid_conv(x, kern)
        np.testing.assert_allclose(out.data[0, 2, 2, 2], -3.0, atol=1e-6)

    def test_impulse_recovers_kernel(self):
        kern = build_module(EidKernel(1), 1)
        kern.free.data[0, 0, 1, 2] = 0.7
        x = np.zeros((1, 5, 5, 5), dtype=np.float32)
        x[0, 2, 2, 2] = 1.0
        out = eid_conv(T.Tensor(x), kern).data
        # cross-correlation: response at p equals kernel at (p - 2 + 1) flipped
        eff = kern.effective().data[0]
        np.testing.assert_allclose(out[0, 1:4, 1:4, 1:4], eff[::-1, ::-1, ::-1],
                                   atol=1e-6)

    def test_corner_gradient_masked(self):
        kern = build_module(EidKernel(2), 2, dtype=np.float64)
        x = T.Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 4)))
        T.reduce_sum(T.square(eid_conv(x, kern))).backward()
        g = kern.free.grad
        for c in corner_indices():
            np.testing.assert_array_equal(g[(slice(None),) + c], 0.0)
        assert np.abs(g[:, 1, 1, 1]).max() > 0.0

    def test_corners_survive_optimizer_steps(self):
        kern = build_module(EidKernel(2), 3)
        opt = AdamW(kern.parameters(), lr=1e-2, weight_decay=1e-2)
        rng = np.random.default_rng(1)
        for _ in range(20):
            opt.zero_grad()
            x = T.Tensor(rng.normal(size=(2, 4, 4, 4)).astype(np.float32))
            T.reduce_sum(T.square(eid_conv(x, kern))).backward()
            opt.step()
            kern.project()
        check_eid_kernel(kern.free.data)
        check_eid_kernel(kern.effective().data)


class TestSdm:
    def _params(self, c=2, gc=3, seed=0, dtype=np.float64):
        return build_module(SdmParams(c, gc), seed, dtype)

    @pytest.mark.parametrize("seed", range(3))
    def test_forward_matches_reference(self, seed):
        params = self._params(seed=seed)
        rng = np.random.default_rng(100 + seed)
        f = T.Tensor(rng.normal(size=(2, 6, 6, 6)))
        g_up = T.Tensor(rng.normal(size=(3, 6, 6, 6)))
        out = sdm_forward(f, g_up, params, upsample_guide=False)
        ref = sdm_reference(f, g_up, params)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_guide_upsampled_to_skip_resolution(self):
        params = self._params(dtype=np.float32)
        f = T.Tensor(np.random.default_rng(2).normal(size=(2, 6, 6, 6)).astype(np.float32))
        g = T.Tensor(np.random.default_rng(3).normal(size=(3, 3, 3, 3)).astype(np.float32))
        assert sdm_forward(f, g, params).shape == (2, 6, 6, 6)

    def test_resolution_mismatch_rejected(self):
        params = self._params(dtype=np.float32)
        f = T.Tensor(np.zeros((2, 6, 6, 6), dtype=np.float32))
        g = T.Tensor(np.zeros((3, 4, 4, 4), dtype=np.float32))
        with pytest.raises(T.DimensionError):
            sdm_forward(f, g, params)

    def test_two_iterations_compose(self):
        params = self._params()
        rng = np.random.default_rng(4)
        f = T.Tensor(rng.normal(size=(2, 4, 4, 4)))
        g_up = T.Tensor(rng.normal(size=(3, 4, 4, 4)))
        once = sdm_forward(f, g_up, params, upsample_guide=False)
        twice_manual = sdm_forward(once, g_up, params, upsample_guide=False)
        twice = sdm_iterate(f, g_up, params, iters=2, upsample_guide=False)
        np.testing.assert_allclose(twice.data, twice_manual.data, atol=1e-10)

    def test_zero_guidance_fixed_point(self):
        # g = 0: the squared differential vanishes, so the refinement is
        # exactly lambda_r * f with the initial lambda_r = 1
        params = self._params()
        f_data = np.random.default_rng(5).normal(size=(2, 4, 4, 4))
        out = sdm_forward(T.Tensor(f_data.copy()),
                          T.Tensor(np.zeros((3, 4, 4, 4))), params,
                          upsample_guide=False)
        np.testing.assert_allclose(out.data, f_data, atol=1e-12)

    def test_squared_differential_nonnegative(self):
        params = self._params(dtype=np.float32)
        rng = np.random.default_rng(6)
        gp = params.proj_g(T.Tensor(rng.normal(size=(3, 4, 4, 4)).astype(np.float32)))
        sq = T.square(eid_conv(gp, params.alpha))
        assert sq.data.min() >= 0.0

    def test_residual_weights_initialized(self):
        params = self._params()
        assert float(params.lambda_r.data[0]) == 1.0
        assert float(params.nu_r.data[0]) == pytest.approx(0.1)
