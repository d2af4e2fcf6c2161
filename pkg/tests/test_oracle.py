import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_lyapunov

from baroclinic.errors import ConfigurationError, ValidationFailure
from baroclinic.model import ModelParams, State
from baroclinic.noise import NoiseEntry, NoiseSpectrum
from baroclinic.oracle import (
    ModeOU,
    lyapunov_residual,
    mode_processes,
    oracle_moments,
    ou_stationary_covariance,
    strong_order_check,
)
from baroclinic.stats import balance_rhs


def spectrum(*entries):
    return NoiseSpectrum(tuple(NoiseEntry(*e) for e in entries))


THREE_MODES = spectrum((1, 1, 0, 1.0), (2, 1, 1, 0.7), (1, 2, -1, 0.5))
PARAMS = ModelParams(nu=0.5, gamma=1.0, k0=0.2, k1=0.3, rho=0.1)

entry = st.floats(-2, 2, allow_nan=False)


class TestLyapunov:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(entry, min_size=4, max_size=4), st.lists(entry, min_size=3, max_size=3))
    def test_matches_scipy(self, m, q):
        M = np.array(m).reshape(2, 2)
        tr, det = np.trace(M), np.linalg.det(M)
        if not (tr > 0.05 and det > 0.05):
            return
        G = np.array([[q[0], 0.0], [q[1], q[2]]])
        Q = G @ G.T
        S = ou_stationary_covariance(M, Q)
        ref = solve_continuous_lyapunov(M, Q)
        assert np.abs(S - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
        assert lyapunov_residual(M, S, Q) <= 1e-13 * max(1.0, np.abs(Q).max() * 10)

    @pytest.mark.parametrize("M", [[[1.0, 0.0], [0.0, -0.5]], [[-1.0, 0.0], [0.0, -1.0]], [[0.0, 1.0], [-1.0, 0.0]]])
    def test_not_dissipative(self, M):
        with pytest.raises(ConfigurationError):
            ou_stationary_covariance(np.array(M), np.eye(2))

    def test_decoupled_layer_one(self):
        p = ModelParams(nu=0.7, gamma=0.4)
        mode = ModeOU.build(p, 3, 1, [1.3, 0.0])
        lam = 12.0
        assert mode.sigma[0, 0] == pytest.approx(1.3**2 / (2 * 0.7 * lam**3), rel=1e-14)
        assert mode.sigma[1, 1] == 0.0 and mode.sigma[0, 1] == 0.0

    def test_symmetric_psd(self):
        for mode in mode_processes(NoiseSpectrum.isotropic(3), PARAMS):
            assert np.array_equal(mode.sigma, mode.sigma.T)
            assert np.linalg.eigvalsh(mode.sigma).min() >= 0
            assert lyapunov_residual(mode.M, mode.sigma, mode.Q) <= 1e-13

    def test_unforced_mode(self):
        assert not np.any(ModeOU.build(PARAMS, 2, 0, [0.0, 0.0]).sigma)

    def test_discrete_chain_converges(self):
        mode = ModeOU.build(PARAMS, 1, 0, [1.0, 0.5])
        errs = [np.abs(mode.discrete_stationary_covariance(dt) - mode.sigma).max() for dt in (0.02, 0.01, 0.005)]
        assert 1.8 < errs[0] / errs[1] < 2.2 and 1.8 < errs[1] / errs[2] < 2.2


class TestMoments:
    def test_single_mode(self):
        m = oracle_moments(spectrum((1, 1, 0, 1.0)), ModelParams(nu=1.0))
        assert m.a2_a1 == pytest.approx(0.5, rel=1e-14)
        assert m.h[3] == pytest.approx(0.5, rel=1e-14)
        assert m.h[0] == pytest.approx(0.5 / 8, rel=1e-14)

    def test_no_noise(self):
        m = oracle_moments(NoiseSpectrum(), PARAMS)
        assert m.h == (0.0, 0.0, 0.0, 0.0) and m.a2_a1 == 0.0 and m.a3 == 0.0
        assert m.exp_moment == 1.0

    def test_additive(self):
        a, b = spectrum((1, 1, 0, 1.0)), spectrum((2, 3, -2, 0.6))
        both = spectrum((1, 1, 0, 1.0), (2, 3, -2, 0.6))
        ma, mb, mab = (oracle_moments(n, PARAMS, exp_rate=0.01) for n in (a, b, both))
        for p in range(4):
            assert mab.h[p] == pytest.approx(ma.h[p] + mb.h[p], rel=1e-14)
        assert mab.a3 == pytest.approx(ma.a3 + mb.a3, rel=1e-14)
        assert mab.exp_moment == pytest.approx(ma.exp_moment * mb.exp_moment, rel=1e-14)

    @pytest.mark.parametrize("variant", ["a3", "a3hat"])
    def test_linear_balance_exact(self, variant):
        p = PARAMS.replace(variant=variant, alpha=0.7)
        noise = NoiseSpectrum.isotropic(4, amplitude=0.8)
        m = oracle_moments(noise, p)
        lhs = m.h[2] + m.a3 / p.nu
        assert lhs == pytest.approx(balance_rhs(p, noise), rel=1e-12)

    def test_exp_moment_monte_carlo(self):
        noise = THREE_MODES
        c = 0.3
        m = oracle_moments(noise, PARAMS, exp_rate=c)
        rng = np.random.default_rng(3)
        n = 200_000
        total = np.zeros(n)
        for mode in mode_processes(noise, PARAMS):
            x = rng.multivariate_normal(np.zeros(2), mode.sigma, size=n)
            y = x @ mode.A1.T
            total += np.sum(y * y, axis=1)
        vals = np.exp(c * total)
        assert abs(vals.mean() - m.exp_moment) <= 3 * vals.std(ddof=1) / math.sqrt(n)
        assert total.mean() == pytest.approx(m.a1_norm0_sq, rel=0.01)

    def test_exp_moment_divergent(self):
        m = oracle_moments(spectrum((1, 1, 0, 1.0), (1, 2, 0, 5.0)), ModelParams(nu=0.5), exp_rate=10.0)
        assert math.isinf(m.exp_moment) and m.exp_divergent_mode is not None
        assert m.to_dict()["exp_moment"] == "inf"

    def test_default_rate(self):
        p = ModelParams(nu=0.2, gamma=1.0, alpha=0.5)
        m = oracle_moments(spectrum((1, 1, 0, 2.0)), p)
        b = 2.0 * 0.2**0.5
        assert m.exp_rate == pytest.approx(0.2 * 2 / 3 / b**2)

    def test_mode_grouping(self):
        modes = mode_processes(spectrum((1, 2, 1, 1.0), (2, 2, 1, 0.5), (1, 2, -1, 0.3)), ModelParams(nu=1.0))
        assert [(m.l, m.m) for m in modes] == [(2, -1), (2, 1)]
        assert modes[1].b.tolist() == [1.0, 0.5]


class TestStrongOrder:
    def test_slope_with_noise(self):
        res = strong_order_check(PARAMS, THREE_MODES, L_max=2)
        assert res.within(1.0, 0.15), res
        assert res.reference_dt == pytest.approx(1e-4 / 64)

    def test_slope_without_noise(self):
        quiet = spectrum((1, 1, 0, 0.0), (2, 1, 1, 0.0), (1, 2, -1, 0.0))
        x0 = State.random(2, np.random.default_rng(1))
        res = strong_order_check(PARAMS, quiet, initial=x0, n_paths=2)
        assert res.within(1.0, 0.15), res

    def test_exact_drift_control(self):
        quiet = spectrum((1, 1, 0, 0.0), (2, 2, 1, 0.0))
        x0 = State.random(2, np.random.default_rng(2))
        res = strong_order_check(PARAMS, quiet, initial=x0, n_paths=2, scheme="exact-drift")
        assert max(res.errors) <= 1e-10 * math.sqrt(sum(abs(x0.coeffs.ravel()) ** 2))

    def test_exact_drift_with_noise_hits_noise_floor(self):
        # with forcing, the coarse sampling of the Brownian path dominates: an exact
        # drift map is no better than the scheme and still converges at first order
        a = strong_order_check(PARAMS, THREE_MODES, L_max=2, n_paths=16)
        b = strong_order_check(PARAMS, THREE_MODES, L_max=2, n_paths=16, scheme="exact-drift")
        assert b.within(1.0, 0.15)
        ratio = np.array(b.errors) / np.array(a.errors)
        assert np.all((ratio > 0.5) & (ratio < 2.0))

    def test_band_violation(self):
        with pytest.raises(ValidationFailure):
            strong_order_check(PARAMS, THREE_MODES, L_max=2, n_paths=8, band=1e-6)

    def test_non_nesting_ladder(self):
        with pytest.raises(ConfigurationError):
            strong_order_check(PARAMS, THREE_MODES, dts=(0.01, 0.003), L_max=2)
