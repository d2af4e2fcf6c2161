import math

import numpy as np
import pytest

from baroclinic.errors import ConfigurationError
from baroclinic.model import (
    ModelParams,
    State,
    a1_apply,
    a1_solve,
    apply_per_degree,
    b_nonlinear,
    constants_report,
    dissipation_apply,
    implicit_solve,
    inner,
    k0_threshold,
    lower_bound_h1,
    operator_matrices,
    pairings,
    sobolev_norm,
    stability_check,
    threshold_infimum,
    threshold_value,
)
from baroclinic.noise import NoiseEntry, NoiseSpectrum
from baroclinic.sphere import SpectralField, SphericalGrid, jacobian

Y10 = SpectralField.mode(6, 1, 0)
ZERO = SpectralField.zeros(6)


def single(layer):
    return State.from_fields(Y10, ZERO) if layer == 1 else State.from_fields(ZERO, Y10)


def coeff(s, layer):
    return s.coeffs[layer - 1, 1, 0]


def sym_pairing_matrix(gamma, k0, k1, rho, variant, j):
    """Symmetrised A1^T A3 at eigenvalues ``j`` (vectorised), for positivity checks."""
    if variant == "a3":
        a3 = np.array([[k0 * j, -2 * k0 * j], [-k0 * j, (2 * k0 + k1) * j + rho]])
    else:
        a3 = np.array([[k0 * j, -k0 * j], [-k0 * j, (k0 + k1) * j + rho]])
    a1 = np.array([[j, 0 * j], [0 * j, j + gamma]])
    P = np.einsum("ji...,jk...->ik...", a1, a3)
    return 0.5 * (P + np.swapaxes(P, 0, 1))


def min_eig(S):
    a, b, d = S[0, 0], S[0, 1], S[1, 1]
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + b * b)


class TestParams:
    @pytest.mark.parametrize("kw", [{"nu": 0.0}, {"nu": -1.0}, {"nu": 1.0, "k0": -0.1}, {"nu": 1.0, "variant": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            ModelParams(**kw)

    def test_scaled_friction(self):
        p = ModelParams(nu=0.1, k0=0.5, k1=0.4, rho=0.2, scaled_friction=True)
        assert p.friction == pytest.approx((0.05, 0.04, 0.02))
        assert p.primed_friction == pytest.approx((0.5, 0.4, 0.2))


class TestLinearOperators:
    def test_a1_layer1(self):
        out = a1_apply(single(1), ModelParams(nu=1.0, gamma=0.5))
        assert coeff(out, 1) == 2.0 and coeff(out, 2) == 0.0

    def test_a1_layer2(self):
        out = a1_apply(single(2), ModelParams(nu=1.0, gamma=0.5))
        assert coeff(out, 1) == 0.0 and coeff(out, 2) == 2.5

    def test_a1_solve_inverts(self, rng):
        p = ModelParams(nu=1.0, gamma=0.7)
        s = State.random(8, rng)
        np.testing.assert_allclose(a1_solve(a1_apply(s, p), p).coeffs, s.coeffs, atol=1e-14)

    def test_dissipation_hand_evaluated(self):
        p = ModelParams(nu=1.0, k0=0.1)
        out = dissipation_apply(single(1), p)
        assert coeff(out, 1) == pytest.approx(4.2, abs=1e-15)
        assert coeff(out, 2) == pytest.approx(-0.2, abs=1e-15)

    def test_decoupled_when_k0_zero(self):
        p = ModelParams(nu=0.3, gamma=0.5, k1=0.2, rho=0.1)
        _, A2, A3 = operator_matrices(p, 6)
        D = p.nu * A2 + A3
        assert np.all(D[:, 0, 1] == 0) and np.all(D[:, 1, 0] == 0)
        lam = np.arange(7) * np.arange(1, 8.0)
        np.testing.assert_array_equal(D[:, 0, 0], p.nu * lam**2)

    def test_implicit_solve_dt_zero(self, rng):
        p = ModelParams(nu=0.4, gamma=1.0, k0=0.2, k1=0.3, rho=0.1)
        s = State.random(7, rng)
        np.testing.assert_allclose(implicit_solve(s, p, 0.0).coeffs, a1_solve(s, p).coeffs, atol=1e-15)

    def test_implicit_solve_residual(self, rng):
        p = ModelParams(nu=0.4, gamma=1.0, k0=0.2, k1=0.3, rho=0.1)
        s = State.random(7, rng)
        x = implicit_solve(s, p, 0.05)
        back = a1_apply(x, p) + dissipation_apply(x, p) * 0.05
        np.testing.assert_allclose(back.coeffs, s.coeffs, atol=1e-13)

    def test_variant_matrices(self):
        p = ModelParams(nu=0.5, gamma=1.0, k0=0.2, k1=0.3, rho=0.1, variant="a3hat")
        _, _, A3 = operator_matrices(p, 3)
        lam = 6.0
        np.testing.assert_allclose(A3[2], [[0.2 * lam, -0.2 * lam], [-0.2 * lam, 0.5 * lam + 0.1]])


class TestNorms:
    @pytest.mark.parametrize("p", [0, 1, 2, 3])
    def test_single_mode(self, p):
        assert sobolev_norm(single(1), p) == pytest.approx(2 ** (p / 2), rel=1e-15)

    def test_zero(self):
        assert sobolev_norm(State.zeros(6), 2) == 0.0

    def test_pairing_single_mode(self):
        assert pairings(single(1), ModelParams(nu=1.0, gamma=3.3)).a2_a1 == pytest.approx(8.0)
        assert pairings(single(2), ModelParams(nu=1.0, gamma=1.0)).a1 == pytest.approx(3.0)

    def test_pairings_match_inner_products(self, rng):
        p = ModelParams(nu=0.3, gamma=0.8, k0=0.2, k1=0.4, rho=0.1)
        s = State.random(9, rng)
        A1s = a1_apply(s, p)
        A1, A2, A3 = operator_matrices(p, 9)
        A2s = State(apply_per_degree(A2, s.coeffs))
        A3s = State(apply_per_degree(A3, s.coeffs))
        pr = pairings(s, p)
        assert pr.a1 == pytest.approx(inner(A1s, s), rel=1e-13)
        assert pr.a2_a1 == pytest.approx(inner(A2s, A1s), rel=1e-13)
        assert pr.a3 == pytest.approx(inner(A3s, s), rel=1e-13)
        assert pr.a3_a1 == pytest.approx(inner(A3s, A1s), rel=1e-13)
        assert pr.a1_norm0_sq == pytest.approx(inner(A1s, A1s), rel=1e-13)

    def test_interpolation(self, rng):
        for _ in range(50):
            s = State.random(10, rng, decay=rng.uniform(0, 2))
            assert sobolev_norm(s, 1) ** 2 <= sobolev_norm(s, 0) * sobolev_norm(s, 2) * (1 + 1e-14)

    @pytest.mark.parametrize("variant", ["a3", "a3hat"])
    def test_a3_bounded_by_c3(self, rng, variant):
        noise = NoiseSpectrum.isotropic(2)
        for _ in range(200):
            p = ModelParams(nu=rng.uniform(0.01, 1), gamma=rng.uniform(0, 3), k0=rng.uniform(0, 1),
                            k1=rng.uniform(0, 1), rho=rng.uniform(0, 1), variant=variant)
            s = State.random(6, rng, decay=rng.uniform(0, 2))
            c3 = constants_report(p, noise).c3
            assert pairings(s, p).a3 <= c3 * sobolev_norm(s, 1) ** 2 * (1 + 1e-13)


class TestNonlinearity:
    def test_zero(self):
        g = SphericalGrid.for_truncation(6)
        assert not np.any(b_nonlinear(State.zeros(6), ModelParams(nu=1.0, gamma=0.5), g).coeffs)

    def test_zonal_annihilated(self, rng):
        L = 12
        g = SphericalGrid.for_truncation(L)
        s = State.random(L, rng)
        s.coeffs[:, :, 1:] = 0
        B = b_nonlinear(s, ModelParams(nu=1.0, gamma=0.7), g)
        assert np.abs(B.coeffs).max() <= 1e-12 * max(1.0, np.abs(s.coeffs).max() ** 2)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
    def test_energy_orthogonality(self, rng, gamma):
        L = 15
        g = SphericalGrid.for_truncation(L)
        p = ModelParams(nu=0.1, gamma=gamma)
        for _ in range(10):
            s = State.random(L, rng, decay=1.0)
            B = b_nonlinear(s, p, g)
            nB = math.sqrt(inner(B, B))
            assert abs(inner(B, s)) <= 1e-10 * nB * math.sqrt(inner(s, s))
            A1s = a1_apply(s, p)
            assert abs(inner(B, A1s)) <= 1e-10 * nB * math.sqrt(inner(A1s, A1s))

    def test_layer_structure(self, rng):
        # B(u) = (J(Du1,u1) + J(Du2,u2), J(Du2,u1) - gamma J(u2,u1) + J(Du1,u2)) + planetary terms
        L = 8
        g = SphericalGrid.for_truncation(L)
        gamma = 0.6
        p = ModelParams(nu=1.0, gamma=gamma, coriolis_scale=0.0)
        s = State.random(L, rng)
        lam = (np.arange(L + 1) * np.arange(1, L + 2.0))[:, None]
        u1, u2 = s.u1, s.u2
        D1, D2 = SpectralField(-lam * u1.coeffs), SpectralField(-lam * u2.coeffs)
        e1 = jacobian(D1, u1, g).coeffs + jacobian(D2, u2, g).coeffs
        e2 = jacobian(D2, u1, g).coeffs - gamma * jacobian(u2, u1, g).coeffs + jacobian(D1, u2, g).coeffs
        B = b_nonlinear(s, p, g).coeffs
        scale = np.abs(e1).max()
        assert np.abs(B[0] - e1).max() <= 1e-12 * scale
        assert np.abs(B[1] - e2).max() <= 1e-12 * scale

    def test_planetary_term(self, rng):
        L = 8
        g = SphericalGrid.for_truncation(L)
        s = State.random(L, rng)
        with_c = b_nonlinear(s, ModelParams(nu=1.0, coriolis_scale=2.0), g).coeffs
        without = b_nonlinear(s, ModelParams(nu=1.0, coriolis_scale=0.0), g).coeffs
        expected = -2.0 * 1j * np.arange(L + 1)[None, None, :] * s.coeffs
        np.testing.assert_allclose(with_c - without, expected, atol=1e-12)

    def test_rotation_equivariance(self, rng):
        L = 10
        g = SphericalGrid.for_truncation(L)
        p = ModelParams(nu=1.0, gamma=0.4)
        s = State.random(L, rng)
        phase = np.exp(1j * np.arange(L + 1) * 0.73)[None, None, :]
        rotated = b_nonlinear(State(s.coeffs * phase), p, g).coeffs
        np.testing.assert_allclose(rotated, b_nonlinear(s, p, g).coeffs * phase, atol=1e-11)

    def test_truncation_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            b_nonlinear(State.random(5, rng), ModelParams(nu=1.0), SphericalGrid.for_truncation(6))


class TestThresholds:
    def test_variant_a3_example(self):
        assert threshold_value(0.0, 1.0, 0.0, "a3") == 4.0

    def test_variant_a3hat_example(self):
        assert threshold_value(1.0, 1.0, 0.0, "a3hat") == 24.0

    def test_unconstrained_a3hat(self):
        assert math.isinf(threshold_value(0.0, 1.0, 0.5, "a3hat"))

    @pytest.mark.parametrize("variant", ["a3", "a3hat"])
    def test_matches_brute_force(self, rng, variant):
        for _ in range(5):
            gamma, k1, rho = rng.uniform(0.05, 4), rng.uniform(0, 2), rng.uniform(0, 2)
            closed = threshold_value(gamma, k1, rho, variant)
            brute = threshold_infimum(gamma, k1, rho, variant)
            assert abs(closed - brute) <= 1e-9 * max(1.0, closed)

    @pytest.mark.parametrize("variant", ["a3", "a3hat"])
    def test_positivity_at_threshold(self, rng, variant):
        j = np.arange(1, 200001, dtype=float)
        j = j * (j + 1)
        for _ in range(20):
            gamma, k1, rho = rng.uniform(0.05, 4), rng.uniform(0.05, 2), rng.uniform(0, 2)
            thr = threshold_value(gamma, k1, rho, variant)
            S = sym_pairing_matrix(gamma, thr, k1, rho, variant, j)
            scale = np.abs(S).max(axis=(0, 1))
            assert np.all(min_eig(S) >= -1e-12 * scale)

    @pytest.mark.parametrize("variant", ["a3", "a3hat"])
    def test_positive_pairing_random_states(self, rng, variant):
        gamma, k1, rho = 1.3, 0.4, 0.3
        thr = threshold_value(gamma, k1, rho, variant)
        p = ModelParams(nu=0.2, gamma=gamma, k0=thr, k1=k1, rho=rho, variant=variant)
        # the nu*gamma shift of the a3 variant only adds a positive diagonal term
        for _ in range(10_000 // 100):
            batch = [State.random(4, rng, decay=rng.uniform(-1, 2)) for _ in range(100)]
            for s in batch:
                pr = pairings(s, p)
                assert pr.a3_a1 >= -1e-12 * pr.a1_norm0_sq * thr

    def test_stability_check(self):
        p = ModelParams(nu=1.0, gamma=0.0, k0=4.0, k1=1.0)
        c = stability_check(p)
        assert c.within and not c.strictly_within and c.threshold == k0_threshold(p) == 4.0
        assert not stability_check(p.replace(k0=4.1)).within


def spectrum(*entries):
    return NoiseSpectrum(tuple(NoiseEntry(*e) for e in entries))


class TestConstants:
    def test_c2_single_mode(self):
        c = constants_report(ModelParams(nu=1.0), spectrum((1, 1, 0, 1.0)))
        assert c.c2 == pytest.approx(0.25)

    def test_kappa_and_C2(self):
        c = constants_report(ModelParams(nu=1.0, gamma=0.0), spectrum((1, 1, 0, 1.0)))
        assert c.kappa == pytest.approx(1.0)
        assert c.C2 == pytest.approx(math.exp(3 + 1.0))

    def test_C3(self):
        c = constants_report(ModelParams(nu=1.0, gamma=2.0), spectrum((1, 1, 0, 1.0), (2, 1, 0, 1.0)))
        assert c.C3 == pytest.approx(3 / 8)

    def test_c4(self):
        c = constants_report(ModelParams(nu=1.0), spectrum((1, 2, 1, 1.0)))
        assert c.c4 == pytest.approx(54.598150033, rel=1e-9)

    def test_zero_spectrum(self):
        with pytest.raises(ValueError):
            constants_report(ModelParams(nu=1.0), NoiseSpectrum())
        with pytest.raises(ValueError):
            constants_report(ModelParams(nu=1.0), spectrum((1, 1, 0, 0.0)))

    def test_scaling_with_nu(self):
        noise = spectrum((1, 1, 0, 1.0), (2, 2, 1, 0.5))
        p = ModelParams(nu=0.04, gamma=0.5, k0=0.1, k1=0.2, rho=0.1, alpha=0.75, scaled_friction=True)
        c = constants_report(p, noise)
        assert c.b == pytest.approx(0.04**0.75 * c.b_prime)
        assert c.c1 == pytest.approx(0.04**0.5 * c.C1)
        assert c.c3 == pytest.approx(0.04 * (4 * 0.1 + 0.2 + 0.5 + 0.1))
        assert lower_bound_h1(c, p.nu) == pytest.approx(c.c2**2 / (c.c1 + 4 / p.nu * c.c2 * c.c3))

    def test_variant_c3(self):
        noise = spectrum((1, 1, 0, 1.0))
        p = ModelParams(nu=0.1, gamma=0.5, k0=0.3, k1=0.2, rho=0.4, variant="a3hat")
        assert constants_report(p, noise).c3 == pytest.approx(2 * 0.3 + 0.2 + 0.4)
