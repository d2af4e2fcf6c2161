"""Closed-form statistics of the linearised system (``B = 0``).

In the real basis every coordinate pair ``x = (<u, (Y,0)>, <u, (0,Y)>)`` for
a fixed real harmonic ``Y`` of degree ``l`` is an independent two-dimensional
Ornstein-Uhlenbeck process

    dx = -M x dt + A1^{-1} diag(b) dW,   M = A1^{-1} (nu A2 + A3),

restricted to degree ``l``. Everything below is per-mode 2x2 algebra.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigurationError, ValidationFailure
from .integrator import Stepper, make_rng
from .model import (
    ModelParams,
    PerModeOperators,
    State,
    apply_per_degree,
    apply_per_mode,
    operator_matrices,
    sobolev_norm,
)
from .noise import NoiseMap, NoiseSpectrum


def ou_stationary_covariance(M: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``M S + S M^T = Q`` for a 2x2 drift with eigenvalues in the right half plane.

    Uses ``S = (det(M) Q + N Q N^T) / (2 tr(M) det(M))`` with ``N = M - tr(M) I``.
    """
    M = np.asarray(M, dtype=float)
    Q = np.asarray(Q, dtype=float)
    tr = M[0, 0] + M[1, 1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if not (tr > 0 and det > 0):
        raise ConfigurationError(f"drift is not dissipative (trace {tr:.3g}, determinant {det:.3g})")
    N = M - tr * np.eye(2)
    S = (det * Q + N @ Q @ N.T) / (2.0 * tr * det)
    return 0.5 * (S + S.T)


def lyapunov_residual(M: np.ndarray, S: np.ndarray, Q: np.ndarray) -> float:
    return float(np.max(np.abs(M @ S + S @ M.T - Q)))


@dataclasses.dataclass(frozen=True)
class ModeOU:
    """One real-basis coordinate pair: degree ``l``, signed order ``m``."""

    l: int
    m: int
    b: np.ndarray  # effective amplitudes in layers 1 and 2
    A1: np.ndarray
    D: np.ndarray  # nu A2 + A3
    M: np.ndarray
    Q: np.ndarray
    sigma: np.ndarray

    @classmethod
    def build(cls, params: ModelParams, l: int, m: int, b: Sequence[float]) -> "ModeOU":
        A1, A2, A3 = (A[l] for A in operator_matrices(params, l))
        D = params.nu * A2 + A3
        A1inv = np.diag(1.0 / np.diag(A1))
        b = np.asarray(b, dtype=float)
        M = A1inv @ D
        Q = A1inv @ np.diag(b**2) @ A1inv
        sigma = np.zeros((2, 2)) if not np.any(b) else ou_stationary_covariance(M, Q)
        return cls(l, m, b, A1, D, M, Q, sigma)

    @property
    def lam(self) -> float:
        return float(self.l * (self.l + 1))

    def one_step_map(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean map ``R`` and covariance increment ``C`` of one semi-implicit step."""
        P = np.linalg.inv(self.A1 + dt * self.D)
        R = P @ self.A1
        C = dt * P @ np.diag(self.b**2) @ P.T
        return R, C

    def discrete_stationary_covariance(self, dt: float) -> np.ndarray:
        """Fixed point of ``S = R S R^T + C`` for the semi-implicit chain."""
        R, C = self.one_step_map(dt)
        K = np.eye(4) - np.kron(R, R)
        return np.linalg.solve(K, C.reshape(4)).reshape(2, 2)


def mode_processes(noise: NoiseSpectrum, params: ModelParams) -> list[ModeOU]:
    """One :class:`ModeOU` per forced real harmonic, layers combined."""
    b = noise.effective(params.nu, params.alpha)
    groups: dict[tuple[int, int], np.ndarray] = {}
    for e, amp in zip(noise.entries, b):
        groups.setdefault((e.l, e.m), np.zeros(2))[e.layer - 1] = amp
    return [ModeOU.build(params, l, m, bb) for (l, m), bb in sorted(groups.items())]


@dataclasses.dataclass(frozen=True)
class OracleMoments:
    h: tuple[float, float, float, float]  # E |||u|||_p^2, p = 0..3
    a1: float  # E <A1 u, u>
    a2_a1: float  # E <A2 u, A1 u>
    a3: float  # E <A3 u, u>
    a1_norm0_sq: float  # E |||A1 u|||_0^2
    exp_moment: float  # E exp(c |||A1 u|||_0^2)
    exp_rate: float  # c
    exp_divergent_mode: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["exp_moment"] = str(self.exp_moment) if math.isinf(self.exp_moment) else self.exp_moment
        return d


def oracle_moments(noise: NoiseSpectrum, params: ModelParams, exp_rate: float | None = None) -> OracleMoments:
    """Exact stationary moments of the linear system.

    ``exp_rate`` defaults to ``kappa* nu`` with ``kappa* = 2 / ((2 + gamma) sup b_i^2)``.
    """
    b = noise.effective(params.nu, params.alpha)
    if exp_rate is None:
        exp_rate = 0.0 if not np.any(b > 0) else params.nu * 2.0 / (2.0 + params.gamma) / float(b.max()) ** 2
    h = [0.0] * 4
    a1 = a2a1 = a3 = a1sq = 0.0
    log_mgf = 0.0
    bad = None
    for mode in mode_processes(noise, params):
        S, A1, lam = mode.sigma, mode.A1, mode.lam
        tr = float(np.trace(S))
        for p in range(4):
            h[p] += lam**p * tr
        A2 = np.eye(2) * lam**2
        a1 += float(np.trace(A1 @ S))
        a2a1 += float(np.trace(A1 @ A2 @ S))
        a3 += float(np.trace((mode.D - params.nu * A2) @ S))
        cov_y = A1 @ S @ A1
        a1sq += float(np.trace(cov_y))
        ev = np.linalg.eigvalsh(cov_y)
        if bad is None:
            if np.any(2.0 * exp_rate * ev >= 1.0):
                bad = (mode.l, mode.m)
            else:
                log_mgf += -0.5 * float(np.sum(np.log1p(-2.0 * exp_rate * ev)))
    return OracleMoments(
        h=tuple(h), a1=a1, a2_a1=a2a1, a3=a3, a1_norm0_sq=a1sq,
        exp_moment=math.inf if bad else math.exp(log_mgf), exp_rate=exp_rate,
        exp_divergent_mode=bad,
    )


# -- strong convergence ----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StrongOrderResult:
    dts: tuple[float, ...]
    errors: tuple[float, ...]
    slope: float
    reference_dt: float

    def within(self, target: float = 1.0, band: float = 0.15) -> bool:
        return abs(self.slope - target) <= band


def strong_order_check(
    params: ModelParams,
    noise: NoiseSpectrum,
    dts: Sequence[float] = (1e-2, 5e-3, 2e-3, 1e-3, 5e-4, 2e-4, 1e-4),
    *,
    t_end: float = 0.5,
    n_paths: int = 64,
    seed: int = 0,
    initial: State | None = None,
    L_max: int | None = None,
    scheme: str = "semi-implicit",
    band: float | None = None,
) -> StrongOrderResult:
    """Pathwise error of the linear scheme against a fine exact-drift reference.

    The reference steps ``x <- exp(-M h)(x + A1^{-1} dzeta)`` with
    ``h = min(dts) / 64`` (advanced 64 fine steps at a time) and the coarse schemes see the summed Brownian
    increments of the same paths. The error is the RMS over paths of
    ``|||x_dt(T) - x_ref(T)|||_0``. ``scheme="exact-drift"`` replaces the
    semi-implicit step by the reference map at the coarse step (a control:
    with zero forcing its error sits at round-off). With ``band`` set, a slope
    farther than ``band`` from 1 raises :class:`ValidationFailure`.
    """
    if scheme not in ("semi-implicit", "exact-drift"):
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    lin = params.replace(coriolis_scale=0.0)
    L = L_max if L_max is not None else max(noise.l_max(), initial.L_max if initial else 1)
    dts = tuple(sorted(dts, reverse=True))
    h = dts[-1] / 64.0
    ratios = [dt / dts[-1] for dt in dts]
    n_coarse = t_end / dts[-1]
    if any(abs(r - round(r)) > 1e-6 for r in ratios + [n_coarse]):
        raise ConfigurationError("time steps must nest: each dt a multiple of the smallest, t_end a multiple of each")
    ratios = [int(round(r)) for r in ratios]
    n_blocks = int(round(n_coarse))
    if n_blocks % ratios[0]:
        raise ConfigurationError("t_end must be a multiple of every time step")

    ops = PerModeOperators.build(lin, L)
    A1inv = np.zeros_like(ops.A1)
    A1inv[1:] = np.linalg.inv(ops.A1[1:])
    Mdeg = np.einsum("lij,ljk->lik", A1inv, ops.dissipation)

    def exact_map(dt: float) -> np.ndarray:
        E = np.zeros((L + 1, 2, 2))
        for l in range(1, L + 1):
            E[l] = expm(-dt * Mdeg[l])
        return E

    sub = 64
    E_h = exact_map(h)
    # powers[j] = E_h^(sub - j) so that one block is x <- E^sub x + sum_j powers[j] kick_j
    powers = np.empty((sub,) + E_h.shape)
    powers[-1] = E_h
    for j in range(sub - 2, -1, -1):
        powers[j] = np.einsum("lij,ljk->lik", powers[j + 1], E_h)
    E_block = powers[0]

    x0 = np.zeros((2, L + 1, L + 1), complex) if initial is None else initial.coeffs
    x0 = np.broadcast_to(x0, (n_paths,) + x0.shape).copy()
    scatter = NoiseMap.build(noise, L).matrix(L)
    b = noise.effective(lin.nu, lin.alpha)
    n = len(noise)
    # response[j, i]: effect at block end of a unit increment of W_i during fine step j
    unit = apply_per_degree(A1inv, b[:, None, None, None] * scatter)
    response = np.einsum("jlab,ibml->jialm", powers, np.swapaxes(unit, -1, -2))
    response = response.reshape(sub * n, -1)

    rng = make_rng(seed)
    ref = x0.copy()
    coarse = [x0.copy() for _ in dts]
    steppers = [Stepper(lin, noise, L, dt, linear=True) for dt in dts]
    exact_coarse = [np.broadcast_to(exact_map(dt)[:, None], (L + 1, L + 1, 2, 2)) for dt in dts]
    acc = [np.zeros((n_paths, n)) for _ in dts]

    for k in range(1, n_blocks + 1):
        dW = rng.standard_normal((sub, n_paths, n)) * math.sqrt(h)
        kicks = np.swapaxes(dW, 0, 1).reshape(n_paths, sub * n) @ response
        ref = apply_per_degree(E_block, ref) + kicks.reshape(ref.shape)
        block_dW = dW.sum(axis=0)
        for i, r in enumerate(ratios):
            acc[i] += block_dW
            if k % r == 0:
                dt = dts[i]
                if scheme == "semi-implicit":
                    coarse[i] = steppers[i].step(coarse[i], acc[i] / math.sqrt(dt))
                else:
                    z = np.tensordot(b * acc[i], scatter, axes=1)
                    coarse[i] = apply_per_mode(exact_coarse[i], coarse[i] + apply_per_degree(A1inv, z))
                acc[i][:] = 0.0
    errs = []
    for c in coarse:
        d = np.stack([sobolev_norm(State(c[j] - ref[j]), 0) for j in range(n_paths)])
        errs.append(float(np.sqrt(np.mean(d**2))))
    with np.errstate(divide="ignore"):
        slope = float(np.polyfit(np.log(dts), np.log(np.maximum(errs, 1e-300)), 1)[0])
    res = StrongOrderResult(dts, tuple(errs), slope, h)
    if band is not None and not res.within(1.0, band):
        raise ValidationFailure(f"strong order slope {slope:.3f} outside 1 +/- {band}")
    return res
