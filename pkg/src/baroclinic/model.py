"""Two-layer baroclinic model: state, linear operators, nonlinearity and constants.

In spectral space every linear operator acts on a degree-``l`` mode as a
2x2 matrix (layers coupled, ``m`` irrelevant) with ``lam_l = l (l + 1)``:

    A1 = diag(lam, lam + gamma)       A2 = diag(lam^2, lam^2)
    A3 = [[k0 lam, -2 k0 lam], [-k0 lam, (2 k0 + k1 + nu gamma) lam + rho]]
    A3hat = [[k0 lam, -k0 lam], [-k0 lam, (k0 + k1) lam + rho]]
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigurationError
from .noise import NoiseSpectrum
from .sphere import SpectralField, SphericalGrid, eigenvalues, mode_weights

VARIANTS = ("a3", "a3hat")


@dataclasses.dataclass(frozen=True)
class ModelParams:
    """Physical parameters.

    With ``scaled_friction`` the fields ``k0``, ``k1`` and ``rho`` hold the
    primed, viscosity-independent values and the model uses ``nu * k0`` etc.
    Otherwise they are used as given.
    """

    nu: float
    gamma: float = 0.0
    rho: float = 0.0
    k0: float = 0.0
    k1: float = 0.0
    alpha: float = 0.5
    variant: str = "a3"
    coriolis_scale: float = 2.0
    scaled_friction: bool = False

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigurationError(f"nu must be positive, got {self.nu}")
        for name in ("gamma", "rho", "k0", "k1"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def friction(self) -> tuple[float, float, float]:
        """Effective ``(k0, k1, rho)`` entering the equations."""
        s = self.nu if self.scaled_friction else 1.0
        return s * self.k0, s * self.k1, s * self.rho

    @property
    def primed_friction(self) -> tuple[float, float, float]:
        """``(k0', k1', rho') = (k0, k1, rho) / nu``."""
        k0, k1, rho = self.friction
        return k0 / self.nu, k1 / self.nu, rho / self.nu

    def replace(self, **kw) -> "ModelParams":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class State:
    """Barotropic ``u1`` and baroclinic ``u2`` stream functions, ``coeffs[0|1]``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 3 or c.shape[0] != 2 or c.shape[1] != c.shape[2]:
            raise ConfigurationError(f"state coefficients must have shape (2, L+1, L+1), got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, L_max: int) -> "State":
        return cls(np.zeros((2, L_max + 1, L_max + 1), dtype=complex))

    @classmethod
    def from_fields(cls, u1: SpectralField, u2: SpectralField) -> "State":
        if u1.L_max != u2.L_max:
            raise ConfigurationError("layers must share one truncation")
        return cls(np.stack([u1.coeffs, u2.coeffs]))

    @classmethod
    def random(cls, L_max: int, rng: np.random.Generator, scale: float = 1.0, decay: float = 0.0) -> "State":
        """Random band-limited state; ``decay`` damps degree ``l`` by ``l**-decay``."""
        shape = (2, L_max + 1, L_max + 1)
        c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        l = np.arange(L_max + 1, dtype=float)
        damp = np.where(l > 0, np.maximum(l, 1.0) ** -decay, 0.0)
        c *= scale * damp[:, None] * (mode_weights(L_max) > 0)
        c[:, :, 0] = c[:, :, 0].real
        return cls(c)

    @property
    def L_max(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def u1(self) -> SpectralField:
        return SpectralField(self.coeffs[0])

    @property
    def u2(self) -> SpectralField:
        return SpectralField(self.coeffs[1])

    def __add__(self, other: "State") -> "State":
        return State(self.coeffs + other.coeffs)

    def __sub__(self, other: "State") -> "State":
        return State(self.coeffs - other.coeffs)

    def __mul__(self, k: float) -> "State":
        return State(self.coeffs * k)

    __rmul__ = __mul__


# -- per-degree operator matrices --------------------------------------------


def operator_matrices(params: ModelParams, L_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``A1, A2, A3`` (or ``A3hat``) as arrays of shape ``(L+1, 2, 2)``."""
    lam = eigenvalues(L_max)
    k0, k1, rho = params.friction
    g = params.gamma
    A1 = np.zeros((L_max + 1, 2, 2))
    A1[:, 0, 0] = lam
    A1[:, 1, 1] = lam + g
    A2 = np.zeros_like(A1)
    A2[:, 0, 0] = lam**2
    A2[:, 1, 1] = lam**2
    A3 = np.zeros_like(A1)
    A3[:, 0, 0] = k0 * lam
    if params.variant == "a3":
        A3[:, 0, 1] = -2.0 * k0 * lam
        A3[:, 1, 0] = -k0 * lam
        A3[:, 1, 1] = (2.0 * k0 + k1 + params.nu * g) * lam + rho
    else:
        A3[:, 0, 1] = -k0 * lam
        A3[:, 1, 0] = -k0 * lam
        A3[:, 1, 1] = (k0 + k1) * lam + rho
    for A in (A1, A2, A3):
        A[0] = 0.0
    return A1, A2, A3


def primed_a3(params: ModelParams, L_max: int) -> np.ndarray:
    """``A3' = A3 / nu`` (``A3hat'`` for the variant)."""
    return operator_matrices(params, L_max)[2] / params.nu


@dataclasses.dataclass(frozen=True, eq=False)
class PerModeOperators:
    """Per-degree matrices and, once factorised, the implicit-step inverses.

    ``inverse[l, m]`` solves ``(A1 + dt (nu A2 + A3) - theta i m s dt I) x = r``
    where ``s`` is the Coriolis scale and ``theta`` the implicit weight of the
    planetary term (0 explicit, 1/2 midpoint, 1 backward).
    """

    params: ModelParams
    L_max: int
    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    dt: float | None = None
    inverse: np.ndarray | None = None
    coriolis_theta: float = 0.0

    @classmethod
    def build(cls, params: ModelParams, L_max: int) -> "PerModeOperators":
        A1, A2, A3 = operator_matrices(params, L_max)
        return cls(params, L_max, A1, A2, A3)

    @property
    def dissipation(self) -> np.ndarray:
        return self.params.nu * self.A2 + self.A3

    def factorize(self, dt: float, coriolis_theta: float = 0.0) -> "PerModeOperators":
        if dt < 0:
            raise ConfigurationError(f"dt must be >= 0, got {dt}")
        if not 0.0 <= coriolis_theta <= 1.0:
            raise ConfigurationError(f"coriolis_theta must lie in [0, 1], got {coriolis_theta}")
        L = self.L_max
        M = (self.A1 + dt * self.dissipation)[:, None, :, :].astype(complex)
        M = np.broadcast_to(M, (L + 1, L + 1, 2, 2)).copy()
        if coriolis_theta:
            m = np.arange(L + 1)
            M -= (coriolis_theta * 1j * m * self.params.coriolis_scale * dt)[None, :, None, None] * np.eye(2)
        M[0] = np.eye(2)
        l = np.arange(L + 1)[:, None]
        M[np.arange(L + 1)[None, :] > l] = np.eye(2)
        det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
        if np.any(np.abs(det) == 0):
            raise ConfigurationError("singular implicit operator")
        inv = np.empty_like(M)
        inv[..., 0, 0] = M[..., 1, 1] / det
        inv[..., 1, 1] = M[..., 0, 0] / det
        inv[..., 0, 1] = -M[..., 0, 1] / det
        inv[..., 1, 0] = -M[..., 1, 0] / det
        mask = mode_weights(L) > 0
        inv *= mask[:, :, None, None]
        return dataclasses.replace(self, dt=dt, inverse=inv, coriolis_theta=coriolis_theta)


def apply_per_degree(mats: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Apply ``(L+1, 2, 2)`` per-degree matrices to ``(..., 2, L+1, L+1)`` coefficients."""
    return np.einsum("lij,...jlm->...ilm", mats, coeffs)


def apply_per_mode(mats: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Apply ``(L+1, L+1, 2, 2)`` per-mode matrices to ``(..., 2, L+1, L+1)`` coefficients."""
    return np.einsum("lmij,...jlm->...ilm", mats, coeffs)


def _inverse_per_degree(A: np.ndarray) -> np.ndarray:
    out = np.zeros_like(A)
    out[1:] = np.linalg.inv(A[1:])
    return out


def a1_apply(s: State, params: ModelParams) -> State:
    A1, _, _ = operator_matrices(params, s.L_max)
    return State(apply_per_degree(A1, s.coeffs))


def a1_solve(s: State, params: ModelParams) -> State:
    A1, _, _ = operator_matrices(params, s.L_max)
    return State(apply_per_degree(_inverse_per_degree(A1), s.coeffs))


def dissipation_apply(s: State, params: ModelParams) -> State:
    """``(nu A2 + A3) s``."""
    _, A2, A3 = operator_matrices(params, s.L_max)
    return State(apply_per_degree(params.nu * A2 + A3, s.coeffs))


def implicit_solve(s: State, params: ModelParams, dt: float) -> State:
    """Solve ``(A1 + dt (nu A2 + A3)) x = s`` mode by mode."""
    ops = PerModeOperators.build(params, s.L_max).factorize(dt)
    return State(apply_per_mode(ops.inverse, s.coeffs))


# -- nonlinearity -------------------------------------------------------------


def nonlinear_term(
    coeffs: np.ndarray, gamma: float, grid: SphericalGrid, coriolis_scale: float = 0.0
) -> np.ndarray:
    """Array kernel of ``B``; the planetary term enters with ``coriolis_scale``.

    ``J(s mu, u) = -s du/dlam`` is applied spectrally; the quadratic part is
    evaluated on the dealiased grid.
    """
    L = grid.L_max
    lam = eigenvalues(L)[:, None]
    u1, u2 = coeffs[0], coeffs[1]
    fields = np.stack([-lam * u1, u1, -lam * u2, u2])  # Delta u1, u1, Delta u2, u2
    d_lam = grid.synthesize_dlam(fields)
    d_mu = grid.synthesize_dmu(fields)

    def J(a, b):
        return d_lam[a] * d_mu[b] - d_mu[a] * d_lam[b]

    j11 = J(0, 1)
    j22 = J(2, 3)
    j21 = J(2, 1)
    j03 = J(0, 3)
    j31 = J(3, 1)
    out = grid.analyze(np.stack([j11 + j22, j21 - gamma * j31 + j03]))
    if coriolis_scale:
        im = 1j * np.arange(L + 1)[None, :]
        out[0] -= coriolis_scale * im * u1
        out[1] -= coriolis_scale * im * u2
    return out


def b_nonlinear(s: State, params: ModelParams, g: SphericalGrid) -> State:
    """``B(u)`` with the planetary vorticity ``coriolis_scale * mu``."""
    if s.L_max != g.L_max:
        raise ConfigurationError(f"state truncation {s.L_max} does not match grid {g.L_max}")
    return State(nonlinear_term(s.coeffs, params.gamma, g, params.coriolis_scale))


# -- norms and pairings -------------------------------------------------------


def layer_spectra(coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-degree ``sum_m |a1|^2``, ``sum_m |a2|^2`` and ``sum_m Re(a1 conj a2)``."""
    L = coeffs.shape[-1] - 1
    w = mode_weights(L)
    a1, a2 = coeffs[0], coeffs[1]
    p1 = np.sum(w * (a1.real**2 + a1.imag**2), axis=-1)
    p2 = np.sum(w * (a2.real**2 + a2.imag**2), axis=-1)
    x = np.sum(w * (a1.real * a2.real + a1.imag * a2.imag), axis=-1)
    return p1, p2, x


def quadratic_form(mats: np.ndarray, spectra) -> float:
    """``<M u, u>`` for per-degree 2x2 matrices from the layer spectra."""
    p1, p2, x = spectra
    return float(np.sum(mats[:, 0, 0] * p1 + mats[:, 1, 1] * p2 + (mats[:, 0, 1] + mats[:, 1, 0]) * x))


def sobolev_norm(s: State, p: float) -> float:
    """``|||s|||_p = (sum lam_l^p (|a1|^2 + |a2|^2))^(1/2)``."""
    lam = eigenvalues(s.L_max)
    p1, p2, _ = layer_spectra(s.coeffs)
    weight = np.zeros_like(lam)
    weight[1:] = lam[1:] ** p
    return math.sqrt(float(np.sum(weight * (p1 + p2))))


@dataclasses.dataclass(frozen=True)
class Pairings:
    a1: float  # <A1 s, s>
    a2_a1: float  # <A2 s, A1 s>
    a3: float  # <A3 s, s>
    a3_a1: float  # <A3 s, A1 s>
    a1_norm0_sq: float  # |||A1 s|||_0^2


def pairings(s: State, params: ModelParams) -> Pairings:
    A1, A2, A3 = operator_matrices(params, s.L_max)
    sp = layer_spectra(s.coeffs)
    T = np.transpose(A1, (0, 2, 1))
    return Pairings(
        a1=quadratic_form(A1, sp),
        a2_a1=quadratic_form(T @ A2, sp),
        a3=quadratic_form(A3, sp),
        a3_a1=quadratic_form(T @ A3, sp),
        a1_norm0_sq=quadratic_form(T @ A1, sp),
    )


def inner(s: State, t: State) -> float:
    """``<s, t> = int_S (s1 t1 + s2 t2) dS`` from coefficients."""
    w = mode_weights(s.L_max)
    return float(np.sum(w * (s.coeffs * np.conj(t.coeffs)).real))


# -- stability thresholds -----------------------------------------------------


def threshold_value(gamma: float, k1: float, rho: float, variant: str = "a3") -> float:
    """Closed-form largest admissible ``k0`` (``inf`` when unconstrained)."""
    if variant == "a3":
        second = math.inf if gamma == 2.0 else 4.0 * (2.0 + gamma) / (2.0 - gamma) ** 2 * (2.0 * k1 + rho)
        return min(4.0 * k1, second)
    if variant == "a3hat":
        return math.inf if gamma == 0.0 else 4.0 * (2.0 + gamma) / gamma**2 * (2.0 * k1 + rho)
    raise ConfigurationError(f"unknown variant {variant!r}")


def threshold_infimum(gamma: float, k1: float, rho: float, variant: str = "a3", n_terms: int = 10**6) -> float:
    """Brute-force ``inf_i 4 chi(j(i)) / d(j(i))`` over ``i = 1..n_terms``.

    ``chi(y) = k1 (y^2 + gamma y) + rho (gamma + y)``, ``j(i) = i (i + 1)`` and
    ``d = (j - gamma)^2`` for ``A3`` or ``gamma^2`` for ``A3hat``.
    """
    i = np.arange(1, n_terms + 1, dtype=float)
    j = i * (i + 1.0)
    chi = k1 * (j * j + gamma * j) + rho * (gamma + j)
    d = (j - gamma) ** 2 if variant == "a3" else np.full_like(j, gamma * gamma)
    with np.errstate(divide="ignore"):
        vals = np.where(d > 0, 4.0 * chi / np.where(d > 0, d, 1.0), np.inf)
    return float(vals.min())


def k0_threshold(params: ModelParams) -> float:
    """Threshold for the effective ``k0`` of ``params``."""
    _, k1, rho = params.friction
    return threshold_value(params.gamma, k1, rho, params.variant)


@dataclasses.dataclass(frozen=True)
class StabilityCheck:
    k0: float
    threshold: float
    within: bool  # k0 <= threshold
    strictly_within: bool  # k0 < threshold


def stability_check(params: ModelParams) -> StabilityCheck:
    k0 = params.friction[0]
    thr = k0_threshold(params)
    return StabilityCheck(k0, thr, k0 <= thr, k0 < thr)


# -- constants ------------------------------------------------------------------


def a1_inverse_weights(noise: NoiseSpectrum, gamma: float) -> np.ndarray:
    """``<A1^{-1} E_i, E_i>``: ``1/lam_l`` in layer 1, ``1/(lam_l + gamma)`` in layer 2."""
    return np.array(
        [1.0 / (e.l * (e.l + 1) + (gamma if e.layer == 2 else 0.0)) for e in noise.entries]
    )


@dataclasses.dataclass(frozen=True)
class ConstantsReport:
    k0_threshold: float
    b_prime: float
    b: float
    C1: float
    C2: float
    kappa: float
    C3: float
    C4: float
    K: float
    c1: float
    c2: float
    c3: float
    c4: float
    kappa_star: float
    noise_injection: float  # sum b_i^2 <A1^{-1} E_i, E_i>
    alpha1: float | None = None
    alpha2: float | None = None

    def to_dict(self) -> dict:
        return {k: (None if v is None else (str(v) if isinstance(v, float) and math.isinf(v) else v))
                for k, v in dataclasses.asdict(self).items()}


def constants_report(params: ModelParams, noise: NoiseSpectrum, alpha1: float | None = None) -> ConstantsReport:
    """Evaluate every named constant of the stationary-measure estimates."""
    if len(noise) == 0 or noise.is_zero():
        raise ValueError("constants are undefined for a zero noise spectrum")
    nu, g = params.nu, params.gamma
    bp = noise.amplitudes
    b = noise.effective(nu, params.alpha)
    w = a1_inverse_weights(noise, g)
    bp2, b2 = float(np.sum(bp**2)), float(np.sum(b**2))
    sup_bp, sup_b = float(bp.max()), float(b.max())
    k0, k1, rho = params.friction
    k0p, k1p, rhop = params.primed_friction
    if params.variant == "a3":
        K = 4.0 * k0p + k1p + g + rhop
        c3 = 4.0 * k0 + k1 + nu * g + rho
    else:
        K = 2.0 * k0p + k1p + rhop
        c3 = 2.0 * k0 + k1 + rho
    C1 = bp2 / 2.0
    C3 = 0.5 * float(np.sum(bp**2 * w))
    injection = float(np.sum(b**2 * w))
    if alpha1 is not None and not 0.0 < alpha1 < 2.0:
        raise ValueError(f"alpha1 must lie in (0, 2), got {alpha1}")
    return ConstantsReport(
        k0_threshold=k0_threshold(params),
        b_prime=math.sqrt(bp2),
        b=math.sqrt(b2),
        C1=C1,
        C2=math.exp(3.0 + bp2 / sup_bp**2),
        kappa=2.0 / (2.0 + g) / sup_bp**2,
        C3=C3,
        C4=C3**2 / (C1 + 2.0 * K * C3),
        K=K,
        c1=b2 / (2.0 * nu),
        c2=injection / (2.0 * nu),
        c3=c3,
        c4=math.exp(3.0 + b2 / sup_b**2),
        kappa_star=2.0 / (2.0 + g) / sup_b**2,
        noise_injection=injection,
        alpha1=alpha1,
        alpha2=None if alpha1 is None else 4.0 * alpha1 * nu / (2.0 + g) ** 2,
    )


def lower_bound_h1(c: ConstantsReport, nu: float) -> float:
    """Right-hand side of the stationary lower bound on ``E |||u|||_1^2``."""
    return c.c2**2 / (c.c1 + 4.0 / nu * c.c2 * c.c3)
