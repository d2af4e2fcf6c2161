"""Spherical-harmonic transforms and differential operators on the unit sphere.

Coordinates are longitude ``lam`` in [0, 2pi) and ``mu = sin(latitude)``.
Fields are expanded in fully normalised complex harmonics

    Y_l^m(lam, mu) = P_l^m(mu) exp(i m lam),   int_S |Y_l^m|^2 dS = 1,

with the Condon-Shortley phase, so a real field satisfies
``a_l^{-m} = (-1)^m conj(a_l^m)``. Only ``m >= 0`` is stored: coefficient
arrays have shape ``(..., L+1, L+1)`` indexed ``[l, m]`` with ``m <= l``;
the ``l = 0`` row is always zero (fields have zero mean).
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import scipy.fft

from .errors import ConfigurationError


def _eps(l: np.ndarray, m: np.ndarray) -> np.ndarray:
    num = l * l - m * m
    den = 4.0 * l * l - 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(np.where(num > 0, num, 0.0) / np.where(den > 0, den, 1.0))
    return np.where(num > 0, out, 0.0)


def legendre_table(L: int, mu: np.ndarray) -> np.ndarray:
    """Fully normalised associated Legendre functions ``P[j, l, m]``.

    Uses the standard three-term recurrence in ``l`` seeded by the sectoral
    values ``P_m^m``. Entries with ``m > l`` are zero. Normalisation is
    ``int_{-1}^{1} P_l^m(mu)^2 dmu = 1 / (2 pi)``.
    """
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[0]
    P = np.zeros((n, L + 1, L + 1))
    s = np.sqrt(1.0 - mu * mu)
    P[:, 0, 0] = 1.0 / math.sqrt(4.0 * math.pi)
    for m in range(1, L + 1):
        P[:, m, m] = -math.sqrt((2 * m + 1) / (2.0 * m)) * s * P[:, m - 1, m - 1]
    for m in range(0, L):
        P[:, m + 1, m] = math.sqrt(2 * m + 3) * mu * P[:, m, m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1.0))
            P[:, l, m] = a * (mu * P[:, l - 1, m] - b * P[:, l - 2, m])
    return P


def legendre_derivative_table(L: int, mu: np.ndarray) -> np.ndarray:
    """``dP_l^m/dmu`` at interior nodes, via the ``(1 - mu^2) dP/dmu`` recurrence."""
    mu = np.asarray(mu, dtype=float)
    P = legendre_table(L + 1, mu)
    l = np.arange(L + 1)[:, None].astype(float)
    m = np.arange(L + 1)[None, :].astype(float)
    H = np.zeros((mu.shape[0], L + 1, L + 1))
    H[:, 1:, :] += ((l[1:] + 1.0) * _eps(l[1:], m))[None] * P[:, :L, : L + 1]
    H -= (l * _eps(l + 1.0, m))[None] * P[:, 1 : L + 2, : L + 1]
    H *= (m <= l)[None]
    return H / (1.0 - mu * mu)[:, None, None]


def fft_friendly(n: int) -> int:
    return int(scipy.fft.next_fast_len(int(n), real=True))


@dataclasses.dataclass(frozen=True, eq=False)
class SphericalGrid:
    """Gauss-Legendre x equispaced-longitude grid with cached Legendre tables.

    Attributes:
      L_max: spectral truncation degree.
      n_lat: number of Gauss-Legendre nodes in ``mu``.
      n_lon: number of equispaced longitudes.
      mu_nodes: increasing Gauss-Legendre roots.
      weights: matching quadrature weights (they sum to 2).
    """

    L_max: int
    n_lat: int
    n_lon: int
    mu_nodes: np.ndarray = dataclasses.field(repr=False)
    weights: np.ndarray = dataclasses.field(repr=False)
    _P: np.ndarray = dataclasses.field(repr=False)
    _dP: np.ndarray = dataclasses.field(repr=False)

    @classmethod
    def for_truncation(
        cls, L_max: int, n_lat: int | None = None, n_lon: int | None = None
    ) -> "SphericalGrid":
        """Build a grid able to dealias quadratic products at ``L_max``.

        Defaults are the smallest dealiasing sizes, with ``n_lon`` rounded up
        to an FFT-friendly length.
        """
        if L_max < 1:
            raise ConfigurationError(f"L_max must be >= 1, got {L_max}")
        need_lat, need_lon = min_grid_size(L_max)
        n_lat = need_lat if n_lat is None else int(n_lat)
        n_lon = fft_friendly(need_lon) if n_lon is None else int(n_lon)
        if n_lat < need_lat or n_lon < need_lon:
            raise ConfigurationError(
                f"grid {n_lat}x{n_lon} cannot dealias L_max={L_max}: "
                f"need n_lat >= {need_lat} and n_lon >= {need_lon}"
            )
        mu, w = np.polynomial.legendre.leggauss(n_lat)
        P = legendre_table(L_max, mu)
        dP = legendre_derivative_table(L_max, mu)
        # (m, j, l) layout feeds batched matmul in the transforms.
        return cls(
            L_max=L_max,
            n_lat=n_lat,
            n_lon=n_lon,
            mu_nodes=mu,
            weights=w,
            _P=np.ascontiguousarray(P.transpose(2, 0, 1)),
            _dP=np.ascontiguousarray(dP.transpose(2, 0, 1)),
        )

    @property
    def lons(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_lon) / self.n_lon

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @functools.cached_property
    def _Pw(self) -> np.ndarray:
        # analysis kernel, (m, l, j): weights and longitude measure folded in
        scale = self.weights * (2.0 * np.pi / self.n_lon)
        return np.ascontiguousarray((self._P * scale[None, :, None]).transpose(0, 2, 1))

    @functools.cached_property
    def _im(self) -> np.ndarray:
        return 1j * np.arange(self.L_max + 1)

    def legendre(self) -> np.ndarray:
        """``P[j, l, m]`` at the grid nodes."""
        return self._P.transpose(1, 2, 0)

    # -- array-level transforms -------------------------------------------------

    def _to_grid(self, coeffs: np.ndarray, table: np.ndarray) -> np.ndarray:
        c = np.swapaxes(coeffs, -1, -2)  # (..., m, l)
        re = table @ c.real[..., None]
        im = table @ c.imag[..., None]
        F = (re[..., 0] + 1j * im[..., 0]) * self.n_lon  # (..., m, j)
        G = np.zeros(F.shape[:-2] + (self.n_lat, self.n_lon // 2 + 1), dtype=complex)
        G[..., : self.L_max + 1] = np.swapaxes(F, -1, -2)
        return np.fft.irfft(G, n=self.n_lon, axis=-1)

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients ``(..., L+1, L+1)`` to grid values ``(..., n_lat, n_lon)``."""
        return self._to_grid(coeffs, self._P)

    def synthesize_dlam(self, coeffs: np.ndarray) -> np.ndarray:
        """Grid values of the longitude derivative."""
        return self._to_grid(coeffs * self._im, self._P)

    def synthesize_dmu(self, coeffs: np.ndarray) -> np.ndarray:
        """Grid values of the ``mu`` derivative (poles are never evaluated)."""
        return self._to_grid(coeffs, self._dP)

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Grid values to coefficients; the mean (``l = 0``) is discarded."""
        values = np.asarray(values, dtype=float)
        if values.shape[-2:] != self.shape:
            raise ConfigurationError(
                f"field of shape {values.shape[-2:]} does not live on grid {self.shape}"
            )
        G = np.fft.rfft(values, axis=-1)[..., : self.L_max + 1]  # (..., j, m)
        G = np.swapaxes(G, -1, -2)[..., None]  # (..., m, j, 1)
        re = (self._Pw @ G.real)[..., 0]
        im = (self._Pw @ G.imag)[..., 0]
        out = np.swapaxes(re + 1j * im, -1, -2)  # (..., l, m)
        out[..., 0, :] = 0.0
        out[..., :, 0] = out[..., :, 0].real
        return out

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Area integral over the sphere (last two axes)."""
        return np.einsum("...jk,j->...", values, self.weights) * (2.0 * np.pi / self.n_lon)


def min_grid_size(L_max: int) -> tuple[int, int]:
    """Smallest ``(n_lat, n_lon)`` that integrate cubic products at ``L_max`` exactly."""
    return (3 * L_max + 2) // 2, 3 * L_max + 1


def degree_mask(L: int) -> np.ndarray:
    """Boolean ``[l, m]`` mask of stored modes (``1 <= l``, ``0 <= m <= l``)."""
    l = np.arange(L + 1)[:, None]
    m = np.arange(L + 1)[None, :]
    return (m <= l) & (l >= 1)


def mode_weights(L: int) -> np.ndarray:
    """Multiplicity of each stored coefficient in sums over ``-l <= m <= l``."""
    w = np.where(np.arange(L + 1) == 0, 1.0, 2.0)[None, :] * np.ones((L + 1, 1))
    return w * degree_mask(L)


def eigenvalues(L: int) -> np.ndarray:
    """``l (l + 1)`` for ``l = 0..L``."""
    l = np.arange(L + 1, dtype=float)
    return l * (l + 1.0)


@dataclasses.dataclass(frozen=True)
class SpectralField:
    """Zero-mean real scalar field stored by its ``m >= 0`` coefficients."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ConfigurationError(f"coefficients must be square [l, m], got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def L_max(self) -> int:
        return self.coeffs.shape[0] - 1

    @classmethod
    def zeros(cls, L_max: int) -> "SpectralField":
        return cls(np.zeros((L_max + 1, L_max + 1), dtype=complex))

    @classmethod
    def mode(cls, L_max: int, l: int, m: int, value: complex = 1.0) -> "SpectralField":
        """Field with a single harmonic ``value * Y_l^m`` plus its conjugate partner.

        For ``m != 0`` the result is the real field ``value Y_l^m + c.c.``.
        """
        f = cls.zeros(L_max)
        f.set(l, m, value)
        return f

    def get(self, l: int, m: int) -> complex:
        """Coefficient of ``Y_l^m``, negative ``m`` through conjugate symmetry."""
        if m >= 0:
            return complex(self.coeffs[l, m])
        return complex((-1) ** m * np.conj(self.coeffs[l, -m]))

    def set(self, l: int, m: int, value: complex) -> None:
        if not (1 <= l <= self.L_max and abs(m) <= l):
            raise ConfigurationError(f"mode (l={l}, m={m}) outside truncation {self.L_max}")
        if m < 0:
            value, m = (-1) ** m * np.conj(value), -m
        if m == 0:
            value = complex(value).real
        self.coeffs[l, m] = value

    def is_real(self, tol: float = 0.0) -> bool:
        """Zero-mean and realness invariants (``m = 0`` real, nothing outside the triangle)."""
        c = self.coeffs
        outside = np.abs(c[~degree_mask(self.L_max)]).max(initial=0.0)
        return outside <= tol and np.abs(c[:, 0].imag).max() <= tol

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs - other.coeffs)

    def __mul__(self, k: float) -> "SpectralField":
        return SpectralField(self.coeffs * k)

    __rmul__ = __mul__


def _check(c: SpectralField, g: SphericalGrid) -> None:
    if c.L_max != g.L_max:
        raise ConfigurationError(f"field truncation {c.L_max} does not match grid {g.L_max}")


def sht_analysis(f: np.ndarray, g: SphericalGrid) -> SpectralField:
    return SpectralField(g.analyze(f))


def sht_synthesis(c: SpectralField, g: SphericalGrid) -> np.ndarray:
    _check(c, g)
    return g.synthesize(c.coeffs)


def laplacian_apply(c: SpectralField, power: float = 1.0) -> SpectralField:
    """``(-Delta)^power c``: each ``a_l^m`` times ``(l (l + 1))^power``."""
    lam = eigenvalues(c.L_max)
    factor = np.zeros_like(lam)
    factor[1:] = lam[1:] ** power
    return SpectralField(c.coeffs * factor[:, None])


def jacobian(psi: SpectralField, theta: SpectralField, g: SphericalGrid) -> SpectralField:
    """``J(psi, theta) = psi_lam theta_mu - psi_mu theta_lam``, computed pseudospectrally."""
    _check(psi, g)
    _check(theta, g)
    both = np.stack([psi.coeffs, theta.coeffs])
    d_lam = g.synthesize_dlam(both)
    d_mu = g.synthesize_dmu(both)
    J = d_lam[0] * d_mu[1] - d_mu[0] * d_lam[1]
    return SpectralField(g.analyze(J))


def sphere_integral(f: np.ndarray, g: SphericalGrid) -> float:
    return float(g.integrate(np.asarray(f, dtype=float)))


Y10_NORM = math.sqrt(3.0 / (4.0 * math.pi))


def coriolis_field(scale: float, L_max: int) -> SpectralField:
    """Spectral form of ``scale * mu`` (a pure ``Y_1^0`` field)."""
    return SpectralField.mode(L_max, 1, 0, scale / Y10_NORM)
