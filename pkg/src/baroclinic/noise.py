"""White-in-time forcing on an explicit real orthonormal basis.

Each basis element is a real fully normalised harmonic placed in one layer:
``(Y, 0)`` or ``(0, Y)``. For ``m > 0`` the element is ``sqrt(2) Re Y_l^m``,
for ``m < 0`` it is ``sqrt(2) Im Y_l^|m|``, and ``m = 0`` is ``Y_l^0``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable

import numpy as np

from .errors import ConfigurationError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclasses.dataclass(frozen=True)
class NoiseEntry:
    layer: int
    l: int
    m: int
    amplitude: float

    def __post_init__(self):
        if self.layer not in (1, 2):
            raise ConfigurationError(f"layer must be 1 or 2, got {self.layer}")
        if self.l < 1 or abs(self.m) > self.l:
            raise ConfigurationError(f"invalid harmonic (l={self.l}, m={self.m})")
        if not self.amplitude >= 0:
            raise ConfigurationError(f"amplitude must be >= 0, got {self.amplitude}")


@dataclasses.dataclass(frozen=True)
class NoiseSpectrum:
    """Amplitudes ``b'_i`` attached to basis elements ``E_i``.

    The forcing actually applied at viscosity ``nu`` is ``b_i = nu**alpha * b'_i``
    (``alpha`` is carried by :class:`~baroclinic.model.ModelParams`).
    """

    entries: tuple[NoiseEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(
            e if isinstance(e, NoiseEntry) else NoiseEntry(*e) for e in self.entries
        )
        keys = [(e.layer, e.l, e.m) for e in entries]
        if len(set(keys)) != len(keys):
            raise ConfigurationError("duplicate noise basis element")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def isotropic(
        cls, l_max: int, amplitude: float = 1.0, layers: Iterable[int] = (1, 2), total: bool = False
    ) -> "NoiseSpectrum":
        """Equal amplitude on every basis element with ``l <= l_max``.

        With ``total=True`` the amplitude is split so that ``sum b'_i^2 = amplitude^2``.
        """
        layers = tuple(layers)
        keys = [(k, l, m) for k in layers for l in range(1, l_max + 1) for m in range(-l, l + 1)]
        a = amplitude / math.sqrt(len(keys)) if total else amplitude
        return cls(tuple(NoiseEntry(k, l, m, a) for k, l, m in keys))

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([e.amplitude for e in self.entries], dtype=float)

    def __len__(self) -> int:
        return len(self.entries)

    def is_zero(self) -> bool:
        return not np.any(self.amplitudes > 0)

    def l_max(self) -> int:
        return max((e.l for e in self.entries), default=0)

    def effective(self, nu: float, alpha: float) -> np.ndarray:
        """``b_i = nu**alpha b'_i``."""
        return nu**alpha * self.amplitudes

    def to_dict(self) -> dict:
        return {"entries": [[e.layer, e.l, e.m, e.amplitude] for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpectrum":
        return cls(tuple(NoiseEntry(int(k), int(l), int(m), float(a)) for k, l, m, a in d["entries"]))


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseMap:
    """Scatter of real basis coordinates into stored complex coefficients."""

    layer: np.ndarray
    l: np.ndarray
    m: np.ndarray
    phase: np.ndarray  # complex coefficient of the basis element at (l, |m|)

    @classmethod
    def build(cls, noise: NoiseSpectrum, L_max: int) -> "NoiseMap":
        if noise.l_max() > L_max:
            raise ConfigurationError(
                f"noise reaches degree {noise.l_max()} beyond truncation {L_max}"
            )
        layer = np.array([e.layer - 1 for e in noise.entries], dtype=int)
        l = np.array([e.l for e in noise.entries], dtype=int)
        m = np.array([abs(e.m) for e in noise.entries], dtype=int)
        phase = np.array(
            [1.0 if e.m == 0 else (_INV_SQRT2 if e.m > 0 else -1j * _INV_SQRT2) for e in noise.entries],
            dtype=complex,
        )
        return cls(layer, l, m, phase)

    def matrix(self, L_max: int) -> np.ndarray:
        """``(n, 2, L+1, L+1)`` stored coefficients of each basis element."""
        out = np.zeros((len(self.l), 2, L_max + 1, L_max + 1), dtype=complex)
        out[np.arange(len(self.l)), self.layer, self.l, self.m] = self.phase
        # (l, m) and (l, -m) share one stored slot but are separate rows here
        return out

    def scatter(self, values: np.ndarray, L_max: int) -> np.ndarray:
        """Coefficients ``(..., 2, L+1, L+1)`` of ``sum_i values_i E_i``."""
        return np.tensordot(np.asarray(values, dtype=float), self.matrix(L_max), axes=1)

    def gather(self, coeffs: np.ndarray) -> np.ndarray:
        """Real basis coordinates ``<u, E_i>`` of a coefficient array."""
        c = coeffs[self.layer, self.l, self.m]
        # <u, E_i> = 2 Re(conj(phase) a) for m != 0, a for m == 0
        factor = np.where(self.m == 0, 1.0, 2.0)
        return factor * (np.conj(self.phase) * c).real
