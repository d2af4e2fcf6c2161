"""Semi-implicit Euler-Maruyama stepping of the stochastic two-layer model.

One step solves, for every mode ``(l, m)``,

    (A1 + dt (nu A2 + A3)) u_new = A1 u - dt B(u) + dzeta,

with ``dzeta = sum_i b_i sqrt(dt) xi_i E_i``. The planetary term
``J(s mu, u) = -s du/dlam`` of ``B`` is linear and diagonal in ``(l, m)``. By
default it is split evenly between the old and new time levels (implicit
midpoint), which removes the Rossby-wave step limit and, unlike a fully
implicit treatment, neither damps nor amplifies those waves.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError
from .model import (
    ModelParams,
    PerModeOperators,
    State,
    apply_per_degree,
    apply_per_mode,
    nonlinear_term,
    operator_matrices,
)
from .noise import NoiseMap, NoiseSpectrum
from .sphere import SphericalGrid, eigenvalues, mode_weights

Observer = Callable[[float, State], None]

CHECKPOINT_FORMAT = "baroclinic-checkpoint"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    t_end: float
    seed: int = 0
    burn_in: float | None = None  # default: 20% of t_end
    sample_every: int = 1
    blowup_norm: float = 1e6
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= 0:
            raise ConfigurationError(f"t_end must be >= 0, got {self.t_end}")
        if self.burn_in is not None and self.t_end > 0 and not 0 <= self.burn_in < self.t_end:
            raise ConfigurationError(f"burn_in must lie in [0, t_end), got {self.burn_in}")
        if self.sample_every < 1:
            raise ConfigurationError("sample_every must be >= 1")
        if not self.blowup_norm > 0:
            raise ConfigurationError("blowup_norm must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def burn_in_steps(self) -> int:
        burn = 0.2 * self.t_end if self.burn_in is None else self.burn_in
        return int(math.ceil(burn / self.dt - 1e-9))

    def expected_samples(self) -> int:
        n, k = self.n_steps, self.burn_in_steps
        return 0 if n < k else (n - k) // self.sample_every + 1

    def replace(self, **kw) -> "IntegratorConfig":
        return dataclasses.replace(self, **kw)


def make_rng(seed: int, member: int = 0) -> np.random.Generator:
    """Counter-based Philox stream; ensemble members get disjoint spawn keys."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(member),))
    return np.random.Generator(np.random.Philox(ss))


class Stepper:
    """Precomputed scheme for one ``(params, noise, L_max, dt)`` combination."""

    def __init__(
        self,
        params: ModelParams,
        noise: NoiseSpectrum,
        L_max: int,
        dt: float,
        grid: SphericalGrid | None = None,
        linear: bool = False,
        coriolis_theta: float = 0.5,
        ops: PerModeOperators | None = None,
    ):
        if ops is None:
            ops = PerModeOperators.build(params, L_max).factorize(
                dt, coriolis_theta=0.0 if linear else coriolis_theta
            )
        elif ops.dt != dt:
            raise ConfigurationError(f"operators factorised for dt={ops.dt}, step uses dt={dt}")
        self.params = params
        self.L_max = L_max
        self.dt = dt
        self.linear = linear
        self.ops = ops
        self.grid = None
        if not linear:
            self.grid = grid if grid is not None else SphericalGrid.for_truncation(L_max)
            if self.grid.L_max != L_max:
                raise ConfigurationError("grid truncation does not match the state")
        # explicit share of the planetary term, applied as a per-order multiplier
        theta = ops.coriolis_theta
        s = 0.0 if linear else params.coriolis_scale
        self._rotation = (1.0 - theta) * dt * 1j * s * np.arange(L_max + 1) if s and theta < 1 else None
        self.noise_map = NoiseMap.build(noise, L_max)
        self._scatter = self.noise_map.matrix(L_max)
        self.noise_scale = noise.effective(params.nu, params.alpha) * math.sqrt(dt)
        self.n_noise = len(noise)
        lam = eigenvalues(L_max)
        self._h2_weight = mode_weights(L_max) * (lam**2)[:, None]

    def increment(self, xi: np.ndarray) -> np.ndarray:
        return np.tensordot(self.noise_scale * xi, self._scatter, axes=1)

    def step(self, coeffs: np.ndarray, xi: np.ndarray | None) -> np.ndarray:
        """One step; linear steppers also accept batches ``(..., 2, L+1, L+1)``."""
        dz = self.increment(xi) if xi is not None and self.n_noise else None
        return self.step_forced(coeffs, dz)

    def step_forced(self, coeffs: np.ndarray, dz: np.ndarray | None) -> np.ndarray:
        """One step with a precomputed forcing increment ``dz`` (or none)."""
        rhs = apply_per_degree(self.ops.A1, coeffs)
        if not self.linear:
            rhs = rhs - self.dt * nonlinear_term(coeffs, self.params.gamma, self.grid)
            if self._rotation is not None:
                rhs = rhs + self._rotation * coeffs
        if dz is not None:
            rhs = rhs + dz
        return apply_per_mode(self.ops.inverse, rhs)

    def h2_norm(self, coeffs: np.ndarray) -> float:
        return math.sqrt(float(np.sum(self._h2_weight * (coeffs.real**2 + coeffs.imag**2))))


class EnergyBudget:
    """Per-step terms of the discrete energy balance from ``start_step`` on.

    For each step ``n -> n+1`` it stores ``dt <(nu A2 + A3) u_{n+1}, u_{n+1}>``,
    the martingale increment ``2 <u_n, dzeta_n>`` and ``<A1 u_{n+1}, u_{n+1}>``.
    The Ito identity

        d<A1 u, u> = -2 <(nu A2 + A3) u, u> dt + 2 <u, dzeta> + sum b_i^2 <A1^-1 E_i, E_i> dt

    makes ``(dissipation - (martingale - d<A1 u, u>) / 2) / (nu T)`` an estimator
    of the stationary dissipation with the forcing martingale removed.
    """

    def __init__(self, params: ModelParams, L_max: int, start_step: int = 0):
        A1, A2, A3 = operator_matrices(params, L_max)
        self.nu = params.nu
        self._D = params.nu * A2 + A3
        self._A1 = A1
        self._w = mode_weights(L_max)
        self.start_step = start_step
        self.dissipation: list[float] = []
        self.martingale: list[float] = []
        self.energy: list[float] = []
        self.energy_start: float | None = None
        self.dt: float | None = None

    def _form(self, M: np.ndarray, c: np.ndarray) -> float:
        Mc = apply_per_degree(M, c)
        return float(np.sum(self._w * (Mc * np.conj(c)).real))

    def update(self, k: int, u_prev: np.ndarray, dz: np.ndarray | None, u_new: np.ndarray, dt: float) -> None:
        if k <= self.start_step:
            if k == self.start_step:
                self.energy_start = self._form(self._A1, u_new)
            return
        if self.energy_start is None:
            self.energy_start = self._form(self._A1, u_prev)
        self.dt = dt
        self.dissipation.append(dt * self._form(self._D, u_new))
        m = 0.0 if dz is None else 2.0 * float(np.sum(self._w * (u_prev * np.conj(dz)).real))
        self.martingale.append(m)
        self.energy.append(self._form(self._A1, u_new))

    @property
    def n_steps(self) -> int:
        return len(self.dissipation)

    def corrected_increments(self) -> np.ndarray:
        """Per-step ``<(nu A2 + A3) u, u> / nu`` estimates with the martingale removed."""
        e = np.asarray(self.energy)
        de = np.diff(np.concatenate([[self.energy_start], e]))
        c = np.asarray(self.dissipation) - 0.5 * (np.asarray(self.martingale) - de)
        return c / (self.nu * self.dt)

    def drift(self, injection: float) -> float:
        """Realised ``<A1u,u>(T) - <A1u,u>(0) + 2 int <(nu A2+A3)u,u> - T injection - martingale``."""
        T = self.n_steps * self.dt
        return (self.energy[-1] - self.energy_start + 2.0 * math.fsum(self.dissipation)
                - T * injection - math.fsum(self.martingale))


def noise_increment(
    noise: NoiseSpectrum, params: ModelParams, dt: float, rng: np.random.Generator, L_max: int
) -> State:
    """``dzeta = sum_i b_i sqrt(dt) xi_i E_i`` with ``b_i = nu**alpha b'_i``."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    nmap = NoiseMap.build(noise, L_max)
    b = noise.effective(params.nu, params.alpha)
    xi = rng.standard_normal(len(noise))
    return State(nmap.scatter(b * math.sqrt(dt) * xi, L_max))


def semi_implicit_step(
    s: State,
    params: ModelParams,
    ops: PerModeOperators,
    noise: NoiseSpectrum,
    dt: float,
    rng: np.random.Generator | None,
    grid: SphericalGrid | None = None,
    linear: bool = False,
) -> State:
    """Advance ``s`` by one step; ``rng=None`` switches the forcing off."""
    stepper = Stepper(params, noise, s.L_max, dt, grid=grid, linear=linear, ops=ops)
    xi = None if rng is None else rng.standard_normal(len(noise))
    out = stepper.step(s.coeffs, xi)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite state after step of size {dt}")
    return State(out)


# -- checkpoints ----------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return {"__uint64__": [int(v) for v in x.ravel()]} if x.dtype == np.uint64 else x.tolist()
    if isinstance(x, np.integer):
        return int(x)
    return x


def _from_jsonable(x):
    if isinstance(x, dict):
        if "__uint64__" in x:
            return np.array(x["__uint64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in x.items()}
    return x


@dataclasses.dataclass(frozen=True)
class TrajectoryCheckpoint:
    """Restart point: time, step index, coefficients and RNG stream position."""

    time: float
    step: int
    state: State
    rng_state: dict
    params: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        c = self.state.coeffs
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "time": self.time,
            "step": self.step,
            "L_max": self.state.L_max,
            "params": self.params,
            "coeffs": {"real": c.real.tolist(), "imag": c.imag.tolist()},
            "rng": _jsonable(self.rng_state),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryCheckpoint":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError("not a version-1 baroclinic checkpoint")
        c = np.array(d["coeffs"]["real"]) + 1j * np.array(d["coeffs"]["imag"])
        if c.shape[1] != d["L_max"] + 1:
            raise ConfigurationError("checkpoint L_max does not match coefficients")
        return cls(float(d["time"]), int(d["step"]), State(c), _from_jsonable(d["rng"]), d.get("params", {}))

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrajectoryCheckpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def rng(self) -> np.random.Generator:
        bg = np.random.Philox()
        bg.state = self.rng_state
        return np.random.Generator(bg)


# -- trajectories ------------------------------------------------------------------


@dataclasses.dataclass
class TrajectorySummary:
    final_state: State
    t_final: float
    steps: int
    n_samples: int
    diverged: bool = False
    blowup_time: float | None = None
    blowup_norm: float | None = None
    checkpoint: TrajectoryCheckpoint | None = None


def simulate(
    initial: State | TrajectoryCheckpoint,
    params: ModelParams,
    noise: NoiseSpectrum,
    config: IntegratorConfig,
    observers: Iterable[Observer] = (),
    *,
    grid: SphericalGrid | None = None,
    linear: bool = False,
    member: int = 0,
    coriolis_theta: float = 0.5,
    checkpoint_path: str | os.PathLike | None = None,
    budget: EnergyBudget | None = None,
) -> TrajectorySummary:
    """Integrate to ``config.t_end`` calling ``observer(t, state)`` on samples.

    Samples are taken every ``sample_every`` steps from the first step at or
    after ``burn_in``. Passing a checkpoint as ``initial`` resumes the run
    bit-exactly. If ``|||u|||_2`` exceeds ``blowup_norm`` (or stops being
    finite) the run stops and the summary is flagged divergent.
    """
    observers = list(observers)
    if isinstance(initial, TrajectoryCheckpoint):
        coeffs, k0, rng = initial.state.coeffs, initial.step, initial.rng()
    else:
        coeffs, k0, rng = initial.coeffs, 0, make_rng(config.seed, member)
    L = coeffs.shape[1] - 1
    stepper = Stepper(params, noise, L, config.dt, grid=grid, linear=linear,
                      coriolis_theta=coriolis_theta)
    n, k_burn, stride = config.n_steps, config.burn_in_steps, config.sample_every
    n_samples = 0
    params_dict = params.to_dict()

    def checkpoint(k: int) -> TrajectoryCheckpoint:
        cp = TrajectoryCheckpoint(k * config.dt, k, State(coeffs), rng.bit_generator.state, params_dict)
        if checkpoint_path is not None:
            cp.save(checkpoint_path)
        return cp

    def sample(k: int) -> None:
        nonlocal n_samples
        if k >= k_burn and (k - k_burn) % stride == 0:
            s = State(coeffs)
            t = k * config.dt
            for obs in observers:
                obs(t, s)
            n_samples += 1

    if k0 == 0:
        sample(0)
    n_noise = stepper.n_noise
    for k in range(k0 + 1, n + 1):
        dz = stepper.increment(rng.standard_normal(n_noise)) if n_noise else None
        prev, coeffs = coeffs, stepper.step_forced(coeffs, dz)
        if budget is not None:
            budget.update(k, prev, dz, coeffs, config.dt)
        norm = stepper.h2_norm(coeffs)
        if not (norm <= config.blowup_norm):
            return TrajectorySummary(State(coeffs), k * config.dt, k, n_samples, True, k * config.dt, norm)
        sample(k)
        if config.checkpoint_every and k % config.checkpoint_every == 0:
            checkpoint(k)
    final = max(n, k0)
    cp = checkpoint(final)
    return TrajectorySummary(State(coeffs), final * config.dt, final, n_samples, checkpoint=cp)


# -- rescaling -----------------------------------------------------------------------


def rescale_config(params: ModelParams, noise: NoiseSpectrum) -> tuple[ModelParams, NoiseSpectrum]:
    """Parameters of ``v(t) = nu**beta u(nu**beta t)`` with ``beta = 1/2 - alpha``.

    The rescaled system has viscosity ``nu**(1 + beta)``, noise exponent 1/2,
    planetary vorticity ``coriolis_scale * nu**beta`` and friction scaled by
    ``nu**beta`` (unchanged primed values under scaled friction).
    """
    if not params.alpha < 0.5:
        raise ConfigurationError(f"rescaling needs alpha < 0.5, got {params.alpha}")
    beta = 0.5 - params.alpha
    nu = params.nu
    f = nu**beta
    kw = dict(nu=nu ** (1.0 + beta), alpha=0.5, coriolis_scale=params.coriolis_scale * f)
    if not params.scaled_friction:
        kw.update(k0=params.k0 * f, k1=params.k1 * f, rho=params.rho * f)
    return params.replace(**kw), noise


def rescale_time(config: IntegratorConfig, params: ModelParams) -> IntegratorConfig:
    """Integrator settings for the rescaled system matching ``config`` step for step."""
    f = params.nu ** (params.alpha - 0.5)  # nu**-beta
    burn = None if config.burn_in is None else config.burn_in * f
    return config.replace(dt=config.dt * f, t_end=config.t_end * f, burn_in=burn)
