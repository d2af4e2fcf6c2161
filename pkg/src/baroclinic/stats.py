"""Empirical stationary statistics along trajectories."""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .model import ConstantsReport, ModelParams, State, a1_inverse_weights, layer_spectra, operator_matrices
from .sphere import eigenvalues

FUNCTIONALS = ("h0", "h1", "h2", "h3", "a2_a1", "a3", "a3_primed", "a1_norm0_sq", "exp_arg")
EXP_OVERFLOW_GUARD = 700.0
DEFAULT_BATCHES = 32


def functional_weights(params: ModelParams, L_max: int, exp_rate: float = 0.0) -> np.ndarray:
    """Matrix ``W`` with ``W @ concat(p1, p2, x)`` = every tracked functional."""
    lam = eigenvalues(L_max)
    A1, A2, A3 = operator_matrices(params, L_max)
    W = np.zeros((len(FUNCTIONALS), 3 * (L_max + 1)))

    def form(M):
        return np.concatenate([M[:, 0, 0], M[:, 1, 1], M[:, 0, 1] + M[:, 1, 0]])

    pos = lam > 0
    for p in range(4):
        w = np.where(pos, lam, 1.0) ** p * pos
        W[p] = np.concatenate([w, w, np.zeros_like(w)])
    T = np.transpose(A1, (0, 2, 1))
    W[4] = form(T @ A2)
    W[5] = form(A3)
    W[6] = form(A3) / params.nu
    W[7] = form(T @ A1)
    W[8] = exp_rate * W[7]
    return W


def batch_means_se(x: np.ndarray, n_batches: int = DEFAULT_BATCHES) -> float:
    """Standard error of the mean from ``n_batches`` contiguous batch means.

    Leading samples that do not fill a batch are dropped. Needs at least two
    samples; with fewer samples than batches each sample is its own batch.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return math.nan
    k = min(n_batches, n)
    size = n // k
    means = x[n - k * size:].reshape(k, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(k))


@dataclasses.dataclass
class EmpiricalSample:
    """Sampled values of one scalar functional and their times."""

    name: str
    values: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)
            if self.times.shape != self.values.shape:
                raise ValueError("times and values differ in length")

    def __len__(self) -> int:
        return len(self.values)


class MomentAccumulator:
    """Online sample store for the tracked functionals.

    Every call to :meth:`record` appends one value per functional. Means and
    variances use correctly rounded summation, so they do not depend on the
    order in which samples or merged accumulators arrive. Standard errors are
    batch means computed separately for every merged segment (one segment per
    trajectory) and pooled.
    """

    def __init__(self, params: ModelParams, L_max: int, exp_rate: float | None = None,
                 n_batches: int = DEFAULT_BATCHES):
        self.params = params
        self.L_max = L_max
        self.exp_rate = 0.0 if exp_rate is None else float(exp_rate)
        self.n_batches = n_batches
        self._W = functional_weights(params, L_max, self.exp_rate)
        self._segments: list[list[np.ndarray]] = [[]]
        self._times: list[list[float]] = [[]]
        self.poisoned = False
        self.saturated = 0

    # -- recording --------------------------------------------------------------

    def record(self, s: State, t: float = math.nan) -> "MomentAccumulator":
        p1, p2, x = layer_spectra(s.coeffs)
        self.record_values(self._W @ np.concatenate([p1, p2, x]), t)
        return self

    def record_values(self, values: np.ndarray | Mapping[str, float], t: float = math.nan) -> None:
        if isinstance(values, Mapping):
            values = np.array([values.get(k, 0.0) for k in FUNCTIONALS], dtype=float)
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            self.poisoned = True
        if values[-1] > EXP_OVERFLOW_GUARD:
            self.saturated += 1
        self._segments[-1].append(values)
        self._times[-1].append(t)

    def __call__(self, t: float, s: State) -> None:
        self.record(s, t)

    # -- combination --------------------------------------------------------------

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """New accumulator holding ``self``'s samples followed by ``other``'s."""
        if other.L_max != self.L_max or other.exp_rate != self.exp_rate or other.params != self.params:
            raise ValueError("cannot merge accumulators of different configurations")
        out = MomentAccumulator(self.params, self.L_max, self.exp_rate, self.n_batches)
        out._segments = [list(seg) for seg in self._segments + other._segments if seg]
        out._times = [list(t) for t, seg in zip(self._times + other._times, self._segments + other._segments) if seg]
        if not out._segments:
            out._segments, out._times = [[]], [[]]
        out.poisoned = self.poisoned or other.poisoned
        out.saturated = self.saturated + other.saturated
        return out

    # -- queries --------------------------------------------------------------------

    @property
    def count(self) -> int:
        return sum(len(s) for s in self._segments)

    def segment_lengths(self) -> list[int]:
        """Sample counts of the merged trajectories, in merge order."""
        return [len(s) for s in self._segments if s]

    def _segment_arrays(self) -> list[np.ndarray]:
        return [np.array(s) for s in self._segments if s]

    def series(self, name: str) -> np.ndarray:
        i = FUNCTIONALS.index(name)
        segs = self._segment_arrays()
        return np.concatenate([s[:, i] for s in segs]) if segs else np.empty(0)

    def times(self) -> np.ndarray:
        return np.concatenate([np.array(t) for t in self._times if t]) if self.count else np.empty(0)

    def sample(self, name: str) -> EmpiricalSample:
        return EmpiricalSample(name, self.series(name), self.times())

    def _check(self) -> None:
        if self.count == 0:
            raise ValueError("accumulator is empty")
        if self.poisoned:
            raise FloatingPointError("accumulator received a non-finite functional value")

    def mean(self, name: str) -> float:
        self._check()
        return math.fsum(self.series(name)) / self.count

    def variance(self, name: str) -> float:
        self._check()
        if self.count < 2:
            return math.nan
        x = self.series(name)
        m = math.fsum(x) / len(x)
        return math.fsum((x - m) ** 2) / (len(x) - 1)

    def _pooled_se(self, per_segment: Sequence[np.ndarray]) -> float:
        n = sum(len(x) for x in per_segment)
        if n < 2:
            return math.nan
        var = 0.0
        for x in per_segment:
            se = batch_means_se(x, self.n_batches)
            if math.isnan(se):
                return math.nan
            var += (len(x) / n) ** 2 * se**2
        return math.sqrt(var)

    def se(self, name: str) -> float:
        """Batch-means standard error of :meth:`mean` (``nan`` below 2 samples)."""
        self._check()
        i = FUNCTIONALS.index(name)
        return self._pooled_se([s[:, i] for s in self._segment_arrays()])

    def combination(self, coefs: Mapping[str, float]) -> tuple[float, float]:
        """Mean and standard error of a fixed linear combination of functionals."""
        self._check()
        c = np.array([coefs.get(k, 0.0) for k in FUNCTIONALS])
        segs = [s @ c for s in self._segment_arrays()]
        x = np.concatenate(segs)
        return math.fsum(x) / len(x), self._pooled_se(segs)

    def summary(self) -> dict:
        out = {"count": self.count}
        for k in FUNCTIONALS[:-1]:
            out[k] = self.mean(k)
            out[k + "_se"] = self.se(k)
        e = exp_moment(self)
        out["exp_moment"], out["exp_moment_se"], out["exp_saturated"] = e.mean, e.se, e.saturated
        return out


# -- balance and moments -------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class BalanceReport:
    lhs: float  # E|||u|||_2^2 + E<A3 u, u> / nu
    rhs: float  # c2
    residual: float
    se: float
    n_samples: int

    def tolerance(self, rel: float = 0.05, n_se: float = 3.0) -> float:
        return max(n_se * self.se, rel * abs(self.rhs))

    def passed(self, rel: float = 0.05, n_se: float = 3.0) -> bool:
        return abs(self.residual) <= self.tolerance(rel, n_se)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tolerance"] = self.tolerance()
        d["passed"] = self.passed()
        return d


def balance_rhs(params: ModelParams, noise) -> float:
    """``c2 = sum b_i^2 <A1^{-1} E_i, E_i> / (2 nu)``; zero for an unforced system."""
    b = noise.effective(params.nu, params.alpha)
    return float(np.sum(b**2 * a1_inverse_weights(noise, params.gamma))) / (2.0 * params.nu)


def balance_residual(acc: MomentAccumulator, constants: ConstantsReport | float) -> BalanceReport:
    """``E|||u|||_2^2 + E<A3 u, u>/nu - c2``; ``constants`` may be the report or ``c2`` itself."""
    if acc.count < 2:
        raise ValueError("balance needs at least two samples")
    rhs = constants.c2 if isinstance(constants, ConstantsReport) else float(constants)
    lhs, se = acc.combination({"h2": 1.0, "a3_primed": 1.0})
    return BalanceReport(lhs, rhs, lhs - rhs, se, acc.count)


def budget_balance(budgets: Sequence, constants: ConstantsReport, n_batches: int = DEFAULT_BATCHES) -> BalanceReport:
    """Balance residual from per-step energy budgets, forcing martingale removed.

    Estimates the same stationary quantity as :func:`balance_residual` but
    with every step contributing, and with the variance of the forcing
    removed, so the discretisation bias stands out from sampling noise.
    """
    segs = [b.corrected_increments() for b in budgets if b.n_steps]
    if sum(len(s) for s in segs) < 2:
        raise ValueError("balance needs at least two steps")
    x = np.concatenate(segs)
    lhs = math.fsum(x) / len(x)
    n = len(x)
    se = math.sqrt(sum((len(s) / n) ** 2 * batch_means_se(s, n_batches) ** 2 for s in segs))
    return BalanceReport(lhs, constants.c2, lhs - constants.c2, se, n)


@dataclasses.dataclass(frozen=True)
class ExpMoment:
    mean: float
    se: float
    saturated: int

    @property
    def flagged(self) -> bool:
        return self.saturated > 0


def exp_moment(acc: MomentAccumulator) -> ExpMoment:
    """Empirical ``E exp(rate |||A1 u|||_0^2)``; saturated samples count as ``exp(guard)``."""
    acc._check()
    segs = [np.exp(np.minimum(s[:, -1], EXP_OVERFLOW_GUARD)) for s in acc._segment_arrays()]
    x = np.concatenate(segs)
    with np.errstate(over="ignore"):  # saturated samples make the SE infinite
        se = acc._pooled_se(segs)
    return ExpMoment(math.fsum(x) / len(x), se, int(np.sum(x >= math.exp(EXP_OVERFLOW_GUARD))))


# -- distances and tails ------------------------------------------------------------------


def _as_values(p) -> np.ndarray:
    v = p.values if isinstance(p, EmpiricalSample) else np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empty sample")
    return v


def bl_distance(p, q) -> float:
    """Dual bounded-Lipschitz distance between two empirical measures on the line.

    Solves ``max sum (p_i - q_i) psi_i`` over test values ``psi`` on the joint
    support with ``|psi_i| <= a``, ``|psi_{i+1} - psi_i| <= L gap_i`` and
    ``a + L <= 1``. On a line, adjacent Lipschitz constraints suffice and any
    such ``psi`` extends to the whole line with the same bounds.
    """
    x, y = _as_values(p), _as_values(q)
    support, inv = np.unique(np.concatenate([x, y]), return_inverse=True)
    k = len(support)
    w = (np.bincount(inv[: len(x)], minlength=k) / len(x)
         - np.bincount(inv[len(x):], minlength=k) / len(y))
    if k == 1 or not np.any(w):
        return 0.0
    # variables: psi_0..psi_{k-1}, a, L
    i = np.arange(k)
    j = np.arange(k - 1)
    gaps = np.diff(support)
    rows = np.concatenate([
        i, i, k + i, k + i,  # +/- psi_i - a <= 0
        2 * k + j, 2 * k + j, 2 * k + j,  # psi_{i+1} - psi_i - gap L <= 0
        3 * k - 1 + j, 3 * k - 1 + j, 3 * k - 1 + j,  # psi_i - psi_{i+1} - gap L <= 0
        [4 * k - 2, 4 * k - 2],  # a + L <= 1
    ])
    cols = np.concatenate([
        i, np.full(k, k), i, np.full(k, k),
        j + 1, j, np.full(k - 1, k + 1),
        j + 1, j, np.full(k - 1, k + 1),
        [k, k + 1],
    ])
    vals = np.concatenate([
        np.ones(k), -np.ones(k), -np.ones(k), -np.ones(k),
        np.ones(k - 1), -np.ones(k - 1), -gaps,
        -np.ones(k - 1), np.ones(k - 1), -gaps,
        [1.0, 1.0],
    ])
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(4 * k - 1, k + 2))
    rhs = np.zeros(4 * k - 1)
    rhs[-1] = 1.0
    c = np.concatenate([-w, [0.0, 0.0]])
    bounds = [(None, None)] * k + [(0, None), (0, None)]
    res = linprog(c, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"distance program failed: {res.message}")
    return float(max(0.0, -res.fun))


def dirac_sample(value: float = 0.0, name: str = "dirac") -> EmpiricalSample:
    return EmpiricalSample(name, np.array([float(value)]))


def tail_expectation(p, R: float) -> float:
    """Empirical ``E |xi| 1{|xi| > R}``."""
    if R < 0:
        raise ValueError("R must be >= 0")
    a = np.abs(_as_values(p))
    return float(np.sum(a[a > R]) / len(a))


def tail_profile(p, radii: Iterable[float]) -> list[tuple[float, float]]:
    return [(float(R), tail_expectation(p, R)) for R in radii]
