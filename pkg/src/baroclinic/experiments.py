"""Experiment configuration and drivers behind the command-line interface."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import ConfigurationError
from .integrator import (
    EnergyBudget,
    IntegratorConfig,
    TrajectorySummary,
    rescale_config,
    rescale_time,
    simulate,
)
from .model import (
    ModelParams,
    State,
    constants_report,
    lower_bound_h1,
    stability_check,
    threshold_value,
)
from .noise import NoiseSpectrum
from .oracle import oracle_moments
from .sphere import SphericalGrid
from .stats import (
    FUNCTIONALS,
    BalanceReport,
    EmpiricalSample,
    MomentAccumulator,
    balance_residual,
    bl_distance,
    budget_balance,
    dirac_sample,
    exp_moment,
)

REGIMES = ("scaled", "fixed")
N_SE = 3.0
VERSION = f"baroclinic-{__version__}"
MAX_DISTANCE_POINTS = 2000


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run; serialisable as flat JSON.

    Friction values ``k0``, ``k1``, ``rho`` are the primed (viscosity-free)
    coefficients under ``regime="scaled"`` and the literal coefficients under
    ``regime="fixed"``. Each sweep point runs for
    ``max(t_end, horizon_per_nu / nu)`` time units.
    """

    nu: float = 0.1
    nu_list: tuple[float, ...] = (0.1, 0.03, 0.01, 0.003)
    alpha: float = 0.5
    gamma: float = 0.5
    k0: float = 0.5
    k1: float = 0.5
    rho: float = 0.2
    variant: str = "a3"
    regime: str = "scaled"
    coriolis_scale: float = 2.0
    noise: dict = dataclasses.field(
        default_factory=lambda: {"isotropic": {"l_max": 3, "amplitude": 1.0, "layers": [1, 2], "total": True}}
    )
    L_max: int = 15
    n_lat: int | None = None
    n_lon: int | None = None
    dt: float = 0.04
    t_end: float = 2000.0
    horizon_per_nu: float = 0.0
    burn_in_fraction: float = 0.2
    sample_every: int = 10
    blowup_norm: float = 1e6
    seed: int = 0
    members: int = 4
    workers: int = 1
    linear: bool = False
    rescale: bool = False
    coriolis_theta: float = 0.5
    initial_amplitude: float = 0.0  # 0 starts from rest
    initial_decay: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "nu_list", tuple(float(v) for v in self.nu_list))

    # -- construction -------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["nu_list"] = list(self.nu_list)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- derived objects ------------------------------------------------------------

    def noise_spectrum(self) -> NoiseSpectrum:
        n = self.noise
        if "isotropic" in n:
            iso = dict(n["isotropic"])
            return NoiseSpectrum.isotropic(
                int(iso.get("l_max", 3)), float(iso.get("amplitude", 1.0)),
                tuple(iso.get("layers", (1, 2))), bool(iso.get("total", False)),
            )
        if "entries" in n:
            return NoiseSpectrum.from_dict(n)
        raise ConfigurationError("noise must contain 'isotropic' or 'entries'")

    def params(self, nu: float | None = None, alpha: float | None = None) -> ModelParams:
        return ModelParams(
            nu=self.nu if nu is None else nu,
            gamma=self.gamma, rho=self.rho, k0=self.k0, k1=self.k1,
            alpha=self.alpha if alpha is None else alpha,
            variant=self.variant, coriolis_scale=self.coriolis_scale,
            scaled_friction=self.regime == "scaled",
        )

    def horizon(self, nu: float) -> float:
        return max(self.t_end, self.horizon_per_nu / nu)

    def integrator(self, nu: float) -> IntegratorConfig:
        T = self.horizon(nu)
        return IntegratorConfig(
            dt=self.dt, t_end=T, seed=self.seed, burn_in=self.burn_in_fraction * T,
            sample_every=self.sample_every, blowup_norm=self.blowup_norm,
        )

    def grid(self) -> SphericalGrid:
        return SphericalGrid.for_truncation(self.L_max, self.n_lat, self.n_lon)

    def validate(self, nus: Sequence[float] | None = None) -> None:
        """Raise :class:`ConfigurationError` naming the first violated constraint."""
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.members < 1 or self.workers < 1:
            raise ConfigurationError("members and workers must be >= 1")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ConfigurationError("burn_in_fraction must lie in [0, 1)")
        if list(self.nu_list) != sorted(self.nu_list, reverse=True):
            raise ConfigurationError("nu_list must be sorted in descending order")
        noise = self.noise_spectrum()
        if noise.l_max() > self.L_max:
            raise ConfigurationError(f"noise reaches degree {noise.l_max()} beyond L_max={self.L_max}")
        if not self.linear:
            self.grid()  # dealiasing capacity
        for nu in nus if nus is not None else (self.nu,):
            p = self.params(nu)
            chk = stability_check(p)
            if not chk.within:
                raise ConfigurationError(
                    f"k0={chk.k0:.6g} exceeds the stability threshold {chk.threshold:.6g} at nu={nu}"
                )
            self.integrator(nu)


# -- single runs and ensembles ---------------------------------------------------------


@dataclasses.dataclass
class RunResult:
    nu: float
    params: ModelParams
    accumulator: MomentAccumulator
    budgets: list[EnergyBudget]
    summaries: list[TrajectorySummary]

    @property
    def diverged(self) -> bool:
        return any(s.diverged for s in self.summaries)

    @property
    def blowup_time(self) -> float | None:
        times = [s.blowup_time for s in self.summaries if s.diverged]
        return min(times) if times else None


def initial_state(cfg: ExperimentConfig, member: int = 0) -> State:
    """Rest, or a seeded random state with spectrum decaying like ``l**-initial_decay``."""
    if cfg.initial_amplitude == 0.0:
        return State.zeros(cfg.L_max)
    rng = np.random.default_rng([cfg.seed, member, 1])
    return State.random(cfg.L_max, rng, cfg.initial_amplitude, cfg.initial_decay)


def _run_member(args) -> tuple[MomentAccumulator, EnergyBudget, TrajectorySummary]:
    cfg, params, icfg, member, exp_rate, track = args
    noise = cfg.noise_spectrum()
    acc = MomentAccumulator(params, cfg.L_max, exp_rate=exp_rate)
    budget = EnergyBudget(params, cfg.L_max, icfg.burn_in_steps) if track else None
    grid = None if cfg.linear else cfg.grid()
    summary = simulate(
        initial_state(cfg, member), params, noise, icfg, [acc], grid=grid, linear=cfg.linear,
        member=member, coriolis_theta=cfg.coriolis_theta, budget=budget,
    )
    return acc, budget, summary


def run_ensemble(
    cfg: ExperimentConfig,
    params: ModelParams,
    icfg: IntegratorConfig,
    exp_rate: float | None = None,
    track_budget: bool = True,
    members: int | None = None,
) -> RunResult:
    """Run ``members`` independent trajectories and merge their statistics in member order."""
    members = cfg.members if members is None else members
    jobs = [(cfg, params, icfg, m, exp_rate, track_budget) for m in range(members)]
    if cfg.workers > 1 and members > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(cfg.workers, members)) as pool:
            results = list(pool.map(_run_member, jobs))
    else:
        results = [_run_member(j) for j in jobs]
    acc = results[0][0]
    for other, _, _ in results[1:]:
        acc = acc.merge(other)
    budgets = [b for _, b, _ in results if b is not None]
    return RunResult(params.nu, params, acc, budgets, [s for _, _, s in results])


def default_exp_rate(params: ModelParams, noise: NoiseSpectrum) -> float:
    c = constants_report(params, noise)
    return c.kappa_star * params.nu


# -- sweep ---------------------------------------------------------------------------------


SWEEP_COLUMNS = (
    "nu", "alpha", "variant", "regime", "seed", "members", "L_max", "dt", "t_end",
    "n_samples", "diverged", "blowup_time",
    "h0", "h0_se", "h1", "h1_se", "h2", "h2_se", "h3", "h3_se",
    "a2_a1", "a2_a1_se", "a3", "a3_se", "exp_moment", "exp_moment_se", "exp_saturated",
    "c1", "c2", "c3", "c4", "h1_lower_bound", "h3_bound", "C1", "C4",
    "balance_lhs", "balance_residual", "balance_se", "balance_cv_residual", "balance_cv_se",
    "pass_a2_a1_le_c1", "pass_h1_ge_bound", "pass_exp_le_c4", "pass_h3_le_bound",
    "pass_a2_a1_le_C1", "pass_h1_ge_C4",
    "dist_prev_nu", "dist_dirac",
    "rescaled_nu", "rescaled_h2", "rescaled_h2_se", "rescale_max_z",
    "config_hash", "version",
)


def _norm_sample(acc: MomentAccumulator, name: str = "h3") -> EmpiricalSample:
    """Pushforward under ``u -> |||u|||_p``, thinned evenly to a bounded size."""
    v = np.sqrt(np.maximum(acc.series(name), 0.0))
    if len(v) > MAX_DISTANCE_POINTS:
        idx = np.linspace(0, len(v) - 1, MAX_DISTANCE_POINTS).round().astype(int)
        v = v[idx]
    return EmpiricalSample(name + "_norm", v)


def sweep_point(cfg: ExperimentConfig, nu: float) -> tuple[dict, RunResult, RunResult | None]:
    """All statistics and bound checks for one viscosity."""
    noise = cfg.noise_spectrum()
    params = cfg.params(nu)
    c = constants_report(params, noise)
    icfg = cfg.integrator(nu)
    res = run_ensemble(cfg, params, icfg, exp_rate=c.kappa_star * nu)
    row: dict[str, Any] = dict(
        nu=nu, alpha=cfg.alpha, variant=cfg.variant, regime=cfg.regime, seed=cfg.seed,
        members=cfg.members, L_max=cfg.L_max, dt=cfg.dt, t_end=icfg.t_end,
        n_samples=res.accumulator.count, diverged=res.diverged, blowup_time=res.blowup_time,
        c1=c.c1, c2=c.c2, c3=c.c3, c4=c.c4, h1_lower_bound=lower_bound_h1(c, nu),
        h3_bound=c.b**2 / (2.0 * nu), C1=c.C1, C4=c.C4,
        config_hash=cfg.config_hash(), version=VERSION,
    )
    acc = res.accumulator
    if acc.count >= 2 and not acc.poisoned:
        for k in ("h0", "h1", "h2", "h3", "a2_a1", "a3"):
            row[k], row[k + "_se"] = acc.mean(k), acc.se(k)
        e = exp_moment(acc)
        row.update(exp_moment=e.mean, exp_moment_se=e.se, exp_saturated=e.saturated)
        bal = balance_residual(acc, c)
        row.update(balance_lhs=bal.lhs, balance_residual=bal.residual, balance_se=bal.se)
        if res.budgets and all(b.n_steps for b in res.budgets):
            cv = budget_balance(res.budgets, c)
            row.update(balance_cv_residual=cv.residual, balance_cv_se=cv.se)
        row.update(bound_flags(row))
    rescaled = None
    if cfg.rescale and cfg.alpha < 0.5 and not res.diverged and acc.count >= 2:
        rescaled = run_rescaled(cfg, params, icfg)
        beta = 0.5 - cfg.alpha
        f = nu ** (2 * beta)
        racc = rescaled.accumulator
        z = []
        for k in ("h0", "h1", "h2", "h3"):
            se = math.hypot(racc.se(k), f * acc.se(k))
            z.append(abs(racc.mean(k) - f * acc.mean(k)) / se if se > 0 else math.inf)
        row.update(rescaled_nu=rescaled.nu, rescaled_h2=racc.mean("h2"), rescaled_h2_se=racc.se("h2"),
                   rescale_max_z=max(z))
    return row, res, rescaled


def run_rescaled(cfg: ExperimentConfig, params: ModelParams, icfg: IntegratorConfig) -> RunResult:
    """The system for ``v(t) = nu**beta u(nu**beta t)`` driven by the same random streams."""
    noise = cfg.noise_spectrum()
    rparams, _ = rescale_config(params, noise)
    ricfg = rescale_time(icfg, params)
    return run_ensemble(cfg, rparams, ricfg, exp_rate=0.0, track_budget=False)


def bound_flags(row: dict, n_se: float = N_SE) -> dict:
    """Stationary-measure inequalities with an ``n_se`` standard-error margin."""
    def le(x, se, bound):
        return bool(x - n_se * se <= bound)

    def ge(x, se, bound):
        return bool(x + n_se * se >= bound)

    flags = {
        "pass_a2_a1_le_c1": le(row["a2_a1"], row["a2_a1_se"], row["c1"]),
        "pass_h1_ge_bound": ge(row["h1"], row["h1_se"], row["h1_lower_bound"]),
        "pass_exp_le_c4": le(row["exp_moment"], row["exp_moment_se"], row["c4"]),
        "pass_h3_le_bound": le(row["h3"], row["h3_se"], row["h3_bound"]),
    }
    if row["alpha"] == 0.5:
        flags["pass_a2_a1_le_C1"] = le(row["a2_a1"], row["a2_a1_se"], row["C1"])
        flags["pass_h1_ge_C4"] = ge(row["h1"], row["h1_se"], row["C4"])
    return flags


@dataclasses.dataclass
class SweepResult:
    rows: list[dict]
    runs: list[RunResult]
    rescaled: list[RunResult | None]

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.rows], dtype=float)

    @property
    def bounds_ok(self) -> bool:
        return all(v for r in self.rows for k, v in r.items() if k.startswith("pass_"))


def sweep_nu(cfg: ExperimentConfig, nus: Sequence[float] | None = None) -> SweepResult:
    """Run every viscosity of the sweep; blow-ups are recorded and the sweep continues."""
    nus = tuple(cfg.nu_list if nus is None else nus)
    cfg.validate(nus)
    rows, runs, rescaled = [], [], []
    prev = None
    for nu in nus:
        row, res, rres = sweep_point(cfg, nu)
        if res.accumulator.count >= 2 and not res.accumulator.poisoned:
            sample = _norm_sample(res.accumulator)
            row["dist_dirac"] = bl_distance(sample, dirac_sample(0.0))
            if prev is not None:
                row["dist_prev_nu"] = bl_distance(prev, sample)
            prev = sample
        rows.append(row)
        runs.append(res)
        rescaled.append(rres)
    return SweepResult(rows, runs, rescaled)


# -- regime checks ---------------------------------------------------------------------------


def _monotone(x: np.ndarray, increasing: bool) -> bool:
    d = np.diff(x)
    return bool(np.all(d > 0) if increasing else np.all(d < 0))


def regime_checks(sweep: SweepResult) -> dict[str, bool]:
    """Qualitative inviscid-limit behaviour along a descending viscosity grid."""
    alpha = sweep.rows[0]["alpha"]
    out: dict[str, bool] = {}
    if alpha > 0.5:
        h3, bound = sweep.column("h3"), sweep.column("h3_bound")
        out["h3_decreasing"] = _monotone(h3, increasing=False)
        out["h3_below_bound"] = bool(np.all(h3 - N_SE * sweep.column("h3_se") <= bound))
        out["dirac_distance_decreasing"] = _monotone(sweep.column("dist_dirac"), increasing=False)
    elif alpha == 0.5:
        out["a2_a1_below_C1"] = all(r.get("pass_a2_a1_le_C1", False) for r in sweep.rows)
        out["h1_above_C4"] = all(r.get("pass_h1_ge_C4", False) for r in sweep.rows)
    else:
        blew_up = any(r["diverged"] for r in sweep.rows)
        h2 = sweep.column("h2")
        out["blowup_flagged"] = blew_up
        out["h2_increasing"] = (not blew_up) and _monotone(h2, increasing=True)
        z = sweep.column("rescale_max_z")
        out["rescaled_match"] = bool(np.all(np.isfinite(z)) and np.all(z <= N_SE))
        out["regime_ok"] = blew_up or (out["h2_increasing"] and out["rescaled_match"])
    return out


# -- balance, linear oracle, constants ---------------------------------------------------------


def verify_balance(cfg: ExperimentConfig) -> tuple[BalanceReport, BalanceReport, RunResult]:
    """Plain and martingale-corrected balance residuals at ``cfg.nu``."""
    cfg.validate()
    params = cfg.params()
    noise = cfg.noise_spectrum()
    c = constants_report(params, noise)
    res = run_ensemble(cfg, params, cfg.integrator(cfg.nu), exp_rate=c.kappa_star * cfg.nu)
    if res.diverged:
        raise FloatingPointError(f"trajectory diverged at t={res.blowup_time}")
    return balance_residual(res.accumulator, c), budget_balance(res.budgets, c), res


@dataclasses.dataclass(frozen=True)
class LinearComparison:
    name: str
    empirical: float
    se: float
    exact: float

    @property
    def z(self) -> float:
        return abs(self.empirical - self.exact) / self.se if self.se > 0 else math.inf

    @property
    def passed(self) -> bool:
        return self.z <= N_SE


def verify_linear(cfg: ExperimentConfig) -> tuple[list[LinearComparison], RunResult]:
    """Simulate with ``B = 0`` and compare moments with the closed forms."""
    cfg = cfg.replace(linear=True)
    cfg.validate()
    params = cfg.params()
    noise = cfg.noise_spectrum()
    exact = oracle_moments(noise, params)
    res = run_ensemble(cfg, params, cfg.integrator(cfg.nu), exp_rate=exact.exp_rate, track_budget=False)
    acc = res.accumulator
    comps = [LinearComparison(f"h{p}", acc.mean(f"h{p}"), acc.se(f"h{p}"), exact.h[p]) for p in range(4)]
    comps.append(LinearComparison("a2_a1", acc.mean("a2_a1"), acc.se("a2_a1"), exact.a2_a1))
    comps.append(LinearComparison("a3", acc.mean("a3"), acc.se("a3"), exact.a3))
    e = exp_moment(acc)
    comps.append(LinearComparison("exp_moment", e.mean, e.se, exact.exp_moment))
    return comps, res


def constants_table(cfg: ExperimentConfig) -> dict:
    """Constants for ``cfg`` and the stability threshold under both operator variants."""
    cfg.validate()
    noise = cfg.noise_spectrum()
    p = cfg.params()
    out = {"config_hash": cfg.config_hash(), "version": VERSION, "nu": cfg.nu, "alpha": cfg.alpha,
           "variant": cfg.variant, "regime": cfg.regime}
    out["constants"] = constants_report(p, noise).to_dict()
    _, k1, rho = p.friction
    k0 = p.friction[0]
    out["thresholds"] = {}
    for v in ("a3", "a3hat"):
        thr = threshold_value(p.gamma, k1, rho, v)
        out["thresholds"][v] = {
            "k0": k0, "threshold": thr if math.isfinite(thr) else "inf",
            "within": k0 <= thr, "strictly_within": k0 < thr,
        }
    return out


# -- output ----------------------------------------------------------------------------------------


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    """UTF-8 CSV with a header row, fixed column order and round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv_column(path: str | Path, column: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise ConfigurationError(f"{path} has no column {column!r}")
        return np.array([float(r[column]) for r in reader if r[column] != ""])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _clean(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")


TIMESERIES_COLUMNS = ("t",) + FUNCTIONALS[:-1] + ("exp_arg", "seed", "member", "config_hash", "version")


def timeseries_rows(res: RunResult, cfg: ExperimentConfig) -> list[dict]:
    rows = []
    acc = res.accumulator
    t = acc.times()
    cols = {k: acc.series(k) for k in FUNCTIONALS}
    member_idx = np.repeat(np.arange(len(acc.segment_lengths())), acc.segment_lengths())
    h = cfg.config_hash()
    for i in range(acc.count):
        r = {"t": float(t[i]), "seed": cfg.seed, "member": int(member_idx[i]), "config_hash": h, "version": VERSION}
        for k in FUNCTIONALS:
            r[k] = float(cols[k][i])
        rows.append(r)
    return rows
