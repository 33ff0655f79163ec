"""Turnpike metrics over horizon sweeps.

Distances are measured at the left endpoint of each control interval, so
``|Q_eps,T|`` and the integral-turnpike value are sums over the same grid
and the discrete Markov inequality holds term by term.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dissipativity import (
    StorageFunction,
    SupplyRate,
    check_dissipation,
    estimate_dissipation_rate,
)
from .errors import InsufficientData
from .model import ProblemInstance, Trajectory, energy_bound
from .ocp import SolveOptions, SolveResult, solve
from .static import StaticSolution

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TurnpikeSet:
    kind: str
    point: Optional[tuple] = None
    orbit: Optional[Trajectory] = None
    include_control: bool = True
    weight: float = 1.0

    def __post_init__(self):
        if self.kind == "point":
            if self.point is None:
                raise ValueError("point turnpike set needs (y_s, u_s)")
            y, u = self.point
            object.__setattr__(self, "point", (np.asarray(y, dtype=float), np.asarray(u, dtype=float)))
        elif self.kind == "periodic-orbit":
            if self.orbit is None or self.orbit.states.shape[0] < 2:
                raise ValueError("periodic turnpike set needs an orbit with at least 2 samples")
        else:
            raise ValueError(f"unknown turnpike set kind {self.kind!r}")

    @classmethod
    def from_static(cls, static: StaticSolution, weight=1.0, include_control=True):
        return cls("point", (static.y_s, static.u_s), None, include_control, weight)

    @classmethod
    def from_orbit(cls, orbit: Trajectory, weight=1.0, include_control=False):
        return cls("periodic-orbit", None, orbit, include_control, weight)


def _pair_distances(Y, U, set_: TurnpikeSet):
    """Distances of the rows of ``Y`` (and ``U``) to the set."""
    h = set_.weight
    if set_.kind == "point":
        ys, us = set_.point
        d2 = np.sum((Y - ys) ** 2, axis=-1)
        if set_.include_control:
            d2 = d2 + np.sum((U - us) ** 2, axis=-1)
        return np.sqrt(h * d2)
    orbit = set_.orbit
    OY = orbit.states[:-1]
    d2 = np.sum((Y[:, None, :] - OY[None, :, :]) ** 2, axis=-1)
    if set_.include_control:
        d2 = d2 + np.sum((U[:, None, :] - orbit.controls[None, :, :]) ** 2, axis=-1)
    return np.sqrt(h * np.min(d2, axis=1))


def distance_to_set(y, u, set_: TurnpikeSet) -> float:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if set_.include_control:
        if u is None:
            raise ValueError("this turnpike set measures controls too; pass u")
        u = np.atleast_2d(np.asarray(u, dtype=float))
    else:
        u = np.zeros((1, 0)) if u is None else np.atleast_2d(np.asarray(u, dtype=float))
    return float(_pair_distances(y, u, set_)[0])


def trajectory_distances(traj: Trajectory, set_: TurnpikeSet) -> np.ndarray:
    """Left-endpoint distances ``d_k`` for ``k = 0 .. nt-1``."""
    return _pair_distances(traj.states[:-1], traj.controls, set_)


@dataclass(frozen=True)
class PowerRate:
    """K-class function ``gamma -> c * gamma**p``."""

    c: float
    p: float = 2.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("rate constant must be positive")
        if not self.p >= 1:
            raise ValueError("rate exponent must be >= 1")

    def __call__(self, gamma):
        return self.c * np.power(gamma, self.p)


def measure_Q_eps(traj: Trajectory, set_: TurnpikeSet, eps: float) -> float:
    """``dt * #{k : d_k > eps}``: time spent outside the eps-neighbourhood."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = trajectory_distances(traj, set_)
    return float(traj.dt * np.count_nonzero(d > eps))


def integral_turnpike(traj: Trajectory, set_: TurnpikeSet, beta: PowerRate) -> float:
    """Time average ``(1/T) sum_k dt beta(d_k)``."""
    d = trajectory_distances(traj, set_)
    return float(traj.dt * np.sum(beta(d)) / traj.horizon)


def markov_holds(traj, set_, beta: PowerRate, eps: float, slack: float = 1e-12) -> bool:
    q = measure_Q_eps(traj, set_, eps)
    return q / traj.horizon <= integral_turnpike(traj, set_, beta) / beta(eps) + slack


def l2_deviation(traj: Trajectory, static: StaticSolution, weight: float) -> float:
    """Unaveraged ``sum_k dt (|y_k - y_s|^2 + |u_k - u_s|^2)_h``."""
    dy = traj.states[:-1] - static.y_s
    du = traj.controls - static.u_s
    return float(traj.dt * weight * (np.sum(dy * dy) + np.sum(du * du)))


# ---------------------------------------------------------------------------
# Horizon sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HorizonRow:
    T: float
    value: float
    gap: float
    scaled_gap: float
    measures: dict
    integral_turnpike: float
    l2_deviation: float
    markov_ok: dict
    bound_ok: dict
    uniform_bound_ok: dict
    dissip_min_residual: float
    converged: bool
    stationarity: float
    trajectory: Trajectory = field(repr=False, default=None)


@dataclass(frozen=True, eq=False)
class GapFit:
    slope: float
    intercept: float
    used: int
    excluded: int
    saturated: bool


@dataclass(frozen=True, eq=False)
class TurnpikeReport:
    rows: tuple
    static_value: float
    epsilons: tuple
    rate: float
    storage_bound: float
    e_radius: float
    mode: str
    fit: Optional[GapFit] = None

    @property
    def horizons(self):
        return [r.T for r in self.rows]

    @property
    def gaps(self):
        return np.array([r.gap for r in self.rows])

    def uniform_measure_bound(self, eps) -> float:
        """``2M / alpha(eps)`` from the strict dissipation inequality."""
        return 2.0 * self.storage_bound / (self.rate * eps**2)

    def empirical_lambda(self, eps) -> float:
        """Largest observed ``|Q_eps,T|`` over the sweep (an estimate of Lambda(eps))."""
        return max(r.measures[eps] for r in self.rows)

    @property
    def flags(self) -> list:
        out = []
        for r in self.rows:
            if not r.converged:
                out.append(f"T={r.T:g}: solver did not converge")
            for eps in self.epsilons:
                if not r.markov_ok[eps]:
                    out.append(f"T={r.T:g} eps={eps:g}: Markov inequality violated")
                if not r.bound_ok[eps]:
                    out.append(f"T={r.T:g} eps={eps:g}: measure exceeds the dissipativity bound")
            if r.dissip_min_residual < -1e-8:
                out.append(f"T={r.T:g}: dissipation residual {r.dissip_min_residual:.3e}")
            if self.mode == "free-initial" and r.gap > 1e-7:
                out.append(f"T={r.T:g}: value exceeds the static value")
        return out


def _solve_one(args):
    inst, options = args
    return solve(inst, options)


def horizon_sweep(
    base: ProblemInstance,
    horizons: Sequence[float],
    epsilons: Sequence[float],
    options: SolveOptions,
    static: StaticSolution,
    storage: Optional[StorageFunction] = None,
    supply: Optional[SupplyRate] = None,
    rate: Optional[float] = None,
    e_radius: Optional[float] = None,
    jobs: int = 1,
    certify_with: Sequence[Trajectory] = (),
) -> TurnpikeReport:
    """Solve on every horizon (fixed ``dt``) and collect turnpike metrics.

    ``options.free_initial`` selects the free-initial problem; otherwise the
    base instance's ``y0`` is used.  The default storage/supply pair is
    ``S = -<phi_s, y>_h`` with the shifted cost; ``rate`` defaults to the
    strict rate certified on the sweep's own optimal trajectories plus any
    ``certify_with`` trajectories.
    """
    horizons = [float(T) for T in horizons]
    if sorted(horizons) != horizons or len(set(horizons)) != len(horizons):
        raise ValueError("horizons must be strictly increasing")
    epsilons = tuple(float(e) for e in epsilons)
    h = base.weight
    mode = "free-initial" if (options.free_initial or base.y0 is None) else "fixed-initial"
    dt = base.dt
    instances = [base.with_horizon(T, dt) for T in horizons]
    if jobs > 1 and len(instances) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, [(i, options) for i in instances]))
    else:
        results = [solve(i, options) for i in instances]

    trajs = [r.trajectory for r in results]
    if e_radius is None:
        e_radius = energy_bound(base)
        peak = max(float(np.max(np.sqrt(h * np.sum(t.states**2, axis=1)))) for t in trajs)
        e_radius = max(e_radius, peak) if np.isfinite(e_radius) else peak
    if supply is None:
        supply = SupplyRate.shifted_cost(base, static)
    if storage is None:
        storage = StorageFunction.from_multiplier(static, h, e_radius)
    elif storage.e_radius != e_radius:
        storage = StorageFunction(storage.kind, storage.weight, storage.parameter, storage.offset, e_radius)
    if rate is None:
        est = estimate_dissipation_rate(list(certify_with) + trajs, storage, supply)
        rate = est.rate if est.rate > 0 else 0.0
    M = storage.bound
    beta = PowerRate(rate) if rate > 0 else None
    point = TurnpikeSet.from_static(static, h, include_control=True)

    rows = []
    for T, res in zip(horizons, results):
        tr = res.trajectory
        gap = res.value - static.value
        d = trajectory_distances(tr, point)
        measures = {e: float(tr.dt * np.count_nonzero(d > e)) for e in epsilons}
        it_val = float(tr.dt * np.sum(beta(d)) / T) if beta else float("nan")
        markov, bound, uniform = {}, {}, {}
        for e in epsilons:
            if beta is None:
                markov[e] = bound[e] = uniform[e] = False
                continue
            a = beta(e)
            markov[e] = bool(measures[e] / T <= it_val / a + 1e-12)
            bound[e] = bool(measures[e] / T <= (gap + 2.0 * M / T) / a + 1e-8)
            uniform[e] = bool(measures[e] <= 2.0 * M / a + 1e-6)
        diss = check_dissipation(tr, storage, supply)
        rows.append(
            HorizonRow(
                T=T,
                value=res.value,
                gap=gap,
                scaled_gap=T * gap,
                measures=measures,
                integral_turnpike=it_val,
                l2_deviation=l2_deviation(tr, static, h),
                markov_ok=markov,
                bound_ok=bound,
                uniform_bound_ok=uniform,
                dissip_min_residual=diss.min_residual,
                converged=res.converged,
                stationarity=res.stationarity,
                trajectory=tr,
            )
        )
    report = TurnpikeReport(tuple(rows), static.value, epsilons, rate, M, e_radius, mode)
    try:
        fit = fit_gap_rate(report)
    except InsufficientData as exc:
        log.info("gap rate not fitted: %s", exc)
        fit = None
    return TurnpikeReport(tuple(rows), static.value, epsilons, rate, M, e_radius, mode, fit)


def fit_gap_rate(report_or_data, gaps=None) -> GapFit:
    """Least-squares slope of ``log(gap)`` against ``log(T)``.

    Accepts a :class:`TurnpikeReport` or explicit ``(horizons, gaps)``.
    Rows with non-positive gaps are excluded and counted.
    """
    if gaps is None:
        T = np.array(report_or_data.horizons, dtype=float)
        G = report_or_data.gaps
    else:
        T = np.asarray(report_or_data, dtype=float)
        G = np.asarray(gaps, dtype=float)
    keep = G > 0
    excluded = int(np.count_nonzero(~keep))
    if np.count_nonzero(keep) < 3:
        raise InsufficientData(f"need 3 horizons with positive gaps, have {int(np.count_nonzero(keep))}")
    slope, intercept = np.polyfit(np.log(T[keep]), np.log(G[keep]), 1)
    return GapFit(float(slope), float(intercept), int(np.count_nonzero(keep)), excluded, bool(abs(slope + 1) > 0.3))


def viability_gaps(base: ProblemInstance, static: StaticSolution, horizons, options: SolveOptions):
    """Fixed-initial values from ``y_s``: ``V_T(y_s) - J_s`` per horizon and ``M' = max T*gap/2``."""
    gaps = []
    for T in horizons:
        inst = base.with_horizon(T).replace(y0=static.y_s)
        res = solve(inst, SolveOptions(**{**options.__dict__, "free_initial": False}))
        gaps.append(res.value - static.value)
    gaps = np.array(gaps)
    m_prime = float(np.max(np.asarray(horizons) * np.abs(gaps)) / 2.0)
    return gaps, m_prime
