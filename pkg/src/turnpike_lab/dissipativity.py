"""Supply rates, storage functions and dissipation-inequality checks.

Integrals over a trajectory use left-endpoint quadrature on the
trajectory's own grid, the same rule as the cost, so residuals are exact
discrete sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCollection
from .model import ProblemInstance, Trajectory, simulate
from .ocp import SolveOptions, solve
from .static import StaticSolution

DISSIPATION_TOL = 1e-8
RATE_CAP = 1e6


# ---------------------------------------------------------------------------
# Supply rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SupplyRate:
    """Supply rate ``omega(t, y, u)``.

    kinds:
      ``shifted-cost``           ``f0(t, y, u) - f0(y_s, u_s)``
      ``shifted-cost-periodic``  ``f0(t, y, u) - f0(t, yhat(t), uhat(t))``
      ``custom-bilinear``        ``<y, B u>_h + |u|_h^2``

    ``instance`` supplies the running cost, the inner-product weight and
    ``B``.  ``reference`` is the pair the strict inequality measures
    deviations from: a :class:`StaticSolution`, a periodic
    :class:`Trajectory`, or ``None`` for the origin.
    """

    kind: str
    instance: ProblemInstance
    reference: object = None

    def __post_init__(self):
        if self.kind not in ("shifted-cost", "shifted-cost-periodic", "custom-bilinear"):
            raise ValueError(f"unknown supply rate kind {self.kind!r}")
        if self.kind == "shifted-cost" and not isinstance(self.reference, StaticSolution):
            raise ValueError("shifted-cost supply needs a StaticSolution reference")
        if self.kind == "shifted-cost-periodic":
            ref = self.reference
            if not isinstance(ref, Trajectory) or ref.nt < 1:
                raise ValueError("periodic supply needs a sampled periodic Trajectory")
            if ref.states.shape[1] != self.instance.n:
                raise ValueError("reference orbit dimension mismatch")

    @classmethod
    def shifted_cost(cls, instance, static: StaticSolution):
        return cls("shifted-cost", instance, static)

    @classmethod
    def shifted_cost_periodic(cls, instance, orbit: Trajectory):
        return cls("shifted-cost-periodic", instance, orbit)

    @classmethod
    def bilinear(cls, instance):
        return cls("custom-bilinear", instance, None)

    def running_cost(self, t, y, u):
        """Unaveraged running cost ``f0(t, y, u)``, vectorized over leading axes."""
        inst = self.instance
        c = inst.cost
        dy = y - c.target_at(t)
        return 0.5 * inst.weight * (
            c.state_weight * np.sum(dy * dy, axis=-1) + c.control_weight * np.sum(u * u, axis=-1)
        )

    def _orbit_index(self, t):
        orbit = self.reference
        s = np.mod(np.asarray(t, dtype=float) - orbit.times[0], orbit.horizon) / orbit.dt
        return np.rint(s).astype(int) % orbit.nt

    def reference_at(self, t):
        """Reference pair ``(y_ref(t), u_ref(t))`` for deviation measurements."""
        inst = self.instance
        if self.kind == "shifted-cost":
            return self.reference.y_s, self.reference.u_s
        if self.kind == "shifted-cost-periodic":
            k = self._orbit_index(t)
            return self.reference.states[k], self.reference.controls[k]
        return np.zeros(inst.n), np.zeros(inst.m)

    def __call__(self, t, y, u):
        return self.evaluate(t, y, u)

    def evaluate(self, t, y, u):
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        inst = self.instance
        if self.kind == "custom-bilinear":
            Bu = u @ inst.dynamics.B.T
            return inst.weight * (np.sum(y * Bu, axis=-1) + np.sum(u * u, axis=-1))
        if self.kind == "shifted-cost":
            return self.running_cost(t, y, u) - self.reference.value
        yr, ur = self.reference_at(t)
        return self.running_cost(t, y, u) - self.running_cost(t, yr, ur)


def supply_rate_eval(omega: SupplyRate, t, y, u) -> float:
    return float(omega.evaluate(t, y, u))


# ---------------------------------------------------------------------------
# Storage functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StorageFunction:
    """Storage ``S(y)``.

    kinds:
      ``quadratic-half-norm``  ``1/2 |y|_h^2 + offset``
      ``linear-pairing``       ``-<phi, y>_h + offset``
      ``custom-affine``        ``<a, y>_h + offset``

    ``e_radius`` is the radius of the state set ``E`` (an ``h``-norm ball
    about the origin); ``bound`` is then ``sup_E |S|``.
    """

    kind: str
    weight: float = 1.0
    parameter: Optional[np.ndarray] = None
    offset: float = 0.0
    e_radius: float = float("inf")

    def __post_init__(self):
        if self.kind not in ("quadratic-half-norm", "linear-pairing", "custom-affine"):
            raise ValueError(f"unknown storage kind {self.kind!r}")
        if self.kind != "quadratic-half-norm" and self.parameter is None:
            raise ValueError(f"{self.kind} storage needs a parameter vector")
        if self.parameter is not None:
            object.__setattr__(self, "parameter", np.asarray(self.parameter, dtype=float))

    @classmethod
    def half_norm(cls, weight=1.0, e_radius=float("inf")):
        return cls("quadratic-half-norm", weight, None, 0.0, e_radius)

    @classmethod
    def from_multiplier(cls, static: StaticSolution, weight=1.0, e_radius=float("inf")):
        """``S(y) = -<phi_s, y>_h`` built from a static solution's multiplier."""
        return cls("linear-pairing", weight, static.phi_s, 0.0, e_radius)

    @classmethod
    def from_multiplier_discrete(cls, static: StaticSolution, instance, e_radius=float("inf")):
        """``S(y) = -<(I - dt A)^T phi_s, y>_h``.

        Matched to implicit Euler with left-endpoint supply: the one-step
        storage increment equals ``dt <p_s, A y_k + B u_k>_h`` exactly, so
        the dissipation inequality holds without an ``O(dt)`` boundary term.
        """
        A = instance.dynamics.A
        phi = static.phi_s - instance.dt * (A.T @ static.phi_s)
        return cls("linear-pairing", instance.weight, phi, 0.0, e_radius)

    def shifted(self, c) -> "StorageFunction":
        return StorageFunction(self.kind, self.weight, self.parameter, self.offset + c, self.e_radius)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        h = self.weight
        if self.kind == "quadratic-half-norm":
            return 0.5 * h * np.sum(y * y, axis=-1) + self.offset
        if self.kind == "linear-pairing":
            return -h * (y @ self.parameter) + self.offset
        return h * (y @ self.parameter) + self.offset

    @property
    def bound(self) -> float:
        """``sup |S(y)|`` over ``|y|_h <= e_radius``."""
        R = self.e_radius
        h = self.weight
        if self.kind == "quadratic-half-norm":
            return 0.5 * R * R + abs(self.offset)
        return float(np.sqrt(h * self.parameter @ self.parameter)) * R + abs(self.offset)

    @property
    def infimum(self) -> float:
        """``inf S`` over the state set."""
        R = self.e_radius
        h = self.weight
        if self.kind == "quadratic-half-norm":
            return self.offset
        return -float(np.sqrt(h * self.parameter @ self.parameter)) * R + self.offset

    def sanity_check(self, samples=1000, seed=0, n=None):
        """Largest ``|S|`` over random states of the ``E`` ball; must not exceed :attr:`bound`."""
        if not np.isfinite(self.e_radius):
            return float("inf")
        if n is None:
            n = self.parameter.shape[0]
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((samples, n))
        d /= np.sqrt(self.weight * np.sum(d * d, axis=1))[:, None]
        d *= self.e_radius * rng.uniform(size=(samples, 1)) ** (1.0 / n)
        return float(np.max(np.abs(self(d))))


# ---------------------------------------------------------------------------
# Dissipation checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DissipationReport:
    """Residuals ``S(y_0) + sum_{k<j} dt omega_k - S(y_j)`` for every grid index j.

    ``deviation`` holds the matching cumulative sums
    ``sum_{k<j} dt |(y_k - y_ref, u_k - u_ref)|_h^p``.
    """

    residuals: np.ndarray
    deviation: np.ndarray
    times: np.ndarray
    min_residual: float
    violating_time: Optional[float]
    estimated_rate: Optional[float] = None

    def strict_residuals(self, c):
        return self.residuals - c * self.deviation

    def strict_min_residual(self, c) -> float:
        return float(np.min(self.strict_residuals(c)))


def _deviation_power(traj, omega, p):
    yr, ur = omega.reference_at(traj.times[:-1])
    dy = traj.states[:-1] - yr
    du = traj.controls - ur
    h = omega.instance.weight
    d2 = h * (np.sum(dy * dy, axis=-1) + np.sum(du * du, axis=-1))
    return d2 ** (p / 2.0)


def check_dissipation(traj: Trajectory, S: StorageFunction, omega: SupplyRate, p: float = 2.0) -> DissipationReport:
    """Discrete dissipation inequality along ``traj`` at every grid time."""
    t = traj.times[:-1]
    w = np.asarray(omega.evaluate(t, traj.states[:-1], traj.controls), dtype=float)
    dt = traj.dt
    supplied = np.concatenate([[0.0], np.cumsum(dt * w)])
    stored = np.asarray(S(traj.states), dtype=float)
    residuals = stored[0] + supplied - stored
    dev = np.concatenate([[0.0], np.cumsum(dt * _deviation_power(traj, omega, p))])
    mn = float(np.min(residuals))
    viol = None
    if mn < -DISSIPATION_TOL:
        viol = float(traj.times[int(np.argmax(residuals < -DISSIPATION_TOL))])
    return DissipationReport(residuals, dev, traj.times.copy(), mn, viol)


@dataclass(frozen=True, eq=False)
class RateEstimate:
    rate: float
    degenerate: bool
    violated: bool
    strict_min_residuals: tuple


def estimate_dissipation_rate(
    trajs: Sequence[Trajectory],
    S: StorageFunction,
    omega: SupplyRate,
    p: float = 2.0,
    tol: float = 1e-6,
) -> RateEstimate:
    """Largest ``c`` with ``residual_j - c * deviation_j >= -1e-8`` on every trajectory.

    Bisection on ``[0, 1e6]`` to absolute accuracy ``tol``.  A collection
    with zero deviation everywhere is degenerate and returns the cap.
    """
    trajs = list(trajs)
    if not trajs:
        raise EmptyCollection("need at least one trajectory")
    reports = [check_dissipation(tr, S, omega, p) for tr in trajs]
    R = np.concatenate([r.residuals for r in reports])
    D = np.concatenate([r.deviation for r in reports])

    def ok(c):
        return bool(np.all(R - c * D >= -DISSIPATION_TOL))

    if not ok(0.0):
        return RateEstimate(0.0, False, True, tuple(r.min_residual for r in reports))
    if ok(RATE_CAP):
        c = RATE_CAP
        degenerate = True
    else:
        lo, hi = 0.0, RATE_CAP
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
        c, degenerate = lo, False
    return RateEstimate(c, degenerate, False, tuple(r.strict_min_residual(c) for r in reports))


def random_admissible_trajectories(
    instance: ProblemInstance,
    count: int,
    seed: int = 0,
    y_radius: Optional[float] = None,
    kind: str = "mixed",
):
    """Randomized admissible trajectories for certificate tests.

    Initial states are random with ``|y0|_h`` uniform in ``[0, y_radius]``
    (default: the instance's ``y0`` norm, or 1); controls alternate between
    uniform, bang-bang, and smooth random draws inside the box.
    """
    rng = np.random.default_rng(seed)
    box = instance.controls
    lo = np.where(np.isfinite(box.lower), box.lower, -1.0)
    hi = np.where(np.isfinite(box.upper), box.upper, 1.0)
    if y_radius is None:
        y_radius = instance.norm(instance.y0) if instance.y0 is not None else 1.0
        y_radius = max(y_radius, 1e-3)
    out = []
    nt, m, n = instance.nt, instance.m, instance.n
    for i in range(count):
        style = ("uniform", "bang", "smooth")[i % 3] if kind == "mixed" else kind
        if style == "uniform":
            u = rng.uniform(lo, hi, size=(nt, m))
        elif style == "bang":
            u = np.where(rng.uniform(size=(nt, m)) < 0.5, lo, hi)
        else:
            base = rng.standard_normal((4, m))
            tt = np.linspace(0, 1, nt)[:, None]
            wave = sum(base[j] * np.sin((j + 1) * np.pi * tt + j) for j in range(4))
            u = np.clip(wave, lo, hi)
        y = rng.standard_normal(n)
        y *= y_radius * rng.uniform() / instance.norm(y)
        out.append(simulate(instance, u, y))
    return out


def available_storage_lower_bound(
    instance: ProblemInstance,
    y,
    horizons: Sequence[float],
    samples: int,
    omega: SupplyRate,
    seed: int = 0,
    ascent: bool = True,
    options: SolveOptions = SolveOptions(tolerance=1e-9),
) -> float:
    """Certified lower bound on ``S_a(y) = sup -int_0^t omega``.

    Random bang-bang controls are tried on every horizon; for shifted-cost
    supplies the best horizon is then improved by solving the fixed-initial
    problem from ``y`` (maximizing ``-int omega`` is minimizing ``int f0``).
    The empty integral (t = 0) makes the result nonnegative.
    """
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=float)
    box = instance.controls
    lo = np.where(np.isfinite(box.lower), box.lower, -1.0)
    hi = np.where(np.isfinite(box.upper), box.upper, 1.0)
    best = 0.0
    for T in horizons:
        inst = instance.with_horizon(T).replace(y0=y)
        for _ in range(samples):
            u = np.where(rng.uniform(size=(inst.nt, inst.m)) < 0.5, lo, hi)
            tr = simulate(inst, u, y)
            w = omega.evaluate(tr.times[:-1], tr.states[:-1], tr.controls)
            extracted = -np.cumsum(inst.dt * w)
            best = max(best, float(np.max(extracted)))
        if ascent and omega.kind != "custom-bilinear":
            res = solve(inst, options)
            w = omega.evaluate(res.trajectory.times[:-1], res.trajectory.states[:-1], res.trajectory.controls)
            best = max(best, float(np.max(-np.cumsum(inst.dt * w))))
    return best
