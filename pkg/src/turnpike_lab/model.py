"""Domain types, discretized problem builders and forward simulation.

States live on the interior nodes of a uniform 1-D grid with homogeneous
Dirichlet conditions.  All norms and inner products are mesh weighted,
``<x, z>_h = h * sum(x * z)``, so that they approximate L2(Omega) values.
Generic finite-dimensional instances use ``h = 1``.
"""

from __future__ import annotations

import dataclasses
import functools
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    ConstraintViolation,
    EmptyControlSupport,
    InfeasibleBox,
    SolveFailure,
)

BOX_TOL = 1e-10


def _frozen_array(a, ndim=None, name="array"):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def inner_h(x, z, h=1.0):
    return float(h * np.dot(np.ravel(x), np.ravel(z)))


def norm_h(x, h=1.0):
    return float(np.sqrt(h * np.dot(np.ravel(x), np.ravel(x))))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid of ``n`` interior nodes on ``(0, length)``."""

    n: int
    length: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"grid needs n >= 1 interior nodes, got {self.n}")
        if not self.length > 0:
            raise ValueError(f"grid length must be positive, got {self.length}")

    @property
    def h(self) -> float:
        return self.length / (self.n + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(1, self.n + 1)


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """Time-invariant linear dynamics ``y' = A y + B u``."""

    A: np.ndarray
    B: np.ndarray
    time_invariant: bool = True

    def __post_init__(self):
        A = _frozen_array(self.A, 2, "A")
        B = _frozen_array(self.B, 2, "B")
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows but A is {A.shape[0]}x{A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @cached_property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.A, self.A.T))

    @cached_property
    def poincare_constant(self) -> float:
        """Smallest eigenvalue of ``-A`` (symmetric part for nonsymmetric A).

        For the Dirichlet Laplacian this is the discrete Poincare constant
        lambda_1 with ``y^T (-A) y >= lambda_1 |y|^2``.
        """
        S = -0.5 * (self.A + self.A.T)
        return float(scipy.linalg.eigvalsh(S)[0])


@dataclass(frozen=True, eq=False)
class BoxConstraints:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen_array(self.lower, 1, "lower")
        hi = _frozen_array(self.upper, 1, "upper")
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("bounds must not be NaN")
        if np.any(lo > hi):
            i = int(np.argmax(lo > hi))
            raise InfeasibleBox(f"lower bound exceeds upper bound at component {i}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, m, lower=-np.inf, upper=np.inf):
        return cls(np.full(m, float(lower)), np.full(m, float(upper)))

    @property
    def m(self) -> int:
        return self.lower.shape[0]

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, u):
        return np.clip(u, self.lower, self.upper)

    def violations(self, u, tol=BOX_TOL):
        """Boolean mask over the leading axes of ``u``: any component out of box."""
        u = np.asarray(u, dtype=float)
        bad = (u < self.lower - tol) | (u > self.upper + tol)
        return bad.any(axis=-1)

    def max_abs(self) -> np.ndarray:
        return np.maximum(np.abs(self.lower), np.abs(self.upper))


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running cost ``1/2 (ws |y - y_d(t)|_h^2 + wc |u|_h^2)``.

    ``target`` is either a length-n vector or, when ``period`` is set, an
    array of shape ``(samples, n)`` holding one period of the target on a
    uniform sub-grid (sample ``j`` at time ``j * period / samples``).
    """

    target: np.ndarray
    control_weight: float = 1.0
    state_weight: float = 1.0
    period: Optional[float] = None

    def __post_init__(self):
        target = _frozen_array(self.target, None, "target")
        if self.period is None:
            if target.ndim != 1:
                raise ValueError("a constant target must be a vector")
        else:
            if not self.period > 0:
                raise ValueError("period must be positive")
            if target.ndim != 2 or target.shape[0] < 2:
                raise ValueError("a periodic target needs at least 2 samples of shape (samples, n)")
        if not (self.control_weight > 0 and self.state_weight > 0):
            raise ValueError("cost weights must be positive")
        object.__setattr__(self, "target", target)

    @property
    def periodic(self) -> bool:
        return self.period is not None

    @property
    def n(self) -> int:
        return self.target.shape[-1]

    def target_at(self, t):
        """Target at time(s) ``t``; periodic targets are interpolated linearly."""
        if not self.periodic:
            if np.ndim(t) == 0:
                return self.target
            return np.broadcast_to(self.target, (len(t), self.n))
        ns = self.target.shape[0]
        s = np.mod(np.asarray(t, dtype=float), self.period) * (ns / self.period)
        i0 = np.floor(s).astype(int) % ns
        i1 = (i0 + 1) % ns
        w = (s - np.floor(s))[..., None]
        return (1.0 - w) * self.target[i0] + w * self.target[i1]

    def mean_target(self):
        if not self.periodic:
            return self.target
        return self.target.mean(axis=0)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Discretized finite-horizon problem on ``[0, horizon]`` with ``nt`` steps.

    ``y0 is None`` means the initial state is free.  ``weight`` is the mesh
    width used in every inner product.
    """

    dynamics: LinearDynamics
    cost: CostSpec
    controls: BoxConstraints
    horizon: float
    nt: int
    y0: Optional[np.ndarray] = None
    control_mask: Optional[np.ndarray] = None
    weight: float = 1.0
    grid: Optional[SpatialGrid] = field(default=None, compare=False)

    def __post_init__(self):
        n, m = self.dynamics.n, self.dynamics.m
        if self.cost.n != n:
            raise ValueError(f"target has dimension {self.cost.n}, state has {n}")
        if self.controls.m != m:
            raise ValueError(f"box has {self.controls.m} components, control has {m}")
        if int(self.nt) != self.nt or self.nt < 1:
            raise ValueError(f"nt must be a positive integer, got {self.nt}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if not self.weight > 0:
            raise ValueError("inner-product weight must be positive")
        if self.y0 is not None:
            y0 = _frozen_array(self.y0, 1, "y0")
            if y0.shape[0] != n:
                raise ValueError(f"y0 has dimension {y0.shape[0]}, state has {n}")
            object.__setattr__(self, "y0", y0)
        if self.control_mask is not None:
            object.__setattr__(self, "control_mask", _frozen_array(self.control_mask, 1, "control_mask"))
        object.__setattr__(self, "nt", int(self.nt))

    @property
    def n(self) -> int:
        return self.dynamics.n

    @property
    def m(self) -> int:
        return self.dynamics.m

    @property
    def dt(self) -> float:
        return self.horizon / self.nt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.nt + 1)

    @property
    def poincare_constant(self) -> float:
        return self.dynamics.poincare_constant

    def replace(self, **changes) -> "ProblemInstance":
        return dataclasses.replace(self, **changes)

    def with_horizon(self, horizon, dt=None) -> "ProblemInstance":
        """Same instance on a new horizon, keeping the step ``dt`` fixed."""
        dt = self.dt if dt is None else dt
        nt = max(1, int(round(horizon / dt)))
        if abs(nt * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"horizon {horizon} is not a multiple of dt={dt}")
        return self.replace(horizon=float(horizon), nt=nt)

    def norm(self, x) -> float:
        return norm_h(x, self.weight)

    def inner(self, x, z) -> float:
        return inner_h(x, z, self.weight)


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        times = _frozen_array(self.times, 1, "times")
        states = _frozen_array(self.states, 2, "states")
        controls = _frozen_array(self.controls, 2, "controls")
        nt = times.shape[0] - 1
        if nt < 1:
            raise ValueError("a trajectory needs at least one time step")
        if states.shape[0] != nt + 1 or controls.shape[0] != nt:
            raise ValueError(
                f"got {states.shape[0]} states and {controls.shape[0]} controls for {nt} steps"
            )
        steps = np.diff(times)
        dt = (times[-1] - times[0]) / nt
        if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-12 * max(1.0, abs(times[-1])):
            raise ValueError("trajectory times must be increasing and uniform")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def nt(self) -> int:
        return self.controls.shape[0]

    @property
    def dt(self) -> float:
        return (self.times[-1] - self.times[0]) / self.nt

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    def window(self, start, stop) -> "Trajectory":
        """Sub-trajectory over grid intervals ``start .. stop-1``."""
        return Trajectory(
            self.times[start : stop + 1],
            self.states[start : stop + 1],
            self.controls[start:stop],
        )


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_laplacian_1d(grid: SpatialGrid) -> np.ndarray:
    """Dirichlet Laplacian: ``-2/h^2`` on the diagonal, ``1/h^2`` beside it."""
    n, h2 = grid.n, grid.h**2
    A = np.zeros((n, n))
    idx = np.arange(n)
    A[idx, idx] = -2.0 / h2
    A[idx[:-1], idx[:-1] + 1] = 1.0 / h2
    A[idx[:-1] + 1, idx[:-1]] = 1.0 / h2
    return A


def build_control_injection(grid: SpatialGrid, support: Sequence[int]):
    """Return ``(B, mask)`` for the 1-based node ``support``; ``B = diag(mask)``."""
    support = sorted(set(int(i) for i in support))
    if not support:
        raise EmptyControlSupport("control support must contain at least one node")
    if support[0] < 1 or support[-1] > grid.n:
        raise ValueError(f"support nodes must lie in 1..{grid.n}")
    mask = np.zeros(grid.n)
    mask[np.array(support) - 1] = 1.0
    return np.diag(mask), mask


def heat_instance(
    grid: SpatialGrid,
    target,
    horizon: float = 1.0,
    dt: float = 0.02,
    y0=None,
    support=None,
    lower=-1.0,
    upper=1.0,
    control_weight=1.0,
    state_weight=1.0,
    period=None,
) -> ProblemInstance:
    """Controlled 1-D heat equation ``y_t - y_xx = chi_D u`` on ``grid``."""
    A = build_laplacian_1d(grid)
    if support is None:
        support = range(1, grid.n + 1)
    B, mask = build_control_injection(grid, support)
    nt = max(1, int(round(horizon / dt)))
    return ProblemInstance(
        dynamics=LinearDynamics(A, B),
        cost=CostSpec(target, control_weight, state_weight, period),
        controls=BoxConstraints.uniform(grid.n, lower, upper),
        horizon=float(horizon),
        nt=nt,
        y0=y0,
        control_mask=mask,
        weight=grid.h,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=128)
def _factor(a_bytes, n, dt):
    A = np.frombuffer(a_bytes, dtype=float).reshape(n, n)
    K = np.eye(n) - dt * A
    with warnings.catch_warnings():
        # singularity is detected below and raised as SolveFailure
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
    if np.any(np.abs(np.diag(lu)) <= 1e-14 * max(1.0, np.abs(K).max())):
        raise SolveFailure(f"I - dt*A is singular for dt={dt}")
    return lu, piv


def implicit_euler_factor(A, dt):
    """LU factors of ``I - dt*A``, cached by value of ``(A, dt)``."""
    A = np.ascontiguousarray(A, dtype=float)
    return _factor(A.tobytes(), A.shape[0], float(dt))


@functools.lru_cache(maxsize=128)
def _propagator(a_bytes, n, dt):
    lu = _factor(a_bytes, n, dt)
    M = scipy.linalg.lu_solve(lu, np.eye(n))
    M.setflags(write=False)
    return M


def implicit_euler_propagator(A, dt) -> np.ndarray:
    """The one-step map ``(I - dt*A)^{-1}`` as a dense matrix."""
    A = np.ascontiguousarray(A, dtype=float)
    return _propagator(A.tobytes(), A.shape[0], float(dt))


def step_implicit_euler(dyn: LinearDynamics, y, u, dt: float) -> np.ndarray:
    """Solve ``(I - dt*A) y' = y + dt*B u``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.shape != (dyn.n,) or u.shape != (dyn.m,):
        raise ValueError(f"expected y of shape ({dyn.n},) and u of shape ({dyn.m},)")
    rhs = y + dt * (dyn.B @ u)
    return scipy.linalg.lu_solve(implicit_euler_factor(dyn.A, dt), rhs, check_finite=False)


def sweep_states(M, dtB, y_init, controls) -> np.ndarray:
    """Forward recursion ``y_{k+1} = M (y_k + dtB u_k)`` for all k."""
    nt = controls.shape[0]
    forcing = controls @ dtB.T
    ys = np.empty((nt + 1, M.shape[0]))
    ys[0] = y_init
    for k in range(nt):
        ys[k + 1] = M @ (ys[k] + forcing[k])
    return ys


def simulate(instance: ProblemInstance, controls, y_init=None) -> Trajectory:
    """Forward implicit-Euler sweep from ``y_init`` (default ``instance.y0``)."""
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (instance.nt, instance.m):
        raise ValueError(f"controls must have shape ({instance.nt}, {instance.m}), got {controls.shape}")
    bad = instance.controls.violations(controls)
    if bad.any():
        k = int(np.argmax(bad))
        raise ConstraintViolation(f"control sample {k} violates the box constraints", k)
    if y_init is None:
        if instance.y0 is None:
            raise ValueError("free-initial instance: y_init is required")
        y_init = instance.y0
    y_init = np.asarray(y_init, dtype=float)
    if y_init.shape != (instance.n,):
        raise ValueError(f"y_init must have shape ({instance.n},)")
    M = implicit_euler_propagator(instance.dynamics.A, instance.dt)
    ys = sweep_states(M, instance.dt * instance.dynamics.B, y_init, controls)
    return Trajectory(instance.times, ys, controls)


def constant_trajectory(instance: ProblemInstance, y, u) -> Trajectory:
    """The pair ``(y, u)`` held constant over the instance's grid."""
    ys = np.tile(np.asarray(y, dtype=float), (instance.nt + 1, 1))
    us = np.tile(np.asarray(u, dtype=float), (instance.nt, 1))
    return Trajectory(instance.times, ys, us)


def energy_bound(instance: ProblemInstance, y_init=None) -> float:
    """Horizon-independent bound on ``|y(t)|_h`` for every admissible control.

    Implicit Euler with ``y^T(-A) y >= lambda_1 |y|^2`` gives
    ``|y_{k+1}| <= (|y_k| + dt |B u_k|) / (1 + dt lambda_1)``, hence
    ``sup_k |y_k| <= max(|y_0|, sup |B u| / lambda_1)``.
    """
    lam = instance.poincare_constant
    if lam <= 0:
        return float("inf")
    umax = instance.controls.max_abs()
    if not np.all(np.isfinite(umax)):
        return float("inf")
    bu = np.abs(instance.dynamics.B) @ umax
    start = 0.0
    y_init = instance.y0 if y_init is None else y_init
    if y_init is not None:
        start = instance.norm(y_init)
    return max(start, instance.norm(bu) / lam)
