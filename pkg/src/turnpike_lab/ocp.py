"""Finite-horizon optimal control by control-only transcription.

States are eliminated by the implicit-Euler sweep, leaving a smooth convex
cost over piecewise-constant controls (and optionally the initial state).
Gradients come from the exact discrete adjoint; the box is handled by
clamping.  Every step size and stopping test uses the time-averaged metric
``<a, b>_W = (1/T) sum_k dt <a_k, b_k>_h`` so that tolerances mean the same
thing on every horizon.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InfeasibleBox, NonConvergence, SearchSpaceTooLarge
from .model import (
    ProblemInstance,
    Trajectory,
    implicit_euler_propagator,
    sweep_states,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveOptions:
    tolerance: float = 1e-8
    max_iterations: int = 50000
    step_rule: str = "bb-armijo"
    armijo: float = 1e-4
    accelerate: bool = True
    free_initial: bool = False
    periodic: bool = False
    seed: int = 0
    gap_tolerance: float = 1e-6
    max_outer: int = 60
    penalty: float = 10.0
    raise_on_failure: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.step_rule != "bb-armijo":
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass(frozen=True, eq=False)
class SolveResult:
    trajectory: Trajectory
    value: float
    iterations: int
    stationarity: float
    converged: bool
    periodicity_gap: Optional[float] = None
    history: tuple = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# Cost and adjoint
# ---------------------------------------------------------------------------


def _targets(instance: ProblemInstance) -> np.ndarray:
    return np.asarray(instance.cost.target_at(instance.times[:-1]), dtype=float)


def _running_cost(instance, states, controls, targets) -> float:
    c = instance.cost
    dy = states[:-1] - targets
    per_step = c.state_weight * np.einsum("ij,ij->i", dy, dy) + c.control_weight * np.einsum(
        "ij,ij->i", controls, controls
    )
    return float(0.5 * instance.weight * instance.dt * per_step.sum() / instance.horizon)


def cost(instance: ProblemInstance, traj: Trajectory) -> float:
    """Time-averaged cost ``(1/T) sum_k dt f0(t_k, y_k, u_k)`` (left endpoints)."""
    if traj.states.shape != (instance.nt + 1, instance.n) or traj.controls.shape != (
        instance.nt,
        instance.m,
    ):
        raise ValueError("trajectory dimensions do not match the instance")
    return _running_cost(instance, traj.states, traj.controls, _targets(instance))


class Transcription:
    """Reduced cost ``J(u, y0)`` of an instance together with its adjoint gradient."""

    def __init__(self, instance: ProblemInstance):
        self.instance = instance
        self.M = implicit_euler_propagator(instance.dynamics.A, instance.dt)
        self.MT = np.ascontiguousarray(self.M.T)
        self.dtB = instance.dt * instance.dynamics.B
        self.targets = _targets(instance)
        # metric weight of one control (or initial-state) component
        self.w = instance.dt * instance.weight / instance.horizon

    def states(self, u, y0):
        return sweep_states(self.M, self.dtB, y0, u)

    def value(self, u, y0, ys=None):
        if ys is None:
            ys = self.states(u, y0)
        return _running_cost(self.instance, ys, u, self.targets), ys

    def gradient(self, u, ys, terminal=None):
        """Raw gradients ``(dJ/du, dJ/dy0)`` given the forward states ``ys``.

        ``terminal`` adds a linear term ``<terminal, y_nt>`` (Euclidean) to J.
        """
        inst = self.instance
        c = inst.cost
        ly = self.w * c.state_weight * (ys[:-1] - self.targets)
        lu = self.w * c.control_weight * u
        nt = u.shape[0]
        lam = np.zeros(inst.n) if terminal is None else np.asarray(terminal, dtype=float)
        mus = np.empty((nt, inst.n))
        MT = self.MT
        for k in range(nt - 1, -1, -1):
            mu = MT @ lam
            mus[k] = mu
            lam = ly[k] + mu
        return lu + mus @ self.dtB, lam


def gradient_via_adjoint(instance: ProblemInstance, controls, y_init=None) -> np.ndarray:
    """Exact gradient of the discrete time-averaged cost w.r.t. every control sample."""
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (instance.nt, instance.m):
        raise ValueError(f"controls must have shape ({instance.nt}, {instance.m})")
    y_init = instance.y0 if y_init is None else y_init
    if y_init is None:
        raise ValueError("free-initial instance: y_init is required")
    tr = Transcription(instance)
    ys = tr.states(controls, np.asarray(y_init, dtype=float))
    g, _ = tr.gradient(controls, ys)
    return g


def reduced_cost(instance: ProblemInstance, controls, y_init=None) -> float:
    y_init = instance.y0 if y_init is None else y_init
    tr = Transcription(instance)
    return tr.value(np.asarray(controls, dtype=float), np.asarray(y_init, dtype=float))[0]


# ---------------------------------------------------------------------------
# Box-constrained first-order minimizer
# ---------------------------------------------------------------------------


@dataclass
class _MinResult:
    x: np.ndarray
    f: float
    iterations: int
    stationarity: float
    converged: bool
    history: list


def _roundoff(f):
    # cost differences below a few ulps of |f| are noise
    return 8.0 * np.finfo(float).eps * max(1.0, abs(f))


def _stationarity(x, g_riesz, project):
    return float(np.max(np.abs(x - project(x - g_riesz)), initial=0.0))


def minimize_box(
    fun: Callable,
    grad: Callable,
    x0: np.ndarray,
    project: Callable,
    metric: np.ndarray,
    tol: float,
    max_iter: int,
    accelerate: bool = True,
    armijo: float = 1e-4,
    record: bool = False,
) -> _MinResult:
    """Minimize a smooth function over a box.

    ``fun(x) -> (f, aux)`` and ``grad(x, aux) -> g`` (raw Euclidean gradient).
    ``metric`` holds the positive diagonal of the inner product; the step uses
    the Riesz gradient ``g / metric``.  Stationarity is the sup-norm of the
    projected Riesz-gradient mapping ``x - P(x - g/metric)``.

    Non-accelerated mode is projected gradient with Barzilai-Borwein steps and
    Armijo backtracking (monotone).  Accelerated mode is FISTA with
    backtracking on the quadratic upper model and a momentum restart whenever
    the cost increases.
    """
    x = project(np.asarray(x0, dtype=float))
    f, aux = fun(x)
    g = grad(x, aux)
    gr = g / metric
    history = [f] if record else []
    res = _stationarity(x, gr, project)
    if res <= tol:
        return _MinResult(x, f, 0, res, True, history)

    # BB-style initial step from a unit trial step
    s = 1.0
    xt = project(x - s * gr)
    ft, auxt = fun(xt)
    dx = xt - x
    dg = grad(xt, auxt) - g
    curv = float(np.dot(dx, dg))
    if curv > 0:
        s = float(np.dot(dx * metric, dx) / curv)

    if not accelerate:
        for it in range(1, max_iter + 1):
            while True:
                xn = project(x - s * gr)
                fn, auxn = fun(xn)
                if fn <= f + armijo * float(np.dot(g, xn - x)) + _roundoff(f) or s < 1e-20:
                    break
                s *= 0.5
            gn = grad(xn, auxn)
            dx = xn - x
            dg = gn - g
            curv = float(np.dot(dx, dg))
            x, f, g = xn, fn, gn
            gr = g / metric
            if record:
                history.append(f)
            res = _stationarity(x, gr, project)
            if res <= tol:
                return _MinResult(x, f, it, res, True, history)
            if curv > 0:
                s = float(np.dot(dx * metric, dx) / curv)
            else:
                s *= 2.0
        return _MinResult(x, f, max_iter, res, False, history)

    # FISTA with backtracking and adaptive restart
    t = 1.0
    z, fz, gz = x, f, g
    for it in range(1, max_iter + 1):
        gzr = gz / metric
        while True:
            xn = project(z - s * gzr)
            fn, auxn = fun(xn)
            d = xn - z
            model = fz + float(np.dot(gz, d)) + float(np.dot(d * metric, d)) / (2.0 * s)
            if fn <= model + _roundoff(fz) or s < 1e-20:
                break
            s *= 0.5
        gn = grad(xn, auxn)
        if fn > f + _roundoff(f):
            # restart momentum from the last accepted point
            t = 1.0
            z, fz, gz = x, f, g
            res = _stationarity(x, g / metric, project)
            if res <= tol:
                return _MinResult(x, f, it, res, True, history)
            continue
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = project(xn + ((t - 1.0) / tn) * (xn - x))
        x, f, g, t = xn, fn, gn, tn
        if record:
            history.append(f)
        res = _stationarity(x, g / metric, project)
        if res <= tol:
            return _MinResult(x, f, it, res, True, history)
        if z is xn or np.array_equal(z, x):
            fz, gz = f, g
        else:
            fz, auxz = fun(z)
            gz = grad(z, auxz)
    return _MinResult(x, f, max_iter, res, False, history)


# ---------------------------------------------------------------------------
# Public solvers
# ---------------------------------------------------------------------------


def _check_box(instance):
    lo, hi = instance.controls.lower, instance.controls.upper
    if np.any(lo > hi):
        raise InfeasibleBox("lower bound exceeds upper bound")


def _initial_controls(instance):
    return instance.controls.project(np.zeros((instance.nt, instance.m)))


def _finish(result, options, what):
    if not result.converged:
        msg = (
            f"{what} stopped after {result.iterations} iterations "
            f"with stationarity {result.stationarity:.3e}"
        )
        log.warning(msg)
        if options.raise_on_failure:
            raise NonConvergence(msg, result)
    return result


def solve(instance: ProblemInstance, options: SolveOptions = SolveOptions(), u_init=None, y0_init=None) -> SolveResult:
    """Minimize the time-averaged cost over box-feasible controls.

    With ``options.free_initial`` (or when the instance has no ``y0``) the
    initial state is optimized as well.  Periodic problems go through
    :func:`solve_periodic`.
    """
    _check_box(instance)
    if options.periodic:
        return solve_periodic(instance, options)
    tr = Transcription(instance)
    nt, m, n = instance.nt, instance.m, instance.n
    box = instance.controls
    u0 = _initial_controls(instance) if u_init is None else box.project(np.asarray(u_init, dtype=float))
    free = options.free_initial or instance.y0 is None

    if not free:
        y0 = np.asarray(instance.y0, dtype=float)

        def fun(x):
            u = x.reshape(nt, m)
            return tr.value(u, y0)

        def grad(x, ys):
            return tr.gradient(x.reshape(nt, m), ys)[0].ravel()

        lo = np.broadcast_to(box.lower, (nt, m)).ravel()
        hi = np.broadcast_to(box.upper, (nt, m)).ravel()
        x0 = u0.ravel()
    else:
        if y0_init is None:
            y0_init = instance.y0 if instance.y0 is not None else np.zeros(n)
        y0_init = np.asarray(y0_init, dtype=float)

        def fun(x):
            u = x[: nt * m].reshape(nt, m)
            return tr.value(u, x[nt * m :])

        def grad(x, ys):
            gu, gy = tr.gradient(x[: nt * m].reshape(nt, m), ys)
            return np.concatenate([gu.ravel(), gy])

        lo = np.concatenate([np.broadcast_to(box.lower, (nt, m)).ravel(), np.full(n, -np.inf)])
        hi = np.concatenate([np.broadcast_to(box.upper, (nt, m)).ravel(), np.full(n, np.inf)])
        x0 = np.concatenate([u0.ravel(), y0_init])

    metric = np.full(x0.shape, tr.w)
    res = minimize_box(
        fun,
        grad,
        x0,
        lambda v: np.clip(v, lo, hi),
        metric,
        options.tolerance,
        options.max_iterations,
        accelerate=options.accelerate,
        armijo=options.armijo,
        record=not options.accelerate,
    )
    u = res.x[: nt * m].reshape(nt, m)
    y_start = res.x[nt * m :] if free else y0
    value, ys = tr.value(u, y_start)
    traj = Trajectory(instance.times, ys, u)
    out = SolveResult(traj, value, res.iterations, res.stationarity, res.converged, history=tuple(res.history))
    return _finish(out, options, "solve")


def solve_periodic(instance: ProblemInstance, options: SolveOptions = SolveOptions(periodic=True)) -> SolveResult:
    """Periodic problem: minimize over ``(u, y(0))`` subject to ``y(T) = y(0)``.

    Augmented Lagrangian on the gap ``g = y(T) - y(0)`` in the ``h``-weighted
    norm; the multiplier is updated after every inner solve and the penalty
    doubles whenever the gap fails to halve.  Inner solves always use the
    monotone BB/Armijo projected gradient.
    """
    _check_box(instance)
    if instance.y0 is not None:
        raise ValueError("periodic problems leave the initial state free; drop y0")
    if instance.cost.periodic and abs(instance.horizon - instance.cost.period) > 1e-9 * instance.horizon:
        raise ValueError("periodic solve needs the horizon to equal the target period")
    tr = Transcription(instance)
    nt, m, n = instance.nt, instance.m, instance.n
    h = instance.weight
    box = instance.controls
    lo = np.concatenate([np.broadcast_to(box.lower, (nt, m)).ravel(), np.full(n, -np.inf)])
    hi = np.concatenate([np.broadcast_to(box.upper, (nt, m)).ravel(), np.full(n, np.inf)])
    metric = np.full(lo.shape, tr.w)

    def project(v):
        return np.clip(v, lo, hi)

    x = np.concatenate([_initial_controls(instance).ravel(), np.zeros(n)])
    lam = np.zeros(n)
    rho = options.penalty
    prev_gap = np.inf
    total_iter = 0
    inner_tol = options.tolerance
    res = None
    gap = np.inf
    for outer in range(options.max_outer):

        def fun(v, lam=lam, rho=rho):
            u = v[: nt * m].reshape(nt, m)
            J, ys = tr.value(u, v[nt * m :])
            gvec = ys[-1] - v[nt * m :]
            return J + h * float(lam @ gvec) + 0.5 * rho * h * float(gvec @ gvec), ys

        def grad(v, ys, lam=lam, rho=rho):
            y_start = v[nt * m :]
            r = h * (lam + rho * (ys[-1] - y_start))
            gu, gy = tr.gradient(v[: nt * m].reshape(nt, m), ys, terminal=r)
            return np.concatenate([gu.ravel(), gy - r])

        # momentum stalls on the penalized subproblems; BB steps do not
        res = minimize_box(fun, grad, x, project, metric, inner_tol, options.max_iterations, accelerate=False)
        total_iter += res.iterations
        x = res.x
        u = x[: nt * m].reshape(nt, m)
        ys = tr.states(u, x[nt * m :])
        gvec = ys[-1] - ys[0]
        gap = instance.norm(gvec)
        log.debug("periodic outer %d: gap %.3e rho %.1e", outer, gap, rho)
        if gap <= options.gap_tolerance and res.converged:
            break
        lam = lam + rho * gvec
        if gap > 0.5 * prev_gap:
            rho *= 2.0
        prev_gap = gap
    u = x[: nt * m].reshape(nt, m)
    value, ys = tr.value(u, x[nt * m :])
    traj = Trajectory(instance.times, ys, u)
    converged = bool(res.converged and gap <= options.gap_tolerance)
    out = SolveResult(traj, value, total_iter, res.stationarity, converged, periodicity_gap=gap)
    if not converged:
        msg = f"periodic solve ended with gap {gap:.3e} (stationarity {res.stationarity:.3e})"
        log.warning(msg)
        if options.raise_on_failure:
            raise NonConvergence(msg, out)
    return out


def brute_force_oracle(instance: ProblemInstance, levels, y_init=None, batch: int = 65536):
    """Exhaustive search over piecewise-constant controls drawn from ``levels``.

    ``levels`` is either one sequence shared by all control components or one
    sequence per component.  Returns ``(value, controls)``; ties go to the
    lexicographically smallest sequence.
    """
    nt, m, n = instance.nt, instance.m, instance.n
    if np.ndim(levels[0]) == 0:
        per_comp = [sorted(float(v) for v in levels)] * m
    else:
        if len(levels) != m:
            raise ValueError(f"need {m} level sets, got {len(levels)}")
        per_comp = [sorted(float(v) for v in lv) for lv in levels]
    size = 1
    for lv in per_comp:
        size *= len(lv) ** nt
    if size > 10**7:
        raise SearchSpaceTooLarge(f"{size} sequences exceed the 1e7 enumeration limit")
    y_init = instance.y0 if y_init is None else y_init
    if y_init is None:
        raise ValueError("the oracle needs a fixed initial state")
    y_init = np.asarray(y_init, dtype=float)

    # lexicographic order over (u_0[0], u_0[1], ..., u_{nt-1}[m-1])
    slots = [per_comp[j] for _ in range(nt) for j in range(m)]
    tr = Transcription(instance)
    best_val, best_seq = np.inf, None
    it = itertools.product(*slots)
    while True:
        chunk = list(itertools.islice(it, batch))
        if not chunk:
            break
        U = np.array(chunk, dtype=float).reshape(len(chunk), nt, m)
        vals = _batch_cost(tr, U, y_init)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_seq = float(vals[i]), U[i].copy()
    return best_val, best_seq


def _batch_cost(tr: Transcription, U, y_init):
    inst = tr.instance
    c = inst.cost
    nb, nt, _ = U.shape
    y = np.broadcast_to(y_init, (nb, inst.n)).copy()
    total = np.zeros(nb)
    for k in range(nt):
        dy = y - tr.targets[k]
        uk = U[:, k, :]
        total += c.state_weight * np.einsum("ij,ij->i", dy, dy) + c.control_weight * np.einsum("ij,ij->i", uk, uk)
        y = (y + uk @ tr.dtB.T) @ tr.M.T
    return 0.5 * inst.weight * inst.dt * total / inst.horizon
