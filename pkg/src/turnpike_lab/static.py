"""Static (steady-state) problems, their KKT certificates and Lagrangians.

Sign convention follows the heat example: the adjoint ``p`` solves
``-A^T p = ws (y_d - y)`` and stationarity reads
``wc u - B^T p - mu_a + mu_b = 0``.  The Lagrangian is

    L(y, u) = f0(y, u) + <-A y - B u, p>_h + <mu_a, u_a - u>_h + <mu_b, u - u_b>_h

so the multiplier of the abstract form ``f0 + <phi, A y + B u>`` is
``phi = -p`` (see :attr:`StaticSolution.phi_s`).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import (
    DegenerateSample,
    Infeasible,
    NewtonDivergence,
    NonConvergence,
    SingularGenerator,
)
from .model import BoxConstraints, ProblemInstance, SpatialGrid, build_laplacian_1d, norm_h
from .ocp import minimize_box

log = logging.getLogger(__name__)

ACTIVE_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class StaticSolution:
    y_s: np.ndarray
    u_s: np.ndarray
    p_s: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    value: float
    kkt_residual: float
    iterations: int = 0
    slater: Optional[bool] = None

    @property
    def phi_s(self) -> np.ndarray:
        """Multiplier in the ``f0 + <phi, A y + f>`` convention."""
        return -self.p_s


@dataclass(frozen=True, eq=False)
class SemilinearProblem:
    """``min 1/2(|y - y_d|^2 + |u|^2)`` s.t. ``-A y + y^3 = u`` on a 1-D grid."""

    grid: SpatialGrid
    target: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return build_laplacian_1d(self.grid)

    @property
    def weight(self) -> float:
        return self.grid.h


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """``f0(y, u) = 1/2 (y - y_ref)^T Q (y - y_ref) + 1/2 (u - u_ref)^T R (u - u_ref)``."""

    Q: np.ndarray
    R: np.ndarray
    y_ref: np.ndarray
    u_ref: np.ndarray

    def __call__(self, y, u):
        dy, du = y - self.y_ref, u - self.u_ref
        return 0.5 * float(dy @ self.Q @ dy) + 0.5 * float(du @ self.R @ du)

    def grad(self, y, u):
        return self.Q @ (y - self.y_ref), self.R @ (u - self.u_ref)


# ---------------------------------------------------------------------------
# Linear-quadratic static problem
# ---------------------------------------------------------------------------


def _lq_parts(instance: ProblemInstance):
    c = instance.cost
    A = instance.dynamics.A
    B = instance.dynamics.B
    with warnings.catch_warnings():
        # singularity is detected below and raised as SingularGenerator
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu = scipy.linalg.lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu[0]))) <= 1e-13 * max(1.0, np.abs(A).max()):
        raise SingularGenerator("the generator A is singular")
    yd = np.asarray(c.mean_target(), dtype=float)
    ws, wc = c.state_weight, c.control_weight

    def state(u):
        return -scipy.linalg.lu_solve(lu, B @ u)

    def adjoint(y):
        # -A^T p = ws (y_d - y)
        return -scipy.linalg.lu_solve(lu, ws * (yd - y), trans=1)

    return A, B, yd, ws, wc, state, adjoint, lu


def _multipliers(u, bpt, wc, box):
    """Recover ``mu_a, mu_b`` on the active sets from ``wc u - B^T p = mu_a - mu_b``."""
    r = wc * u - bpt
    at_lo = np.isfinite(box.lower) & (np.abs(u - box.lower) <= ACTIVE_TOL)
    at_hi = np.isfinite(box.upper) & (np.abs(u - box.upper) <= ACTIVE_TOL) & ~at_lo
    mu_a = np.where(at_lo, np.maximum(r, 0.0), 0.0)
    mu_b = np.where(at_hi, np.maximum(-r, 0.0), 0.0)
    return mu_a, mu_b


def _bound_pairing(mu, bound, u, sign, h):
    """``<mu, sign*(bound - u)>_h`` skipping components with infinite bounds."""
    finite = np.isfinite(bound)
    if not finite.any():
        return 0.0
    return float(h * np.sum(mu[finite] * sign * (bound[finite] - u[finite])))


def kkt_residuals(instance: ProblemInstance, sol: StaticSolution) -> dict:
    """Individual residuals of the static KKT system (all in the ``h`` norm)."""
    A, B = instance.dynamics.A, instance.dynamics.B
    c = instance.cost
    h = instance.weight
    yd = c.mean_target()
    box = instance.controls
    return {
        "state": norm_h(A @ sol.y_s + B @ sol.u_s, h),
        "adjoint": norm_h(-A.T @ sol.p_s - c.state_weight * (yd - sol.y_s), h),
        "stationarity": norm_h(c.control_weight * sol.u_s - B.T @ sol.p_s - sol.mu_a + sol.mu_b, h),
        "complementarity_a": abs(_bound_pairing(sol.mu_a, box.lower, sol.u_s, 1.0, h)),
        "complementarity_b": abs(_bound_pairing(sol.mu_b, box.upper, sol.u_s, -1.0, h)),
        "sign": float(max(0.0, -np.min(sol.mu_a, initial=0.0), -np.min(sol.mu_b, initial=0.0))),
        "feasibility": float(np.max(box.violations(sol.u_s[None, :], tol=0.0) * 1.0, initial=0.0)),
    }


def _semismooth_newton(instance, u, parts, tol, max_iter=100):
    """Primal-dual active set iteration on ``wc u = P(B^T p(u))``."""
    A, B, yd, ws, wc, state, adjoint, lu = parts
    box = instance.controls
    n, m = instance.n, instance.m
    Ainv_B = -scipy.linalg.lu_solve(lu, B)  # y = Ainv_B u
    AinvT = scipy.linalg.lu_solve(lu, np.eye(n), trans=1)
    # B^T p(u) = -B^T A^{-T} ws (y_d - y(u)) = G u + g0
    G = ws * B.T @ AinvT @ Ainv_B
    g0 = -ws * B.T @ AinvT @ yd
    for it in range(max_iter):
        z = (G @ u + g0) / wc
        lo_act = z < box.lower
        hi_act = z > box.upper
        free = ~(lo_act | hi_act)
        u_new = np.where(lo_act, box.lower, np.where(hi_act, box.upper, 0.0))
        if free.any():
            fixed = ~free
            rhs = g0[free] + G[np.ix_(free, fixed)] @ u_new[fixed]
            K = wc * np.eye(int(free.sum())) - G[np.ix_(free, free)]
            u_new[free] = np.linalg.solve(K, rhs)
        step = np.max(np.abs(u_new - u), initial=0.0)
        u = u_new
        if step <= tol:
            return u, it + 1
    return u, max_iter


def _fixed_point_gap(u, parts, box):
    A, B, yd, ws, wc, state, adjoint, lu = parts
    return float(np.max(np.abs(box.project(B.T @ adjoint(state(u)) / wc) - u), initial=0.0))


def _bvls_start(instance, parts):
    """Box-constrained least squares ``|sqrt(ws)(G u - y_d)|^2 + wc |u|^2`` with ``G = -A^{-1} B``."""
    A, B, yd, ws, wc, state, adjoint, lu = parts
    G = -scipy.linalg.lu_solve(lu, B)
    M = np.vstack([np.sqrt(ws) * G, np.sqrt(wc) * np.eye(instance.m)])
    rhs = np.concatenate([np.sqrt(ws) * yd, np.zeros(instance.m)])
    box = instance.controls
    return scipy.optimize.lsq_linear(M, rhs, bounds=(box.lower, box.upper), method="bvls", tol=1e-14).x


def solve_static_lq(
    instance: ProblemInstance,
    tol: float = 1e-10,
    damping: float = 0.5,
    max_iter: int = 100000,
    stall_after: int = 1000,
) -> StaticSolution:
    """Steady state ``min f0(y, u)`` s.t. ``A y + B u = 0``, ``u`` in the box.

    Damped reduced fixed point ``u <- (1-d) u + d P(B^T p(u) / wc)`` with a
    semi-smooth Newton (primal-dual active set) fallback when the iteration
    stalls or contracts too slowly.  Periodic targets use their time mean.
    """
    parts = _lq_parts(instance)
    A, B, yd, ws, wc, state, adjoint, lu = parts
    box = instance.controls
    u = box.project(np.zeros(instance.m))
    best = np.inf
    since_best = 0
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        p = adjoint(state(u))
        target = box.project(B.T @ p / wc)
        step = float(np.max(np.abs(target - u), initial=0.0))
        if step <= tol:
            u = target
            converged = True
            break
        u = (1.0 - damping) * u + damping * target
        if step < 0.5 * best:
            best, since_best = step, 0
        else:
            since_best += 1
        if since_best >= stall_after:
            break
    if not converged:
        log.info("static fixed point stalled after %d iterations; switching to semi-smooth Newton", it)
        u, extra = _semismooth_newton(instance, u, parts, tol)
        it += extra
        if _fixed_point_gap(u, parts, box) > 10 * max(tol, 1e-12):
            # active-set cycling from a poor start; restart from a bounded least-squares solve
            log.info("semi-smooth Newton cycled; restarting from a BVLS solution")
            u, extra = _semismooth_newton(instance, _bvls_start(instance, parts), parts, tol)
            it += extra
        if _fixed_point_gap(u, parts, box) > 10 * max(tol, 1e-12):
            raise NonConvergence("static KKT iteration did not converge")
    return _assemble_lq(instance, u, parts, it)


def _assemble_lq(instance, u, parts, iterations):
    A, B, yd, ws, wc, state, adjoint, lu = parts
    h = instance.weight
    y = state(u)
    p = adjoint(y)
    mu_a, mu_b = _multipliers(u, B.T @ p, wc, instance.controls)
    value = 0.5 * (ws * norm_h(y - yd, h) ** 2 + wc * norm_h(u, h) ** 2)
    sol = StaticSolution(y, u, p, mu_a, mu_b, value, 0.0, iterations)
    r = kkt_residuals(instance, sol)
    resid = max(r["state"], r["adjoint"], r["stationarity"], r["complementarity_a"], r["complementarity_b"], r["sign"])
    return StaticSolution(y, u, p, mu_a, mu_b, value, resid, iterations)


# ---------------------------------------------------------------------------
# Semilinear elliptic example
# ---------------------------------------------------------------------------


def _semilinear_residual(A, y, phi, yd):
    r1 = -A @ y + y**3 - phi
    r2 = -A.T @ phi + 3.0 * y**2 * phi - (yd - y)
    return np.concatenate([r1, r2])


def solve_static_semilinear(
    grid: SpatialGrid, y_d, tol: float = 1e-10, max_iter: int = 50, y_init=None, phi_init=None
) -> StaticSolution:
    """Optimality system of ``min 1/2(|y-y_d|^2+|u|^2)`` s.t. ``-y'' + y^3 = u``.

    Unknowns ``(y, phi)`` with ``u = phi``::

        -A y + y^3 = phi
        -A phi + 3 y^2 phi = y_d - y

    solved by damped Newton on the stacked residual (``h``-norm).
    """
    A = build_laplacian_1d(grid)
    h = grid.h
    n = grid.n
    yd = np.asarray(y_d, dtype=float)
    if yd.shape != (n,):
        raise ValueError(f"target must have shape ({n},)")
    y = np.zeros(n) if y_init is None else np.array(y_init, dtype=float)
    phi = np.zeros(n) if phi_init is None else np.array(phi_init, dtype=float)
    F = _semilinear_residual(A, y, phi, yd)
    res = norm_h(F, h)
    it = 0
    I = np.eye(n)
    while res > tol:
        if it >= max_iter:
            raise NewtonDivergence(
                f"Newton stopped at residual {res:.3e}; try a smaller target norm "
                "(the optimality system is only well behaved for small data)"
            )
        J = np.block(
            [
                [-A + np.diag(3.0 * y**2), -I],
                [np.diag(6.0 * y * phi) + I, -A.T + np.diag(3.0 * y**2)],
            ]
        )
        d = np.linalg.solve(J, -F)
        t = 1.0
        while True:
            yn, pn = y + t * d[:n], phi + t * d[n:]
            Fn = _semilinear_residual(A, yn, pn, yd)
            rn = norm_h(Fn, h)
            if rn < (1.0 - 1e-4 * t) * res or t < 1e-8:
                break
            t *= 0.5
        if t < 1e-8:
            raise NewtonDivergence(f"line search failed at residual {res:.3e}")
        y, phi, F, res = yn, pn, Fn, rn
        it += 1
    value = 0.5 * (norm_h(y - yd, h) ** 2 + norm_h(phi, h) ** 2)
    zero = np.zeros(n)
    return StaticSolution(y, phi.copy(), phi, zero, zero.copy(), value, res, it)


# ---------------------------------------------------------------------------
# Lagrangian and duality checks
# ---------------------------------------------------------------------------


def lagrangian(problem, y, u, sol: StaticSolution) -> float:
    """Static Lagrangian at ``(y, u)`` with the multipliers stored in ``sol``.

    ``problem`` is a :class:`ProblemInstance` (linear dynamics) or a
    :class:`SemilinearProblem`.
    """
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if isinstance(problem, SemilinearProblem):
        h = problem.weight
        A = problem.A
        f0 = 0.5 * (norm_h(y - problem.target, h) ** 2 + norm_h(u, h) ** 2)
        return f0 + h * float(sol.p_s @ (-A @ y + y**3 - u))
    c = problem.cost
    h = problem.weight
    A, B = problem.dynamics.A, problem.dynamics.B
    box = problem.controls
    yd = c.mean_target()
    f0 = 0.5 * (c.state_weight * norm_h(y - yd, h) ** 2 + c.control_weight * norm_h(u, h) ** 2)
    pairing = h * float(sol.p_s @ (-A @ y - B @ u))
    return (
        f0
        + pairing
        + _bound_pairing(sol.mu_a, box.lower, u, 1.0, h)
        + _bound_pairing(sol.mu_b, box.upper, u, -1.0, h)
    )


def _pair_norm2(problem, dy, du):
    h = problem.weight
    return h * (float(dy @ dy) + float(du @ du))


@dataclass(frozen=True, eq=False)
class DualityCheck:
    rate: float
    worst_y: np.ndarray
    worst_u: np.ndarray
    samples: int
    resampled: int


def check_strict_strong_duality(
    problem,
    sol: StaticSolution,
    samples: int,
    seed: int = 0,
    radius: Optional[float] = None,
    box: Optional[BoxConstraints] = None,
) -> DualityCheck:
    """Sampled lower bound on ``(L(y,u) - J_s) / |(y - y_s, u - u_s)|^2``.

    Without ``radius``, ``u`` is uniform in the control box and ``y`` is
    ``y_s`` plus a Gaussian perturbation.  With ``radius``, pairs are drawn
    uniformly in direction with ``|(dy, du)|_h <= radius`` around the static
    pair (controls clamped to the box when one is given).
    """
    if samples < 1:
        raise ValueError("samples must be a positive integer")
    rng = np.random.default_rng(seed)
    ys, us = sol.y_s, sol.u_s
    n, m = ys.shape[0], us.shape[0]
    if box is None and isinstance(problem, ProblemInstance):
        box = problem.controls
    h = problem.weight
    scale = max(1.0, float(np.max(np.abs(ys), initial=0.0)))
    best = np.inf
    worst = (ys, us)
    resampled = 0
    drawn = 0
    while drawn < samples:
        if radius is None:
            if box is None or not box.bounded:
                raise ValueError("sampling without a radius needs a bounded control box")
            u = rng.uniform(box.lower, box.upper)
            y = ys + scale * rng.standard_normal(n)
        else:
            d = rng.standard_normal(n + m)
            d *= radius * rng.uniform() ** (1.0 / (n + m)) / np.sqrt(h * float(d @ d))
            y, u = ys + d[:n], us + d[n:]
            if box is not None:
                u = box.project(u)
        den = _pair_norm2(problem, y - ys, u - us)
        if den <= 1e-300:
            resampled += 1
            if resampled > 10 * samples:
                raise DegenerateSample("every drawn pair coincides with the static pair")
            continue
        r = (lagrangian(problem, y, u, sol) - sol.value) / den
        drawn += 1
        if r < best:
            best, worst = r, (y, u)
    return DualityCheck(float(best), worst[0], worst[1], samples, resampled)


# ---------------------------------------------------------------------------
# Finite-dimensional constrained static problem
# ---------------------------------------------------------------------------


def phase_one(A, B, y_box: BoxConstraints, u_box: BoxConstraints):
    """Largest margin ``t`` with ``A y + B u = 0`` and ``(y, u)`` at distance ``t`` inside both boxes.

    Returns ``(t, y, u)``; raises :class:`Infeasible` when no feasible point exists.
    """
    n, m = B.shape
    lo = np.concatenate([y_box.lower, u_box.lower])
    hi = np.concatenate([y_box.upper, u_box.upper])
    nv = n + m
    # variables: (y, u, t); maximize t
    cvec = np.zeros(nv + 1)
    cvec[-1] = -1.0
    A_eq = np.hstack([A, B, np.zeros((n, 1))])
    rows, rhs = [], []
    for i in range(nv):
        if np.isfinite(hi[i]):
            r = np.zeros(nv + 1)
            r[i], r[-1] = 1.0, 1.0
            rows.append(r)
            rhs.append(hi[i])
        if np.isfinite(lo[i]):
            r = np.zeros(nv + 1)
            r[i], r[-1] = -1.0, 1.0
            rows.append(r)
            rhs.append(-lo[i])
    bounds = [(None, None)] * nv + [(0.0, 1.0)]
    res = scipy.optimize.linprog(
        cvec,
        A_ub=np.array(rows) if rows else None,
        b_ub=np.array(rhs) if rhs else None,
        A_eq=A_eq,
        b_eq=np.zeros(n),
        bounds=bounds,
        method="highs",
    )
    if res.status != 0:
        raise Infeasible("no point satisfies A y + B u = 0 inside the boxes")
    x = res.x
    return float(x[-1]), x[:n], x[n:nv]


def solve_static_finite_dim(
    A,
    B,
    cost: QuadraticCost,
    y_box: BoxConstraints,
    u_box: BoxConstraints,
    tol: float = 1e-10,
    max_outer: int = 200,
    penalty: float = 10.0,
) -> StaticSolution:
    """Constrained static problem ``min f0`` s.t. ``A y + B u = 0``, boxes on ``y`` and ``u``.

    Projected gradient (FISTA) on ``(y, u)`` for the augmented Lagrangian
    ``f0 + <phi, A y + B u> + rho/2 |A y + B u|^2``.  Slater's condition is
    checked first by :func:`phase_one`; a zero margin is flagged in
    ``StaticSolution.slater`` rather than raised.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    margin, y_feas, u_feas = phase_one(A, B, y_box, u_box)
    slater = margin > 1e-9
    if not slater:
        log.warning("Slater's condition fails (margin %.2e); duality diagnostics are unreliable", margin)
    lo = np.concatenate([y_box.lower, u_box.lower])
    hi = np.concatenate([y_box.upper, u_box.upper])
    C = np.hstack([A, B])

    def project(v):
        return np.clip(v, lo, hi)

    x = np.concatenate([y_feas, u_feas])
    phi = np.zeros(n)
    rho = penalty
    metric = np.ones(n + m)
    prev = np.inf
    total = 0
    for outer in range(max_outer):

        def fun(v, phi=phi, rho=rho):
            r = C @ v
            return cost(v[:n], v[n:]) + float(phi @ r) + 0.5 * rho * float(r @ r), r

        def grad(v, r, phi=phi, rho=rho):
            gy, gu = cost.grad(v[:n], v[n:])
            return np.concatenate([gy, gu]) + C.T @ (phi + rho * r)

        res = minimize_box(fun, grad, x, project, metric, 0.1 * tol, 100000, accelerate=True)
        total += res.iterations
        x = res.x
        r = C @ x
        gap = float(np.linalg.norm(r))
        phi = phi + rho * r
        if gap <= tol and res.converged:
            break
        if gap > 0.25 * prev:
            rho *= 2.0
        prev = gap
    else:
        raise NonConvergence(f"augmented Lagrangian ended with equality gap {gap:.3e}")
    y, u = x[:n], x[n:]
    gy, gu = cost.grad(y, u)
    grad_l = np.concatenate([gy, gu]) + C.T @ phi
    # multipliers of the bounds from the Lagrangian gradient on the active sets
    at_lo = np.isfinite(lo) & (np.abs(x - lo) <= ACTIVE_TOL)
    at_hi = np.isfinite(hi) & (np.abs(x - hi) <= ACTIVE_TOL) & ~at_lo
    mu_lo = np.where(at_lo, np.maximum(grad_l, 0.0), 0.0)
    mu_hi = np.where(at_hi, np.maximum(-grad_l, 0.0), 0.0)
    station = float(np.max(np.abs(x - project(x - grad_l)), initial=0.0))
    resid = max(station, float(np.linalg.norm(C @ x)))
    return StaticSolution(
        y_s=y,
        u_s=u,
        p_s=-phi,
        mu_a=mu_lo[n:],
        mu_b=mu_hi[n:],
        value=cost(y, u),
        kkt_residual=resid,
        iterations=total,
        slater=slater,
    )
