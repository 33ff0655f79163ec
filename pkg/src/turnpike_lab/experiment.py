"""Experiment runner: static solve, certification, sweep, persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .dissipativity import (
    DISSIPATION_TOL,
    StorageFunction,
    SupplyRate,
    check_dissipation,
    estimate_dissipation_rate,
    random_admissible_trajectories,
)
from .errors import ValidationError
from .model import (
    BoxConstraints,
    CostSpec,
    LinearDynamics,
    ProblemInstance,
    SpatialGrid,
    build_control_injection,
    build_laplacian_1d,
    heat_instance,
    norm_h,
)
from .ocp import SolveOptions, brute_force_oracle, solve
from .static import (
    SemilinearProblem,
    check_strict_strong_duality,
    kkt_residuals,
    solve_static_lq,
    solve_static_semilinear,
)
from .turnpike import horizon_sweep

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "T",
    "J_T",
    "J_s",
    "gap",
    "scaled_gap",
    "eps",
    "Q_measure",
    "integral_turnpike",
    "L2_deviation",
    "markov_ok",
    "dissip_min_residual",
)

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2
KKT_TOL = 1e-8
NEWTON_TOL = 1e-10


@dataclass
class RunOutcome:
    status: int
    output_dir: str
    flags: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    report: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------


def build_profile(spec, grid: SpatialGrid, A=None, B=None):
    """Spatial profile from a config entry (``None`` passes through)."""
    if spec is None:
        return None
    kind = spec["kind"]
    x = grid.nodes
    if kind == "zero":
        return np.zeros(grid.n)
    if kind == "constant":
        return np.full(grid.n, float(spec.get("value", 1.0)))
    if kind == "sine":
        return float(spec.get("amplitude", 1.0)) * np.sin(int(spec.get("mode", 1)) * np.pi * x / grid.length)
    if kind == "values":
        return np.asarray(spec["values"], dtype=float)
    if kind == "feasible":
        # state reached by the constant control; lies in the attainable set
        u = np.full(B.shape[1], float(spec.get("control", 1.0)))
        return -np.linalg.solve(A, B @ u)
    raise ValidationError(f"unknown profile kind {kind!r}", "kind")


def build_instance(cfg: ExperimentConfig, horizon=None) -> ProblemInstance:
    p = cfg.problem
    T = cfg.horizons[0] if horizon is None else horizon
    if cfg.kind == "heat-1d":
        grid = SpatialGrid(p["n"], p["length"])
        A = build_laplacian_1d(grid)
        support = p.get("support")
        B, _ = build_control_injection(grid, support if support is not None else range(1, grid.n + 1))
        return heat_instance(
            grid,
            build_profile(p["target"], grid, A, B),
            horizon=T,
            dt=p["dt"],
            y0=build_profile(p.get("y0"), grid, A, B),
            support=support,
            lower=p["lower"],
            upper=p["upper"],
            control_weight=p["control_weight"],
            state_weight=p["state_weight"],
        )
    if cfg.kind == "finite-dim":
        A = np.asarray(p["A"], dtype=float)
        B = np.asarray(p["B"], dtype=float)
        m = B.shape[1]
        return ProblemInstance(
            dynamics=LinearDynamics(A, B),
            cost=CostSpec(np.asarray(p["target"], dtype=float), p["control_weight"], p["state_weight"]),
            controls=BoxConstraints(np.broadcast_to(np.asarray(p["lower"], float), (m,)), np.broadcast_to(np.asarray(p["upper"], float), (m,))),
            horizon=T,
            nt=max(1, int(round(T / p["dt"]))),
            y0=None if p.get("y0") is None else np.asarray(p["y0"], dtype=float),
        )
    raise ValidationError(f"{cfg.kind} has no dynamic instance", "problem/type")


def solve_options(cfg: ExperimentConfig) -> SolveOptions:
    s = cfg.solver
    return SolveOptions(
        tolerance=s["tolerance"],
        max_iterations=s["max_iterations"],
        accelerate=s["accelerate"],
        free_initial=s["free_initial"],
        armijo=s["armijo"],
        seed=cfg.seed,
    )


def absolute_epsilons(cfg: ExperimentConfig, instance: ProblemInstance):
    """Turn relative epsilons into absolute ones; a zero target falls back to unit scale."""
    if cfg.epsilon_mode == "absolute":
        return list(cfg.epsilons)
    scale = instance.norm(instance.cost.mean_target())
    if scale == 0.0:
        log.info("target is zero; relative epsilons are taken as absolute")
        scale = 1.0
    return [e * scale for e in cfg.epsilons]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _num(x) -> str:
    return repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def write_outputs(output_dir: str, files: dict) -> None:
    """Write all ``files`` into a sibling temp dir, then move them into place.

    Nothing appears in ``output_dir`` unless every file was written.
    """
    target = os.path.abspath(output_dir)
    parent = os.path.dirname(target)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".turnpike-", dir=parent)
    try:
        os.chmod(tmp, 0o755)  # mkdtemp is private; the results are not
        for name, text in files.items():
            with open(os.path.join(tmp, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        if not os.path.exists(target):
            os.rename(tmp, target)
            return
        if not os.path.isdir(target):
            raise NotADirectoryError(target)
        for name in files:
            os.replace(os.path.join(tmp, name), os.path.join(target, name))
    finally:
        if os.path.exists(tmp):
            shutil.rmtree(tmp, ignore_errors=True)


def _manifest(cfg: ExperimentConfig, started: str, elapsed: float, status: int) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {
            "turnpike_lab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "started_utc": started,
        "wall_clock_seconds": elapsed,
        "exit_status": status,
    }


def _static_json(sol, residuals) -> dict:
    return {
        "value": sol.value,
        "kkt_residual": sol.kkt_residual,
        "residuals": residuals,
        "iterations": sol.iterations,
        "y_s": sol.y_s,
        "u_s": sol.u_s,
        "p_s": sol.p_s,
        "phi_s": sol.phi_s,
        "mu_a": sol.mu_a,
        "mu_b": sol.mu_b,
    }


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


def _run_dynamic(cfg: ExperimentConfig, jobs: int):
    base = build_instance(cfg)
    static = solve_static_lq(base)
    residuals = kkt_residuals(base, static)
    flags, warnings = [], []
    if static.kkt_residual > KKT_TOL:
        flags.append(f"static KKT residual {static.kkt_residual:.3e} exceeds {KKT_TOL:g}")

    h = base.weight
    if cfg.supply["kind"] == "bilinear":
        supply = SupplyRate.bilinear(base)
    else:
        supply = SupplyRate.shifted_cost(base, static)
    if cfg.storage["kind"] == "half-norm":
        storage = StorageFunction.half_norm(h)
    elif cfg.storage["kind"] == "multiplier-discrete":
        storage = StorageFunction.from_multiplier_discrete(static, base)
    else:
        storage = StorageFunction.from_multiplier(static, h)

    samples = cfg.certification["samples"]
    probe = random_admissible_trajectories(base, samples, seed=cfg.seed)
    probe_min = min(check_dissipation(tr, storage, supply).min_residual for tr in probe)
    probe_rate = estimate_dissipation_rate(probe, storage, supply)
    if probe_min < -DISSIPATION_TOL:
        flags.append(f"dissipation inequality fails on random trajectories (min residual {probe_min:.3e})")

    eps = absolute_epsilons(cfg, base)
    report = horizon_sweep(
        base, cfg.horizons, eps, solve_options(cfg), static, storage=storage, supply=supply, jobs=jobs, certify_with=probe
    )
    flags.extend(report.flags)
    if report.rate <= 0:
        flags.append("no positive strict dissipation rate certified")
    if report.fit is None:
        warnings.append("gap rate undefined: fewer than 3 horizons with positive gaps")
    elif report.fit.saturated:
        warnings.append(f"gap slope {report.fit.slope:.3f} is far from -1")

    rows = []
    for r in sorted(report.rows, key=lambda r: r.T):
        for e in report.epsilons:
            rows.append(
                {
                    "T": _num(r.T),
                    "J_T": _num(r.value),
                    "J_s": _num(report.static_value),
                    "gap": _num(r.gap),
                    "scaled_gap": _num(r.scaled_gap),
                    "eps": _num(e),
                    "Q_measure": _num(r.measures[e]),
                    "integral_turnpike": _num(r.integral_turnpike),
                    "L2_deviation": _num(r.l2_deviation),
                    "markov_ok": "true" if r.markov_ok[e] else "false",
                    "dissip_min_residual": _num(r.dissip_min_residual),
                }
            )
    summary = {
        "problem": cfg.kind,
        "mode": report.mode,
        "static_value": report.static_value,
        "slope": None if report.fit is None else report.fit.slope,
        "intercept": None if report.fit is None else report.fit.intercept,
        "fit_used": None if report.fit is None else report.fit.used,
        "fit_excluded": None if report.fit is None else report.fit.excluded,
        "epsilons": list(report.epsilons),
        "certification": {
            "storage": storage.kind,
            "supply": supply.kind,
            "samples": samples,
            "random_min_residual": probe_min,
            "random_rate": probe_rate.rate,
            "rate": report.rate,
            "storage_bound": report.storage_bound,
            "e_radius": report.e_radius,
        },
        "lambda_empirical": {repr(e): report.empirical_lambda(e) for e in report.epsilons},
        "lambda_note": "empirical maximum over the configured horizons",
        "uniform_bound": {repr(e): report.uniform_measure_bound(e) if report.rate > 0 else None for e in report.epsilons},
        "rows": [
            {
                "T": r.T,
                "value": r.value,
                "gap": r.gap,
                "scaled_gap": r.scaled_gap,
                "measures": {repr(e): r.measures[e] for e in report.epsilons},
                "integral_turnpike": r.integral_turnpike,
                "l2_deviation": r.l2_deviation,
                "markov_ok": {repr(e): r.markov_ok[e] for e in report.epsilons},
                "bound_ok": {repr(e): r.bound_ok[e] for e in report.epsilons},
                "uniform_bound_ok": {repr(e): r.uniform_bound_ok[e] for e in report.epsilons},
                "dissip_min_residual": r.dissip_min_residual,
                "converged": r.converged,
                "stationarity": r.stationarity,
            }
            for r in report.rows
        ],
    }
    return rows, summary, _static_json(static, residuals), flags, warnings


def _run_semilinear(cfg: ExperimentConfig):
    p = cfg.problem
    grid = SpatialGrid(p["n"], p["length"])
    yd = build_profile(p["target"], grid)
    sol = solve_static_semilinear(grid, yd)
    prob = SemilinearProblem(grid, yd)
    duality = check_strict_strong_duality(prob, sol, cfg.certification["samples"], seed=cfg.seed, radius=p["radius"])
    flags = []
    if sol.kkt_residual > NEWTON_TOL:
        flags.append(f"Newton residual {sol.kkt_residual:.3e} exceeds {NEWTON_TOL:g}")
    if not duality.rate > 0:
        flags.append("no positive strict duality rate on the sampled ball")
    summary = {
        "problem": cfg.kind,
        "static_value": sol.value,
        "slope": None,
        "target_norm": norm_h(yd, grid.h),
        "duality": {"rate": duality.rate, "samples": duality.samples, "radius": p["radius"], "resampled": duality.resampled},
        "rows": [],
    }
    return [], summary, _static_json(sol, {"newton": sol.kkt_residual}), flags, []


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunOutcome:
    """Execute the configured experiment and persist its artifacts.

    Returns a :class:`RunOutcome` with status 0 (clean) or 2 (a checked
    inequality or certificate failed).  Module errors propagate; the CLI maps
    them to status 1.
    """
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    if cfg.dynamic:
        rows, summary, static_doc, flags, warnings = _run_dynamic(cfg, jobs)
    else:
        rows, summary, static_doc, flags, warnings = _run_semilinear(cfg)
    status = EXIT_FLAGGED if flags else EXIT_OK
    summary["flags"] = flags
    summary["warnings"] = warnings
    elapsed = time.perf_counter() - t0
    files = {
        "report.csv": render_csv(rows),
        "report.json": _dump(summary),
        "static_solution.json": _dump(static_doc),
        "manifest.json": _dump(_manifest(cfg, started, elapsed, status)),
    }
    write_outputs(cfg.output_dir, files)
    for f in flags:
        log.warning("flag: %s", f)
    return RunOutcome(status, os.path.abspath(cfg.output_dir), flags, warnings, summary)


# ---------------------------------------------------------------------------
# Oracle comparisons
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleCase:
    index: int
    solver_value: float
    oracle_value: float
    search_space: int

    @property
    def ok(self) -> bool:
        return self.solver_value <= self.oracle_value + 1e-9


def oracle_instances(cfg: ExperimentConfig):
    """Tiny instances derived from the config for exhaustive comparison."""
    o = cfg.oracle
    rng = np.random.default_rng(cfg.seed)
    p = cfg.problem
    out = []
    for _ in range(o["instances"]):
        if cfg.kind == "heat-1d":
            grid = SpatialGrid(o["n"], p["length"])
            inst = heat_instance(
                grid,
                rng.uniform(-1.0, 1.0, grid.n),
                horizon=o["nt"] * p["dt"],
                dt=p["dt"],
                y0=rng.uniform(-1.0, 1.0, grid.n),
                lower=p["lower"],
                upper=p["upper"],
                control_weight=p["control_weight"],
                state_weight=p["state_weight"],
            )
        elif cfg.kind == "finite-dim":
            base = build_instance(cfg, horizon=o["nt"] * p["dt"])
            y0 = base.y0 if base.y0 is not None else rng.uniform(-1.0, 1.0, base.n)
            inst = base.replace(y0=y0, cost=CostSpec(rng.uniform(-1.0, 1.0, base.n), p["control_weight"], p["state_weight"]))
        else:
            raise ValidationError("the oracle needs a dynamic problem", "problem/type")
        lo, hi = inst.controls.lower, inst.controls.upper
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("the oracle needs finite control bounds", "problem/lower")
        levels = [np.linspace(a, b, o["levels"]) for a, b in zip(lo, hi)]
        out.append((inst, levels))
    return out


def run_oracle(cfg: ExperimentConfig):
    cases = []
    opts = SolveOptions(tolerance=1e-10, free_initial=False)
    for i, (inst, levels) in enumerate(oracle_instances(cfg)):
        best, _ = brute_force_oracle(inst, levels)
        res = solve(inst, opts)
        size = int(np.prod([len(lv) for lv in levels], dtype=float) ** inst.nt)
        cases.append(OracleCase(i, res.value, best, size))
    return cases
