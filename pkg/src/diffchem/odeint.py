"""Adaptive TR-BDF2 integration with cubic Hermite dense output.

One step is a trapezoidal stage to ``t + gamma*h`` followed by a BDF2 stage
to ``t + h`` (gamma = 2 - sqrt(2)).  Both stages share the iteration matrix
``I - d*h*J`` with ``d = gamma/2``, so one LU factorisation per step attempt
serves both Newton solves.  The local error is the difference to the
embedded third-order formula, filtered through the same factorisation so
that stiff components are not over-penalised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

GAMMA = 2.0 - math.sqrt(2.0)
D = GAMMA / 2.0
W = math.sqrt(2.0) / 4.0
# error = h/3 * (E0 f_n + E1 f_gamma + E2 f_{n+1})
E0, E1, E2 = 1.0 - math.sqrt(2.0), 1.0, -2.0 * D

SAFETY = 0.9
MAX_GROWTH = 5.0
MIN_SHRINK = 0.2


class IntegrationError(RuntimeError):
    def __init__(self, message, t=None, stats=None):
        super().__init__(message)
        self.t = t
        self.stats = dict(stats or {})

    def diagnostic(self) -> dict:
        return {"error": str(self), "t": self.t, "stats": self.stats}


class _NewtonFailure(Exception):
    pass


@dataclass
class SolverConfig:
    rtol: float = 1e-6
    atol: object = 1e-12  # scalar or per-component array
    max_steps: int = 100_000
    first_step: float | None = None
    max_step: float = math.inf
    checkpoints: tuple = ()
    max_newton: int = 8
    newton_tol: float = 1e-3
    max_halvings: int = 10
    # the controller keeps the local error below tol_factor * tolerance so that
    # the accumulated global error stays near the requested tolerance
    tol_factor: float = 0.02

    def __post_init__(self):
        if not self.rtol > 0 or np.any(np.asarray(self.atol) <= 0) or not self.tol_factor > 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def replace(self, **kw) -> "SolverConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return SolverConfig(**d)


def state_atol(n_species: int, atol_T: float = 1e-6, atol_Y: float = 1e-12) -> np.ndarray:
    """Per-component absolute tolerance for phi = [T, Y...]."""
    return np.concatenate([[atol_T], np.full(n_species, atol_Y)])


def default_config(n_species: int, **kw) -> SolverConfig:
    kw.setdefault("atol", state_atol(n_species))
    return SolverConfig(**kw)


def calibration_config(n_species: int, **kw) -> SolverConfig:
    """Looser error control for calibration loops, at roughly half the cost of the default."""
    kw.setdefault("tol_factor", 0.3)
    return default_config(n_species, **kw)


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    f: np.ndarray
    stats: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)  # time -> row index

    @property
    def t0(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def at_checkpoint(self, time: float) -> np.ndarray:
        return self.y[self.checkpoints[float(time)]]

    def __call__(self, time):
        return dense_eval(self, time)


def dense_factor(J, c):
    """LU of ``I - c*J``; returns a solver for right-hand sides."""
    n = J.shape[0]
    lu = lu_factor(np.eye(n) - c * J, check_finite=False)
    return lambda b: lu_solve(lu, b, check_finite=False)


def _wrms(v, scale):
    return math.sqrt(float(np.mean((v / scale) ** 2)))


def integrate(fun, jac, y0, t0: float, t1: float, cfg: SolverConfig | None = None, *,
              factor=None, check=None) -> Trajectory:
    """Integrate dy/dt = fun(t, y) from t0 to t1.

    ``jac(t, y)`` supplies the Jacobian used in the Newton iterations;
    ``factor(J, c)`` may replace the dense LU of ``I - c*J`` for structured
    systems.  ``check(t, y)`` may veto an otherwise accepted step, which is
    then retried with half the step size.
    """
    cfg = cfg or SolverConfig()
    factor = factor or dense_factor
    t0, t1 = float(t0), float(t1)
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    y = np.array(y0, dtype=float)
    n = y.size
    atol = np.broadcast_to(np.asarray(cfg.atol, dtype=float), (n,)) * cfg.tol_factor
    rtol = cfg.rtol * cfg.tol_factor
    span = t1 - t0
    stats = {"steps": 0, "rejected": 0, "newton_failures": 0, "newton_iters": 0,
             "rhs_evals": 0, "jac_evals": 0, "factorizations": 0}

    def f_eval(t, z):
        stats["rhs_evals"] += 1
        return np.asarray(fun(t, z), dtype=float)

    stops = sorted({float(c) for c in cfg.checkpoints})
    for c in stops:
        if c < t0 or c > t1:
            raise ValueError(f"checkpoint {c} outside [{t0}, {t1}]")
    cp_index = {c: 0 for c in stops if c == t0}
    stops = [c for c in stops if c > t0]
    if not stops or stops[-1] < t1:
        stops.append(t1)

    t = t0
    f = f_eval(t, y)
    if not np.all(np.isfinite(f)):
        raise IntegrationError("non-finite derivative at the initial state", t, stats)
    ts, ys, fs = [t], [y.copy()], [f.copy()]
    if cfg.first_step is not None:
        h = float(cfg.first_step)
    else:
        ratio = float(np.max(np.abs(f) / atol)) if np.any(f) else 0.0
        h = 1e-2 * span * min(1.0, 1.0 / ratio if ratio > 0 else 1.0)
    h = min(max(h, 1e-14 * span), cfg.max_step, span)
    h_min = 1e-14 * span
    stop_i = 0

    def newton(ts_, z, const, dh, solve, scale):
        prev = None
        for _ in range(cfg.max_newton):
            stats["newton_iters"] += 1
            fz = f_eval(ts_, z)
            if not np.all(np.isfinite(fz)):
                raise _NewtonFailure("non-finite derivative")
            dz = solve(const + dh * fz - z)
            z = z + dz
            nd = _wrms(dz, scale)
            if not math.isfinite(nd):
                raise _NewtonFailure("non-finite Newton update")
            if nd <= cfg.newton_tol:
                return z
            if prev is not None:
                rate = nd / prev
                if rate >= 1.0:
                    raise _NewtonFailure("Newton iteration diverging")
                if rate / (1.0 - rate) * nd <= cfg.newton_tol:
                    return z
            prev = nd
        raise _NewtonFailure("Newton iteration did not converge")

    while t < t1:
        if stats["steps"] >= cfg.max_steps:
            raise IntegrationError(f"max_steps={cfg.max_steps} exceeded at t={t}", t, stats)
        stats["jac_evals"] += 1
        J = jac(t, y)
        halvings = 0
        while True:
            target = stops[stop_i]
            h = min(h, cfg.max_step)
            landing = t + h >= target - 1e-12 * span
            if landing:
                h = target - t
            t_new = target if landing else t + h
            dh = D * h
            stats["factorizations"] += 1
            scale = atol + rtol * np.abs(y)
            try:
                solve = factor(J, dh)
                const1 = y + dh * f
                yg = newton(t + GAMMA * h, y + GAMMA * h * f, const1, dh, solve, scale)
                fg = (yg - y) / dh - f
                const2 = y + W * h * (f + fg)
                yn = newton(t_new, yg + (1.0 - GAMMA) * h * fg, const2, dh, solve, scale)
                fn = (yn - const2) / dh
                est = solve((h / 3.0) * (E0 * f + E1 * fg + E2 * fn))
            except (_NewtonFailure, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                stats["newton_failures"] += 1
                halvings += 1
                if halvings > cfg.max_halvings or h * 0.5 < h_min:
                    raise IntegrationError(
                        f"Newton failure after {halvings - 1} step halvings at t={t}: {exc}",
                        t, stats) from exc
                h *= 0.5
                continue
            err = _wrms(est, atol + rtol * np.maximum(np.abs(y), np.abs(yn)))
            if not math.isfinite(err):
                err = math.inf
            if err > 1.0:
                stats["rejected"] += 1
                h *= max(MIN_SHRINK, SAFETY * err ** (-1.0 / 3.0)) if math.isfinite(err) else MIN_SHRINK
                if h < h_min:
                    raise IntegrationError(f"step size underflow at t={t}", t, stats)
                continue
            if check is not None and not check(t_new, yn):
                stats["rejected"] += 1
                halvings += 1
                if halvings > cfg.max_halvings or h * 0.5 < h_min:
                    raise IntegrationError(f"state check failed at t={t_new}", t_new, stats)
                h *= 0.5
                continue
            break
        t, y = t_new, yn
        f = f_eval(t, y)
        stats["steps"] += 1
        ts.append(t)
        ys.append(y.copy())
        fs.append(f.copy())
        if landing:
            cp_index[target] = len(ts) - 1
            stop_i += 1
        growth = MAX_GROWTH if err == 0 else min(MAX_GROWTH, SAFETY * err ** (-1.0 / 3.0))
        h = max(h * max(MIN_SHRINK, growth), h_min)
    stats["last_step"] = h
    cp_index.setdefault(t1, len(ts) - 1)
    return Trajectory(np.array(ts), np.array(ys), np.array(fs), stats, cp_index)


def dense_eval(traj: Trajectory, t):
    """Cubic Hermite interpolant of the trajectory at ``t`` (scalar)."""
    ts = traj.t
    slack = 1e-12 * (ts[-1] - ts[0])
    if not ts[0] - slack <= t <= ts[-1] + slack:
        raise ValueError(f"t={t} outside trajectory range [{ts[0]}, {ts[-1]}]")
    k = int(np.searchsorted(ts, t, side="right")) - 1
    k = min(max(k, 0), len(ts) - 2)
    h = ts[k + 1] - ts[k]
    s = (t - ts[k]) / h
    if s <= 0.0:
        return traj.y[k].copy()
    if s >= 1.0:
        return traj.y[k + 1].copy()
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return (h00 * traj.y[k] + h10 * h * traj.f[k] + h01 * traj.y[k + 1]
            + h11 * h * traj.f[k + 1])


def trajectory_csv(traj: Trajectory, species=()) -> str:
    names = ["T"] + [f"Y_{s}" for s in species] if species else [
        f"y{i}" for i in range(traj.y.shape[1])]
    lines = [",".join(["tau"] + names)]
    for t, row in zip(traj.t, traj.y):
        lines.append(",".join(repr(float(v)) for v in (t, *row)))
    return "\n".join(lines) + "\n"
