"""Adam calibration of rate multipliers against reference mole fractions."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .kinetics import DIFFCHEM, THETA_MIN, DiffChemModel, check_theta
from .objective import LOG_EPS, LogMSE, LossSpec, ObservationSet, loss
from .odeint import IntegrationError, SolverConfig, calibration_config
from .sensitivity import model_gradient

__all__ = ["OptConfig", "OptimizationTrace", "OptimizationAborted", "adam_step", "init_theta",
           "perturb_observations", "optimize", "loss", "LossSpec"]


@dataclass
class OptConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_iters: int = 100
    theta_min: float = THETA_MIN
    method: str = "auto"
    grad_tol: float = 1e-8
    plateau_window: int = 20
    plateau_rtol: float = 1e-3
    log_space: bool = True
    max_failures: int = 3
    refresh_every: int = 0
    seed: int = 0
    solver: SolverConfig | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["solver"] = None if self.solver is None else {
            k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
            for k, v in asdict(self.solver).items()}
        return d


@dataclass
class OptimizationTrace:
    theta: list = field(default_factory=list)
    loss_primal: list = field(default_factory=list)
    loss_secondary: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    grad: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    stop_reason: str = ""

    def record(self, theta, res, wall_ms):
        self.theta.append(np.array(theta, dtype=float))
        self.loss_primal.append(float(res.loss))
        self.loss_secondary.append(float(res.secondary) if res.secondary is not None else 0.0)
        self.grad.append(np.array(res.grad, dtype=float))
        self.grad_norm.append(float(np.linalg.norm(res.grad)))
        self.wall_ms.append(float(wall_ms))

    def __len__(self):
        return len(self.loss_primal)

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.loss_primal))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "loss_primal", "loss_secondary", "grad_norm", "wall_ms"])
        for k in range(len(self)):
            w.writerow([k, repr(self.loss_primal[k]), repr(self.loss_secondary[k]),
                        repr(self.grad_norm[k]), f"{self.wall_ms[k]:.3f}"])
        return buf.getvalue()


class OptimizationAborted(RuntimeError):
    def __init__(self, message, trace: OptimizationTrace, theta_best):
        super().__init__(message)
        self.trace = trace
        self.theta_best = theta_best


def adam_step(theta, grad, moments, k: int, cfg: OptConfig, lower: float | None = None):
    """One Adam update (k counts from 0) followed by projection onto [lower, inf)."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    m, v = moments
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    mhat = m / (1.0 - cfg.beta1 ** (k + 1))
    vhat = v / (1.0 - cfg.beta2 ** (k + 1))
    new = np.asarray(theta, dtype=float) - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps_adam)
    lower = cfg.theta_min if lower is None else lower
    return np.maximum(new, lower), (m, v)


def init_theta(n_reactions: int, low: float = 0.5, high: float = 2.0, seed: int = 0):
    """Multipliers drawn i.i.d. uniform on [low, high]."""
    if not THETA_MIN < low < high or not np.isfinite(high):
        raise ValueError(f"invalid initialisation range [{low}, {high}]")
    return np.random.default_rng(seed).uniform(low, high, n_reactions)


def perturb_observations(obs: ObservationSet, sigma: float, seed: int = 0) -> ObservationSet:
    """Multiplicative Gaussian noise on the primal species, clamped at zero."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return obs
    X = obs.X.copy()
    idx = list(obs.primal)
    xi = np.random.default_rng(seed).standard_normal((obs.n_obs, len(idx)))
    X[:, idx] = np.maximum(0.0, X[:, idx] * (1.0 + sigma * xi))
    return obs.replace(X=X)


def _plateau(losses, window, rtol):
    """No rtol improvement of the best loss over the last ``window`` iterations,
    with the loss flat to rtol over that window (an Adam overshoot is not a plateau)."""
    if len(losses) <= window:
        return False
    recent = losses[-window:]
    lo = min(recent)
    flat = max(recent) - lo <= rtol * abs(lo)
    return flat and lo > (1.0 - rtol) * min(losses[:-window])


def optimize(mech, theta0, phi0, profiles, obs: ObservationSet, spec: LossSpec | None = None,
             cfg: OptConfig | None = None, mode=DIFFCHEM, refresh=None, callback=None):
    """Simulate, compare and update until a stopping rule fires.

    Returns the multipliers with the lowest recorded primal loss and the trace.
    ``refresh(theta) -> profiles`` is called every ``cfg.refresh_every``
    iterations when given; by default the forcing stays frozen.
    """
    cfg = cfg or OptConfig()
    sol = cfg.solver or calibration_config(mech.n_species)
    if spec is not None:
        obs = obs.replace(primal=spec.indices(mech))
    eps = spec.eps if spec is not None else LOG_EPS
    objective = LogMSE(mech, obs, eps)
    theta = check_theta(theta0, mech.n_reactions).copy()
    lower = np.log(cfg.theta_min) if cfg.log_space else cfg.theta_min
    params = np.log(theta) if cfg.log_space else theta.copy()
    moments = (np.zeros_like(params), np.zeros_like(params))
    trace = OptimizationTrace()

    def evaluate(th):
        t = time.perf_counter()
        model = DiffChemModel(mech, profiles, th, mode)
        res = model_gradient(model, phi0, objective, sol, cfg.method)
        if not (np.isfinite(res.loss) and np.all(np.isfinite(res.grad))):
            raise FloatingPointError("non-finite loss or gradient")
        return res, (time.perf_counter() - t) * 1e3

    def best():
        return trace.theta[trace.best_index].copy() if len(trace) else theta.copy()

    try:
        res, ms = evaluate(theta)
    except (IntegrationError, ValueError, ArithmeticError) as exc:
        raise OptimizationAborted(f"initial evaluation failed: {exc}", trace, theta) from exc
    trace.record(theta, res, ms)
    k = 0
    while True:
        if callback is not None:
            callback(k, trace)
        if trace.grad_norm[-1] < cfg.grad_tol:
            trace.stop_reason = "grad_norm"
            break
        if _plateau(trace.loss_primal, cfg.plateau_window, cfg.plateau_rtol):
            trace.stop_reason = "plateau"
            break
        if k >= cfg.max_iters:
            trace.stop_reason = "max_iters"
            break
        g = res.grad * theta if cfg.log_space else res.grad
        new_params, new_moments = adam_step(params, g, moments, k, cfg, lower)
        step = new_params - params
        failures = 0
        while True:
            cand = np.exp(params + step) if cfg.log_space else params + step
            cand = np.maximum(cand, cfg.theta_min)
            try:
                res, ms = evaluate(cand)
                break
            except (IntegrationError, ValueError, ArithmeticError) as exc:
                failures += 1
                if failures >= cfg.max_failures:
                    trace.stop_reason = "aborted"
                    raise OptimizationAborted(
                        f"{failures} consecutive evaluation failures at iteration {k + 1}: {exc}",
                        trace, best()) from exc
                step = 0.5 * step
        params = params + step
        moments = new_moments
        theta = cand
        k += 1
        if cfg.refresh_every and refresh is not None and k % cfg.refresh_every == 0:
            profiles = refresh(theta)
            res, ms = evaluate(theta)
        trace.record(theta, res, ms)
    return best(), trace


def theta_json(theta) -> str:
    return json.dumps({"theta": [float(t) for t in theta]})


def read_theta(text: str, n_reactions: int):
    data = json.loads(text)
    vals = data["theta"] if isinstance(data, dict) else data
    if isinstance(vals, dict):
        vals = [vals[str(j)] for j in range(n_reactions)]
    return check_theta(np.array(vals, dtype=float), n_reactions)
