"""Loss gradients with respect to the rate multipliers.

Three engines share one contract (:class:`GradientResult`):

* forward: integrate phi together with G = dphi/dtheta, G(t0) = 0;
* adjoint: store the primal trajectory, then integrate the adjoint and the
  gradient accumulator backward on s = tau_hi - tau, evaluating Jacobians on
  the dense interpolant and adding d e/d phi at every observation time;
* fd: one-sided finite differences, one extra solve per parameter.

The engines work on any model exposing ``n_state``, ``n_params``, ``theta``,
``rhs``, ``jac``, ``jacobians``, ``evaluate``, ``with_theta`` and the counters
``n_rhs`` / ``n_jac`` (see :class:`~diffchem.kinetics.DiffChemModel` and
:class:`CallableModel`), and on any objective exposing ``times`` and
``evaluate(states) -> (value, d value / d states)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .kinetics import DIFFCHEM, DiffChemModel
from .objective import LogMSE
from .odeint import SolverConfig, default_config, dense_eval, integrate

METHODS = ("forward", "adjoint", "fd")
AUTO_FORWARD_LIMIT = 2000
FD_H_REL = 1e-4
# absolute tolerance of the adjoint variables, relative to rtol * max |d e / d phi|
ADJ_ATOL_REL = 1e-3
# the stored primal is solved at this fraction of rtol: the backward pass reads its
# Jacobians off the interpolant and inherits its error (forward mode gets the same
# accuracy implicitly, since its error control also covers G)
ADJ_PRIMAL_RTOL = 0.1


@dataclass
class GradientResult:
    loss: float
    grad: np.ndarray
    method: str
    rhs_evals: int = 0
    jac_evals: int = 0
    integrations: int = 0
    steps: int = 0
    wall_ms: float = 0.0
    secondary: float | None = None
    states: np.ndarray | None = None  # predicted states at the observation times

    def to_json(self) -> dict:
        out = {"loss": self.loss, "grad": [float(g) for g in self.grad], "method": self.method,
               "rhs_evals": self.rhs_evals, "jac_evals": self.jac_evals,
               "integrations": self.integrations, "steps": self.steps,
               "wall_ms": self.wall_ms}
        if self.secondary is not None:
            out["loss_secondary"] = self.secondary
        return out


class CallableModel:
    """Model assembled from plain callables f(t, y, p), f_y(t, y, p), f_p(t, y, p)."""

    def __init__(self, f, f_y, f_p, theta, t0: float = 0.0, check=None):
        self.f, self.f_y, self.f_p = f, f_y, f_p
        self.theta = np.asarray(theta, dtype=float)
        self.n_params = self.theta.size
        self.t0 = float(t0)
        self._check = check
        self.n_rhs = 0
        self.n_jac = 0

    def rhs(self, t, y):
        self.n_rhs += 1
        return np.asarray(self.f(t, y, self.theta), dtype=float)

    def jac(self, t, y):
        self.n_rhs += 1
        self.n_jac += 1
        return np.atleast_2d(np.asarray(self.f_y(t, y, self.theta), dtype=float))

    def jacobians(self, t, y):
        self.n_rhs += 1
        self.n_jac += 1
        n = np.size(y)
        return (np.atleast_2d(np.asarray(self.f_y(t, y, self.theta), dtype=float)),
                np.asarray(self.f_p(t, y, self.theta), dtype=float).reshape(n, self.n_params))

    def evaluate(self, t, y):
        f = np.asarray(self.f(t, y, self.theta), dtype=float)
        J, Jt = self.jacobians(t, y)
        return f, J, Jt

    def check_state(self, t, y):
        return True if self._check is None else self._check(t, y)

    @property
    def mass_tol(self):
        return None if self._check is None else 0.0

    def with_theta(self, theta):
        return CallableModel(self.f, self.f_y, self.f_p, theta, self.t0, self._check)


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _start_time(model, t0):
    return float(getattr(model, "t0", 0.0) if t0 is None else t0)


def _obs_times(objective, t0):
    times = np.asarray(objective.times, dtype=float)
    if times.size == 0:
        raise ValueError("objective has no observation times")
    if np.any(times < t0):
        raise ValueError("observation times precede the initial time")
    return times


def _state_check(model):
    return model.check_state if getattr(model, "mass_tol", None) is not None else None


def _counters(model):
    return model.n_rhs, model.n_jac


def _finish(model, start, c0, loss, grad, method, integrations, steps, states, objective):
    n_rhs, n_jac = _counters(model)
    sec = objective.secondary(states) if hasattr(objective, "secondary") else None
    return GradientResult(float(loss), np.asarray(grad, dtype=float), method,
                          n_rhs - c0[0], n_jac - c0[1], integrations, steps,
                          (time.perf_counter() - start) * 1e3, sec, states)


def solve_primal(model, phi0, t_end, cfg: SolverConfig, checkpoints=(), t0=None):
    """Integrate the model from t0 to t_end, landing exactly on ``checkpoints``."""
    t0 = _start_time(model, t0)
    return integrate(model.rhs, model.jac, phi0, t0, t_end,
                     cfg.replace(checkpoints=tuple(checkpoints)), check=_state_check(model))


def observed_states(model, phi0, times, cfg: SolverConfig, t0=None):
    """States at ``times`` (any order, duplicates allowed) and the trajectory."""
    t0 = _start_time(model, t0)
    times = np.asarray(times, dtype=float)
    t_end = float(times.max())
    if t_end <= t0:
        return np.tile(np.asarray(phi0, float), (times.size, 1)), None
    traj = solve_primal(model, phi0, t_end, cfg, np.unique(times), t0)
    return np.array([traj.at_checkpoint(t) for t in times]), traj


def primal_loss(model, phi0, objective, cfg: SolverConfig, t0=None):
    t0 = _start_time(model, t0)
    times = _obs_times(objective, t0)
    states, traj = observed_states(model, phi0, times, cfg, t0)
    value, _ = objective.evaluate(states)
    return value, states, traj


# ----------------------------------------------------------------------------
# forward sensitivities
# ----------------------------------------------------------------------------

def forward_sensitivity(model, phi0, objective, cfg: SolverConfig, t0=None) -> GradientResult:
    start = time.perf_counter()
    c0 = _counters(model)
    t0 = _start_time(model, t0)
    phi0 = np.asarray(phi0, dtype=float)
    n, p = phi0.size, model.n_params
    times = _obs_times(objective, t0)
    t_end = float(times.max())
    if t_end <= t0:
        states = np.tile(phi0, (times.size, 1))
        value, _ = objective.evaluate(states)
        return _finish(model, start, c0, value, np.zeros(p), "forward", 0, 0, states, objective)

    cache = {"key": None, "J": None}

    def f_aug(t, z):
        phi = z[:n]
        f, J, Jt = model.evaluate(t, phi)
        cache["key"], cache["J"] = (t, phi.tobytes()), J
        out = np.empty_like(z)
        out[:n] = f
        out[n:] = (J @ z[n:].reshape(n, p) + Jt).ravel()
        return out

    def jac_aug(t, z):
        phi = z[:n]
        if cache["key"] == (t, phi.tobytes()):
            return cache["J"]
        return model.jac(t, phi)

    def factor(J, c):
        # block-diagonal iteration matrix: one LU serves phi and every column of G
        lu = lu_factor(np.eye(n) - c * J, check_finite=False)

        def solve(b):
            B = np.empty((n, 1 + p))
            B[:, 0] = b[:n]
            B[:, 1:] = b[n:].reshape(n, p)
            X = lu_solve(lu, B, check_finite=False)
            out = np.empty_like(b)
            out[:n] = X[:, 0]
            out[n:] = X[:, 1:].ravel()
            return out
        return solve

    atol = np.broadcast_to(np.asarray(cfg.atol, dtype=float), (n,))
    aug_cfg = cfg.replace(atol=np.concatenate([atol, np.repeat(atol, p)]),
                          checkpoints=tuple(np.unique(times)))
    check = _state_check(model)
    z0 = np.concatenate([phi0, np.zeros(n * p)])
    traj = integrate(f_aug, jac_aug, z0, t0, t_end, aug_cfg, factor=factor,
                     check=None if check is None else (lambda t, z: check(t, z[:n])))
    Z = np.array([traj.at_checkpoint(t) for t in times])
    states = Z[:, :n]
    value, d = objective.evaluate(states)
    grad = np.zeros(p)
    for m in range(times.size):
        grad += d[m] @ Z[m, n:].reshape(n, p)
    return _finish(model, start, c0, value, grad, "forward", 1, traj.stats["steps"], states,
                   objective)


# ----------------------------------------------------------------------------
# interpolating adjoint
# ----------------------------------------------------------------------------

def _adjoint_segment(model, traj, a, g, lo, hi, cfg, atol, first_step):
    """Integrate [a; g] from tau = hi down to tau = lo on s = hi - tau."""
    n, p = a.size, g.size
    cache = {"s": None}

    def mats(s):
        if cache["s"] != s:
            tau = min(max(hi - s, lo), hi)
            cache["s"] = s
            cache["J"], cache["Jt"] = model.jacobians(tau, dense_eval(traj, tau))
        return cache["J"], cache["Jt"]

    def f_b(s, z):
        J, Jt = mats(s)
        return np.concatenate([J.T @ z[:n], Jt.T @ z[:n]])

    def jac_b(s, z):
        return mats(s)

    def factor(mats_, c):
        J, Jt = mats_
        # I - c [[J^T, 0], [Jt^T, 0]] is block lower triangular
        lu = lu_factor(np.eye(n) - c * J.T, check_finite=False)

        def solve(b):
            xa = lu_solve(lu, b[:n], check_finite=False)
            return np.concatenate([xa, b[n:] + c * (Jt.T @ xa)])
        return solve

    seg_cfg = cfg.replace(atol=atol, checkpoints=(), first_step=first_step)
    res = integrate(f_b, jac_b, np.concatenate([a, g]), 0.0, hi - lo, seg_cfg, factor=factor)
    z = res.y[-1]
    return z[:n].copy(), z[n:].copy(), res.stats


def adjoint_sensitivity(model, phi0, objective, cfg: SolverConfig, t0=None) -> GradientResult:
    start = time.perf_counter()
    c0 = _counters(model)
    t0 = _start_time(model, t0)
    phi0 = np.asarray(phi0, dtype=float)
    n, p = phi0.size, model.n_params
    times = _obs_times(objective, t0)
    primal_cfg = cfg.replace(rtol=ADJ_PRIMAL_RTOL * cfg.rtol)
    states, traj = observed_states(model, phi0, times, primal_cfg, t0)
    value, d = objective.evaluate(states)
    grad = np.zeros(p)
    if traj is None:
        return _finish(model, start, c0, value, grad, "adjoint", 0, 0, states, objective)
    steps, integrations = traj.stats["steps"], 1
    amax = float(np.max(np.abs(d)))
    if amax == 0.0:
        return _finish(model, start, c0, value, grad, "adjoint", integrations, steps, states,
                       objective)
    jumps = {}
    for m, t in enumerate(times):
        jumps[t] = jumps.get(t, 0.0) + d[m]
    # per-component scales: adjoint entries of different species differ by many decades
    a_scale = np.max(np.abs(d), axis=0)
    a_scale = np.maximum(a_scale, 1e-12 * amax)
    g_scale = max(abs(value), 1e-12 * amax)
    atol = ADJ_ATOL_REL * cfg.rtol * np.concatenate([a_scale, np.full(p, g_scale)])
    knots = sorted(set(jumps) | {t0}, reverse=True)
    a = np.zeros(n)
    g = grad
    first = None
    for hi, lo in zip(knots[:-1], knots[1:]):
        a = a + jumps.get(hi, 0.0)
        if not np.any(a):
            continue
        a, g, st = _adjoint_segment(model, traj, a, g, lo, hi, cfg, atol, first)
        first = st["last_step"]
        steps += st["steps"]
        integrations += 1
    return _finish(model, start, c0, value, g, "adjoint", integrations, steps, states, objective)


# ----------------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------------

def fd_sensitivity(model, phi0, objective, cfg: SolverConfig, h_rel: float = FD_H_REL,
                   t0=None) -> GradientResult:
    if not h_rel > 0:
        raise ValueError("h_rel must be positive")
    start = time.perf_counter()
    theta = np.asarray(model.theta, dtype=float)
    base, states, traj = primal_loss(model, phi0, objective, cfg, t0)
    n_rhs, n_jac = model.n_rhs, model.n_jac
    steps = traj.stats["steps"] if traj is not None else 0
    grad = np.zeros(theta.size)
    for j in range(theta.size):
        tp = theta.copy()
        tp[j] = theta[j] + h_rel * theta[j]
        mj = model.with_theta(tp)
        lj, _, tj = primal_loss(mj, phi0, objective, cfg, t0)
        grad[j] = (lj - base) / (h_rel * theta[j])
        n_rhs += mj.n_rhs
        n_jac += mj.n_jac
        steps += tj.stats["steps"] if tj is not None else 0
    sec = objective.secondary(states) if hasattr(objective, "secondary") else None
    return GradientResult(float(base), grad, "fd", n_rhs, n_jac, theta.size + 1, steps,
                          (time.perf_counter() - start) * 1e3, sec, states)


def select_method(n_state: int, n_params: int) -> str:
    return "forward" if n_state * n_params <= AUTO_FORWARD_LIMIT else "adjoint"


def model_gradient(model, phi0, objective, cfg: SolverConfig, method: str = "auto",
                   t0=None, h_rel: float = FD_H_REL) -> GradientResult:
    if method == "auto":
        method = select_method(np.size(phi0), model.n_params)
    if method == "forward":
        return forward_sensitivity(model, phi0, objective, cfg, t0)
    if method == "adjoint":
        return adjoint_sensitivity(model, phi0, objective, cfg, t0)
    if method == "fd":
        return fd_sensitivity(model, phi0, objective, cfg, h_rel, t0)
    raise ValueError(f"unknown gradient method {method!r}; expected one of {METHODS} or 'auto'")


# ----------------------------------------------------------------------------
# chemistry-level entry points
# ----------------------------------------------------------------------------

def _setup(mech, theta, profiles, obs, mode, cfg):
    model = DiffChemModel(mech, profiles, theta, mode)
    objective = LogMSE(mech, obs)
    if np.any(obs.tau < model.t0) or np.any(obs.tau > model.tM):
        raise ValueError("observation times lie outside the profile domain")
    return model, objective, cfg or default_config(mech.n_species)


def forward_gradient(mech, theta, phi0, profiles, obs, mode=DIFFCHEM, cfg=None):
    model, objective, cfg = _setup(mech, theta, profiles, obs, mode, cfg)
    return forward_sensitivity(model, phi0, objective, cfg)


def adjoint_gradient(mech, theta, phi0, profiles, obs, mode=DIFFCHEM, cfg=None):
    model, objective, cfg = _setup(mech, theta, profiles, obs, mode, cfg)
    return adjoint_sensitivity(model, phi0, objective, cfg)


def fd_gradient(mech, theta, phi0, profiles, obs, mode=DIFFCHEM, cfg=None, h_rel=FD_H_REL):
    model, objective, cfg = _setup(mech, theta, profiles, obs, mode, cfg)
    return fd_sensitivity(model, phi0, objective, cfg, h_rel)


def gradient(mech, theta, phi0, profiles, obs, mode=DIFFCHEM, cfg=None, method="auto"):
    model, objective, cfg = _setup(mech, theta, profiles, obs, mode, cfg)
    return model_gradient(model, phi0, objective, cfg, method)
