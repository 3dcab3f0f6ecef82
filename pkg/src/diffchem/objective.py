"""Observation sets and the log-MSE objective on mole fractions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

LOG_EPS = 1e-20
DEFAULT_PRIMAL = ("H2", "O2", "H2O")


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Reference mole fractions X (n_obs, n_species) at residence times ``tau``."""

    tau: np.ndarray
    X: np.ndarray
    primal: tuple
    weights: np.ndarray | None = None
    species: tuple = ()

    def __post_init__(self):
        tau = np.array(self.tau, dtype=float).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != tau.size:
            raise ValueError("X must have shape (n_obs, n_species)")
        if np.any(~np.isfinite(X)) or np.any(X < 0):
            raise ValueError("reference mole fractions must be finite and non-negative")
        w = np.ones(tau.size) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != tau.shape or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per observation")
        primal = tuple(int(i) for i in self.primal)
        if not primal or len(set(primal)) != len(primal):
            raise ValueError("primal species set must be non-empty and unique")
        if min(primal) < 0 or max(primal) >= X.shape[1]:
            raise ValueError("primal species index out of range")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "primal", primal)
        object.__setattr__(self, "species", tuple(self.species))

    @property
    def n_obs(self) -> int:
        return self.tau.size

    @property
    def secondary(self) -> tuple:
        return tuple(i for i in range(self.X.shape[1]) if i not in self.primal)

    def replace(self, **kw) -> "ObservationSet":
        d = dict(tau=self.tau, X=self.X, primal=self.primal, weights=self.weights,
                 species=self.species)
        d.update(kw)
        return ObservationSet(**d)


@dataclass(frozen=True)
class LossSpec:
    primal: tuple = DEFAULT_PRIMAL
    eps: float = LOG_EPS

    def indices(self, mech) -> tuple:
        names = mech.species_names
        missing = [p for p in self.primal if p not in names]
        if not self.primal or missing:
            raise ValueError(f"primal species not in mechanism: {missing or 'empty set'}")
        return tuple(names.index(p) for p in self.primal)


def observations_from_states(mech, tau, states, primal, weights=None) -> ObservationSet:
    """Build an observation set from packed states [T, Y...] at ``tau``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    X, _ = _mole_fractions(states[:, 1:], mech.molar_masses)
    if isinstance(primal, LossSpec):
        idx = primal.indices(mech)
    else:
        idx = LossSpec(tuple(primal)).indices(mech)
    return ObservationSet(tau, np.maximum(X, 0.0), idx, weights, mech.species_names)


def dump_observations(obs: ObservationSet) -> str:
    """CSV with columns tau, weight, X_<species>; primal species are listed in the header comment."""
    names = obs.species or tuple(f"S{i}" for i in range(obs.X.shape[1]))
    buf = io.StringIO()
    buf.write("# primal: " + ",".join(names[i] for i in obs.primal) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "weight"] + [f"X_{s}" for s in names])
    for k in range(obs.n_obs):
        w.writerow([repr(float(v)) for v in (obs.tau[k], obs.weights[k], *obs.X[k])])
    return buf.getvalue()


def load_observations(text: str, mech, primal=None) -> ObservationSet:
    """Parse observation CSV; species absent from the file get X = 0 and may not be primal."""
    lines = text.splitlines()
    header_primal = None
    body = []
    for line in lines:
        if line.startswith("#"):
            if line[1:].strip().startswith("primal:"):
                header_primal = [p.strip() for p in line.split(":", 1)[1].split(",") if p.strip()]
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if len(rows) < 2 or "tau" not in rows[0]:
        raise ValueError("observation CSV needs a 'tau' column and at least one row")
    head = [h.strip() for h in rows[0]]
    names = mech.species_names
    for h in head:
        if h not in ("tau", "weight") and not (h.startswith("X_") and h[2:] in names):
            raise ValueError(f"unknown observation column {h!r}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise ValueError(f"non-numeric observation value: {exc}") from None
    if data.shape[1] != len(head):
        raise ValueError("ragged observation CSV")
    col = {h: data[:, i] for i, h in enumerate(head)}
    X = np.column_stack([col.get(f"X_{s}", np.zeros(len(data))) for s in names])
    spec = LossSpec(tuple(primal or header_primal or DEFAULT_PRIMAL))
    idx = spec.indices(mech)
    for i in idx:
        if f"X_{names[i]}" not in col:
            raise ValueError(f"primal species {names[i]!r} has no observation column")
    return ObservationSet(col["tau"], X, idx, col.get("weight"), names)


def _mole_fractions(Y, M):
    inv = Y / M
    mbar = 1.0 / inv.sum(axis=-1, keepdims=True)
    return inv * mbar, mbar


@dataclass
class LogMSE:
    """Weighted mean of squared log-ratios of mole fractions over primal species.

    ``evaluate`` returns the value and its derivative with respect to every
    packed state [T, Y...] at the observation times.
    """

    mech: object
    obs: ObservationSet
    eps: float = LOG_EPS
    _norm: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.obs.X.shape[1] != self.mech.n_species:
            raise ValueError("observation species count does not match the mechanism")
        wsum = float(self.obs.weights.sum())
        self._norm = wsum * len(self.obs.primal) if wsum > 0 else 1.0

    @property
    def times(self) -> np.ndarray:
        return self.obs.tau

    def _check(self, states):
        states = np.asarray(states, dtype=float)
        if states.shape != (self.obs.n_obs, self.mech.n_species + 1):
            raise ValueError("predicted states are not aligned with the observation times")
        return states

    def residuals(self, states, species=None):
        states = self._check(states)
        idx = list(self.obs.primal if species is None else species)
        X, _ = _mole_fractions(states[:, 1:], self.mech.molar_masses)
        Xc = np.maximum(X[:, idx], 0.0)
        return np.log(Xc + self.eps) - np.log(self.obs.X[:, idx] + self.eps)

    def value(self, states, species=None) -> float:
        idx = self.obs.primal if species is None else species
        if len(idx) == 0:
            return 0.0
        r = self.residuals(states, idx)
        wsum = float(self.obs.weights.sum())
        norm = wsum * len(idx) if wsum > 0 else 1.0
        return float(np.sum(self.obs.weights[:, None] * r * r) / norm)

    def secondary(self, states) -> float:
        return self.value(states, self.obs.secondary)

    def evaluate(self, states):
        states = self._check(states)
        M = self.mech.molar_masses
        idx = list(self.obs.primal)
        X, mbar = _mole_fractions(states[:, 1:], M)
        Xp = X[:, idx]
        Xc = np.maximum(Xp, 0.0)
        r = np.log(Xc + self.eps) - np.log(self.obs.X[:, idx] + self.eps)
        w = self.obs.weights[:, None]
        val = float(np.sum(w * r * r) / self._norm)
        gX = np.zeros_like(X)
        gX[:, idx] = np.where(Xp >= 0, 2.0 * w * r / (self._norm * (Xc + self.eps)), 0.0)
        # dX_i/dY_l = delta_il mbar/M_i - X_i mbar/M_l
        gY = (mbar / M) * (gX - np.sum(gX * X, axis=1, keepdims=True))
        d = np.zeros_like(states)
        d[:, 1:] = gY
        return val, d


def loss(states, obs: ObservationSet, mech, eps: float = LOG_EPS):
    """(primal, secondary) log-MSE of predicted states against observations."""
    obj = LogMSE(mech, obs, eps)
    return obj.value(states), obj.secondary(states)
