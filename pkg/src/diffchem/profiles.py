"""Forced profiles T(tau), P(tau), S_diff(tau) on a residence-time grid.

All channels are interpolated with shape-preserving (monotone) piecewise
cubic Hermite polynomials.  Slopes come from scipy's PCHIP construction;
evaluation is done here so a single call returns every channel plus the
analytic temperature derivative.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.interpolate import PchipInterpolator

U_FLOOR = 1e-4  # m/s
MASS_SUM_TOL = 1e-10


class ProfileError(ValueError):
    pass


class ProfileValues(NamedTuple):
    T: float
    dT: float
    P: float
    sdiff_Y: np.ndarray
    sdiff_T: float


def residence_time(x, u, u_floor: float = U_FLOOR) -> np.ndarray:
    """tau(x) = int dx / max(u, u_floor), trapezoidal rule, tau[0] = 0."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim != 1 or x.shape != u.shape or len(x) < 2:
        raise ProfileError("x and u must be 1-D arrays of equal length >= 2")
    if np.any(np.diff(x) <= 0):
        raise ProfileError("x must be strictly increasing")
    # non-positive velocity is tolerated only near the stagnation end of the domain
    tail = x >= x[0] + 0.95 * (x[-1] - x[0])
    if np.any((u <= 0) & ~tail):
        raise ProfileError("non-positive velocity away from the final 5% of the domain")
    inv = 1.0 / np.maximum(u, u_floor)
    tau = np.zeros_like(x)
    tau[1:] = np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(x))
    return tau


@dataclass(frozen=True, eq=False)
class ForcedProfiles:
    """Tabulated forcing on a strictly increasing residence-time grid."""

    tau: np.ndarray
    T: np.ndarray
    P: np.ndarray
    sdiff_Y: np.ndarray  # (n_species, n_nodes), kg/(m^3 s)
    sdiff_T: np.ndarray  # W/m^3
    species: tuple = ()
    x: np.ndarray | None = None
    u: np.ndarray | None = None
    Y: np.ndarray | None = None  # reference mass fractions (n_nodes, n_species)
    sdiff_missing: bool = False
    _interp: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        conv = lambda a: None if a is None else np.array(a, dtype=float)
        for name in ("tau", "T", "P", "sdiff_Y", "sdiff_T", "x", "u", "Y"):
            object.__setattr__(self, name, conv(getattr(self, name)))
        n = len(self.tau)
        if n < 2:
            raise ProfileError("profiles need at least two nodes")
        if np.any(np.diff(self.tau) <= 0):
            raise ProfileError("tau grid must be strictly increasing")
        if self.sdiff_Y.ndim != 2 or self.sdiff_Y.shape[1] != n:
            raise ProfileError("sdiff_Y must have shape (n_species, n_nodes)")
        for name in ("T", "P", "sdiff_T", "x", "u"):
            a = getattr(self, name)
            if a is not None and a.shape != (n,):
                raise ProfileError(f"{name} must have length {n}")
        if self.Y is not None and self.Y.shape != (n, self.sdiff_Y.shape[0]):
            raise ProfileError("Y must have shape (n_nodes, n_species)")
        if np.any(self.T <= 0) or np.any(self.P <= 0):
            raise ProfileError("T and P must be positive at every node")
        if self.species and len(self.species) != self.sdiff_Y.shape[0]:
            raise ProfileError("species names do not match sdiff_Y rows")
        object.__setattr__(self, "species", tuple(self.species))
        data = np.column_stack([self.T, self.P, self.sdiff_T, self.sdiff_Y.T])
        pp = PchipInterpolator(self.tau, data, axis=0, extrapolate=False)
        coef = np.ascontiguousarray(pp.c)  # (4, n-1, channels), highest power first
        object.__setattr__(self, "_interp", {"c": coef, "dT": pp.derivative().c[:, :, 0]})

    @property
    def n_nodes(self) -> int:
        return len(self.tau)

    @property
    def n_species(self) -> int:
        return self.sdiff_Y.shape[0]

    @property
    def mass_conserving(self) -> bool:
        scale = np.max(np.abs(self.sdiff_Y)) if self.sdiff_Y.size else 0.0
        return bool(np.all(np.abs(self.sdiff_Y.sum(axis=0)) <= MASS_SUM_TOL * max(scale, 1e-300)))

    def replace(self, **kw) -> "ForcedProfiles":
        fields = dict(tau=self.tau, T=self.T, P=self.P, sdiff_Y=self.sdiff_Y,
                      sdiff_T=self.sdiff_T, species=self.species, x=self.x, u=self.u,
                      Y=self.Y, sdiff_missing=self.sdiff_missing)
        fields.update(kw)
        return ForcedProfiles(**fields)

    def without_diffusion(self) -> "ForcedProfiles":
        return self.replace(sdiff_Y=np.zeros_like(self.sdiff_Y),
                            sdiff_T=np.zeros_like(self.sdiff_T))


def eval_profiles(profiles: ForcedProfiles, tau: float) -> ProfileValues:
    """Interpolated forcing at ``tau`` together with the analytic dT/dtau."""
    grid = profiles.tau
    t0, t1 = grid[0], grid[-1]
    slack = 1e-12 * (t1 - t0)
    if not t0 - slack <= tau <= t1 + slack:
        raise ProfileError(f"tau={tau} outside profile domain [{t0}, {t1}]")
    tau = min(max(tau, t0), t1)
    k = int(np.searchsorted(grid, tau, side="right")) - 1
    k = min(max(k, 0), len(grid) - 2)
    s = tau - grid[k]
    c = profiles._interp["c"][:, k, :]
    vals = ((c[0] * s + c[1]) * s + c[2]) * s + c[3]
    d = profiles._interp["dT"][:, k]
    dT = (d[0] * s + d[1]) * s + d[2]
    return ProfileValues(float(vals[0]), float(dT), float(vals[1]), vals[3:], float(vals[2]))


def eval_profiles_many(profiles: ForcedProfiles, taus) -> np.ndarray:
    """Channel values [T, P, Sdiff_T, Sdiff_Y...] at many points (rows)."""
    return np.array([np.concatenate([[v.T, v.P, v.sdiff_T], v.sdiff_Y])
                     for v in (eval_profiles(profiles, t) for t in taus)])


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------

def _read_columns(text):
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise ProfileError("empty profile CSV")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ProfileError("duplicate column names in header")
    cols = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ProfileError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        for h, v in zip(header, row):
            try:
                cols[h].append(float(v))
            except ValueError:
                raise ProfileError(f"row {lineno}: column {h!r} is not numeric: {v!r}") from None
    return {h: np.array(v) for h, v in cols.items()}


def load_profiles(text: str, mech, u_floor: float = U_FLOOR) -> ForcedProfiles:
    """Build :class:`ForcedProfiles` from profile CSV text."""
    cols = _read_columns(text)
    names = mech.species_names
    known = set(names)
    for h in cols:
        for prefix in ("Y_", "SdiffY_"):
            if h.startswith(prefix) and h[len(prefix):] not in known:
                raise ProfileError(f"column {h!r} names a species not in the mechanism")
        if h not in ("x", "u", "tau", "T", "P", "SdiffT") and not h.startswith(("Y_", "SdiffY_")):
            raise ProfileError(f"unknown column {h!r}")
    for h in ("T", "P"):
        if h not in cols:
            raise ProfileError(f"missing mandatory column {h!r}")
    x = cols.get("x")
    u = cols.get("u")
    if "tau" in cols:
        tau = cols["tau"]
        if np.any(np.diff(tau) <= 0):
            raise ProfileError("tau column must be strictly increasing")
    elif x is not None and u is not None:
        tau = residence_time(x, u, u_floor)
    else:
        raise ProfileError("profile CSV needs a 'tau' column or both 'x' and 'u'")
    n = len(tau)
    missing = [s for s in names if f"SdiffY_{s}" not in cols] + (
        [] if "SdiffT" in cols else ["SdiffT"])
    sY = np.array([cols.get(f"SdiffY_{s}", np.zeros(n)) for s in names])
    sT = cols.get("SdiffT", np.zeros(n))
    if missing:
        warnings.warn(f"profile CSV has no diffusion source for {missing}; using zero",
                      stacklevel=2)
    Y = None
    if any(f"Y_{s}" in cols for s in names):
        Y = np.column_stack([cols.get(f"Y_{s}", np.zeros(n)) for s in names])
    return ForcedProfiles(tau, cols["T"], cols["P"], sY, sT, names, x, u, Y,
                          sdiff_missing=bool(missing))


def dump_profiles(profiles: ForcedProfiles) -> str:
    """Serialise to profile CSV at full precision."""
    names = profiles.species or tuple(f"S{i}" for i in range(profiles.n_species))
    header, cols = [], []
    if profiles.x is not None:
        header.append("x")
        cols.append(profiles.x)
    if profiles.u is not None:
        header.append("u")
        cols.append(profiles.u)
    header += ["tau", "T", "P"]
    cols += [profiles.tau, profiles.T, profiles.P]
    if profiles.Y is not None:
        header += [f"Y_{s}" for s in names]
        cols += list(profiles.Y.T)
    header += [f"SdiffY_{s}" for s in names] + ["SdiffT"]
    cols += list(profiles.sdiff_Y) + [profiles.sdiff_T]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in np.column_stack(cols):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def constant_profiles(tau_end, T, P, n_species, sdiff_Y=None, sdiff_T=0.0, n_nodes=2,
                      species=()):
    """Uniform forcing, handy for homogeneous-reactor style runs and tests."""
    tau = np.linspace(0.0, tau_end, n_nodes)
    sY = np.zeros((n_species, n_nodes)) if sdiff_Y is None else np.repeat(
        np.asarray(sdiff_Y, float)[:, None], n_nodes, axis=1)
    return ForcedProfiles(tau, np.full(n_nodes, float(T)), np.full(n_nodes, float(P)), sY,
                          np.full(n_nodes, float(sdiff_T)), species)
