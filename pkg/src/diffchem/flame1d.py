"""Steady one-dimensional burner-stabilised flat flame.

Finite-volume discretisation on a given grid with constant mass flux:

* convection: face values by upwind linear extrapolation (second order),
  central at the first face;
* diffusion: Fickian fluxes with a correction velocity so that the species
  fluxes sum to zero at every face;
* inlet Dirichlet, outlet zero-gradient.

The steady residual is driven to zero by pseudo-transient continuation
followed by damped Newton iterations on a colored finite-difference sparse
Jacobian.  The converged solution also yields the forced profiles for the
streamline model, using the same face fluxes.
"""
from __future__ import annotations

import io
import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .kinetics import check_theta, production_rates
from .mechanism import ATOMIC_MASS, R_GAS, builtin_mechanism, load_mechanism, species_thermo
from .objective import DEFAULT_PRIMAL, ObservationSet
from .profiles import ForcedProfiles, residence_time

T_REF = 300.0
D_EXPONENT = 1.7
LAMBDA_EXPONENT = 0.7
N_COLORS = 4  # residual row k depends on nodes k-2 .. k+1


class FlameError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class InletBC:
    Y: np.ndarray
    T: float
    mdot: float
    P: float = 101325.0

    def __post_init__(self):
        Y = np.array(self.Y, dtype=float)
        object.__setattr__(self, "Y", Y)
        if np.any(Y < 0) or abs(Y.sum() - 1.0) > 1e-10:
            raise ValueError("inlet mass fractions must be non-negative and sum to 1 within 1e-10")
        if not (self.T > 0 and self.mdot > 0 and self.P > 0):
            raise ValueError("inlet T, mass flux and pressure must be positive")

    @classmethod
    def from_composition(cls, mech, comp: dict, T, mdot, P=101325.0, basis="mole"):
        v = np.zeros(mech.n_species)
        for name, val in comp.items():
            v[mech.species_names.index(name)] = float(val)
        v = v / v.sum()
        if basis == "mole":
            v = v * mech.molar_masses
            v = v / v.sum()
        elif basis != "mass":
            raise ValueError("basis must be 'mole' or 'mass'")
        return cls(v, T, mdot, P)


@dataclass(frozen=True, eq=False)
class Transport:
    """Power-law transport: D_i = Dref_i (T/300)^1.7 (101325/P), lambda = lambda_ref (T/300)^0.7."""

    lambda_ref: float = 0.026
    d_scale: float = 1.0
    dref: np.ndarray | None = None  # overrides the mechanism's reference diffusivities

    def diffusivities(self, mech, T, P):
        dref = mech.d_ref if self.dref is None else np.asarray(self.dref, dtype=float)
        T = np.asarray(T, dtype=float)
        return self.d_scale * dref * ((T / T_REF) ** D_EXPONENT * (101325.0 / P))[..., None]

    def conductivity(self, T):
        return self.lambda_ref * (np.asarray(T, dtype=float) / T_REF) ** LAMBDA_EXPONENT


def tanh_profile(x, T_in, T_burnt, x_center, width):
    """Smooth temperature ramp used for fixed-temperature flames."""
    x = np.asarray(x, dtype=float)
    return T_in + (T_burnt - T_in) * 0.5 * (1.0 + np.tanh((x - x_center) / width))


@dataclass(eq=False)
class FlameSolution:
    x: np.ndarray
    Y: np.ndarray  # (n_nodes, n_species)
    T: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    residual: float
    mech: object
    bc: InletBC
    theta: np.ndarray
    transport: Transport
    thermal_mode: str
    converged: bool = True
    outlet_Y: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def tau(self) -> np.ndarray:
        return residence_time(self.x, self.u)

    @property
    def X(self) -> np.ndarray:
        inv = self.Y / self.mech.molar_masses
        return inv / inv.sum(axis=1, keepdims=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.mech.species_names
        w.writerow(["x", "u", "rho", "tau", "T", "P"] + [f"Y_{s}" for s in names])
        tau = self.tau
        for k in range(len(self.x)):
            w.writerow([repr(float(v)) for v in (self.x[k], self.u[k], self.rho[k], tau[k],
                                                 self.T[k], self.bc.P, *self.Y[k])])
        return buf.getvalue()


class _Discretization:
    def __init__(self, mech, bc, x, theta, transport, T_fixed, energy, outlet_Y):
        self.mech, self.bc, self.theta, self.tr = mech, bc, theta, transport
        self.x = x
        self.n = len(x)
        self.ns = mech.n_species
        self.energy = energy
        self.nv = self.ns + (1 if energy else 0)
        self.T_fixed = T_fixed
        self.outlet_Y = outlet_Y
        h = np.diff(x)
        self.h = h
        self.dV = np.zeros(self.n)
        self.dV[1:-1] = 0.5 * (x[2:] - x[:-2])
        # face j+1/2 (j >= 1): value extrapolated upwind from nodes j-1, j
        self.r = np.zeros(self.n - 1)
        self.r[1:] = 0.5 * h[1:] / h[:-1]
        self.M = mech.molar_masses

    # state packing -----------------------------------------------------------
    def split(self, U):
        U = U.reshape(self.n, self.nv)
        Y = U[:, :self.ns]
        T = U[:, self.ns] if self.energy else self.T_fixed
        return Y, T

    def density(self, Y, T):
        mbar = 1.0 / np.sum(Y / self.M, axis=1)
        return self.bc.P * mbar / (R_GAS * T)

    def face_upwind(self, V):
        F = np.empty((self.n - 1,) + V.shape[1:])
        F[0] = 0.5 * (V[0] + V[1])
        r = self.r[1:].reshape((-1,) + (1,) * (V.ndim - 1))
        F[1:] = V[1:-1] + r * (V[1:-1] - V[:-2])
        return F

    def diffusive_flux(self, Y, T, rho):
        rho_f = 0.5 * (rho[1:] + rho[:-1])
        T_f = 0.5 * (T[1:] + T[:-1])
        D = self.tr.diffusivities(self.mech, T_f, self.bc.P)
        dY = np.diff(Y, axis=0) / self.h[:, None]
        Yf = 0.5 * (Y[1:] + Y[:-1])
        Yf = Yf / Yf.sum(axis=1, keepdims=True)
        DdY = D * dY
        return -rho_f[:, None] * DdY + rho_f[:, None] * Yf * DdY.sum(axis=1, keepdims=True)

    def pieces(self, U):
        Y, T = self.split(U)
        T = np.broadcast_to(T, (self.n,)).astype(float)
        rho = self.density(Y, T)
        conv = self.bc.mdot * self.face_upwind(Y)
        J = self.diffusive_flux(Y, T, rho)
        wdot = production_rates(self.mech, T, self.bc.P, Y, self.theta)
        return Y, T, rho, conv, J, wdot

    def residual(self, U):
        Y, T, rho, conv, J, wdot = self.pieces(U)
        mdot = self.bc.mdot
        R = np.zeros((self.n, self.nv))
        R[1:-1, :self.ns] = (np.diff(conv, axis=0) + np.diff(J, axis=0)
                             - self.dV[1:-1, None] * self.M * wdot[1:-1])
        R[0, :self.ns] = mdot * (Y[0] - self.bc.Y)
        if self.outlet_Y is None:
            R[-1, :self.ns] = mdot * (Y[-1] - Y[-2])
        else:
            R[-1, :self.ns] = mdot * (Y[-1] - self.outlet_Y)
        if self.energy:
            cp_mol, h_mol, _ = species_thermo(self.mech, T)
            cp_i = cp_mol / self.M
            cp = np.sum(Y * cp_i, axis=1)
            lam = self.tr.conductivity(0.5 * (T[1:] + T[:-1]))
            q = -lam * np.diff(T) / self.h
            Tf = self.face_upwind(T)
            dTc = (T[2:] - T[:-2]) / (self.x[2:] - self.x[:-2])
            Jn = 0.5 * (J[1:] + J[:-1])
            R[1:-1, -1] = (mdot * cp[1:-1] * np.diff(Tf) + np.diff(q)
                           + self.dV[1:-1] * (np.sum(cp_i[1:-1] * Jn, axis=1) * dTc
                                              + np.sum(h_mol[1:-1] * wdot[1:-1], axis=1)))
            R[0, -1] = mdot * cp[0] * (T[0] - self.bc.T)
            R[-1, -1] = mdot * cp[-1] * (T[-1] - T[-2])
        return R.ravel()

    def scale(self, U):
        """Row scales turning residuals into dimensionless numbers."""
        s = np.full((self.n, self.nv), self.bc.mdot)
        if self.energy:
            Y, T = self.split(U)
            cp_mol, _, _ = species_thermo(self.mech, T)
            s[:, -1] = self.bc.mdot * np.sum(Y * cp_mol / self.M, axis=1) * 1000.0
        return s.ravel()

    def capacity(self, U):
        Y, T = self.split(U)
        T = np.broadcast_to(T, (self.n,))
        rho = self.density(Y, T)
        c = np.zeros((self.n, self.nv))
        c[1:-1, :self.ns] = (rho * self.dV)[1:-1, None]
        if self.energy:
            cp_mol, _, _ = species_thermo(self.mech, T)
            c[1:-1, -1] = (rho * self.dV * np.sum(Y * cp_mol / self.M, axis=1))[1:-1]
        return c.ravel()

    def jacobian(self, U, R0=None):
        n, nv = self.n, self.nv
        R0 = self.residual(U) if R0 is None else R0
        Um = U.reshape(n, nv)
        typ = np.full(nv, 1e-3)
        if self.energy:
            typ[-1] = 300.0
        rows, cols, vals = [], [], []
        base_rows = np.arange(nv)
        for c in range(N_COLORS):
            nodes = np.arange(c, n, N_COLORS)
            for v in range(nv):
                delta = 1.5e-8 * np.maximum(np.abs(Um[nodes, v]), typ[v])
                Up = Um.copy()
                Up[nodes, v] += delta
                dR = (self.residual(Up.ravel()) - R0).reshape(n, nv)
                for off in (-1, 0, 1, 2):
                    k = nodes + off
                    ok = (k >= 0) & (k < n)
                    kk, jj, dd = k[ok], nodes[ok], delta[ok]
                    rr = (kk[:, None] * nv + base_rows[None, :]).ravel()
                    cc = np.repeat(jj * nv + v, nv)
                    vals.append((dR[kk] / dd[:, None]).ravel())
                    rows.append(rr)
                    cols.append(cc)
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        keep = vals != 0.0
        N = n * nv
        return sp.csc_matrix((vals[keep], (rows[keep], cols[keep])), shape=(N, N))


def _norm(R, scale):
    return float(np.max(np.abs(R / scale)))


def _newton(disc, U, tol, max_iter, cap=None, U_old=None, dt=None):
    """Damped Newton on R(U) (+ cap (U - U_old)/dt for a pseudo-time step)."""

    def F(V):
        R = disc.residual(V)
        if dt is not None:
            R = R + cap * (V - U_old) / dt
        return R

    scale = disc.scale(U)
    R = F(U)
    nrm = _norm(R, scale)
    for it in range(max_iter):
        if not np.isfinite(nrm):
            return U, nrm, False, it
        if nrm <= tol:
            return U, nrm, True, it
        Jm = disc.jacobian(U, disc.residual(U))
        if dt is not None:
            Jm = Jm + sp.diags(cap / dt)
        try:
            dU = splu(Jm.tocsc()).solve(-R)
        except RuntimeError:
            return U, nrm, False, it
        alpha = 1.0
        for _ in range(8):
            V = U + alpha * dU
            with np.errstate(all="ignore"):
                try:
                    Rv = F(V)
                    nv = _norm(Rv, scale)
                except (ValueError, FloatingPointError):
                    nv = np.inf
            if np.isfinite(nv) and nv < nrm:
                break
            alpha *= 0.5
        else:
            return U, nrm, False, it
        U, R, nrm = V, Rv, nv
    return U, nrm, nrm <= tol, max_iter


def solve_bsf(mech, bc: InletBC, x, theta=None, thermal_mode: str = "fixed_T", T_profile=None,
              transport: Transport | None = None, tol: float = 1e-10, outlet_Y=None,
              initial=None, max_time_steps: int = 400, dt0: float = 1e-6) -> FlameSolution:
    """Converge the steady flame on grid ``x``.

    ``thermal_mode`` is ``"fixed_T"`` (temperature taken from ``T_profile``)
    or ``"energy"`` (``T_profile`` is only the initial guess).  ``outlet_Y``
    replaces the zero-gradient outlet by a Dirichlet condition, which is only
    meant for verification problems.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) < 20 or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be strictly increasing with at least 20 nodes")
    thermal_mode = {"solve_energy": "energy"}.get(thermal_mode, thermal_mode)
    if thermal_mode not in ("fixed_T", "energy"):
        raise ValueError("thermal_mode must be 'fixed_T' or 'energy'")
    theta = np.ones(mech.n_reactions) if theta is None else check_theta(theta, mech.n_reactions)
    transport = transport or Transport()
    if T_profile is None:
        T_profile = np.full(len(x), bc.T)
    T_profile = np.asarray(T_profile, dtype=float)
    if T_profile.shape != x.shape or np.any(T_profile <= 0):
        raise ValueError("temperature profile must be positive, one value per node")
    energy = thermal_mode == "energy"
    disc = _Discretization(mech, bc, x, theta, transport, T_profile, energy,
                           None if outlet_Y is None else np.asarray(outlet_Y, float))
    if initial is None:
        Y0 = np.tile(bc.Y, (len(x), 1))
    else:
        Y0 = np.asarray(initial, dtype=float).reshape(len(x), mech.n_species)
    U = np.column_stack([Y0, T_profile]) if energy else Y0.copy()
    U = U.ravel()
    stats = {"time_steps": 0, "newton_attempts": 0}
    dt = dt0
    converged = False
    for _ in range(max_time_steps):
        stats["newton_attempts"] += 1
        Un, nrm, ok, _ = _newton(disc, U, tol, 30)
        if ok:
            U, converged = Un, True
            break
        # pseudo-transient steps, growing the time step on success
        for _ in range(10):
            cap = disc.capacity(U)
            Ut, _, ok_t, _ = _newton(disc, U, 1e-6, 12, cap=cap, U_old=U, dt=dt)
            stats["time_steps"] += 1
            if ok_t:
                U = Ut
                dt = min(dt * 2.0, 1.0)
            else:
                dt *= 0.25
                if dt < 1e-14:
                    raise FlameError("pseudo-transient continuation failed")
        if stats["time_steps"] >= max_time_steps:
            break
    if not converged:
        raise FlameError(f"flame solver did not converge (scaled residual {nrm:.3e})")
    res = _norm(disc.residual(U), disc.scale(U))
    Y, T = disc.split(U)
    T = np.array(np.broadcast_to(T, (len(x),)), dtype=float)
    rho = disc.density(Y, T)
    return FlameSolution(x.copy(), Y.copy(), T, rho, bc.mdot / rho, res, mech, bc, theta,
                         transport, thermal_mode, True,
                         None if outlet_Y is None else np.asarray(outlet_Y, float), stats)


def _disc_for(sol: FlameSolution) -> _Discretization:
    return _Discretization(sol.mech, sol.bc, sol.x, sol.theta, sol.transport, sol.T,
                           sol.thermal_mode == "energy", sol.outlet_Y)


def _state_vector(sol):
    if sol.thermal_mode == "energy":
        return np.column_stack([sol.Y, sol.T]).ravel()
    return sol.Y.ravel()


def diffusion_sources(sol: FlameSolution):
    """Node values of S_diff^Y (n_nodes, NS) and S_diff^T (n_nodes,).

    Interior nodes use the solver's own face fluxes, S = -(J_{k+1/2} - J_{k-1/2})/dV.
    The two boundary nodes take the value implied by the streamline balance
    mdot dY/dx = S + M wdot with one-sided second-order derivatives.
    """
    disc = _disc_for(sol)
    U = _state_vector(sol)
    Y, T, rho, conv, J, wdot = disc.pieces(U)
    mech, x = sol.mech, sol.x
    M = mech.molar_masses
    n = len(x)
    sY = np.zeros((n, mech.n_species))
    sY[1:-1] = -np.diff(J, axis=0) / disc.dV[1:-1, None]

    def d_one_sided(V, k):
        if k == 0:
            h1, h2 = x[1] - x[0], x[2] - x[0]
            return (-(h1 + h2) / (h1 * h2) * V[0] + h2 / (h1 * (h2 - h1)) * V[1]
                    - h1 / (h2 * (h2 - h1)) * V[2])
        h1, h2 = x[-1] - x[-2], x[-1] - x[-3]
        return ((h1 + h2) / (h1 * h2) * V[-1] - h2 / (h1 * (h2 - h1)) * V[-2]
                + h1 / (h2 * (h2 - h1)) * V[-3])

    for k in (0, n - 1):
        sY[k] = sol.bc.mdot * d_one_sided(Y, k) - M * wdot[k]
    # the boundary sums vanish only up to round-off; restore the exact zero sum
    for k in (0, n - 1):
        sY[k] -= Y[k] / Y[k].sum() * sY[k].sum()

    cp_mol, h_mol, _ = species_thermo(mech, T)
    cp_i = cp_mol / M
    lam = sol.transport.conductivity(0.5 * (T[1:] + T[:-1]))
    q = -lam * np.diff(T) / disc.h
    sT = np.zeros(n)
    dTc = np.gradient(T, x)
    Jn = np.zeros((n, mech.n_species))
    Jn[1:-1] = 0.5 * (J[1:] + J[:-1])
    sT[1:-1] = -np.diff(q) / disc.dV[1:-1]
    sT -= np.sum(cp_i * Jn, axis=1) * dTc
    cp = np.sum(Y * cp_i, axis=1)
    for k in (0, n - 1):
        sT[k] = sol.bc.mdot * cp[k] * d_one_sided(T, k) + h_mol[k] @ wdot[k]
    return sY, sT


def export_profiles(sol: FlameSolution, n_obs: int = 50, primal=DEFAULT_PRIMAL):
    """Forced profiles on the residence-time grid plus a uniform-x observation set."""
    if not sol.converged:
        raise FlameError("cannot export an unconverged solution")
    mech = sol.mech
    sY, sT = diffusion_sources(sol)
    tau = sol.tau
    P = np.full(len(sol.x), sol.bc.P)
    profiles = ForcedProfiles(tau, sol.T, P, sY.T, sT, mech.species_names, sol.x, sol.u, sol.Y)
    return profiles, observation_set(sol, n_obs, primal)


def observation_set(sol: FlameSolution, n_obs: int = 50, primal=DEFAULT_PRIMAL):
    """Reference mole fractions at ``n_obs`` uniformly spaced positions."""
    x = sol.x
    xo = np.linspace(x[0], x[-1], n_obs)
    tau = sol.tau
    idx = np.searchsorted(x, xo)
    on_nodes = np.all((idx < len(x)) & np.isclose(x[np.minimum(idx, len(x) - 1)], xo,
                                                    rtol=0, atol=1e-12 * (x[-1] - x[0])))
    X = sol.X
    if on_nodes:
        to, Xo = tau[idx], X[idx]
    else:
        to = np.interp(xo, x, tau)
        Xo = np.column_stack([np.interp(xo, x, X[:, i]) for i in range(X.shape[1])])
    names = sol.mech.species_names
    pidx = tuple(names.index(p) for p in primal)
    return ObservationSet(to, np.maximum(Xo, 0.0), pidx, None, names)


def streamline_residual(sol: FlameSolution, profiles: ForcedProfiles | None = None):
    """rho u dY/dx - S_diff - M wdot at interior nodes using the solver's convection stencil."""
    disc = _disc_for(sol)
    U = _state_vector(sol)
    Y, T, rho, conv, J, wdot = disc.pieces(U)
    sY = diffusion_sources(sol)[0] if profiles is None else profiles.sdiff_Y.T
    adv = np.diff(conv, axis=0) / disc.dV[1:-1, None]
    return adv - sY[1:-1] - sol.mech.molar_masses * wdot[1:-1]


def element_fluxes(sol: FlameSolution):
    """Elemental mass flux (convective + diffusive) at every face, (n_faces, n_elements)."""
    disc = _disc_for(sol)
    U = _state_vector(sol)
    Y, T, rho, conv, J, wdot = disc.pieces(U)
    mech = sol.mech
    elems = sorted({e for s in mech.species for e in s.elements})
    A = np.array([[s.elements.get(e, 0) * mech.element_masses.get(e, ATOMIC_MASS.get(e, 0.0))
                   / s.molar_mass for e in elems] for s in mech.species])
    return (conv + J) @ A, elems


# ----------------------------------------------------------------------------
# case configuration
# ----------------------------------------------------------------------------

DEFAULT_CASE = {
    "mechanism": "li_h2",
    "inlet": {"composition": {"H2": 0.28, "O2": 0.14, "N2": 0.58}, "basis": "mole"},
    "T_in": 300.0,
    "mdot": 0.5,
    "P": 101325.0,
    "length": 0.006,
    "nodes": 1569,  # 49*32 + 1 so the 50 observations land on nodes
    "thermal_mode": "fixed_T",
    "T_profile": {"T_burnt": 1700.0, "x_center": 0.0015, "width": 0.0004},
    "transport": {"lambda_ref": 0.026, "d_scale": 1.0},
    "primal": list(DEFAULT_PRIMAL),
    "n_obs": 50,
}


CONTINUATION_NODES = 400  # grids above this are seeded from a half-resolution solve


@dataclass
class FlameCase:
    mech: object
    bc: InletBC
    x: np.ndarray
    thermal_mode: str
    T_profile: np.ndarray
    transport: Transport
    primal: tuple
    n_obs: int
    config: dict

    def solve(self, theta=None, continuation=True, **kw) -> FlameSolution:
        """Solve the case; large grids start from the solution on every other node."""
        T = self.T_profile
        n = len(self.x)
        if continuation and kw.get("initial") is None and n > CONTINUATION_NODES and n % 2 == 1:
            coarse = replace(self, x=self.x[::2], T_profile=self.T_profile[::2])
            c = coarse.solve(theta, True, **kw)
            kw["initial"] = np.column_stack([np.interp(self.x, c.x, c.Y[:, i])
                                             for i in range(c.Y.shape[1])])
            if self.thermal_mode != "fixed_T":
                T = np.interp(self.x, c.x, c.T)
        return solve_bsf(self.mech, self.bc, self.x, theta, self.thermal_mode, T,
                         self.transport, **kw)


def load_case(config=None, mech=None) -> FlameCase:
    """Build a flame case from a JSON path, a dict, or the built-in hydrogen default."""
    cfg = json.loads(json.dumps(DEFAULT_CASE))
    if config is not None:
        if isinstance(config, (str, Path)):
            config = json.loads(Path(config).read_text())
        for k, v in config.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict) and k != "inlet":
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    if mech is None:
        m = cfg["mechanism"]
        mech = builtin_mechanism(m) if not str(m).endswith(".mech") else load_mechanism(m)
    inlet = cfg["inlet"]
    bc = InletBC.from_composition(mech, inlet["composition"], cfg["T_in"], cfg["mdot"], cfg["P"],
                                  inlet.get("basis", "mole"))
    x = np.linspace(0.0, float(cfg["length"]), int(cfg["nodes"]))
    tp = cfg["T_profile"]
    T = tanh_profile(x, cfg["T_in"], tp["T_burnt"], tp["x_center"], tp["width"])
    tr = Transport(cfg["transport"].get("lambda_ref", 0.026), cfg["transport"].get("d_scale", 1.0))
    return FlameCase(mech, bc, x, cfg["thermal_mode"], T, tr, tuple(cfg["primal"]),
                     int(cfg["n_obs"]), cfg)
