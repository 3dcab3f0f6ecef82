"""Mass-action chemistry source terms and the Diff-Chem / Pure-Chem right-hand side.

The integrated state is packed as ``phi = [T, Y_1 .. Y_NS]``.  Kinetic
parameters ``theta`` multiply the reference forward rate constant of each
reaction; the reverse constant follows through the equilibrium constant so
that ``kf / kr`` never depends on ``theta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mechanism import P_STD, R_GAS, Mechanism, species_thermo

THETA_MIN = 1e-6
EPS_CLIP = 1e-12


@dataclass(frozen=True)
class RhsMode:
    """Diffusion forcing on/off (Diff-Chem / Pure-Chem) and forced / coupled temperature."""

    diffusion: bool = True
    coupled_T: bool = False

    @classmethod
    def parse(cls, mode: str = "diffchem", thermal: str = "forced") -> "RhsMode":
        mode, thermal = mode.lower().replace("-", ""), thermal.lower()
        if mode not in ("diffchem", "purechem"):
            raise ValueError(f"unknown mode {mode!r} (diffchem|purechem)")
        if thermal not in ("forced", "coupled"):
            raise ValueError(f"unknown thermal mode {thermal!r} (forced|coupled)")
        return cls(mode == "diffchem", thermal == "coupled")

    @property
    def name(self) -> str:
        return ("diffchem" if self.diffusion else "purechem") + (
            "/coupled" if self.coupled_T else "/forced")


DIFFCHEM = RhsMode(True, False)
PURECHEM = RhsMode(False, False)


def check_theta(theta, n_reactions: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (n_reactions,):
        raise ValueError(f"theta must have shape ({n_reactions},), got {theta.shape}")
    if np.any(~np.isfinite(theta)) or np.any(theta < THETA_MIN):
        raise ValueError(f"theta entries must be finite and >= {THETA_MIN}")
    return theta


# ----------------------------------------------------------------------------
# rate constants
# ----------------------------------------------------------------------------

def log_equilibrium_constants(mech: Mechanism, T, derivative: bool = False):
    """ln Kc for every reaction (concentration units); optionally d(ln Kc)/dT."""
    T = np.asarray(T, dtype=float)
    _, h, s = species_thermo(mech, T)
    nu = mech.nu_net
    Tb = T[..., None]
    dG = (h - Tb * s) @ nu.T
    dnu = nu.sum(axis=1)
    lnkc = dnu * np.log(P_STD / (R_GAS * Tb)) - dG / (R_GAS * Tb)
    if not derivative:
        return lnkc
    dH = h @ nu.T
    return lnkc, -dnu / Tb + dH / (R_GAS * Tb * Tb)


def equilibrium_constants(mech: Mechanism, T):
    return np.exp(log_equilibrium_constants(mech, T))


def _reference_constants(mech, T, derivative=False):
    """Rate constants at theta = 1, shape (..., NR), plus d ln k/dT if asked."""
    A, beta, Ea = mech.arrhenius
    T = np.asarray(T, dtype=float)
    Tb = T[..., None]
    lnkf = np.log(A) + beta * np.log(Tb) - Ea / (R_GAS * Tb)
    out = log_equilibrium_constants(mech, T, derivative)
    lnkc, dlnkc = out if derivative else (out, None)
    kf = np.exp(lnkf)
    kr = np.where(mech.reversible, np.exp(lnkf - lnkc), 0.0)
    if not derivative:
        return kf, kr
    dlnkf = beta / Tb + Ea / (R_GAS * Tb * Tb)
    return kf, kr, dlnkf, dlnkf - dlnkc


def rate_constants(mech: Mechanism, j: int, T: float, theta_j: float = 1.0):
    """Forward and reverse rate constants of reaction ``j`` (0-based) at T."""
    if theta_j < THETA_MIN:
        raise ValueError(f"theta must be >= {THETA_MIN}")
    kf, kr = _reference_constants(mech, T)
    return float(theta_j * kf[j]), float(theta_j * kr[j])


# ----------------------------------------------------------------------------
# production rates
# ----------------------------------------------------------------------------

def _concentration_products(Cp, nu):
    """prod_k Cp_k^nu_jk for every reaction; Cp (..., NS), nu (NR, NS)."""
    return np.prod(Cp[..., None, :] ** nu, axis=-1)


def _product_derivatives(Cp, nu, prod=None):
    """d/dC_k of prod_l C_l^nu_jl for one state; returns (NR, NS)."""
    if prod is not None and np.all(Cp > 0):
        return nu * prod[:, None] / Cp[None, :]
    powers = Cp[None, :] ** nu
    n = nu.shape[1]
    left = np.ones_like(powers)
    right = np.ones_like(powers)
    if n > 1:
        left[:, 1:] = np.cumprod(powers[:, :-1], axis=1)
        right[:, :-1] = np.cumprod(powers[:, :0:-1], axis=1)[:, ::-1]
    others = left * right
    base = np.where(nu > 0, Cp[None, :] ** np.maximum(nu - 1.0, 0.0), 0.0)
    return nu * base * others


def progress_rates(mech: Mechanism, T, C, theta):
    """Net rate of progress of every reaction, mol/(m^3 s); broadcasts over leading axes."""
    Cp = np.maximum(np.asarray(C, dtype=float), 0.0)
    kf, kr = _reference_constants(mech, T)
    pf = _concentration_products(Cp, mech.nu_forward)
    pr = _concentration_products(Cp, mech.nu_reverse)
    mask, eff = mech.third_body
    m = np.where(mask, Cp @ eff.T, 1.0)
    return theta * m * (kf * pf - kr * pr)


def production_rates_tc(mech: Mechanism, T, C, theta):
    """Net molar production rates from temperature and concentrations."""
    return progress_rates(mech, T, C, theta) @ mech.nu_net


def production_rates(mech: Mechanism, T, P, Y, theta):
    """Net molar production rates omega_dot, mol/(m^3 s), from (T, P, Y).

    Accepts a single state or a batch (T shape (N,), Y shape (N, NS)).
    """
    Y = np.asarray(Y, dtype=float)
    T = np.asarray(T, dtype=float)
    M = mech.molar_masses
    mbar = 1.0 / np.sum(Y / M, axis=-1)
    rho = P * mbar / (R_GAS * T)
    C = np.asarray(rho)[..., None] * Y / M
    return production_rates_tc(mech, T, C, theta)


# ----------------------------------------------------------------------------
# right-hand side and Jacobians
# ----------------------------------------------------------------------------

def _chemistry(mech, T, P, Y, theta, jac, coupled_T, consts=None):
    """Shared evaluation of density, production rates and (optionally) derivatives.

    ``consts`` may carry precomputed reference rate constants at this T.
    """
    M = mech.molar_masses
    YM = Y / M
    mbar = 1.0 / YM.sum()
    rho = P * mbar / (R_GAS * T)
    C = rho * YM
    positive = bool(np.all(C > 0))
    Cp = C if positive else np.maximum(C, 0.0)
    nu_f, nu_r, nu = mech.nu_forward, mech.nu_reverse, mech.nu_net
    if consts is not None:
        kf, kr = consts[0], consts[1]
        if coupled_T and jac:
            dlnkf, dlnkr = consts[2], consts[3]
    elif coupled_T and jac:
        kf, kr, dlnkf, dlnkr = _reference_constants(mech, T, derivative=True)
    else:
        kf, kr = _reference_constants(mech, T)
    gather = mech.gather_index
    if gather is not None:
        Ce = np.append(Cp, 1.0)
        pf = Ce[gather[0]].prod(axis=1)
        pr = Ce[gather[1]].prod(axis=1)
    else:
        pf = _concentration_products(Cp, nu_f)
        pr = _concentration_products(Cp, nu_r)
    mask, eff = mech.third_body
    m = np.where(mask, eff @ Cp, 1.0)
    rf = kf * pf
    rr = kr * pr
    net_ref = rf - rr
    q_unit = m * net_ref  # progress rate per unit theta
    q = theta * q_unit
    wdot = q @ nu
    out = {"rho": rho, "mbar": mbar, "C": C, "q_unit": q_unit, "q": q, "wdot": wdot}
    if not jac:
        return out
    # d q_j / d C_k  (through the clamp)
    if positive:
        mass_action = ((m * rf)[:, None] * nu_f - (m * rr)[:, None] * nu_r) / Cp
    else:
        dpf = _product_derivatives(Cp, nu_f, pf)
        dpr = _product_derivatives(Cp, nu_r, pr)
        mass_action = m[:, None] * (kf[:, None] * dpf - kr[:, None] * dpr)
    dq_dC = theta[:, None] * (eff * net_ref[:, None] + mass_action)
    if not positive:
        dq_dC = dq_dC * (C >= 0)[None, :]
    # dC_k/dY_l = rho/M_k delta_kl - C_k mbar/M_l
    dq_dY = dq_dC * (rho / M) - np.outer(dq_dC @ C, mbar / M)
    out["dwdot_dY"] = nu.T @ dq_dY
    if coupled_T:
        dq_dT = theta * m * (rf * dlnkf - rr * dlnkr) - dq_dC @ C / T
        out["dwdot_dT"] = dq_dT @ nu
    return out


def _profile_values(profiles, tau, mode):
    from .profiles import eval_profiles

    pv = eval_profiles(profiles, tau)
    sY = pv.sdiff_Y if mode.diffusion else np.zeros_like(pv.sdiff_Y)
    sT = pv.sdiff_T if mode.diffusion else 0.0
    return pv, sY, sT


class _TauCache:
    """Remembers the forcing and, in forced-T mode, the rate constants at the last tau.

    Newton iterations revisit the same stage time repeatedly, and everything
    that depends only on tau can be reused.
    """

    def __init__(self):
        self.tau = None
        self.T = None
        self.consts = None

    def get(self, mech, tau, profiles, mode, jac):
        if self.tau != tau:
            self.tau = tau
            self.pv = _profile_values(profiles, tau, mode)
            if mode.coupled_T:
                self.consts = None
            elif self.T != self.pv[0].T:
                # constant-temperature stretches reuse the constants across steps
                self.T = self.pv[0].T
                self.consts = _reference_constants(mech, self.T)
        return self.pv, self.consts


def _evaluate(mech, tau, phi, theta, profiles, mode, jac, cache=None):
    phi = np.asarray(phi, dtype=float)
    ns = mech.n_species
    if cache is None:
        (pv, sY, sT), consts = _profile_values(profiles, tau, mode), None
    else:
        (pv, sY, sT), consts = cache.get(mech, tau, profiles, mode, jac)
    T = phi[0] if mode.coupled_T else pv.T
    Y = phi[1:]
    P = pv.P
    M = mech.molar_masses
    ch = _chemistry(mech, T, P, Y, theta, jac, mode.coupled_T, consts)
    rho, mbar, wdot = ch["rho"], ch["mbar"], ch["wdot"]
    f = np.empty(ns + 1)
    dY = (sY + M * wdot) / rho
    f[1:] = dY
    if mode.coupled_T:
        cp_mol, h, _, dcp_mol = species_thermo(mech, T, derivative=True)
        cp = np.sum(Y * cp_mol / M)
        num = sT - h @ wdot
        fT = num / (rho * cp)
        f[0] = fT
    else:
        f[0] = pv.dT
    if not jac:
        return f, None, None

    nr = mech.n_reactions
    J = np.zeros((ns + 1, ns + 1))
    Jt = np.zeros((ns + 1, nr))
    dwdY = ch["dwdot_dY"]
    # d(dY_i)/dY_l = M_i dwdot_il / rho + dY_i mbar / M_l
    J[1:, 1:] = (M[:, None] * dwdY) / rho + np.outer(dY, mbar / M)
    # d(dY_i)/dtheta_j = M_i nu_ji q_unit_j / rho
    Jt[1:, :] = (M[:, None] * mech.nu_net.T * ch["q_unit"][None, :]) / rho
    if mode.coupled_T:
        dwdT = ch["dwdot_dT"]
        J[1:, 0] = M * dwdT / rho + dY / T
        dcp_dT = np.sum(Y * dcp_mol / M)
        J[0, 0] = (-(cp_mol @ wdot) - h @ dwdT) / (rho * cp) - fT * (-1.0 / T + dcp_dT / cp)
        J[0, 1:] = -(h @ dwdY) / (rho * cp) - fT * (-mbar / M + (cp_mol / M) / cp)
        Jt[0, :] = -(h @ mech.nu_net.T) * ch["q_unit"] / (rho * cp)
    return f, J, Jt


def rhs(mech: Mechanism, tau: float, phi, theta, profiles, mode: RhsMode = DIFFCHEM):
    """d(phi)/d(tau) for the streamline system."""
    return _evaluate(mech, tau, phi, np.asarray(theta, float), profiles, mode, False)[0]


def jacobians(mech: Mechanism, tau: float, phi, theta, profiles, mode: RhsMode = DIFFCHEM):
    """Analytic (d f/d phi, d f/d theta) of :func:`rhs`."""
    _, J, Jt = _evaluate(mech, tau, phi, np.asarray(theta, float), profiles, mode, True)
    return J, Jt


class DiffChemModel:
    """Right-hand side bound to a mechanism, forcing, mode and parameters.

    ``n_rhs`` counts every right-hand-side evaluation, including those
    bundled with a Jacobian; ``n_jac`` counts the Jacobian evaluations.
    """

    def __init__(self, mech: Mechanism, profiles, theta, mode: RhsMode = DIFFCHEM,
                 mass_tol: float | None = 1e-6):
        self.mech = mech
        self.profiles = profiles
        self.theta = check_theta(theta, mech.n_reactions)
        self.mode = mode
        self.n_state = mech.n_species + 1
        self.n_params = mech.n_reactions
        self.t0 = float(profiles.tau[0])
        self.tM = float(profiles.tau[-1])
        # the sum-of-Y check only makes sense when the forcing itself conserves mass
        conserving = (not mode.diffusion) or profiles.mass_conserving
        self._mass_tol_arg = mass_tol
        self.mass_tol = mass_tol if conserving else None
        self.n_rhs = 0
        self.n_jac = 0
        self._cache = _TauCache()

    def rhs(self, t, y):
        self.n_rhs += 1
        return _evaluate(self.mech, t, y, self.theta, self.profiles, self.mode, False, self._cache)[0]

    def jac(self, t, y):
        self.n_rhs += 1
        self.n_jac += 1
        return _evaluate(self.mech, t, y, self.theta, self.profiles, self.mode, True, self._cache)[1]

    def jacobians(self, t, y):
        self.n_rhs += 1
        self.n_jac += 1
        _, J, Jt = _evaluate(self.mech, t, y, self.theta, self.profiles, self.mode, True, self._cache)
        return J, Jt

    def evaluate(self, t, y):
        self.n_rhs += 1
        self.n_jac += 1
        return _evaluate(self.mech, t, y, self.theta, self.profiles, self.mode, True, self._cache)

    def check_state(self, t, y) -> bool:
        if self.mass_tol is None:
            return True
        return abs(np.sum(y[1:]) - 1.0) <= self.mass_tol

    def with_theta(self, theta) -> "DiffChemModel":
        return DiffChemModel(self.mech, self.profiles, theta, self.mode, self._mass_tol_arg)


def initial_state(T0: float, Y0) -> np.ndarray:
    return np.concatenate([[float(T0)], np.asarray(Y0, dtype=float)])
