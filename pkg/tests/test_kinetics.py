import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffchem.kinetics import (
    DIFFCHEM, PURECHEM, DiffChemModel, RhsMode, THETA_MIN, check_theta, equilibrium_constants,
    jacobians, production_rates, production_rates_tc, progress_rates, rate_constants, rhs,
)
from diffchem.mechanism import P_STD, R_GAS, builtin_mechanism, mixture_props, parse_mechanism, thermo_eval
from diffchem.profiles import constant_profiles

FLAT = "[3.5,0,0,0,0,0,0]"
B_STABLE = "[3.5,0,0,0,0,-20000.0,0]"
H2 = builtin_mechanism()


def toy(reaction, b="B M=0.004 elements=X:2", b_thermo=FLAT):
    return parse_mechanism(f"""
elements: X=0.002
species A M=0.002 elements=X:1
species {b}
thermo A Tlow=200 Tmid=1000 Thigh=3500 low={FLAT} high={FLAT}
thermo B Tlow=200 Tmid=1000 Thigh=3500 low={b_thermo} high={b_thermo}
reaction {reaction}
""")


def h2_state(seed=0, T=1500.0):
    rng = np.random.default_rng(seed)
    Y = rng.uniform(0.02, 1.0, H2.n_species)
    return T, Y / Y.sum()


def test_degenerate_arrhenius():
    mech = toy("2 A => B A=5e5 beta=0 Ea=0")
    kf, kr = rate_constants(mech, 0, 900.0)
    assert kf == pytest.approx(5e5, rel=1e-15) and kr == 0.0


def test_half_rate_activation():
    T = 1200.0
    mech = toy(f"2 A => B A=5e5 beta=0 Ea={R_GAS * T * math.log(2.0)!r}")
    assert rate_constants(mech, 0, T)[0] == pytest.approx(2.5e5, rel=1e-14)


@pytest.mark.parametrize("T", [300.0, 800.0, 1000.0, 1700.0, 2900.0])
def test_reverse_rate_matches_independent_equilibrium(T):
    for j, r in enumerate(H2.reactions):
        kf, kr = rate_constants(H2, j, T)
        dnu, dG = 0, 0.0
        for name, n in r.products.items():
            _, h, s = thermo_eval(H2.species[H2.species_index(name)], T)
            dnu += n
            dG += n * (h - T * s)
        for name, n in r.reactants.items():
            _, h, s = thermo_eval(H2.species[H2.species_index(name)], T)
            dnu -= n
            dG -= n * (h - T * s)
        kc = (P_STD / (R_GAS * T)) ** dnu * math.exp(-dG / (R_GAS * T))
        assert kf / kr == pytest.approx(kc, rel=1e-12)


def test_equilibrium_ratio_independent_of_theta():
    T = 1400.0
    for j in range(H2.n_reactions):
        base = np.divide(*rate_constants(H2, j, T, 1.0))
        for theta in (THETA_MIN, 0.37, 2.0, 13.7):
            ratio = np.divide(*rate_constants(H2, j, T, theta))
            # fl(theta*kf)/fl(theta*kr) may round differently by an ulp or two
            assert abs(ratio - base) <= 2 * np.spacing(base)


def test_theta_below_bound_rejected():
    with pytest.raises(ValueError):
        rate_constants(H2, 0, 1000.0, 0.0)
    with pytest.raises(ValueError):
        check_theta(np.full(H2.n_reactions, 1e-9), H2.n_reactions)
    with pytest.raises(ValueError):
        check_theta(np.ones(3), H2.n_reactions)


def test_no_reactants_no_production():
    mech = toy("2 A => B A=5e5 beta=0 Ea=0")
    assert np.all(production_rates_tc(mech, 1000.0, np.array([0.0, 4.0]), np.ones(1)) == 0.0)


def test_mass_action_by_inspection():
    mech = toy("2 A => B A=2 beta=0 Ea=0")
    w = production_rates_tc(mech, 1000.0, np.array([3.0, 1.0]), np.ones(1))
    assert w[1] == pytest.approx(18.0, rel=1e-15)
    assert w[0] == pytest.approx(-36.0, rel=1e-15)


def test_equilibrium_composition_has_zero_rates():
    # B is stabilised enough that K_c is of order 0.05 m^3/mol at 1000 K
    row = B_STABLE
    mech = toy("2 A <=> B A=3e3 beta=0 Ea=0", b_thermo=row)
    T, N = 1000.0, 10.0  # total X atoms, mol/m^3: C_A + 2 C_B = N
    K = float(equilibrium_constants(mech, T)[0])
    assert 1e-3 < K * N < 1e3
    CA = 2.0 * N / (1.0 + math.sqrt(1.0 + 8.0 * K * N))  # root of 2K C_A^2 + C_A - N, cancellation free
    CB = (N - CA) / 2.0
    w = production_rates_tc(mech, T, np.array([CA, CB]), np.ones(1))
    kf = rate_constants(mech, 0, T)[0]
    assert np.max(np.abs(w)) <= 1e-9 * kf * CA * CA


def test_negative_concentrations_are_clamped():
    mech = toy("2 A => B A=2 beta=0 Ea=0")
    assert np.all(production_rates_tc(mech, 1000.0, np.array([-1e-13, 1.0]), np.ones(1)) == 0.0)


def test_theta_homogeneity_irreversible():
    mech = toy("2 A => B A=7 beta=0.3 Ea=1e4")
    C = np.array([2.0, 1.0])
    w1 = production_rates_tc(mech, 1100.0, C, np.ones(1))
    assert np.allclose(production_rates_tc(mech, 1100.0, C, np.full(1, 3.5)), 3.5 * w1, rtol=1e-15)


states = st.tuples(st.floats(300.0, 3000.0),
                   st.lists(st.floats(0.0, 1.0), min_size=9, max_size=9).filter(lambda v: sum(v) > 1e-2),
                   st.floats(1e4, 1e6))


@settings(max_examples=80, deadline=None)
@given(states)
def test_mass_and_element_conservation(state):
    T, raw, P = state
    Y = np.array(raw) / sum(raw)
    q = progress_rates(H2, T, mixture_props(H2, T, P, Y).C, np.ones(H2.n_reactions))
    w = production_rates(H2, T, P, Y, np.ones(H2.n_reactions))
    scale = np.max(np.abs(q[:, None] * H2.nu_net * H2.molar_masses)) + 1e-300
    assert abs(np.sum(H2.molar_masses * w)) <= 1e-10 * scale
    for el in H2.elements:
        count = np.array([s.elements.get(el, 0) for s in H2.species])
        assert abs(count @ w) <= 1e-10 * np.max(np.abs(q)) * 4 + 1e-300


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), states)
def test_theta_scaling_all_irreversible(c, state):
    T, raw, P = state
    Y = np.array(raw) / sum(raw)
    text = open(H2_PATH).read().replace("<=>", "=>")
    mech = parse_mechanism(text)
    w1 = production_rates(mech, T, P, Y, np.ones(mech.n_reactions))
    wc = production_rates(mech, T, P, Y, np.full(mech.n_reactions, c))
    assert np.allclose(wc, c * w1, rtol=1e-12, atol=1e-300)


from diffchem.mechanism import builtin_path  # noqa: E402

H2_PATH = builtin_path("li_h2.mech")


def forcing(mech, sY=None, sT=0.0, T=1500.0, P=101325.0):
    return constant_profiles(1.0, T, P, mech.n_species, sdiff_Y=sY, sdiff_T=sT)


def test_equilibrium_state_diffchem_is_pure_forcing():
    row = B_STABLE
    mech = toy("2 A <=> B A=3e3 beta=0 Ea=0", b_thermo=row)
    T, P = 1000.0, 101325.0
    K = float(equilibrium_constants(mech, T)[0])
    # mass fractions at equilibrium for the density implied by (T, P)
    from scipy.optimize import brentq

    def resid(YA):
        props = mixture_props(mech, T, P, [YA, 1.0 - YA])
        CA, CB = props.C
        return CB - K * CA * CA

    YA = brentq(resid, 1e-9, 1.0 - 1e-9, xtol=1e-15)
    sY = np.array([0.4, -0.4])
    phi = np.array([T, YA, 1.0 - YA])
    rho = mixture_props(mech, T, P, phi[1:]).rho
    f = rhs(mech, 0.5, phi, np.ones(1), forcing(mech, sY, T=T, P=P), DIFFCHEM)
    assert np.allclose(f[1:], sY / rho, rtol=1e-8, atol=0)


def test_purechem_ignores_forcing():
    T, Y = h2_state(3)
    phi = np.concatenate([[T], Y])
    sY = np.linspace(-1, 1, H2.n_species)
    sY -= sY.mean()
    theta = np.ones(H2.n_reactions)
    a = rhs(H2, 0.3, phi, theta, forcing(H2, sY, 5e4), PURECHEM)
    b = rhs(H2, 0.3, phi, theta, forcing(H2), DIFFCHEM)
    assert np.array_equal(a, b)
    for thermal in ("forced", "coupled"):
        mode_p = RhsMode.parse("purechem", thermal)
        mode_d = RhsMode.parse("diffchem", thermal)
        assert np.array_equal(rhs(H2, 0.3, phi, theta, forcing(H2, sY, 5e4), mode_p),
                              rhs(H2, 0.3, phi, theta, forcing(H2), mode_d))


def test_hand_assembled_rhs_and_theta_column():
    mech = toy("A => B A=40 beta=0 Ea=0", b="B M=0.002 elements=X:1")
    T, P = 1000.0, 101325.0
    Y = np.array([0.7, 0.3])
    sY = np.array([0.25, -0.25])
    theta = np.array([1.7])
    phi = np.concatenate([[T], Y])
    rho = P * 0.002 / (R_GAS * T)
    CA = rho * Y[0] / 0.002
    expected_B = (sY[1] + 0.002 * 1.7 * 40.0 * CA) / rho
    expected_A = (sY[0] - 0.002 * 1.7 * 40.0 * CA) / rho
    f = rhs(mech, 0.0, phi, theta, forcing(mech, sY, T=T, P=P), DIFFCHEM)
    assert f[0] == 0.0
    assert f[1:] == pytest.approx([expected_A, expected_B], rel=1e-13)
    _, Jt = jacobians(mech, 0.0, phi, theta, forcing(mech, sY, T=T, P=P), DIFFCHEM)
    assert Jt[2, 0] == pytest.approx(0.002 * 40.0 * CA / rho, rel=1e-13)


def test_inactive_reaction_has_zero_theta_column():
    T = 1500.0
    Y = np.zeros(H2.n_species)
    Y[H2.species_index("H2")] = 0.1
    Y[H2.species_index("N2")] = 0.9
    phi = np.concatenate([[T], Y])
    _, Jt = jacobians(H2, 0.0, phi, np.ones(H2.n_reactions), forcing(H2), DIFFCHEM)
    # only H2 <=> H + H can proceed without radicals or oxygen
    active = [j for j in range(H2.n_reactions) if np.any(Jt[:, j] != 0)]
    assert active == [4]


def fd_jacobians(mech, phi, theta, prof, mode):
    n, nr = phi.size, theta.size
    J = np.zeros((n, n))
    Jt = np.zeros((n, nr))
    for k in range(n):
        h = max(1e-7, 1e-7 * abs(phi[k]))
        up, dn = phi.copy(), phi.copy()
        up[k] += h
        dn[k] -= h
        J[:, k] = (rhs(mech, 0.2, up, theta, prof, mode) - rhs(mech, 0.2, dn, theta, prof, mode)) / (2 * h)
    for j in range(nr):
        h = max(1e-7, 1e-7 * abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        Jt[:, j] = (rhs(mech, 0.2, phi, up, prof, mode) - rhs(mech, 0.2, phi, dn, prof, mode)) / (2 * h)
    return J, Jt


def fd_mismatch(A, B, floor):
    """Largest |A - B| / (1e-5 |B| + floor) over components of B above 1e-12."""
    mask = np.abs(B) > 1e-12
    if not mask.any():
        return 0.0
    floor = np.broadcast_to(floor, B.shape)
    return float(np.max(np.abs(A - B)[mask] / (1e-5 * np.abs(B[mask]) + floor[mask])))


def roundoff_floor(mech, phi, theta, prof, mode, Jt, h):
    # a central difference with step h cannot resolve changes below eps times the size of
    # the individual terms summed into each rhs row, divided by h
    f = rhs(mech, 0.2, phi, theta, prof, mode)
    terms = np.abs(Jt) @ np.abs(theta) + np.abs(f)
    return 8.0 * np.finfo(float).eps * terms[:, None] / np.asarray(h, dtype=float)[None, :]


@pytest.mark.parametrize("mode", [DIFFCHEM, RhsMode(True, True)], ids=["forced", "coupled"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_jacobians_match_finite_differences(mode, seed):
    T, Y = h2_state(seed, T=1300.0 + 300.0 * seed)
    theta = np.random.default_rng(seed).uniform(0.5, 2.0, H2.n_reactions)
    phi = np.concatenate([[T], Y])
    sY = np.linspace(-3.0, 3.0, H2.n_species)
    sY -= sY.mean()
    prof = forcing(H2, sY, 2e5, T=T)
    J, Jt = jacobians(H2, 0.2, phi, theta, prof, mode)
    Jfd, Jtfd = fd_jacobians(H2, phi, theta, prof, mode)
    assert fd_mismatch(J, Jfd, roundoff_floor(H2, phi, theta, prof, mode, Jt, np.maximum(1e-7, 1e-7 * phi))) <= 1.0
    assert fd_mismatch(Jt, Jtfd, roundoff_floor(H2, phi, theta, prof, mode, Jt, np.maximum(1e-7, 1e-7 * theta))) <= 1.0


def test_species_rows_sum_to_forcing():
    T, Y = h2_state(5)
    phi = np.concatenate([[T], Y])
    sY = np.array([1.0, -2.0, 0.5, 0.25, -0.75, 0.0, 0.5, 0.5, 0.0])
    f = rhs(H2, 0.1, phi, np.ones(H2.n_reactions), forcing(H2, sY, T=T), DIFFCHEM)
    rho = mixture_props(H2, T, 101325.0, Y).rho
    assert abs(f[1:].sum() - sY.sum() / rho) <= 1e-10 * np.max(np.abs(f[1:]))


def test_model_counters_and_state_check():
    prof = forcing(H2)
    model = DiffChemModel(H2, prof, np.ones(H2.n_reactions))
    T, Y = h2_state(1)
    phi = np.concatenate([[T], Y])
    model.rhs(0.0, phi)
    model.jac(0.0, phi)
    assert (model.n_rhs, model.n_jac) == (2, 1)
    assert model.check_state(0.0, phi)
    bad = phi.copy()
    bad[1] += 1e-4
    assert not model.check_state(0.0, bad)
