"""Small synthetic mechanisms shared by the test modules."""
import numpy as np

from diffchem.mechanism import parse_mechanism
from diffchem.profiles import constant_profiles

X_MASS = 0.002  # kg/mol of the single toy element


def nasa(a1, h0, s0):
    """Constant-cp coefficient row with h(298) = h0 [J/mol] and s(298) = s0 [J/(mol K)]."""
    R = 8.314462618
    a6 = float(h0 / R - a1 * 298.15)
    a7 = float(s0 / R - a1 * np.log(298.15))
    return [a1, 0.0, 0.0, 0.0, 0.0, a6, a7]


def species_block(n, rng=None, tlow=200.0, tmid=1000.0, thigh=3500.0):
    """Species S1..Sn built from n copies of element X, with random constant-cp thermo."""
    rng = rng or np.random.default_rng(0)
    lines = [f"elements: X={X_MASS!r}"]
    thermo = []
    for k in range(1, n + 1):
        lines.append(f"species S{k} M={X_MASS * k!r} elements=X:{k} Dref={1e-5 * (1 + k)!r}")
        # near-additive cp, h and s keep the equilibrium constants of the toy network moderate
        row = nasa(float(2.5 * k + rng.uniform(-0.3, 0.3)),
                   float(1e3 * k + rng.uniform(-5e3, 5e3)), float(30.0 * k + rng.uniform(-10.0, 10.0)))
        coeffs = "[" + ",".join(repr(v) for v in row) + "]"
        thermo.append(f"thermo S{k} Tlow={tlow} Tmid={tmid} Thigh={thigh} low={coeffs} high={coeffs}")
    return lines + thermo


def random_toy(seed, n_species=None, n_reactions=None):
    """Random association/dissociation network S_i + S_j <=> S_{i+j}, mixed reversibility."""
    rng = np.random.default_rng(seed)
    ns = n_species or int(rng.integers(3, 6))
    pairs = [(i, j) for i in range(1, ns + 1) for j in range(i, ns + 1) if i + j <= ns]
    nr = min(n_reactions or int(rng.integers(3, 7)), len(pairs))
    lines = species_block(ns, rng)
    order = rng.permutation(len(pairs))[:nr]
    for n, p in enumerate(order):
        i, j = pairs[int(p)]
        forward = bool(rng.integers(2))
        lhs = f"2 S{i}" if i == j else f"S{i} + S{j}"
        rhs = f"S{i + j}"
        if not forward:
            lhs, rhs = rhs, lhs
        arrow = "<=>" if n % 2 == 0 else "=>"
        # unimolecular dissociation needs a larger prefactor to act on the same time scale
        A = float(rng.uniform(2.0, 20.0) if forward else rng.uniform(20.0, 200.0))
        lines.append(f"reaction {lhs} {arrow} {rhs} A={A!r} beta={float(rng.uniform(-0.5, 0.5))!r} "
                     f"Ea={float(rng.uniform(0.0, 2e4))!r}")
    return parse_mechanism("\n".join(lines))


def toy_profiles(mech, tau_end=2e-3, T=1000.0, P=101325.0, seed=0, scale=0.3):
    """Constant forcing with a nonzero, sum-free synthetic diffusion source."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1.0, 1.0, mech.n_species)
    s -= s.mean()
    return constant_profiles(tau_end, T, P, mech.n_species, sdiff_Y=scale * s, n_nodes=5,
                             species=mech.species_names)


def toy_initial(mech):
    """Mass fractions spread over all species, T ignored in forced mode."""
    Y = np.linspace(2.0, 1.0, mech.n_species)
    return np.concatenate([[1000.0], Y / Y.sum()])
