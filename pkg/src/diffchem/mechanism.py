"""Species, reactions, NASA-7 thermodynamics and ideal-gas mixture properties.

Everything is SI on a mole basis: concentrations in mol/m^3, activation
energies and molar enthalpies in J/mol, molar masses in kg/mol.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import NamedTuple

import numpy as np

R_GAS = 8.314462618  # J/(mol K)
P_STD = 101325.0  # Pa

# standard atomic masses, kg/mol
ATOMIC_MASS = {
    "H": 1.008e-3, "D": 2.014e-3, "He": 4.0026e-3, "C": 12.011e-3, "N": 14.007e-3,
    "O": 15.999e-3, "F": 18.998e-3, "Ne": 20.180e-3, "S": 32.06e-3, "Cl": 35.45e-3,
    "Ar": 39.948e-3, "Kr": 83.798e-3, "Xe": 131.29e-3,
}

MASS_TOL = 1e-3
CP_CONTINUITY_TOL = 1e-2


class MechanismError(ValueError):
    """Raised for malformed or inconsistent mechanism input."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column or 1}: {message}"
        super().__init__(message)


class ThermoRangeError(ValueError):
    """Temperature outside the fitted range of a NASA-7 polynomial."""


@dataclass(frozen=True)
class NasaPoly:
    t_low: float
    t_mid: float
    t_high: float
    low: tuple
    high: tuple


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    molar_mass: float
    elements: dict
    thermo: NasaPoly
    d_ref: float = 2.0e-5


@dataclass(frozen=True)
class Reaction:
    reactants: dict
    products: dict
    A: float
    beta: float
    Ea: float
    reversible: bool = True
    # None: no third body; a dict (possibly empty) lists non-unit efficiencies
    third_body: dict | None = None

    def equation(self) -> str:
        def side(d):
            return " + ".join(name if n == 1 else f"{n} {name}" for name, n in d.items())

        arrow = "<=>" if self.reversible else "=>"
        return f"{side(self.reactants)} {arrow} {side(self.products)}"


@dataclass(frozen=True)
class Mechanism:
    species: tuple
    reactions: tuple
    elements: tuple = ()
    element_masses: dict = field(default_factory=dict)

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    @cached_property
    def species_names(self) -> tuple:
        return tuple(s.name for s in self.species)

    @cached_property
    def _index(self) -> dict:
        return {name: i for i, name in enumerate(self.species_names)}

    def species_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown species {name!r}") from None

    @cached_property
    def molar_masses(self) -> np.ndarray:
        return np.array([s.molar_mass for s in self.species])

    @cached_property
    def d_ref(self) -> np.ndarray:
        return np.array([s.d_ref for s in self.species])

    def _stoich(self, attr):
        nu = np.zeros((self.n_reactions, self.n_species))
        for j, r in enumerate(self.reactions):
            for name, n in getattr(r, attr).items():
                nu[j, self.species_index(name)] += n
        return nu

    @cached_property
    def nu_forward(self) -> np.ndarray:
        return self._stoich("reactants")

    @cached_property
    def nu_reverse(self) -> np.ndarray:
        return self._stoich("products")

    @cached_property
    def nu_net(self) -> np.ndarray:
        return self.nu_reverse - self.nu_forward

    @cached_property
    def gather_index(self):
        """Species indices repeated by stoichiometric coefficient, one row per reaction,
        padded with ``n_species``; (forward, reverse), or None for non-integer coefficients."""
        out = []
        for nu in (self.nu_forward, self.nu_reverse):
            if np.any(nu != np.round(nu)):
                return None
            rows = [np.repeat(np.arange(self.n_species), row.astype(int)) for row in nu]
            width = max(1, max(len(r) for r in rows))
            idx = np.full((self.n_reactions, width), self.n_species, dtype=np.intp)
            for j, r in enumerate(rows):
                idx[j, :len(r)] = r
            out.append(idx)
        return tuple(out)

    @cached_property
    def arrhenius(self) -> tuple:
        A = np.array([r.A for r in self.reactions], dtype=float)
        beta = np.array([r.beta for r in self.reactions], dtype=float)
        Ea = np.array([r.Ea for r in self.reactions], dtype=float)
        return A, beta, Ea

    @cached_property
    def reversible(self) -> np.ndarray:
        return np.array([r.reversible for r in self.reactions], dtype=bool)

    @cached_property
    def third_body(self) -> tuple:
        """(mask of reactions with a third body, efficiency matrix n_reactions x n_species)."""
        mask = np.array([r.third_body is not None for r in self.reactions], dtype=bool)
        eff = np.zeros((self.n_reactions, self.n_species))
        for j, r in enumerate(self.reactions):
            if r.third_body is None:
                continue
            eff[j, :] = 1.0
            for name, e in r.third_body.items():
                eff[j, self.species_index(name)] = e
        return mask, eff

    @cached_property
    def thermo_table(self) -> dict:
        return {
            "t_low": np.array([s.thermo.t_low for s in self.species]),
            "t_mid": np.array([s.thermo.t_mid for s in self.species]),
            "t_high": np.array([s.thermo.t_high for s in self.species]),
            "low": np.array([s.thermo.low for s in self.species], dtype=float),
            "high": np.array([s.thermo.high for s in self.species], dtype=float),
        }

    @cached_property
    def t_range(self) -> tuple:
        tt = self.thermo_table
        return float(tt["t_low"].max()), float(tt["t_high"].min())


# ----------------------------------------------------------------------------
# thermodynamics
# ----------------------------------------------------------------------------

def _nasa_terms(a, T):
    """cp/R, h/RT, s/R and d(cp/R)/dT for coefficient rows ``a`` (..., 7)."""
    a1, a2, a3, a4, a5, a6, a7 = (a[..., k] for k in range(7))
    lnT = np.log(T)
    cp = a1 + T * (a2 + T * (a3 + T * (a4 + T * a5)))
    h = a1 + T * (a2 / 2 + T * (a3 / 3 + T * (a4 / 4 + T * a5 / 5))) + a6 / T
    s = a1 * lnT + T * (a2 + T * (a3 / 2 + T * (a4 / 3 + T * a5 / 4))) + a7
    dcp = a2 + T * (2 * a3 + T * (3 * a4 + T * 4 * a5))
    return cp, h, s, dcp


def thermo_eval(species: SpeciesSpec, T: float):
    """Return (cp [J/(mol K)], h [J/mol], s [J/(mol K)]) of one species at T."""
    th = species.thermo
    if not th.t_low <= T <= th.t_high:
        raise ThermoRangeError(
            f"T={T} K outside [{th.t_low}, {th.t_high}] for species {species.name}")
    a = np.asarray(th.low if T < th.t_mid else th.high, dtype=float)
    cp, h, s, _ = _nasa_terms(a, float(T))
    return float(cp * R_GAS), float(h * R_GAS * T), float(s * R_GAS)


def species_thermo(mech: Mechanism, T, derivative: bool = False):
    """Vectorised molar cp, h, s for every species.

    ``T`` may be a scalar or an array; results carry a trailing species axis.
    With ``derivative=True`` also returns d(cp)/dT.
    """
    tt = mech.thermo_table
    T = np.asarray(T, dtype=float)
    lo, hi = mech.t_range
    if np.any(T < lo) or np.any(T > hi) or not np.all(np.isfinite(T)):
        bad = T[(T < lo) | (T > hi) | ~np.isfinite(T)]
        raise ThermoRangeError(f"T={bad.ravel()[0]} K outside thermo range [{lo}, {hi}]")
    Tb = T[..., None]
    use_low = Tb < tt["t_mid"]
    a = np.where(use_low[..., None], tt["low"], tt["high"])
    cp, h, s, dcp = _nasa_terms(a, Tb)
    out = (cp * R_GAS, h * R_GAS * Tb, s * R_GAS)
    if derivative:
        out = out + (dcp * R_GAS,)
    return out


class MixtureProps(NamedTuple):
    rho: float
    cp_mass: float
    mean_molar_mass: float
    X: np.ndarray
    C: np.ndarray


def check_composition(Y, tol=1e-6):
    Y = np.asarray(Y, dtype=float)
    if np.any(Y < 0):
        raise ValueError("mass fractions must be non-negative")
    if abs(Y.sum() - 1.0) > tol:
        raise ValueError(f"mass fractions sum to {Y.sum()!r}, expected 1")
    return Y


def mixture_props(mech: Mechanism, T: float, P: float, Y) -> MixtureProps:
    """Ideal-gas density, mass cp, mean molar mass, mole fractions, concentrations."""
    if not T > 0 or not P > 0:
        raise ValueError("T and P must be positive")
    Y = check_composition(Y)
    M = mech.molar_masses
    mbar = 1.0 / np.sum(Y / M)
    rho = P * mbar / (R_GAS * T)
    X = Y * mbar / M
    C = rho * Y / M
    cp, _, _ = species_thermo(mech, T)
    return MixtureProps(rho, float(np.sum(Y * cp / M)), mbar, X, C)


def mole_fractions(mech: Mechanism, Y):
    """Mole fractions for one or many compositions (trailing species axis)."""
    Y = np.asarray(Y, dtype=float)
    M = mech.molar_masses
    ym = Y / M
    return ym / ym.sum(axis=-1, keepdims=True)


def mass_fractions(mech: Mechanism, X):
    X = np.asarray(X, dtype=float)
    xm = X * mech.molar_masses
    return xm / xm.sum(axis=-1, keepdims=True)


def density(mech: Mechanism, T, P, Y):
    Y = np.asarray(Y, dtype=float)
    mbar = 1.0 / np.sum(Y / mech.molar_masses, axis=-1)
    return P * mbar / (R_GAS * np.asarray(T, dtype=float))


# ----------------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------------

def _element_mass(mech, el):
    if el in mech.element_masses:
        return mech.element_masses[el]
    return ATOMIC_MASS.get(el)


def validate_mechanism(mech: Mechanism) -> list:
    """List every invariant violation; an empty list means the mechanism is valid."""
    report = []
    names = [s.name for s in mech.species]
    if not names:
        report.append("mechanism has no species")
    if not mech.reactions:
        report.append("mechanism has no reactions")
    seen = set()
    for name in names:
        if name in seen:
            report.append(f"duplicate species name {name!r}")
        seen.add(name)
    known = set(names)
    comp = {s.name: s.elements for s in mech.species}

    for s in mech.species:
        if not s.molar_mass > 0:
            report.append(f"species {s.name}: non-positive molar mass {s.molar_mass}")
        else:
            masses = [_element_mass(mech, el) for el in s.elements]
            if any(m is None for m in masses):
                unknown = [el for el, m in zip(s.elements, masses) if m is None]
                report.append(f"species {s.name}: unknown element(s) {unknown}")
            else:
                m_el = sum(m * n for m, n in zip(masses, s.elements.values()))
                if abs(m_el - s.molar_mass) > MASS_TOL * s.molar_mass:
                    report.append(
                        f"species {s.name}: molar mass {s.molar_mass} differs from "
                        f"element sum {m_el:.6g}")
        if not s.d_ref > 0:
            report.append(f"species {s.name}: non-positive reference diffusivity")
        th = s.thermo
        if not th.t_low < th.t_mid < th.t_high:
            report.append(f"species {s.name}: invalid thermo ranges "
                          f"{th.t_low}/{th.t_mid}/{th.t_high}")
        elif len(th.low) != 7 or len(th.high) != 7:
            report.append(f"species {s.name}: NASA-7 sets need 7 coefficients")
        else:
            cp_lo = _nasa_terms(np.asarray(th.low, float), th.t_mid)[0]
            cp_hi = _nasa_terms(np.asarray(th.high, float), th.t_mid)[0]
            if abs(cp_lo - cp_hi) > CP_CONTINUITY_TOL * max(abs(cp_lo), abs(cp_hi)):
                report.append(f"species {s.name}: cp discontinuous at Tmid "
                              f"({cp_lo:.6g} vs {cp_hi:.6g} R)")

    for j, r in enumerate(mech.reactions):
        tag = f"reaction {j + 1} ({r.equation()})"
        refs = list(r.reactants) + list(r.products) + list(r.third_body or {})
        missing = sorted({n for n in refs if n not in known})
        if missing:
            report.append(f"{tag}: unknown species {missing}")
            continue
        if not r.A > 0:
            report.append(f"{tag}: non-positive pre-exponential factor {r.A}")
        order = sum(r.reactants.values())
        if order not in (1, 2, 3):
            report.append(f"{tag}: forward molecularity {order} not in 1..3")
        if any(n < 0 or int(n) != n for n in list(r.reactants.values()) + list(r.products.values())):
            report.append(f"{tag}: stoichiometric coefficients must be non-negative integers")
        balance = {}
        for name, n in r.reactants.items():
            for el, c in comp[name].items():
                balance[el] = balance.get(el, 0) + n * c
        for name, n in r.products.items():
            for el, c in comp[name].items():
                balance[el] = balance.get(el, 0) - n * c
        off = {el: v for el, v in balance.items() if v != 0}
        if off:
            report.append(f"{tag}: element imbalance {off}")
    return report


# ----------------------------------------------------------------------------
# text format
# ----------------------------------------------------------------------------

_NUM = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_NUM_RE = re.compile(rf"^{_NUM}$")
_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_()\-*,']*$")


def _num(tok, line, col, what):
    if not _NUM_RE.match(tok):
        raise MechanismError(f"expected a number for {what}, got {tok!r}", line, col)
    return float(tok)


def _keyvals(tokens, line, cols):
    out = {}
    for tok, col in zip(tokens, cols):
        if "=" not in tok:
            raise MechanismError(f"expected key=value, got {tok!r}", line, col)
        k, v = tok.split("=", 1)
        out[k] = (v, col + len(k) + 1)
    return out


def _tokenize(text):
    return [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", text)]


def _parse_side(text, line, col0):
    side = {}
    for term in text.split("+"):
        term_s = term.strip()
        col = col0 + text.find(term_s) if term_s else col0
        if not term_s:
            raise MechanismError("empty stoichiometric term", line, col)
        parts = term_s.split()
        if len(parts) == 1:
            m = re.match(r"^(\d+)([A-Za-z].*)$", parts[0])
            n, name = (int(m.group(1)), m.group(2)) if m else (1, parts[0])
        elif len(parts) == 2 and parts[0].isdigit():
            n, name = int(parts[0]), parts[1]
        else:
            raise MechanismError(f"cannot parse stoichiometric term {term_s!r}", line, col)
        if not _NAME_RE.match(name):
            raise MechanismError(f"invalid species name {name!r}", line, col)
        side[name] = side.get(name, 0) + n
    return side


def _parse_coeffs(val, line, col, what):
    if not (val.startswith("[") and val.endswith("]")):
        raise MechanismError(f"{what} must be a bracketed list", line, col)
    items = [v for v in val[1:-1].split(",")]
    return tuple(_num(v.strip(), line, col, what) for v in items)


def parse_mechanism(text: str, strict: bool = True) -> Mechanism:
    """Parse the line-oriented mechanism format.

    With ``strict`` (default) every invariant is enforced and violations raise
    :class:`MechanismError`; otherwise the structurally parsed mechanism is
    returned for :func:`validate_mechanism` to inspect.
    """
    elements, element_masses = [], {}
    species, thermo, reactions = [], {}, []
    species_lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        toks = _tokenize(body)
        kw, kcol = toks[0]
        if kw == "elements:":
            for tok, col in toks[1:]:
                if "=" in tok:
                    el, m = tok.split("=", 1)
                    element_masses[el] = _num(m, lineno, col, f"mass of element {el}")
                else:
                    el = tok
                if not re.match(r"^[A-Z][A-Za-z0-9]*$", el):
                    raise MechanismError(f"invalid element symbol {el!r}", lineno, col)
                elements.append(el)
        elif kw == "species":
            if len(toks) < 2:
                raise MechanismError("species line needs a name", lineno, kcol)
            name, ncol = toks[1]
            if not _NAME_RE.match(name):
                raise MechanismError(f"invalid species name {name!r}", lineno, ncol)
            kv = _keyvals([t for t, _ in toks[2:]], lineno, [c for _, c in toks[2:]])
            for key in ("M", "elements"):
                if key not in kv:
                    raise MechanismError(f"species {name}: missing {key}=", lineno, ncol)
            unknown = set(kv) - {"M", "elements", "Dref"}
            if unknown:
                k = sorted(unknown)[0]
                raise MechanismError(f"unknown species field {k!r}", lineno, kv[k][1])
            M = _num(kv["M"][0], lineno, kv["M"][1], "M")
            comp = {}
            ev, ecol = kv["elements"]
            for item in ev.split(","):
                if ":" not in item:
                    raise MechanismError(f"bad element count {item!r}", lineno, ecol)
                el, n = item.split(":", 1)
                if not n.isdigit():
                    raise MechanismError(f"element count must be an integer: {item!r}",
                                         lineno, ecol)
                comp[el] = comp.get(el, 0) + int(n)
            dref = _num(kv["Dref"][0], lineno, kv["Dref"][1], "Dref") if "Dref" in kv else 2.0e-5
            species_lines[len(species)] = lineno
            species.append([name, M, comp, dref])
        elif kw == "thermo":
            if len(toks) < 2:
                raise MechanismError("thermo line needs a species name", lineno, kcol)
            name = toks[1][0]
            kv = _keyvals([t for t, _ in toks[2:]], lineno, [c for _, c in toks[2:]])
            for key in ("Tlow", "Tmid", "Thigh", "low", "high"):
                if key not in kv:
                    raise MechanismError(f"thermo {name}: missing {key}=", lineno, toks[1][1])
            low = _parse_coeffs(kv["low"][0], lineno, kv["low"][1], "low coefficients")
            high = _parse_coeffs(kv["high"][0], lineno, kv["high"][1], "high coefficients")
            for arr, key in ((low, "low"), (high, "high")):
                if len(arr) != 7:
                    raise MechanismError(f"{key} needs 7 coefficients, got {len(arr)}",
                                         lineno, kv[key][1])
            thermo[name] = NasaPoly(_num(kv["Tlow"][0], lineno, kv["Tlow"][1], "Tlow"), _num(kv["Tmid"][0], lineno, kv["Tmid"][1], "Tmid"),
                                    _num(kv["Thigh"][0], lineno, kv["Thigh"][1], "Thigh"), low, high)
        elif kw == "reaction":
            rest = body[kcol - 1 + len(kw):]
            base = kcol + len(kw)
            arrow = "<=>" if "<=>" in rest else ("=>" if "=>" in rest else None)
            if arrow is None:
                raise MechanismError("reaction needs '<=>' or '=>'", lineno, base)
            lhs, rhs_all = rest.split(arrow, 1)
            m = re.search(r"\s(A=|beta=|Ea=|M\b|third_body=)", rhs_all)
            if not m:
                raise MechanismError("reaction is missing A=, beta=, Ea=", lineno, base)
            rhs, params = rhs_all[:m.start()], rhs_all[m.start():]
            pcol = base + len(lhs) + len(arrow) + m.start() + 1
            reactants = _parse_side(lhs, lineno, base)
            products = _parse_side(rhs, lineno, base + len(lhs) + len(arrow))
            ptoks = _tokenize(params)
            has_m = any(t == "M" for t, _ in ptoks)
            kvtoks = [(t, c) for t, c in ptoks if t != "M"]
            kv = _keyvals([t for t, _ in kvtoks], lineno, [pcol + c - 1 for _, c in kvtoks])
            for key in ("A", "beta", "Ea"):
                if key not in kv:
                    raise MechanismError(f"reaction missing {key}=", lineno, pcol)
            unknown = set(kv) - {"A", "beta", "Ea", "third_body"}
            if unknown:
                k = sorted(unknown)[0]
                raise MechanismError(f"unknown reaction field {k!r}", lineno, kv[k][1])
            tb = None
            if has_m or "third_body" in kv:
                tb = {}
                if "third_body" in kv:
                    tv, tcol = kv["third_body"]
                    for item in tv.split(","):
                        if ":" not in item:
                            raise MechanismError(f"bad efficiency {item!r}", lineno, tcol)
                        sp, e = item.split(":", 1)
                        tb[sp] = _num(e, lineno, tcol, f"efficiency of {sp}")
            reactions.append(Reaction(reactants, products, _num(kv["A"][0], lineno, kv["A"][1], "A"),
                                      _num(kv["beta"][0], lineno, kv["beta"][1], "beta"), _num(kv["Ea"][0], lineno, kv["Ea"][1], "Ea"),
                                      arrow == "<=>", tb))
        else:
            raise MechanismError(f"unknown directive {kw!r}", lineno, kcol)

    specs = []
    for k, (name, M, comp, dref) in enumerate(species):
        if name not in thermo:
            raise MechanismError(f"species {name} has no thermo line", species_lines[k], 1)
        specs.append(SpeciesSpec(name, M, comp, thermo[name], dref))
    orphan = sorted(set(thermo) - {s.name for s in specs})
    if orphan:
        raise MechanismError(f"thermo given for undeclared species {orphan}")
    mech = Mechanism(tuple(specs), tuple(reactions), tuple(elements), element_masses)
    if strict:
        undeclared = sorted({el for s in specs for el in s.elements} - set(elements))
        problems = validate_mechanism(mech)
        if elements and undeclared:
            problems.insert(0, f"elements not declared: {undeclared}")
        if problems:
            raise MechanismError("; ".join(problems))
    return mech


def serialize_mechanism(mech: Mechanism) -> str:
    """Write ``mech`` in the text format at full float precision."""
    def coeffs(a):
        return "[" + ",".join(repr(float(v)) for v in a) + "]"

    els = []
    for el in mech.elements:
        els.append(f"{el}={mech.element_masses[el]!r}" if el in mech.element_masses else el)
    out = ["elements: " + " ".join(els)] if els else []
    for s in mech.species:
        comp = ",".join(f"{el}:{n}" for el, n in s.elements.items())
        out.append(f"species {s.name} M={float(s.molar_mass)!r} elements={comp} "
                   f"Dref={float(s.d_ref)!r}")
    for s in mech.species:
        th = s.thermo
        out.append(f"thermo {s.name} Tlow={float(th.t_low)!r} Tmid={float(th.t_mid)!r} "
                   f"Thigh={float(th.t_high)!r} low={coeffs(th.low)} high={coeffs(th.high)}")
    for r in mech.reactions:
        line = (f"reaction {r.equation()} A={float(r.A)!r} beta={float(r.beta)!r} "
                f"Ea={float(r.Ea)!r}")
        if r.third_body is not None:
            line += " M"
            if r.third_body:
                line += " third_body=" + ",".join(
                    f"{k}:{float(v)!r}" for k, v in r.third_body.items())
        out.append(line)
    return "\n".join(out) + "\n"


def load_mechanism(path) -> Mechanism:
    with open(path, encoding="utf-8") as fh:
        return parse_mechanism(fh.read())


def builtin_mechanism(name: str = "li_h2") -> Mechanism:
    """Load a mechanism shipped with the package (``li_h2``)."""
    text = resources.files("diffchem.data").joinpath(f"{name}.mech").read_text("utf-8")
    return parse_mechanism(text)


def builtin_path(name: str) -> str:
    return str(resources.files("diffchem.data").joinpath(name))


def temperature_ok(mech: Mechanism, T) -> bool:
    lo, hi = mech.t_range
    return bool(np.all((np.asarray(T) >= lo) & (np.asarray(T) <= hi)))


__all__ = [
    "R_GAS", "P_STD", "Mechanism", "SpeciesSpec", "Reaction", "NasaPoly", "MechanismError",
    "ThermoRangeError", "MixtureProps", "parse_mechanism", "serialize_mechanism",
    "validate_mechanism", "thermo_eval", "species_thermo", "mixture_props", "mole_fractions",
    "mass_fractions", "density", "load_mechanism", "builtin_mechanism",
]
