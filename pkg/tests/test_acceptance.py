"""End-to-end acceptance criteria 1-7.

Each test records one PASS/FAIL line before asserting; the lines are printed in
the "acceptance criteria" section of the terminal summary.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from diffchem.flame1d import export_profiles
from diffchem.kinetics import DIFFCHEM, PURECHEM, DiffChemModel
from diffchem.objective import LogMSE, observations_from_states
from diffchem.odeint import calibration_config, default_config
from diffchem.optimizer import init_theta, optimize, perturb_observations
from diffchem.sensitivity import model_gradient, observed_states, solve_primal

from conftest import ACCEPTANCE
from toys import random_toy, toy_initial, toy_profiles

pytestmark = pytest.mark.acceptance

TOY_SEEDS = range(5)
CALIBRATION_SEEDS = (0, 1, 2)
NOISE_LEVELS = (0.01, 0.05, 0.10, 0.20)
IC_LEVELS = (0.05, 0.10, 0.20)
IC_SAMPLES = 200
MAJOR_X = 1e-3


def report(n, name, ok, detail):
    ACCEPTANCE[n] = f"[{n}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"


@pytest.fixture(scope="module")
def case(h2_solution):
    sol = h2_solution
    prof, obs = export_profiles(sol)
    return {"sol": sol, "mech": sol.mech, "prof": prof, "obs": obs,
            "phi0": np.r_[sol.T[0], sol.Y[0]]}


def mole_fractions(mech, Y):
    X = np.asarray(Y) / mech.molar_masses
    return X / X.sum(axis=-1, keepdims=True)


def major_deviation(mech, states, obs):
    """Max relative mole-fraction error per primal species where the reference X > 1e-3."""
    X = mole_fractions(mech, states[:, 1:])
    out = {}
    for i in obs.primal:
        mask = obs.X[:, i] > MAJOR_X
        out[mech.species_names[i]] = float(np.max(np.abs(X[mask, i] - obs.X[mask, i]) / obs.X[mask, i]))
    return out


def test_1_gradient_engines_agree_on_random_toys():
    start = time.perf_counter()
    worst = {"fa": 0.0, "fd": 0.0}
    shapes = []
    for seed in TOY_SEEDS:
        mech = random_toy(seed)
        prof = toy_profiles(mech, seed=seed)
        assert mech.n_species <= 5 and mech.n_reactions <= 6
        assert mech.reversible.any() and not mech.reversible.all()
        assert np.any(prof.sdiff_Y != 0.0)
        phi0 = toy_initial(mech)
        cfg = default_config(mech.n_species, rtol=1e-8, tol_factor=1.0,
                             atol=np.r_[1e-6, np.full(mech.n_species, 1e-13)])
        taus = np.linspace(2e-4, 2e-3, 6)
        states, _ = observed_states(DiffChemModel(mech, prof, np.ones(mech.n_reactions)), phi0, taus, cfg)
        obs = perturb_observations(observations_from_states(mech, taus, states, mech.species_names[:2]),
                                   0.2, seed)
        theta = np.random.default_rng(seed).uniform(0.5, 2.0, mech.n_reactions)
        obj = LogMSE(mech, obs)
        g = {m: model_gradient(DiffChemModel(mech, prof, theta), phi0, obj, cfg, m).grad
             for m in ("forward", "adjoint", "fd")}
        scale = np.max(np.abs(g["forward"]))
        worst["fa"] = max(worst["fa"], np.max(np.abs(g["forward"] - g["adjoint"])) / scale)
        worst["fd"] = max(worst["fd"], np.max(np.abs(g["fd"] - g["forward"])) / scale,
                          np.max(np.abs(g["fd"] - g["adjoint"])) / scale)
        shapes.append(f"{mech.n_species}x{mech.n_reactions}")
    elapsed = time.perf_counter() - start
    ok = worst["fa"] <= 1e-5 and worst["fd"] <= 1e-3 and elapsed < 10.0
    report(1, "gradient correctness", ok,
           f"{len(shapes)} toys ({' '.join(shapes)}), forward/adjoint {worst['fa']:.1e}, "
           f"vs fd {worst['fd']:.1e}, {elapsed:.1f} s")
    assert ok


def calibrate(case, seed, obs):
    start = time.perf_counter()
    best, trace = optimize(case["mech"], init_theta(case["mech"].n_reactions, seed=seed),
                           case["phi0"], case["prof"], obs)
    return best, trace, time.perf_counter() - start


@pytest.mark.slow
def test_2_twin_experiment_calibration(case):
    rows, ok = [], True
    for seed in CALIBRATION_SEEDS:
        _, trace, elapsed = calibrate(case, seed, case["obs"])
        b = trace.best_index
        ratio = trace.loss_primal[b] / trace.loss_primal[0]
        sec_down = trace.loss_secondary[b] < trace.loss_secondary[0]
        seed_ok = ratio <= 0.02 and sec_down and elapsed < 600.0
        ok &= seed_ok
        rows.append(f"seed {seed} ratio {ratio:.4f} secondary {trace.loss_secondary[0]:.3g}->"
                    f"{trace.loss_secondary[b]:.3g} {len(trace) - 1} it {elapsed:.0f} s")
    report(2, "twin-experiment calibration", ok, "; ".join(rows))
    assert ok


def test_3_diffchem_beats_purechem_on_flame(case):
    mech, prof, obs = case["mech"], case["prof"], case["obs"]
    cfg = default_config(mech.n_species)
    dev = {}
    for mode in (DIFFCHEM, PURECHEM):
        model = DiffChemModel(mech, prof, np.ones(mech.n_reactions), mode)
        states, _ = observed_states(model, case["phi0"], obs.tau, cfg)
        dev[mode.name] = major_deviation(mech, states, obs)
    diff, pure = dev[DIFFCHEM.name], dev[PURECHEM.name]
    ratios = {s: pure[s] / diff[s] for s in diff}
    ok = max(diff.values()) <= 0.01 and max(ratios.values()) >= 5.0
    report(3, "Diff-Chem vs Pure-Chem accuracy", ok,
           "Diff-Chem max err " + ", ".join(f"{s} {v:.2e}" for s, v in diff.items())
           + "; Pure-Chem/Diff-Chem " + ", ".join(f"{s} {v:.0f}x" for s, v in ratios.items()))
    assert ok


@pytest.mark.slow
def test_4_noise_robustness(case):
    mech, obs = case["mech"], case["obs"]
    seed = 0
    rows, converged, bound = [], True, None
    for sigma in NOISE_LEVELS:
        noisy = perturb_observations(obs, sigma, seed=100 + seed)
        best, trace, elapsed = calibrate(case, seed, noisy)
        final = trace.loss_primal[trace.best_index]
        run_ok = np.isfinite(final) and final < trace.loss_primal[0]
        converged &= bool(run_ok)
        row = f"sigma {sigma:.2f} loss {trace.loss_primal[0]:.3g}->{final:.3g}"
        if sigma == 0.10:
            states, _ = observed_states(DiffChemModel(mech, case["prof"], best), case["phi0"],
                                        obs.tau, default_config(mech.n_species))
            dev = major_deviation(mech, states, obs)
            bound = max(dev.values())
            row += " dev vs clean " + ", ".join(f"{s} {v:.2%}" for s, v in dev.items())
        rows.append(row)
    # 2% is the target; 5% is the documented fallback gate for the simplified transport
    ok = converged and bound <= 0.05
    target = "meets 2%" if bound <= 0.02 else "misses 2%"
    report(4, "noise robustness", ok, f"achieved bound {bound:.2%} ({target}, gate 5%); " + "; ".join(rows))
    assert ok


def test_5_gradient_cost_scaling(case):
    mech, prof, obs, phi0 = case["mech"], case["prof"], case["obs"], case["phi0"]
    cfg = calibration_config(mech.n_species)
    theta = init_theta(mech.n_reactions, seed=0)
    model = DiffChemModel(mech, prof, theta)
    solve_primal(model, phi0, float(obs.tau.max()), cfg, np.unique(obs.tau))
    single = model.n_rhs
    obj = LogMSE(mech, obs)
    res = {m: model_gradient(DiffChemModel(mech, prof, theta), phi0, obj, cfg, m)
           for m in ("forward", "adjoint", "fd")}
    fd_ratio = res["fd"].rhs_evals / single
    adj_ratio = res["adjoint"].rhs_evals / single
    n_r = mech.n_reactions
    ok = (abs(fd_ratio - (n_r + 1)) <= 0.05 * (n_r + 1) and res["fd"].integrations == n_r + 1
          and adj_ratio <= 4.0 and res["adjoint"].rhs_evals < res["fd"].rhs_evals
          and res["forward"].integrations == 1)
    report(5, "gradient cost scaling", ok,
           f"single solve {single} RHS; fd {fd_ratio:.2f}x (N_R+1 = {n_r + 1}); adjoint {adj_ratio:.2f}x; "
           f"forward {res['forward'].integrations} integration, "
           f"{res['forward'].rhs_evals / single:.2f}x RHS of size {mech.n_species + 1}x{n_r + 1}")
    assert ok


@pytest.mark.slow
def test_6_initial_condition_robustness(case):
    sol, mech, prof = case["sol"], case["mech"], case["prof"]
    cfg = calibration_config(mech.n_species)
    theta = np.ones(mech.n_reactions)
    Y0, Yref, tau_end = sol.Y[0], sol.Y[-1], float(prof.tau[-1])
    rows, ok = [], True
    for level, sigma in enumerate(IC_LEVELS):
        rng = np.random.default_rng(600 + level)
        err = {DIFFCHEM.name: [], PURECHEM.name: []}
        for _ in range(IC_SAMPLES):
            Y = np.maximum(Y0 * (1.0 + sigma * rng.standard_normal(Y0.size)), 0.0)
            Y /= Y.sum()
            for mode in (DIFFCHEM, PURECHEM):
                traj = solve_primal(DiffChemModel(mech, prof, theta, mode), np.r_[sol.T[0], Y], tau_end, cfg)
                err[mode.name].append(np.mean(np.abs(traj.y[-1, 1:] - Yref)))
        d, p = np.mean(err[DIFFCHEM.name]), np.mean(err[PURECHEM.name])
        ok &= bool(d < p)
        rows.append(f"sigma {sigma:.2f} Diff-Chem {d:.4e} Pure-Chem {p:.4e}")
    report(6, "initial-condition robustness", ok, f"{IC_SAMPLES} samples; " + "; ".join(rows))
    assert ok


def test_7_invariant_suites():
    here = Path(__file__).parent
    files = sorted(str(p) for p in here.glob("test_*.py") if p.name != Path(__file__).name)
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files],
                          capture_output=True, text=True, cwd=here.parent)
    lines = proc.stdout.strip().splitlines()
    summary = lines[-1] if lines else proc.stderr.strip()[-200:]
    ok = proc.returncode == 0
    report(7, "invariant suites", ok, f"{len(files)} modules: {summary}")
    assert ok, proc.stdout[-4000:]
