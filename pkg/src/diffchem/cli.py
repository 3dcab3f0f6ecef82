"""Command-line entry point: simulate, gradient, optimize, flame1d, benchmark, validate.

Every run resolves its configuration as defaults < ``--config`` file < flags,
writes ``manifest.json`` next to its outputs and can be replayed with
``--config <out-dir>/manifest.json``.  Exit codes: 0 success, 1 usage or
input error, 2 numerical failure (``diagnostic.json`` is written).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .flame1d import FlameError, export_profiles, load_case
from .kinetics import DiffChemModel, RhsMode, initial_state
from .mechanism import (MechanismError, builtin_mechanism, builtin_path, load_mechanism,
                        parse_mechanism, validate_mechanism)
from .objective import DEFAULT_PRIMAL, LossSpec, ObservationSet, dump_observations, load_observations
from .odeint import IntegrationError, calibration_config, default_config, trajectory_csv
from .optimizer import (OptConfig, OptimizationAborted, init_theta, optimize,
                        perturb_observations, read_theta, theta_json)
from .profiles import ProfileError, dump_profiles, load_profiles
from .sensitivity import METHODS, model_gradient, observed_states, solve_primal
from .objective import LogMSE

COMMANDS = ("simulate", "gradient", "optimize", "flame1d", "benchmark", "validate")
BUILTIN_MECHS = ("li_h2",)

_COMMON = {"seed": 0, "out_dir": "diffchem_out"}
_SOLVE = {"mech": None, "profiles": None, "theta": "ones", "mode": "diffchem",
          "thermal": "forced", "inlet": None, "T0": None, "rtol": 1e-6, "atol_T": 1e-6,
          "atol_Y": 1e-12, "tol_factor": 0.02}
_OBS = {"obs": None, "primal": ",".join(DEFAULT_PRIMAL), "n_obs": 50}
DEFAULTS = {
    "validate": {**_COMMON, "mech": None},
    "simulate": {**_COMMON, **_SOLVE, "tau_end": None},
    "gradient": {**_COMMON, **_SOLVE, **_OBS, "method": "auto"},
    "benchmark": {**_COMMON, **_SOLVE, **_OBS, "methods": ",".join(METHODS)},
    "optimize": {**_COMMON, **_SOLVE, **_OBS, "theta": None, "method": "auto", "steps": 100,
                 "lr": 0.01, "noise": 0.0, "tol_factor": calibration_config(1).tol_factor,
                 "checkpoint_every": 10},
    "flame1d": {**_COMMON, "case": None, "mech": None, "theta": "ones", "thermal": None,
                "nodes": None, "n_obs": 50, "primal": ",".join(DEFAULT_PRIMAL)},
}
_INPUT_KEYS = ("mech", "profiles", "theta", "obs", "case")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffchem", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"diffchem {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                           parser_class=_Parser)
    sup = argparse.SUPPRESS

    def add(cmd, help_):
        s = sub.add_parser(cmd, help=help_, argument_default=sup)
        s.add_argument("--seed", type=int, help="RNG seed (default 0)")
        s.add_argument("--out-dir", dest="out_dir", help="output directory")
        s.add_argument("--config", dest="config_file", help="JSON config or a run manifest")
        return s

    def solve_args(s):
        s.add_argument("--mech", help="mechanism file or builtin name (li_h2)")
        s.add_argument("--profiles", help="forced-profile CSV")
        s.add_argument("--theta", help="multiplier JSON path or 'ones'")
        s.add_argument("--mode", choices=("diffchem", "purechem"))
        s.add_argument("--thermal", choices=("forced", "coupled"))
        s.add_argument("--inlet", help="initial mole fractions 'H2:0.28,O2:0.14,N2:0.58' "
                                       "(default: first profile row)")
        s.add_argument("--T0", type=float, help="initial temperature (default: first profile row)")
        s.add_argument("--rtol", type=float)
        s.add_argument("--atol-T", dest="atol_T", type=float)
        s.add_argument("--atol-Y", dest="atol_Y", type=float)
        s.add_argument("--tol-factor", dest="tol_factor", type=float,
                       help="local error target as a fraction of the tolerance")

    def obs_args(s):
        s.add_argument("--obs", help="observation CSV (default: subsample the profile Y columns)")
        s.add_argument("--primal", help="comma-separated primal species")
        s.add_argument("--n-obs", dest="n_obs", type=int)

    s = add("validate", "check a mechanism file")
    s.add_argument("--mech")
    s = add("simulate", "integrate the streamline ODE")
    solve_args(s)
    s.add_argument("--tau-end", dest="tau_end", type=float)
    s = add("gradient", "loss and gradient with respect to the multipliers")
    solve_args(s)
    obs_args(s)
    s.add_argument("--method", choices=METHODS + ("auto",))
    s = add("optimize", "calibrate multipliers with Adam")
    solve_args(s)
    obs_args(s)
    s.add_argument("--method", choices=METHODS + ("auto",))
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    s = add("benchmark", "compare gradient engines on one case")
    solve_args(s)
    obs_args(s)
    s.add_argument("--methods", help="comma-separated subset of forward,adjoint,fd")
    s = add("flame1d", "solve a burner-stabilised flat flame and export profiles")
    s.add_argument("--case", help="case JSON (default: builtin hydrogen case)")
    s.add_argument("--mech")
    s.add_argument("--theta")
    s.add_argument("--thermal", choices=("forced", "coupled"))
    s.add_argument("--nodes", type=int)
    s.add_argument("--n-obs", dest="n_obs", type=int)
    s.add_argument("--primal")
    return p


# ----------------------------------------------------------------------------
# configuration and inputs
# ----------------------------------------------------------------------------

def resolve_config(command: str, flags: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config_file", None)
    if path is not None:
        data = _read_json(path, "config")
        if isinstance(data, dict) and "command" in data and "config" in data:
            if data["command"] != command:
                raise UsageError(f"manifest is for {data['command']!r}, not {command!r}")
            data = data["config"]
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(data)
    cfg.update(flags)
    return cfg


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _read_text(path, what) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p.read_text()


def _digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def input_digests(cfg: dict) -> dict:
    out = {}
    for key in _INPUT_KEYS:
        v = cfg.get(key)
        if v is None or v == "ones":
            continue
        if key == "mech" and v in BUILTIN_MECHS and not Path(v).is_file():
            out[key] = {"path": f"builtin:{v}", "sha256": _digest(builtin_path(f"{v}.mech"))}
        elif Path(v).is_file():
            out[key] = {"path": str(v), "sha256": _digest(v)}
    return out


def _mechanism(spec):
    if spec is None:
        raise UsageError("--mech is required")
    if Path(spec).is_file():
        return load_mechanism(spec)
    if spec in BUILTIN_MECHS:
        return builtin_mechanism(spec)
    raise UsageError(f"mechanism file not found: {spec}")


def _theta(spec, mech):
    if spec is None or spec == "ones":
        return np.ones(mech.n_reactions)
    return read_theta(_read_text(spec, "theta"), mech.n_reactions)


def _profiles(cfg, mech):
    if cfg["profiles"] is None:
        raise UsageError("--profiles is required")
    return load_profiles(_read_text(cfg["profiles"], "profiles"), mech)


def _composition(text: str, mech) -> np.ndarray:
    X = np.zeros(mech.n_species)
    for item in text.split(","):
        name, _, val = item.partition(":")
        name = name.strip()
        if name not in mech.species_names or not val:
            raise UsageError(f"bad inlet entry {item!r}; expected NAME:value with a known species")
        X[mech.species_names.index(name)] = float(val)
    if X.sum() <= 0 or np.any(X < 0):
        raise UsageError("inlet mole fractions must be non-negative with a positive sum")
    Y = X * mech.molar_masses
    return Y / Y.sum()


def _phi0(cfg, mech, profiles) -> np.ndarray:
    if cfg["inlet"] is not None:
        Y0 = _composition(cfg["inlet"], mech)
    elif profiles.Y is not None:
        Y0 = profiles.Y[0]
    else:
        raise UsageError("profiles carry no Y columns; pass --inlet")
    T0 = profiles.T[0] if cfg["T0"] is None else cfg["T0"]
    return initial_state(T0, Y0)


def _solver(cfg, mech):
    return default_config(mech.n_species, rtol=cfg["rtol"], tol_factor=cfg["tol_factor"],
                          atol=np.concatenate([[cfg["atol_T"]],
                                               np.full(mech.n_species, cfg["atol_Y"])]))


def _primal(cfg, mech) -> tuple:
    names = tuple(p.strip() for p in str(cfg["primal"]).split(",") if p.strip())
    try:
        return LossSpec(names).indices(mech)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def reference_observations(profiles, mech, n_obs: int, primal) -> ObservationSet:
    """Mole fractions from the profile Y columns at ``n_obs`` uniformly spaced positions."""
    if profiles.Y is None:
        raise UsageError("profiles carry no Y columns; pass --obs")
    coord = profiles.x if profiles.x is not None else profiles.tau
    so = np.linspace(coord[0], coord[-1], n_obs)
    tau = np.interp(so, coord, profiles.tau)
    Y = np.column_stack([np.interp(so, coord, profiles.Y[:, i]) for i in range(mech.n_species)])
    inv = Y / mech.molar_masses
    X = inv / inv.sum(axis=1, keepdims=True)
    return ObservationSet(tau, np.maximum(X, 0.0), primal, None, mech.species_names)


def _observations(cfg, mech, profiles) -> ObservationSet:
    primal = _primal(cfg, mech)
    if cfg["obs"] is not None:
        names = [mech.species_names[i] for i in primal]
        return load_observations(_read_text(cfg["obs"], "observation"), mech, names)
    return reference_observations(profiles, mech, int(cfg["n_obs"]), primal)


def _mode(cfg) -> RhsMode:
    return RhsMode.parse(cfg["mode"], cfg["thermal"])


# ----------------------------------------------------------------------------
# outputs
# ----------------------------------------------------------------------------

def _write(out: Path, name: str, text: str):
    (out / name).parent.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _mole(states, mech):
    inv = np.asarray(states)[:, 1:] / mech.molar_masses
    return inv / inv.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_validate(cfg, out: Path) -> int:
    spec = cfg["mech"]
    if spec is None:
        raise UsageError("--mech is required")
    if Path(spec).is_file():
        text = Path(spec).read_text(encoding="utf-8")
    elif spec in BUILTIN_MECHS:
        text = Path(builtin_path(f"{spec}.mech")).read_text(encoding="utf-8")
    else:
        raise UsageError(f"mechanism file not found: {spec}")
    # parse leniently so that every violation is reported, not just the first
    try:
        report = validate_mechanism(parse_mechanism(text, strict=False))
    except MechanismError as exc:
        report = [str(exc)]
    _write(out, "report.json", _dumps({"violations": report}))
    for line in report:
        print(line, file=sys.stderr)
    return 0 if not report else 1


def cmd_simulate(cfg, out: Path) -> int:
    mech = _mechanism(cfg["mech"])
    profiles = _profiles(cfg, mech)
    model = DiffChemModel(mech, profiles, _theta(cfg["theta"], mech), _mode(cfg))
    tau_end = model.tM if cfg["tau_end"] is None else float(cfg["tau_end"])
    traj = solve_primal(model, _phi0(cfg, mech, profiles), tau_end, _solver(cfg, mech))
    _write(out, "trajectory.csv", trajectory_csv(traj, mech.species_names))
    stats = {**traj.stats, "rhs_evals_model": model.n_rhs, "jac_evals_model": model.n_jac,
             "mode": model.mode.name, "tau_end": tau_end,
             "final_state": [float(v) for v in traj.y[-1]]}
    _write(out, "stats.json", _dumps(stats))
    return 0


def _gradient_setup(cfg):
    mech = _mechanism(cfg["mech"])
    profiles = _profiles(cfg, mech)
    obs = _observations(cfg, mech, profiles)
    if np.any(obs.tau < profiles.tau[0]) or np.any(obs.tau > profiles.tau[-1]):
        raise UsageError("observation times lie outside the profile domain")
    return mech, profiles, obs, _phi0(cfg, mech, profiles)


def cmd_gradient(cfg, out: Path) -> int:
    mech, profiles, obs, phi0 = _gradient_setup(cfg)
    model = DiffChemModel(mech, profiles, _theta(cfg["theta"], mech), _mode(cfg))
    res = model_gradient(model, phi0, LogMSE(mech, obs), _solver(cfg, mech), cfg["method"])
    _write(out, "gradient.json", _dumps(res.to_json()))
    return 0


def cmd_benchmark(cfg, out: Path) -> int:
    mech, profiles, obs, phi0 = _gradient_setup(cfg)
    methods = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; choose from {','.join(METHODS)}")
    theta, mode, solver = _theta(cfg["theta"], mech), _mode(cfg), _solver(cfg, mech)
    objective = LogMSE(mech, obs)
    base = DiffChemModel(mech, profiles, theta, mode)
    observed_states(base, phi0, obs.tau, solver)
    single = base.n_rhs
    results = []
    for m in methods:
        results.append(model_gradient(DiffChemModel(mech, profiles, theta, mode), phi0,
                                      objective, solver, m))
    ref = next((r for r in results if r.method == "fd"), results[0])
    rows = [["solve", "", "", "", single, base.n_jac, 1, "", 1.0, ""]]
    for r in results:
        rel = np.max(np.abs(r.grad - ref.grad)) / max(np.max(np.abs(ref.grad)), 1e-300)
        rows.append([r.method, float(r.loss), float(np.linalg.norm(r.grad)), float(rel),
                     r.rhs_evals, r.jac_evals, r.integrations, r.steps,
                     float(r.rhs_evals / single), f"{r.wall_ms:.3f}"])
    header = ["method", "loss", "grad_norm", "max_rel_diff_vs_" + ref.method, "rhs_evals",
              "jac_evals", "integrations", "steps", "rhs_ratio", "wall_ms"]
    _write(out, "benchmark.csv", _csv(header, rows))
    return 0


def cmd_optimize(cfg, out: Path) -> int:
    mech, profiles, obs, phi0 = _gradient_setup(cfg)
    seed = int(cfg["seed"])
    if cfg["theta"] is None:
        theta0 = init_theta(mech.n_reactions, seed=seed)
    else:
        theta0 = _theta(cfg["theta"], mech)
    noisy = perturb_observations(obs, float(cfg["noise"]), seed=seed + 1)
    opt = OptConfig(lr=float(cfg["lr"]), max_iters=int(cfg["steps"]), method=cfg["method"],
                    seed=seed, solver=_solver(cfg, mech))
    mode = _mode(cfg)
    every = max(1, int(cfg["checkpoint_every"]))
    written = set()

    def checkpoint(k, trace):
        if k % every == 0:
            _write(out, f"theta/theta_{k:04d}.json", theta_json(trace.theta[-1]))
            written.add(k)

    try:
        best, trace = optimize(mech, theta0, phi0, profiles, noisy, cfg=opt, mode=mode,
                               callback=checkpoint)
    except OptimizationAborted as exc:
        _write(out, "trace.csv", exc.trace.to_csv())
        _write(out, "theta_best.json", theta_json(exc.theta_best))
        raise
    k_last = len(trace) - 1
    if k_last not in written:
        _write(out, f"theta/theta_{k_last:04d}.json", theta_json(trace.theta[-1]))
    _write(out, "trace.csv", trace.to_csv())
    _write(out, "theta_best.json", theta_json(best))
    _write(out, "summary.json", _dumps({
        "stop_reason": trace.stop_reason, "iterations": k_last, "best_index": trace.best_index,
        "loss_primal_initial": trace.loss_primal[0],
        "loss_primal_best": trace.loss_primal[trace.best_index],
        "loss_secondary_initial": trace.loss_secondary[0],
        "loss_secondary_best": trace.loss_secondary[trace.best_index]}))
    solver = default_config(mech.n_species)
    pred = {}
    for label, th in (("initial", theta0), ("optimized", best)):
        states, _ = observed_states(DiffChemModel(mech, profiles, th, mode), phi0, obs.tau, solver)
        pred[label] = _mole(states, mech)
    names = mech.species_names
    header = ["tau"] + [f"{lab}_{s}" for s in names for lab in ("initial", "optimized", "reference")]
    rows = [[float(obs.tau[m])] + [float(v) for i in range(len(names))
                                   for v in (pred["initial"][m, i], pred["optimized"][m, i],
                                             obs.X[m, i])] for m in range(obs.n_obs)]
    _write(out, "comparison.csv", _csv(header, rows))
    return 0


def cmd_flame1d(cfg, out: Path) -> int:
    case_cfg = {} if cfg["case"] is None else _read_json(cfg["case"], "case")
    if cfg["nodes"] is not None:
        case_cfg["nodes"] = int(cfg["nodes"])
    if cfg["thermal"] is not None:
        case_cfg["thermal_mode"] = {"forced": "fixed_T", "coupled": "energy"}[cfg["thermal"]]
    case_cfg["n_obs"] = int(cfg["n_obs"])
    case_cfg["primal"] = [p.strip() for p in str(cfg["primal"]).split(",") if p.strip()]
    mech = None if cfg["mech"] is None else _mechanism(cfg["mech"])
    try:
        case = load_case(case_cfg, mech)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid flame case: {exc}") from None
    sol = case.solve(_theta(cfg["theta"], case.mech))
    profiles, obs = export_profiles(sol, case.n_obs, case.primal)
    _write(out, "profiles.csv", dump_profiles(profiles))
    _write(out, "solution.csv", sol.to_csv())
    _write(out, "observations.csv", dump_observations(obs))
    _write(out, "flame.json", _dumps({"residual": sol.residual, "converged": sol.converged,
                                      "stats": sol.stats, "case": case.config}))
    return 0


HANDLERS = {"validate": cmd_validate, "simulate": cmd_simulate, "gradient": cmd_gradient,
            "optimize": cmd_optimize, "flame1d": cmd_flame1d, "benchmark": cmd_benchmark}


def _fail(out: Path | None, exc, command) -> int:
    diag = exc.diagnostic() if isinstance(exc, IntegrationError) else {}
    diag.update({"command": command, "error": type(exc).__name__, "message": str(exc)})
    if isinstance(exc, OptimizationAborted):
        diag["iterations_completed"] = max(len(exc.trace) - 1, 0)
    text = json.dumps(diag, sort_keys=True, default=str)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            _write(out, "diagnostic.json", text + "\n")
        except OSError:
            pass
    return 2


def main(argv=None) -> int:
    out = None
    command = None
    try:
        ns = build_parser().parse_args(argv)
        command = ns.command
        if command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        flags = {k: v for k, v in vars(ns).items() if k != "command"}
        cfg = resolve_config(command, flags)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"command": command, "config": cfg, "inputs": input_digests(cfg),
                    "seed": cfg["seed"], "version": __version__}
        _write(out, "manifest.json", _dumps(manifest))
        return HANDLERS[command](cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IntegrationError, FlameError, OptimizationAborted, FloatingPointError,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(out, exc, command)
    except (ProfileError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
