"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 property
violation, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from ._io import dumps_json, read_csv, write_csv, write_json
from ._validation import grid_steps, parse_vector, probability_vector
from .analysis import stabilizability
from .dual import ControlSignal, duality_check
from .exceptions import ModelValidationError, WonhamError
from .experiments import (
    ExperimentConfig,
    run_detection,
    run_martingale_check,
    run_monotonicity,
    run_necessity_demo,
    run_splitting_check,
    run_stability,
    worst_over_basis,
    write_curve_csv,
)
from .filter import SCHEMES, run_wonham
from .model import ergodic_decomposition, load_model, model_from_dict
from .paths import ObservationGrid, RngStream, simulate_trial

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "WONHAM_THREADS"

MODES = {
    "stability": "mean squared gap E|pi_t^mu(f) - pi_t^nu(f)|^2 between filters started "
                 "from mu and nu on common observations (filter stability)",
    "detection": "terminal posterior mass of each ergodic class versus the class of X_0 "
                 "(asymptotic detection of the correct ergodic class)",
    "splitting": "pathwise gap between the filter from nu and the class mixture "
                 "sum_k pi_t(1_k) pi_t^{nu_k} (class-splitting identity of the filter)",
    "martingale": "mean of the class masses pi_t^nu(1_k) under P^nu against nu(1_k) "
                  "(martingale property of the class masses)",
    "monotonicity": "optimal value J_T = E|f(X_T) - pi_T(f)|^2 under an invariant prior "
                    "(non-increasing in T)",
    "necessity": "witness f orthogonal to the controllable subspace, mu = nu + eps f "
                 "(non-stabilizable models have unstable filters)",
}


class _ViolationExit(Exception):
    pass


def _positive_float(text):
    value = float(text)
    if not (np.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _seed(text):
    value = int(text, 0)
    if not -(1 << 63) <= value < (1 << 64):
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def _vector(text):
    try:
        return parse_vector(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _threads_default():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _common(p, model=True):
    if model:
        p.add_argument("--model", required=model, help="model JSON file (fields d, A, h, R, name)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit with status 3 when the checked property fails")
    p.add_argument("--json", action="store_true", help="print the report as JSON on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wonham",
        description="Wonham filter stability toolkit: controllability analysis, exact "
                    "simulation, filtering, duality checks and Monte Carlo experiments.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "analyze",
        help="controllable subspace and stabilizability of a model",
        description="Compute the controllable subspace (smallest subspace containing the "
                    "constant function and closed under A and multiplication by h), the "
                    "ergodic classes, and the three stabilizability tests: ker(A) inside "
                    "the subspace, class indicators inside the subspace, and Hurwitz "
                    "uncontrollable block. Prints a witness vector when not stabilizable.",
    )
    _common(p)
    p.add_argument("--out", help="also write the JSON report to this file")

    p = sub.add_parser(
        "simulate",
        help="exact simulation of the chain and of observation increments",
        description="Sample X by its jump chain and dZ = h(X) dt + dW on a grid. Writes one "
                    "CSV per trial (t, X_t, dZ; row k holds the increment over "
                    "(t_{k-1}, t_k]) and a jump-times sidecar (time, state).",
    )
    _common(p)
    p.add_argument("--prior", type=_vector, help="initial distribution (default uniform)")
    p.add_argument("--T", type=_positive_float, required=True)
    p.add_argument("--dt", type=_positive_float, default=1e-3)
    p.add_argument("--trials", type=_positive_int, default=1)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser(
        "filter",
        help="run the Wonham filter on an observation file",
        description="Split-step Wonham filter (exact prediction, Bayes correction). The "
                    "observation CSV needs a dZ column; with a t column whose first entry "
                    "is 0 that row is skipped (the simulate convention). Output columns: "
                    "t, pi_1..pi_d, dI with dI the innovation increment.",
    )
    _common(p)
    p.add_argument("--prior", type=_vector, help="prior (default uniform)")
    p.add_argument("--obs", required=True, help="observation CSV")
    p.add_argument("--dt", type=_positive_float, help="grid step when the file has no t column")
    p.add_argument("--scheme", choices=SCHEMES, default="split")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser(
        "duality-check",
        help="Monte Carlo check of the estimation-control duality identity",
        description="For a deterministic control U solve -dY/dt = AY + hU, Y_T = f, form the "
                    "estimator S_T = pi0(Y_0) - sum U dZ and compare E^mu|f(X_T) - S_T|^2 with "
                    "the control cost (terminal variance, carre du champ, R U^2) plus the "
                    "prior mismatch |pi0(Y_0) - mu(Y_0)|^2 (duality principle).",
    )
    _common(p)
    p.add_argument("--mu", type=_vector, required=True, help="law of X_0")
    p.add_argument("--pi0", type=_vector, required=True, help="estimator prior")
    p.add_argument("--control", default="zero", help="zero | const:C | sin")
    p.add_argument("--f", type=_vector, required=True)
    p.add_argument("--T", type=_positive_float, default=1.0)
    p.add_argument("--dt", type=_positive_float, default=1e-3)
    p.add_argument("--trials", type=_positive_int, default=10_000)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", help="also write the JSON report to this file")

    p = sub.add_parser(
        "experiment",
        help="Monte Carlo experiments on filter stability",
        description="Experiments: " + "; ".join(f"{k}: {v}" for k, v in MODES.items())
                    + ". Settings come from flags or a JSON file (--config); file values win.",
    )
    p.add_argument("mode", choices=sorted(MODES), help="experiment to run")
    _common(p, model=False)
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--config", help="experiment JSON file (model, mu, nu, f, T, dt, trials, seed, checkpoints)")
    p.add_argument("--mu", type=_vector)
    p.add_argument("--nu", type=_vector)
    p.add_argument("--f", type=_vector, action="append",
                   help="test function (repeatable; stability defaults to the standard basis)")
    p.add_argument("--T", type=_positive_float)
    p.add_argument("--dt", type=_positive_float)
    p.add_argument("--trials", type=_positive_int)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--checkpoints", type=_vector)
    p.add_argument("--threshold", type=float,
                   help="stability: pass when the final value is at most this")
    p.add_argument("--min-fraction", type=float, default=0.99,
                   help="detection: required correct-class fraction")
    p.add_argument("--max-mse", type=float, default=0.01,
                   help="detection: allowed mean squared class-mass error")
    p.add_argument("--tol", type=float, default=1e-10, help="splitting: allowed deviation")
    p.add_argument("--out", default=".", help="output directory")
    return parser


def _invocation(argv):
    return "wonham " + shlex.join(argv)


def _print_json(doc):
    sys.stdout.write(dumps_json(doc))


# -- subcommands ---------------------------------------------------------------------


def cmd_analyze(args, argv):
    model = load_model(args.model)
    dec = ergodic_decomposition(model)
    report = stabilizability(model)
    doc = {"model": model.name, "classes": [list(c) for c in dec.classes], **report.to_dict()}
    if args.out:
        write_json(args.out, doc)
    if args.json:
        _print_json(doc)
    else:
        print(f"model: {model.name or '(unnamed)'}  d={model.d}  R={model.R!r}")
        print(f"ergodic classes ({dec.m}): " + " ".join(str(list(c)) for c in dec.classes))
        print(f"controllable subspace dimension: {report.controllable_dim} of {model.d}")
        print(f"kernel test: {report.nullspace_test}  indicator test: {report.indicator_test}  "
              f"Hurwitz test: {report.hurwitz_test}")
        eig = ", ".join(f"{z.real:.6g}" + (f"{z.imag:+.6g}j" if abs(z.imag) > 1e-12 else "")
                        for z in report.uc_eigenvalues)
        print(f"uncontrollable block eigenvalues: {eig or '(none)'}")
        print(f"verdict: {'stabilizable' if report.verdict else 'not stabilizable'}")
        if report.witness is not None:
            print("witness: " + ", ".join(f"{v:.12g}" for v in report.witness))
    return EXIT_OK


def cmd_simulate(args, argv):
    model = load_model(args.model)
    prior = np.full(model.d, 1.0 / model.d) if args.prior is None else args.prior
    prior = probability_vector(prior, length=model.d, name="prior")
    n = grid_steps(args.T, args.dt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comment = f"{_invocation(argv)} | seed={args.seed}"
    width = len(str(args.trials - 1))
    times = np.arange(n + 1) * args.dt
    for i in range(args.trials):
        path, obs = simulate_trial(model, prior, args.T, args.dt, RngStream(args.seed, i))
        states = path.state_at(times)
        dz = np.concatenate([[0.0], obs.increments])
        stem = f"trial_{i:0{width}d}"
        write_csv(out / f"{stem}.csv", ["t", "X", "dZ"], zip(times, states, dz), comment)
        jumps = [(0.0, path.initial_state)] + list(zip(path.jump_times, path.jump_targets))
        write_csv(out / f"{stem}_jumps.csv", ["time", "state"], jumps, comment)
    if args.json:
        _print_json({"trials": args.trials, "n_steps": n, "out": str(out)})
    return EXIT_OK


def _load_observations(path, dt):
    header, rows = read_csv(path)
    if "dZ" not in header:
        raise ValueError(f"{path}: no dZ column")
    data = np.asarray(rows, dtype=float).reshape(-1, len(header))
    dz = data[:, header.index("dZ")]
    if "t" in header:
        t = data[:, header.index("t")]
        if t.size and t[0] == 0.0:
            dz = dz[1:]
            steps = np.diff(t)
        else:
            steps = np.diff(np.concatenate([[0.0], t]))
        if steps.size == 0:
            raise ValueError(f"{path}: no increments")
        if np.ptp(steps) > 1e-9 * steps[0]:
            raise ValueError(f"{path}: t column is not uniformly spaced")
        file_dt = float(np.mean(steps))
        if dt is not None and abs(dt - file_dt) > 1e-9 * dt:
            warnings.warn(f"--dt {dt} ignored; the observation file has step {file_dt}")
        dt = file_dt
    elif dt is None:
        raise ValueError("--dt is required when the observation file has no t column")
    return ObservationGrid(float(dt), dz)


def cmd_filter(args, argv):
    model = load_model(args.model)
    prior = np.full(model.d, 1.0 / model.d) if args.prior is None else args.prior
    obs = _load_observations(args.obs, args.dt)
    traj = run_wonham(model, prior, obs, scheme=args.scheme)
    header = ["t"] + [f"pi_{j + 1}" for j in range(model.d)] + ["dI"]
    dI = np.concatenate([[0.0], traj.innovations])
    rows = (np.concatenate([[t], p, [di]]) for t, p, di in zip(traj.times, traj.posteriors, dI))
    write_csv(args.out, header, rows, f"{_invocation(argv)} | prior={','.join(map(repr, map(float, traj.posteriors[0])))}")
    if args.json:
        _print_json({"n_steps": traj.n_steps, "dt": traj.dt, "terminal": traj.posteriors[-1]})
    return EXIT_OK


def cmd_duality(args, argv):
    model = load_model(args.model)
    U = ControlSignal.parse(args.control, args.T, args.dt)
    report = duality_check(model, args.mu, args.pi0, U, args.f, args.T, args.dt,
                           args.trials, args.seed)
    doc = {"invocation": _invocation(argv), "seed": args.seed, "control": args.control,
           **report.to_dict()}
    if args.out:
        write_json(args.out, doc)
    _print_json(doc)
    if args.assert_ and not report.passed:
        raise _ViolationExit("duality identity violated")
    return EXIT_OK


_EXPERIMENT_KEYS = ("model", "mu", "nu", "f", "T", "dt", "trials", "seed", "checkpoints")


def _experiment_settings(args):
    doc = {}
    base = None
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ValueError("experiment file must hold a JSON object")
        base = Path(args.config).parent
    merged = {}
    for key in _EXPERIMENT_KEYS:
        flag = getattr(args, key)
        if key in doc:
            if flag is not None:
                warnings.warn(f"--{key} ignored: the experiment file sets {key!r}")
            merged[key] = doc[key]
        elif flag is not None:
            merged[key] = flag.tolist() if isinstance(flag, np.ndarray) else flag
    if isinstance(merged.get("f"), list) and merged["f"] and isinstance(merged["f"][0], np.ndarray):
        merged["f"] = [f.tolist() for f in merged["f"]]
    if "model" not in merged:
        raise ValueError("no model given (--model or the experiment file)")
    if isinstance(merged["model"], str) and args.config and "model" in doc:
        path = Path(merged["model"])
        merged["model"] = str(path if path.is_absolute() else base / path)
    merged.setdefault("T", 10.0)
    merged.setdefault("dt", 1e-3)
    merged.setdefault("trials", 1000)
    merged.setdefault("seed", 0)
    return merged


def _config(settings, model, threads, needs_f=True):
    d = model.d
    uniform = [1.0 / d] * d
    nu = settings.get("nu", settings.get("mu", uniform))
    mu = settings.get("mu", nu)
    f_list = settings.get("f") or ([] if needs_f else [np.ones(d).tolist()])
    if needs_f and not f_list:
        raise ValueError("at least one --f is required")
    return ExperimentConfig(
        model=model, prior_mu=mu, prior_nu=nu, f_list=tuple(f_list), T=float(settings["T"]),
        dt=float(settings["dt"]), n_trials=int(settings["trials"]),
        master_seed=int(settings["seed"]), checkpoints=settings.get("checkpoints"),
        threads=threads,
    )


def cmd_experiment(args, argv):
    settings = _experiment_settings(args)
    spec = settings["model"]
    model = load_model(spec) if isinstance(spec, str) else model_from_dict(spec)
    threads = args.threads or _threads_default()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comment = f"{_invocation(argv)} | seed={settings['seed']}"
    mode = args.mode
    checks, details = {}, {}

    if mode == "stability":
        if not settings.get("f"):
            settings["f"] = np.eye(model.d).tolist()
        config = _config(settings, model, threads)
        curves = run_stability(config)
        worst = worst_over_basis(curves)
        write_curve_csv(out / "stability_worst.csv", worst.times, worst.values, worst.std_errors,
                        comment)
        details["worst_final"] = worst.final
        for i, curve in enumerate(curves):
            write_curve_csv(out / f"stability_f{i}.csv", curve.times, curve.values,
                            curve.std_errors, comment)
            bound = osc_sq = float(np.ptp(curve.f)) ** 2
            checks[f"f{i}_bounded"] = bool(np.all(curve.values <= bound + 3 * curve.std_errors + 1e-12))
            if args.threshold is not None:
                checks[f"f{i}_final_below_threshold"] = curve.final <= args.threshold
            details[f"f{i}"] = {"final": curve.final, "final_se": float(curve.std_errors[-1]),
                                "osc_squared": osc_sq}
    elif mode == "detection":
        config = _config(settings, model, threads, needs_f=False)
        res = run_detection(config)
        counts, edges = res.histogram(0, bins=20)
        write_csv(out / "detection_histogram.csv", ["bin_lo", "bin_hi", "count"],
                  zip(edges[:-1], edges[1:], counts), comment)
        details = {"class_mse": res.class_mse, "class_mse_se": res.class_mse_se,
                   "correct_fraction": res.correct_fraction,
                   "correct_fraction_se": res.correct_fraction_se, "note": res.note}
        checks["correct_fraction"] = res.correct_fraction >= args.min_fraction
        checks["class_mse"] = bool(np.all(res.class_mse <= args.max_mse))
    elif mode == "splitting":
        config = _config(settings, model, threads, needs_f=False)
        deviation = run_splitting_check(config)
        details = {"max_deviation": deviation}
        checks["deviation"] = deviation <= args.tol
    elif mode == "martingale":
        config = _config(settings, model, threads, needs_f=False)
        rep = run_martingale_check(config)
        for k in range(rep.targets.shape[0]):
            write_curve_csv(out / f"martingale_class{k}.csv", rep.times, rep.means[:, k],
                            rep.std_errors[:, k], comment)
        details = {"targets": rep.targets}
        checks["within_3se"] = rep.passed
    elif mode == "monotonicity":
        config = _config(settings, model, threads)
        for i, curve in enumerate(run_monotonicity(config)):
            write_curve_csv(out / f"monotonicity_f{i}.csv", curve.times, curve.estimates,
                            curve.std_errors, comment)
            checks[f"f{i}_non_increasing"] = curve.monotone
    elif mode == "necessity":
        rep = run_necessity_demo(model, float(settings["T"]), float(settings["dt"]),
                                 int(settings["trials"]), int(settings["seed"]),
                                 checkpoints=settings.get("checkpoints"),
                                 nu=settings.get("nu"), threads=threads)
        write_curve_csv(out / "necessity.csv", rep.curve.times, rep.curve.values,
                        rep.curve.std_errors, comment)
        write_csv(out / "necessity_mismatch.csv", ["t", "prior_mismatch"],
                  zip(rep.mismatch_times, rep.prior_mismatch), comment)
        details = {"witness": rep.witness, "epsilon": rep.epsilon, "mu": rep.mu, "nu": rep.nu,
                   "final": rep.curve.final, "threshold": rep.threshold,
                   "expected_mismatch": rep.expected_mismatch}
        checks["bounded_away_from_zero"] = rep.passed

    passed = all(checks.values())
    verdict = {"mode": mode, "invocation": _invocation(argv), "seed": settings["seed"],
               "checks": checks, "passed": passed, "details": details}
    write_json(out / f"{mode}_verdict.json", verdict)
    if args.json:
        _print_json(verdict)
    else:
        for name, ok in checks.items():
            print(f"{mode}.{name}: {'PASS' if ok else 'FAIL'}")
    if not passed:
        raise _ViolationExit(f"{mode}: property violated")
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "duality-check": cmd_duality,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            return COMMANDS[args.command](args, argv)
    except _ViolationExit as exc:
        print(f"violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except ModelValidationError as exc:
        for code, msg in exc.violations:
            print(f"error: {code}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (WonhamError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
