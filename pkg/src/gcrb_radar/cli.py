"""Command-line entry point: ``gcrb-radar <command> --config FILE``.

Exit codes: 0 success, 1 validation failure, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigDocument, ConfigError
from .estimator import EstimationError, log_likelihood, ml_estimate
from .fim_crb import (
    MismatchStabilityError,
    SingularInformationError,
    BoundContext,
    ecrbob,
    fim_intermediate_closed_form,
    fim_report_csv,
    fim_summary,
    fim_theta,
    THETA_NAMES,
)
from .geometry import GeometryError
from .montecarlo import CSV_HEADER, run_mismatch_experiment, run_rmse_sweep
from .signal_model import ModelError, build_steering, scenario_noise, scenario_reflection, synthesize_observation
from .validation import results_csv, run_validation_suite
from .waveform import draw_bits

log = logging.getLogger("gcrb_radar")

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
NUMERICAL_ERRORS = (
    ModelError,
    SingularInformationError,
    MismatchStabilityError,
    EstimationError,
    GeometryError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _manifest(out: Path, command: str, doc: ConfigDocument, outputs: list[Path], extra=None):
    manifest = {
        "command": command,
        "seed": doc.seed,
        "config_sha256": doc.sha256(),
        "config_toml": doc.to_toml(),
        "outputs": sorted(p.name for p in outputs),
        "versions": {
            "gcrb_radar": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    _write(out, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write(out, "config.toml", doc.to_toml())


def cmd_crb(doc: ConfigDocument, args) -> int:
    sc = doc.scenario()
    rng = np.random.default_rng(doc.seed)
    bits = draw_bits(rng, sc.num_tx, sc.gmsk.num_bits)
    ctx = BoundContext(sc, bits)
    st = ctx.steering()
    fim = fim_intermediate_closed_form(st, ctx.R, ctx.covariance())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fim_theta(fim, ctx.jacobian())
    outs = [_write(args.out, "crb.csv", fim_report_csv(res, fim)), _write(args.out, "summary.txt", fim_summary(res))]
    _manifest(args.out, "crb", doc, outs)
    print(fim_summary(res), end="")
    return EXIT_OK


def cmd_ecrbob(doc: ConfigDocument, args) -> int:
    sc = doc.scenario()
    draws = doc.data["experiment"]["bit_draws"]
    res = ecrbob(sc, draws, np.random.default_rng(doc.seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "i", "j", "value"])
    for name, mat in (("ecrbob", res.crb), ("ecrbob_stderr", res.stderr)):
        for i in range(4):
            for j in range(4):
                w.writerow([name, THETA_NAMES[i], THETA_NAMES[j], repr(float(mat[i, j]))])
    lines = [f"bit draws: {res.draws} (singular excluded: {res.singular_draws})"]
    for name, v, se in zip(THETA_NAMES, res.recrbob, res.recrbob_stderr):
        lines.append(f"RECRBOB {name}: {v:.6g} +/- {se:.2g}")
    summary = "\n".join(lines) + "\n"
    outs = [_write(args.out, "ecrbob.csv", buf.getvalue()), _write(args.out, "summary.txt", summary)]
    _manifest(args.out, "ecrbob", doc, outs)
    print(summary, end="")
    return EXIT_OK


def cmd_mle(doc: ConfigDocument, args) -> int:
    sc = doc.scenario()
    search = doc.search()
    rng = np.random.default_rng(doc.seed)
    bits = draw_bits(rng, sc.num_tx, sc.gmsk.num_bits)
    R, Q = scenario_reflection(sc), scenario_noise(sc)
    r = synthesize_observation(build_steering(sc, sc.truth, bits), R, Q, rng)
    est = ml_estimate(r, sc, bits, search, R, Q)
    truth = sc.truth.as_array()
    hat = est.theta_hat.as_array()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "truth", "estimate", "error"])
    for name, t, e in zip(THETA_NAMES, truth, hat):
        w.writerow([name, repr(float(t)), repr(float(e)), repr(float(e - t))])
    summary = (
        f"log-likelihood at estimate: {est.log_likelihood:.10g}\n"
        f"log-likelihood at truth: {log_likelihood(r, sc, bits, sc.truth, R, Q):.10g}\n"
        f"coarse winner cell: {est.grid_cell}\n"
        f"refinement iterations: {est.iterations} (converged: {est.converged})\n"
        f"inside search box: {search.contains(hat)}\n"
        + "".join(f"{n}: {e:.6f} (truth {t:.6f})\n" for n, t, e in zip(THETA_NAMES, truth, hat))
    )
    outs = [_write(args.out, "mle.csv", buf.getvalue()), _write(args.out, "summary.txt", summary)]
    _manifest(args.out, "mle", doc, outs)
    print(summary, end="")
    return EXIT_OK


def _sweep_summary(result) -> str:
    lines = []
    for s in result.series_values():
        thr = result.threshold(s)
        label = "" if s is None else f"{result.series_var}={s:g}: "
        lines.append(f"{label}threshold {'none' if thr is None else f'{thr:g} dB'}")
        for p in result.curve(s):
            rm, _, rb = p.component("position")
            line = f"  {p.scnr_db:5g} dB  position RMSE {rm:.4g} m  RECRBOB {rb:.4g} m  trials {p.trials} failures {p.failures}"
            if p.bound_failures:
                line += f"  bound draws failed {p.bound_failures}"
            lines.append(line)
    return "\n".join(lines) + "\n"


def _run_sweep(doc, args, mismatch: bool, name: str) -> int:
    plan = doc.plan(workers=args.threads, mismatch=mismatch)
    result = run_mismatch_experiment(plan) if mismatch else run_rmse_sweep(plan)
    summary = _sweep_summary(result)
    outs = [_write(args.out, f"{name}.csv", result.to_csv()), _write(args.out, "summary.txt", summary)]
    _manifest(args.out, name, doc, outs, {"columns": list(CSV_HEADER)})
    print(summary, end="")
    return EXIT_OK


def cmd_sweep(doc, args) -> int:
    return _run_sweep(doc, args, mismatch=False, name="sweep")


def cmd_mismatch(doc, args) -> int:
    return _run_sweep(doc, args, mismatch=True, name="mismatch")


def cmd_validate(doc, args) -> int:
    sc = doc.scenario()
    results = run_validation_suite(sc, doc.seed, doc.data["experiment"]["validation_scenarios"])
    text = results_csv(results)
    outs = [_write(args.out, "validate.csv", text)]
    _manifest(args.out, "validate", doc, outs)
    for r in results:
        print(f"{'pass' if r.passed else 'FAIL'}  {r.name}: {r.value:.3e} (tol {r.tolerance:.0e})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


COMMANDS = {
    "crb": (cmd_crb, "CRB for one bit draw; writes crb.csv and summary.txt"),
    "ecrbob": (cmd_ecrbob, "bit-averaged CRB (ECRBOB) with standard errors"),
    "mle": (cmd_mle, "synthesize one observation and run the ML estimator"),
    "sweep": (cmd_sweep, "RMSE and RECRBOB versus SCNR, optionally per series value"),
    "mismatch": (cmd_mismatch, "RMSE and mismatched RECRBOB under signal-estimation error"),
    "validate": (cmd_validate, "oracle and invariant suite; exits 1 on any failure"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="TOML scenario/experiment file")
    common.add_argument("--seed", type=int, default=None, help="override seeds.seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes for Monte-Carlo trials")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="gcrb-radar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        doc = ConfigDocument.load(args.config)
        if args.seed is not None:
            doc = doc.with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    func = COMMANDS[args.command][0]
    try:
        return func(doc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure in '{args.command}': {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
