"""``absorb`` command line: fit, impact and simulate.

Exit codes: 0 success, 1 data error, 2 usage error, 3 fit completed but
did not converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from absorb import __version__
from absorb.data import DataError, load_dataset
from absorb.impact import d_measure
from absorb.likelihood import PriorSpec
from absorb.sampler import Model, PosteriorDraws, SamplerConfig, run_mcmc, summarize
from absorb.simulation import COMPLETE_CASE_NBC, DESIGNS, run_experiment

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_UNCONVERGED = 0, 1, 2, 3

MODEL_FLAGS = {"absorb": Model.ABSORB, "nbc": Model.NBC, "ism": Model.ABSORB_ISM}
SIM_MODEL_FLAGS = {"absorb": "ABSORB", "nbc": "NBC", "complete-case": COMPLETE_CASE_NBC}

log = logging.getLogger("absorb")


class UsageError(Exception):
    pass


class RunLock:
    """Exclusive ownership of an output directory for the duration of a run."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path.parent} is locked by another run ({self.path})")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_seed(seed):
    if seed is None:
        return int(np.random.SeedSequence().entropy % 2 ** 63)
    if not 0 <= seed < 2 ** 64:
        raise UsageError("--seed must be a 64-bit unsigned integer")
    return seed


def _write(out: Path, name: str, text: str, written: list):
    (out / name).write_text(text, encoding="utf-8")
    written.append(name)


def _manifest(args, command, seed, fingerprint, started, outputs):
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return json.dumps({
        "command": command,
        "flags": flags,
        "dataset_fingerprint": fingerprint,
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": sorted(outputs),
    }, indent=2, sort_keys=True, default=str) + "\n"


def _config(args, seed) -> SamplerConfig:
    try:
        return SamplerConfig(n_chains=args.chains, n_iter=args.iters, burn_in=args.burnin,
                             thin=args.thin, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_fit(args) -> int:
    model = MODEL_FLAGS[args.model]
    if args.missing_studies is not None and model is not Model.ABSORB_ISM:
        raise UsageError("--missing-studies requires --model ism")
    if model is Model.ABSORB_ISM and args.missing_studies is None:
        raise UsageError("--model ism requires --missing-studies K")
    if args.missing_studies is not None and args.missing_studies < 0:
        raise UsageError("--missing-studies must be non-negative")
    seed = _resolve_seed(args.seed)
    config = _config(args, seed)
    started = _now()
    dataset, report = load_dataset(args.data, log_transform_y1=args.log_y1,
                                   log_transform_y2=args.log_y2,
                                   ism_mode=model is Model.ABSORB_ISM)
    if report.warnings:
        log.warning("%d warning(s); first: %s: %s", len(report.warnings), *report.warnings[0])
    if model is Model.ABSORB_ISM:
        dataset = replace(dataset, k_missing=args.missing_studies)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunLock(out):
        draws, diag = run_mcmc(model, dataset, PriorSpec(), config)
        summary = {"model": model.value, "dataset_fingerprint": draws.dataset_fingerprint,
                   "n_draws": draws.n_draws, "config": asdict(draws.config),
                   "parameters": summarize(draws)}
        written = []
        _write(out, "draws.csv", draws.to_csv(), written)
        _write(out, "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", written)
        _write(out, "diagnostics.json",
               json.dumps(diag.to_dict(), indent=2, sort_keys=True) + "\n", written)
        _write(out, "manifest.json", _manifest(args, "fit", seed, draws.dataset_fingerprint,
                                               started, written + ["manifest.json"]), [])
    if not diag.converged:
        log.warning("fit completed without meeting the ESS / R-hat targets")
        return EXIT_UNCONVERGED
    return EXIT_OK


def load_fit(directory) -> PosteriorDraws:
    d = Path(directory)
    try:
        summary = json.loads((d / "summary.json").read_text(encoding="utf-8"))
        text = (d / "draws.csv").read_text(encoding="utf-8")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read fit directory {d}: {exc}")
    config = SamplerConfig(**summary["config"])
    return PosteriorDraws.from_csv(text, summary["model"], summary["dataset_fingerprint"], config)


def cmd_impact(args) -> int:
    started = _now()
    abs_fit = load_fit(args.abs_fit)
    nbc_fit = load_fit(args.nbc_fit)
    if abs_fit.dataset_fingerprint != nbc_fit.dataset_fingerprint:
        raise DataError("the two fits were made on different datasets (fingerprint mismatch)")
    report, grids = d_measure(abs_fit, nbc_fit, return_grids=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunLock(out):
        written = []
        _write(out, "dreport.json", report.to_json(), written)
        for name, grid in grids.items():
            _write(out, f"density_{name}.csv", grid.to_csv(), written)
        _write(out, "manifest.json", _manifest(args, "impact", None, abs_fit.dataset_fingerprint,
                                               started, written + ["manifest.json"]), [])
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    try:
        models = tuple(SIM_MODEL_FLAGS[m.strip()] for m in args.models.split(","))
    except KeyError as exc:
        raise UsageError(f"unknown model {exc.args[0]!r}; choose from {','.join(SIM_MODEL_FLAGS)}")
    seed = _resolve_seed(args.seed)
    config = _config(args, seed)
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunLock(out):
        table = run_experiment(args.experiment, args.n, args.reps, models, config, seed)
        written = []
        _write(out, "metrics.csv", table.to_csv(), written)
        extra = {"realized_missing_fraction": list(table.missing_fraction),
                 "unconverged_replications": table.n_unconverged}
        manifest = json.loads(_manifest(args, "simulate", seed, None, started,
                                        written + ["manifest.json"]))
        manifest.update(extra)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _add_sampler_flags(p, iters, burnin):
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--burnin", type=int, default=burnin)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="absorb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a study-level CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=sorted(MODEL_FLAGS))
    p.add_argument("--missing-studies", type=int, default=None)
    _add_sampler_flags(p, 50_000, 10_000)
    p.add_argument("--log-y1", action="store_true")
    p.add_argument("--log-y2", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impact", help="D measure between a bias-corrected and an uncorrected fit")
    p.add_argument("--abs-fit", required=True)
    p.add_argument("--nbc-fit", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impact)

    p = sub.add_parser("simulate", help="bias / SE / coverage over simulated replications")
    p.add_argument("--experiment", type=int, required=True, choices=sorted(DESIGNS))
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--models", default="absorb,nbc,complete-case")
    _add_sampler_flags(p, 20_000, 5_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="absorb: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"absorb: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"absorb: data error: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if report is not None:
            for sid, msg in report.errors:
                print(f"  {sid}: {msg}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"absorb: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
