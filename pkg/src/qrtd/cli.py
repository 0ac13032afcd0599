"""Command-line front end: ``qrtd {fit,bootstrap,simulate,study,km,curves}``.

Inputs are counting-process CSV files (see :mod:`qrtd.dataio`); the name
``@stanford`` selects the bundled heart transplant data.  Every file is
written atomically, and a failing command removes what it already wrote.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import bootstrap
from .censoring import fit_censor_km
from .dataio import AnalysisConfig, CountingProcessTable, emit, ingest_table
from .errors import QRTDError
from .estimator import SolverConfig, fit
from .simulation import ScenarioConfig, generate, run_study
from .stanford import stanford_csv

__all__ = ["main", "build_parser", "parse_grid"]

log = logging.getLogger("qrtd")

BUILTIN = "@stanford"
DEFAULT_GRID = "0.15:0.85:0.05"


class CommandError(QRTDError):
    """Bad command-line input detected after argument parsing."""


class _Outputs:
    """Atomic file writes, rolled back together when the command fails."""

    def __init__(self):
        self.written: list[Path] = []

    def write(self, path, text: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(path)
        return path

    def rollback(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        self.written.clear()


def parse_grid(text: str) -> tuple[float, ...]:
    """``lo:hi:step`` (inclusive of ``hi`` up to rounding) or a comma list."""
    if ":" in text:
        try:
            lo, hi, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise CommandError(f"grid must be lo:hi:step, got {text!r}") from None
        if not step > 0 or hi < lo:
            raise CommandError(f"grid needs step > 0 and hi >= lo, got {text!r}")
        k = int(np.floor((hi - lo) / step + 1e-9))
        return tuple(round(lo + i * step, 12) for i in range(k + 1))
    return parse_list(text)


def parse_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise CommandError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _smoothing(text: str):
    if text.lower() in ("exact", "none", "inf"):
        return None
    try:
        a = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--a takes a positive number or 'exact', got {text!r}") from None
    if not a > 0:
        raise argparse.ArgumentTypeError("--a must be positive")
    return a


def _instrument(text: str) -> str:
    return {"columns": "columns", "at-y": "covariates-at-Y", "covariates-at-Y": "covariates-at-Y"}[text]


def _read_table(source: str, instrument_rule: str) -> CountingProcessTable:
    if source == BUILTIN:
        return ingest_table(stanford_csv(), instrument_rule)
    if source == "-":
        return ingest_table(sys.stdin.read(), instrument_rule)
    with open(source, newline="") as fh:
        return ingest_table(fh, instrument_rule)


def _header(command: str, args: argparse.Namespace, keys) -> str:
    parts = [f"{k}={getattr(args, k)}" for k in keys]
    return f"qrtd {__version__} {command} " + " ".join(parts)


def _solver(args) -> SolverConfig:
    return SolverConfig(smoothing_a=args.a, n_random_starts=args.starts, seed=args.seed)


def _analysis(args, q_list, B=0) -> AnalysisConfig:
    return AnalysisConfig(q_list=q_list, smoothing_a=args.a, B=B, level=getattr(args, "level", 0.95),
                          seed=args.seed, instrument_rule=_instrument(args.instrument))


def _fit_all(table, config: AnalysisConfig, solver: SolverConfig, workers=None):
    names = table.coefficient_names
    results = []
    for q in config.q_list:
        est = fit(table.dataset, q, solver)
        entry = {
            "q": q,
            "beta": dict(zip(names, map(float, est.beta))),
            "se": None,
            "ci": None,
            "diagnostics": {
                "converged": bool(est.converged),
                "residual_norm": float(est.residual_norm),
                "n_events": int(est.n_events_used),
                "clamp_count": int(est.clamp_count),
                "start_index": int(est.start_index),
            },
        }
        if config.B > 0:
            res = bootstrap(table.dataset, q, solver, B=config.B, level=config.level,
                            seed=config.seed, point=est, workers=workers)
            entry["se"] = dict(zip(names, map(float, res.se)))
            entry["ci"] = {n: [float(lo), float(hi)] for n, lo, hi in zip(names, res.ci_lower, res.ci_upper)}
            entry["percentile_ci"] = {n: [float(lo), float(hi)]
                                      for n, lo, hi in zip(names, res.pct_lower, res.pct_upper)}
            entry["diagnostics"]["bootstrap_failed"] = int(res.n_failed)
        results.append(entry)
    return results


def _table_text(results, with_ci: bool) -> str:
    lines = []
    head = f"{'q':>6}  {'coefficient':<16}{'estimate':>11}"
    if with_ci:
        head += f"{'se':>10}  {'CI':<24}"
    lines.append(head)
    for r in results:
        for name, b in r["beta"].items():
            row = f"{r['q']:>6.3g}  {name:<16}{b:>11.4f}"
            if with_ci and r["se"] is not None:
                lo, hi = r["ci"][name]
                row += f"{r['se'][name]:>10.4f}  ({lo:.3f}, {hi:.3f})"
            lines.append(row)
        d = r["diagnostics"]
        flag = "" if d["converged"] else "  NOT CONVERGED"
        lines.append(f"{'':>6}  residual {d['residual_norm']:.3g}, events {d['n_events']}{flag}")
    return "\n".join(lines) + "\n"


def _emit_results(args, out: _Outputs, results, command, keys):
    payload = {"command": command, "seed": args.seed, "config": {k: getattr(args, k) for k in keys},
               "results": results}
    text = json.dumps(payload, indent=2) + "\n"
    if args.json:
        out.write(args.json, text)
    print(_table_text(results, any(r["se"] is not None for r in results)), end="")
    if args.format == "json" and not args.json:
        print(text, end="")


FIT_KEYS = ("input", "q", "a", "instrument", "seed", "starts")


def cmd_fit(args, out):
    table = _read_table(args.input, _instrument(args.instrument))
    config = _analysis(args, parse_list(args.q))
    results = _fit_all(table, config, _solver(args))
    _emit_results(args, out, results, "fit", FIT_KEYS)


def cmd_bootstrap(args, out):
    table = _read_table(args.input, _instrument(args.instrument))
    config = _analysis(args, parse_list(args.q), B=args.B)
    results = _fit_all(table, config, _solver(args), workers=args.workers)
    _emit_results(args, out, results, "bootstrap", FIT_KEYS + ("B", "level"))


def _scenario(args, n=None, censoring=None, scenario=None) -> ScenarioConfig:
    return ScenarioConfig(
        n=n if n is not None else args.n,
        q=0.5,
        changepoints=scenario or args.scenario,
        target_censoring=censoring if censoring is not None else args.censoring,
        seed=args.seed,
    )


def cmd_simulate(args, out):
    sc = _scenario(args)
    data, truth = generate(sc)
    header = _header("simulate", args, ("scenario", "n", "censoring", "seed")) + \
        f"\ncensoring_rate={truth.censoring_rate!r} beta_true={list(sc.beta_true)}"
    text = emit(data, covariate_names=("dose1", "dose2"), header_comment=header)
    buf = io.StringIO()
    for line in header.splitlines():
        buf.write(f"# {line}\n")
    rows = truth.to_rows()
    w = csv.DictWriter(buf, fieldnames=["id", *rows[0].keys()], lineterminator="\n")
    w.writeheader()
    for i, r in enumerate(rows, start=1):
        w.writerow({"id": i, **{k: repr(v) for k, v in r.items()}})
    out.write(args.output, text)
    out.write(args.truth or _sidecar(args.output), buf.getvalue())
    print(f"wrote {args.output} ({len(data)} subjects, {len(data) - data.n_events} censored)")


def _sidecar(path) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + ".truth.csv"))


def cmd_study(args, out):
    grid = [
        _scenario(args, n=int(n), censoring=c, scenario=s)
        for s in args.scenario
        for n in parse_list(args.n)
        for c in parse_list(args.censoring)
    ]
    report = run_study(grid, trials=args.trials, B=args.B, seed=args.seed,
                       config=_solver(args), level=args.level, workers=args.workers)
    header = _header("study", args, ("scenario", "n", "censoring", "trials", "B", "level", "a", "seed"))
    text = report.to_csv(header)
    if args.output:
        out.write(args.output, text)
    else:
        print(text, end="")


def cmd_km(args, out):
    table = _read_table(args.input, _instrument(args.instrument))
    curve = fit_censor_km(table.dataset)
    buf = io.StringIO()
    buf.write(f"# {_header('km', args, ('input',))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "survival", "cumhaz", "increment", "at_risk", "n_censored"])
    for row in zip(curve.jump_times, curve.survival, curve.cumhaz, curve.increments,
                   curve.at_risk, curve.n_censored):
        w.writerow([repr(float(v)) for v in row])
    if args.output:
        out.write(args.output, buf.getvalue())
    else:
        print(buf.getvalue(), end="")


def cmd_curves(args, out):
    from .svgplot import curve_svg

    table = _read_table(args.input, _instrument(args.instrument))
    config = _analysis(args, parse_grid(args.q_grid), B=args.B)
    results = _fit_all(table, config, _solver(args), workers=args.workers)
    header = _header("curves", args, ("input", "q_grid", "a", "B", "level", "seed", "instrument"))
    outdir = Path(args.outdir)
    qs = [r["q"] for r in results]
    for name in table.coefficient_names:
        est = [r["beta"][name] for r in results]
        lo = [r["ci"][name][0] if r["ci"] else float("nan") for r in results]
        hi = [r["ci"][name][1] if r["ci"] else float("nan") for r in results]
        buf = io.StringIO()
        buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["q", "estimate", "ci_lo", "ci_hi"])
        for row in zip(qs, est, lo, hi):
            w.writerow([repr(float(v)) for v in row])
        out.write(outdir / f"curve_{name}.csv", buf.getvalue())
        band = (lo, hi) if args.B > 0 else (None, None)
        out.write(outdir / f"curve_{name}.svg", curve_svg(qs, est, *band, title=name, ylabel=name))
    print(f"wrote {2 * len(table.coefficient_names)} files to {outdir}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrtd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("input", help=f"counting-process CSV, '-' for stdin, or {BUILTIN}")
            sp.add_argument("--instrument", choices=("columns", "at-y"), default="columns",
                            help="z_* columns, or covariate values at follow-up")
        sp.add_argument("--a", type=_smoothing, default=20.0, help="smoothing constant or 'exact'")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--starts", type=int, default=4, help="random solver starts per fit")

    def results(sp):
        sp.add_argument("--json", help="write results JSON here")
        sp.add_argument("--format", choices=("table", "json"), default="table")

    sp = sub.add_parser("fit", help="estimate coefficients")
    common(sp)
    sp.add_argument("--q", default="0.5", help="quantile level(s), comma separated")
    results(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bootstrap", help="estimate with weighted-bootstrap SE and CI")
    common(sp)
    sp.add_argument("--q", default="0.5")
    sp.add_argument("--B", type=int, default=500)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--workers", type=int, default=None)
    results(sp)
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("simulate", help="write a simulated dataset and its truth sidecar")
    sp.add_argument("--scenario", choices=("fixed", "random"), default="fixed")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--censoring", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.add_argument("--truth", help="sidecar path (default: <output>.truth.csv)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("study", help="Monte-Carlo study over scenarios")
    common(sp, data=False)
    sp.add_argument("--scenario", choices=("fixed", "random"), action="append")
    sp.add_argument("--n", default="200", help="sample size(s), comma separated")
    sp.add_argument("--censoring", default="0.2", help="censoring target(s), comma separated")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--B", type=int, default=0)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("km", help="Kaplan-Meier estimate of the censoring distribution")
    sp.add_argument("input")
    sp.add_argument("--instrument", choices=("columns", "at-y"), default="at-y")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_km)

    sp = sub.add_parser("curves", help="coefficient curves over a grid of q")
    common(sp)
    sp.add_argument("--q-grid", default=DEFAULT_GRID, help="lo:hi:step or comma list")
    sp.add_argument("--B", type=int, default=200)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "scenario", None) is None and args.command == "study":
        args.scenario = ["fixed"]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = _Outputs()
    try:
        args.func(args, out)
    except (QRTDError, ValueError, OSError, KeyError) as err:
        out.rollback()
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"qrtd {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except BaseException:
        out.rollback()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
