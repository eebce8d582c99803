"""Command-line entry point: ``sdlatency <subcommand> ...``.

Exit status is 0 on success, 1 on invalid input (parse, validation,
stability errors) and 2 when ``--strict`` is set and a fit does not converge.
Results go to standard output, warnings and diagnostics to standard error.
"""
from __future__ import annotations

import argparse
import sys
import warnings

import numpy as np

from . import __version__
from . import io as sio
from .core import SweepDataset, predict_latency
from .errors import DegenerateError, NonConvergenceError, SdLatencyError
from .fit import fit_basic, fit_moe, fit_moe_spec, fit_spec
from .moe import MoeRouting, predict_moe_latency, predict_moe_sd_latency
from .scaling import Predictor, effective_token_count, fit_scaling_trend, leave_n_out
from .simulator import run_sim, run_sweep
from .speculative import (SpecParams, cost_ratios, effective_coefficients, latency_by_k,
                          optimal_draft_length, predict_sd_latency)

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


class CliError(Exception):
    """User-facing error that maps to exit status 1."""


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {category.__name__}: {message}", file=sys.stderr)


def _moe(text):
    try:
        m, total = (int(v) for v in text.split(","))
        return MoeRouting(m, total)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected m,M with 1 <= m <= M: {exc}") from None


def _grid(text):
    try:
        start, stop, n = text.split(":")
        start, stop, n = float(start), float(stop), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError("expected start:stop:n") from None
    if n < 1 or start < 0 or stop < start:
        raise argparse.ArgumentTypeError("need 0 <= start <= stop and n >= 1")
    return np.linspace(start, stop, n)


def _spec_flags(args, doc):
    """(SpecParams, g) for an eq3/eq5 document from --alpha/--k/--g."""
    if args.k is None:
        raise CliError(f"{doc.model} coefficients need --k (and --alpha when k > 0)")
    if args.k > 0 and args.alpha is None:
        raise CliError("--alpha is required when --k > 0")
    g = args.g if args.g is not None else doc.g
    if g is None:
        raise CliError("--g is required: the coefficient document records no decode length")
    return SpecParams(args.alpha if args.alpha is not None else 0.0, args.k), g


def _no_spec_flags(args, doc):
    if args.k not in (None, 0) or args.alpha is not None:
        raise CliError(f"{doc.model} coefficients describe a single condition; "
                       "--alpha/--k do not apply")


def _serving(doc, args, role):
    """Collapse a document to the single-condition (c1, c2) it implies."""
    if doc.model == "eq1":
        _no_spec_flags(args, doc)
        return doc.coefficients()
    if doc.model == "eq3":
        spec, g = _spec_flags(args, doc)
        return effective_coefficients(doc.coefficients(), spec, g)
    raise CliError(f"{role} coefficients must be eq1 or eq3, got {doc.model}")


# -- subcommands ------------------------------------------------------------

def cmd_fit(args):
    datasets = sio.read_sweep_csv(args.input)
    if not datasets:
        raise CliError(f"{args.input}: no data rows")
    single = args.model in ("eq1", "eq4")
    if single and len(datasets) != 1:
        raise CliError(f"{args.model} fits one condition but {args.input} holds {len(datasets)}")
    if args.model in ("eq4", "eq5") and args.moe is None:
        raise CliError(f"{args.model} needs --moe m,M")
    opts = dict(column=args.column, relative=args.relative,
                include_saturated=args.include_saturated, strict=args.strict)
    if args.model == "eq1":
        res = fit_basic(datasets[0], **opts)
    elif args.model == "eq3":
        res = fit_spec(datasets, **opts)
    elif args.model == "eq4":
        res = fit_moe(datasets[0], args.moe, **opts)
    else:
        res = fit_moe_spec(datasets, args.moe, **opts)
    if not res.converged:
        warnings.warn(f"fit stopped after {res.iterations} iterations without converging",
                      RuntimeWarning)
    doc = sio.document_from_fit(res, inputs=[args.input], seed=args.seed)
    if args.output:
        sio.write_coefficients(doc, args.output)
    else:
        sys.stdout.write(sio.document_to_json(doc))
    r2 = "undefined" if res.r2 is None else f"{res.r2:.6f}"
    print(f"model={res.model} r2={r2} rmse={res.rmse:.6g} n_points={res.n_points} "
          f"converged={'true' if res.converged else 'false'}")
    for name, value in res.params.items():
        print(f"  {name} = {value:.10g}")


def cmd_predict(args):
    doc = sio.read_coefficients(args.coeffs)
    if doc.model in ("eq1", "eq4"):
        _no_spec_flags(args, doc)
    if doc.model == "eq1":
        lat = predict_latency(doc.coefficients(), args.rps)
    elif doc.model == "eq3":
        spec, g = _spec_flags(args, doc)
        lat = predict_sd_latency(doc.coefficients(), spec, g, args.rps)
    elif doc.model == "eq4":
        lat = predict_moe_latency(doc.coefficients(), doc.routing, args.rps)
    else:
        spec, g = _spec_flags(args, doc)
        lat = predict_moe_sd_latency(doc.coefficients(), doc.routing, spec, g, args.rps)
    print(f"{lat:#.6g}")


def _load_sensitivity(dense, sd):
    try:
        c2r = cost_ratios(dense, sd).c2r
    except DegenerateError:
        return "load sensitivity undefined: dense c2 is zero"
    if abs(c2r - 1.0) <= 1e-12:
        trend = "speedup is independent of load"
    elif c2r < 1.0:
        trend = "speedup increases with load"
    else:
        trend = "speedup decreases with load"
    return f"{trend} (C2,R = {c2r:.6g})"


def cmd_speedup(args):
    dense_doc = sio.read_coefficients(args.dense)
    sd_doc = sio.read_coefficients(args.sd)
    if dense_doc.model == "eq3":
        # the dense system of a joint fit is its k = 0 member
        g = args.g if args.g is not None else dense_doc.g
        if g is None:
            raise CliError("--g is required to evaluate eq3 coefficients")
        dense = dense_doc.coefficients().dense(g)
    elif dense_doc.model == "eq1":
        dense = dense_doc.coefficients()
    else:
        raise CliError(f"dense coefficients must be eq1 or eq3, got {dense_doc.model}")
    sd = _serving(sd_doc, args, "sd")
    report = sio.emit_report("speedup_curve", dense=dense, sd=sd, rps=args.rps_grid)
    skipped = len(args.rps_grid) - len(report.rows)
    if skipped:
        print(f"warning: {skipped} grid rates beyond saturation were skipped", file=sys.stderr)
    if args.out:
        sio.write_report(report, args.out)
    else:
        sys.stdout.write(report.to_csv())
    print(f"# {_load_sensitivity(dense, sd)}")


def cmd_optimize_k(args):
    doc = sio.read_coefficients(args.coeffs)
    if doc.model != "eq3":
        raise CliError(f"optimize-k needs eq3 coefficients, got {doc.model}")
    g = args.g if args.g is not None else doc.g
    if g is None:
        raise CliError("--g is required: the coefficient document records no decode length")
    costs = doc.coefficients()
    k = optimal_draft_length(costs, args.alpha, g, args.rps, args.k_max)
    lat = latency_by_k(costs, args.alpha, g, args.rps, args.k_max)
    label = "0 (speculation off)" if k == 0 else str(k)
    print(f"k* = {label}")
    print(f"predicted latency = {lat[k]:#.6g} s")
    if args.verbose:
        for kk, v in lat.items():
            print(f"  k={kk} latency={v:#.6g}", file=sys.stderr)


def _run_label(config):
    if config.draft_k == 0:
        return "dense"
    return f"sd alpha={config.spec.alpha:g} k={config.spec.k}"


def _little_line(label, result):
    rate = result.achieved_rps
    expected = rate * result.mean_latency
    mode = "closed-loop" if result.closed_loop else f"offered={result.offered_rps:.6g}"
    flag = " SATURATED" if result.saturated else ""
    return (f"{label} {mode} rps={rate:.6g} latency={result.mean_latency:.6g}s "
            f"concurrency={result.time_avg_concurrency:.6g} rps*latency={expected:.6g} "
            f"little_err={result.little_error:.2%}{flag}")


def cmd_simulate(args):
    cfg_file = sio.read_sim_config(args.config)
    if not args.closed_loop and args.rps is None:
        raise CliError("--rps is required unless --closed-loop is given")
    datasets = []
    for config in cfg_file.configs():
        res = run_sim(config, args.rps, closed_loop=args.closed_loop)
        print(_little_line(_run_label(config), res))
        datasets.append(SweepDataset(config.workload, (res.load_point(),)))
    sio.write_sweep_csv(datasets, args.out)


def cmd_sweep(args):
    cfg_file = sio.read_sim_config(args.config)
    datasets = []
    for config in cfg_file.configs():
        ds, runs, ceiling = run_sweep(config, workers=args.workers, return_runs=True)
        label = _run_label(config)
        print(f"{label} stable ceiling ~ {ceiling:.6g} rps")
        for r in runs:
            print(_little_line(label, r))
        datasets.append(ds)
    sio.write_sweep_csv(datasets, args.out)


def cmd_scaling(args):
    table = sio.read_table(args.coeff_table)
    pred = args.predictor
    if pred in table:
        x = table[pred]
    elif pred == Predictor.EFFECTIVE_TOKENS.value and {"prefill_tokens", "decode_tokens"} <= set(table):
        x = [effective_token_count(p, d)
             for p, d in zip(table["prefill_tokens"], table["decode_tokens"])]
    else:
        raise CliError(f"{args.coeff_table}: no {pred!r} column")
    if any(isinstance(v, str) for v in x):
        raise CliError(f"predictor column {pred!r} is not numeric")
    skip = {p.value for p in Predictor} | {"decode_tokens"}
    names = args.coefficient or [h for h, v in table.items()
                                 if h not in skip and v and not isinstance(v[0], str)]
    if not names:
        raise CliError("no coefficient columns found")
    rows = []
    for name in names:
        if name not in table or any(isinstance(v, str) for v in table[name]):
            raise CliError(f"no numeric coefficient column {name!r}")
        pts = list(zip(x, table[name]))
        trend = fit_scaling_trend(pts, pred)
        print(f"{name}: slope={trend.slope:.6g} intercept={trend.intercept:.6g} "
              f"r2={trend.r2:.6f}")
        for n in args.leave_n or ():
            s = leave_n_out(pts, n, pred, pooling=args.pooling, seed=args.seed)
            print(f"{name}: leave-{n}-out held-out r2={s.headline:.6f} "
                  f"(folds={s.folds}, fold min={s.fold_r2_min:.6f}, full r2={s.full_r2:.6f})")
        rows.extend(sio.emit_report("scaling", points=pts, trend=trend).rows)
    if args.out:
        sio.write_report(sio.Report("scaling", tuple(rows)), args.out)


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdlatency", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    f = sub.add_parser("fit", help="fit a latency model to a sweep CSV")
    f.add_argument("--input", required=True, help="sweep CSV")
    f.add_argument("--model", required=True, choices=sorted(sio.MODEL_PARAMS),
                   help="eq1: single condition; eq3: joint (alpha, k) grid; "
                        "eq4/eq5: the same with MoE expert coverage")
    f.add_argument("--column", default="mean", choices=("mean", "p95", "p99"),
                   help="latency statistic to fit (default: mean)")
    f.add_argument("--moe", type=_moe, metavar="m,M",
                   help="active and total experts per token (eq4/eq5)")
    f.add_argument("--output", help="coefficient document to write (default: stdout)")
    f.add_argument("--strict", action="store_true", help="exit 2 if the fit does not converge")
    f.add_argument("--relative", action="store_true", help="minimise relative residuals")
    f.add_argument("--include-saturated", action="store_true",
                   help="also fit points flagged as saturated")
    f.add_argument("--seed", type=int, help="seed recorded in the document's provenance")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predicted mean latency at one request rate")
    pr.add_argument("--coeffs", required=True, help="coefficient document")
    pr.add_argument("--rps", required=True, type=float, help="request rate")
    pr.add_argument("--alpha", type=float, help="acceptance rate (eq3/eq5)")
    pr.add_argument("--k", type=int, help="draft length, 0 = speculation off (eq3/eq5)")
    pr.add_argument("--g", type=int, help="decode length, defaults to the document's")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("speedup", help="dense-to-SD speedup over a range of rates")
    s.add_argument("--dense", required=True, help="dense coefficient document")
    s.add_argument("--sd", required=True, help="SD coefficient document")
    s.add_argument("--rps-grid", required=True, type=_grid, metavar="START:STOP:N",
                   help="N evenly spaced rates from START to STOP inclusive")
    s.add_argument("--alpha", type=float, help="acceptance rate when --sd is eq3")
    s.add_argument("--k", type=int, help="draft length when --sd is eq3")
    s.add_argument("--g", type=int, help="decode length when a document is eq3")
    s.add_argument("--out", help="speedup_curve CSV to write (default: stdout)")
    s.set_defaults(func=cmd_speedup)

    o = sub.add_parser("optimize-k", help="latency-minimising draft length")
    o.add_argument("--coeffs", required=True, help="eq3 coefficient document")
    o.add_argument("--alpha", required=True, type=float, help="acceptance rate")
    o.add_argument("--g", type=int, help="decode length, defaults to the document's")
    o.add_argument("--rps", required=True, type=float, help="request rate")
    o.add_argument("--k-max", type=int, default=10, help="largest draft length tried (default 10)")
    o.add_argument("--verbose", action="store_true", help="list every k's latency on stderr")
    o.set_defaults(func=cmd_optimize_k)

    sm = sub.add_parser("simulate", help="simulate one request rate")
    sm.add_argument("--config", required=True, help="simulator config (JSON)")
    sm.add_argument("--rps", type=float, help="offered request rate")
    sm.add_argument("--closed-loop", action="store_true",
                    help="one request at a time instead of a constant rate")
    sm.add_argument("--out", required=True, help="sweep CSV to write")
    sm.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="baseline, ceiling search and eight constant-rate runs")
    sw.add_argument("--config", required=True, help="simulator config (JSON)")
    sw.add_argument("--out", required=True, help="sweep CSV to write")
    sw.add_argument("--workers", type=int, default=1, help="parallel runs (results unchanged)")
    sw.set_defaults(func=cmd_sweep)

    sc = sub.add_parser("scaling", help="linear trend of coefficients across configurations")
    sc.add_argument("--coeff-table", required=True, help="CSV of per-configuration coefficients")
    sc.add_argument("--predictor", required=True, choices=[p.value for p in Predictor])
    sc.add_argument("--coefficient", action="append",
                    help="coefficient column to trend (repeatable; default: all numeric)")
    sc.add_argument("--leave-n", type=int, action="append", metavar="N",
                    help="report held-out r2 with N configurations left out (repeatable)")
    sc.add_argument("--pooling", choices=("pooled", "per_fold"), default="pooled",
                    help="score held-out points pooled (default) or fold by fold")
    sc.add_argument("--seed", type=int, default=0, help="subset sampling seed for large tables")
    sc.add_argument("--out", help="scaling report CSV to write")
    sc.set_defaults(func=cmd_scaling)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.showwarning = _show_warning
        try:
            args.func(args)
        except NonConvergenceError as exc:
            _err(f"fit did not converge: {exc}")
            return EXIT_NONCONVERGED
        except FileNotFoundError as exc:
            _err(f"no such file: {exc.filename}")
            return EXIT_INPUT
        except (CliError, SdLatencyError, ValueError, OSError) as exc:
            _err(str(exc))
            return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
