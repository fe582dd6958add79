"""Command-line entry point: ``mrpkit {estimate,simulate,synthpop,diagnose}``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical or
convergence failure. Every run writes ``provenance.txt`` next to its
outputs with the full configuration, seed, library versions and input
digests.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .cells import CellTable, CovariateSchema, Grouping, build_cell_table, stack_samples
from .design import (
    fit_inclusion_model,
    greg_mean,
    ipw_mean,
    jackknife_se,
    poststratified_mean,
    raking_mean,
    unweighted_mean,
    dr_mean,
    with_jackknife,
)
from .diagnostics import analytic_bias, conditional_variances, shrinkage_delta, stochastic_bias
from .errors import DataError, NumericalError
from .hb import McmcConfig
from .io import (
    covariate_columns,
    frame_to_cell_table,
    frame_to_microdata,
    infer_schema,
    read_frame,
    read_key_values,
    read_margins,
    read_population_spec,
    sha256,
    write_cell_tables,
    write_draws,
    write_estimates,
    write_frame,
    write_provenance,
)
from .mrp import mrp_fit
from .sim import METHODS, SimConfig, run_study
from .wfpbb import estimate_pop_cells, synthetic_populations

log = logging.getLogger("mrpkit")

CLOSED_FORM = ("UnW", "PS", "IPW", "GREG", "Raking", "DR")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrpkit", description="MRP and weighting estimators for nonprobability samples.")
    p.add_argument("--version", action="version", version=f"mrpkit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    e = sub.add_parser("estimate", help="estimate population and subgroup means")
    e.add_argument("--sample", required=True, help="nonprobability sample microdata CSV (with outcome)")
    e.add_argument("--population", help="population microdata or cell-count CSV")
    e.add_argument("--reference", help="reference sample microdata CSV (weights optional)")
    e.add_argument("--margins", help="margin totals CSV (variable, level, total)")
    e.add_argument("--variant", choices=["S", "P", "R", "INT"], help="MRP variant")
    e.add_argument("--method", choices=[*CLOSED_FORM, "MRP"], help="estimator (MRP when --variant is given)")
    e.add_argument("--outcome-model", default="", help='formula, e.g. "age + race + age*edu + psi + (1|psi)"')
    e.add_argument("--inclusion-model", default="", help="inclusion-model formula (default: main effects)")
    e.add_argument("--variables", help="comma-separated covariate columns (default: all non-reserved columns)")
    e.add_argument("--groups", default="", help="comma-separated variables for subgroup estimates")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--chains", type=int, default=2)
    e.add_argument("--iterations", type=int, default=2000)
    e.add_argument("--warmup", type=int, default=1000)
    e.add_argument("--L", type=int, default=100, help="synthetic populations for MRP-R")
    e.add_argument("--N", type=int, help="population size for MRP-R (default: population total or weight sum)")
    e.add_argument("--jackknife-groups", type=int, default=20)
    e.add_argument("--dump-draws", action="store_true", help="also write draws.csv")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--out-dir", default=".")

    s = sub.add_parser("simulate", help="run the repeated-sampling study")
    s.add_argument("--config", help="key = value settings file")
    s.add_argument("--scenario", choices=["correct", "incorrect"])
    s.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    s.add_argument("--reps", type=int, help="replications for every method")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out-dir", default=".")

    y = sub.add_parser("synthpop", help="WFPBB synthetic population cell counts")
    y.add_argument("--reference", required=True, help="weighted reference microdata CSV")
    y.add_argument("--N", type=int, required=True)
    y.add_argument("--L", type=int, default=100)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--urn", choices=["dirichlet", "sequential"], default="dirichlet")
    y.add_argument("--variables")
    y.add_argument("--threads", type=int, default=1)
    y.add_argument("--out-dir", default=".")

    d = sub.add_parser("diagnose", help="analytic bias and variance from a population description")
    d.add_argument("--spec", required=True, help="CSV with cell columns and N, psi, meanR, meanM, sd")
    d.add_argument("--sigma-theta", type=float, required=True, help="between-cell sd")
    d.add_argument("--n", type=float, help="expected sample size (default: expected respondents)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--threads", type=int, default=1)
    d.add_argument("--out-dir", default=".")
    return p


def _versions() -> dict:
    return {
        "mrpkit": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def _provenance(out: Path, args, inputs: dict, extra: dict | None = None) -> None:
    entries = {"command": args.command}
    for k, v in sorted(vars(args).items()):
        if k != "command":
            entries[f"arg.{k}"] = v
    for k, v in (extra or {}).items():
        entries[k] = v
    for k, v in _versions().items():
        entries[f"version.{k}"] = v
    for name, path in inputs.items():
        if path:
            entries[f"input.{name}"] = f"{path} sha256={sha256(path)}"
    write_provenance(out / "provenance.txt", entries)


def _split(text: str | None) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def _cmd_estimate(args) -> None:
    method = "MRP" if args.variant else args.method
    if method is None:
        raise UsageError("estimate: give --method or --variant")
    if method == "MRP" and not args.variant:
        raise UsageError("estimate: --method MRP needs --variant")
    variables = _split(args.variables) or None
    sample_df = read_frame(args.sample)
    pop_df = read_frame(args.population) if args.population else None
    ref_df = read_frame(args.reference) if args.reference else None
    frames = [f for f in (sample_df, pop_df, ref_df) if f is not None]
    if variables is None:
        variables = covariate_columns(sample_df)
    schema = infer_schema(frames, variables)
    sample = frame_to_microdata(sample_df, schema)
    if sample.outcome is None:
        raise DataError(f"{args.sample}: sample needs an 'outcome' column")
    population = None
    if pop_df is not None:
        if "count" in pop_df:
            population = frame_to_cell_table(pop_df, schema, "population")
        else:
            population = build_cell_table(frame_to_microdata(pop_df, schema).with_(outcome=None), role="population")
    reference = frame_to_microdata(ref_df, schema) if ref_df is not None else None
    groups = [Grouping.by_variable(schema, g) for g in _split(args.groups)] or [Grouping.overall(schema)]
    main = " + ".join(schema.names)
    incl_terms = args.inclusion_model or main
    out = Path(args.out_dir)
    extra = {}

    def need(obj, flag):
        if obj is None:
            raise DataError(f"{method} needs {flag}")
        return obj

    def stack(s):
        return stack_samples(s, need(reference, "--reference"))

    def closed(s, grouping):
        if method == "UnW":
            return unweighted_mean(build_cell_table(s), grouping)
        if method == "PS":
            return poststratified_mean(build_cell_table(s), need(population, "--population"), grouping)
        if method == "IPW":
            return ipw_mean(s, fit_inclusion_model(stack(s), incl_terms, scale="odds"), grouping)
        if method == "GREG":
            return greg_mean(s, _margins(), grouping)
        if method == "Raking":
            return raking_mean(s, _margins(), grouping)
        if method == "DR":
            fit = fit_inclusion_model(stack(s), incl_terms, scale="odds")
            return dr_mean(s, fit, args.outcome_model or main, need(population, "--population"), grouping)
        raise AssertionError(method)

    def _margins():
        if args.margins:
            return read_margins(args.margins, schema)
        pop = need(population, "--margins or --population")
        keys = schema.keys(pop.cells)
        return {v: np.bincount(keys[:, j], weights=pop.counts, minlength=len(schema.levels(v))) for j, v in enumerate(schema.names)}

    if method == "MRP":
        cfg = McmcConfig(chains=args.chains, iterations=args.iterations, warmup=args.warmup, seed=args.seed)
        res = mrp_fit(args.variant, sample, population, reference, args.outcome_model or main, cfg, groups, L=args.L, N=args.N)
        summaries = res.summaries
        extra = {
            "mrp.max_rhat": f"{res.max_rhat:.6f}",
            "mrp.flagged": res.flagged,
            "mrp.flag_reason": res.flag_reason or "none",
            "mrp.excluded_replications": int(res.flagged),
        }
        if args.dump_draws:
            write_draws(res.draws, out / "draws.csv")
    else:
        summaries = []
        seen = set()
        for grouping in groups:
            part = closed(sample, grouping)
            if method in ("IPW", "GREG", "Raking", "DR"):
                jk = jackknife_se(lambda s, g=grouping: closed(s, g), sample, args.jackknife_groups, rng_seed=args.seed)
                part = with_jackknife(part, jk)
            for sm in part:
                if sm.group not in seen:
                    seen.add(sm.group)
                    summaries.append(sm)
    write_estimates(summaries, out / "estimates.csv")
    _provenance(out, args, {"sample": args.sample, "population": args.population, "reference": args.reference, "margins": args.margins}, extra)


def _cmd_simulate(args) -> None:
    values = read_key_values(args.config) if args.config else {}
    if args.scenario:
        values["scenario"] = args.scenario
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.reps is not None:
        values["replications"] = values["replications_closed_form"] = str(args.reps)
    try:
        cfg = SimConfig.from_mapping(values)
    except ValueError as exc:
        raise UsageError(f"simulate: {exc}") from exc
    methods = _split(args.methods) or list(METHODS)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"simulate: unknown methods {bad}")
    report = run_study(cfg, methods, threads=args.threads)
    out = Path(args.out_dir)
    write_frame(report.table, out / "report.csv")
    write_frame(report.log.drop(columns=["seconds"]), out / "replications.csv")
    extra = {f"config.{k}": v for k, v in asdict(cfg).items()}
    extra["truth"] = ", ".join(f"{k}={v:.17g}" for k, v in report.truth.items())
    extra["note"] = report.header
    _provenance(out, args, {"config": args.config}, extra)


def _cmd_synthpop(args) -> None:
    df = read_frame(args.reference)
    variables = _split(args.variables) or None
    schema = infer_schema([df], variables)
    ref = frame_to_microdata(df, schema)
    weights = ref.weight if ref.weight is not None else np.full(len(ref), args.N / len(ref))
    rng = np.random.default_rng(args.seed)
    pops = synthetic_populations(weights, args.N, args.L, rng, method=args.urn)
    tables = estimate_pop_cells(pops, ref)
    out = Path(args.out_dir)
    write_cell_tables(tables, out / "synthetic_cells.csv")
    clamped = sum(p.clamped for p in pops)
    _provenance(out, args, {"reference": args.reference}, {"wfpbb.clamped_units": clamped})


def _cmd_diagnose(args) -> None:
    spec = read_population_spec(args.spec)
    bias = analytic_bias(spec, args.sigma_theta, n=args.n)
    approx = stochastic_bias(spec)
    nj = spec.expected_counts(args.n)
    J = spec.N.size
    sample = CellTable(_dummy_schema(J), np.arange(J), nj, spec.mean_r, spec.sd**2)
    population = CellTable(_dummy_schema(J), np.arange(J), spec.N, role="population")
    var = conditional_variances(sample, population, shrinkage_delta(spec.sd, nj, args.sigma_theta))
    rows = [(k, v, "exact") for k, v in asdict(bias).items()]
    rows += [(k, v, "exact") for k, v in asdict(var).items()]
    rows += [(f"{k}_stochastic", v, "approximate") for k, v in asdict(approx).items() if k != "approximate"]
    out = Path(args.out_dir)
    write_frame(pd.DataFrame(rows, columns=["quantity", "value", "kind"]), out / "diagnostics.csv")
    _provenance(out, args, {"spec": args.spec})


def _dummy_schema(J: int) -> CovariateSchema:
    return CovariateSchema([("cell", [str(j) for j in range(J)])])


COMMANDS = {"estimate": _cmd_estimate, "simulate": _cmd_simulate, "synthpop": _cmd_synthpop, "diagnose": _cmd_diagnose}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("mrpkit: a subcommand is required (estimate, simulate, synthpop, diagnose)")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
