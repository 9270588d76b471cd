"""Command line entry point.

Exit codes: 0 ok, 2 invalid input, 3 solver failure, 4 infeasible market.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .bilevel import BilevelError, StrategicConfig, solve_strategic, sweep_penalty
from .experiment import (ExperimentPlan, Pipeline, PlanError, clearing_csv, csv_text, kilo,
                         offers_from_json, offers_to_json, resolve_case, run_plan, strategic_rows,
                         strategic_summary, UC_HEADER, write_json)
from .grid import GridError
from .io import CaseError, write_atomic
from .market import InfeasibleMarket, MarketConfig, MarketError, identify_critical_buses
from .solver import SolverError, SolverOptions
from .surrogate import DegenerateFit, SccCoefficients

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 2, 3, 4


class Ctx:
    def __init__(self, seed, out, options):
        self.seed = seed
        self.out = Path(out)
        self.options = options


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library errors to exit codes."""
    def wrapper(*args, **kw):
        try:
            return fn(*args, **kw)
        except InfeasibleMarket as exc:
            _fail(EXIT_INFEASIBLE, str(exc))
        except SolverError as exc:
            _fail(EXIT_SOLVER, str(exc))
        except (CaseError, PlanError, MarketError, GridError, DegenerateFit, BilevelError,
                ValueError, KeyError, FileNotFoundError) as exc:
            _fail(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load_coefficients(path, i_lim=None) -> SccCoefficients:
    doc = json.loads(Path(path).read_text())
    if "levels" in doc:
        levels = {float(e["i_lim"]): e["coefficients"] for e in doc["levels"]}
        key = float(i_lim) if i_lim is not None else max(levels)
        if key not in levels:
            raise PlanError(f"{path} has no coefficients for i_lim={key}; has {sorted(levels)}")
        return SccCoefficients.from_dict(levels[key])
    return SccCoefficients.from_dict(doc)


def _load_offers(path) -> dict:
    return offers_from_json(json.loads(Path(path).read_text()))


def _buses(ctx: Ctx, case, coefficients, i_lim, buses) -> tuple[int, ...]:
    if buses:
        return tuple(int(b) for b in buses.split(","))
    critical, _, _ = identify_critical_buses(case, MarketConfig(i_lim=i_lim, options=ctx.options))
    click.echo(f"critical buses: {list(critical)}")
    return critical


def _pipeline(ctx: Ctx, case_spec, horizon, **plan_kw) -> Pipeline:
    plan = ExperimentPlan(case=str(case_spec), out_dir=str(ctx.out), seed=ctx.seed,
                          horizon=horizon, options=ctx.options, **plan_kw)
    return Pipeline(plan)


@click.group()
@click.option("--seed", default=0, show_default=True, help="Random seed for sampling.")
@click.option("--out", default="results", show_default=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--time-limit", default=None, type=float, help="Solver time limit per solve (s).")
@click.option("--mip-gap", default=1e-4, show_default=True, type=float,
              help="Relative MIP gap.")
@click.option("--threads", default=1, show_default=True, type=int)
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, seed, out, time_limit, mip_gap, threads, verbose):
    """SCC ancillary-service market experiments.

    CASE arguments accept a case JSON path or a built-in name (ieee30, toy3).
    """
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    opts = SolverOptions(mip_rel_gap=mip_gap, threads=threads, seed=seed,
                         time_limit=float("inf") if time_limit is None else time_limit)
    ctx.obj = Ctx(seed, out, opts)


@main.command("train-scc")
@click.argument("case")
@click.option("--i-lim", "limits", multiple=True, type=float, default=(3.0, 4.0, 5.0),
              show_default=True)
@click.option("--samples", default=2000, show_default=True)
@click.option("--policy", default="reachable", show_default=True,
              type=click.Choice(["reachable", "uniform", "anchors-only"]))
@click.option("--margin", default=0.05, show_default=True)
@click.option("--horizon", default=None, type=int)
@click.pass_obj
@_guard
def train_scc(ctx, case, limits, samples, policy, margin, horizon):
    """Train linear SCC constraints; writes coefficients.json."""
    pipe = _pipeline(ctx, case, horizon, train_limits=tuple(limits), n_train=samples,
                     policy=policy, margin=margin, i_lim=limits[-1])
    levels = pipe.train()
    for e in levels:
        click.echo(f"i_lim={e['i_lim']:g}: trained in {e['train_seconds']:.1f} s")
    click.echo(f"wrote {pipe.out / 'coefficients.json'}")


@main.command("validate-scc")
@click.argument("case")
@click.option("--coefficients", "coef_path", required=True, type=click.Path(exists=True))
@click.option("--samples", default=500, show_default=True)
@click.option("--policy", default="reachable", show_default=True,
              type=click.Choice(["reachable", "uniform", "anchors-only"]))
@click.option("--horizon", default=None, type=int)
@click.pass_obj
@_guard
def validate_scc(ctx, case, coef_path, samples, policy, horizon):
    """Type-I/II error table on fresh samples; writes error_report.csv."""
    doc = json.loads(Path(coef_path).read_text())
    levels = doc.get("levels") or [{"i_lim": max(doc["i_lim"].values()), "coefficients": doc}]
    limits = tuple(float(e["i_lim"]) for e in levels)
    pipe = _pipeline(ctx, case, horizon, train_limits=limits, n_validate=samples, policy=policy)
    pipe.coefficients = {float(e["i_lim"]): SccCoefficients.from_dict(e["coefficients"])
                         for e in levels}
    for row in pipe.validate():
        click.echo("i_lim={:g} min_scc={:.3f} type1={} type2={}".format(*row[:3], row[4]))
    click.echo(f"wrote {pipe.out / 'error_report.csv'}")


@main.command("clear")
@click.argument("case")
@click.option("--coefficients", "coef_path", type=click.Path(exists=True))
@click.option("--i-lim", default=5.0, show_default=True)
@click.option("--buses", default=None, help="Comma-separated SCC buses (default: critical).")
@click.option("--offers", "offers_path", type=click.Path(exists=True))
@click.option("--energy-only", is_flag=True)
@click.option("--horizon", default=None, type=int)
@click.pass_obj
@_guard
def clear(ctx, case, coef_path, i_lim, buses, offers_path, energy_only, horizon):
    """Competitive clearing; writes clearing.csv."""
    from .market import solve_competitive

    case_ = resolve_case(case)
    if horizon:
        case_ = case_.truncated(horizon)
    coef = None if energy_only else _load_coefficients(coef_path, i_lim) if coef_path else None
    if coef is None and not energy_only:
        raise PlanError("--coefficients is required unless --energy-only")
    cfg = MarketConfig(i_lim=i_lim, include_scc=not energy_only, options=ctx.options)
    if not energy_only:
        cfg = replace(cfg, scc_buses=_buses(ctx, case_, coef, i_lim, buses))
        if offers_path:
            cfg = replace(cfg, scc_offers=_load_offers(offers_path))
    res = solve_competitive(case_, cfg, coef)
    write_atomic(ctx.out / "clearing.csv", clearing_csv(case_, res))
    click.echo(f"cost {kilo(res.cost):.3f} kEUR/day; wrote {ctx.out / 'clearing.csv'}")


@main.command("price-scc")
@click.argument("case")
@click.option("--coefficients", "coef_path", required=True, type=click.Path(exists=True))
@click.option("--i-lim", default=5.0, show_default=True)
@click.option("--buses", default=None, help="Comma-separated SCC buses (default: critical).")
@click.option("--horizon", default=None, type=int)
@click.pass_obj
@_guard
def price_scc(ctx, case, coef_path, i_lim, buses, horizon):
    """Marginal-unit SCC offers; writes offers.json and offers.csv."""
    pipe = _pipeline(ctx, case, horizon, i_lim=i_lim)
    coef = _load_coefficients(coef_path, i_lim)
    pipe.coefficients[float(i_lim)] = coef
    pipe.critical = _buses(ctx, pipe.case, coef, i_lim, buses)
    report = pipe.price()
    nonzero = sorted(k for k, v in report.offers.items() if np.any(v))
    click.echo(f"nonzero offers: {nonzero}; flagged: {report.flagged}")


def _strategic_setup(ctx, case, coef_path, offers_path, i_lim, buses, horizon):
    case_ = resolve_case(case)
    if horizon:
        case_ = case_.truncated(horizon)
    coef = _load_coefficients(coef_path, i_lim)
    offers = _load_offers(offers_path)
    if horizon:
        offers = {k: v[:horizon] for k, v in offers.items()}
    if buses:
        bus_t = tuple(int(b) for b in buses.split(","))
    else:
        bus_t = tuple(sorted({b for (_, b) in offers}))
    cfg = MarketConfig(i_lim=i_lim, scc_buses=bus_t, scc_offers=offers, options=ctx.options)
    return case_, coef, cfg


_strategic_options = [
    click.argument("case"),
    click.option("--coefficients", "coef_path", required=True, type=click.Path(exists=True)),
    click.option("--offers", "offers_path", required=True, type=click.Path(exists=True)),
    click.option("--strategic", required=True, help="Comma-separated strategic SG ids."),
    click.option("--i-lim", default=5.0, show_default=True),
    click.option("--buses", default=None, help="SCC buses (default: buses in the offers file)."),
    click.option("--cap-m", default=2.0, show_default=True, help="Energy multiplier cap."),
    click.option("--cap-scc", default=2.0, show_default=True, help="SCC multiplier cap."),
    click.option("--horizon", default=None, type=int),
]


def _with(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


@main.command("solve-strategic")
@_with(_strategic_options)
@click.option("--penalty", "-W", default=10.0, show_default=True, help="Duality-gap penalty W.")
@click.pass_obj
@_guard
def solve_strategic_cmd(ctx, case, coef_path, offers_path, strategic, i_lim, buses, cap_m,
                        cap_scc, horizon, penalty):
    """Strategic bidding of one firm; writes strategic_summary.json and uc_status.csv."""
    case_, coef, cfg = _strategic_setup(ctx, case, coef_path, offers_path, i_lim, buses, horizon)
    ids = tuple(strategic.split(","))
    scfg = StrategicConfig(strategic=ids, beta_m_max=cap_m, beta_scc_max=cap_scc, penalty=penalty)
    sol = solve_strategic(case_, cfg, coef, scfg)
    name = "+".join(ids)
    summary = {"schema_version": 1, "units": {"money": "kEUR/day", "r_dg": "%"},
               "scenarios": {name: strategic_summary(case_, sol)}}
    write_json(ctx.out / "strategic_summary.json", summary)
    write_atomic(ctx.out / "uc_status.csv", csv_text(UC_HEADER, strategic_rows(case_, name, sol)))
    click.echo(f"{sol.status}: profit {kilo(sol.profit):.3f} kEUR/day, r_DG {100 * sol.r_dg:.3f}%, "
               f"SCC payment {kilo(sol.clearing.scc_payment):.3f} kEUR/day")
    if sol.status != "Optimal":
        sys.exit(EXIT_SOLVER)


@main.command("sweep-w")
@_with(_strategic_options)
@click.option("--w", "w_list", multiple=True, type=float, default=(1.0, 10.0, 100.0, 1000.0),
              show_default=True)
@click.pass_obj
@_guard
def sweep_w(ctx, case, coef_path, offers_path, strategic, i_lim, buses, cap_m, cap_scc, horizon,
            w_list):
    """Penalty sweep; writes sweep.csv."""
    case_, coef, cfg = _strategic_setup(ctx, case, coef_path, offers_path, i_lim, buses, horizon)
    scfg = StrategicConfig(strategic=tuple(strategic.split(",")), beta_m_max=cap_m,
                           beta_scc_max=cap_scc)
    table = sweep_penalty(case_, cfg, coef, scfg, w_list)
    rows = [(r.penalty, None if r.r_dg is None else 100 * r.r_dg,
             None if r.profit is None else kilo(r.profit), r.status) for r in table.rows]
    write_atomic(ctx.out / "sweep.csv", csv_text(["W", "r_dg_pct", "profit_keur", "status"], rows))
    for row in rows:
        click.echo("W={:g} r_dg={} profit={} {}".format(*row))
    click.echo(f"|r_dg| non-increasing: {table.dg_non_increasing}; "
               f"profit non-increasing: {table.profit_non_increasing}")


@main.command("run-plan")
@click.argument("plan_path", type=click.Path(exists=True))
@click.pass_obj
@_guard
def run_plan_cmd(ctx, plan_path):
    """Run an experiment plan (JSON); global --seed/--out override the file when given."""
    doc = json.loads(Path(plan_path).read_text())
    src = click.get_current_context().parent
    if src.get_parameter_source("seed").name != "DEFAULT" or "seed" not in doc:
        doc["seed"] = ctx.seed
    if src.get_parameter_source("out").name != "DEFAULT" or "out_dir" not in doc:
        doc["out_dir"] = str(ctx.out)
    if "options" not in doc:
        o = ctx.options
        doc["options"] = {"mip_rel_gap": o.mip_rel_gap, "threads": o.threads, "seed": o.seed,
                          "time_limit": o.time_limit}
    plan = ExperimentPlan.from_dict(doc)
    bundle = run_plan(plan)
    for stage, status in bundle.status.items():
        click.echo(f"{stage}: {status}")
    if not bundle.ok:
        errors = [r for r in bundle.results.values() if isinstance(r, Exception)]
        if any(isinstance(e, InfeasibleMarket) for e in errors):
            sys.exit(EXIT_INFEASIBLE)
        if any(isinstance(e, SolverError) for e in errors):
            sys.exit(EXIT_SOLVER)
        sys.exit(EXIT_INPUT)


if __name__ == "__main__":  # pragma: no cover
    main()
