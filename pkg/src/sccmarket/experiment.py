"""Pipeline orchestration and report files.

Stages run in the order of ``STAGES``. Each stage persists its artifacts in
the output directory, so a later stage can be rerun on its own as long as
the artifacts it depends on are present. Money in summaries is k€/day;
hourly detail is in €.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bilevel import StrategicConfig, solve_strategic, sweep_penalty
from .grid import NetworkCase, scc_schedule
from .io import ieee30_case, load_case, toy3_case, write_atomic
from .market import (MarketConfig, identify_critical_buses, price_scc_offers, solve_competitive)
from .solver import SolverOptions, solver_version
from .surrogate import (SccCoefficients, classify_errors, generate_samples, min_scc_audit,
                        train_coefficients)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("train", "validate", "competitive", "price", "strategic", "sweep")
REQUIRES = {
    "validate": ("train",),
    "competitive": ("train",),
    "price": ("competitive",),
    "strategic": ("price",),
    "sweep": ("price",),
}
# artifacts that stand in for a stage that is not part of the plan
ARTIFACTS = {
    "train": "coefficients.json",
    "competitive": "critical.json",
    "price": "offers.json",
}
BUILTIN_CASES = {"ieee30": ieee30_case, "toy3": toy3_case}
DEFAULT_SCENARIOS = {"2g-b27": ("g1-b27", "g2-b27")}


class PlanError(ValueError):
    pass


def resolve_case(spec) -> NetworkCase:
    """A built-in case name or a path to a case JSON file."""
    if isinstance(spec, NetworkCase):
        return spec
    if spec is None:
        return ieee30_case()
    if str(spec) in BUILTIN_CASES:
        return BUILTIN_CASES[str(spec)]()
    return load_case(spec)


@dataclass
class ExperimentPlan:
    case: str = "ieee30"
    stages: tuple[str, ...] = STAGES
    out_dir: str = "results"
    seed: int = 0
    horizon: int | None = None  # truncate the case, e.g. 6 for quick runs
    # training and validation
    train_limits: tuple[float, ...] = (3.0, 4.0, 5.0)
    n_train: int = 2000
    n_validate: int = 500
    policy: str = "reachable"
    margin: float = 0.05
    k_ibr_max: float | None = 1.0
    # market
    i_lim: float = 5.0
    scc_buses: tuple[int, ...] | None = None  # None: critical buses from energy-only clearing
    # strategic
    scenarios: dict = field(default_factory=lambda: dict(DEFAULT_SCENARIOS))
    penalty: float = 10.0
    penalties: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)
    beta_m_max: float = 2.0
    beta_scc_max: float = 2.0
    options: SolverOptions = field(default_factory=lambda: SolverOptions(mip_rel_gap=1e-4))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")
        if "options" in d:
            d["options"] = SolverOptions(**d["options"])
        for key in ("stages", "train_limits", "penalties", "scc_buses"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "scenarios" in d:
            d["scenarios"] = {k: tuple(v) for k, v in d["scenarios"].items()}
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["options"] = {k: v for k, v in d["options"].items()
                        if not (isinstance(v, float) and not np.isfinite(v))}
        return d

    def validate(self) -> None:
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise PlanError(f"unknown stages {bad}; choose from {STAGES}")
        out = Path(self.out_dir)
        for s in self.stages:
            for dep in REQUIRES.get(s, ()):
                if dep not in self.stages and not (out / ARTIFACTS[dep]).exists():
                    raise PlanError(f"stage {s!r} requires {dep!r} (or {ARTIFACTS[dep]} in {out})")
        if self.i_lim not in self.train_limits and "train" in self.stages:
            raise PlanError(f"market i_lim {self.i_lim} is not among train_limits")
        if self.penalty <= 0 or any(w <= 0 for w in self.penalties):
            raise PlanError("penalties must be positive")


@dataclass
class ReportBundle:
    out_dir: Path
    files: dict = field(default_factory=dict)  # name -> path
    status: dict = field(default_factory=dict)  # stage -> "ok" | "failed: ..." | "skipped: ..."
    results: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v == "ok" for v in self.status.values())


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            return ""
        return f"{float(v):.10g}"
    if isinstance(v, np.integer):
        return int(v)
    return "" if v is None else v


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def kilo(x: float) -> float:
    return round(float(x) / 1e3, 6)


# -- offers persistence ------------------------------------------------------

def offers_to_json(offers: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION,
            "offers": [{"gen": g, "bus": b, "eur_per_h": [float(v) for v in series]}
                       for (g, b), series in sorted(offers.items())]}


def offers_from_json(doc: dict) -> dict:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise PlanError(f"unsupported offers schema_version {doc.get('schema_version')!r}")
    return {(o["gen"], int(o["bus"])): np.asarray(o["eur_per_h"], dtype=float)
            for o in doc["offers"]}


def load_coefficients(path) -> SccCoefficients:
    with open(path) as fh:
        doc = json.load(fh)
    return SccCoefficients.from_dict(doc.get("coefficients", doc))


# -- stages -----------------------------------------------------------------

class Pipeline:
    """Holds the case and stage results; each stage method writes its files."""

    def __init__(self, plan: ExperimentPlan, case: NetworkCase | None = None):
        self.plan = plan
        case = case or resolve_case(plan.case)
        if plan.horizon is not None and plan.horizon < case.horizon:
            case = case.truncated(plan.horizon)
        self.case = case
        self.out = Path(plan.out_dir)
        self.bundle = ReportBundle(self.out)
        self.coefficients: dict[float, SccCoefficients] = {}
        self.critical: tuple[int, ...] | None = None
        self.offers: dict | None = None
        self.timings: dict[str, float] = {}

    def _write(self, name: str, text: str) -> None:
        path = self.out / name
        write_atomic(path, text)
        self.bundle.files[name] = path

    def _write_json(self, name: str, obj) -> None:
        path = self.out / name
        write_json(path, obj)
        self.bundle.files[name] = path

    def market_config(self, **kw) -> MarketConfig:
        return MarketConfig(i_lim=self.plan.i_lim, options=self.plan.options, **kw)

    # artifacts ------------------------------------------------------------
    def market_coefficients(self) -> SccCoefficients:
        lim = self.plan.i_lim
        if lim not in self.coefficients:
            doc = json.loads((self.out / ARTIFACTS["train"]).read_text())
            for entry in doc["levels"]:
                self.coefficients[float(entry["i_lim"])] = SccCoefficients.from_dict(entry["coefficients"])
        if lim not in self.coefficients:
            raise PlanError(f"no trained coefficients for i_lim={lim}")
        return self.coefficients[lim]

    def scc_buses(self) -> tuple[int, ...]:
        if self.plan.scc_buses is not None:
            return tuple(self.plan.scc_buses)
        if self.critical is None:
            doc = json.loads((self.out / ARTIFACTS["competitive"]).read_text())
            self.critical = tuple(doc["critical_buses"])
        return self.critical

    def market_offers(self) -> dict:
        if self.offers is None:
            self.offers = offers_from_json(json.loads((self.out / ARTIFACTS["price"]).read_text()))
        return self.offers

    # stages ---------------------------------------------------------------
    def train(self):
        p = self.plan
        samples = generate_samples(self.case, p.n_train, p.policy, seed=p.seed)
        levels = []
        for lim in p.train_limits:
            t0 = time.perf_counter()
            k = train_coefficients(samples, lim, margin=p.margin, k_ibr_max=p.k_ibr_max,
                                   options=p.options)
            self.coefficients[float(lim)] = k
            levels.append({"i_lim": float(lim), "train_seconds": round(time.perf_counter() - t0, 3),
                           "coefficients": k.to_dict()})
        # timings go to provenance so the artifact is reproducible byte for byte
        self.timings.update({f"train_i_lim_{e['i_lim']:g}": e["train_seconds"] for e in levels})
        self._write_json(ARTIFACTS["train"], {
            "schema_version": SCHEMA_VERSION, "case": self.case.name, "n_samples": p.n_train,
            "policy": p.policy, "seed": p.seed,
            "levels": [{k: v for k, v in e.items() if k != "train_seconds"} for e in levels]})
        return levels

    def validate(self):
        p = self.plan
        samples = generate_samples(self.case, p.n_validate, p.policy, seed=p.seed + 1)
        rows = []
        for lim in p.train_limits:
            k = self.coefficients.get(float(lim))
            if k is None:
                self.market_coefficients()
                k = self.coefficients[float(lim)]
            report = classify_errors(k, samples, lim)
            cfg = MarketConfig(i_lim=lim, options=p.options)
            min_scc = float("nan")
            try:
                clearing = solve_competitive(self.case, cfg, k, with_duals=False)
                audit = min_scc_audit(self.case, k, clearing.u, lim)
                min_scc = min(a.min_exact for a in audit)
            except Exception as exc:  # noqa: BLE001 - audit failure is reported in the table
                log.warning("constrained audit at i_lim=%g failed: %s", lim, exc)
            rows.append((lim, min_scc, report.n_type1, report.err_type1, report.n_type2,
                         report.err_type2, len(samples)))
        self._write("error_report.csv", csv_text(
            ["i_lim_pu", "min_scc_pu", "type1_count", "type1_mean_error_pct", "type2_count",
             "type2_mean_error_pct", "n_validation"], rows))
        return rows

    def competitive(self):
        case = self.case
        k = self.market_coefficients()
        critical, mins, energy_only = identify_critical_buses(case, self.market_config())
        self.critical = critical
        buses = self.scc_buses()
        clearing = solve_competitive(case, self.market_config(scc_buses=buses), k)
        exact = scc_schedule(case, clearing.u)
        self._write_json(ARTIFACTS["competitive"], {
            "schema_version": SCHEMA_VERSION, "i_lim": self.plan.i_lim,
            "critical_buses": list(critical), "scc_buses": list(buses),
            "min_scc_energy_only": {str(b): v for b, v in mins.items()},
            "min_scc_constrained": {str(b): float(exact[case.bus_index(b)].min())
                                    for b in case.monitored_buses},
            "cost_energy_only_keur": kilo(energy_only.cost),
            "cost_constrained_keur": kilo(clearing.cost),
        })
        self._write("clearing.csv", clearing_csv(case, clearing))
        return clearing

    def price(self):
        k = self.market_coefficients()
        report = price_scc_offers(self.case, self.market_config(scc_buses=self.scc_buses()), k)
        self.offers = report.offers
        self._write_json(ARTIFACTS["price"], {**offers_to_json(report.offers),
                                              "flagged": [list(f) for f in report.flagged]})
        rows = []
        ids = [g.id for g in self.case.sync_gens]
        for (gid, b), series in sorted(report.offers.items()):
            kb = k.k_gen[k.row(b), ids.index(gid)]
            for t, v in enumerate(series):
                rows.append((gid, self.case.sync_gens[ids.index(gid)].bus, b, t + 1, v,
                             v / kb if kb > 0 else None, (gid, b) in report.flagged))
        self._write("offers.csv", csv_text(
            ["gen", "gen_bus", "scc_bus", "hour", "offer_eur_per_h", "offer_eur_per_pu",
             "flagged"], rows))
        return report

    def _strategic_config(self, ids, penalty) -> StrategicConfig:
        p = self.plan
        return StrategicConfig(strategic=tuple(ids), beta_m_max=p.beta_m_max,
                               beta_scc_max=p.beta_scc_max, penalty=penalty)

    def strategic(self):
        k = self.market_coefficients()
        cfg = self.market_config(scc_buses=self.scc_buses(), scc_offers=self.market_offers())
        summary, uc_rows = {}, []
        for name, ids in self.plan.scenarios.items():
            sol = solve_strategic(self.case, cfg, k, self._strategic_config(ids, self.plan.penalty))
            summary[name] = strategic_summary(self.case, sol)
            uc_rows.extend(strategic_rows(self.case, name, sol))
        self.bundle.results["strategic"] = summary
        self._merge_summary({"scenarios": summary})
        self._write("uc_status.csv", csv_text(UC_HEADER, uc_rows))
        return summary

    def sweep(self):
        k = self.market_coefficients()
        cfg = self.market_config(scc_buses=self.scc_buses(), scc_offers=self.market_offers())
        out = {}
        for name, ids in self.plan.scenarios.items():
            table = sweep_penalty(self.case, cfg, k, self._strategic_config(ids, self.plan.penalty),
                                  self.plan.penalties)
            out[name] = {
                "rows": [{"W": r.penalty, "r_dg_pct": None if r.r_dg is None else 100 * r.r_dg,
                          "profit_keur": None if r.profit is None else kilo(r.profit),
                          "status": r.status, "error": r.error} for r in table.rows],
                "r_dg_non_increasing": table.dg_non_increasing,
                "profit_non_increasing": table.profit_non_increasing,
            }
        self.bundle.results["sweep"] = out
        self._merge_summary({"sweep": out})
        return out

    def _merge_summary(self, part: dict) -> None:
        path = self.out / "strategic_summary.json"
        doc = json.loads(path.read_text()) if path.exists() else {}
        if doc.get("schema_version") not in (None, SCHEMA_VERSION):
            doc = {}
        doc.update(part)
        doc["schema_version"] = SCHEMA_VERSION
        doc["units"] = {"money": "kEUR/day", "r_dg": "%"}
        self._write_json("strategic_summary.json", doc)


def clearing_csv(case: NetworkCase, clearing) -> str:
    rows = []
    for g, gen in enumerate(case.sync_gens):
        for t in range(case.horizon):
            rows.append((gen.id, gen.bus, t + 1, int(clearing.u[g, t]), clearing.p[g, t],
                         clearing.lambda_e[t], clearing.lambda_e[t] * clearing.p[g, t]))
    for c, ibr in enumerate(case.ibr_units):
        for t in range(case.horizon):
            rows.append((ibr.id, ibr.bus, t + 1, None, clearing.pc[c, t], clearing.lambda_e[t],
                         clearing.lambda_e[t] * clearing.pc[c, t]))
    return csv_text(["unit", "bus", "hour", "online", "output_mw", "energy_price_eur_per_mwh",
                     "energy_revenue_eur"], rows)


UC_HEADER = ["scenario", "unit", "bus", "hour", "online", "output_mw", "beta_m",
             "energy_price_eur_per_mwh", "energy_revenue_eur", "scc_revenue_eur"]


def strategic_rows(case: NetworkCase, name: str, sol) -> list:
    cl = sol.clearing
    rows = []
    excluded = set(sol.scc_excluded)
    for g, gen in enumerate(case.sync_gens):
        for t in range(case.horizon):
            scc = 0.0
            if gen.id not in excluded:
                scc = float(sum(cl.lambda_scc[r, t] * sol.k_eff[r, g] * cl.u[g, t]
                                for r in range(len(cl.scc_buses))))
            rows.append((name, gen.id, gen.bus, t + 1, int(cl.u[g, t]), cl.p[g, t],
                         sol.beta_m[g, t], cl.lambda_e[t], cl.lambda_e[t] * cl.p[g, t], scc))
    return rows


def strategic_summary(case: NetworkCase, sol) -> dict:
    cl = sol.clearing
    ids = [g.id for g in case.sync_gens]
    return {
        "strategic_units": list(sol.strategic),
        "W": sol.penalty,
        "status": sol.status,
        "mip_gap": sol.mip_gap,
        "profit_keur": kilo(sol.profit),
        "profit_by_unit_keur": {k: kilo(v) for k, v in sol.ul_profit.items()},
        "r_dg_pct": 100 * sol.r_dg,
        "ll_primal_keur": kilo(sol.primal_value),
        "ll_dual_keur": kilo(sol.dual_value),
        "scc_payment_keur": kilo(cl.scc_payment),
        "scc_revenue_keur": {k: kilo(v["scc"]) for k, v in cl.revenue.items() if k in ids},
        "energy_revenue_keur": {k: kilo(v["energy"]) for k, v in cl.revenue.items()},
        "mean_beta_m": {ids[g]: float(sol.beta_m[g].mean()) for g in range(len(ids))
                        if ids[g] in sol.strategic},
        "lambda_scc_eur_per_pu": {str(b): cl.lambda_scc[r].tolist()
                                  for r, b in enumerate(cl.scc_buses)},
        "wall_seconds": round(sol.wall_time, 3),
    }


def provenance(plan: ExperimentPlan) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "solver": solver_version(),
        "seed": plan.seed,
        "tolerances": {k: v for k, v in asdict(plan.options).items()
                       if not (isinstance(v, float) and not np.isfinite(v))},
        "plan": plan.to_dict(),
        "file_schemas": {name: SCHEMA_VERSION for name in
                         ("error_report.csv", "clearing.csv", "offers.csv", "uc_status.csv",
                          "strategic_summary.json", "coefficients.json", "offers.json",
                          "critical.json")},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def run_plan(plan: ExperimentPlan, case: NetworkCase | None = None) -> ReportBundle:
    """Execute the plan's stages in order; a failed stage skips its dependents."""
    plan.validate()
    pipe = Pipeline(plan, case)
    pipe.out.mkdir(parents=True, exist_ok=True)
    bundle = pipe.bundle
    failed: set[str] = set()
    for stage in STAGES:
        if stage not in plan.stages:
            continue
        blocked = [d for d in REQUIRES.get(stage, ()) if d in failed]
        if blocked:
            bundle.status[stage] = f"skipped: {blocked[0]} failed"
            failed.add(stage)
            continue
        t0 = time.perf_counter()
        try:
            bundle.results[stage] = getattr(pipe, stage)()
            bundle.status[stage] = "ok"
        except Exception as exc:  # noqa: BLE001 - recorded per stage, dependents skipped
            log.error("stage %s failed: %s", stage, exc)
            bundle.status[stage] = f"failed: {type(exc).__name__}: {exc}"
            bundle.results[stage] = exc
            failed.add(stage)
        pipe.timings[stage] = round(time.perf_counter() - t0, 3)
        log.info("stage %s: %s (%.1f s)", stage, bundle.status[stage], pipe.timings[stage])
    prov = provenance(plan)
    prov["stages"] = bundle.status
    prov["seconds"] = pipe.timings
    pipe._write_json("provenance.json", prov)
    return bundle
