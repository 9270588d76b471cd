"""Competitive SCC-constrained unit-commitment clearing and SCC offer pricing.

Model size for G SGs, C IBRs, T hours and B_s SCC-constrained buses:

* variables: 4*G*T (u, P, C_st, C_sh) + C*T (IBR output)
* rows: T (balance) + 6*G*T (pmin, pmax, ramp down/up, start-up, shut-down)
  + C*T (IBR availability) + B_s*T (SCC)

Prices come from the LP obtained by fixing the binaries at the MILP optimum.
Because the SCC rows then contain only fixed commitments their duals are
zero; SCC payments in the competitive setting are carried by the offers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import NetworkCase, scc_schedule
from .solver import ModelIR, SolveOutcome, SolverError, SolverOptions, solve
from .surrogate import SccCoefficients, status_locked

log = logging.getLogger(__name__)


class MarketError(RuntimeError):
    pass


class MissingCoefficients(MarketError):
    pass


class HorizonMismatch(MarketError):
    pass


class InfeasibleMarket(MarketError):
    def __init__(self, message: str, buses=()):
        super().__init__(message)
        self.buses = tuple(buses)


@dataclass
class MarketConfig:
    i_lim: float | dict = 5.0
    include_scc: bool = True
    scc_buses: tuple[int, ...] | None = None  # None: every monitored bus
    scc_offers: dict = field(default_factory=dict)  # (gen_id, bus) -> (T,) EUR/h
    horizon: int | None = None
    shortfall_cost: float | None = None  # EUR per p.u.-hour; None keeps SCC rows hard
    options: SolverOptions = field(default_factory=SolverOptions)

    def limit(self, bus: int) -> float:
        return float(self.i_lim[bus] if isinstance(self.i_lim, dict) else self.i_lim)

    def buses_for(self, case: NetworkCase) -> tuple[int, ...]:
        if not self.include_scc:
            return ()
        return tuple(case.monitored_buses if self.scc_buses is None else self.scc_buses)


@dataclass
class PrimalIndex:
    """Column indices of the LL primal variables, each shaped (units, T)."""
    u: np.ndarray
    p: np.ndarray
    cst: np.ndarray
    csh: np.ndarray
    pc: np.ndarray
    shortfall: dict = field(default_factory=dict)  # (bus, t) -> col


@dataclass
class MarketModel:
    ir: ModelIR
    idx: PrimalIndex
    scc_buses: tuple[int, ...]
    k_eff: np.ndarray  # (B_s, G) SG coefficients actually used in SCC rows


def _check(case: NetworkCase, config: MarketConfig, coefficients: SccCoefficients | None):
    if config.horizon is not None and config.horizon != case.horizon:
        raise HorizonMismatch(f"config horizon {config.horizon} != case horizon {case.horizon}")
    buses = config.buses_for(case)
    if buses:
        if coefficients is None:
            raise MissingCoefficients("SCC constraints requested but no coefficients given")
        missing = [b for b in buses if b not in coefficients.buses]
        if missing:
            raise MissingCoefficients(f"no coefficients for buses {missing}")
        for b in buses:
            if not config.limit(b) > 0:
                raise MarketError(f"bus {b}: i_lim must be > 0 where SCC is enforced")
    return buses


def gen_coefficients(coefficients: SccCoefficients, buses, zeroed=()) -> np.ndarray:
    """SG coefficients for ``buses`` with selected (bus, gen_index) pairs set to 0."""
    if not buses:
        return np.zeros((0, coefficients.k_gen.shape[1] if coefficients else 0))
    K = np.array([coefficients.k_gen[coefficients.row(b)] for b in buses], dtype=float)
    for b, g in zeroed:
        K[list(buses).index(b), g] = 0.0
    return K


def add_primal(ir: ModelIR, case: NetworkCase, config: MarketConfig,
               coefficients: SccCoefficients | None, buses, K: np.ndarray,
               integral: bool = True) -> PrimalIndex:
    """Add LL primal variables and constraints (no objective) to ``ir``."""
    G, C, T = len(case.sync_gens), len(case.ibr_units), case.horizon
    u = np.empty((G, T), dtype=int)
    p = np.empty((G, T), dtype=int)
    cst = np.empty((G, T), dtype=int)
    csh = np.empty((G, T), dtype=int)
    pc = np.empty((C, T), dtype=int)
    for g, gen in enumerate(case.sync_gens):
        for t in range(T):
            u[g, t] = ir.add_var(f"u[{gen.id},{t + 1}]", 0.0, 1.0, integral)
            p[g, t] = ir.add_var(f"p[{gen.id},{t + 1}]", 0.0, np.inf)
            cst[g, t] = ir.add_var(f"cst[{gen.id},{t + 1}]", 0.0, np.inf)
            csh[g, t] = ir.add_var(f"csh[{gen.id},{t + 1}]", 0.0, np.inf)
    for c, ibr in enumerate(case.ibr_units):
        for t in range(T):
            pc[c, t] = ir.add_var(f"pc[{ibr.id},{t + 1}]", 0.0, np.inf)
    idx = PrimalIndex(u, p, cst, csh, pc)

    alpha = case.capacity_factors()
    for r, b in enumerate(buses):
        k_c = coefficients.k_ibr[coefficients.row(b)]
        for t in range(T):
            coefs = {int(u[g, t]): K[r, g] for g in range(G) if K[r, g] != 0.0}
            if config.shortfall_cost is not None:
                s = ir.add_var(f"shortfall[{b},{t + 1}]", 0.0, np.inf)
                idx.shortfall[(b, t)] = s
                coefs[s] = 1.0
            ir.add_row(coefs, ">=", config.limit(b) - float(k_c @ alpha[:, t]), f"scc[{b},{t + 1}]")
    for t in range(T):
        coefs = {int(p[g, t]): 1.0 for g in range(G)}
        coefs.update({int(pc[c, t]): 1.0 for c in range(C)})
        ir.add_row(coefs, ">=", float(case.demand[t]), f"balance[{t + 1}]")
    for g, gen in enumerate(case.sync_gens):
        for t in range(T):
            tag = f"{gen.id},{t + 1}"
            ir.add_row({p[g, t]: 1.0, u[g, t]: -gen.p_min}, ">=", 0.0, f"pmin[{tag}]")
            ir.add_row({p[g, t]: 1.0, u[g, t]: -gen.p_max}, "<=", 0.0, f"pmax[{tag}]")
            if t == 0:
                ir.add_row({p[g, t]: 1.0}, ">=", gen.p0 - gen.ramp_down, f"ramp_down[{tag}]")
                ir.add_row({p[g, t]: 1.0}, "<=", gen.p0 + gen.ramp_up, f"ramp_up[{tag}]")
                ir.add_row({cst[g, t]: 1.0, u[g, t]: -gen.startup_cost}, ">=",
                           -gen.startup_cost * gen.u0, f"startup[{tag}]")
                ir.add_row({csh[g, t]: 1.0, u[g, t]: gen.shutdown_cost}, ">=",
                           gen.shutdown_cost * gen.u0, f"shutdown[{tag}]")
            else:
                ir.add_row({p[g, t]: 1.0, p[g, t - 1]: -1.0}, ">=", -gen.ramp_down, f"ramp_down[{tag}]")
                ir.add_row({p[g, t]: 1.0, p[g, t - 1]: -1.0}, "<=", gen.ramp_up, f"ramp_up[{tag}]")
                ir.add_row({cst[g, t]: 1.0, u[g, t]: -gen.startup_cost,
                            u[g, t - 1]: gen.startup_cost}, ">=", 0.0, f"startup[{tag}]")
                ir.add_row({csh[g, t]: 1.0, u[g, t]: gen.shutdown_cost,
                            u[g, t - 1]: -gen.shutdown_cost}, ">=", 0.0, f"shutdown[{tag}]")
    for c, ibr in enumerate(case.ibr_units):
        for t in range(T):
            ir.add_row({pc[c, t]: 1.0}, "<=", float(alpha[c, t] * ibr.p_max),
                       f"ibr_max[{ibr.id},{t + 1}]")
    return idx


def offer_matrix(case: NetworkCase, config: MarketConfig, buses) -> np.ndarray:
    """SCC offers as an array (G, B_s, T) in EUR/h."""
    G, T = len(case.sync_gens), case.horizon
    O = np.zeros((G, len(buses), T))
    ids = [g.id for g in case.sync_gens]
    for (gid, b), series in config.scc_offers.items():
        if b in buses:
            O[ids.index(gid), list(buses).index(b)] = np.asarray(series, dtype=float)
    return O


def build_competitive_model(case: NetworkCase, config: MarketConfig,
                            coefficients: SccCoefficients | None = None,
                            zeroed=(), name: str = "competitive_uc") -> MarketModel:
    """Truthful-bid LL model with commitment-priced SCC offers in the objective.

    ``zeroed`` lists (bus, gen_index) pairs whose SCC coefficient is dropped,
    as used by the marginal offer computation.
    """
    buses = _check(case, config, coefficients)
    K = gen_coefficients(coefficients, buses, zeroed)
    ir = ModelIR(name)
    idx = add_primal(ir, case, config, coefficients, buses, K)
    O = offer_matrix(case, config, buses)
    obj = {}
    for g, gen in enumerate(case.sync_gens):
        for t in range(case.horizon):
            obj[int(idx.u[g, t])] = gen.no_load_cost + float(O[g, :, t].sum())
            obj[int(idx.p[g, t])] = gen.marginal_cost
            obj[int(idx.cst[g, t])] = 1.0
            obj[int(idx.csh[g, t])] = 1.0
    for c, ibr in enumerate(case.ibr_units):
        for t in range(case.horizon):
            obj[int(idx.pc[c, t])] = ibr.energy_bid
    for s in idx.shortfall.values():
        obj[s] = config.shortfall_cost
    ir.add_objective(obj)
    return MarketModel(ir, idx, buses, K)


@dataclass
class ClearingResult:
    status: str
    u: np.ndarray
    p: np.ndarray
    cst: np.ndarray
    csh: np.ndarray
    pc: np.ndarray
    cost: float  # EUR, LL objective
    hourly_cost: np.ndarray  # EUR per hour, excluding SCC offer terms
    lambda_e: np.ndarray  # EUR/MWh
    lambda_scc: np.ndarray  # (B_s, T) EUR/p.u.
    scc_buses: tuple[int, ...]
    revenue: dict  # gen or ibr id -> {"energy", "scc", "cost", "profit"}
    mip_gap: float | None = None
    wall_time: float = 0.0
    shortfall: np.ndarray | None = None

    @property
    def scc_payment(self) -> float:
        return float(sum(r["scc"] for r in self.revenue.values()))


def _hourly_cost(case: NetworkCase, u, p, cst, csh, pc) -> np.ndarray:
    nl = np.array([g.no_load_cost for g in case.sync_gens])
    mc = np.array([g.marginal_cost for g in case.sync_gens])
    bid = np.array([c.energy_bid for c in case.ibr_units])
    out = nl @ u + mc @ p + cst.sum(0) + csh.sum(0)
    if len(bid):
        out = out + bid @ pc
    return out


def _extract(mm: MarketModel, x: np.ndarray):
    idx = mm.idx
    u = np.round(x[idx.u]).astype(float)
    return u, x[idx.p], x[idx.cst], x[idx.csh], x[idx.pc]


def restricted_duals(mm: MarketModel, x: np.ndarray, options: SolverOptions):
    """Fix the binaries at ``x`` and re-solve the LP; returns its outcome."""
    fixed = mm.ir.fixed({int(j): round(float(x[j])) for j in mm.idx.u.ravel()})
    out = solve(fixed, options)
    if not out.ok:
        raise SolverError(f"restricted LP ended with status {out.status}")
    return out


def _raise_infeasible(case, config, coefficients, mm):
    alpha = case.capacity_factors()
    bad = []
    for r, b in enumerate(mm.scc_buses):
        best = mm.k_eff[r].clip(min=0).sum() + coefficients.k_ibr[coefficients.row(b)] @ alpha
        if np.any(best < config.limit(b) - 1e-9):
            bad.append(b)
    msg = "clearing is infeasible"
    if bad:
        msg += f"; SCC limit unreachable even with every SG online at buses {bad}"
    raise InfeasibleMarket(msg, bad)


def solve_competitive(case: NetworkCase, config: MarketConfig,
                      coefficients: SccCoefficients | None = None, zeroed=(),
                      with_duals: bool = True) -> ClearingResult:
    mm = build_competitive_model(case, config, coefficients, zeroed)
    out = solve(mm.ir, config.options)
    if out.status == "Infeasible":
        _raise_infeasible(case, config, coefficients, mm)
    if not out.has_solution:
        raise SolverError(f"clearing ended with status {out.status}")
    return clearing_from_solution(case, config, coefficients, mm, out, with_duals)


def clearing_from_solution(case, config, coefficients, mm: MarketModel, out: SolveOutcome,
                           with_duals: bool = True) -> ClearingResult:
    x = out.x
    u, p, cst, csh, pc = _extract(mm, x)
    T = case.horizon
    lam_e = np.zeros(T)
    lam_scc = np.zeros((len(mm.scc_buses), T))
    if with_duals:
        lp = restricted_duals(mm, x, config.options)
        lam_e = np.array([lp.dual(f"balance[{t + 1}]") for t in range(T)])
        lam_scc = np.array([[lp.dual(f"scc[{b},{t + 1}]") for t in range(T)] for b in mm.scc_buses])
        lam_scc = lam_scc.reshape(len(mm.scc_buses), T)
        # duals of >= rows in a minimization are nonnegative up to solver noise
        lam_e = np.where(np.abs(lam_e) < 1e-9, 0.0, lam_e)
        lam_scc = np.where(np.abs(lam_scc) < 1e-9, 0.0, lam_scc)
    revenue = revenue_decomposition(case, mm.scc_buses, mm.k_eff, u, p, cst, csh, pc, lam_e, lam_scc)
    shortfall = None
    if mm.idx.shortfall:
        shortfall = np.zeros((len(mm.scc_buses), T))
        for (b, t), j in mm.idx.shortfall.items():
            shortfall[mm.scc_buses.index(b), t] = x[j]
    return ClearingResult(out.status, u, p, cst, csh, pc, float(out.objective),
                          _hourly_cost(case, u, p, cst, csh, pc), lam_e, lam_scc, mm.scc_buses,
                          revenue, out.mip_gap, out.wall_time, shortfall)


def revenue_decomposition(case, buses, K, u, p, cst, csh, pc, lam_e, lam_scc,
                          multipliers=None, excluded_scc=()) -> dict:
    """Per-agent energy and SCC revenue, incurred cost and profit (EUR).

    SG costs use true (unscaled) cost parameters. ``excluded_scc`` lists SG
    ids whose SCC revenue is not counted.
    """
    rev = {}
    for g, gen in enumerate(case.sync_gens):
        energy = float(lam_e @ p[g])
        scc = 0.0
        if len(buses) and gen.id not in excluded_scc:
            scc = float(sum(lam_scc[r] @ (K[r, g] * u[g]) for r in range(len(buses))))
        cost = float(gen.no_load_cost * u[g].sum() + gen.marginal_cost * p[g].sum()
                     + cst[g].sum() + csh[g].sum())
        rev[gen.id] = {"energy": energy, "scc": scc, "cost": cost, "profit": energy + scc - cost}
    for c, ibr in enumerate(case.ibr_units):
        energy = float(lam_e @ pc[c])
        cost = float(ibr.energy_bid * pc[c].sum())
        rev[ibr.id] = {"energy": energy, "scc": 0.0, "cost": cost, "profit": energy - cost}
    return rev


def identify_critical_buses(case: NetworkCase, config: MarketConfig,
                            coefficients: SccCoefficients | None = None):
    """Buses whose exact SCC drops below ``i_lim`` under energy-only clearing.

    Returns ``(critical_buses, min_scc_by_bus, clearing)``.
    """
    energy_only = replace(config, include_scc=False, scc_offers={})
    res = solve_competitive(case, energy_only, None, with_duals=False)
    scc = scc_schedule(case, res.u)
    mins = {b: float(scc[case.bus_index(b)].min()) for b in case.monitored_buses}
    critical = tuple(b for b in case.monitored_buses if mins[b] < config.limit(b))
    return critical, mins, res


@dataclass
class OfferReport:
    offers: dict  # (gen_id, bus) -> (T,) EUR/h
    flagged: list  # (gen_id, bus) pairs priced by the infeasible-counterfactual rule
    base: ClearingResult
    counterfactual_cost: dict  # (gen_id, bus) -> EUR

    def array(self, case: NetworkCase, buses) -> np.ndarray:
        return offer_matrix(case, MarketConfig(scc_offers=self.offers), tuple(buses))


def price_scc_offers(case: NetworkCase, config: MarketConfig, coefficients: SccCoefficients,
                     recourse_cost: float = 1e5, tol: float = 1e-6,
                     share_location: bool = True) -> OfferReport:
    """Marginal-unit SCC offers.

    For every SG ``g`` and SCC-constrained bus ``b`` the clearing is re-solved
    with ``k_bg`` removed from that bus's row; the offer is the hourly system
    cost increase, floored at 0. When the base schedule already satisfies the
    counterfactual rows the optimum is unchanged and the offer is exactly 0.
    An infeasible counterfactual is re-solved with a shortfall variable priced
    at ``recourse_cost`` (EUR per p.u.-hour) and flagged. Status-locked units
    (see :func:`status_locked`) are online in every feasible schedule, so
    their SCC is a by-product and their offers are 0.

    With ``share_location`` the offer is turned into a price per p.u. and
    SGs at the same bus offer the largest such price found among them, so
    an idle twin of the marginal unit is not a free SCC provider.
    """
    base_cfg = replace(config, include_scc=True, scc_offers={})
    buses = base_cfg.buses_for(case)
    base = solve_competitive(case, base_cfg, coefficients, with_duals=False)
    alpha = case.capacity_factors()
    K = gen_coefficients(coefficients, buses)
    T = case.horizon
    locked = status_locked(case)
    offers, flagged, cf_cost = {}, [], {}
    for g, gen in enumerate(case.sync_gens):
        for r, b in enumerate(buses):
            key = (gen.id, b)
            offers[key] = np.zeros(T)
            if K[r, g] == 0.0 or locked[g]:
                continue
            k_row = K[r].copy()
            k_row[g] = 0.0
            rhs = config.limit(b) - coefficients.k_ibr[coefficients.row(b)] @ alpha
            if np.all(k_row @ base.u >= rhs - 1e-9):
                continue
            try:
                cf = solve_competitive(case, base_cfg, coefficients, zeroed=[(b, g)], with_duals=False)
            except InfeasibleMarket:
                soft = replace(base_cfg, shortfall_cost=recourse_cost)
                cf = solve_competitive(case, soft, coefficients, zeroed=[(b, g)], with_duals=False)
                flagged.append(key)
                pen = recourse_cost * cf.shortfall.sum(axis=0)
                diff = cf.hourly_cost + pen - base.hourly_cost
            else:
                diff = cf.hourly_cost - base.hourly_cost
            cf_cost[key] = float(cf.cost)
            diff = np.where(diff > tol * max(1.0, abs(base.cost) / T), diff, 0.0)
            offers[key] = diff
    if share_location:
        for r, b in enumerate(buses):
            for site in {gen.bus for gen in case.sync_gens}:
                group = [g for g, gen in enumerate(case.sync_gens)
                         if gen.bus == site and K[r, g] > 0 and not locked[g]]
                rho = np.zeros(T)
                for g in group:
                    rho = np.maximum(rho, offers[(case.sync_gens[g].id, b)] / K[r, g])
                for g in group:
                    offers[(case.sync_gens[g].id, b)] = rho * K[r, g]
    return OfferReport(offers, flagged, base, cf_cost)
