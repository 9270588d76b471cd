"""Strategic bidding as a penalty-weighted primal-dual single-level MILP.

The leader scales its marginal-cost bid and SCC offers by multipliers in
``[1, cap]``. The market operator's problem keeps integral commitments in
its primal part; its dual is the dual of the LP obtained by relaxing the
commitments to ``[0, 1]``. Leader profit minus ``W`` times the duality gap
is maximized. SGs whose SCC offers are zero at every constrained bus earn
no SCC revenue, both in the leader objective and in reported revenues.
Bilinear terms are linearized with McCormick envelopes:

* ``zre_e[g,t]   = lam_e[t] * p[g,t]``        (both continuous, box-exact only)
* ``zre_scc[g,b,t] = lam_scc[b,t] * k[b,g] * u[g,t]``   (exact, ``u`` binary)
* ``zbid_scc[g,b,t] = beta_scc[g,b,t] * u[g,t]``        (exact, ``u`` binary)
* ``zbid_e[g,t]  = beta_m[g,t] * p[g,t]``      (both continuous, box-exact only)

Dual rows are written in the "A'y <= c" form of a minimization with ">="
rows, so every dual variable is nonnegative.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import NetworkCase
from .market import (ClearingResult, MarketConfig, PrimalIndex, _check, _hourly_cost,
                     add_primal, gen_coefficients, offer_matrix, revenue_decomposition)
from .solver import ModelIR, SolveOutcome, SolverError, SolverOptions, solve
from .surrogate import SccCoefficients

log = logging.getLogger(__name__)

BINARY_TOL = 1e-6


class BilevelError(RuntimeError):
    pass


class UnboundedCap(BilevelError, ValueError):
    pass


class ZeroPrimal(BilevelError, ZeroDivisionError):
    pass


class EnvelopeViolation(BilevelError):
    pass


@dataclass
class StrategicConfig:
    strategic: tuple[str, ...] = ()
    beta_m_max: float | dict = 2.0  # per SG id or one value
    beta_scc_max: float | dict = 2.0  # per (SG id, bus), per SG id, or one value
    penalty: float = 10.0
    polish: bool = True  # re-solve with binaries fixed to clean up the incumbent

    def cap_m(self, gid: str) -> float:
        v = self.beta_m_max.get(gid) if isinstance(self.beta_m_max, dict) else self.beta_m_max
        return _cap(v, f"beta_m_max[{gid}]")

    def cap_scc(self, gid: str, bus: int) -> float:
        v = self.beta_scc_max
        if isinstance(v, dict):
            v = v.get((gid, bus), v.get(gid))
        return _cap(v, f"beta_scc_max[{gid},{bus}]")


def _cap(v, what: str) -> float:
    if v is None or not math.isfinite(float(v)):
        raise UnboundedCap(f"{what} is missing or infinite")
    if float(v) < 1.0:
        raise ValueError(f"{what} = {v} must be >= 1")
    return float(v)


def compute_dg_ratio(primal_value: float, dual_value: float) -> float:
    """Relative duality gap ``(primal - dual) / primal``; may be negative."""
    if primal_value == 0:
        raise ZeroPrimal("duality-gap ratio undefined for a zero primal value")
    return (primal_value - dual_value) / primal_value


def price_caps(case: NetworkCase, config: MarketConfig, coefficients: SccCoefficients | None,
               scfg: StrategicConfig):
    """Upper bounds for the energy price and the SCC prices (B_s, T)."""
    strat = set(scfg.strategic)
    marg = [g.marginal_cost * (scfg.cap_m(g.id) if g.id in strat else 1.0)
            for g in case.sync_gens]
    lam_e = max(marg, default=0.0)
    buses = config.buses_for(case)
    O = offer_matrix(case, config, buses)
    K = gen_coefficients(coefficients, buses) if buses else np.zeros((0, len(case.sync_gens)))
    lam_scc = np.zeros((len(buses), case.horizon))
    for r, b in enumerate(buses):
        for g, gen in enumerate(case.sync_gens):
            if K[r, g] > 0:
                cap = scfg.cap_scc(gen.id, b) if gen.id in strat else 1.0
                lam_scc[r] = np.maximum(lam_scc[r], cap * O[g, r] / K[r, g])
    if not math.isfinite(lam_e) or not np.all(np.isfinite(lam_scc)):
        raise UnboundedCap("derived price caps are not finite")
    return lam_e, lam_scc


@dataclass
class Multipliers:
    """Multiplier values or columns. ``m`` is (G, T); ``scc`` maps (g, r) -> (T,)."""
    m: np.ndarray
    scc: dict
    is_var: bool = False


@dataclass
class DualIndex:
    lam_e: np.ndarray  # (T,)
    lam_scc: np.ndarray  # (B_s, T), -1 where the price is capped at zero
    mu_min: np.ndarray
    mu_max: np.ndarray
    pi_rd: np.ndarray
    pi_ru: np.ndarray
    sig_st: np.ndarray
    sig_sh: np.ndarray
    psi_max: np.ndarray
    psi_min: np.ndarray | None
    zeta: np.ndarray  # (C, T)
    objective: dict  # column -> coefficient of the dual objective


@dataclass
class DualSolution:
    lambda_e: np.ndarray
    lambda_scc: np.ndarray
    mu_min: np.ndarray
    mu_max: np.ndarray
    pi_rd: np.ndarray
    pi_ru: np.ndarray
    sigma_st: np.ndarray
    sigma_sh: np.ndarray
    psi_max: np.ndarray
    zeta: np.ndarray
    objective: float


def _fixed_multipliers(case: NetworkCase, buses, beta_m=None, beta_scc=None) -> Multipliers:
    G, T = len(case.sync_gens), case.horizon
    m = np.ones((G, T)) if beta_m is None else np.asarray(beta_m, dtype=float)
    scc = {}
    for (g, r), v in (beta_scc or {}).items():
        scc[(g, r)] = np.asarray(v, dtype=float)
    return Multipliers(m, scc)


def build_dual_ll(case: NetworkCase, config: MarketConfig, coefficients: SccCoefficients | None,
                  strategic_cfg: StrategicConfig | None = None, ir: ModelIR | None = None,
                  multipliers: Multipliers | None = None, commitment=None,
                  lam_caps=None) -> tuple[ModelIR, DualIndex]:
    """Dual of the commitment-relaxed LL problem.

    Adds dual variables and one row per primal variable to ``ir`` (a new
    maximization model when omitted, with the dual objective set). With
    ``commitment`` the relaxation box of each ``u`` shrinks to that value,
    which gives the dual of the fixed-binary LP. ``multipliers`` holding
    columns makes the strategic rows depend on them linearly.
    """
    buses = _check(case, config, coefficients)
    G, C, T = len(case.sync_gens), len(case.ibr_units), case.horizon
    B = len(buses)
    K = gen_coefficients(coefficients, buses)
    O = offer_matrix(case, config, buses)
    mult = multipliers or _fixed_multipliers(case, buses)
    standalone = ir is None
    if standalone:
        ir = ModelIR("dual_ll")
        ir.maximize = True
    if lam_caps is None:
        lam_e_max, lam_scc_max = np.inf, np.full((B, T), np.inf)
    else:
        lam_e_max, lam_scc_max = lam_caps
    if commitment is None:
        lo, hi = np.zeros((G, T)), np.ones((G, T))
    else:
        lo = hi = np.asarray(commitment, dtype=float).reshape(G, T)

    def block(name, shape, ids, ub=np.inf):
        out = np.empty(shape, dtype=int)
        for i in range(shape[0]):
            for t in range(T):
                out[i, t] = ir.add_var(f"{name}[{ids[i]},{t + 1}]", 0.0, ub)
        return out

    gids = [g.id for g in case.sync_gens]
    lam_e = np.array([ir.add_var(f"lam_e[{t + 1}]", 0.0, lam_e_max) for t in range(T)], dtype=int)
    lam_scc = np.full((B, T), -1, dtype=int)
    for r, b in enumerate(buses):
        for t in range(T):
            if lam_scc_max[r, t] > 0:
                lam_scc[r, t] = ir.add_var(f"lam_scc[{b},{t + 1}]", 0.0, lam_scc_max[r, t])
    mu_min = block("mu_min", (G, T), gids)
    mu_max = block("mu_max", (G, T), gids)
    pi_rd = block("pi_rd", (G, T), gids)
    pi_ru = block("pi_ru", (G, T), gids)
    sig_st = block("sig_st", (G, T), gids)
    sig_sh = block("sig_sh", (G, T), gids)
    psi_max = block("psi_max", (G, T), gids)
    psi_min = block("psi_min", (G, T), gids) if commitment is not None else None
    zeta = block("zeta", (C, T), [c.id for c in case.ibr_units])

    alpha = case.capacity_factors()
    obj: dict[int, float] = {}

    def put(j, c):
        if c:
            obj[int(j)] = obj.get(int(j), 0.0) + float(c)

    for t in range(T):
        put(lam_e[t], case.demand[t])
        for r, b in enumerate(buses):
            if lam_scc[r, t] >= 0:
                k_c = coefficients.k_ibr[coefficients.row(b)]
                put(lam_scc[r, t], config.limit(b) - float(k_c @ alpha[:, t]))
    for g, gen in enumerate(case.sync_gens):
        for t in range(T):
            put(pi_rd[g, t], -gen.ramp_down)
            put(pi_ru[g, t], -gen.ramp_up)
            put(psi_max[g, t], -hi[g, t])
            if psi_min is not None:
                put(psi_min[g, t], lo[g, t])
        put(pi_rd[g, 0], gen.p0)
        put(pi_ru[g, 0], -gen.p0)
        put(sig_st[g, 0], -gen.startup_cost * gen.u0)
        put(sig_sh[g, 0], gen.shutdown_cost * gen.u0)
    for c, ibr in enumerate(case.ibr_units):
        for t in range(T):
            put(zeta[c, t], -alpha[c, t] * ibr.p_max)

    for g, gen in enumerate(case.sync_gens):
        for t in range(T):
            tag = f"{gen.id},{t + 1}"
            # u column
            row = {}
            const = gen.no_load_cost
            for r in range(B):
                if K[r, g] != 0.0 and lam_scc[r, t] >= 0:
                    row[int(lam_scc[r, t])] = K[r, g]
                if O[g, r, t] != 0.0:
                    beta = mult.scc.get((g, r))
                    if beta is None:
                        const += O[g, r, t]
                    elif mult.is_var:
                        row[int(beta[t])] = row.get(int(beta[t]), 0.0) - O[g, r, t]
                    else:
                        const += O[g, r, t] * beta[t]
            row[int(mu_min[g, t])] = -gen.p_min
            row[int(mu_max[g, t])] = gen.p_max
            row[int(sig_st[g, t])] = -gen.startup_cost
            row[int(sig_sh[g, t])] = gen.shutdown_cost
            if t + 1 < T:
                row[int(sig_st[g, t + 1])] = gen.startup_cost
                row[int(sig_sh[g, t + 1])] = -gen.shutdown_cost
            row[int(psi_max[g, t])] = -1.0
            if psi_min is not None:
                row[int(psi_min[g, t])] = 1.0
            ir.add_row(row, "<=", const, f"dual_u[{tag}]")
            # P column
            row = {int(lam_e[t]): 1.0, int(mu_min[g, t]): 1.0, int(mu_max[g, t]): -1.0,
                   int(pi_rd[g, t]): 1.0, int(pi_ru[g, t]): -1.0}
            if t + 1 < T:
                row[int(pi_rd[g, t + 1])] = -1.0
                row[int(pi_ru[g, t + 1])] = 1.0
            if mult.is_var and mult.m[g, t] >= 0:
                row[int(mult.m[g, t])] = -gen.marginal_cost
                const = 0.0
            else:
                const = gen.marginal_cost * (1.0 if mult.is_var else mult.m[g, t])
            ir.add_row(row, "<=", const, f"dual_p[{tag}]")
            ir.add_row({int(sig_st[g, t]): 1.0}, "<=", 1.0, f"dual_cst[{tag}]")
            ir.add_row({int(sig_sh[g, t]): 1.0}, "<=", 1.0, f"dual_csh[{tag}]")
    for c, ibr in enumerate(case.ibr_units):
        for t in range(T):
            ir.add_row({int(lam_e[t]): 1.0, int(zeta[c, t]): -1.0}, "<=", ibr.energy_bid,
                       f"dual_pc[{ibr.id},{t + 1}]")

    if standalone:
        ir.add_objective(obj)
    idx = DualIndex(lam_e, lam_scc, mu_min, mu_max, pi_rd, pi_ru, sig_st, sig_sh,
                    psi_max, psi_min, zeta, obj)
    return ir, idx


def ll_objective(case: NetworkCase, idx: PrimalIndex, O: np.ndarray,
                 mult: Multipliers) -> dict:
    """LL primal objective for fixed multiplier values."""
    obj: dict[int, float] = {}
    for g, gen in enumerate(case.sync_gens):
        for t in range(case.horizon):
            nl = gen.no_load_cost
            for r in range(O.shape[1]):
                beta = mult.scc.get((g, r))
                nl += O[g, r, t] * (1.0 if beta is None else beta[t])
            obj[int(idx.u[g, t])] = nl
            obj[int(idx.p[g, t])] = gen.marginal_cost * mult.m[g, t]
            obj[int(idx.cst[g, t])] = 1.0
            obj[int(idx.csh[g, t])] = 1.0
    for c, ibr in enumerate(case.ibr_units):
        for t in range(case.horizon):
            obj[int(idx.pc[c, t])] = ibr.energy_bid
    return obj


@dataclass
class FixedBinaryCheck:
    primal: float
    dual: float

    @property
    def rel_gap(self) -> float:
        return abs(self.primal - self.dual) / max(1.0, abs(self.primal))


def fixed_binary_duality(case: NetworkCase, config: MarketConfig,
                         coefficients: SccCoefficients | None, commitment,
                         beta_m=None, beta_scc=None) -> FixedBinaryCheck:
    """Solve the LL primal LP with ``u`` fixed and the matching dual LP separately."""
    buses = _check(case, config, coefficients)
    if config.shortfall_cost is not None:
        raise BilevelError("fixed-binary duality check needs hard SCC rows")
    mult = _fixed_multipliers(case, buses, beta_m, beta_scc)
    K = gen_coefficients(coefficients, buses)
    commitment = np.asarray(commitment, dtype=float)
    primal = ModelIR("primal_ll_fixed")
    idx = add_primal(primal, case, config, coefficients, buses, K, integral=False)
    primal.add_objective(ll_objective(case, idx, offer_matrix(case, config, buses), mult))
    for j, v in zip(idx.u.ravel(), commitment.ravel()):
        primal.lb[j] = primal.ub[j] = float(v)
    dual, _ = build_dual_ll(case, config, coefficients, None, multipliers=mult,
                            commitment=commitment)
    p_out = solve(primal, config.options)
    d_out = solve(dual, config.options)
    if not (p_out.ok and d_out.ok):
        raise SolverError(f"fixed-binary LPs ended with {p_out.status} / {d_out.status}")
    return FixedBinaryCheck(p_out.objective, d_out.objective)


@dataclass
class StrategicModel:
    ir: ModelIR
    primal: PrimalIndex
    dual: DualIndex
    mult: Multipliers
    buses: tuple[int, ...]
    K: np.ndarray
    O: np.ndarray
    strategic: list[int]
    lam_caps: tuple
    z_re_e: dict  # (g, t) -> col
    z_re_scc: dict  # (g, r, t) -> col
    z_bid_scc: dict  # (g, r, t) -> col
    z_bid_e: dict  # (g, t) -> col
    ul_objective: dict
    ll_objective: dict


def build_primal_dual_model(case: NetworkCase, config: MarketConfig,
                            coefficients: SccCoefficients | None,
                            strategic_cfg: StrategicConfig) -> StrategicModel:
    """Single-level MILP: leader profit minus penalty times LL duality gap."""
    scfg = strategic_cfg
    buses = _check(case, config, coefficients)
    if config.shortfall_cost is not None:
        raise BilevelError("strategic model needs hard SCC rows (shortfall_cost=None)")
    if not scfg.penalty > 0:
        raise ValueError(f"penalty must be > 0, got {scfg.penalty}")
    ids = [g.id for g in case.sync_gens]
    unknown = [s for s in scfg.strategic if s not in ids]
    if unknown:
        raise ValueError(f"unknown strategic units {unknown}")
    strategic = [ids.index(s) for s in scfg.strategic]
    G, T = len(case.sync_gens), case.horizon
    K = gen_coefficients(coefficients, buses)
    O = offer_matrix(case, config, buses)
    lam_caps = price_caps(case, config, coefficients, scfg)
    lam_e_max, lam_scc_max = lam_caps

    ir = ModelIR("strategic_pd")
    ir.maximize = True
    pidx = add_primal(ir, case, config, coefficients, buses, K, integral=True)

    m_cols = np.full((G, T), -1, dtype=int)
    scc_cols = {}
    for g in strategic:
        gen = case.sync_gens[g]
        cap = scfg.cap_m(gen.id)
        for t in range(T):
            m_cols[g, t] = ir.add_var(f"beta_m[{gen.id},{t + 1}]", 1.0, cap)
        for r, b in enumerate(buses):
            if np.any(O[g, r] != 0.0):
                cap = scfg.cap_scc(gen.id, b)
                scc_cols[(g, r)] = np.array(
                    [ir.add_var(f"beta_scc[{gen.id},{b},{t + 1}]", 1.0, cap) for t in range(T)],
                    dtype=int)
    mult = Multipliers(m_cols, scc_cols, is_var=True)
    _, didx = build_dual_ll(case, config, coefficients, scfg, ir=ir, multipliers=mult,
                            lam_caps=lam_caps)

    # SGs without an SCC offer anywhere earn no SCC revenue
    no_offer = {ids.index(gid) for gid in zero_offer_units(case, config)}
    z_re_e, z_re_scc, z_bid_scc, z_bid_e = {}, {}, {}, {}
    for g in strategic:
        gen = case.sync_gens[g]
        pmax = gen.p_max
        cap_m = scfg.cap_m(gen.id)
        for t in range(T):
            tag = f"{gen.id},{t + 1}"
            u, p, lam, bm = (int(pidx.u[g, t]), int(pidx.p[g, t]), int(didx.lam_e[t]),
                             int(m_cols[g, t]))
            # energy revenue: lam in [0, lam_e_max], p in [0, pmax]
            z = ir.add_var(f"zre_e[{tag}]", 0.0, lam_e_max * pmax)
            z_re_e[(g, t)] = z
            ir.add_row({z: 1.0, p: -lam_e_max}, "<=", 0.0, f"mc_re_e_a[{tag}]")
            ir.add_row({z: 1.0, lam: -pmax}, "<=", 0.0, f"mc_re_e_b[{tag}]")
            ir.add_row({z: 1.0, p: -lam_e_max, lam: -pmax}, ">=", -lam_e_max * pmax,
                       f"mc_re_e_c[{tag}]")
            # energy bid: beta in [1, cap_m], p in [0, pmax]
            z = ir.add_var(f"zbid_e[{tag}]", 0.0, cap_m * pmax)
            z_bid_e[(g, t)] = z
            ir.add_row({z: 1.0, p: -1.0}, ">=", 0.0, f"mc_bid_e_a[{tag}]")
            ir.add_row({z: 1.0, p: -cap_m, bm: -pmax}, ">=", -cap_m * pmax, f"mc_bid_e_b[{tag}]")
            ir.add_row({z: 1.0, p: -cap_m}, "<=", 0.0, f"mc_bid_e_c[{tag}]")
            ir.add_row({z: 1.0, p: -1.0, bm: -pmax}, "<=", -pmax, f"mc_bid_e_d[{tag}]")
            for r, b in enumerate(buses):
                tag_b = f"{gen.id},{b},{t + 1}"
                lam_s = int(didx.lam_scc[r, t])
                if K[r, g] > 0 and lam_s >= 0 and g not in no_offer:
                    M = lam_scc_max[r, t] * K[r, g]
                    z = ir.add_var(f"zre_scc[{tag_b}]", 0.0, M)
                    z_re_scc[(g, r, t)] = z
                    ir.add_row({z: 1.0, u: -M}, "<=", 0.0, f"mc_re_scc_a[{tag_b}]")
                    ir.add_row({z: 1.0, lam_s: -K[r, g]}, "<=", 0.0, f"mc_re_scc_b[{tag_b}]")
                    ir.add_row({z: 1.0, lam_s: -K[r, g], u: -M}, ">=", -M, f"mc_re_scc_c[{tag_b}]")
                if (g, r) in scc_cols:
                    cap = scfg.cap_scc(gen.id, b)
                    bs = int(scc_cols[(g, r)][t])
                    z = ir.add_var(f"zbid_scc[{tag_b}]", 0.0, cap)
                    z_bid_scc[(g, r, t)] = z
                    ir.add_row({z: 1.0, u: -1.0}, ">=", 0.0, f"mc_bid_scc_a[{tag_b}]")
                    ir.add_row({z: 1.0, u: -cap}, "<=", 0.0, f"mc_bid_scc_b[{tag_b}]")
                    ir.add_row({z: 1.0, bs: -1.0, u: -cap}, ">=", -cap, f"mc_bid_scc_c[{tag_b}]")
                    ir.add_row({z: 1.0, bs: -1.0, u: -1.0}, "<=", -1.0, f"mc_bid_scc_d[{tag_b}]")

    ul: dict[int, float] = {}

    def put(d, j, c):
        if c:
            d[int(j)] = d.get(int(j), 0.0) + float(c)

    for g in strategic:
        gen = case.sync_gens[g]
        for t in range(T):
            put(ul, z_re_e[(g, t)], 1.0)
            for r in range(len(buses)):
                if (g, r, t) in z_re_scc:
                    put(ul, z_re_scc[(g, r, t)], 1.0)
            put(ul, pidx.u[g, t], -gen.no_load_cost)
            put(ul, pidx.p[g, t], -gen.marginal_cost)
            put(ul, pidx.cst[g, t], -1.0)
            put(ul, pidx.csh[g, t], -1.0)

    ll: dict[int, float] = {}
    strat = set(strategic)
    for g, gen in enumerate(case.sync_gens):
        for t in range(T):
            put(ll, pidx.u[g, t], gen.no_load_cost)
            put(ll, pidx.cst[g, t], 1.0)
            put(ll, pidx.csh[g, t], 1.0)
            if g in strat:
                put(ll, z_bid_e[(g, t)], gen.marginal_cost)
            else:
                put(ll, pidx.p[g, t], gen.marginal_cost)
            for r in range(len(buses)):
                if (g, r, t) in z_bid_scc:
                    put(ll, z_bid_scc[(g, r, t)], O[g, r, t])
                else:
                    put(ll, pidx.u[g, t], O[g, r, t])
    for c, ibr in enumerate(case.ibr_units):
        for t in range(T):
            put(ll, pidx.pc[c, t], ibr.energy_bid)

    W = scfg.penalty
    total = dict(ul)
    for j, c in ll.items():
        put(total, j, -W * c)
    for j, c in didx.objective.items():
        put(total, j, W * c)
    ir.add_objective(total)
    return StrategicModel(ir, pidx, didx, mult, buses, K, O, strategic, lam_caps,
                          z_re_e, z_re_scc, z_bid_scc, z_bid_e, ul, ll)


@dataclass
class BilevelSolution:
    status: str
    beta_m: np.ndarray  # (G, T), 1 for non-strategic units
    beta_scc: np.ndarray  # (G, B_s, T), 1 where no multiplier exists
    clearing: ClearingResult
    duals: DualSolution
    ul_profit: dict  # strategic SG id -> EUR, from the linearized leader objective
    primal_value: float  # linearized LL objective, as penalized in the model
    dual_value: float
    duality_gap: float
    r_dg: float
    z: dict  # family -> {key: value}
    penalty: float
    strategic: tuple[str, ...]
    objective: float
    mip_gap: float | None
    wall_time: float
    envelope_error: float  # max |z - product| over binary-factor envelopes
    primal_exact: float = float("nan")  # LL objective with exact multiplier products
    k_eff: np.ndarray | None = None  # (B_s, G) SG coefficients of the SCC rows
    scc_excluded: tuple[str, ...] = ()  # SGs without SCC offers, no SCC revenue

    @property
    def profit(self) -> float:
        return float(sum(self.ul_profit.values()))

    @property
    def is_optimal(self) -> bool:
        return self.status == "Optimal"


def _polish(sm: StrategicModel, x: np.ndarray, options: SolverOptions) -> SolveOutcome | None:
    ints = [j for j, f in enumerate(sm.ir.integer) if f]
    fixed = sm.ir.fixed({j: round(float(x[j])) for j in ints})
    out = solve(fixed, options)
    return out if out.ok else None


def zero_offer_units(case: NetworkCase, config: MarketConfig) -> tuple[str, ...]:
    """SG ids whose SCC offers are zero at every constrained bus."""
    buses = config.buses_for(case)
    O = offer_matrix(case, config, buses)
    return tuple(g.id for i, g in enumerate(case.sync_gens) if not np.any(O[i]))


def solve_strategic(case: NetworkCase, config: MarketConfig,
                    coefficients: SccCoefficients | None,
                    strategic_cfg: StrategicConfig) -> BilevelSolution:
    sm = build_primal_dual_model(case, config, coefficients, strategic_cfg)
    out = solve(sm.ir, config.options)
    if not out.has_solution:
        raise SolverError(f"strategic model ended with status {out.status}")
    x = out.x
    if strategic_cfg.polish and out.status == "Optimal":
        pol = _polish(sm, x, config.options)
        if pol is not None and pol.objective >= out.objective - 1e-7 * max(1.0, abs(out.objective)):
            x = pol.x
    return _solution(case, config, strategic_cfg, sm, out, x)


def _solution(case, config, scfg, sm: StrategicModel, out: SolveOutcome, x) -> BilevelSolution:
    G, T, B = len(case.sync_gens), case.horizon, len(sm.buses)
    pidx, didx = sm.primal, sm.dual
    u = np.round(x[pidx.u]).astype(float)
    p, cst, csh, pc = x[pidx.p], x[pidx.cst], x[pidx.csh], x[pidx.pc]
    beta_m = np.ones((G, T))
    for g in sm.strategic:
        beta_m[g] = x[sm.mult.m[g]]
    beta_scc = np.ones((G, B, T))
    for (g, r), cols in sm.mult.scc.items():
        beta_scc[g, r] = x[cols]

    def vals(a):
        return np.asarray(x[a]) if a.size else np.zeros(a.shape)

    lam_e = x[didx.lam_e]
    lam_scc = np.where(didx.lam_scc >= 0, x[np.maximum(didx.lam_scc, 0)], 0.0)
    dual_value = float(sum(c * x[j] for j, c in didx.objective.items()))
    duals = DualSolution(lam_e, lam_scc, vals(didx.mu_min), vals(didx.mu_max), vals(didx.pi_rd),
                         vals(didx.pi_ru), vals(didx.sig_st), vals(didx.sig_sh),
                         vals(didx.psi_max), vals(didx.zeta), dual_value)

    # LL primal value from the stored variables: linearized (as penalized) and exact
    primal_value = float(sum(c * x[j] for j, c in sm.ll_objective.items()))
    primal_exact = 0.0
    for g, gen in enumerate(case.sync_gens):
        primal_exact += float(gen.no_load_cost * u[g].sum() + cst[g].sum() + csh[g].sum()
                              + gen.marginal_cost * (beta_m[g] @ p[g]))
        for r in range(B):
            primal_exact += float((sm.O[g, r] * beta_scc[g, r]) @ u[g])
    for c, ibr in enumerate(case.ibr_units):
        primal_exact += float(ibr.energy_bid * pc[c].sum())
    gap = primal_value - dual_value
    r_dg = compute_dg_ratio(primal_value, dual_value) if primal_value else float("nan")

    z = {
        "re_e": {k: float(x[j]) for k, j in sm.z_re_e.items()},
        "re_scc": {k: float(x[j]) for k, j in sm.z_re_scc.items()},
        "bid_scc": {k: float(x[j]) for k, j in sm.z_bid_scc.items()},
        "bid_e": {k: float(x[j]) for k, j in sm.z_bid_e.items()},
    }
    err = 0.0
    for (g, r, t), v in z["re_scc"].items():
        err = max(err, abs(v - lam_scc[r, t] * sm.K[r, g] * u[g, t]))
    for (g, r, t), v in z["bid_scc"].items():
        err = max(err, abs(v - beta_scc[g, r, t] * u[g, t]))
    if err > BINARY_TOL:
        log.warning("binary-factor envelope mismatch %.3e", err)

    ul_profit = {}
    for g in sm.strategic:
        ul_profit[case.sync_gens[g].id] = float(sum(c * x[j] for j, c in sm.ul_objective.items()
                                                    if _owner(sm, j) == g))
    excluded = zero_offer_units(case, config)
    revenue = revenue_decomposition(case, sm.buses, sm.K, u, p, cst, csh, pc, lam_e, lam_scc,
                                    excluded_scc=excluded)
    clearing = ClearingResult(out.status, u, p, cst, csh, pc, primal_exact,
                              _hourly_cost(case, u, p, cst, csh, pc), lam_e, lam_scc,
                              sm.buses, revenue, out.mip_gap, out.wall_time)
    return BilevelSolution(out.status, beta_m, beta_scc, clearing, duals, ul_profit,
                           primal_value, dual_value, gap, r_dg, z, scfg.penalty,
                           tuple(scfg.strategic), float(out.objective), out.mip_gap,
                           out.wall_time, err, primal_exact, sm.K, excluded)


def _owner(sm: StrategicModel, j: int) -> int:
    if not hasattr(sm, "_owners"):
        own = {}
        for g in sm.strategic:
            for a in (sm.primal.u[g], sm.primal.p[g], sm.primal.cst[g], sm.primal.csh[g]):
                own.update({int(c): g for c in a})
        for (g, *_), c in list(sm.z_re_e.items()) + list(sm.z_re_scc.items()):
            own[int(c)] = g
        sm._owners = own
    return sm._owners.get(int(j), -1)


@dataclass
class SweepRow:
    penalty: float
    r_dg: float | None
    profit: float | None
    status: str
    error: str | None = None
    solution: BilevelSolution | None = field(default=None, repr=False)


@dataclass
class SweepTable:
    rows: list[SweepRow]

    def _series(self, attr):
        return [getattr(r, attr) for r in self.rows if r.error is None]

    @property
    def dg_non_increasing(self) -> bool:
        v = [abs(x) for x in self._series("r_dg")]
        return all(b <= a + 1e-9 for a, b in zip(v, v[1:]))

    @property
    def profit_non_increasing(self) -> bool:
        v = self._series("profit")
        return all(b <= a + 1e-6 * max(1.0, abs(a)) for a, b in zip(v, v[1:]))


def sweep_penalty(case: NetworkCase, config: MarketConfig, coefficients: SccCoefficients | None,
                  strategic_cfg: StrategicConfig, W_list) -> SweepTable:
    """One strategic solve per penalty value; failures are recorded, not raised."""
    W_list = sorted(float(w) for w in W_list)
    if not W_list or any(w <= 0 for w in W_list):
        raise ValueError("W_list must be nonempty with positive entries")
    rows = []
    for W in W_list:
        try:
            sol = solve_strategic(case, config, coefficients, replace(strategic_cfg, penalty=W))
        except (SolverError, BilevelError) as exc:
            log.warning("W=%g failed: %s", W, exc)
            rows.append(SweepRow(W, None, None, "Failed", str(exc)))
            continue
        rows.append(SweepRow(W, sol.r_dg, sol.profit, sol.status, None, sol))
    table = SweepTable(rows)
    if not table.dg_non_increasing:
        log.info("|r_dg| is not non-increasing in W for %s", strategic_cfg.strategic)
    if not table.profit_non_increasing:
        log.info("profit is not non-increasing in W for %s", strategic_cfg.strategic)
    return table
