import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from oracles import EnumLL
from sccmarket.bilevel import (StrategicConfig, SweepRow, SweepTable, UnboundedCap, ZeroPrimal,
                               build_dual_ll, compute_dg_ratio, fixed_binary_duality, price_caps,
                               solve_strategic, sweep_penalty)
from sccmarket.market import MarketConfig, solve_competitive
from sccmarket.solver import SolverOptions, solve

TIGHT = SolverOptions(mip_rel_gap=1e-9)


def toy_offer_array(toy, cfg):
    return np.array([cfg.scc_offers[(g.id, 3)] for g in toy.sync_gens])


def test_dg_ratio():
    assert compute_dg_ratio(100.0, 90.0) == pytest.approx(0.1)
    assert compute_dg_ratio(100.0, 110.0) == pytest.approx(-0.1)
    assert compute_dg_ratio(-50.0, -40.0) == pytest.approx(0.2)
    with pytest.raises(ZeroPrimal):
        compute_dg_ratio(0.0, 1.0)


def test_caps_must_be_finite_and_at_least_one():
    with pytest.raises(UnboundedCap):
        StrategicConfig(("g",), beta_m_max=float("inf")).cap_m("g")
    with pytest.raises(UnboundedCap):
        StrategicConfig(("g",), beta_scc_max={"h": 2.0}).cap_scc("g", 3)
    with pytest.raises(ValueError):
        StrategicConfig(("g",), beta_m_max=0.5).cap_m("g")
    assert StrategicConfig(("g",), beta_scc_max={("g", 3): 1.5, "g": 3.0}).cap_scc("g", 3) == 1.5


def test_price_caps_by_hand(toy, toy_coef, toy_cfg):
    lam_e, lam_scc = price_caps(toy, toy_cfg, toy_coef, StrategicConfig(("g-b1",)))
    # energy: max(2 * 10, 20); SCC: 2 * offer / k for g-b1, g-b2 offers nothing
    assert lam_e == 20.0
    assert lam_scc[0] == pytest.approx([2 * 550 / 2.5, 2 * 250 / 2.5])


def test_dual_has_one_row_per_primal_column(toy, toy_coef, toy_cfg):
    one = toy.truncated(1)
    cfg = MarketConfig(i_lim=2.7, scc_offers={k: v[:1] for k, v in toy_cfg.scc_offers.items()})
    ir, _ = build_dual_ll(one, cfg, toy_coef)
    # u, P, start-up and shut-down cost columns per SG, one column per IBR
    assert ir.n_rows == 4 * len(one.sync_gens) + len(one.ibr_units)
    assert all(s == "<=" for s in ir.row_sense)


def feasible_patterns(toy, toy_coef, offers):
    e = EnumLL(toy, toy_coef.k_gen, toy_coef.k_ibr, 2.7, scc_offers=offers)
    out = []
    for bits in itertools.product((0, 1), repeat=4):
        u = np.array(bits, float).reshape(2, 2)
        if e.solve_fixed(u) is not None:
            out.append(u)
    return out


def test_dual_agrees_with_highs_row_duals(toy, toy_coef, toy_cfg):
    O = toy_offer_array(toy, toy_cfg)
    e = EnumLL(toy, toy_coef.k_gen, toy_coef.k_ibr, 2.7, scc_offers=O)
    for u in feasible_patterns(toy, toy_coef, O):
        r = e.solve_fixed(u)
        D = e.row_duals(r)
        ir, idx = build_dual_ll(toy, toy_cfg, toy_coef, commitment=u)
        y = np.zeros(ir.n_vars)
        y[idx.lam_e] = [D[("bal", t)] for t in range(2)]
        for t in range(2):
            if idx.lam_scc[0, t] >= 0:
                y[idx.lam_scc[0, t]] = D[("scc", 0, t)]
            else:
                assert D[("scc", 0, t)] == pytest.approx(0.0, abs=1e-9)
        for name, arr in (("pmin", idx.mu_min), ("pmax", idx.mu_max), ("rd", idx.pi_rd),
                          ("ru", idx.pi_ru), ("st", idx.sig_st), ("sh", idx.sig_sh)):
            for g, t in np.ndindex(arr.shape):
                y[arr[g, t]] = D[(name, g, t)]
        for c, t in np.ndindex(idx.zeta.shape):
            y[idx.zeta[c, t]] = D[("ibr", c, t)]
        # the fixed u box absorbs the u-column residual
        act = ir.row_activity(y)
        for g, t in np.ndindex(u.shape):
            i = ir.row(f"dual_u[{toy.sync_gens[g].id},{t + 1}]")
            slack = ir.rhs[i] - act[i]
            y[idx.psi_max[g, t]] = max(0.0, -slack)
            y[idx.psi_min[g, t]] = max(0.0, slack)
        act = ir.row_activity(y)
        assert np.all(act <= np.array(ir.rhs) + 1e-7)
        assert ir.objective_value(y) == pytest.approx(r.fun, rel=1e-9, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 15), st.lists(st.floats(1.0, 2.0), min_size=6, max_size=6))
def test_fixed_binary_strong_duality(toy, toy_coef, toy_cfg, pick, betas):
    O = toy_offer_array(toy, toy_cfg)
    pats = feasible_patterns(toy, toy_coef, O)
    u = pats[pick % len(pats)]
    bm = np.array(betas[:4]).reshape(2, 2)
    chk = fixed_binary_duality(toy, toy_cfg, toy_coef, u, beta_m=bm,
                               beta_scc={(0, 0): np.array(betas[4:])})
    assert chk.rel_gap <= 1e-6


def test_unit_caps_reduce_to_competitive_clearing(toy, toy_coef, toy_cfg):
    cfg = MarketConfig(i_lim=2.7, scc_offers=toy_cfg.scc_offers, options=TIGHT)
    comp = solve_competitive(toy, cfg, toy_coef)
    for W in (10.0, 1000.0):
        sol = solve_strategic(toy, cfg, toy_coef,
                              StrategicConfig(("g-b1",), beta_m_max=1.0, beta_scc_max=1.0, penalty=W))
        assert abs(sol.clearing.cost - comp.cost) <= 1e-6 * comp.cost


def test_envelopes_with_binary_factor_are_exact(toy, toy_coef, toy_cfg):
    sol = solve_strategic(toy, toy_cfg, toy_coef, StrategicConfig(("g-b1",), penalty=10.0))
    assert sol.is_optimal
    u = sol.clearing.u
    for (g, r, t), v in sol.z["bid_scc"].items():
        assert v == pytest.approx(sol.beta_scc[g, r, t] * u[g, t], abs=1e-6)
    for (g, r, t), v in sol.z["re_scc"].items():
        assert v == pytest.approx(sol.clearing.lambda_scc[r, t] * sol.k_eff[r, g] * u[g, t], abs=1e-6)
    assert sol.envelope_error <= 1e-6


def test_multipliers_stay_within_caps(toy, toy_coef, toy_cfg):
    sol = solve_strategic(toy, toy_cfg, toy_coef,
                          StrategicConfig(("g-b1",), beta_m_max=1.5, beta_scc_max=1.2))
    assert np.all((sol.beta_m >= 1 - 1e-9) & (sol.beta_m <= 1.5 + 1e-9))
    assert np.all((sol.beta_scc >= 1 - 1e-9) & (sol.beta_scc <= 1.2 + 1e-9))
    assert np.all(sol.beta_m[1] == 1.0)
    assert "g-b2" in sol.scc_excluded


def grid_search(toy, toy_coef, O, resolution=0.1):
    """Leader profit over a grid of energy multipliers (SCC multiplier held at 1)."""
    grid = np.round(np.arange(1.0, 2.0 + 1e-9, resolution), 10)
    gen = toy.sync_gens[0]
    best = -np.inf
    for b in itertools.product(grid, repeat=toy.horizon):
        bm = np.array([b, np.ones(toy.horizon)])
        e = EnumLL(toy, toy_coef.k_gen, toy_coef.k_ibr, 2.7, beta_m=bm, scc_offers=O)
        _, u, x = e.enumerate()
        lam_e, lam_scc = e.relaxed_prices()
        p = np.array([x[e.col("p", 0, t)] for t in range(toy.horizon)])
        cost = sum(gen.no_load_cost * u[0, t] + gen.marginal_cost * p[t]
                   + x[e.col("cst", 0, t)] + x[e.col("csh", 0, t)] for t in range(toy.horizon))
        best = max(best, float(lam_e @ p + (lam_scc[0] * toy_coef.k_gen[0, 0]) @ u[0] - cost))
    return best


def test_strategic_profit_beats_grid_search(toy, toy_coef, toy_cfg):
    best = grid_search(toy, toy_coef, toy_offer_array(toy, toy_cfg))
    for W in (1.0, 10.0, 1000.0):
        sol = solve_strategic(toy, toy_cfg, toy_coef,
                              StrategicConfig(("g-b1",), beta_scc_max=1.0, penalty=W))
        assert sol.profit >= best - 1e-6 * abs(best)


def test_sweep_table_shape_checks():
    rows = [SweepRow(1, -0.05, 10.0, "Optimal"), SweepRow(10, 0.03, 9.0, "Optimal"),
            SweepRow(100, None, None, "Failed", "boom"), SweepRow(1000, 0.03, 9.0, "Optimal")]
    t = SweepTable(rows)
    assert t.dg_non_increasing and t.profit_non_increasing
    assert not SweepTable([SweepRow(1, 0.01, 1, "Optimal"), SweepRow(2, -0.02, 1, "Optimal")]).dg_non_increasing


def test_sweep_sorts_penalties(toy, toy_coef, toy_cfg):
    table = sweep_penalty(toy, toy_cfg, toy_coef, StrategicConfig(("g-b1",)), [100, 1, 10])
    assert [r.penalty for r in table.rows] == [1.0, 10.0, 100.0]
    assert all(r.error is None for r in table.rows)
    with pytest.raises(ValueError):
        sweep_penalty(toy, toy_cfg, toy_coef, StrategicConfig(("g-b1",)), [])


def test_dual_value_matches_dual_objective(toy, toy_coef, toy_cfg):
    sol = solve_strategic(toy, toy_cfg, toy_coef, StrategicConfig(("g-b1",), penalty=1000.0))
    assert sol.duality_gap == pytest.approx(sol.primal_value - sol.dual_value)
    assert sol.r_dg == pytest.approx(compute_dg_ratio(sol.primal_value, sol.dual_value))
    assert sol.duals.lambda_e.shape == (toy.horizon,)


def test_relaxed_dual_bounds_the_relaxed_primal(toy, toy_coef, toy_cfg):
    ir, _ = build_dual_ll(toy, toy_cfg, toy_coef)
    d = solve(ir)
    e = EnumLL(toy, toy_coef.k_gen, toy_coef.k_ibr, 2.7, scc_offers=toy_offer_array(toy, toy_cfg))
    assert d.objective == pytest.approx(e.solve_fixed(None).fun, rel=1e-9)


def test_no_strategic_units_reproduce_competitive_clearing(toy, toy_coef, toy_cfg):
    cfg = MarketConfig(i_lim=2.7, scc_offers=toy_cfg.scc_offers, options=TIGHT)
    comp = solve_competitive(toy, cfg, toy_coef)
    sol = solve_strategic(toy, cfg, toy_coef, StrategicConfig((), penalty=10.0))
    assert sol.profit == 0.0
    assert np.array_equal(sol.clearing.u, comp.u)
    assert sol.clearing.cost == pytest.approx(comp.cost, rel=1e-9)
    for gid, rev in comp.revenue.items():
        assert sol.clearing.revenue[gid]["cost"] == pytest.approx(rev["cost"], abs=1e-6)


def test_repeated_penalty_gives_identical_rows(toy, toy_coef, toy_cfg):
    a, b = sweep_penalty(toy, toy_cfg, toy_coef, StrategicConfig(("g-b1",)), [10, 10]).rows
    assert (a.r_dg, a.profit) == (b.r_dg, b.profit)
    assert np.array_equal(a.solution.beta_m, b.solution.beta_m)


def test_huge_penalty_reaches_the_smallest_gap(toy, toy_coef, toy_cfg):
    from sccmarket.bilevel import build_primal_dual_model

    scfg = StrategicConfig(("g-b1",), penalty=1e6)
    sol = solve_strategic(toy, toy_cfg, toy_coef, scfg)
    # same feasible set, objective: minimize LL primal minus LL dual only
    sm = build_primal_dual_model(toy, toy_cfg, toy_coef, scfg)
    sm.ir.obj = {}
    sm.ir.add_objective({j: -c for j, c in sm.ll_objective.items()})
    sm.ir.add_objective(sm.dual.objective)
    out = solve(sm.ir, TIGHT)
    primal = sum(c * out.x[j] for j, c in sm.ll_objective.items())
    dual = sum(c * out.x[j] for j, c in sm.dual.objective.items())
    assert sol.r_dg == pytest.approx(compute_dg_ratio(primal, dual), abs=1e-6)
