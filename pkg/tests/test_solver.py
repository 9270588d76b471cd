import itertools
import re
import subprocess

import numpy as np
from pulp.apis.coin_api import pulp_cbc_path
import pytest
from hypothesis import given, settings, strategies as st

from sccmarket.market import MarketConfig, build_competitive_model
from sccmarket.solver import (MalformedModel, ModelIR, SolverOptions, export_lp, read_lp,
                              sanitize_names, solve)


def cbc_objective(path):
    sol = str(path) + ".sol"
    subprocess.run([pulp_cbc_path, str(path), "solve", "solu", sol],
                   check=True, capture_output=True)
    head = open(sol).readline()
    assert head.startswith("Optimal"), head
    return float(re.search(r"objective value\s+(\S+)", head).group(1))


def knapsack(values, weights, cap):
    m = ModelIR("knap")
    xs = [m.add_var(f"x{i}", 0, 1, integer=True) for i in range(len(values))]
    m.add_row(dict(zip(xs, weights)), "<=", cap, "cap")
    m.add_objective(dict(zip(xs, values)))
    m.maximize = True
    return m


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 30), st.integers(1, 20)), min_size=1, max_size=8),
       st.integers(5, 60))
def test_mip_matches_enumeration(items, cap):
    values, weights = zip(*items)
    best = max(sum(v for v, b in zip(values, bits) if b)
               for bits in itertools.product((0, 1), repeat=len(items))
               if sum(w for w, b in zip(weights, bits) if b) <= cap)
    out = solve(knapsack(values, weights, cap), SolverOptions(mip_rel_gap=0))
    assert out.objective == pytest.approx(best)


@pytest.mark.parametrize("maximize", [False, True])
def test_row_duals_are_objective_sensitivities(maximize):
    # min/max 3x + 2y  s.t. x + y >= 4, x - y <= 1, y <= 10
    def build(rhs):
        m = ModelIR()
        x, y = m.add_var("x"), m.add_var("y", 0, 10)
        m.add_row({x: 1, y: 1}, ">=" if not maximize else "<=", rhs, "a")
        m.add_row({x: 1, y: -1}, "<=", 1, "b")
        m.add_objective({x: 3, y: 2})
        m.maximize = maximize
        return m

    out = solve(build(4.0))
    fd = (solve(build(4.001)).objective - out.objective) / 1e-3
    assert out.dual("a") == pytest.approx(fd, rel=1e-6)


def test_statuses():
    m = ModelIR()
    x = m.add_var("x")
    m.add_row({x: 1}, ">=", 2, "lo")
    m.add_row({x: 1}, "<=", 1, "hi")
    assert solve(m).status == "Infeasible"
    u = ModelIR()
    y = u.add_var("y", -np.inf, np.inf)
    u.add_objective({y: 1})
    assert solve(u).status in ("Unbounded", "UnboundedOrInfeasible")


def test_malformed_models_are_rejected():
    m = ModelIR()
    x = m.add_var("x")
    with pytest.raises(MalformedModel):
        m.add_var("x")
    with pytest.raises(MalformedModel):
        m.add_row({x: 1}, "<", 1, "r")
    with pytest.raises(MalformedModel):
        m.add_row({5: 1}, "<=", 1, "r")
    m.add_objective({x: float("nan")})
    with pytest.raises(MalformedModel):
        solve(m)


def test_names_are_made_lp_safe_and_unique():
    out = sanitize_names(["u[g1,3]", "u[g1;3]", "2x", "e1"], "v_")
    assert len(set(out.values())) == 4
    assert all(re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", v) for v in out.values())
    assert not out["e1"].lower().startswith("e")


def test_lp_round_trip_and_cbc_cross_check(tmp_path, toy, toy_coef, toy_cfg):
    mm = build_competitive_model(toy, toy_cfg, toy_coef)
    path = tmp_path / "toy.lp"
    export_lp(mm.ir, path)
    assert (tmp_path / "toy.lp.names.csv").exists()
    ours = solve(mm.ir, SolverOptions(mip_rel_gap=0)).objective
    back = solve(read_lp(path), SolverOptions(mip_rel_gap=0)).objective
    assert back == pytest.approx(ours, rel=1e-9)
    assert cbc_objective(path) == pytest.approx(ours, rel=1e-6)


def test_fixed_copy_leaves_original_untouched(toy, toy_coef):
    mm = build_competitive_model(toy, MarketConfig(i_lim=2.7), toy_coef)
    j = int(mm.idx.u[1, 0])
    f = mm.ir.fixed({j: 1.0})
    assert f.lb[j] == f.ub[j] == 1.0 and not f.is_mip
    assert mm.ir.ub[j] == 1.0 and mm.ir.lb[j] == 0.0 and mm.ir.is_mip


def test_trivial_lp():
    m = ModelIR()
    x = m.add_var("x", 0, 10)
    m.add_row({x: 1}, ">=", 3, "lo")
    m.add_objective({x: 1})
    out = solve(m)
    assert out.status == "Optimal" and out.value("x") == pytest.approx(3) and out.objective == pytest.approx(3)


def test_model_without_rows_exports_bounds_only(tmp_path):
    m = ModelIR("bare")
    m.add_var("x", 1, 2)
    path = tmp_path / "bare.lp"
    export_lp(m, path)
    text = path.read_text()
    assert "Subject To" not in text and "Bounds" in text
    assert solve(read_lp(path)).objective == pytest.approx(0.0)
