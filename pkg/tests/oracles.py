"""Independent reference solvers for small cases.

Unit commitment by exhaustive enumeration of the binaries with an LP
(scipy ``linprog``) for every commitment pattern. Nothing here imports the
package's model builders.
"""
import itertools

import numpy as np
from scipy.optimize import linprog


class EnumLL:
    """Day-ahead clearing of a small case, rows written as ``a.x >= rhs``."""

    def __init__(self, case, k_gen, k_ibr, i_lim, beta_m=None, scc_offers=None):
        self.case = case
        self.G, self.T, self.C = len(case.sync_gens), case.horizon, len(case.ibr_units)
        self.k_gen = np.atleast_2d(k_gen)  # (B, G)
        self.k_ibr = np.atleast_2d(k_ibr)  # (B, C)
        self.i_lim = np.broadcast_to(np.asarray(i_lim, float), (self.k_gen.shape[0],))
        self.beta_m = np.ones((self.G, self.T)) if beta_m is None else np.asarray(beta_m, float)
        self.offers = np.zeros((self.G, self.T)) if scc_offers is None else np.asarray(scc_offers)
        self.nv = (4 * self.G + self.C) * self.T

    def col(self, kind, i, t):
        base = t * (4 * self.G + self.C)
        off = {"u": 0, "p": self.G, "cst": 2 * self.G, "csh": 3 * self.G, "pc": 4 * self.G}[kind]
        return base + off + i

    def cost_vector(self):
        c = np.zeros(self.nv)
        for t in range(self.T):
            for g, gen in enumerate(self.case.sync_gens):
                c[self.col("u", g, t)] = gen.no_load_cost + self.offers[g, t]
                c[self.col("p", g, t)] = gen.marginal_cost * self.beta_m[g, t]
                c[self.col("cst", g, t)] = 1.0
                c[self.col("csh", g, t)] = 1.0
            for i, ibr in enumerate(self.case.ibr_units):
                c[self.col("pc", i, t)] = ibr.energy_bid
        return c

    def rows(self):
        A, b, kinds = [], [], []
        alpha = self.case.capacity_factors()

        def add(d, rhs, kind):
            a = np.zeros(self.nv)
            for j, v in d.items():
                a[j] += v
            A.append(a)
            b.append(rhs)
            kinds.append(kind)

        for t in range(self.T):
            for r in range(self.k_gen.shape[0]):
                rhs = self.i_lim[r] - self.k_ibr[r] @ alpha[:, t]
                add({self.col("u", g, t): self.k_gen[r, g] for g in range(self.G)}, rhs, ("scc", r, t))
            d = {self.col("p", g, t): 1.0 for g in range(self.G)}
            d.update({self.col("pc", i, t): 1.0 for i in range(self.C)})
            add(d, float(self.case.demand[t]), ("bal", t))
            for g, gen in enumerate(self.case.sync_gens):
                u, p = self.col("u", g, t), self.col("p", g, t)
                add({p: 1.0, u: -gen.p_min}, 0.0, ("pmin", g, t))
                add({p: -1.0, u: gen.p_max}, 0.0, ("pmax", g, t))
                cst, csh = self.col("cst", g, t), self.col("csh", g, t)
                if t == 0:
                    add({p: 1.0}, gen.p0 - gen.ramp_down, ("rd", g, t))
                    add({p: -1.0}, -gen.p0 - gen.ramp_up, ("ru", g, t))
                    add({cst: 1.0, u: -gen.startup_cost}, -gen.startup_cost * gen.u0, ("st", g, t))
                    add({csh: 1.0, u: gen.shutdown_cost}, gen.shutdown_cost * gen.u0, ("sh", g, t))
                else:
                    pp, up = self.col("p", g, t - 1), self.col("u", g, t - 1)
                    add({p: 1.0, pp: -1.0}, -gen.ramp_down, ("rd", g, t))
                    add({p: -1.0, pp: 1.0}, -gen.ramp_up, ("ru", g, t))
                    add({cst: 1.0, u: -gen.startup_cost, up: gen.startup_cost}, 0.0, ("st", g, t))
                    add({csh: 1.0, u: gen.shutdown_cost, up: -gen.shutdown_cost}, 0.0, ("sh", g, t))
            for i, ibr in enumerate(self.case.ibr_units):
                add({self.col("pc", i, t): -1.0}, -alpha[i, t] * ibr.p_max, ("ibr", i, t))
        return np.array(A), np.array(b), kinds

    def row_duals(self, r):
        """Row duals of a ``solve_fixed`` result keyed by row kind."""
        _, _, kinds = self.rows()
        return dict(zip(kinds, -r.ineqlin.marginals))

    def solve_fixed(self, u):
        """LP with the commitment fixed; returns the scipy result or None."""
        A, b, _ = self.rows()
        bounds = [(0, None)] * self.nv
        for t in range(self.T):
            for g in range(self.G):
                v = float(u[g, t]) if u is not None else None
                bounds[self.col("u", g, t)] = (v, v) if u is not None else (0, 1)
        r = linprog(self.cost_vector(), A_ub=-A, b_ub=-b, bounds=bounds, method="highs")
        return r if r.status == 0 else None

    def enumerate(self):
        """Best commitment over all 2^(G*T) patterns: (cost, u, x)."""
        best = None
        for bits in itertools.product((0, 1), repeat=self.G * self.T):
            u = np.array(bits, float).reshape(self.T, self.G).T
            r = self.solve_fixed(u)
            if r is not None and (best is None or r.fun < best[0] - 1e-9):
                best = (r.fun, u, r.x)
        return best

    def relaxed_prices(self):
        """Energy and SCC row duals of the LP relaxation."""
        r = self.solve_fixed(None)
        _, _, kinds = self.rows()
        duals = -r.ineqlin.marginals
        lam_e = np.array([duals[i] for i, k in enumerate(kinds) if k[0] == "bal"])
        lam_scc = np.zeros((self.k_gen.shape[0], self.T))
        for i, k in enumerate(kinds):
            if k[0] == "scc":
                lam_scc[k[1], k[2]] = duals[i]
        return lam_e, lam_scc

    def hourly_cost(self, x):
        """Hourly cost at true marginal costs, without SCC offer terms."""
        out = np.zeros(self.T)
        for t in range(self.T):
            for g, gen in enumerate(self.case.sync_gens):
                out[t] += (gen.no_load_cost * x[self.col("u", g, t)]
                           + gen.marginal_cost * x[self.col("p", g, t)]
                           + x[self.col("cst", g, t)] + x[self.col("csh", g, t)])
            for i, ibr in enumerate(self.case.ibr_units):
                out[t] += ibr.energy_bid * x[self.col("pc", i, t)]
        return out
