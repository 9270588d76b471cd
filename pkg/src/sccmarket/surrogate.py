"""Linear SCC surrogate: sample generation, LP training and error scoring.

The surrogate approximates the exact SCC at a bus as

    I_L = sum_g k_bg u_g + sum_c k_bc alpha_c + sum_m k_bm u_g1 u_g2

and is trained, bus by bus, so that ``I_L >= I_lim`` is a safe proxy for
``I_SC >= I_lim``. Optimistic mistakes (Type-I) are heavily penalized.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import NetworkCase, NoGroundingPath, build_admittance, impedance_matrix, scc_from_impedance
from .solver import ModelIR, SolverError, SolverOptions, solve

log = logging.getLogger(__name__)


class DegenerateFit(ValueError):
    """A bus has samples of only one label class."""


class DegenerateFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SccSample:
    commitment: np.ndarray  # (G,) 0/1
    alpha: np.ndarray  # (C,)
    scc: np.ndarray  # (n_buses,) exact SCC at ``buses``
    buses: tuple[int, ...]

    def labels(self, i_lim) -> np.ndarray:
        """True where the bus is secure."""
        return self.scc >= np.broadcast_to(np.asarray(i_lim, dtype=float), self.scc.shape)


def pair_index(n_gens: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n_gens), 2))


def features(u, alpha, use_pairs: bool) -> np.ndarray:
    """Design matrix rows ``[u, alpha, (u_i u_j for i<j)]``."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    if not use_pairs:
        return np.hstack([u, alpha])
    i, j = np.triu_indices(u.shape[1], k=1)
    return np.hstack([u, alpha, u[:, i] * u[:, j]])


def status_locked(case: NetworkCase) -> np.ndarray:
    """SGs whose ramp limits make any status change infeasible.

    An online unit with ``p_min > ramp_down`` can never ramp to zero, and an
    offline unit with ``p_min > ramp_up`` can never reach ``p_min``.
    """
    return np.array([(g.u0 == 1 and g.p_min > g.ramp_down) or (g.u0 == 0 and g.p_min > g.ramp_up)
                     for g in case.sync_gens], dtype=bool)


def generate_samples(case: NetworkCase, n_samples: int, policy: str = "uniform",
                     alpha_policy: str = "series", seed: int = 0,
                     max_draws: int = 1_000_000) -> list[SccSample]:
    """Label commitment/capacity-factor draws with the exact SCC oracle.

    Policies (all start with the all-on and all-off anchors):

    * ``"uniform"``: Bernoulli(1/2) commitments.
    * ``"reachable"``: status-locked units stay at ``u0``, the rest are
      Bernoulli(1/2), and draws whose SG plus IBR capacity cannot cover the
      lowest demand are rejected. This concentrates samples on the states a
      clearing can actually produce.
    * ``"anchors-only"``: alternate the two anchors.

    ``alpha_policy`` is ``"series"`` (a random hour of the case's
    capacity-factor series) or ``"uniform"``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if policy not in ("uniform", "reachable", "anchors-only"):
        raise ValueError(f"unknown sampling policy {policy!r}")
    if alpha_policy not in ("series", "uniform"):
        raise ValueError(f"unknown alpha policy {alpha_policy!r}")
    rng = np.random.default_rng(seed)
    G, C = len(case.sync_gens), len(case.ibr_units)
    series = case.capacity_factors()

    def draw_alpha():
        if alpha_policy == "series":
            return series[:, rng.integers(series.shape[1])]
        return rng.uniform(0.0, 1.0, size=C)

    anchors = [np.ones(G, dtype=int), np.zeros(G, dtype=int)]
    if policy == "anchors-only":
        commitments = [anchors[k % 2] for k in range(n_samples)]
        alphas = [draw_alpha() for _ in commitments]
    else:
        commitments = anchors[:n_samples]
        alphas = [draw_alpha() for _ in commitments]
        locked = status_locked(case) if policy == "reachable" else np.zeros(G, dtype=bool)
        u0 = np.array([g.u0 for g in case.sync_gens])
        p_max = np.array([g.p_max for g in case.sync_gens])
        c_max = np.array([c.p_max for c in case.ibr_units])
        d_min = float(np.min(case.demand))
        draws = 0
        while len(commitments) < n_samples:
            draws += 1
            if draws > max_draws:
                raise RuntimeError(f"sampling policy {policy!r} accepted too few draws")
            u = rng.integers(0, 2, size=G)
            a = draw_alpha()
            if policy == "reachable":
                u[locked] = u0[locked]
                if p_max @ u + c_max @ a < d_min:
                    continue
            commitments.append(u)
            alphas.append(a)

    buses = tuple(case.monitored_buses)
    pos = np.array([case.bus_index(b) for b in buses], dtype=int)
    cache: dict = {}
    out = []
    for u, a in zip(commitments, alphas):
        key = tuple(int(v) for v in u)
        if key not in cache:
            try:
                cache[key] = impedance_matrix(build_admittance(case, np.array(key)))
            except NoGroundingPath:
                cache[key] = None
        Z = cache[key]
        if Z is None:
            scc = np.zeros(len(buses))
        else:
            scc = scc_from_impedance(case, Z, key, a)[pos]
        out.append(SccSample(np.array(key), np.asarray(a, dtype=float), scc, buses))
    return out


@dataclass
class SccCoefficients:
    """Trained surrogate for a set of buses.

    ``k_gen`` is (n_buses, G), ``k_ibr`` is (n_buses, C) and ``k_pair`` is
    (n_buses, |pairs|) or ``None`` when trained without pair terms.
    """
    buses: tuple[int, ...]
    k_gen: np.ndarray
    k_ibr: np.ndarray
    k_pair: np.ndarray | None = None
    i_lim: dict = field(default_factory=dict)
    degenerate: tuple[int, ...] = ()
    objective: dict = field(default_factory=dict)

    @property
    def trained_with_pairs(self) -> bool:
        return self.k_pair is not None

    def row(self, bus: int) -> int:
        return self.buses.index(bus)

    def approximate(self, u, alpha, buses=None) -> np.ndarray:
        """Surrogate SCC for one state (or a batch), shape (..., n_buses)."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        X = features(u, alpha, self.trained_with_pairs)
        K = self.matrix()
        if buses is not None:
            K = K[[self.row(b) for b in buses]]
        out = X @ K.T
        return out[0] if single else out

    def matrix(self) -> np.ndarray:
        parts = [self.k_gen, self.k_ibr]
        if self.k_pair is not None:
            parts.append(self.k_pair)
        return np.hstack(parts)

    def pairs_free(self) -> "SccCoefficients":
        """Same coefficients with the pair terms dropped."""
        return SccCoefficients(self.buses, self.k_gen.copy(), self.k_ibr.copy(), None,
                               dict(self.i_lim), self.degenerate, dict(self.objective))

    def to_dict(self) -> dict:
        return {
            "buses": list(self.buses),
            "k_gen": self.k_gen.tolist(),
            "k_ibr": self.k_ibr.tolist(),
            "k_pair": None if self.k_pair is None else self.k_pair.tolist(),
            "i_lim": {str(b): v for b, v in self.i_lim.items()},
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SccCoefficients":
        return cls(tuple(d["buses"]), np.asarray(d["k_gen"], dtype=float),
                   np.asarray(d["k_ibr"], dtype=float),
                   None if d.get("k_pair") is None else np.asarray(d["k_pair"], dtype=float),
                   {int(b): float(v) for b, v in d.get("i_lim", {}).items()},
                   tuple(d.get("degenerate", ())))


def _fit_one_bus(X, y, i_lim, type1_weight, margin, fit_weight, n_sign_free, upper, options):
    """Soft-margin LP for one bus; returns (coef, objective value)."""
    n, p = X.shape
    secure = y >= i_lim
    target = np.minimum(y, 2.0 * i_lim)
    m = ModelIR("scc_fit")
    n_pos = p - n_sign_free
    kcols = [m.add_var(f"k{j}", 0.0 if j < n_pos else -np.inf, upper[j]) for j in range(p)]
    slack = [m.add_var(f"s{i}") for i in range(n)]
    dev = [m.add_var(f"d{i}") for i in range(n)] if fit_weight > 0 else []
    cols = kcols + slack
    A = np.hstack([X, np.zeros((n, n))])
    # secure: X k + s >= i_lim ; insecure: X k - s <= i_lim - margin
    ins = np.where(~secure)[0]
    sec = np.where(secure)[0]
    A_sec = A[sec].copy()
    A_sec[np.arange(len(sec)), p + sec] = 1.0
    m.add_rows(cols, A_sec, ">=", np.full(len(sec), i_lim), [f"sec{i}" for i in sec])
    A_ins = A[ins].copy()
    A_ins[np.arange(len(ins)), p + ins] = -1.0
    m.add_rows(cols, A_ins, "<=", np.full(len(ins), i_lim - margin), [f"ins{i}" for i in ins])
    weights = np.where(secure, 1.0, type1_weight)
    m.add_objective(dict(zip(slack, weights)))
    if dev:
        # |X k - target| <= d
        cols_d = kcols + dev
        Ad = np.hstack([X, -np.eye(n)])
        m.add_rows(cols_d, Ad, "<=", target, [f"dev_hi{i}" for i in range(n)])
        Ad[:, p:] = np.eye(n)
        m.add_rows(cols_d, Ad, ">=", target, [f"dev_lo{i}" for i in range(n)])
        m.add_objective({d: fit_weight for d in dev})
    out = solve(m, options)
    if not out.ok:
        raise SolverError(f"surrogate training LP ended with status {out.status}")
    return out.x[:p], out.objective


def hinge_objective(coef, X, y, i_lim, type1_weight, margin, fit_weight) -> float:
    """Independent evaluation of the trainer's objective for given coefficients."""
    approx = X @ coef
    secure = y >= i_lim
    loss = np.where(secure, np.maximum(0.0, i_lim - approx),
                    type1_weight * np.maximum(0.0, approx - (i_lim - margin)))
    total = float(loss.sum())
    if fit_weight > 0:
        total += fit_weight * float(np.abs(approx - np.minimum(y, 2.0 * i_lim)).sum())
    return total


def train_coefficients(samples: list[SccSample], i_lim, buses=None, use_pairs: bool = False,
                       type1_weight: float = 1e3, margin: float = 0.0, fit_weight: float = 1e-3,
                       k_ibr_max=None, on_degenerate: str = "warn",
                       options: SolverOptions | None = None) -> SccCoefficients:
    """Fit surrogate coefficients bus by bus.

    ``i_lim`` is a scalar or a mapping bus -> limit. SG and IBR coefficients
    are kept nonnegative; pair coefficients are sign-free. ``k_ibr_max``
    (scalar or per-IBR) caps the IBR coefficients, normally at each unit's
    own injection since a remote fault never sees more than that. A bus whose
    samples are all secure gets zero coefficients and a warning
    (``on_degenerate="warn"``) or raises :class:`DegenerateFit` (``"raise"``).
    A bus whose samples are all insecure always raises.
    """
    if not samples:
        raise ValueError("no samples")
    all_buses = samples[0].buses
    buses = tuple(all_buses if buses is None else buses)
    lims = {b: float(i_lim[b] if isinstance(i_lim, dict) else i_lim) for b in buses}
    U = np.array([s.commitment for s in samples], dtype=float)
    Al = np.array([s.alpha for s in samples], dtype=float)
    Y = np.array([s.scc for s in samples])
    X = features(U, Al, use_pairs)
    G, C = U.shape[1], Al.shape[1]
    n_pairs = X.shape[1] - G - C
    options = options or SolverOptions()
    upper = np.full(X.shape[1], np.inf)
    if k_ibr_max is not None:
        upper[G:G + C] = np.broadcast_to(np.asarray(k_ibr_max, dtype=float), (C,))

    K = np.zeros((len(buses), X.shape[1]))
    degenerate, objective = [], {}
    for r, b in enumerate(buses):
        y = Y[:, all_buses.index(b)]
        secure = y >= lims[b]
        if secure.all():
            if on_degenerate == "raise":
                raise DegenerateFit(f"bus {b}: every sample is secure")
            warnings.warn(f"bus {b} is secure in every sample; emitting zero coefficients",
                          DegenerateFitWarning, stacklevel=2)
            degenerate.append(b)
            objective[b] = 0.0
            continue
        if not secure.any():
            raise DegenerateFit(f"bus {b}: no sample is secure at i_lim={lims[b]}")
        K[r], objective[b] = _fit_one_bus(X, y, lims[b], type1_weight, margin, fit_weight,
                                          n_pairs, upper, options)
    return SccCoefficients(buses, K[:, :G], K[:, G:G + C], K[:, G + C:] if use_pairs else None,
                           lims, tuple(degenerate), objective)


@dataclass
class BusErrors:
    bus: int
    i_lim: float
    n_samples: int
    n_type1: int
    n_type2: int
    err_type1: float | None  # mean signed relative error, %
    err_type2: float | None


@dataclass
class ErrorReport:
    rows: list[BusErrors]

    @property
    def n_type1(self) -> int:
        return sum(r.n_type1 for r in self.rows)

    @property
    def n_type2(self) -> int:
        return sum(r.n_type2 for r in self.rows)

    def _pooled(self, kind: str):
        num = sum((getattr(r, f"err_{kind}") or 0.0) * getattr(r, f"n_{kind}") for r in self.rows)
        cnt = sum(getattr(r, f"n_{kind}") for r in self.rows)
        return num / cnt if cnt else None

    @property
    def err_type1(self):
        return self._pooled("type1")

    @property
    def err_type2(self):
        return self._pooled("type2")


def classify_errors(coefficients: SccCoefficients, samples: list[SccSample], i_lim=None) -> ErrorReport:
    """Count Type-I (optimistic) and Type-II (conservative) errors per bus."""
    U = np.array([s.commitment for s in samples], dtype=float)
    Al = np.array([s.alpha for s in samples], dtype=float)
    Y = np.array([s.scc for s in samples])
    approx = coefficients.approximate(U, Al)
    rows = []
    for r, b in enumerate(coefficients.buses):
        lim = float(coefficients.i_lim.get(b) if i_lim is None else
                    (i_lim[b] if isinstance(i_lim, dict) else i_lim))
        y = Y[:, samples[0].buses.index(b)]
        a = approx[:, r]
        t1 = (a >= lim) & (y < lim)
        t2 = (a < lim) & (y >= lim)

        def rel(mask):
            if not mask.any():
                return None
            with np.errstate(divide="ignore", invalid="ignore"):
                e = (a[mask] - y[mask]) / y[mask]
            e = e[np.isfinite(e)]
            return float(100.0 * e.mean()) if e.size else None

        rows.append(BusErrors(b, lim, len(samples), int(t1.sum()), int(t2.sum()), rel(t1), rel(t2)))
    return ErrorReport(rows)


class SccSurrogate(BaseEstimator):
    """Estimator wrapper around :func:`train_coefficients`.

    ``fit(X, Y)`` takes X = [u | alpha] with ``n_gens`` commitment columns
    and Y = exact SCC per bus (one column per bus). ``predict`` returns
    secure/insecure labels and ``decision_function`` the margin ``I_L - I_lim``.
    """

    def __init__(self, n_gens: int = 1, i_lim: float = 5.0, use_pairs: bool = False,
                 type1_weight: float = 1e3, margin: float = 0.0, fit_weight: float = 1e-3):
        self.n_gens = n_gens
        self.i_lim = i_lim
        self.use_pairs = use_pairs
        self.type1_weight = type1_weight
        self.margin = margin
        self.fit_weight = fit_weight

    def fit(self, X, Y, buses=None):
        X = check_array(X)
        Y = check_array(Y, ensure_2d=False)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != X.shape[0]:
            raise ValueError("X and Y have different sample counts")
        bus_ids = tuple(range(Y.shape[1])) if buses is None else tuple(buses)
        samples = [SccSample(x[:self.n_gens], x[self.n_gens:], y, bus_ids) for x, y in zip(X, Y)]
        self.coefficients_ = train_coefficients(
            samples, self.i_lim, use_pairs=self.use_pairs, type1_weight=self.type1_weight,
            margin=self.margin, fit_weight=self.fit_weight)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_scc(self, X) -> np.ndarray:
        check_is_fitted(self, "coefficients_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.coefficients_.approximate(X[:, :self.n_gens], X[:, self.n_gens:])

    def decision_function(self, X) -> np.ndarray:
        return self.predict_scc(X) - self.i_lim

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X) >= 0.0


@dataclass
class AuditRow:
    bus: int
    min_approx: float
    hour_approx: int
    min_exact: float
    hour_exact: int
    ok: bool


def min_scc_audit(case: NetworkCase, coefficients: SccCoefficients, commitment_gt, i_lim,
                  buses=None) -> list[AuditRow]:
    """Per-bus minimum of surrogate and exact SCC over a commitment schedule.

    ``commitment_gt`` is the (G, T) schedule, typically from an SCC-constrained
    clearing; ``ok`` reports whether the exact minimum meets ``i_lim``.
    """
    from .grid import scc_schedule

    u = np.asarray(commitment_gt, dtype=float)
    alpha = case.capacity_factors()
    exact = scc_schedule(case, u)
    buses = list(case.monitored_buses if buses is None else buses)
    rows = []
    for b in buses:
        lim = float(i_lim[b] if isinstance(i_lim, dict) else i_lim)
        e = exact[case.bus_index(b)]
        if b in coefficients.buses:
            a = np.array([coefficients.approximate(u[:, t], alpha[:, t], [b])[0]
                          for t in range(u.shape[1])])
        else:
            a = np.full(u.shape[1], np.nan)
        ha = int(np.nanargmin(a)) if np.isfinite(a).any() else -1
        rows.append(AuditRow(b, float(a[ha]) if ha >= 0 else float("nan"), ha,
                             float(e.min()), int(e.argmin()), bool(e.min() >= lim)))
    return rows
