"""Solver-neutral model representation and the HiGHS backend.

Every market model in the package is assembled as a :class:`ModelIR` and
only touches the solver through :func:`solve`. Row duals are reported as
the derivative of the optimal objective with respect to the row's
right-hand side, for either objective sense.
"""
from __future__ import annotations

import csv
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INF = math.inf

SENSES = ("<=", ">=", "=")


class SolverError(RuntimeError):
    pass


class SolverUnavailable(SolverError):
    pass


class MalformedModel(ValueError):
    pass


class ModelIR:
    """Variables with bounds and integrality marks, linear rows and an objective."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.var_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: list[bool] = []
        self.row_names: list[str] = []
        self.row_cols: list[np.ndarray] = []
        self.row_vals: list[np.ndarray] = []
        self.row_sense: list[str] = []
        self.rhs: list[float] = []
        self.obj: dict[int, float] = {}
        self.obj_constant = 0.0
        self.maximize = False
        self._var_pos: dict[str, int] = {}
        self._row_pos: dict[str, int] = {}

    # -- construction -------------------------------------------------
    def add_var(self, name: str, lb: float = 0.0, ub: float = INF, integer: bool = False) -> int:
        if name in self._var_pos:
            raise MalformedModel(f"duplicate variable name {name!r}")
        if lb > ub:
            raise MalformedModel(f"variable {name!r} has lb {lb} > ub {ub}")
        idx = len(self.var_names)
        self._var_pos[name] = idx
        self.var_names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.integer.append(bool(integer))
        return idx

    def add_row(self, coefs, sense: str, rhs: float, name: str) -> int:
        if sense not in SENSES:
            raise MalformedModel(f"row {name!r}: unknown sense {sense!r}")
        if name in self._row_pos:
            raise MalformedModel(f"duplicate row name {name!r}")
        merged: dict[int, float] = {}
        items = coefs.items() if isinstance(coefs, dict) else coefs
        for j, a in items:
            if a:
                merged[j] = merged.get(j, 0.0) + float(a)
        cols = np.fromiter(merged.keys(), dtype=np.int64, count=len(merged))
        vals = np.fromiter(merged.values(), dtype=float, count=len(merged))
        if len(cols) and (cols.min() < 0 or cols.max() >= len(self.var_names)):
            raise MalformedModel(f"row {name!r} references an unknown variable")
        if not math.isfinite(rhs):
            raise MalformedModel(f"row {name!r} has non-finite rhs {rhs}")
        idx = len(self.row_names)
        self._row_pos[name] = idx
        self.row_names.append(name)
        self.row_cols.append(cols)
        self.row_vals.append(vals)
        self.row_sense.append(sense)
        self.rhs.append(float(rhs))
        return idx

    def add_rows(self, cols, A, sense: str, rhs, names) -> None:
        """Bulk add of dense rows ``A @ x[cols] (sense) rhs``."""
        cols = np.asarray(cols, dtype=np.int64)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        for a, r, n in zip(A, rhs, names):
            nz = a != 0
            if sense not in SENSES:
                raise MalformedModel(f"row {n!r}: unknown sense {sense!r}")
            if n in self._row_pos:
                raise MalformedModel(f"duplicate row name {n!r}")
            if not math.isfinite(r):
                raise MalformedModel(f"row {n!r} has non-finite rhs {r}")
            self._row_pos[n] = len(self.row_names)
            self.row_names.append(n)
            self.row_cols.append(cols[nz])
            self.row_vals.append(a[nz])
            self.row_sense.append(sense)
            self.rhs.append(float(r))

    def add_objective(self, coefs, constant: float = 0.0) -> None:
        items = coefs.items() if isinstance(coefs, dict) else coefs
        for j, c in items:
            if c:
                self.obj[j] = self.obj.get(j, 0.0) + float(c)
        self.obj_constant += constant

    # -- queries --------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def n_rows(self) -> int:
        return len(self.row_names)

    @property
    def is_mip(self) -> bool:
        return any(self.integer)

    def var(self, name: str) -> int:
        return self._var_pos[name]

    def row(self, name: str) -> int:
        return self._row_pos[name]

    def has_var(self, name: str) -> bool:
        return name in self._var_pos

    def has_row(self, name: str) -> bool:
        return name in self._row_pos

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, v in self.obj.items():
            c[j] = v
        return c

    def row_activity(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.array([float(v @ x[c]) for c, v in zip(self.row_cols, self.row_vals)])

    def objective_value(self, x) -> float:
        return float(self.objective_vector() @ np.asarray(x)) + self.obj_constant

    def validate(self) -> None:
        for j, (lo, hi) in enumerate(zip(self.lb, self.ub)):
            if lo > hi or math.isnan(lo) or math.isnan(hi):
                raise MalformedModel(f"variable {self.var_names[j]!r} has invalid bounds [{lo}, {hi}]")
        for i, vals in enumerate(self.row_vals):
            if not np.all(np.isfinite(vals)):
                raise MalformedModel(f"row {self.row_names[i]!r} has non-finite coefficients")
        for j, c in self.obj.items():
            if not math.isfinite(c):
                raise MalformedModel(f"objective coefficient of {self.var_names[j]!r} is not finite")

    # -- derived models -----------------------------------------------
    def copy(self, name: str | None = None) -> "ModelIR":
        m = ModelIR(name or self.name)
        m.var_names = list(self.var_names)
        m.lb = list(self.lb)
        m.ub = list(self.ub)
        m.integer = list(self.integer)
        m.row_names = list(self.row_names)
        m.row_cols = list(self.row_cols)
        m.row_vals = list(self.row_vals)
        m.row_sense = list(self.row_sense)
        m.rhs = list(self.rhs)
        m.obj = dict(self.obj)
        m.obj_constant = self.obj_constant
        m.maximize = self.maximize
        m._var_pos = dict(self._var_pos)
        m._row_pos = dict(self._row_pos)
        return m

    def fixed(self, values: dict[int, float], relax: bool = True) -> "ModelIR":
        """Copy with the given variables fixed; drops integrality when ``relax``."""
        m = self.copy(self.name + "_fixed")
        for j, v in values.items():
            m.lb[j] = m.ub[j] = float(v)
        if relax:
            m.integer = [False] * m.n_vars
        return m


@dataclass
class SolverOptions:
    time_limit: float = INF
    mip_rel_gap: float = 1e-6
    threads: int = 1
    feasibility_tol: float = 1e-7
    integrality_tol: float = 1e-6
    seed: int = 0
    verbose: bool = False


@dataclass
class SolveOutcome:
    status: str
    x: np.ndarray | None
    objective: float | None
    duals: np.ndarray | None = None
    wall_time: float = 0.0
    mip_gap: float | None = None
    model: ModelIR | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "Optimal"

    @property
    def has_solution(self) -> bool:
        return self.x is not None

    def value(self, name: str) -> float:
        return float(self.x[self.model.var(name)])

    def dual(self, name: str) -> float:
        if self.duals is None:
            raise SolverError("no duals available for this solve")
        return float(self.duals[self.model.row(name)])


def _highs():
    try:
        import highspy
    except ImportError as exc:  # pragma: no cover
        raise SolverUnavailable("highspy is not installed") from exc
    return highspy


def solver_version() -> str:
    hs = _highs()
    try:
        from importlib.metadata import version
        return f"highspy {version('highspy')}"
    except Exception:  # pragma: no cover
        return f"highspy {getattr(hs, '__version__', 'unknown')}"


def _row_bounds(model: ModelIR):
    lo = np.empty(model.n_rows)
    hi = np.empty(model.n_rows)
    for i, (s, r) in enumerate(zip(model.row_sense, model.rhs)):
        lo[i] = r if s in (">=", "=") else -INF
        hi[i] = r if s in ("<=", "=") else INF
    return lo, hi


def _csc(model: ModelIR):
    from scipy.sparse import csr_matrix
    nnz = sum(len(c) for c in model.row_cols)
    indptr = np.zeros(model.n_rows + 1, dtype=np.int64)
    indices = np.empty(nnz, dtype=np.int64)
    data = np.empty(nnz)
    k = 0
    for i, (c, v) in enumerate(zip(model.row_cols, model.row_vals)):
        indices[k:k + len(c)] = c
        data[k:k + len(c)] = v
        k += len(c)
        indptr[i + 1] = k
    return csr_matrix((data, indices, indptr), shape=(model.n_rows, model.n_vars)).tocsc()


_STATUS = {
    "kOptimal": "Optimal",
    "kInfeasible": "Infeasible",
    "kUnbounded": "Unbounded",
    "kUnboundedOrInfeasible": "Infeasible",
    "kTimeLimit": "TimeLimit",
    "kModelEmpty": "Optimal",
}


def solve(model: ModelIR, options: SolverOptions | None = None) -> SolveOutcome:
    """Solve ``model`` with HiGHS. Duals are returned only for continuous models."""
    hs = _highs()
    options = options or SolverOptions()
    model.validate()
    h = hs.Highs()
    h.setOptionValue("output_flag", bool(options.verbose))
    h.setOptionValue("threads", int(options.threads))
    h.setOptionValue("random_seed", int(options.seed))
    h.setOptionValue("mip_rel_gap", float(options.mip_rel_gap))
    h.setOptionValue("mip_feasibility_tolerance", float(options.feasibility_tol))
    h.setOptionValue("primal_feasibility_tolerance", float(options.feasibility_tol))
    h.setOptionValue("dual_feasibility_tolerance", float(options.feasibility_tol))
    if math.isfinite(options.time_limit):
        h.setOptionValue("time_limit", float(options.time_limit))

    lp = hs.HighsLp()
    lp.num_col_ = model.n_vars
    lp.num_row_ = model.n_rows
    lp.col_cost_ = model.objective_vector()
    lp.offset_ = model.obj_constant
    lp.col_lower_ = np.asarray(model.lb, dtype=float)
    lp.col_upper_ = np.asarray(model.ub, dtype=float)
    lo, hi = _row_bounds(model)
    lp.row_lower_ = lo
    lp.row_upper_ = hi
    A = _csc(model)
    lp.a_matrix_.format_ = hs.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    lp.sense_ = hs.ObjSense.kMaximize if model.maximize else hs.ObjSense.kMinimize
    if model.is_mip:
        lp.integrality_ = [hs.HighsVarType.kInteger if f else hs.HighsVarType.kContinuous
                           for f in model.integer]
    h.passModel(lp)
    t0 = time.perf_counter()
    h.run()
    wall = time.perf_counter() - t0

    raw = h.getModelStatus()
    status = _STATUS.get(raw.name, raw.name.lstrip("k"))
    info = h.getInfo()
    sol = h.getSolution()
    x = None
    if status == "Optimal" or (status == "TimeLimit" and info.primal_solution_status == 2):
        x = np.asarray(sol.col_value, dtype=float)
    duals = None
    if x is not None and not model.is_mip and sol.dual_valid:
        duals = np.asarray(sol.row_dual, dtype=float)
    obj = float(info.objective_function_value) if x is not None else None
    gap = float(info.mip_gap) if model.is_mip and x is not None else None
    return SolveOutcome(status, x, obj, duals, wall, gap, model)


# -- LP file format ---------------------------------------------------------

_BAD = re.compile(r"[^A-Za-z0-9_]")


def sanitize_names(names, prefix: str) -> dict[str, str]:
    """Deterministic map from arbitrary names to LP-safe identifiers."""
    out: dict[str, str] = {}
    used: set[str] = set()
    for name in names:
        s = _BAD.sub("_", name) or prefix
        if s[0].isdigit() or s[0] in "eE":
            s = prefix + s
        base, k = s, 2
        while s in used:
            s = f"{base}_{k}"
            k += 1
        used.add(s)
        out[name] = s
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def _terms(pairs, names) -> list[str]:
    out = []
    for j, a in pairs:
        sign = "-" if a < 0 else "+"
        out.append(f"{sign} {_fmt(abs(a))} {names[j]}")
    return out


def _wrap(head: str, terms: list[str], tail: str = "") -> str:
    lines, cur = [], head
    for t in terms:
        if len(cur) + len(t) + 1 > 200:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    cur += tail
    lines.append(cur)
    return "\n".join(lines)


def export_lp(model: ModelIR, path) -> dict[str, str]:
    """Write CPLEX LP format text; returns the variable/row name map.

    Names that are not LP-safe are rewritten; the full mapping is also
    written next to the file as ``<path>.names.csv`` whenever a name changed.
    """
    path = Path(path)
    vmap = sanitize_names(model.var_names, "v_")
    rmap = sanitize_names(model.row_names, "r_")
    const_name = "obj_constant_"
    while const_name in vmap.values():
        const_name += "_"
    vnames = [vmap[n] for n in model.var_names]
    need_const = model.obj_constant != 0.0 or any(len(c) == 0 for c in model.row_cols)

    out = [f"\\ model {model.name}", "Maximize" if model.maximize else "Minimize"]
    obj_terms = _terms(sorted(model.obj.items()), vnames)
    if need_const:
        obj_terms.append(f"+ {_fmt(model.obj_constant)} {const_name}")
    if not obj_terms:
        obj_terms = [f"+ 0 {vnames[0]}"] if vnames else []
    out.append(_wrap(" obj:", obj_terms))
    if model.n_rows:
        out.append("Subject To")
        for i in range(model.n_rows):
            terms = _terms(zip(model.row_cols[i], model.row_vals[i]), vnames)
            if not terms:
                terms = [f"+ 0 {const_name}"]
            out.append(_wrap(f" {rmap[model.row_names[i]]}:", terms,
                             f" {model.row_sense[i]} {_fmt(model.rhs[i])}"))
    out.append("Bounds")
    for j, n in enumerate(vnames):
        lo, hi = model.lb[j], model.ub[j]
        if lo == -INF and hi == INF:
            out.append(f" {n} free")
        elif lo == hi:
            out.append(f" {n} = {_fmt(lo)}")
        else:
            lo_s = "-inf" if lo == -INF else _fmt(lo)
            hi_s = "+inf" if hi == INF else _fmt(hi)
            out.append(f" {lo_s} <= {n} <= {hi_s}")
    if need_const:
        out.append(f" {const_name} = 1")
    ints = [vnames[j] for j in range(model.n_vars) if model.integer[j]]
    if ints:
        out.append("General")
        for k in range(0, len(ints), 8):
            out.append(" " + " ".join(ints[k:k + 8]))
    out.append("End")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")

    mapping = {**{f"var:{k}": v for k, v in vmap.items()},
               **{f"row:{k}": v for k, v in rmap.items()}}
    changed = [(k, v) for k, v in mapping.items() if k.split(":", 1)[1] != v]
    if changed:
        with open(str(path) + ".names.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "original", "lp_name"])
            for k, v in changed:
                kind, orig = k.split(":", 1)
                w.writerow([kind, orig, v])
    return mapping


def read_lp(path) -> ModelIR:
    """Parse an LP file through HiGHS' reader into a :class:`ModelIR`."""
    hs = _highs()
    h = hs.Highs()
    h.setOptionValue("output_flag", False)
    st = h.readModel(str(path))
    if st != hs.HighsStatus.kOk and st != hs.HighsStatus.kWarning:
        raise MalformedModel(f"could not read {path}")
    lp = h.getLp()
    m = ModelIR(Path(path).stem)
    names = list(lp.col_names_) or [f"c{j}" for j in range(lp.num_col_)]
    integ = list(lp.integrality_) if len(lp.integrality_) else []
    for j in range(lp.num_col_):
        is_int = bool(integ) and integ[j] == hs.HighsVarType.kInteger
        m.add_var(names[j], lp.col_lower_[j], lp.col_upper_[j], is_int)
    m.add_objective({j: c for j, c in enumerate(lp.col_cost_)}, lp.offset_)
    m.maximize = lp.sense_ == hs.ObjSense.kMaximize
    from scipy.sparse import csc_matrix
    A = csc_matrix((np.asarray(lp.a_matrix_.value_), np.asarray(lp.a_matrix_.index_),
                    np.asarray(lp.a_matrix_.start_)), shape=(lp.num_row_, lp.num_col_)).tocsr()
    rnames = list(lp.row_names_) or [f"r{i}" for i in range(lp.num_row_)]
    for i in range(lp.num_row_):
        lo, hi = lp.row_lower_[i], lp.row_upper_[i]
        coefs = list(zip(A.indices[A.indptr[i]:A.indptr[i + 1]], A.data[A.indptr[i]:A.indptr[i + 1]]))
        if lo == hi:
            m.add_row(coefs, "=", lo, rnames[i])
        elif hi < INF and lo > -INF:
            m.add_row(coefs, ">=", lo, rnames[i] + "_lo")
            m.add_row(coefs, "<=", hi, rnames[i] + "_hi")
        elif lo > -INF:
            m.add_row(coefs, ">=", lo, rnames[i])
        else:
            m.add_row(coefs, "<=", hi, rnames[i])
    return m
