"""Network model and the exact three-phase short-circuit current oracle.

Quantities on the network side are per-unit on ``NetworkCase.base_mva``;
cost and power fields carry their own units (EUR, MW) as labeled.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class GridError(ValueError):
    """Base class for network-model errors."""


class DisconnectedNetwork(GridError):
    pass


class NoGroundingPath(GridError):
    """Raised when the admittance matrix has no path to ground (singular)."""


class SingularAdmittance(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    is_monitored: bool = True
    i_lim: float = 5.0
    shunt: float = 0.0  # admittance to ground, p.u.


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance: float
    resistance: float = 0.0


@dataclass(frozen=True)
class SyncGen:
    id: str
    bus: int
    no_load_cost: float
    marginal_cost: float
    startup_cost: float
    shutdown_cost: float
    p_min: float
    p_max: float
    ramp_down: float
    ramp_up: float
    u0: int
    p0: float
    internal_reactance: float
    scc_injection: float | None = None
    is_strategic: bool = False


@dataclass(frozen=True)
class IbrUnit:
    id: str
    bus: int
    p_max: float
    energy_bid: float
    capacity_factor: np.ndarray
    scc_injection: float = 1.0


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    sync_gens: tuple[SyncGen, ...]
    ibr_units: tuple[IbrUnit, ...]
    demand: np.ndarray
    base_mva: float = 100.0
    nominal_voltage: float = 0.95
    name: str = "case"
    _bus_pos: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_pos", {b.id: i for i, b in enumerate(self.buses)})

    @property
    def horizon(self) -> int:
        return len(self.demand)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def monitored_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.is_monitored]

    def bus_index(self, bus_id: int) -> int:
        return self._bus_pos[bus_id]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self._bus_pos[bus_id]]

    def gen_index(self, gen_id: str) -> int:
        for i, g in enumerate(self.sync_gens):
            if g.id == gen_id:
                return i
        raise KeyError(gen_id)

    def gen_injections(self) -> np.ndarray:
        """Short-circuit current of each SG when online, ``V / x''`` unless given."""
        return np.array([
            g.scc_injection if g.scc_injection is not None
            else self.nominal_voltage / g.internal_reactance
            for g in self.sync_gens
        ])

    def capacity_factors(self) -> np.ndarray:
        """IBR capacity factors, shape (n_ibr, T)."""
        if not self.ibr_units:
            return np.zeros((0, self.horizon))
        return np.vstack([np.asarray(c.capacity_factor, dtype=float) for c in self.ibr_units])

    def replace(self, **changes) -> "NetworkCase":
        kw = {f: getattr(self, f) for f in
              ("buses", "branches", "sync_gens", "ibr_units", "demand",
               "base_mva", "nominal_voltage", "name")}
        kw.update(changes)
        return NetworkCase(**kw)

    def truncated(self, horizon: int) -> "NetworkCase":
        """Copy of the case restricted to the first ``horizon`` periods."""
        ibrs = tuple(
            IbrUnit(c.id, c.bus, c.p_max, c.energy_bid,
                    np.asarray(c.capacity_factor)[:horizon], c.scc_injection)
            for c in self.ibr_units
        )
        return self.replace(demand=np.asarray(self.demand)[:horizon], ibr_units=ibrs)


def check_connected(case: NetworkCase) -> None:
    n = len(case.buses)
    rows = [case.bus_index(br.from_bus) for br in case.branches]
    cols = [case.bus_index(br.to_bus) for br in case.branches]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise DisconnectedNetwork(f"network has {n_comp} islands")


def build_admittance(case: NetworkCase, commitment, use_resistance: bool = False) -> np.ndarray:
    """Nodal admittance matrix including online SG subtransient shunts.

    Reactance-only networks give a real matrix of susceptance magnitudes
    (``1/x``); with ``use_resistance`` and nonzero resistances the complex
    admittance is returned instead.
    """
    commitment = np.asarray(commitment)
    if commitment.shape != (len(case.sync_gens),):
        raise ValueError(
            f"commitment has shape {commitment.shape}, expected ({len(case.sync_gens)},)")
    check_connected(case)
    cplx = use_resistance and any(br.resistance for br in case.branches)
    n = len(case.buses)
    Y = np.zeros((n, n), dtype=complex if cplx else float)
    for br in case.branches:
        i, j = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        if i == j:
            raise GridError(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
        # scaled by j so that a lossless branch contributes the real value 1/x
        y = 1j / complex(br.resistance, br.reactance) if cplx else 1.0 / br.reactance
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    for b in case.buses:
        if b.shunt:
            k = case.bus_index(b.id)
            Y[k, k] += b.shunt
    for g, on in zip(case.sync_gens, commitment):
        if on > 0.5:
            k = case.bus_index(g.bus)
            Y[k, k] += 1.0 / g.internal_reactance
    return Y


def impedance_matrix(Y: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Dense inverse of ``Y``. O(n^3); intended for networks of a few hundred buses."""
    Y = np.asarray(Y)
    n = Y.shape[0]
    scale = np.abs(np.diag(Y)).max(initial=0.0)
    if scale == 0.0 or np.abs(Y.sum(axis=1)).max() <= 1e-12 * scale:
        raise NoGroundingPath("no online generator or shunt: admittance matrix is singular")
    try:
        Z = np.linalg.solve(Y, np.eye(n, dtype=Y.dtype))
    except np.linalg.LinAlgError as exc:
        raise SingularAdmittance(str(exc)) from exc
    Z = 0.5 * (Z + Z.T)
    resid = np.abs(Y @ Z - np.eye(n)).max()
    if resid > tol:
        raise SingularAdmittance(f"inverse residual {resid:.3e} exceeds {tol:g}")
    return Z


def scc_from_impedance(case: NetworkCase, Z: np.ndarray, commitment, alpha) -> np.ndarray:
    """Short-circuit current at every bus for a given impedance matrix."""
    commitment = np.asarray(commitment, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    inj = np.zeros(len(case.buses), dtype=Z.dtype)
    ig = case.gen_injections()
    for g, on, i_g in zip(case.sync_gens, commitment, ig):
        inj[case.bus_index(g.bus)] += i_g * on
    for c, a in zip(case.ibr_units, alpha):
        inj[case.bus_index(c.bus)] += c.scc_injection * a
    return np.abs((Z @ inj) / np.diag(Z))


def exact_scc_all(case: NetworkCase, commitment, alpha, use_resistance: bool = False) -> np.ndarray:
    """Exact SCC (p.u.) at every bus, in ``case.buses`` order."""
    Z = impedance_matrix(build_admittance(case, commitment, use_resistance))
    return scc_from_impedance(case, Z, commitment, alpha)


def exact_scc(case: NetworkCase, commitment, alpha, bus: int) -> float:
    return float(exact_scc_all(case, commitment, alpha)[case.bus_index(bus)])


def scc_schedule(case: NetworkCase, commitment_tg) -> np.ndarray:
    """Exact SCC for a commitment schedule of shape (G, T); returns (n_bus, T).

    Hours with nothing online and no shunt are reported as 0.
    """
    u = np.asarray(commitment_tg)
    alpha = case.capacity_factors()
    out = np.zeros((len(case.buses), u.shape[1]))
    cache = {}
    for t in range(u.shape[1]):
        key = tuple(np.round(u[:, t]).astype(int))
        if key not in cache:
            try:
                cache[key] = impedance_matrix(build_admittance(case, np.array(key)))
            except NoGroundingPath:
                cache[key] = None
        Z = cache[key]
        if Z is not None:
            out[:, t] = scc_from_impedance(case, Z, key, alpha[:, t])
    return out
