"""JSON case files: loading with full validation, and writing."""
from __future__ import annotations

import json
import os
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import Branch, Bus, IbrUnit, NetworkCase, SyncGen, check_connected, DisconnectedNetwork

SCHEMA_VERSION = 1

_GEN_FIELDS = {
    "no_load_cost": "no_load_cost",
    "marginal_cost": "marginal_cost",
    "startup_cost": "startup_cost",
    "shutdown_cost": "shutdown_cost",
    "p_min": "p_min",
    "p_max": "p_max",
    "ramp_down": "ramp_down",
    "ramp_up": "ramp_up",
    "p0": "p0",
    "internal_reactance": "internal_reactance",
}


class CaseError(ValueError):
    pass


class SchemaVersionError(CaseError):
    pass


class CaseValidationError(CaseError):
    """Carries every violation found, each as ``(json_pointer, message)``."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  {ptr}: {msg}" for ptr, msg in self.violations)
        super().__init__(f"{len(self.violations)} case violation(s):\n{lines}")


def _num(errors, ptr, obj, key, *, positive=False, nonneg=False, default=None):
    if key not in obj:
        if default is not None:
            return default
        errors.append((f"{ptr}/{key}", "missing"))
        return None
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        errors.append((f"{ptr}/{key}", f"expected a number, got {val!r}"))
        return None
    if positive and not val > 0:
        errors.append((f"{ptr}/{key}", f"must be > 0, got {val}"))
    if nonneg and val < 0:
        errors.append((f"{ptr}/{key}", f"must be >= 0, got {val}"))
    return float(val)


def case_from_dict(doc: dict) -> NetworkCase:
    """Build and validate a :class:`NetworkCase`; raises with all violations at once."""
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported schema_version {version!r} (supported: {SCHEMA_VERSION})")
    errors: list[tuple[str, str]] = []

    demand = doc.get("demand")
    if not isinstance(demand, list) or not demand:
        errors.append(("/demand", "must be a non-empty list"))
        demand = []
    T = len(demand)
    for t, d in enumerate(demand):
        if not isinstance(d, (int, float)) or d < 0:
            errors.append((f"/demand/{t}", f"invalid demand {d!r}"))

    buses = []
    seen = set()
    for i, b in enumerate(doc.get("buses", [])):
        ptr = f"/buses/{i}"
        bid = b.get("id")
        if not isinstance(bid, int):
            errors.append((f"{ptr}/id", "bus id must be an integer"))
            continue
        if bid in seen:
            errors.append((f"{ptr}/id", f"duplicate bus id {bid}"))
        seen.add(bid)
        monitored = bool(b.get("monitored", True))
        i_lim = _num(errors, ptr, b, "i_lim", nonneg=True, default=0.0)
        if monitored and i_lim is not None and not i_lim > 0:
            errors.append((f"{ptr}/i_lim", "monitored bus needs i_lim > 0"))
        shunt = _num(errors, ptr, b, "shunt", nonneg=True, default=0.0) if "shunt" in b else 0.0
        buses.append(Bus(bid, monitored, i_lim or 0.0, shunt or 0.0))
    if not buses:
        errors.append(("/buses", "no buses"))

    branches = []
    for i, br in enumerate(doc.get("branches", [])):
        ptr = f"/branches/{i}"
        f, t = br.get("from"), br.get("to")
        for key, v in (("from", f), ("to", t)):
            if v not in seen:
                errors.append((f"{ptr}/{key}", f"unknown bus {v!r}"))
        if f == t:
            errors.append((ptr, "from and to buses coincide"))
        x = _num(errors, ptr, br, "x", positive=True)
        r = _num(errors, ptr, br, "r", nonneg=True, default=0.0) if "r" in br else 0.0
        branches.append(Branch(f, t, x if x else 1.0, r or 0.0))

    gens = []
    gen_ids = set()
    for i, g in enumerate(doc.get("sync_gens", [])):
        ptr = f"/sync_gens/{i}"
        gid = g.get("id")
        if not isinstance(gid, str):
            errors.append((f"{ptr}/id", "generator id must be a string"))
            gid = f"gen{i}"
        if gid in gen_ids:
            errors.append((f"{ptr}/id", f"duplicate generator id {gid}"))
        gen_ids.add(gid)
        if g.get("bus") not in seen:
            errors.append((f"{ptr}/bus", f"unknown bus {g.get('bus')!r}"))
        vals = {k: _num(errors, ptr, g, key, nonneg=True) for key, k in _GEN_FIELDS.items()}
        for key in ("p_min", "ramp_down", "ramp_up", "internal_reactance"):
            if vals[key] is not None and not vals[key] > 0:
                errors.append((f"{ptr}/{key}", "must be > 0"))
        u0 = g.get("u0")
        if u0 not in (0, 1):
            errors.append((f"{ptr}/u0", f"must be 0 or 1, got {u0!r}"))
            u0 = 0
        if None not in (vals["p_min"], vals["p_max"]) and vals["p_min"] > vals["p_max"]:
            errors.append((f"{ptr}/p_min", "p_min exceeds p_max"))
        if None not in (vals["p0"], vals["p_min"], vals["p_max"]):
            lo, hi = u0 * vals["p_min"], u0 * vals["p_max"]
            if not lo - 1e-9 <= vals["p0"] <= hi + 1e-9:
                errors.append((f"{ptr}/p0", f"p0={vals['p0']} outside [{lo}, {hi}] for u0={u0}"))
        inj = g.get("scc_injection")
        if any(v is None for v in vals.values()):
            continue
        gens.append(SyncGen(id=gid, bus=g["bus"], u0=int(u0), scc_injection=inj,
                            is_strategic=bool(g.get("strategic", False)), **vals))

    ibrs = []
    for i, c in enumerate(doc.get("ibr_units", [])):
        ptr = f"/ibr_units/{i}"
        if c.get("bus") not in seen:
            errors.append((f"{ptr}/bus", f"unknown bus {c.get('bus')!r}"))
        p_max = _num(errors, ptr, c, "p_max", positive=True)
        bid = _num(errors, ptr, c, "energy_bid", nonneg=True)
        inj = _num(errors, ptr, c, "scc_injection", nonneg=True, default=1.0)
        cf = c.get("capacity_factor")
        if not isinstance(cf, list):
            errors.append((f"{ptr}/capacity_factor", "must be a list"))
            cf = []
        elif len(cf) != T:
            errors.append((f"{ptr}/capacity_factor",
                           f"length {len(cf)} does not match horizon {T}"))
        for t, a in enumerate(cf):
            if not isinstance(a, (int, float)) or not 0.0 <= a <= 1.0:
                errors.append((f"{ptr}/capacity_factor/{t}", f"capacity factor {a!r} not in [0, 1]"))
        ibrs.append(IbrUnit(str(c.get("id", f"ibr{i}")), c.get("bus"), p_max or 0.0,
                            bid or 0.0, np.asarray(cf, dtype=float), inj))

    if errors:
        raise CaseValidationError(errors)

    case = NetworkCase(
        buses=tuple(buses), branches=tuple(branches), sync_gens=tuple(gens),
        ibr_units=tuple(ibrs), demand=np.asarray(demand, dtype=float),
        base_mva=float(doc.get("base_mva", 100.0)),
        nominal_voltage=float(doc.get("nominal_voltage", 0.95)),
        name=str(doc.get("name", "case")),
    )
    try:
        check_connected(case)
    except DisconnectedNetwork as exc:
        raise CaseValidationError([("/branches", str(exc))]) from None
    return case


def load_case(path) -> NetworkCase:
    with open(path) as fh:
        return case_from_dict(json.load(fh))


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "nominal_voltage": case.nominal_voltage,
        "buses": [{"id": b.id, "monitored": b.is_monitored, "i_lim": b.i_lim,
                   **({"shunt": b.shunt} if b.shunt else {})} for b in case.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "x": br.reactance,
                      **({"r": br.resistance} if br.resistance else {})}
                     for br in case.branches],
        "sync_gens": [
            {"id": g.id, "bus": g.bus, "u0": g.u0, "strategic": g.is_strategic,
             **{key: getattr(g, attr) for key, attr in _GEN_FIELDS.items()},
             **({"scc_injection": g.scc_injection} if g.scc_injection is not None else {})}
            for g in case.sync_gens
        ],
        "ibr_units": [
            {"id": c.id, "bus": c.bus, "p_max": c.p_max, "energy_bid": c.energy_bid,
             "scc_injection": c.scc_injection,
             "capacity_factor": [float(a) for a in c.capacity_factor]}
            for c in case.ibr_units
        ],
        "demand": [float(d) for d in case.demand],
    }


def save_case(case: NetworkCase, path) -> None:
    write_atomic(path, json.dumps(case_to_dict(case), indent=1))


def ieee30_case() -> NetworkCase:
    """The shipped modified IEEE 30-bus case (12 SGs, 3 wind farms, 24 h)."""
    ref = resources.files("sccmarket") / "data" / "ieee30_scc.json"
    return case_from_dict(json.loads(ref.read_text()))


def toy3_case() -> NetworkCase:
    """Three buses, two SGs, one IBR, two hours; either SG alone secures bus 3."""
    ref = resources.files("sccmarket") / "data" / "toy3.json"
    return case_from_dict(json.loads(ref.read_text()))


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
