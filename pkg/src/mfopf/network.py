"""Static grid data model and per-grid admittance assembly.

All quantities held here are per-unit on the system MVA base; conversion from
physical units happens in :mod:`mfopf.io`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .converter import ConverterParams

SLACK = "slack"
VOLTAGE_CONTROLLED = "voltage_controlled"
LOAD = "load"
BUS_KINDS = (SLACK, VOLTAGE_CONTROLLED, LOAD)


@dataclass(frozen=True)
class Bus:
    id: int
    grid_id: int
    kind: str = LOAD
    v_ref: float | None = None
    v_min: float = 0.94
    v_max: float = 1.06
    p_load: float = 0.0
    q_load: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    g: float
    b: float
    b_shunt_half: float = 0.0
    i_max: float = 99.0
    p_max: float = 99.0
    tap: float = 1.0  # off-nominal ratio on the from side

    @classmethod
    def from_impedance(cls, from_bus: int, to_bus: int, r: float, x: float,
                       b_total: float = 0.0, **limits) -> "Line":
        y = 1.0 / complex(r, x)
        return cls(from_bus, to_bus, y.real, y.imag, 0.5 * b_total, **limits)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    p_set: float = 0.0
    q_set: float = 0.0


@dataclass(frozen=True)
class ShuntCapacitor:
    bus: int
    steps: tuple[float, ...]
    q_prev: float = 0.0

    def nearest_step(self, q: float) -> float:
        return nearest_step(self.steps, q)


def nearest_step(steps: Iterable[float], q: float) -> float:
    """Closest admissible step; an exact tie goes to the lower step."""
    best = None
    best_d = np.inf
    for s in sorted(steps):
        d = abs(q - s)
        if d < best_d:
            best, best_d = s, d
    return float(best)


@dataclass(frozen=True)
class Grid:
    id: int
    frequency: float
    base_kv: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...] = ()
    generators: tuple[Generator, ...] = ()
    capacitors: tuple[ShuntCapacitor, ...] = ()
    name: str = ""

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == SLACK)

    def bus_ids(self) -> list[int]:
        return sorted(b.id for b in self.buses)


@dataclass(frozen=True)
class AdmittanceMatrices:
    G: sp.csr_matrix
    B: sp.csr_matrix
    bus_ids: tuple[int, ...]


@dataclass(frozen=True)
class MultiFrequencySystem:
    grids: tuple[Grid, ...]
    converters: tuple[ConverterParams, ...] = ()
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(sorted(self.grids, key=lambda g: g.id)))
        object.__setattr__(self, "converters", tuple(sorted(self.converters, key=lambda c: c.id)))

    def bus(self, bus_id: int) -> Bus:
        for g in self.grids:
            for b in g.buses:
                if b.id == bus_id:
                    return b
        raise KeyError(bus_id)

    def grid_of(self, bus_id: int) -> Grid:
        for g in self.grids:
            if any(b.id == bus_id for b in g.buses):
                return g
        raise KeyError(bus_id)

    def lf_grid_ids(self) -> set[int]:
        """Grids fed through the second (VSC2) side of some converter."""
        ids = set()
        for c in self.converters:
            try:
                ids.add(self.grid_of(c.bus_l).id)
            except KeyError:
                pass
        return ids

    def total_load(self) -> tuple[float, float]:
        p = sum(b.p_load for g in self.grids for b in g.buses)
        q = sum(b.q_load for g in self.grids for b in g.buses)
        return p, q


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str):
        self.violations.append(msg)

    def __str__(self):
        if self.ok:
            return "valid"
        return "\n".join(self.violations)


def build_admittance(grid: Grid) -> AdmittanceMatrices:
    """Assemble the conductance and susceptance matrices of one grid.

    Parallel lines between the same pair of buses are summed. The result is
    canonical CSR (sorted indices, duplicates merged).
    """
    ids = grid.bus_ids()
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    rows, cols, gv, bv = [], [], [], []
    for ln in grid.lines:
        if ln.from_bus not in pos or ln.to_bus not in pos:
            raise ValueError(f"line {ln.from_bus}-{ln.to_bus} references a bus outside grid {grid.id}")
        k, j = pos[ln.from_bus], pos[ln.to_bus]
        t = ln.tap
        rows += [k, j, k, j]
        cols += [k, j, j, k]
        gv += [ln.g / t ** 2, ln.g, -ln.g / t, -ln.g / t]
        bv += [ln.b / t ** 2 + ln.b_shunt_half, ln.b + ln.b_shunt_half, -ln.b / t, -ln.b / t]
    # shared (rows, cols) keep G and B on one structural pattern
    G = sp.coo_matrix((gv, (rows, cols)), shape=(n, n)).tocsr()
    B = sp.coo_matrix((bv, (rows, cols)), shape=(n, n)).tocsr()
    G.sort_indices()
    B.sort_indices()
    return AdmittanceMatrices(G, B, tuple(ids))


def _connected(grid: Grid) -> bool:
    ids = grid.bus_ids()
    if not ids:
        return True
    adj = {b: set() for b in ids}
    for ln in grid.lines:
        if ln.from_bus in adj and ln.to_bus in adj:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
    seen, stack = {ids[0]}, [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(ids)


def validate_system(system: MultiFrequencySystem) -> ValidationReport:
    """Collect every structural problem; an empty report means solvable structure."""
    rep = ValidationReport()
    owner: dict[int, int] = {}
    for g in system.grids:
        if g.frequency <= 0:
            rep.add(f"grid {g.id}: frequency must be positive")
        for b in g.buses:
            if b.id in owner:
                rep.add(f"bus {b.id}: duplicated (grids {owner[b.id]} and {g.id})")
            owner[b.id] = g.id
            if b.grid_id != g.id:
                rep.add(f"bus {b.id}: grid_id {b.grid_id} does not match grid {g.id}")
            if b.kind not in BUS_KINDS:
                rep.add(f"bus {b.id}: unknown kind {b.kind!r}")
            if b.v_min > b.v_max:
                rep.add(f"bus {b.id}: v_min > v_max")
            if b.v_ref is not None and not (b.v_min <= b.v_ref <= b.v_max):
                rep.add(f"bus {b.id}: v_ref outside [v_min, v_max]")
            if b.kind in (SLACK, VOLTAGE_CONTROLLED) and b.v_ref is None:
                rep.add(f"bus {b.id}: {b.kind} bus needs v_ref")
        n_slack = sum(b.kind == SLACK for b in g.buses)
        if n_slack != 1:
            rep.add(f"grid {g.id}: {n_slack} slack buses (need exactly 1)")
        ids = {b.id for b in g.buses}
        for ln in g.lines:
            if ln.from_bus == ln.to_bus:
                rep.add(f"line {ln.from_bus}-{ln.to_bus}: from_bus equals to_bus")
            if ln.from_bus not in ids or ln.to_bus not in ids:
                rep.add(f"line {ln.from_bus}-{ln.to_bus}: endpoint not in grid {g.id}")
            if ln.tap <= 0:
                rep.add(f"line {ln.from_bus}-{ln.to_bus}: tap ratio must be positive")
            if ln.i_max <= 0 or ln.p_max <= 0:
                rep.add(f"line {ln.from_bus}-{ln.to_bus}: limits must be positive")
        for gen in g.generators:
            if gen.bus not in ids:
                rep.add(f"generator at bus {gen.bus}: bus not in grid {g.id}")
            if gen.p_min > gen.p_max or gen.q_min > gen.q_max:
                rep.add(f"generator at bus {gen.bus}: bounds inverted")
        for cap in g.capacitors:
            if cap.bus not in ids:
                rep.add(f"capacitor at bus {cap.bus}: bus not in grid {g.id}")
            if not cap.steps or list(cap.steps) != sorted(cap.steps):
                rep.add(f"capacitor at bus {cap.bus}: steps must be non-empty and ascending")
            elif not any(abs(cap.q_prev - s) <= 1e-12 for s in cap.steps):
                rep.add(f"capacitor at bus {cap.bus}: q_prev not an admissible step")
        if not _connected(g):
            rep.add(f"grid {g.id}: not connected")

    lf = system.lf_grid_ids()
    for g in system.grids:
        if g.id in lf:
            for b in g.buses:
                if b.p_load != 0.0 or b.q_load != 0.0:
                    rep.add(f"bus {b.id}: load on LF grid bus")

    slack_per_lf: dict[int, int] = {gid: 0 for gid in lf}
    for c in system.converters:
        gs, gl = owner.get(c.bus_s), owner.get(c.bus_l)
        if gs is None:
            rep.add(f"converter {c.id}: bus_s {c.bus_s} does not exist")
        if gl is None:
            rep.add(f"converter {c.id}: bus_l {c.bus_l} does not exist")
        if gs is not None and gs == gl:
            rep.add(f"converter {c.id}: both terminals in grid {gs}")
        for msg in c.check():
            rep.add(f"converter {c.id}: {msg}")
        if gl is not None and c.is_lf_slack:
            slack_per_lf[gl] = slack_per_lf.get(gl, 0) + 1
    for gid, cnt in slack_per_lf.items():
        if cnt != 1:
            rep.add(f"grid {gid}: {cnt} slack converters (need exactly 1)")
    # the slack converter must sit on the LF grid's slack bus
    for c in system.converters:
        if c.is_lf_slack and c.bus_l in owner:
            g = next(g for g in system.grids if g.id == owner[c.bus_l])
            if sum(b.kind == SLACK for b in g.buses) == 1 and g.slack_bus.id != c.bus_l:
                rep.add(f"converter {c.id}: slack converter not at slack bus of grid {g.id}")
    return rep


def scale_loads(system: MultiFrequencySystem, factor: float) -> MultiFrequencySystem:
    if factor < 0:
        raise ValueError("load scaling factor must be non-negative")
    grids = tuple(
        dataclasses.replace(
            g,
            buses=tuple(dataclasses.replace(b, p_load=b.p_load * factor, q_load=b.q_load * factor)
                        for b in g.buses),
        )
        for g in system.grids
    )
    return dataclasses.replace(system, grids=grids)
