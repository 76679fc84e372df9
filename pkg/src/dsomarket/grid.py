"""Radial feeder model: buses, lines, DER capabilities and per-unit handling."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

log = logging.getLogger(__name__)


class NetworkError(ValueError):
    """Base class for malformed network input."""


class ParseError(NetworkError):
    pass


class TopologyError(NetworkError):
    pass


class UnitError(NetworkError):
    pass


def to_pu(kw: float, s_base_kva: float) -> float:
    return kw / s_base_kva


def from_pu(pu: float, s_base_kva: float) -> float:
    return pu * s_base_kva


@dataclass(frozen=True)
class Bus:
    """One feeder bus. Powers are per-unit on the network's ``s_base``."""

    id: int
    baseline_load_p: float = 0.0
    baseline_load_q: float = 0.0
    dg_p_max: float = 0.0
    dg_q_max: float = 0.0
    dr_fraction: float = 0.10
    dg_cost: float = 0.02
    dr_cost: float = 0.03

    @property
    def has_dg(self) -> bool:
        return self.dg_p_max > 0.0 or self.dg_q_max > 0.0

    def __post_init__(self):
        if self.dg_p_max < 0 or self.dg_q_max < 0:
            raise NetworkError(f"bus {self.id}: negative DG capacity")
        if not 0.0 <= self.dr_fraction <= 1.0:
            raise NetworkError(f"bus {self.id}: dr_fraction {self.dr_fraction} outside [0, 1]")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    flow_limit: float = 4.0

    def __post_init__(self):
        if self.r < 0:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus}: negative resistance")
        if not self.flow_limit > 0:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus}: flow_limit must be positive")


@dataclass(frozen=True)
class Topology:
    """Tree view of a feeder rooted at the substation.

    ``order`` is breadth-first from the root, so every parent precedes its
    children. ``line_of[child]`` is the index into ``Network.lines`` of the line
    feeding ``child``; lines are stored in whatever direction the file gave.
    """

    root: int
    parent: dict
    children: dict
    order: tuple
    depth: dict
    line_of: dict

    def neighbours(self, bus: int) -> list[int]:
        out = list(self.children[bus])
        if bus in self.parent:
            out.insert(0, self.parent[bus])
        return out


@dataclass(frozen=True)
class Network:
    buses: tuple
    lines: tuple
    substation: int
    s_base: float = 5000.0
    v_base: float = 4.16
    v_min: float = 0.95 ** 2
    v_max: float = 1.05 ** 2
    topology: Topology = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.s_base > 0:
            raise UnitError(f"s_base must be positive, got {self.s_base}")
        if not self.v_min < 1.0 < self.v_max:
            raise NetworkError("voltage bounds must bracket 1.0 pu")
        if self.topology is None:
            object.__setattr__(self, "topology", validate_radial(self))

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus(self, bus_id: int) -> Bus:
        return self._by_id()[bus_id]

    def _by_id(self) -> dict:
        cache = self.__dict__.get("_bus_index")
        if cache is None:
            cache = {b.id: b for b in self.buses}
            object.__setattr__(self, "_bus_index", cache)
        return cache

    def line_to(self, child: int) -> Line:
        return self.lines[self.topology.line_of[child]]

    def total_load_p(self) -> float:
        return sum(b.baseline_load_p for b in self.buses)

    def total_dg_p_max(self) -> float:
        return sum(b.dg_p_max for b in self.buses)

    def dg_penetration(self) -> float:
        """Aggregate DG nameplate as a share of total baseline real load."""
        load = self.total_load_p()
        return self.total_dg_p_max() / load if load > 0 else float("inf")


def validate_radial(network: Network) -> Topology:
    ids = [b.id for b in network.buses]
    if len(set(ids)) != len(ids):
        raise TopologyError("duplicate bus ids")
    if network.substation not in set(ids):
        raise TopologyError(f"substation {network.substation} is not a bus")
    if len(network.lines) != len(ids) - 1:
        raise TopologyError(
            f"a radial feeder with {len(ids)} buses needs {len(ids) - 1} lines, got {len(network.lines)}"
        )
    adj = {i: [] for i in ids}
    for k, ln in enumerate(network.lines):
        if ln.from_bus not in adj or ln.to_bus not in adj:
            raise TopologyError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
        if ln.from_bus == ln.to_bus:
            raise TopologyError(f"self-loop at bus {ln.from_bus}")
        adj[ln.from_bus].append((ln.to_bus, k))
        adj[ln.to_bus].append((ln.from_bus, k))

    root = network.substation
    parent, line_of, depth = {}, {}, {root: 0}
    children = {i: [] for i in ids}
    order = [root]
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, k in adj[u]:
            if v == parent.get(u):
                if line_of[u] == k:
                    continue
                raise TopologyError(f"parallel lines between {u} and {v}")
            if v in depth:
                raise TopologyError(f"cycle through line {u}-{v}")
            parent[v], line_of[v], depth[v] = u, k, depth[u] + 1
            children[u].append(v)
            order.append(v)
            queue.append(v)
    if len(order) != len(ids):
        missing = sorted(set(ids) - set(order))
        raise TopologyError(f"buses not connected to the substation: {missing[:10]}")
    return Topology(
        root=root,
        parent=parent,
        children={k: tuple(v) for k, v in children.items()},
        order=tuple(order),
        depth=depth,
        line_of=line_of,
    )


_TOP_KEYS = {"s_base_kva", "v_base_kv", "v_min_pu", "v_max_pu", "substation", "buses", "lines"}
_BUS_KEYS = {"id", "p_kw", "q_kvar", "dg_p_max_kw", "dg_q_max_kvar", "dr_fraction",
             "dg_cost_per_kwh", "dr_cost_per_kwh"}
_LINE_KEYS = {"from", "to", "r_pu", "x_pu", "flow_limit_pu"}


def _check_keys(record: dict, expected: set, where: str) -> None:
    if not isinstance(record, dict):
        raise ParseError(f"{where}: expected an object")
    keys = set(record)
    if keys - expected:
        raise ParseError(f"{where}: unknown keys {sorted(keys - expected)}")
    if expected - keys:
        raise ParseError(f"{where}: missing keys {sorted(expected - keys)}")


def network_from_dict(data: dict) -> Network:
    _check_keys(data, _TOP_KEYS, "network")
    s_base = float(data["s_base_kva"])
    if not s_base > 0:
        raise UnitError(f"s_base_kva must be positive, got {s_base}")
    buses = []
    for i, rec in enumerate(data["buses"]):
        _check_keys(rec, _BUS_KEYS, f"buses[{i}]")
        try:
            buses.append(Bus(
                id=int(rec["id"]),
                baseline_load_p=to_pu(float(rec["p_kw"]), s_base),
                baseline_load_q=to_pu(float(rec["q_kvar"]), s_base),
                dg_p_max=to_pu(float(rec["dg_p_max_kw"]), s_base),
                dg_q_max=to_pu(float(rec["dg_q_max_kvar"]), s_base),
                dr_fraction=float(rec["dr_fraction"]),
                dg_cost=float(rec["dg_cost_per_kwh"]),
                dr_cost=float(rec["dr_cost_per_kwh"]),
            ))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetworkError):
                raise
            raise ParseError(f"buses[{i}]: {exc}") from exc
    lines = []
    for i, rec in enumerate(data["lines"]):
        _check_keys(rec, _LINE_KEYS, f"lines[{i}]")
        try:
            lines.append(Line(int(rec["from"]), int(rec["to"]), float(rec["r_pu"]),
                              float(rec["x_pu"]), float(rec["flow_limit_pu"])))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetworkError):
                raise
            raise ParseError(f"lines[{i}]: {exc}") from exc
    return Network(
        buses=tuple(buses),
        lines=tuple(lines),
        substation=int(data["substation"]),
        s_base=s_base,
        v_base=float(data["v_base_kv"]),
        v_min=float(data["v_min_pu"]),
        v_max=float(data["v_max_pu"]),
    )


def network_to_dict(network: Network) -> dict:
    s = network.s_base
    return {
        "s_base_kva": s,
        "v_base_kv": network.v_base,
        "v_min_pu": network.v_min,
        "v_max_pu": network.v_max,
        "substation": network.substation,
        "buses": [
            {
                "id": b.id,
                "p_kw": from_pu(b.baseline_load_p, s),
                "q_kvar": from_pu(b.baseline_load_q, s),
                "dg_p_max_kw": from_pu(b.dg_p_max, s),
                "dg_q_max_kvar": from_pu(b.dg_q_max, s),
                "dr_fraction": b.dr_fraction,
                "dg_cost_per_kwh": b.dg_cost,
                "dr_cost_per_kwh": b.dr_cost,
            }
            for b in network.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r_pu": ln.r, "x_pu": ln.x,
             "flow_limit_pu": ln.flow_limit}
            for ln in network.lines
        ],
    }


def load_network(path) -> Network:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return network_from_dict(data)


@dataclass(frozen=True)
class DerSpec:
    """Override of one bus's DER fields. Capacities in kW/kVAr; ``None`` keeps the current value."""

    bus: int
    dg_p_max_kw: Optional[float] = None
    dg_q_max_kvar: Optional[float] = None
    dr_fraction: Optional[float] = None
    dg_cost: Optional[float] = None
    dr_cost: Optional[float] = None


def attach_ders(network: Network, specs: Iterable[DerSpec]) -> Network:
    specs = list(specs)
    if not specs:
        return network
    by_id = dict(network._by_id())
    s = network.s_base
    for spec in specs:
        if spec.bus not in by_id:
            raise NetworkError(f"DER spec references unknown bus {spec.bus}")
        for name in ("dg_p_max_kw", "dg_q_max_kvar"):
            value = getattr(spec, name)
            if value is not None and value < 0:
                raise NetworkError(f"bus {spec.bus}: negative {name}")
        changes = {}
        if spec.dg_p_max_kw is not None:
            changes["dg_p_max"] = to_pu(spec.dg_p_max_kw, s)
        if spec.dg_q_max_kvar is not None:
            changes["dg_q_max"] = to_pu(spec.dg_q_max_kvar, s)
        for name in ("dr_fraction", "dg_cost", "dr_cost"):
            if getattr(spec, name) is not None:
                changes[name] = getattr(spec, name)
        by_id[spec.bus] = replace(by_id[spec.bus], **changes)
    out = replace(network, buses=tuple(by_id[b.id] for b in network.buses))
    log.info("attached %d DER specs: DG nameplate %.1f kW (%.1f%% of baseline load)",
             len(specs), from_pu(out.total_dg_p_max(), s), 100 * out.dg_penetration())
    return out


def shipped_network_path() -> Path:
    return Path(__file__).resolve().parent / "data" / "ieee123.json"
