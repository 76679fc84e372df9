"""Per-interval settlement under the five operating models and daily aggregation.

Money in $, energy in kWh (reactive in kVArh) over one clearing interval.
Real-power channels are nonnegative; reactive channels are signed (a bus whose
shunt capacitors exceed its reactive demand has negative net reactive load).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .opf import DlmpVector, OpfSolution

TRADITIONAL = "traditional"
NO_EXPORT = "no_export"
RETAIL_M = "retail_m"
RETAIL_B = "retail_b"
MARKET = "market"
SCENARIOS = (TRADITIONAL, NO_EXPORT, RETAIL_M, RETAIL_B, MARKET)

# relative slack when checking dispatch preconditions produced by a solver
DISPATCH_TOL = 1e-7


class SettlementError(ValueError):
    pass


@dataclass(frozen=True)
class Tariff:
    retail_rate: float = 0.114      # $/kWh charged to loads
    purchase_rate: float = 0.192    # $/kWh paid for exported DG energy

    def __post_init__(self):
        if self.retail_rate < 0 or self.purchase_rate < 0:
            raise SettlementError("tariff rates must be nonnegative")


@dataclass(frozen=True)
class Dispatch:
    t: int
    bus_ids: tuple
    pg: np.ndarray
    qg: np.ndarray
    pl: np.ndarray
    ql: np.ndarray
    pl0: np.ndarray
    ql0: np.ndarray
    substation_import: float
    losses: float
    export_modeled: bool = False

    def __post_init__(self):
        n = len(self.bus_ids)
        for name in ("pg", "qg", "pl", "ql", "pl0", "ql0"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise SettlementError(f"{name} must have one entry per bus")
            object.__setattr__(self, name, arr)
        scale = max(1.0, float(np.abs(self.pl0).max(initial=0.0)))
        tol = DISPATCH_TOL * scale
        if np.any(self.pg < -tol) or np.any(self.pl < -tol) or self.losses < -tol:
            raise SettlementError("real-power energies must be nonnegative")
        if np.any(self.pl > self.pl0 + tol):
            raise SettlementError("load exceeds its baseline")
        if self.substation_import < -tol and not self.export_modeled:
            raise SettlementError("substation export without export to the wholesale market")

    @classmethod
    def from_solution(cls, solution: OpfSolution, export_modeled: Optional[bool] = None) -> "Dispatch":
        p = solution.problem
        k = p.network.s_base * p.interval.duration   # pu -> kWh
        if export_modeled is None:
            export_modeled = p.options.get("substation_floor") is None
        return cls(
            t=p.interval.t,
            bus_ids=p.bus_ids,
            pg=np.maximum(solution.pg, 0.0) * k,
            qg=solution.qg * k,
            pl=np.minimum(solution.pl, p.pl_base) * k,
            ql=solution.ql * k,
            pl0=p.pl_base * k,
            ql0=p.ql_base * k,
            substation_import=float(solution.p_sub) * k,
            losses=float(solution.losses()) * k,
            export_modeled=export_modeled,
        )

    def curtailed(self) -> np.ndarray:
        return self.pl0 - self.pl


@dataclass(frozen=True)
class Settlement:
    scenario: str
    t: int
    lambda_p: float
    c_wem: float
    r_load: float
    r_gen: float
    r_flex: float
    net_revenue: float
    bus_ids: tuple = field(repr=False)
    billed: np.ndarray = field(repr=False)           # $ per bus
    credited_gen: np.ndarray = field(repr=False)
    credited_flex: np.ndarray = field(repr=False)
    served_utility: np.ndarray = field(repr=False)   # kWh per bus
    served_dg: np.ndarray = field(repr=False)
    served_dr: np.ndarray = field(repr=False)
    dispatch: Dispatch = field(repr=False, compare=False)

    def totals(self) -> dict:
        return {"c_wem": self.c_wem, "r_load": self.r_load, "r_gen": self.r_gen,
                "r_flex": self.r_flex, "net_revenue": self.net_revenue}


def _settle(scenario, dispatch: Dispatch, lambda_p, billed, credited_gen, credited_flex) -> Settlement:
    r_load = float(np.sum(billed))
    r_gen = float(np.sum(credited_gen))
    r_flex = float(np.sum(credited_flex))
    c_wem = float(lambda_p * dispatch.substation_import)
    dg_local = np.minimum(dispatch.pg, dispatch.pl)
    return Settlement(
        scenario=scenario,
        t=dispatch.t,
        lambda_p=float(lambda_p),
        c_wem=c_wem,
        r_load=r_load,
        r_gen=r_gen,
        r_flex=r_flex,
        net_revenue=r_load - r_flex - r_gen - c_wem,
        bus_ids=dispatch.bus_ids,
        billed=np.asarray(billed, dtype=float),
        credited_gen=np.asarray(credited_gen, dtype=float),
        credited_flex=np.asarray(credited_flex, dtype=float),
        served_utility=dispatch.pl - dg_local,
        served_dg=dg_local,
        served_dr=dispatch.curtailed(),
        dispatch=dispatch,
    )


def _tol(d: Dispatch) -> float:
    return DISPATCH_TOL * max(1.0, float(np.abs(d.pl0).max(initial=0.0)))


def settle_traditional(dispatch: Dispatch, tariff: Tariff, lambda_p: float) -> Settlement:
    if np.any(np.abs(dispatch.pg) > _tol(dispatch)):
        raise SettlementError("traditional settlement requires zero DG output")
    zero = np.zeros(len(dispatch.bus_ids))
    return _settle(TRADITIONAL, dispatch, lambda_p, tariff.retail_rate * dispatch.pl, zero, zero)


def settle_no_export(dispatch: Dispatch, tariff: Tariff, lambda_p: float) -> Settlement:
    if np.any(dispatch.pg > dispatch.pl + _tol(dispatch)):
        raise SettlementError("dispatch exports DG energy under the no-export policy")
    zero = np.zeros(len(dispatch.bus_ids))
    served = np.maximum(dispatch.pl - dispatch.pg, 0.0)
    return _settle(NO_EXPORT, dispatch, lambda_p, tariff.retail_rate * served, zero, zero)


def settle_retail_m(dispatch: Dispatch, tariff: Tariff, lambda_p: float) -> Settlement:
    """Net metering: each bus's import and DG output are netted within the interval."""
    net = dispatch.pl - dispatch.pg
    billed = tariff.retail_rate * np.maximum(net, 0.0)
    credited = tariff.purchase_rate * np.maximum(-net, 0.0)
    zero = np.zeros(len(dispatch.bus_ids))
    return _settle(RETAIL_M, dispatch, lambda_p, billed, credited, zero)


def settle_retail_b(dispatch: Dispatch, tariff: Tariff, lambda_p: float) -> Settlement:
    """Net billing: consumption priced at the retail rate, DG output at the purchase rate."""
    billed = tariff.retail_rate * dispatch.pl
    credited = tariff.purchase_rate * dispatch.pg
    zero = np.zeros(len(dispatch.bus_ids))
    return _settle(RETAIL_B, dispatch, lambda_p, billed, credited, zero)


def settle_market(dispatch: Dispatch, dlmp: DlmpVector, lambda_p: float) -> Settlement:
    if dlmp.t != dispatch.t:
        raise SettlementError(f"price vector for interval {dlmp.t} applied to dispatch {dispatch.t}")
    if tuple(dlmp.bus_ids) != tuple(dispatch.bus_ids):
        raise SettlementError("price vector and dispatch cover different buses")
    mp, mq = np.asarray(dlmp.mu_p), np.asarray(dlmp.mu_q)
    billed = mp * dispatch.pl + mq * dispatch.ql
    credited_gen = mp * dispatch.pg + mq * dispatch.qg
    credited_flex = mp * (dispatch.pl0 - dispatch.pl) + mq * (dispatch.ql0 - dispatch.ql)
    return _settle(MARKET, dispatch, lambda_p, billed, credited_gen, credited_flex)


# -- daily aggregation -------------------------------------------------------

@dataclass
class DailyReport:
    scenarios: tuple
    intervals: tuple
    totals: dict                 # scenario -> {c_wem, r_load, r_gen, r_flex, net_revenue}
    energy: dict                 # scenario -> {baseline, utility, dg, dr, losses, import} kWh
    hourly_stack: dict           # scenario -> list of per-hour dicts
    price_stats: dict            # scenario -> price statistics (market scenarios only)

    def to_json(self) -> str:
        return json.dumps({"scenarios": list(self.scenarios), "intervals": list(self.intervals),
                           "totals": self.totals, "energy": self.energy,
                           "hourly_stack": self.hourly_stack, "price_stats": self.price_stats},
                          indent=2, sort_keys=True)


def energy_stack(s: Settlement) -> dict:
    """System stack for one interval: baseline load = utility + dg + dr."""
    d = s.dispatch
    pl = float(np.sum(d.pl))
    dg = min(float(np.sum(d.pg)), pl)
    return {"baseline": float(np.sum(d.pl0)), "utility": pl - dg, "dg": dg,
            "dr": float(np.sum(d.curtailed())), "losses": d.losses,
            "import": d.substation_import, "dg_output": float(np.sum(d.pg))}


def aggregate_day(settlements: Sequence[Settlement], interval_minutes: float = 5.0,
                  dlmps: Optional[dict] = None) -> DailyReport:
    """Fold settlements in interval order.

    ``dlmps`` maps scenario -> list of DlmpVector (same order as that scenario's
    settlements) and enables the price statistics.
    """
    by_scen: dict = {}
    for s in settlements:
        by_scen.setdefault(s.scenario, []).append(s)
    if not by_scen:
        raise SettlementError("no settlements to aggregate")
    coverage = None
    for name, rows in by_scen.items():
        rows.sort(key=lambda s: s.t)
        ts = tuple(s.t for s in rows)
        if len(set(ts)) != len(ts):
            raise SettlementError(f"scenario {name}: duplicate intervals")
        if coverage is None:
            coverage = ts
        elif ts != coverage:
            raise SettlementError(f"scenario {name}: interval coverage differs from other scenarios")
    order = [s for s in SCENARIOS if s in by_scen] + sorted(set(by_scen) - set(SCENARIOS))
    per_hour = max(1, int(round(60.0 / interval_minutes)))

    totals, energy, hourly, prices = {}, {}, {}, {}
    for name in order:
        rows = by_scen[name]
        tot = dict.fromkeys(("c_wem", "r_load", "r_gen", "r_flex", "net_revenue"), 0.0)
        en = dict.fromkeys(("baseline", "utility", "dg", "dr", "losses", "import", "dg_output"), 0.0)
        hours: dict = {}
        for s in rows:
            for k, v in s.totals().items():
                tot[k] += v
            st = energy_stack(s)
            h = s.t // per_hour
            slot = hours.setdefault(h, dict.fromkeys(en, 0.0))
            for k, v in st.items():
                en[k] += v
                slot[k] += v
        totals[name] = tot
        energy[name] = en
        hourly[name] = [{"hour": int(h), **hours[h]} for h in sorted(hours)]
        if dlmps and name in dlmps:
            prices[name] = price_statistics(rows, dlmps[name])
    return DailyReport(tuple(order), coverage, totals, energy, hourly, prices)


def price_statistics(rows: Sequence[Settlement], dlmps: Sequence[DlmpVector]) -> dict:
    if len(rows) != len(dlmps):
        raise SettlementError("one price vector per settlement required")
    mp = np.array([d.mu_p for d in dlmps])
    mq = np.array([d.mu_q for d in dlmps])
    pl = np.array([s.dispatch.pl for s in rows])
    lam = np.array([s.lambda_p for s in rows])
    qmax = float(mq.max())
    # the substation's reactive price is zero (free reactive import); the spread
    # is taken over buses with a positive reactive price
    pos = mq[mq > 1e-9]
    qmin = float(pos.min()) if pos.size else 0.0
    return {
        "mu_p_weighted_mean": float((mp * pl).sum() / pl.sum()) if pl.sum() > 0 else float("nan"),
        "mu_p_mean": float(mp.mean()),
        "lambda_mean": float(lam.mean()),
        "mu_p_max": [float(v) for v in mp.max(axis=1)],
        "mu_p_min": [float(v) for v in mp.min(axis=1)],
        "mu_q_max": qmax,
        "mu_q_min_positive": qmin,
        "mu_q_max_min_ratio": qmax / qmin if qmin > 0 else None,
    }


SETTLEMENT_COLUMNS = ("interval", "scenario", "bus", "billed_usd", "credited_usd",
                      "energy_kwh_served_by_utility", "energy_kwh_served_by_dg",
                      "energy_kwh_served_by_dr")


def write_settlements_csv(settlements: Sequence[Settlement], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SETTLEMENT_COLUMNS)
        for s in settlements:
            credited = s.credited_gen + s.credited_flex
            for j, bus in enumerate(s.bus_ids):
                w.writerow([s.t, s.scenario, bus, repr(float(s.billed[j])), repr(float(credited[j])),
                            repr(float(s.served_utility[j])), repr(float(s.served_dg[j])),
                            repr(float(s.served_dr[j]))])


def write_totals_csv(settlements: Sequence[Settlement], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "scenario", "lambda_p", "c_wem", "r_load", "r_gen", "r_flex", "net_revenue"])
        for s in settlements:
            w.writerow([s.t, s.scenario] + [repr(float(v)) for v in
                       (s.lambda_p, s.c_wem, s.r_load, s.r_gen, s.r_flex, s.net_revenue)])


def settlement_dict(s: Settlement) -> dict:
    return {k: getattr(s, k) for k in ("scenario", "t", "lambda_p", "c_wem", "r_load",
                                       "r_gen", "r_flex", "net_revenue")}
