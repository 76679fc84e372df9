"""End-to-end runs: scenario x day, settlement and report files."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import market
from .atomic import DistributedSolution, SolverConfig, dlmp_of, solve_distributed
from .feeds import (TimeSeries, demand_ratio, load_series, resample, shipped_feed_paths,
                    synthetic_day)
from .grid import NetworkError, load_network, shipped_network_path
from .opf import (RELAXATION_GAP_TOL, ExportPolicy, InfeasibleError, IntervalInput, OpfError,
                  Status, build_opf, extract_dlmp, loss_residual, solve_centralized)

log = logging.getLogger(__name__)

OUT_ENV = "DSOMARKET_OUT"
SOLVERS = ("centralized", "distributed", "both")


class ConfigError(ValueError):
    pass


class NonConvergenceError(OpfError):
    pass


# How each operating model dispatches the feeder. Benchmarks run DG as a free
# must-take resource and never back-feed the substation.
# Benchmark DG is customer-owned and taken whenever the feeder can absorb it.
# A token cost (far below any wholesale price) makes curtailing a surplus
# strictly cheaper than dissipating it in fictitious SOC losses.
DG_TOKEN_COST = 1e-4   # $/kWh

SCENARIO_POLICY = {
    market.TRADITIONAL: dict(export_policy=ExportPolicy.ALLOWED, dg_enabled=False, dr_enabled=False,
                             substation_floor=0.0),
    market.NO_EXPORT: dict(export_policy=ExportPolicy.NO_EXPORT, dr_enabled=False,
                           dg_cost_override=DG_TOKEN_COST, substation_floor=0.0),
    market.RETAIL_M: dict(export_policy=ExportPolicy.ALLOWED, dr_enabled=False,
                          dg_cost_override=DG_TOKEN_COST, substation_floor=0.0),
    market.RETAIL_B: dict(export_policy=ExportPolicy.ALLOWED, dr_enabled=False,
                          dg_cost_override=DG_TOKEN_COST, substation_floor=0.0),
    market.MARKET: dict(export_policy=ExportPolicy.ALLOWED, substation_floor=None),
}


@dataclass(frozen=True)
class RunConfig:
    network: Optional[str] = None          # None: shipped IEEE-123 feeder
    lmp: Optional[str] = None
    demand: Optional[str] = None
    synthetic: bool = False                # generate the day instead of reading files
    retail_rate: float = 0.114
    purchase_rate: float = 0.192
    scenarios: tuple = market.SCENARIOS
    interval_min: float = 5.0
    solver: str = "distributed"
    solver_config: SolverConfig = field(default_factory=lambda: DEFAULT_SOLVER)
    out: Optional[str] = None
    seed: int = 0
    intervals: Optional[tuple] = None      # subset of interval indices, default all

    def __post_init__(self):
        if not self.scenarios:
            raise ConfigError("at least one scenario is required")
        bad = set(self.scenarios) - set(market.SCENARIOS)
        if bad:
            raise ConfigError(f"unknown scenarios {sorted(bad)}")
        if len(set(self.scenarios)) != len(self.scenarios):
            raise ConfigError("duplicate scenarios")
        if not 1.0 <= self.interval_min <= 60.0:
            raise ConfigError("interval_min must lie in [1, 60]")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        for name in ("network", "lmp", "demand"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")
        if (self.lmp is None) != (self.demand is None):
            raise ConfigError("give both lmp and demand files or neither")
        try:
            market.Tariff(self.retail_rate, self.purchase_rate)
        except market.SettlementError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def tariff(self) -> market.Tariff:
        return market.Tariff(self.retail_rate, self.purchase_rate)

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, "runs/latest"))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scenarios"] = list(self.scenarios)
        d["intervals"] = None if self.intervals is None else list(self.intervals)
        d["solver_config"] = asdict(self.solver_config)
        # where a run is written does not change its results
        d.pop("out")
        return d


DEFAULT_SOLVER = SolverConfig(rho=0.01, relaxation=1.6, max_rounds=60000,
                              eps_primal=1e-6, eps_consistency=1e-6, eps_dual=1e-6)


def config_from_dict(data: dict, base_dir: Optional[Path] = None, **overrides) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if base_dir is not None:
        for name in ("network", "lmp", "demand"):
            if data.get(name) and not Path(data[name]).is_absolute():
                data[name] = str(Path(base_dir) / data[name])
    if "solver_config" in data and isinstance(data["solver_config"], dict):
        sc = {**asdict(DEFAULT_SOLVER), **data["solver_config"]}
        unknown = set(sc) - {f.name for f in fields(SolverConfig)}
        if unknown:
            raise ConfigError(f"unknown solver_config keys {sorted(unknown)}")
        try:
            data["solver_config"] = SolverConfig(**sc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver_config: {exc}") from exc
    if isinstance(data.get("scenarios"), str):
        data["scenarios"] = [data["scenarios"]]
    for key in ("scenarios", "intervals"):
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return config_from_dict(data, base_dir=path.parent, **overrides)


# -- run ---------------------------------------------------------------------

@dataclass
class IntervalRecord:
    scenario: str
    t: int
    status: str
    objective: float
    dlmp: object
    settlement: market.Settlement
    rounds: int = 0
    deviation: Optional[dict] = None
    relaxation_gap: float = 0.0
    loss_residual: float = 0.0


@dataclass
class RunArtifacts:
    config: RunConfig
    bus_ids: tuple
    lambdas: np.ndarray
    alphas: np.ndarray
    records: list = field(default_factory=list)
    report: Optional[market.DailyReport] = None
    failure: Optional[dict] = None

    def by_scenario(self, scenario: str) -> list:
        return [r for r in self.records if r.scenario == scenario]


def load_inputs(config: RunConfig):
    """Network plus per-interval (lambda, alpha) at the configured clearing interval."""
    network = load_network(config.network or shipped_network_path())
    if config.synthetic:
        lmp, demand = synthetic_day(config.seed)
    else:
        lmp_path, dem_path = (config.lmp, config.demand) if config.lmp else shipped_feed_paths()
        lmp, demand = load_series(lmp_path, "lmp"), load_series(dem_path, "demand")
    if len(lmp) != len(demand) or np.any(lmp.timestamps != demand.timestamps):
        raise ConfigError("price and demand series are not aligned")
    alpha = resample(demand_ratio(demand), config.interval_min)
    lam = resample(lmp, config.interval_min)
    return network, lam, alpha


def _settle(scenario: str, solution, tariff, lam: float) -> market.Settlement:
    d = market.Dispatch.from_solution(solution)
    if scenario == market.TRADITIONAL:
        return market.settle_traditional(d, tariff, lam)
    if scenario == market.NO_EXPORT:
        return market.settle_no_export(d, tariff, lam)
    if scenario == market.RETAIL_M:
        return market.settle_retail_m(d, tariff, lam)
    if scenario == market.RETAIL_B:
        return market.settle_retail_b(d, tariff, lam)
    return market.settle_market(d, extract_dlmp(solution) if not isinstance(solution, DistributedSolution)
                                else dlmp_of(solution), lam)


def run_simulation(config: RunConfig, network=None, series=None) -> RunArtifacts:
    """Solve and settle every (scenario, interval); raises with context on failure.

    Benchmarks are utility-dispatched and solved centrally; the solver choice
    applies to the market scenario. On failure the partial artifacts are
    attached to the exception as ``exc.artifacts``.
    """
    if network is None or series is None:
        network, lam_s, alpha_s = load_inputs(config)
    else:
        lam_s, alpha_s = series
    lam, alpha = lam_s.values, alpha_s.values
    duration = config.interval_min / 60.0
    ts = range(len(lam)) if config.intervals is None else config.intervals
    for t in ts:
        if not 0 <= t < len(lam):
            raise ConfigError(f"interval {t} outside the day (0..{len(lam) - 1})")
    art = RunArtifacts(config, tuple(network.topology.order), lam.copy(), alpha.copy())
    tariff = config.tariff
    scfg = replace(config.solver_config, seed=config.seed)

    for scenario in config.scenarios:
        policy = SCENARIO_POLICY[scenario]
        warm = None
        for t in ts:
            iv = IntervalInput(t=int(t), alpha=float(alpha[t]), lambda_p=float(lam[t]), duration=duration)
            try:
                problem = build_opf(network, iv, **policy)
                central = dist = None
                if scenario != market.MARKET or config.solver in ("centralized", "both"):
                    central = solve_centralized(problem)
                    if central.status is Status.INFEASIBLE:
                        raise InfeasibleError(f"interval {t} infeasible")
                    if central.status is not Status.OPTIMAL:
                        raise OpfError(f"interval {t}: centralized solver status {central.status.value}")
                if scenario == market.MARKET and config.solver in ("distributed", "both"):
                    dist = solve_distributed(problem, scfg, warm=warm)
                    warm = dist.atoms if scfg.warm_start else None
                    if dist.status is not Status.OPTIMAL:
                        raise NonConvergenceError(
                            f"interval {t}: distributed solver did not converge in {dist.rounds_used} rounds")
                sol = dist if dist is not None else central
                settlement = _settle(scenario, sol, tariff, float(lam[t]))
                dev = None
                if central is not None and dist is not None:
                    dev = {"objective_rel": abs(dist.objective - central.objective) / abs(central.objective),
                           "mu_p_abs": float(np.abs(dist.mu_p - central.mu_p).max()),
                           "mu_q_abs": float(np.abs(dist.mu_q - central.mu_q).max())}
                dl = dlmp_of(sol) if isinstance(sol, DistributedSolution) else extract_dlmp(sol)
                gap = sol.relaxation_gap()
                art.records.append(IntervalRecord(
                    scenario=scenario, t=int(t), status=sol.status.value, objective=sol.objective,
                    dlmp=dl, settlement=settlement, rounds=sol.iterations, deviation=dev,
                    relaxation_gap=float(gap.max(initial=0.0)),
                    loss_residual=loss_residual(sol),
                ))
            except Exception as exc:
                art.failure = {"scenario": scenario, "interval": int(t), "error": type(exc).__name__,
                               "message": str(exc)}
                exc.artifacts = art
                if not exc.args or f"[{scenario}" not in str(exc.args[0]):
                    exc.args = (f"[{scenario} t={t}] {exc.args[0] if exc.args else exc}",) + exc.args[1:]
                raise
            log.debug("%s t=%d done", scenario, t)
    art.report = _aggregate(art)
    return art


def _aggregate(art: RunArtifacts) -> Optional[market.DailyReport]:
    if not art.records:
        return None
    dl = {}
    for r in art.records:
        if r.scenario == market.MARKET:
            dl.setdefault(r.scenario, []).append(r.dlmp)
    settlements = [r.settlement for r in art.records]
    return market.aggregate_day(settlements, art.config.interval_min, dl)


# -- reports -----------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def emit_report(art: RunArtifacts, out_dir=None, fmt: str = "csv") -> list:
    """Write settlement, price-matrix, dispatch-stack and summary files; returns paths."""
    if fmt not in ("csv", "json"):
        raise ValueError("fmt must be csv or json")
    out = Path(out_dir) if out_dir is not None else art.config.out_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    if art.report is None and art.records:
        art.report = _aggregate(art)
    written = []
    settlements = [r.settlement for r in art.records]

    if fmt == "csv":
        p = out / "settlements.csv"
        market.write_settlements_csv(settlements, p)
        written.append(p)
        p = out / "settlement_totals.csv"
        market.write_totals_csv(settlements, p)
        written.append(p)
        p = out / "dispatch_stack.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            keys = ("baseline", "utility", "dg", "dr", "losses", "import", "dg_output")
            w.writerow(["interval", "scenario"] + [f"{k}_kwh" for k in keys])
            for s in settlements:
                st = market.energy_stack(s)
                w.writerow([s.t, s.scenario] + [_fmt(st[k]) for k in keys])
        written.append(p)
        for scenario in {r.scenario for r in art.records}:
            recs = art.by_scenario(scenario)
            if scenario != market.MARKET:
                continue
            for comp in ("p", "q"):
                p = out / f"dlmp_{comp}_{scenario}.csv"
                with p.open("w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["bus"] + [str(r.t) for r in recs])
                    mat = np.array([getattr(r.dlmp, f"mu_{comp}") for r in recs]).T
                    for bus, row in zip(art.bus_ids, mat):
                        w.writerow([bus] + [_fmt(v) for v in row])
                written.append(p)
        if any(r.deviation for r in art.records):
            p = out / "solver_deviation.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["interval", "scenario", "objective_rel", "mu_p_abs", "mu_q_abs", "rounds"])
                for r in art.records:
                    if r.deviation:
                        w.writerow([r.t, r.scenario] + [_fmt(r.deviation[k]) for k in
                                   ("objective_rel", "mu_p_abs", "mu_q_abs")] + [r.rounds])
            written.append(p)
    else:
        p = out / "report.json"
        payload = {
            "settlements": [market.settlement_dict(s) for s in settlements],
            "stack": [{"interval": s.t, "scenario": s.scenario, **market.energy_stack(s)} for s in settlements],
            "dlmp": [{"interval": r.t, "scenario": r.scenario, "bus": list(art.bus_ids),
                      "mu_p": [float(v) for v in r.dlmp.mu_p], "mu_q": [float(v) for v in r.dlmp.mu_q]}
                     for r in art.records if r.scenario == market.MARKET],
        }
        p.write_text(json.dumps(payload, indent=1, sort_keys=True))
        written.append(p)

    summary = {
        "config": art.config.to_dict(),
        "report": json.loads(art.report.to_json()) if art.report else None,
        "diagnostics": {
            "max_relaxation_gap": max((r.relaxation_gap for r in art.records), default=0.0),
            "relaxation_flagged": [{"scenario": r.scenario, "interval": r.t, "gap": r.relaxation_gap}
                                   for r in art.records if r.relaxation_gap > RELAXATION_GAP_TOL],
            "max_loss_residual": max((r.loss_residual for r in art.records), default=0.0),
            "max_deviation": _max_dev(art),
            "rounds_total": int(sum(r.rounds for r in art.records if r.scenario == market.MARKET)),
        },
    }
    p = out / "summary.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(p)
    if art.failure:
        p = out / "failure.json"
        p.write_text(json.dumps(art.failure, indent=2, sort_keys=True))
        written.append(p)
    return written


def _max_dev(art: RunArtifacts):
    devs = [r.deviation for r in art.records if r.deviation]
    if not devs:
        return None
    return {k: max(d[k] for d in devs) for k in devs[0]}
