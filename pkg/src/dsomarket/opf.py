"""Per-interval branch-flow OPF with second-order-cone relaxation.

The problem is assembled once into canonical arrays (linear equalities,
optional linear inequalities, variable bounds, rotated cones, linear cost and a
diagonal quadratic regularizer). The centralized solver, the KKT checker and the
atomic decomposition all read the same arrays.

Internal objective units are $/kWh times per-unit power, so the multipliers of
the nodal balance rows are prices in $/kWh directly; multiply by
``duration * s_base`` to get dollars for the interval.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .grid import Network

log = logging.getLogger(__name__)

REGULARIZATION = 1e-6
RELAXATION_GAP_TOL = 1e-4

# variable blocks, each of length n (bus index in topology order, root = 0)
PG, QG, PL, V, PF, QF, LF = range(7)
BLOCK_NAMES = ("pg", "qg", "pl", "v", "P", "Q", "l")


class ExportPolicy(str, Enum):
    ALLOWED = "grid-export-allowed"
    NO_EXPORT = "no-export"


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max-iter"


class OpfError(RuntimeError):
    pass


class InfeasibleError(OpfError):
    pass


@dataclass(frozen=True)
class IntervalInput:
    t: int
    alpha: float
    lambda_p: float
    duration: float = 5.0 / 60.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class OpfProblem:
    network: Network
    interval: IntervalInput
    export_policy: ExportPolicy
    bus_ids: tuple
    parent: np.ndarray          # parent position per bus, -1 at the root
    r: np.ndarray               # impedance of the line feeding each bus, 0 at the root
    x: np.ndarray
    c: np.ndarray               # linear cost, $/kWh per pu
    const: float                # constant cost term, same units
    reg: np.ndarray             # diagonal regularizer weight
    reg_ref: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix         # A_in x <= b_in
    b_in: np.ndarray
    cones: np.ndarray           # rows (P, Q, l, v_parent): P^2 + Q^2 <= l * v_parent
    ql: np.ndarray              # fixed reactive load per bus, pu
    pl_base: np.ndarray         # alpha-scaled forecast real load (DR baseline), pu
    ql_base: np.ndarray
    options: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def n_var(self) -> int:
        return 7 * self.n

    def idx(self, block: int, pos) -> np.ndarray:
        return block * self.n + np.asarray(pos)

    def position(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    @property
    def scale(self) -> float:
        """Dollars per unit of internal objective."""
        return self.interval.duration * self.network.s_base

    def objective(self, xvec: np.ndarray) -> float:
        """Interval objective in dollars."""
        d = xvec - self.reg_ref
        return float((self.c @ xvec + self.const + np.sum(self.reg * d * d)) * self.scale)


@dataclass
class OpfSolution:
    problem: OpfProblem
    status: Status
    xvec: np.ndarray
    objective: float
    mu_p: np.ndarray
    mu_q: np.ndarray
    eq_dual: Optional[np.ndarray] = None
    ineq_dual: Optional[np.ndarray] = None
    lb_dual: Optional[np.ndarray] = None
    ub_dual: Optional[np.ndarray] = None
    cone_dual: Optional[np.ndarray] = None
    iterations: int = 0
    info: dict = field(default_factory=dict)

    def block(self, b: int) -> np.ndarray:
        n = self.problem.n
        return self.xvec[b * n:(b + 1) * n]

    @property
    def pg(self):
        return self.block(PG)

    @property
    def qg(self):
        return self.block(QG)

    @property
    def pl(self):
        return self.block(PL)

    @property
    def ql(self):
        return self.problem.ql

    @property
    def v(self):
        return self.block(V)

    @property
    def p_line(self):
        """Sending-end real flow on the line into each bus (entry 0 is the substation import)."""
        return self.block(PF)

    @property
    def q_line(self):
        return self.block(QF)

    @property
    def l_line(self):
        return self.block(LF)

    @property
    def p_sub(self) -> float:
        return float(self.block(PF)[0])

    @property
    def q_sub(self) -> float:
        return float(self.block(QF)[0])

    def losses(self) -> float:
        """Total resistive loss, pu."""
        return float(np.sum(self.problem.r * self.l_line))

    def relaxation_gap(self) -> np.ndarray:
        """Per-line slack l*v_parent - P^2 - Q^2 (zero when the relaxation is exact)."""
        return cone_slack(self.problem, self.xvec)

    def balance_residual(self) -> float:
        p = self.problem
        return float(np.max(np.abs(p.A_eq @ self.xvec - p.b_eq)))


@dataclass(frozen=True)
class DlmpVector:
    t: int
    bus_ids: tuple
    mu_p: np.ndarray
    mu_q: np.ndarray

    def as_dict(self) -> dict:
        return {b: (float(p), float(q)) for b, p, q in zip(self.bus_ids, self.mu_p, self.mu_q)}


@dataclass(frozen=True)
class Residuals:
    stationarity: float
    primal: float
    complementarity: float
    dual_feasibility: float = 0.0

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity, self.dual_feasibility)


def cone_slack(problem: OpfProblem, xvec: np.ndarray) -> np.ndarray:
    c = problem.cones
    return xvec[c[:, 2]] * xvec[c[:, 3]] - xvec[c[:, 0]] ** 2 - xvec[c[:, 1]] ** 2


def build_opf(
    network: Network,
    interval: IntervalInput,
    export_policy: ExportPolicy | str = ExportPolicy.ALLOWED,
    *,
    dg_enabled: bool = True,
    dr_enabled: bool = True,
    dg_cost_override: Optional[float] = None,
    substation_floor: Optional[float] = None,
    regularization: float = REGULARIZATION,
) -> OpfProblem:
    """Assemble the convex OPF for one clearing interval.

    ``substation_floor`` bounds the substation import from below (pu); ``None``
    leaves it free so the feeder may export to the wholesale market.
    ``dg_cost_override`` replaces every bus's DG cost (benchmarks run DG as a
    free must-take resource with cost 0).
    """
    export_policy = ExportPolicy(export_policy)
    topo = network.topology
    order = topo.order
    n = len(order)
    pos = {b: i for i, b in enumerate(order)}
    parent = np.array([pos[topo.parent[b]] if b in topo.parent else -1 for b in order])
    r = np.zeros(n)
    xr = np.zeros(n)
    lmax = np.zeros(n)
    for i, b in enumerate(order[1:], start=1):
        ln = network.line_to(b)
        r[i], xr[i], lmax[i] = ln.r, ln.x, ln.flow_limit

    buses = [network.bus(b) for b in order]
    alpha = interval.alpha
    pl_base = np.array([alpha * bus.baseline_load_p for bus in buses])
    ql_base = np.array([alpha * bus.baseline_load_q for bus in buses])
    gmax = np.array([bus.dg_p_max if dg_enabled else 0.0 for bus in buses])
    qgmax = np.array([bus.dg_q_max if dg_enabled else 0.0 for bus in buses])
    dr_frac = np.array([bus.dr_fraction if dr_enabled else 0.0 for bus in buses])
    dg_cost = np.array([bus.dg_cost if dg_cost_override is None else dg_cost_override for bus in buses])
    dr_cost = np.array([bus.dr_cost for bus in buses])

    nv = 7 * n
    blk = lambda b: slice(b * n, (b + 1) * n)  # noqa: E731
    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[blk(PG)], ub[blk(PG)] = 0.0, gmax
    lb[blk(QG)], ub[blk(QG)] = -qgmax, qgmax
    lb[blk(PL)], ub[blk(PL)] = (1.0 - dr_frac) * pl_base, pl_base
    lb[blk(V)], ub[blk(V)] = network.v_min, network.v_max
    lb[V * n], ub[V * n] = 1.0, 1.0
    lb[blk(LF)], ub[blk(LF)] = 0.0, lmax
    lb[LF * n], ub[LF * n] = 0.0, 0.0
    if substation_floor is not None:
        lb[PF * n] = substation_floor

    c = np.zeros(nv)
    c[PF * n] = interval.lambda_p
    c[blk(PG)] = dg_cost
    c[blk(PL)] = -dr_cost
    const = float(dr_cost @ pl_base)

    # strict convexity in the injections and squared currents pins a unique
    # optimum; flows and voltages on a tree follow from those, so they are left
    # unregularized and do not bias the prices. A line with r = x = 0 carries no
    # loss, so its l is left free as well (a penalty there would make the cone
    # bind and leak into the flow prices)
    reg = np.zeros(nv)
    for b in (PG, QG, PL, LF):
        reg[blk(b)] = regularization
    reg[LF * n] = 0.0
    reg[LF * n:(LF + 1) * n][(r == 0.0) & (xr == 0.0)] = 0.0
    reg_ref = np.zeros(nv)

    rows, cols, vals = [], [], []
    b_eq = np.zeros(3 * n - 1)

    def put(row, col, val):
        rows.append(row)
        cols.append(col)
        vals.append(val)

    # nodal real balance, row i; reactive balance, row n + i
    for i in range(n):
        put(i, PF * n + i, 1.0)
        put(i, PG * n + i, 1.0)
        put(i, PL * n + i, -1.0)
        put(n + i, QF * n + i, 1.0)
        put(n + i, QG * n + i, 1.0)
        b_eq[n + i] = ql_base[i]
        if i > 0:
            put(i, LF * n + i, -r[i])
            put(n + i, LF * n + i, -xr[i])
    for i in range(1, n):
        a = parent[i]
        put(a, PF * n + i, -1.0)
        put(n + a, QF * n + i, -1.0)
    # voltage drop along the line into bus i, row 2n + i - 1
    for i in range(1, n):
        row = 2 * n + i - 1
        put(row, V * n + i, 1.0)
        put(row, V * n + parent[i], -1.0)
        put(row, PF * n + i, 2.0 * r[i])
        put(row, QF * n + i, 2.0 * xr[i])
        put(row, LF * n + i, -(r[i] ** 2 + xr[i] ** 2))
    A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(3 * n - 1, nv))
    A_eq.eliminate_zeros()

    if export_policy is ExportPolicy.NO_EXPORT:
        A_in = sp.csr_matrix(
            (np.r_[np.ones(n), -np.ones(n)],
             (np.r_[np.arange(n), np.arange(n)], np.r_[PG * n + np.arange(n), PL * n + np.arange(n)])),
            shape=(n, nv),
        )
        b_in = np.zeros(n)
    else:
        A_in = sp.csr_matrix((0, nv))
        b_in = np.zeros(0)

    kids = np.arange(1, n)
    cones = np.column_stack([PF * n + kids, QF * n + kids, LF * n + kids, V * n + parent[kids]])

    return OpfProblem(
        network=network,
        interval=interval,
        export_policy=export_policy,
        bus_ids=tuple(order),
        parent=parent,
        r=r,
        x=xr,
        c=c,
        const=const,
        reg=reg,
        reg_ref=reg_ref,
        lb=lb,
        ub=ub,
        A_eq=A_eq,
        b_eq=b_eq,
        A_in=A_in,
        b_in=b_in,
        cones=cones.astype(int),
        ql=ql_base.copy(),
        pl_base=pl_base,
        ql_base=ql_base,
        options=dict(dg_enabled=dg_enabled, dr_enabled=dr_enabled,
                     dg_cost_override=dg_cost_override, substation_floor=substation_floor,
                     regularization=regularization),
    )


def perturb_load(problem: OpfProblem, bus: int, dp: float = 0.0, dq: float = 0.0) -> OpfProblem:
    """Copy of ``problem`` with a fixed, non-curtailable extra load at ``bus`` (pu)."""
    i = problem.position(bus)
    b_eq = problem.b_eq.copy()
    b_eq[i] += dp
    b_eq[problem.n + i] += dq
    ql = problem.ql.copy()
    ql[i] += dq
    return replace(problem, b_eq=b_eq, ql=ql)


# -- centralized solve -------------------------------------------------------

def _conic_form(problem: OpfProblem):
    """Stack constraints as A x + s = b with s in (zero, nonneg, soc...)."""
    n_var = problem.n_var
    lb, ub = problem.lb, problem.ub
    fixed = np.flatnonzero(np.isfinite(lb) & np.isfinite(ub) & (lb == ub))
    has_lo = np.flatnonzero(np.isfinite(lb) & ~(lb == ub))
    has_hi = np.flatnonzero(np.isfinite(ub) & ~(lb == ub))

    eye = sp.identity(n_var, format="csr")
    A_zero = sp.vstack([problem.A_eq, eye[fixed]], format="csc")
    b_zero = np.r_[problem.b_eq, lb[fixed]]
    A_pos = sp.vstack([problem.A_in, -eye[has_lo], eye[has_hi]], format="csc")
    b_pos = np.r_[problem.b_in, -lb[has_lo], ub[has_hi]]

    c = problem.cones
    m = len(c)
    # s = (l + v, 2P, 2Q, l - v) lies in the second-order cone
    k = np.arange(m)
    r_idx = np.c_[4 * k, 4 * k, 4 * k + 1, 4 * k + 1, 4 * k + 2, 4 * k + 2, 4 * k + 3, 4 * k + 3].ravel()
    c_idx = np.c_[c[:, 2], c[:, 3], c[:, 0], c[:, 0], c[:, 1], c[:, 1], c[:, 2], c[:, 3]].ravel()
    v_idx = np.tile([-1.0, -1.0, -2.0, 0.0, -2.0, 0.0, -1.0, 1.0], m)
    keep = v_idx != 0.0
    A_soc = sp.csc_matrix((v_idx[keep], (r_idx[keep], c_idx[keep])), shape=(4 * m, n_var))
    A = sp.vstack([A_zero, A_pos, A_soc], format="csc")
    b = np.r_[b_zero, b_pos, np.zeros(4 * m)]
    return A, b, dict(n_zero=A_zero.shape[0], n_pos=A_pos.shape[0], n_soc=m,
                      fixed=fixed, has_lo=has_lo, has_hi=has_hi, n_eq=problem.A_eq.shape[0],
                      n_in=problem.A_in.shape[0])


def solve_centralized(problem: OpfProblem, tol: float = 1e-9, max_iter: int = 200) -> OpfSolution:
    """Solve with the Clarabel interior-point method and map duals back to prices."""
    import clarabel

    A, b, dims = _conic_form(problem)
    P = sp.diags(2.0 * problem.reg, format="csc")
    q = problem.c - 2.0 * problem.reg * problem.reg_ref
    cones = [clarabel.ZeroConeT(dims["n_zero"]), clarabel.NonnegativeConeT(dims["n_pos"])]
    cones += [clarabel.SecondOrderConeT(4)] * dims["n_soc"]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = 1e-8
    solver = clarabel.DefaultSolver(sp.triu(P, format="csc"), q, A, b, cones, settings)
    res = solver.solve()
    status_name = str(res.status)
    x = np.asarray(res.x)
    z = np.asarray(res.z)

    if "Infeasible" in status_name:
        status = Status.INFEASIBLE
    elif status_name.endswith("Solved") and "Almost" not in status_name:
        status = Status.OPTIMAL
    elif "AlmostSolved" in status_name:
        status = Status.OPTIMAL
        log.warning("interval %s: solver reached reduced accuracy (%s)", problem.interval.t, status_name)
    else:
        status = Status.MAX_ITER

    if status is Status.OPTIMAL:
        x = restore_lossless_flows(problem, x)

    n = problem.n
    n_eq, n_zero, n_pos = dims["n_eq"], dims["n_zero"], dims["n_pos"]
    eq_dual = z[:n_eq]
    if status is Status.INFEASIBLE:
        nan = np.full(n, np.nan)
        return OpfSolution(problem, status, np.full(problem.n_var, np.nan), float("nan"), nan, nan,
                           iterations=res.iterations, info={"solver_status": status_name})

    lb_dual = np.zeros(problem.n_var)
    ub_dual = np.zeros(problem.n_var)
    fixed_dual = z[n_eq:n_zero]
    # fixed variables: split the multiplier into the bound that is "pushing"
    lb_dual[dims["fixed"]] = np.maximum(-fixed_dual, 0.0)
    ub_dual[dims["fixed"]] = np.maximum(fixed_dual, 0.0)
    zp = z[n_zero:n_zero + n_pos]
    n_in = dims["n_in"]
    ineq_dual = zp[:n_in]
    lo_part = zp[n_in:n_in + len(dims["has_lo"])]
    hi_part = zp[n_in + len(dims["has_lo"]):]
    lb_dual[dims["has_lo"]] += lo_part
    ub_dual[dims["has_hi"]] += hi_part
    cone_dual = z[n_zero + n_pos:].reshape(-1, 4)

    sol = OpfSolution(
        problem=problem,
        status=status,
        xvec=x,
        objective=problem.objective(x),
        mu_p=-eq_dual[:n].copy(),
        mu_q=-eq_dual[n:2 * n].copy(),
        eq_dual=eq_dual,
        ineq_dual=ineq_dual,
        lb_dual=lb_dual,
        ub_dual=ub_dual,
        cone_dual=cone_dual,
        iterations=res.iterations,
        info={"solver_status": status_name, "solve_time": res.solve_time},
    )
    gap = float(np.max(sol.relaxation_gap(), initial=0.0))
    sol.info["relaxation_gap"] = gap
    if gap > RELAXATION_GAP_TOL:
        log.warning("interval %s: SOC relaxation gap %.2e exceeds %.0e",
                    problem.interval.t, gap, RELAXATION_GAP_TOL)
    return sol


def sweep_flows(problem: OpfProblem, xvec: np.ndarray) -> np.ndarray:
    """Recompute line flows P, Q from injections and l by a leaf-to-root sweep.

    The result satisfies every power balance row exactly, so the substation
    import equals net load plus losses. Used to recover a consistent dispatch
    from an iterate whose balance rows hold only to a tolerance.
    """
    n = problem.n
    out = xvec.copy()
    blk = lambda b: slice(b * n, (b + 1) * n)  # noqa: E731
    pg, qg, pl, l = out[blk(PG)], out[blk(QG)], out[blk(PL)], out[blk(LF)]
    P = pl - pg + problem.r * l
    Q = problem.ql - qg + problem.x * l
    for i in range(n - 1, 0, -1):
        P[problem.parent[i]] += P[i]
        Q[problem.parent[i]] += Q[i]
    out[blk(PF)], out[blk(QF)] = P, Q
    return out


def restore_lossless_flows(problem: OpfProblem, xvec: np.ndarray) -> np.ndarray:
    """Set l = (P^2 + Q^2) / v_parent on lines with r = x = 0.

    On such lines l enters no constraint except its own cone, so the solver may
    leave it anywhere above the cone surface; the recovered value is the
    physical squared current and changes no other variable.
    """
    c = problem.cones
    lossless = (problem.r[1:] == 0.0) & (problem.x[1:] == 0.0)
    if not lossless.any():
        return xvec
    out = xvec.copy()
    rows = c[lossless]
    v = np.maximum(out[rows[:, 3]], 1e-12)
    out[rows[:, 2]] = np.minimum((out[rows[:, 0]] ** 2 + out[rows[:, 1]] ** 2) / v,
                                 problem.ub[rows[:, 2]])
    return out


def extract_dlmp(solution: OpfSolution) -> DlmpVector:
    if solution.status is not Status.OPTIMAL:
        raise OpfError(f"cannot extract prices from a {solution.status.value} solution")
    p = solution.problem
    return DlmpVector(t=p.interval.t, bus_ids=p.bus_ids,
                      mu_p=np.asarray(solution.mu_p, float).copy(),
                      mu_q=np.asarray(solution.mu_q, float).copy())


def finite_difference_price(problem: OpfProblem, bus: int, eps: float = 1e-4,
                            reactive: bool = False, base: Optional[OpfSolution] = None) -> float:
    """Marginal cost of serving ``eps`` pu more load at ``bus``, in $/kWh, by re-solving."""
    base = base if base is not None else solve_centralized(problem)
    if base.status is not Status.OPTIMAL:
        raise OpfError("base problem is not optimal")
    bumped = perturb_load(problem, bus, dq=eps) if reactive else perturb_load(problem, bus, dp=eps)
    sol = solve_centralized(bumped)
    if sol.status is not Status.OPTIMAL:
        raise InfeasibleError(f"perturbed problem at bus {bus} is {sol.status.value}")
    return (sol.objective - base.objective) / (eps * problem.scale)


def verify_kkt(problem: OpfProblem, solution: OpfSolution) -> Residuals:
    """Max-norm KKT residuals of the conic program, computed from the canonical arrays.

    Primal residual covers equalities, inequalities, bounds and cones; slacks are
    recomputed from the primal point, not taken from the solver.
    """
    x = solution.xvec
    primal = float(np.max(np.abs(problem.A_eq @ x - problem.b_eq), initial=0.0))
    if problem.A_in.shape[0]:
        primal = max(primal, float(np.max(problem.A_in @ x - problem.b_in, initial=0.0)))
    primal = max(primal, float(np.max(problem.lb - x, initial=0.0)),
                 float(np.max(x - problem.ub, initial=0.0)))
    cone_pts = _cone_points(problem, x)
    cone_viol = np.linalg.norm(cone_pts[:, 1:], axis=1) - cone_pts[:, 0]
    primal = max(primal, float(np.max(cone_viol, initial=0.0)))

    if solution.eq_dual is None:
        return Residuals(stationarity=float("nan"), primal=primal, complementarity=float("nan"))

    grad = problem.c + 2.0 * problem.reg * (x - problem.reg_ref)
    grad = grad + problem.A_eq.T @ solution.eq_dual
    if problem.A_in.shape[0]:
        grad = grad + problem.A_in.T @ solution.ineq_dual
    grad = grad - solution.lb_dual + solution.ub_dual
    grad = grad - _cone_jacobian_T(problem, solution.cone_dual)
    stationarity = float(np.max(np.abs(grad)))

    comp = 0.0
    dual_feas = 0.0
    if problem.A_in.shape[0]:
        slack = problem.b_in - problem.A_in @ x
        comp = max(comp, float(np.max(np.abs(slack * solution.ineq_dual), initial=0.0)))
        dual_feas = max(dual_feas, float(np.max(-solution.ineq_dual, initial=0.0)))
    free = problem.lb != problem.ub
    lo = np.isfinite(problem.lb) & free
    hi = np.isfinite(problem.ub) & free
    comp = max(comp, float(np.max(np.abs((x - problem.lb)[lo] * solution.lb_dual[lo]), initial=0.0)))
    comp = max(comp, float(np.max(np.abs((problem.ub - x)[hi] * solution.ub_dual[hi]), initial=0.0)))
    zc = solution.cone_dual
    comp = max(comp, float(np.max(np.abs(np.sum(cone_pts * zc, axis=1)), initial=0.0)))
    dual_feas = max(dual_feas, float(np.max(-solution.lb_dual[lo], initial=0.0)),
                    float(np.max(-solution.ub_dual[hi], initial=0.0)),
                    float(np.max(np.linalg.norm(zc[:, 1:], axis=1) - zc[:, 0], initial=0.0)))
    return Residuals(stationarity=stationarity, primal=primal, complementarity=comp,
                     dual_feasibility=dual_feas)


def _cone_points(problem: OpfProblem, x: np.ndarray) -> np.ndarray:
    c = problem.cones
    P, Q, l, v = x[c[:, 0]], x[c[:, 1]], x[c[:, 2]], x[c[:, 3]]
    return np.column_stack([l + v, 2 * P, 2 * Q, l - v])


def _cone_jacobian_T(problem: OpfProblem, zc: np.ndarray) -> np.ndarray:
    """Transpose of d(cone point)/dx applied to the cone multipliers."""
    c = problem.cones
    out = np.zeros(problem.n_var)
    np.add.at(out, c[:, 2], zc[:, 0] + zc[:, 3])
    np.add.at(out, c[:, 3], zc[:, 0] - zc[:, 3])
    np.add.at(out, c[:, 0], 2 * zc[:, 1])
    np.add.at(out, c[:, 1], 2 * zc[:, 2])
    return out


def loss_residual(solution: OpfSolution) -> float:
    """|P_sub + sum(P^G) - sum(P^L) - sum(r l)| in pu."""
    return abs(solution.p_sub + float(np.sum(solution.pg)) - float(np.sum(solution.pl))
               - solution.losses())
