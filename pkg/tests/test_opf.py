import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from dsomarket.grid import network_from_dict, network_to_dict
from dsomarket.opf import (REGULARIZATION, ExportPolicy, IntervalInput, OpfError, Status,
                           build_opf, extract_dlmp, finite_difference_price, loss_residual,
                           perturb_load, solve_centralized, sweep_flows, verify_kkt)
from conftest import bus, chain, feeder_dict, line, random_tree, two_bus


def cvxpy_oracle(network, alpha, lam, duration=5 / 60, no_export=False, floor=None):
    """Branch-flow SOC program written directly from the network description."""
    cp = pytest.importorskip("cvxpy")
    topo = network.topology
    order = list(topo.order)
    n = len(order)
    pos = {b: i for i, b in enumerate(order)}
    buses = [network.bus(b) for b in order]
    pl0 = np.array([alpha * b.baseline_load_p for b in buses])
    ql = np.array([alpha * b.baseline_load_q for b in buses])
    pg, qg, pl = cp.Variable(n), cp.Variable(n), cp.Variable(n)
    v = cp.Variable(n)
    P, Q, L = cp.Variable(n), cp.Variable(n), cp.Variable(n)   # line into each bus; 0 = substation
    cons = [pg >= 0, pg <= np.array([b.dg_p_max for b in buses]),
            cp.abs(qg) <= np.array([b.dg_q_max for b in buses]),
            pl >= (1 - np.array([b.dr_fraction for b in buses])) * pl0, pl <= pl0,
            v >= network.v_min, v <= network.v_max, v[0] == 1, L[0] == 0, L >= 0]
    if floor is not None:
        cons.append(P[0] >= floor)
    if no_export:
        cons.append(pg <= pl)
    bal_p, bal_q = [], []
    for b in order:
        i = pos[b]
        kids = [pos[c] for c in topo.children[b]]
        out_p = sum(P[k] for k in kids) if kids else 0
        out_q = sum(Q[k] for k in kids) if kids else 0
        if i == 0:
            loss_p = loss_q = 0
        else:
            ln = network.line_to(b)
            loss_p, loss_q = ln.r * L[i], ln.x * L[i]
            cons += [v[i] == v[pos[topo.parent[b]]] - 2 * (ln.r * P[i] + ln.x * Q[i])
                     + (ln.r ** 2 + ln.x ** 2) * L[i],
                     L[i] <= ln.flow_limit,
                     cp.quad_over_lin(cp.hstack([P[i], Q[i]]), v[pos[topo.parent[b]]]) <= L[i]]
        c1 = (P[i] - loss_p + pg[i] - pl[i] - out_p == 0)
        c2 = (Q[i] - loss_q + qg[i] - ql[i] - out_q == 0)
        bal_p.append(c1)
        bal_q.append(c2)
    cons += bal_p + bal_q
    dgc = np.array([b.dg_cost for b in buses])
    drc = np.array([b.dr_cost for b in buses])
    rho = REGULARIZATION
    lossy = [pos[b] for b in order[1:] if network.line_to(b).r > 0 or network.line_to(b).x > 0]
    obj = (lam * P[0] + dgc @ pg + drc @ (pl0 - pl)
           + rho * (cp.sum_squares(pg) + cp.sum_squares(qg) + cp.sum_squares(pl)
                    + (cp.sum_squares(L[lossy]) if lossy else 0)))
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver="CLARABEL")
    scale = duration * network.s_base
    # cvxpy reports equality duals with the opposite sign convention to a price
    mu = np.array([-c.dual_value for c in bal_p])
    return prob.value * scale, mu, P.value[0]


def solve(net, alpha=1.0, lam=0.05, **kw):
    pr = build_opf(net, IntervalInput(t=0, alpha=alpha, lambda_p=lam), **kw)
    return pr, solve_centralized(pr)


def test_two_bus_lossless_analytic():
    net = two_bus(p=300.0, q=100.0, r=0.0, x=0.0)
    pr, s = solve(net, lam=0.04, dr_enabled=False)
    assert s.status is Status.OPTIMAL
    assert np.allclose(s.mu_p, 0.04, atol=1e-7)
    # the regularizer adds O(1e-6) relative
    assert s.objective == pytest.approx(0.04 * 300.0 * 5 / 60, rel=1e-5)


def test_two_bus_lossy_matches_closed_form():
    p, q, r, x, lam = 0.4, 0.15, 0.02, 0.04, 0.05
    net = two_bus(p=p * 1000, q=q * 1000, r=r, x=x, dr=0.0)
    pr, s = solve(net, lam=lam)

    def psub_of(pload):
        # P_s = p + r l, Q_s = q + x l, l = P_s^2 + Q_s^2 (v_root = 1)
        f = lambda l: (pload + r * l) ** 2 + (q + x * l) ** 2 - l  # noqa: E731
        l = brentq(f, 0.0, 1.0)
        return pload + r * l

    assert s.p_sub == pytest.approx(psub_of(p), abs=1e-7)
    h = 1e-6
    mu_exact = lam * (psub_of(p + h) - psub_of(p - h)) / (2 * h)
    assert s.mu_p[1] == pytest.approx(mu_exact, abs=1e-6)
    assert s.mu_p[0] == pytest.approx(lam, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_against_independent_model(seed):
    rng = np.random.default_rng(seed)
    net = random_tree(rng, 15)
    pr, s = solve(net, alpha=0.9, lam=0.05)
    obj, mu, psub = cvxpy_oracle(net, 0.9, 0.05)
    assert s.objective == pytest.approx(obj, rel=1e-6)
    assert np.max(np.abs(s.mu_p - mu)) < 1e-5
    assert s.p_sub == pytest.approx(psub, abs=1e-6)


def test_no_export_against_independent_model():
    rng = np.random.default_rng(7)
    net = random_tree(rng, 12)
    pr, s = solve(net, alpha=0.5, lam=0.03, export_policy=ExportPolicy.NO_EXPORT, substation_floor=0.0)
    obj, mu, _ = cvxpy_oracle(net, 0.5, 0.03, no_export=True, floor=0.0)
    assert s.objective == pytest.approx(obj, rel=1e-6)
    assert np.all(s.pg <= s.pl + 1e-9)


def test_ieee_kkt_and_root_price(ieee123):
    for alpha, lam in [(1.0, 0.05), (0.6, 0.015)]:
        pr, s = solve(ieee123, alpha=alpha, lam=lam)
        assert s.status is Status.OPTIMAL
        res = verify_kkt(pr, s)
        assert max(res.stationarity, res.primal, res.complementarity, res.dual_feasibility) < 1e-6
        assert s.mu_p[0] == pytest.approx(lam, abs=1e-8)
        assert loss_residual(s) < 1e-8


def test_finite_difference_prices(ieee123):
    pr, s = solve(ieee123, alpha=0.95, lam=0.045)
    for b in [1, 35, 76, 114]:
        fd = finite_difference_price(pr, b, base=s)
        assert s.mu_p[pr.position(b)] == pytest.approx(fd, abs=max(1e-4, 0.01 * abs(fd)))
    fdq = finite_difference_price(pr, 114, base=s, reactive=True)
    assert s.mu_q[pr.position(114)] == pytest.approx(fdq, abs=1e-4)


def test_lossless_unconstrained_flat_prices(ieee123):
    d = network_to_dict(ieee123)
    for ln in d["lines"]:
        ln["r_pu"] = ln["x_pu"] = 0.0
        ln["flow_limit_pu"] = 100.0
    net = network_from_dict(d)
    pr, s = solve(net, alpha=1.0, lam=0.0321)
    assert np.max(np.abs(s.mu_p - 0.0321)) < 1e-6
    assert np.max(np.abs(s.mu_q)) < 1e-6


def test_perturb_load_shifts_balance():
    net = chain(4)
    pr = build_opf(net, IntervalInput(0, 1.0, 0.05), dr_enabled=False)
    s0 = solve_centralized(pr)
    s1 = solve_centralized(perturb_load(pr, 4, dp=0.01))
    assert s1.p_sub > s0.p_sub + 0.01


def test_infeasible_detected():
    d = feeder_dict([bus(1), bus(2, 5000.0, 0.0, dr=0.0)], [line(1, 2, 0.01, 0.02, lim=0.01)])
    pr, s = solve(network_from_dict(d), dr_enabled=False)
    assert s.status is Status.INFEASIBLE
    with pytest.raises(OpfError):
        extract_dlmp(s)


def test_dr_and_dg_follow_price():
    net = two_bus(p=300.0, q=0.0, r=0.0, x=0.0, dg=100.0, dgc=0.02, drc=0.03)
    _, cheap = solve(net, lam=0.01)
    _, dear = solve(net, lam=0.06)
    assert cheap.pg[1] == pytest.approx(0.0, abs=1e-6)
    assert cheap.pl[1] == pytest.approx(0.3, abs=1e-6)
    assert dear.pg[1] == pytest.approx(0.1, abs=1e-6)
    assert dear.pl[1] == pytest.approx(0.27, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 25), st.floats(0.3, 1.0), st.floats(0.01, 0.08))
def test_random_feeders_consistent(seed, n, alpha, lam):
    net = random_tree(np.random.default_rng(seed), n)
    pr, s = solve(net, alpha=alpha, lam=lam)
    assert s.status is Status.OPTIMAL
    assert s.mu_p[0] == pytest.approx(lam, abs=1e-7)
    assert loss_residual(s) < 1e-7
    assert s.balance_residual() < 1e-7
    assert np.all(s.pl <= pr.pl_base + 1e-9)
    gap = s.relaxation_gap()
    assert gap.min() > -1e-7
    assert gap.max() < 1e-4 or s.info.get("relaxation_flagged")


def test_sweep_flows_recovers_balance(ieee123, rng):
    pr, s = solve(ieee123, alpha=0.9, lam=0.04)
    swept = sweep_flows(pr, s.xvec)
    # at a solver optimum the sweep reproduces the flows
    assert np.max(np.abs(swept - s.xvec)) < 1e-8
    noisy = s.xvec + 1e-5 * rng.standard_normal(s.xvec.size)
    fixed = sweep_flows(pr, noisy)
    sol = type(s)(problem=pr, status=s.status, xvec=fixed, objective=pr.objective(fixed),
                  mu_p=s.mu_p, mu_q=s.mu_q, iterations=0)
    assert loss_residual(sol) < 1e-12
    eq = pr.A_eq @ fixed - pr.b_eq
    n = pr.n
    # the 2n balance rows hold exactly; only the voltage rows see the noise
    assert np.max(np.abs(eq[:2 * n])) < 1e-12
