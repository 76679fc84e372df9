import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsomarket.atomic import (N_OWN, ProtocolError, RoundMessage, SolverConfig, atomize,
                              canonical_constraints, consistency_residual, local_update,
                              outbox_for, project_soc, reassemble, run_rounds, solve_distributed,
                              write_audit_log)
from dsomarket.grid import network_from_dict
from dsomarket.opf import ExportPolicy, IntervalInput, Status, build_opf, solve_centralized
from conftest import bus, chain, feeder_dict, random_tree, two_bus

TIGHT = SolverConfig(rho=0.01, relaxation=1.6, max_rounds=40000,
                     eps_primal=1e-8, eps_consistency=1e-8, eps_dual=1e-8)


def problem(net, alpha=1.0, lam=0.05, **kw):
    return build_opf(net, IntervalInput(t=0, alpha=alpha, lambda_p=lam), **kw)


def test_two_bus_lossless_oracle():
    pr = problem(two_bus(p=300.0, q=100.0, r=0.0, x=0.0), lam=0.04)
    sol = solve_distributed(pr, TIGHT)
    assert sol.status is Status.OPTIMAL
    central = solve_centralized(pr)
    assert sol.objective == pytest.approx(central.objective, abs=1e-6)
    assert np.max(np.abs(sol.mu_p - 0.04)) < 1e-6


def test_two_bus_structure():
    atoms = atomize(problem(two_bus()))
    assert atoms.n == 2
    # child copies the parent's voltage; parent copies the child's (P, Q)
    assert atoms.n_consistency() == 3
    assert atoms.neighbours(0) == [1] and atoms.neighbours(1) == [0]


def test_ieee_structure(ieee123):
    atoms = atomize(problem(ieee123))
    assert atoms.n == 123
    assert atoms.n_consistency() == 3 * len(ieee123.lines)
    re, canon = reassemble(atoms), canonical_constraints(atoms.problem)
    assert re["rows"] == canon["rows"]
    assert re["cones"] == canon["cones"]


def test_reassembly_random_trees(rng):
    for n in (2, 5, 17):
        pr = problem(random_tree(rng, n))
        re, canon = reassemble(atomize(pr)), canonical_constraints(pr)
        assert re == canon


def test_fresh_atoms_consistent(ieee123):
    atoms = atomize(problem(ieee123))
    assert consistency_residual(atoms) == 0.0


def test_one_round_breaks_consistency(ieee123):
    sol = solve_distributed(problem(ieee123), SolverConfig(rho=0.01, max_rounds=1))
    assert sol.status is Status.MAX_ITER
    assert len(sol.residual_trace) == 1
    assert consistency_residual(sol.atoms) > 0


def test_ieee_matches_centralized(ieee123):
    pr = problem(ieee123, alpha=0.9, lam=0.04)
    central = solve_centralized(pr)
    sol = solve_distributed(pr, SolverConfig(rho=0.01, max_rounds=40000, eps_primal=1e-6,
                                             eps_consistency=1e-6, eps_dual=1e-6))
    assert sol.status is Status.OPTIMAL
    assert abs(sol.objective - central.objective) / abs(central.objective) <= 1e-4
    assert np.max(np.abs(sol.mu_p - central.mu_p)) <= 1e-3
    assert np.max(np.abs(sol.mu_q - central.mu_q)) <= 1e-3
    assert consistency_residual(sol.atoms) <= 1e-6
    tail = np.array(sol.residual_trace[-len(sol.residual_trace) // 10:])
    assert np.all(np.diff(tail) <= 1e-9)


def test_no_export_matches_centralized():
    net = random_tree(np.random.default_rng(3), 10)
    pr = problem(net, alpha=0.4, lam=0.03, export_policy=ExportPolicy.NO_EXPORT,
                 dg_cost_override=0.0, substation_floor=0.0, dr_enabled=False)
    central = solve_centralized(pr)
    sol = solve_distributed(pr, TIGHT)
    assert sol.status is Status.OPTIMAL
    assert np.all(sol.pg <= sol.pl + 1e-7)
    assert sol.objective == pytest.approx(central.objective, rel=1e-5)
    assert np.max(np.abs(sol.mu_p - central.mu_p)) < 1e-5


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.floats(0.3, 1.0), st.floats(0.01, 0.08))
def test_random_feeders_match_centralized(seed, n, alpha, lam):
    pr = problem(random_tree(np.random.default_rng(seed), n), alpha=alpha, lam=lam)
    central = solve_centralized(pr)
    sol = solve_distributed(pr, TIGHT)
    assert sol.status is Status.OPTIMAL
    assert abs(sol.objective - central.objective) <= 1e-4 * abs(central.objective) + 1e-9
    assert np.max(np.abs(sol.mu_p - central.mu_p)) <= 1e-4


def test_deterministic_across_workers(ieee123):
    pr = problem(ieee123)
    runs = [solve_distributed(pr, SolverConfig(rho=0.01, max_rounds=200, workers=w)) for w in (1, 2, 5)]
    for r in runs[1:]:
        assert r.residual_trace == runs[0].residual_trace
        assert np.array_equal(r.xvec, runs[0].xvec)
        assert np.array_equal(r.mu_p, runs[0].mu_p)


def test_jittered_start_reproducible(ieee123):
    pr = problem(ieee123)
    cfg = SolverConfig(rho=0.01, max_rounds=50, seed=5, init_jitter=0.2)
    a, b = solve_distributed(pr, cfg), solve_distributed(pr, cfg)
    assert a.residual_trace == b.residual_trace


def _deliver(outboxes):
    inbox = {}
    for msgs in outboxes:
        for m in msgs:
            inbox.setdefault(m.receiver, []).append(m)
    return inbox


def _step_all(atoms_list, kind, rho, relax):
    out = [outbox_for(a.blocks, a, kind) for a in atoms_list]
    inbox = _deliver(out)
    res = [local_update(a, inbox.get(a.bus, []), rho, relax) for a in atoms_list]
    return [r[0] for r in res], [r[1] for r in res]


def test_per_atom_protocol_matches_engine():
    pr = problem(chain(6, dg_at=(3, 5), dg=80.0))
    batch = atomize(pr, rho=0.01)
    run_rounds(batch, SolverConfig(rho=0.01, relaxation=1.6, max_rounds=5))
    single = atomize(pr, rho=0.01)
    agents = [single.atom(i) for i in range(single.n)]
    for _ in range(5):
        inbox = _deliver([outbox_for(single, a, "state") for a in agents])
        agents = [local_update(a, inbox.get(a.bus, []), 0.01, 1.6)[0] for a in agents]
        inbox = _deliver([outbox_for(single, a, "contrib") for a in agents])
        agents = [local_update(a, inbox.get(a.bus, []), 0.01, 1.6)[0] for a in agents]
    x = np.array([a.x for a in agents])
    assert np.max(np.abs(x - batch.x)) < 1e-12
    assert np.max(np.abs(np.array([a.eta for a in agents]) - batch.eta)) < 1e-12


def test_local_update_uses_only_inbox():
    pr = problem(chain(4))
    atoms = atomize(pr, rho=0.01)
    a = atoms.atom(1)
    inbox = [m for i in (0, 2) for m in outbox_for(atoms, atoms.atom(i), "state") if m.receiver == a.bus]
    first, _ = local_update(a, inbox, 0.01, 1.6)
    # scrambling every other atom's stored state must not change the result
    atoms.x[[0, 2, 3]] = 123.0
    atoms.z[[0, 2, 3]] = -7.0
    second, _ = local_update(a, inbox, 0.01, 1.6)
    assert np.array_equal(first.z, second.z) and np.array_equal(first.eta, second.eta)


def test_missing_message_is_protocol_error():
    atoms = atomize(problem(chain(4)), rho=0.01)
    a = atoms.atom(1)
    inbox = [m for m in outbox_for(atoms, atoms.atom(0), "state") if m.receiver == a.bus]
    with pytest.raises(ProtocolError):
        local_update(a, inbox)
    stale = [RoundMessage(a.round + 3, m.kind, m.sender, m.receiver, m.payload) for m in inbox]
    with pytest.raises(ProtocolError):
        local_update(a, stale)


def test_fixed_point_is_stationary(ieee123):
    pr = problem(ieee123, alpha=0.7, lam=0.03)
    sol = solve_distributed(pr, SolverConfig(rho=0.01, max_rounds=60000, eps_primal=1e-11,
                                             eps_consistency=1e-11, eps_dual=1e-11))
    atoms = sol.atoms
    before = [outbox_for(atoms, atoms.atom(i), "state") for i in range(atoms.n)]
    run_rounds(atoms, SolverConfig(rho=0.01, max_rounds=1))
    after = [outbox_for(atoms, atoms.atom(i), "state") for i in range(atoms.n)]
    diff = max(abs(p - q) for b, c in zip(before, after) for m1, m2 in zip(b, c)
               for p, q in zip(m1.payload, m2.payload))
    assert diff < 1e-10


def test_single_bus_network():
    net = network_from_dict(feeder_dict([bus(1, p=100.0, dg=50.0, dgc=0.01)], []))
    pr = problem(net, lam=0.05)
    central = solve_centralized(pr)
    sol = solve_distributed(pr, TIGHT)
    assert sol.status is Status.OPTIMAL
    assert sol.pg[0] == pytest.approx(central.pg[0], abs=1e-7)
    assert sol.mu_p[0] == pytest.approx(0.05, abs=1e-7)


def test_audit_log_only_tree_edges(tmp_path, ieee123):
    pr = problem(ieee123)
    msgs = []
    solve_distributed(pr, SolverConfig(rho=0.01, max_rounds=3), audit=msgs.append)
    topo = ieee123.topology
    edges = {(p, c) for c, p in topo.parent.items()} | {(c, p) for c, p in topo.parent.items()}
    assert {(m.sender, m.receiver) for m in msgs} == edges
    assert len(msgs) == 3 * 2 * len(edges)
    per_edge = {}
    for m in msgs:
        per_edge.setdefault((m.sender, m.receiver, m.kind), []).append(m.round)
        assert len(m.payload) == 3
    assert all(r == sorted(set(r)) for r in per_edge.values())
    path = tmp_path / "audit.jsonl"
    write_audit_log(msgs, path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"round", "kind", "from", "to", "payload_hash"}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_soc_projection(y):
    y = np.array([y])
    p = project_soc(y)
    assert np.linalg.norm(p[0, 1:]) <= p[0, 0] + 1e-12
    assert np.allclose(project_soc(p), p)
    # Moreau: y - p lies in the polar cone and is orthogonal to p
    d = y - p
    assert abs(float(d[0] @ p[0])) < 1e-9
    assert np.linalg.norm(d[0, 1:]) <= -d[0, 0] + 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_rounds=0)
    with pytest.raises(ValueError):
        SolverConfig(eps_primal=0.0)
    with pytest.raises(ValueError):
        SolverConfig(relaxation=2.0)
