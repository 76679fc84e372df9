import numpy as np
import pytest

from dsomarket.grid import load_network, network_from_dict, shipped_network_path


def bus(i, p=0.0, q=0.0, dg=0.0, dgq=0.0, dr=0.1, dgc=0.02, drc=0.03):
    return {"id": i, "p_kw": p, "q_kvar": q, "dg_p_max_kw": dg, "dg_q_max_kvar": dgq,
            "dr_fraction": dr, "dg_cost_per_kwh": dgc, "dr_cost_per_kwh": drc}


def line(a, b, r=0.01, x=0.02, lim=4.0):
    return {"from": a, "to": b, "r_pu": r, "x_pu": x, "flow_limit_pu": lim}


def feeder_dict(buses, lines, sub=1, s_base=1000.0):
    return {"s_base_kva": s_base, "v_base_kv": 4.16, "v_min_pu": 0.95 ** 2, "v_max_pu": 1.05 ** 2,
            "substation": sub, "buses": buses, "lines": lines}


def two_bus(p=200.0, q=80.0, r=0.01, x=0.02, **kw):
    return network_from_dict(feeder_dict([bus(1), bus(2, p, q, **kw)], [line(1, 2, r, x)]))


def chain(n=5, r=0.005, x=0.01, p=100.0, q=40.0, dg_at=(), dg=0.0):
    buses = [bus(1)] + [bus(i, p, q, dg=dg if i in dg_at else 0.0) for i in range(2, n + 1)]
    lines = [line(i, i + 1, r, x) for i in range(1, n)]
    return network_from_dict(feeder_dict(buses, lines))


def random_tree(rng, n, lossless=False):
    buses = [bus(1)]
    lines = []
    for i in range(2, n + 1):
        par = int(rng.integers(1, i))
        has_dg = rng.random() < 0.3
        buses.append(bus(i, p=float(rng.uniform(10, 120)), q=float(rng.uniform(0, 50)),
                         dg=float(rng.uniform(20, 150)) if has_dg else 0.0,
                         dgc=float(rng.uniform(0.0, 0.04)), drc=float(rng.uniform(0.02, 0.06))))
        r = 0.0 if lossless else float(rng.uniform(0.001, 0.01))
        x = 0.0 if lossless else float(rng.uniform(0.001, 0.02))
        lines.append(line(par, i, r, x))
    return network_from_dict(feeder_dict(buses, lines))


@pytest.fixture(scope="session")
def ieee123():
    return load_network(shipped_network_path())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
