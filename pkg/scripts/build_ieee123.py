"""Offline conversion of the IEEE 123-node test feeder to a balanced network file.

Recipe
------
* Topology: line segments plus the normally-closed switches and the substation
  regulator (150-149). Normally-open switches, the 61-610 transformer and the
  regulator banks' tap behaviour are dropped, which leaves a 123-bus tree rooted
  at bus 150.
* Impedance: positive-sequence value of each line configuration
  (mean self impedance minus mean mutual impedance). Single-phase configurations
  have no mutual term, so their self impedance is used as is.
  Switches and the regulator are modelled with zero impedance.
* Loads: per-phase spot loads are averaged and multiplied by three, i.e. the
  three-phase total is kept; load model (PQ/I/Z) is ignored.
* Shunt capacitors (83, 88, 90, 92) are netted into the reactive load of their
  bus at rated kVAr. Without them the unregulated feeder sits below 0.95 pu at
  peak load.
* DG: 12 buses spread across the laterals, sized so that the nameplate total is
  70% of the total datasheet real load. DGs provide real power only.

Run ``python scripts/build_ieee123.py`` to regenerate
``src/dsomarket/data/ieee123.json``.
"""
import json
from pathlib import Path

S_BASE_KVA = 5000.0
V_BASE_KV = 4.16
FEET_PER_MILE = 5280.0

# (from, to, length_ft, config)
SEGMENTS = [
    (1, 2, 175, 10), (1, 3, 250, 11), (1, 7, 300, 1), (3, 4, 200, 11),
    (3, 5, 325, 11), (5, 6, 250, 11), (7, 8, 200, 1), (8, 12, 225, 10),
    (8, 9, 225, 9), (8, 13, 300, 1), (9, 14, 425, 9), (13, 34, 150, 11),
    (13, 18, 825, 2), (14, 11, 250, 9), (14, 10, 250, 9), (15, 16, 375, 11),
    (15, 17, 350, 11), (18, 19, 250, 9), (18, 21, 300, 2), (19, 20, 325, 9),
    (21, 22, 525, 10), (21, 23, 250, 2), (23, 24, 550, 11), (23, 25, 275, 2),
    (25, 26, 350, 7), (25, 28, 200, 2), (26, 27, 275, 7), (26, 31, 225, 11),
    (27, 33, 500, 9), (28, 29, 300, 2), (29, 30, 350, 2), (30, 250, 200, 2),
    (31, 32, 300, 11), (34, 15, 100, 11), (35, 36, 650, 8), (35, 40, 250, 1),
    (36, 37, 300, 9), (36, 38, 250, 10), (38, 39, 325, 10), (40, 41, 325, 11),
    (40, 42, 250, 1), (42, 43, 500, 10), (42, 44, 200, 1), (44, 45, 200, 9),
    (44, 47, 250, 1), (45, 46, 300, 9), (47, 48, 150, 4), (47, 49, 250, 4),
    (49, 50, 250, 4), (50, 51, 250, 4), (52, 53, 200, 1), (53, 54, 125, 1),
    (54, 55, 275, 1), (54, 57, 350, 3), (55, 56, 275, 1), (57, 58, 250, 10),
    (57, 60, 750, 3), (58, 59, 250, 10), (60, 61, 550, 5), (60, 62, 250, 12),
    (62, 63, 175, 12), (63, 64, 350, 12), (64, 65, 425, 12), (65, 66, 325, 12),
    (67, 68, 200, 9), (67, 72, 275, 3), (67, 97, 250, 3), (68, 69, 275, 9),
    (69, 70, 325, 9), (70, 71, 275, 9), (72, 73, 275, 11), (72, 76, 200, 3),
    (73, 74, 350, 11), (74, 75, 400, 11), (76, 77, 400, 6), (76, 86, 700, 3),
    (77, 78, 100, 6), (78, 79, 225, 6), (78, 80, 475, 6), (80, 81, 475, 6),
    (81, 82, 250, 6), (81, 84, 675, 11), (82, 83, 250, 6), (84, 85, 475, 11),
    (86, 87, 450, 6), (87, 88, 175, 9), (87, 89, 275, 6), (89, 90, 225, 10),
    (89, 91, 225, 6), (91, 92, 300, 11), (91, 93, 225, 6), (93, 94, 275, 9),
    (93, 95, 300, 6), (95, 96, 200, 10), (97, 98, 275, 3), (98, 99, 550, 3),
    (99, 100, 300, 3), (100, 450, 800, 3), (101, 102, 225, 11), (101, 105, 275, 3),
    (102, 103, 325, 11), (103, 104, 700, 11), (105, 106, 225, 10), (105, 108, 325, 3),
    (106, 107, 575, 10), (108, 109, 450, 9), (108, 300, 1000, 3), (109, 110, 300, 9),
    (110, 111, 575, 9), (110, 112, 125, 9), (112, 113, 525, 9), (113, 114, 325, 9),
    (135, 35, 375, 4), (149, 1, 400, 1), (152, 52, 400, 1), (160, 67, 350, 6),
    (197, 101, 250, 3),
]

# normally-closed switches and the substation regulator
ZERO_IMPEDANCE = [(150, 149), (13, 152), (18, 135), (60, 160), (97, 197)]

# ohm/mile, (self, mutual) for multi-phase configurations; self only for single-phase
CONFIGS = {
    1: ((0.4576, 1.0780), (0.1560, 0.5017)),
    2: ((0.4666, 1.0482), (0.1580, 0.4236)),
    3: ((0.4615, 1.0651), (0.1535, 0.3849)),
    4: ((0.4615, 1.0651), (0.1580, 0.4236)),
    5: ((0.4666, 1.0482), (0.1560, 0.5017)),
    6: ((0.4576, 1.0780), (0.1535, 0.3849)),
    7: ((0.4576, 1.0780), (0.1535, 0.3849)),
    8: ((0.4576, 1.0780), (0.1535, 0.3849)),
    9: ((1.3292, 1.3475), None),
    10: ((1.3292, 1.3475), None),
    11: ((1.3292, 1.3475), None),
    12: ((1.5209, 0.7521), (0.5198, 0.2775)),
}

# bus: (kW, kVAr) summed over phases, from the spot-load table
LOADS = {
    1: (40, 20), 2: (20, 10), 4: (40, 20), 5: (20, 10), 6: (40, 20), 7: (20, 10),
    9: (40, 20), 10: (20, 10), 11: (40, 20), 12: (20, 10), 16: (40, 20), 17: (20, 10),
    19: (40, 20), 20: (40, 20), 22: (40, 20), 24: (40, 20), 28: (40, 20), 29: (40, 20),
    30: (40, 20), 31: (20, 10), 32: (20, 10), 33: (40, 20), 34: (40, 20), 35: (40, 20),
    37: (40, 20), 38: (20, 10), 39: (20, 10), 41: (20, 10), 42: (20, 10), 43: (40, 20),
    45: (20, 10), 46: (20, 10), 47: (105, 75), 48: (210, 150), 49: (140, 95),
    50: (40, 20), 51: (20, 10), 52: (40, 20), 53: (40, 20), 55: (20, 10), 56: (20, 10),
    58: (20, 10), 59: (20, 10), 60: (20, 10), 62: (40, 20), 63: (40, 20), 64: (75, 35),
    65: (140, 100), 66: (75, 35), 68: (20, 10), 69: (40, 20), 70: (20, 10), 71: (40, 20),
    73: (40, 20), 74: (40, 20), 75: (40, 20), 76: (245, 180), 77: (40, 20), 79: (40, 20),
    80: (40, 20), 82: (40, 20), 83: (20, 10), 84: (20, 10), 85: (40, 20), 86: (20, 10),
    87: (40, 20), 88: (40, 20), 90: (40, 20), 92: (40, 20), 94: (40, 20), 95: (20, 10),
    96: (20, 10), 98: (40, 20), 99: (40, 20), 100: (40, 20), 102: (20, 10), 103: (40, 20),
    104: (40, 20), 106: (40, 20), 107: (40, 20), 109: (40, 20), 111: (20, 10),
    112: (20, 10), 113: (40, 20), 114: (20, 10),
}

# rated kVAr summed over phases
CAPACITORS = {83: 600, 88: 50, 90: 50, 92: 50}

# 12 of 123 buses, spread over the main laterals; weights split the DG fleet
DG_BUSES = {
    7: 1.0, 18: 1.0, 28: 0.8, 35: 1.0, 47: 1.2, 54: 1.0,
    65: 1.0, 76: 1.2, 87: 1.0, 100: 0.8, 105: 1.0, 113: 0.8,
}
DG_SHARE = 0.70
DG_COST = 0.02
DR_COST = 0.03
DR_FRACTION = 0.10
SUBSTATION = 150


def positive_sequence(config):
    (rs, xs), mutual = CONFIGS[config]
    if mutual is None:
        return rs, xs
    rm, xm = mutual
    return rs - rm, xs - xm


def build():
    z_base = V_BASE_KV ** 2 * 1000.0 / S_BASE_KVA
    lines = []
    for a, b, feet, cfg in SEGMENTS:
        r, x = positive_sequence(cfg)
        miles = feet / FEET_PER_MILE
        lines.append((a, b, r * miles / z_base, x * miles / z_base))
    for a, b in ZERO_IMPEDANCE:
        lines.append((a, b, 0.0, 0.0))

    bus_ids = sorted({n for ln in lines for n in ln[:2]})
    total_p = sum(p for p, _ in LOADS.values())
    weight = sum(DG_BUSES.values())
    buses = []
    for bid in bus_ids:
        p, q = LOADS.get(bid, (0, 0))
        q = q - CAPACITORS.get(bid, 0)
        dg = DG_SHARE * total_p * DG_BUSES[bid] / weight if bid in DG_BUSES else 0.0
        buses.append({
            "id": bid,
            "p_kw": float(p),
            "q_kvar": float(q),
            "dg_p_max_kw": round(dg, 3),
            "dg_q_max_kvar": 0.0,
            "dr_fraction": DR_FRACTION,
            "dg_cost_per_kwh": DG_COST,
            "dr_cost_per_kwh": DR_COST,
        })
    line_records = [
        {"from": a, "to": b, "r_pu": round(r, 8), "x_pu": round(x, 8), "flow_limit_pu": 4.0}
        for a, b, r, x in lines
    ]
    return {
        "s_base_kva": S_BASE_KVA,
        "v_base_kv": V_BASE_KV,
        "v_min_pu": 0.95 ** 2,
        "v_max_pu": 1.05 ** 2,
        "substation": SUBSTATION,
        "buses": buses,
        "lines": line_records,
    }


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "dsomarket" / "data" / "ieee123.json"
    data = build()
    out.write_text(json.dumps(data, indent=1) + "\n")
    print(f"wrote {out}: {len(data['buses'])} buses, {len(data['lines'])} lines")
