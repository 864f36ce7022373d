"""Regenerate the bundled benchmark cases from PYPOWER's tables.

Dev-only helper: PYPOWER is not a runtime dependency.  Machine data:
  case9  - WSCC 3-machine system, Sauer & Pai "Power System Dynamics and Stability".
  case39 - New England 10-machine system, Pai "Energy Function Analysis for Power
           System Stability" (1989); generator at bus 30 uses xq' = xq because its
           q-axis transient data are absent from the source.
"""
import json
import math
import sys

import numpy as np
from pypower.case9 import case9
from pypower.case39 import case39

sys.path.insert(0, "src")
from hiergrid.netcase import parse_case, serialize_case  # noqa: E402

KA, KS = float(sys.argv[1]) if len(sys.argv) > 1 else 0.0, float(sys.argv[2]) if len(sys.argv) > 2 else 0.0

DYN9 = {  # bus: H, xd, xq, xd', xq', Td0', Tq0'
    1: (23.64, 0.146, 0.0969, 0.0608, 0.0969, 8.96, 0.31),
    2: (6.4, 0.8958, 0.8645, 0.1198, 0.1969, 6.0, 0.535),
    3: (3.01, 1.3125, 1.2578, 0.1813, 0.25, 5.89, 0.6),
}
DYN39 = {
    30: (42.0, 0.1, 0.069, 0.031, 0.069, 10.2, 0.5),
    31: (30.3, 0.295, 0.282, 0.0697, 0.170, 6.56, 1.5),
    32: (35.8, 0.2495, 0.237, 0.0531, 0.0876, 5.7, 1.5),
    33: (28.6, 0.262, 0.258, 0.0436, 0.166, 5.69, 1.5),
    34: (26.0, 0.67, 0.62, 0.132, 0.166, 5.4, 0.44),
    35: (34.8, 0.254, 0.241, 0.05, 0.0814, 7.3, 0.4),
    36: (26.4, 0.295, 0.292, 0.049, 0.186, 5.66, 1.5),
    37: (24.3, 0.290, 0.280, 0.057, 0.0911, 6.7, 0.41),
    38: (34.5, 0.2106, 0.205, 0.057, 0.0587, 4.79, 1.96),
    39: (500.0, 0.02, 0.019, 0.006, 0.008, 7.0, 0.7),
}


def convert(ppc, name, dyn, costs=None):
    base = ppc["baseMVA"]
    types = {1: "PQ", 2: "PV", 3: "slack"}
    buses, loads = [], []
    for r in ppc["bus"]:
        buses.append(dict(id=int(r[0]), type=types[int(r[1])], vmin=r[12], vmax=r[11], gs=r[4] / base,
                          bs=r[5] / base, vm=r[7], va_deg=r[8]))
        if r[2] or r[3]:
            loads.append(dict(bus=int(r[0]), p=r[2] / base, q=r[3] / base))
    gens = []
    for k, r in enumerate(ppc["gen"]):
        H, xd, xq, xdp, xqp, td, tq = dyn[int(r[0])]
        g = dict(bus=int(r[0]), pg=r[1] / base, qg=r[2] / base, qmax=r[3] / base, qmin=r[4] / base, vg=r[5],
                 pmax=r[8] / base, pmin=r[9] / base,
                 dyn=dict(H=H, D=0.0, Td0p=td, Tq0p=tq, xd=xd, xq=xq, xdp=xdp, xqp=xqp, KA=KA, KS=KS))
        if costs is not None:
            c = costs[k]
            g["cost"] = [[r[9] / base, c * r[9]], [r[8] / base, c * r[8]]]
        gens.append(g)
    branches = [dict(**{"from": int(r[0]), "to": int(r[1])}, r=r[2], x=r[3], b=r[4], tap=r[8] or 1.0,
                     shift_deg=r[9], rate=r[5] / base) for r in ppc["branch"]]
    d = dict(schema="hiergrid.case/1", name=name, base_mva=base, frequency_hz=60.0, buses=buses,
             branches=branches, generators=gens, loads=loads)
    case = parse_case(json.dumps(d, default=lambda o: o.item()))
    return case


c9 = convert(case9(), "case9", DYN9)
# marginal costs in $/MWh drawn once from U(0, 20) with a fixed seed
costs39 = np.round(np.random.default_rng(39).uniform(0.0, 20.0, 10), 2)
c39 = convert(case39(), "case39", DYN39, costs39)
for c, n in ((c9, "case9"), (c39, "case39")):
    with open(f"src/hiergrid/data/{n}.json", "w") as fh:
        fh.write(serialize_case(c) + "\n")
print("costs39", costs39)
