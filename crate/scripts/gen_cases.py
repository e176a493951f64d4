"""Regenerate the bundled case files (crates/core/data/cases/*.json).

Uses PyPower's copies of the standard MATPOWER cases and its AC power flow to
obtain the equilibrium voltage magnitudes and angles.  Every bus becomes a
machine node with H = D = 1; P is the net injection implied by the solved
network, so the swing equations are balanced at (v_eq, delta_eq).

    pip install pypower && python3 scripts/gen_cases.py
"""
import json
import os
import sys

import numpy as np
from pypower.api import case9, case30, case57, ppoption, runpf
from pypower.ext2int import ext2int
from pypower.makeYbus import makeYbus

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data", "cases")


def export(name, ppc):
    res, ok = runpf(ppc, ppoption(VERBOSE=0, OUT_ALL=0))
    if not ok:
        sys.exit(f"{name}: power flow failed")
    base = res["baseMVA"]
    bus = res["bus"]
    vm = bus[:, 7]
    va = np.deg2rad(bus[:, 8])
    n = bus.shape[0]
    assert list(bus[:, 0].astype(int)) == list(range(1, n + 1))

    lines = []
    for br in res["branch"]:
        if br[10] == 0:
            continue
        assert br[9] == 0, "phase shifters are not supported"
        r, x, b, tap = br[2], br[3], br[4], br[8]
        y = 1.0 / complex(r, x)
        line = {
            "from": int(br[0]),
            "to": int(br[1]),
            "X": x,
            "B": b,
            "g_series": y.real,
            "b_series": y.imag,
        }
        if tap not in (0.0, 1.0):
            line["tap"] = tap
        lines.append(line)

    shunts = [
        {"bus": i + 1, "g": bus[i, 4] / base, "b": bus[i, 5] / base}
        for i in range(n)
        if bus[i, 4] != 0.0 or bus[i, 5] != 0.0
    ]

    # Net injection consistent with the network model.
    ppi = ext2int(res)
    ybus, _, _ = makeYbus(ppi["baseMVA"], ppi["bus"], ppi["branch"])
    v = vm * np.exp(1j * va)
    p = (v * np.conj(ybus @ v)).real

    machines = [
        {"H": 1.0, "D": 1.0, "P": float(p[i]), "v_eq": float(vm[i]), "delta_eq": float(va[i])}
        for i in range(n)
    ]
    doc = {"name": name, "n": n, "omega_R": 1.0, "machines": machines, "lines": lines}
    if shunts:
        doc["shunts"] = shunts
    with open(os.path.join(OUT, f"{name}.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"{name}: n={n} lines={len(lines)} shunts={len(shunts)}")


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    export("case9", case9())
    export("case30", case30())
    export("case57", case57())
