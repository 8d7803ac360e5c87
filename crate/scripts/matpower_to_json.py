#!/usr/bin/env python3
"""Convert a PYPOWER/MATPOWER case into the JSON case schema used by `hse`.

Usage: python3 scripts/matpower_to_json.py case14 cases/ieee14.json

Branch series admittance g + jb = 1/(r + jx). The off-nominal tap ratio and
phase shift are copied from the from-bus side (`tap` = 0 becomes 1). Line
charging and bus shunts are folded into a per-bus `shunt_b`: the total shunt
susceptance at a bus (half the charging of every adjacent branch plus
BS/baseMVA) is divided evenly over the bus's branch ends, since the current
model applies the bus shunt on every branch leaving the bus. Out-of-service
branches are dropped. `pmu_buses` is left empty; fill it with `hse place`.
"""
import importlib
import json
import math
import sys


def convert(name):
    mod = importlib.import_module(f"pypower.{name}")
    ppc = getattr(mod, name)()
    base = float(ppc["baseMVA"])
    bus = ppc["bus"]
    branch = ppc["branch"]

    ends = {}
    shunt_total = {}
    for row in bus:
        bid = int(row[0])
        ends[bid] = 0
        shunt_total[bid] = float(row[5]) / base

    branches = []
    for row in branch:
        if len(row) > 10 and int(row[10]) == 0:
            continue
        f, t = int(row[0]), int(row[1])
        r, x, bc = float(row[2]), float(row[3]), float(row[4])
        tap = float(row[8]) or 1.0
        shift = math.radians(float(row[9]))
        den = r * r + x * x
        branches.append(
            {"from": f, "to": t, "g": r / den, "b": -x / den, "tap": tap, "shift": shift}
        )
        ends[f] += 1
        ends[t] += 1
        shunt_total[f] += bc / 2.0
        shunt_total[t] += bc / 2.0

    buses = []
    for row in bus:
        bid = int(row[0])
        n = ends[bid]
        buses.append(
            {
                "id": bid,
                "vm": float(row[7]),
                "va": math.radians(float(row[8])),
                "shunt_b": shunt_total[bid] / n if n else 0.0,
            }
        )
    return {"buses": buses, "branches": branches, "pmu_buses": []}


def main():
    name, out = sys.argv[1], sys.argv[2]
    doc = convert(name)
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"{out}: {len(doc['buses'])} buses, {len(doc['branches'])} branches")


if __name__ == "__main__":
    main()
