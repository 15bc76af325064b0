"""Run a shipped scenario and print what happened.

    python3 demos/scenario_summary.py harvest_semi_auto
"""

import sys

import numpy as np

from hqp_harvest.sim import load_scenario, run_scenario


def main(name="harvest_auto"):
    res = run_scenario(load_scenario(name))
    h = res.array("h")
    qd = res.array("qdot")
    print(f"{name}: {len(res.records)} ticks")
    print(f"  closest barrier: {h.min():.2e} ({res.h_labels[int(np.argmin(h.min(axis=0)))]})")
    print(f"  max |qdot|: {np.abs(qd).max():.3f}")
    for t, phase, mode, ev in res.events:
        print(f"  {t:7.2f}  {mode:10s} {phase:14s} {ev}")


if __name__ == "__main__":
    main(*sys.argv[1:])
