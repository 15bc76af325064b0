"""Push the right arm into the walls, the torso and the left arm by hand.

Prints, per second, the smallest distance margin of each barrier family and
the EE speed, so the moments where a push is blocked stand out.
"""

import numpy as np

from hqp_harvest.sim import load_scenario, run_scenario

FAMILIES = {"walls": "vw:", "arm-arm": "sc:left_", "torso": "torso", "head": "head"}

res = run_scenario(load_scenario("handguide_walls"))
t = np.array([r.t for r in res.records])
h = res.array("h")
v = np.linalg.norm(res.array("ee_twist")[:, 6:9], axis=1)
cols = {k: [i for i, l in enumerate(res.h_labels) if p in l and "right" in l] for k, p in FAMILIES.items()}
print("   t  " + "".join(f"{k:>10s}" for k in FAMILIES) + "   |v_ee|")
for s in range(0, int(t[-1]) + 1, 2):
    k = np.flatnonzero((t >= s) & (t < s + 2))
    if len(k):
        row = "".join(f"{h[np.ix_(k, c)].min():10.3f}" if c else f"{'-':>10s}" for c in cols.values())
        print(f"{s:4d}  {row}   {v[k].max():.3f}")
