"""A coarse pass over the Dubins pursuit-evasion benchmark.

Relative coordinates (x1, x2, heading), both vehicles at speed 5, evader turn
rate in [-1, 1], collision when the planar distance drops below 1. At a cell
floor of 1.111 the verifier runs in seconds. The heading slice at pi is written
as CSV for plotting elsewhere.

    python3 demos/dubins_coarse.py [out.csv]
"""

import dataclasses
import sys
import time

import numpy as np

from rcbf import (
    SAFE, UNSAFE, Cylinder, RcbfParams, VerifierConfig, brute_force_brt, containment_fraction, dubins3d,
    dubins_domain, verify_region,
)
from rcbf.cli import slice_labels

# faces of the square are not obstacles: treat them as neutral for the inside depth
domain = dataclasses.replace(dubins_domain(), boundary_exterior=False)
field = dubins3d(v=5.0, domain=domain)
collision = Cylinder((0, 1), (0.0, 0.0), 1.0)
print(f"Lipschitz bound L = {field.lipschitz:.4f}, speed bound M = {field.speed:.1f}")

params = RcbfParams(tau=1.0, alpha=1.0, beta=1.0, L=field.lipschitz, M=field.speed, dt=0.01)
cfg = VerifierConfig(r_min=1.111, n_s=60, n_seg=5, unsafe_set=collision, params=params)
t0 = time.perf_counter()
res = verify_region(domain, field, cfg)
print(f"verified in {time.perf_counter() - t0:.1f} s")
for rep in res.reports:
    print(f"  stage {rep.stage}: safe {rep.safe_volume:8.2f}  unsafe {rep.unsafe_volume:8.2f}")

# the brute-force tube on a 41^3 grid should sit entirely inside the unsafe cells
oracle = brute_force_brt(field, collision, domain, 1.0, 41, dt=0.05)
print(f"grid tube volume {oracle.brt_volume():.2f}, containment {containment_fraction(res.partition, oracle)}")

x, y, labels = slice_labels(res.partition, axis=2, value=np.pi, resolution=60)
print(f"heading = pi slice: {np.mean(labels == SAFE):.0%} safe, {np.mean(labels == UNSAFE):.0%} unsafe")
if len(sys.argv) > 1:
    np.savetxt(sys.argv[1], np.column_stack([x, y, labels == UNSAFE]), delimiter=",", header="x,y,unsafe",
               comments="")
    print(f"wrote {sys.argv[1]}")
