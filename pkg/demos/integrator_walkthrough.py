"""Walk through the three verification stages on the one-dimensional integrator.

The system is x' = u with |u| <= 1 and the unsafe strip [-0.2, 0.2]. Any state
outside the strip can back away from it, so the true tube over any horizon is
the strip itself. That makes it a good first look at what the cell labels mean
and how much the cell floor costs.

    python3 demos/integrator_walkthrough.py
"""

import numpy as np

from rcbf import (
    SAFE, UNSAFE, Box, Domain, RcbfParams, VerifierConfig, brute_force_brt, containment_fraction, single_integrator,
    verify_region, volume_gap,
)

domain = Domain([-1.0], [1.0])
field = single_integrator(1, domain)
strip = Box((-0.2,), (0.2,))

for r_min in (0.1, 0.037, 0.01):
    params = RcbfParams(tau=1.0, alpha=1.0, beta=1.0, L=field.lipschitz, M=field.speed, dt=0.01)
    cfg = VerifierConfig(r_min=r_min, n_s=50, n_seg=5, unsafe_set=strip, params=params)
    res = verify_region(domain, field, cfg)

    print(f"\nr_min = {r_min}")
    for rep in res.reports:
        print(f"  stage {rep.stage}: {rep.examined:4d} cells examined, {rep.split:3d} split, "
              f"unsafe volume {rep.unsafe_volume:.4f}")

    # the unsafe cells form a single interval around the strip
    unsafe = res.partition.by_label(UNSAFE)
    lo = min(c.center[0] - c.radius for c in unsafe)
    hi = max(c.center[0] + c.radius for c in unsafe)
    print(f"  unsafe interval [{lo:.4f}, {hi:.4f}], {len(res.partition.by_label(SAFE))} safe cells")

    # every safe cell carries the witness signal that kept it out of the strip
    cid, certs = next(iter(res.certificates.items()))
    witness = next(c for c in certs if c.signal_segments is not None)
    print(f"  cell {cid} (stage {witness.stage}) witness segments {np.ravel(witness.signal_segments)}")

oracle = brute_force_brt(field, strip, domain, 1.0, 401)
print(f"\ngrid tube: {oracle.brt_volume():.3f} volume on {oracle.counts[0]} nodes")
print(f"containment {containment_fraction(res.partition, oracle)}, volume gap {volume_gap(res.partition, oracle):.3f}")
