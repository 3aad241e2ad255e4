"""The cell conditions on hand-made trajectories.

Each check takes a signed-distance (or barrier) trajectory sampled on the time
grid of the center of a cell of radius r, and decides whether the conclusion
carries over to every point of the cell.

    python3 demos/conditions_tour.py
"""

import math

import numpy as np

from rcbf.conditions import (
    RcbfParams, ValidityParams, check_outside_brt, check_robust_recurrent, deviation_bound, recurrent_score,
    validity_min_tau,
)

p = RcbfParams(tau=1.0, alpha=0.05, beta=0.05, L=1.0, M=1.0, dt=0.01)
t = p.dt * np.arange(p.steps + 1)

# trajectories started within r of each other drift apart at most like r e^{L t}
print("deviation bound for r = 0.1:", [round(float(deviation_bound(0.1, p.L, s)), 4) for s in (0.0, 0.5, 1.0)])

# a center that stays 4 away from the unsafe set: cells up to about r = 1.4 are cleared
sd = 4.0 - 0.5 * t
for r in (0.5, 1.0, 1.5):
    print(f"outside check, r = {r}: {check_outside_brt(sd, r, p)}")

# a barrier that sags and climbs back to its starting level: the return must beat
# h(x) + r after the deviation allowance, so only small cells pass
h = 0.8 - 3.0 * t * (1 - t)
for r in (0.01, 0.1, 0.3):
    print(f"recurrence, r = {r}: score {recurrent_score(h, r, p):+.3f}, pass {check_robust_recurrent(h, h[0], r, p)}")

# how long a horizon makes a sector-bounded signed distance a valid barrier
vp = ValidityParams(a1=1.0, a2=math.e, alpha=1.0, beta=2.0, alpha_hat=2.0, beta_hat=1.0,
                    delta_bar=math.e, delta_underbar=1.0)
print("minimal horizon:", validity_min_tau(vp))
