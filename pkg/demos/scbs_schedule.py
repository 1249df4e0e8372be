"""How the class-balanced sampler moves over an epoch schedule.

Starts from the natural class ratio of a 10:1 site, mixes in the balanced and
difficulty-driven distributions, and prints the minority share per epoch.
"""

import numpy as np

from flare.rng import stream
from flare.sampler import ScbsState, base_prob, cosine_weight, scbs_update

counts = [900, 90]
T = 12
state = ScbsState.initial(counts, T, delta=0.3)
r0 = base_prob(counts, 0.0)
rdiff = np.array([0.2, 0.8])  # pretend the minority class is four times harder
rng = stream(0, "demo")

print("epoch  eps    w_t    minority share")
print(f"{0:5d}  {'':5s}  {'':5s}  {state.current[1]:.3f}")
for t in range(1, T + 1):
    eps = float(rng.uniform())
    state = scbs_update(state, eps, r0, rdiff)
    print(f"{t:5d}  {eps:.2f}   {cosine_weight(t, T):.2f}   {state.current[1]:.3f}")
