"""Seeing a bright stroke is not the same as making one bright.

Under the true model, observing high intensity shifts belief about thickness
(thick strokes are brighter). Setting intensity by intervention cuts the arrow
from thickness, so thickness keeps its prior.
"""

import numpy as np

from dscm.evalsuite import tv_distance
from dscm.synthdata import true_scm

scm = true_scm(with_image=False)
grid = (0.01, 8.0)
prior = scm.posterior_grid_1d("t", grid=grid, n=2048)

print("    c     TV(p(t | i=c), p(t))   TV(p(t | do(i=c)), p(t))")
for c in (90.0, 160.0, 230.0):
    seen = scm.posterior_grid_1d("t", {"i": c}, grid=grid, n=2048)
    done = scm.do({"i": c}).posterior_grid_1d("t", {"i": c}, grid=grid, n=2048)
    print(f"{c:6.0f}   {tv_distance(prior.grid, prior.density, seen.density):20.3f}   {tv_distance(prior.grid, prior.density, done.density):22.3f}")

mean_t = lambda g: float(np.sum(g.grid * g.density) / np.sum(g.density))  # noqa: E731
print(f"\nE[t] = {mean_t(prior):.2f};  E[t | i=230] = {mean_t(scm.posterior_grid_1d('t', {'i': 230.0}, grid=grid, n=2048)):.2f}")
