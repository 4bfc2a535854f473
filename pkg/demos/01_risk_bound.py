"""Closed-form collision risk of a ball in a splat field.

A random cloud of normalized Gaussians is probed with balls of growing
radius.  For each ball we print the closed-form cube integral ``H``, a
Monte Carlo estimate of the true ball integral, the risk value
``1 - exp(-H / 4 pi)`` and the collision bound at ``alpha = 0.05``.

Run:  python demos/01_risk_bound.py
"""

import numpy as np
from scipy.spatial.transform import Rotation

from splankit.risk import Ball, collision_probability_bound, erf_volume_bound, mc_ball_integral, sphere_risk_gradient
from splankit.scene import SplatScene, density

rng = np.random.default_rng(0)
n = 25
scene = SplatScene(
    weights=rng.uniform(0.01, 0.2, n),
    means=rng.normal(scale=0.3, size=(n, 3)),
    rotations=Rotation.random(n, random_state=1).as_matrix(),
    eigvals=rng.uniform(0.03, 0.15, (n, 3)) ** 2,
)
print(f"{len(scene)} Gaussians, density at the origin {density(scene, np.zeros(3)):.3f} 1/m")

print(f"{'radius':>7} {'H':>9} {'MC':>9} {'+-3se':>8} {'risk':>9} {'bound':>8}")
for r in (0.05, 0.1, 0.2, 0.4):
    ball = Ball([0.1, 0.0, 0.0], r)
    H = erf_volume_bound(scene, ball)
    est, se = mc_ball_integral(scene, ball, 200_000, seed=1)
    risk = -np.expm1(-H / (4 * np.pi))
    print(f"{r:7.2f} {H:9.5f} {est:9.5f} {3 * se:8.5f} {risk:9.5f} {collision_probability_bound(scene, ball, 0.05):8.4f}")

# the gradient drives the planner's constraint Jacobian
g_c, g_r = sphere_risk_gradient(scene, Ball([0.1, 0.0, 0.0], 0.2))
print("d risk / d center =", np.array2string(g_c, precision=5), " d risk / d radius =", f"{g_r:.5f}")
