"""Reachable joint sets and the spherical forward occupancy of the arm.

The trajectory family accelerates toward a parameter ``k`` until
``t_plan`` and then brakes to rest at ``t_fin``.  Over every time cell and
every ``k`` in ``[-eta, eta]^7`` the joint angles are enclosed by polynomial
zonotopes; the arm's swept volume is then covered by a union of balls
whose centers are polynomial in ``k``.

Run:  python demos/02_reachable_sets.py
"""

import numpy as np

from splankit.arm import build_sfo, default_arm, fk_batch
from splankit.trajectory import InitialCondition, TrajParamSpace, build_trajectory_pz, traj_eval

arm = default_arm()
space = TrajParamSpace.default(arm.n_q)
ic = InitialCondition(np.full(7, 0.3), np.full(7, 0.2))
traj = build_trajectory_pz(space, ic, n_t=10)

print("joint 0 enclosure per time cell")
for i, t in enumerate(traj.times):
    tb, qb = t.bound(), traj.q[i][0].bound()
    print(f"  t in [{float(tb.lower):.2f}, {float(tb.upper):.2f}]  q0 in [{float(qb.lower):+.3f}, {float(qb.upper):+.3f}]")

sfo = build_sfo(arm, space, ic, n_t=10, n_s=5)
print(f"\n{sfo.n_t} cells x {sfo.balls_per_interval} balls, radii {sfo.radii.min():.3f} to {sfo.radii.max():.3f} m")

# sampled link points for one k always fall inside the balls of their cell
rng = np.random.default_rng(0)
k = rng.uniform(-space.eta, space.eta, 7)
C = sfo.centers(k, jac=False).reshape(sfo.n_t, sfo.balls_per_interval, 3)
worst = -np.inf
for i, t in enumerate(traj.times):
    tb = t.bound()
    q, _ = traj_eval(space, ic, k, np.linspace(float(tb.lower), float(tb.upper), 7))
    _, P = fk_batch(arm, q)
    pts = (P[:, :-1, None] + np.linspace(0, 1, 9)[None, None, :, None] * (P[:, 1:] - P[:, :-1])[:, :, None]).reshape(-1, 3)
    gap = np.linalg.norm(pts[:, None] - C[i][None], axis=2) - sfo.radii[i][None]
    worst = max(worst, gap.min(axis=1).max())
print(f"largest signed distance of a link axis point to the ball union: {worst:.4f} m (negative means covered)")
