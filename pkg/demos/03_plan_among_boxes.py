"""Receding-horizon planning through a seeded three-box scene.

Boxes become a lattice of isotropic Gaussians with target density
``rho_t``.  Each planning step solves a small nonlinear program whose
constraints keep every ball of the forward occupancy below the risk
threshold ``alpha * beta``; the executed trajectory is then checked
against the exact boxes at 1 kHz.

Run:  python demos/03_plan_among_boxes.py
"""

from splankit.arm import default_arm
from splankit.planner import run_trial
from splankit.risk import RiskParams

arm = default_arm()
for seed in (0, 1):
    res = run_trial(arm, seed, RiskParams(0.025, 0.025), max_iters=60)
    run = res.run
    print(f"seed {seed}: {res.status} after {res.steps} steps, min clearance to the boxes {res.min_clearance:.3f} m")
    for s in run.steps[:4]:
        print(f"    step status={s.status:<10} wall={s.wall_time * 1e3:6.1f} ms")
    print(f"    final joint speed max |dq| = {abs(res.final_dq).max():.2e}")
