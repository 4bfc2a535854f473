"""Comparing three collision classifiers on categorized arm configurations.

Configurations are labelled Unsafe, Nearly Safe or Safe from their exact
distance to the boxes.  The closed-form risk test, an ellipsoid overlap
test and a voxel Poisson-tail test each sweep their threshold and the
pooled precision/recall points are summarized by their area.

Run:  python demos/04_classifier_pr.py
"""

from splankit.arm import default_arm
from splankit.baselines import pr_auc, run_classification

arm = default_arm()
recs, used, skipped = run_classification(arm, range(0, 12), n_scenes=2, per_category=5)
print(f"scenes used {used}, skipped {skipped}")
for method in ("splanning", "splatnav", "catnips"):
    mine = [r for r in recs if r.method == method]
    print(f"\n{method}: area {pr_auc(mine):.3f}")
    for r in sorted(mine, key=lambda r: (r.param, r.threshold))[:6]:
        print(f"    {r.param:<12} thr={r.threshold:<8g} precision={r.precision:.2f} recall={r.recall:.2f}")
