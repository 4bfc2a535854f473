import csv

import numpy as np
import pytest
from scipy.stats import poisson

from conftest import random_scene
from splankit.baselines import (
    PRPoint,
    aux_cross_section,
    ball_kernel,
    classify_configs,
    confusion,
    pool_records,
    pr_auc,
    pr_point,
    pr_sweep,
    purr_build,
    purr_check,
    purr_unsafe,
    s_grid,
    splanning_scores,
    splatnav_K,
    splatnav_check,
    splatnav_check_many,
    write_pr_csv,
)
from splankit.scene import GaussianComponent, SplatScene
from splankit.scenegen import UNSAFE, boxes_to_splat, gen_scene, sample_categorized, static_sfo_spheres

BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def sphere_component(center, radius):
    return GaussianComponent(1.0, np.asarray(center, float), np.eye(3), np.full(3, radius**2))


# --- Splat-Nav style check ----------------------------------------------------------------


def test_s_grid():
    g = s_grid(4)
    assert np.allclose(g, [0.125, 0.375, 0.625, 0.875])
    r = s_grid(100, seed=3)
    assert np.all((r > 0) & (r < 1)) and np.array_equal(r, s_grid(100, seed=3))
    with pytest.raises(ValueError):
        s_grid(0)


def test_concentric_spheres_collide():
    assert splatnav_check([0, 0, 0], 1.0, sphere_component([0, 0, 0], 1.0), 1.0)
    assert np.all(splatnav_K(s_grid(10), np.zeros(3), np.ones(3), 1.0) == 0)


def test_far_unit_spheres_free():
    w = np.array([10.0, 0, 0])
    K_half = splatnav_K([0.5], w, np.ones(3), 1.0)[0]
    assert K_half == pytest.approx(100 * 0.25 / (1 + 0.5 * 0), rel=1e-15)
    assert K_half == pytest.approx(25.0)
    assert not splatnav_check([10, 0, 0], 1.0, sphere_component([0, 0, 0], 1.0), 1.0)


def test_tangent_spheres_flagged_as_collision():
    for n in (10, 999, 1000):
        assert splatnav_check([2, 0, 0], 1.0, sphere_component([0, 0, 0], 1.0), 1.0, n_samples=n)
    assert not splatnav_check([2.01, 0, 0], 1.0, sphere_component([0, 0, 0], 1.0), 1.0)


def test_sphere_sphere_symmetry(rng):
    for _ in range(200):
        c1, c2 = rng.uniform(-1, 1, (2, 3))
        r1, r2 = rng.uniform(0.05, 0.8, 2)
        a = splatnav_check(c1, r1, sphere_component(c2, r2), 1.0)
        b = splatnav_check(c2, r2, sphere_component(c1, r1), 1.0)
        assert a == b
        # the midpoint grid resolves overlap except within a thin shell around tangency
        gap = np.linalg.norm(c1 - c2) - r1 - r2
        if abs(gap) > 1e-3:
            assert a == (gap < 0)


def test_check_many_matches_single(rng):
    sc = random_scene(rng, 15, spread=0.6, std=(0.02, 0.1))
    C = rng.uniform(-0.8, 0.8, (60, 3))
    r = rng.uniform(0.02, 0.15, 60)
    for n_sigma in (1.0, 3.0):
        many = splatnav_check_many(sc, C, r, n_sigma)
        single = [any(splatnav_check(c, rr, sc[n], n_sigma) for n in range(len(sc))) for c, rr in zip(C, r)]
        assert many.tolist() == single
    assert not splatnav_check_many(SplatScene.empty(), C, r, 2.0).any()


# --- PURR grid --------------------------------------------------------------------------------


def test_zero_density_gives_empty_purr():
    g = purr_build(SplatScene.empty(), BOUNDS, dims=16)
    assert not g.unsafe.any() and np.all(g.intensity == 0)
    with pytest.warns(RuntimeWarning):
        assert not purr_check(g, [5, 5, 5])
    assert not purr_check(g, [0, 0, 0])
    with pytest.raises(ValueError):
        purr_build(SplatScene.empty(), ((0, 0, 0), (0, 1, 1)))


def test_single_hot_cell_dilates_by_kernel():
    dims, cell = 20, 0.1
    center_idx = np.array([10, 9, 11])
    center = np.array(BOUNDS[0]) + (center_idx + 0.5) * cell
    std = cell / 10
    sc = SplatScene([1e6], [center], [np.eye(3)], [[std**2] * 3])
    g = purr_build(sc, BOUNDS, dims=dims, robot_radius=0.25, sigma_thresh=0.01)
    K = ball_kernel(0.25, cell)
    n = K.shape[0] // 2
    expected = np.zeros((dims,) * 3, bool)
    sl = tuple(slice(c - n, c + n + 1) for c in center_idx)
    expected[sl] = K > 0
    assert np.array_equal(g.unsafe, expected)
    assert purr_check(g, center)


def test_uniform_density_matches_poisson_tail():
    sigma0 = 5.0
    lam_g = 1e8
    w = sigma0 * (2 * np.pi * lam_g) ** 1.5
    sc = SplatScene([w], [[0, 0, 0]], [np.eye(3)], [[lam_g] * 3])
    dims = 16
    for thresh in (1e-3, 0.5, 0.999):
        g = purr_build(sc, BOUNDS, dims=dims, robot_radius=0.2, n_aux_max=5, v_aux=1e-3, sigma_thresh=thresh)
        # interior cells see the full kernel
        lam = sigma0 * g.cell**3 * g.kernel.sum() / aux_cross_section(1e-3)
        tail = 1.0 - sum(np.exp(-lam) * lam**i / np.prod(np.arange(1, i + 1)) for i in range(6))
        n = g.kernel.shape[0] // 2
        inner = g.unsafe[n:-n, n:-n, n:-n]
        assert np.all(inner) if tail > thresh else not np.any(inner)


def test_purr_lookup_matches_index_arithmetic(rng):
    sc = random_scene(rng, 10, spread=0.5, std=(0.03, 0.1))
    g = purr_build(sc, BOUNDS, dims=24, robot_radius=0.1, sigma_thresh=1e-3)
    assert g.unsafe.any() and np.all(g.intensity >= 0)
    P = rng.uniform(-0.999, 0.999, (1000, 3))
    for p in P:
        i = np.floor((p + 1.0) / g.cell).astype(int)
        assert purr_check(g, p) == bool(g.unsafe[tuple(i)])


def test_purr_monotone_in_threshold(rng):
    sc = random_scene(rng, 10, spread=0.5, std=(0.03, 0.1))
    masks = [purr_build(sc, BOUNDS, dims=16, sigma_thresh=t).unsafe for t in (0.5, 0.1, 1e-3, 1e-6)]
    for a, b in zip(masks, masks[1:]):
        assert np.all(b[a])
    ir = np.abs(rng.normal(size=100)) * 1e-5
    assert np.array_equal(purr_unsafe(ir, 1, 1e-6, 0.2), poisson.sf(1, ir / aux_cross_section(1e-6)) > 0.2)


# --- PR harness ---------------------------------------------------------------------------------------


def test_confusion_and_pr_definitions():
    truth = np.array([1, 1, 0, 0, 1], bool)
    assert confusion(truth, truth) == (3, 0, 0, 2)
    p = pr_point("m", "x", 0.1, truth, truth)
    assert (p.precision, p.recall) == (1.0, 1.0)
    allpos = pr_point("m", "x", 0.1, np.ones(5, bool), truth)
    assert allpos.precision == pytest.approx(3 / 5) and allpos.recall == 1.0
    safe = pr_point("m", "x", 0.1, np.zeros(3, bool), np.zeros(3, bool))
    assert safe.no_positives and safe.recall == 1.0


def test_pr_auc_step_rule():
    pts = [PRPoint("m", "", 0, tp, fp, fn, 0) for tp, fp, fn in ((1, 0, 3), (2, 2, 2), (4, 4, 0))]
    # recall 0.25 at precision 1, 0.5 at 0.5, 1.0 at 0.5
    assert pr_auc(pts) == pytest.approx(0.25 * 1 + 0.25 * 0.5 + 0.5 * 0.5)
    assert pr_auc([PRPoint("m", "", 0, 5, 0, 0, 5)]) == 1.0


def test_pool_records_sums_counts():
    a = [PRPoint("m", "p", 0.1, 1, 2, 3, 4)]
    b = [PRPoint("m", "p", 0.1, 10, 20, 30, 40), PRPoint("m", "p", 0.2, 1, 1, 1, 1)]
    pooled = {r.threshold: r for r in pool_records([a, b])}
    assert (pooled[0.1].tp, pooled[0.1].fp, pooled[0.1].fn, pooled[0.1].tn) == (11, 22, 33, 44)
    assert pooled[0.2].tp == 1


@pytest.fixture(scope="module")
def categorized(arm):
    gt = gen_scene(3, 0)
    Q, labels = sample_categorized(gt, arm, 10, seed=0)
    scene = boxes_to_splat(gt)
    sets = [static_sfo_spheres(arm, q) for q in Q]
    truth = np.array([lab == UNSAFE for lab in labels])
    grid = purr_build(scene, gt.bounds, dims=60, robot_radius=float(sets[0][1][0]))
    return gt, Q, scene, sets, truth, grid


def test_single_threshold_gives_one_point(categorized):
    _, _, scene, sets, truth, _ = categorized
    recs = pr_sweep(scene, sets, truth, {"splanning": [0.1]}, methods=("splanning",))
    assert len(recs) == 1


def test_sweep_matches_bruteforce_counts(arm, categorized):
    _, Q, scene, sets, truth, grid = categorized
    recs = pr_sweep(scene, sets, truth, {"splanning": [1e-3, 0.05], "splatnav": [2.0], "catnips": [0.01]},
                    purr_grid=grid, catnips_nmax=(1,))
    for r in recs:
        n_max = 1
        pred, point = classify_configs(scene, arm, Q, truth, r.method, r.threshold, purr_grid=grid, n_max=n_max)
        tp = sum(p and t for p, t in zip(pred, truth))
        fp = sum(p and not t for p, t in zip(pred, truth))
        fn = sum(t and not p for p, t in zip(pred, truth))
        tn = sum(not p and not t for p, t in zip(pred, truth))
        assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn) == (point.tp, point.fp, point.fn, point.tn)
    with pytest.raises(ValueError):
        classify_configs(scene, arm, Q, truth, "bogus", 0.1)


def test_recall_monotone_as_methods_relax(categorized):
    _, _, scene, sets, truth, grid = categorized
    recs = pr_sweep(scene, sets, truth, purr_grid=grid)
    sp = sorted((r for r in recs if r.method == "splanning"), key=lambda r: -r.threshold)
    assert all(a.recall <= b.recall for a, b in zip(sp, sp[1:]))
    sn = sorted((r for r in recs if r.method == "splatnav"), key=lambda r: r.threshold)
    assert all(a.recall <= b.recall for a, b in zip(sn, sn[1:]))
    for n in (1, 5, 10):
        cn = sorted((r for r in recs if r.param == f"N_max={n}"), key=lambda r: -r.threshold)
        assert all(a.recall <= b.recall for a, b in zip(cn, cn[1:]))


def test_far_spheres_always_free_for_splanning(rng):
    sc = random_scene(rng, 20, spread=0.3, std=(0.02, 0.1))
    lo, hi = sc.bounding_boxes(6.0)
    far = []
    while len(far) < 200:
        c = rng.uniform(-3, 3, 3)
        r = rng.uniform(0.02, 0.3)
        gap = np.maximum(np.maximum(lo - c, c - hi), 0)
        if np.all(np.linalg.norm(gap, axis=1) > r):
            far.append((c[None], np.array([r])))
    scores = splanning_scores(sc, far)
    assert np.all(scores < 1e-6)


def test_write_csv(tmp_path):
    recs = [PRPoint("splanning", "alpha=beta", 0.1, 1, 0, 0, 1)]
    write_pr_csv(recs, tmp_path / "pr.csv", meta={"seed": 1})
    lines = (tmp_path / "pr.csv").read_text().splitlines()
    assert lines[0] == "# seed: 1"
    rows = list(csv.DictReader(lines[1:]))
    assert rows[0]["method"] == "splanning" and float(rows[0]["precision"]) == 1.0
