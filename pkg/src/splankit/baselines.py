"""Competing collision checkers and the precision/recall harness.

Two baselines are provided:

* an ellipsoid-separation test in the style of Splat-Nav, which certifies a
  robot sphere disjoint from a Gaussian's ``n_sigma`` level set when
  ``K(s) > 1`` for some ``s`` in (0, 1);
* a voxel "probabilistically unsafe robot region" in the style of CATNIPS,
  thresholding a Poisson tail of the density convolved with the robot ball.

The PURR decision rule here is a stand-in: the expected number of auxiliary
particles hitting the robot is the convolved intensity divided by the
cross-section of an auxiliary sphere of volume ``V_aux``, and a cell is unsafe
when ``P(N > N_max)`` exceeds the threshold.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.stats import poisson

from .risk import candidate_pairs, sphere_risk_batch
from .scene import SplatScene

log = logging.getLogger(__name__)

PURR_RULE = "poisson-tail stand-in"


# ---------------------------------------------------------------------------
# ellipsoid test


def splatnav_K(s, w, lam, kappa: float):
    """``K(s) = sum_i w_i^2 s (1 - s) / (kappa + s (lambda_i - kappa))``.

    ``w`` is the center offset in the Gaussian eigenframe, ``lam`` the
    (level-set scaled) eigenvalues and ``kappa`` the robot's isotropic
    variance (radius squared).  Returns one value per entry of ``s``.
    """
    s = np.asarray(s, dtype=float)[..., None]
    w = np.asarray(w, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return np.sum(w * w * s * (1.0 - s) / (kappa + s * (lam - kappa)), axis=-1)


def s_grid(n_samples: int = 1000, seed: int | None = None) -> np.ndarray:
    """Midpoint grid on (0, 1), or seeded uniform samples when ``seed`` is given."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if seed is None:
        return (np.arange(n_samples) + 0.5) / n_samples
    return np.random.default_rng(seed).uniform(0.0, 1.0, n_samples)


def splatnav_check(center, radius: float, component, n_sigma: float, n_samples: int = 1000, seed: int | None = None) -> bool:
    """True (collision) unless some sampled ``K(s)`` exceeds 1.

    ``component`` needs ``mean``, ``rotation`` and ``eigvals`` attributes.
    """
    s = s_grid(n_samples, seed)
    w = component.rotation.T @ (np.asarray(center, dtype=float) - component.mean)
    K = splatnav_K(s, w, n_sigma**2 * component.eigvals, radius**2)
    return not bool(np.any(K > 1.0))


def splatnav_check_many(scene: SplatScene, centers, radii, n_sigma: float, n_samples: int = 1000, seed: int | None = None) -> np.ndarray:
    """Collision flag per sphere against every component's ``n_sigma`` ellipsoid."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (centers.shape[0],))
    out = np.zeros(centers.shape[0], dtype=bool)
    if len(scene) == 0:
        return out
    # an ellipsoid lies inside the ball of radius n_sigma * sqrt(lambda_max) about its mean
    bi, ci = candidate_pairs(scene, centers, radii, support=n_sigma, margin=1.0)
    if bi.size == 0:
        return out
    s = s_grid(n_samples, seed)
    step = 4096
    for a in range(0, bi.size, step):
        b_, c_ = bi[a : a + step], ci[a : a + step]
        w = np.einsum("pji,pj->pi", scene.rotations[c_], centers[b_] - scene.means[c_])
        lam = n_sigma**2 * scene.eigvals[c_]
        kappa = radii[b_] ** 2
        num = (w * w)[:, None, :] * (s * (1.0 - s))[None, :, None]
        den = kappa[:, None, None] + s[None, :, None] * (lam[:, None, :] - kappa[:, None, None])
        K = (num / den).sum(axis=2)
        hit = ~np.any(K > 1.0, axis=1)
        out[b_[hit]] = True
    return out


# ---------------------------------------------------------------------------
# PURR grid


@dataclass
class PurrGrid:
    origin: np.ndarray
    cell: float
    dims: tuple
    intensity: np.ndarray
    kernel: np.ndarray
    robot_intensity: np.ndarray
    unsafe: np.ndarray
    n_aux_max: int
    v_aux: float
    sigma_thresh: float
    rule: str = PURR_RULE

    def index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-cell indices ``(N, 3)`` and an inside-bounds mask."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        idx = np.floor((p - self.origin) / self.cell).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=1)
        return np.clip(idx, 0, np.array(self.dims) - 1), inside

    def expected_hits(self, points) -> np.ndarray:
        idx, inside = self.index(points)
        lam = self.robot_intensity[idx[:, 0], idx[:, 1], idx[:, 2]] / aux_cross_section(self.v_aux)
        return np.where(inside, lam, 0.0)


def aux_cross_section(v_aux: float) -> float:
    r = (3.0 * v_aux / (4.0 * np.pi)) ** (1.0 / 3.0)
    return float(np.pi * r * r)


def ball_kernel(radius: float, cell: float) -> np.ndarray:
    n = int(np.ceil(radius / cell))
    ax = np.arange(-n, n + 1) * cell
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return (X * X + Y * Y + Z * Z <= radius * radius).astype(float)


def cell_intensities(scene: SplatScene, origin, cell: float, dims, support: float = 6.0) -> np.ndarray:
    """Density at cell centers times cell volume, accumulated per component over its support box."""
    dims = tuple(int(d) for d in dims)
    out = np.zeros(dims)
    if len(scene) == 0:
        return out
    origin = np.asarray(origin, dtype=float)
    lo, hi = scene.bounding_boxes(support)
    amp = scene.weights * scene.normalizers * cell**3
    prec = scene.precisions
    D = np.array(dims)
    for n in range(len(scene)):
        if amp[n] == 0:
            continue
        i0 = np.clip(np.floor((lo[n] - origin) / cell - 0.5).astype(int), 0, D)
        i1 = np.clip(np.ceil((hi[n] - origin) / cell - 0.5).astype(int) + 1, 0, D)
        if np.any(i1 <= i0):
            continue
        axes = [origin[d] + (np.arange(i0[d], i1[d]) + 0.5) * cell - scene.means[n, d] for d in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        P = prec[n]
        q = (
            P[0, 0] * X * X + P[1, 1] * Y * Y + P[2, 2] * Z * Z
            + 2 * (P[0, 1] * X * Y + P[0, 2] * X * Z + P[1, 2] * Y * Z)
        )
        out[i0[0] : i1[0], i0[1] : i1[1], i0[2] : i1[2]] += amp[n] * np.exp(-0.5 * q)
    return out


def purr_build(
    scene: SplatScene,
    bounds,
    dims=(150, 150, 150),
    robot_radius: float = 0.1,
    n_aux_max: int = 1,
    v_aux: float = 1e-6,
    sigma_thresh: float = 0.01,
) -> PurrGrid:
    """Voxelize the density, convolve with the robot ball and threshold the Poisson tail."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("empty bounds")
    dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
    if min(dims) <= 0:
        raise ValueError("grid dims must be > 0")
    cell = float(np.max((hi - lo) / np.array(dims)))
    I = cell_intensities(scene, lo, cell, dims)
    K = ball_kernel(robot_radius, cell)
    IR = np.maximum(fftconvolve(I, K, mode="same"), 0.0) if I.any() else np.zeros(dims)
    IR[IR < 1e-14 * max(IR.max(), 1e-300)] = 0.0
    unsafe = purr_unsafe(IR, n_aux_max, v_aux, sigma_thresh)
    return PurrGrid(lo, cell, dims, I, K, IR, unsafe, n_aux_max, v_aux, sigma_thresh)


def purr_unsafe(robot_intensity, n_aux_max: int, v_aux: float, sigma_thresh: float) -> np.ndarray:
    lam = np.asarray(robot_intensity) / aux_cross_section(v_aux)
    return poisson.sf(n_aux_max, lam) > sigma_thresh


def purr_check(grid: PurrGrid, center) -> bool:
    idx, inside = grid.index(center)
    if not inside[0]:
        warnings.warn("sphere center outside the PURR grid; treated as free", RuntimeWarning, stacklevel=2)
        return False
    i = idx[0]
    return bool(grid.unsafe[i[0], i[1], i[2]])


# ---------------------------------------------------------------------------
# classifier harness


@dataclass(frozen=True)
class PRPoint:
    method: str
    param: str
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    no_positives: bool = False

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 1.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 1.0


def confusion(pred, truth) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    return (
        int(np.sum(pred & truth)),
        int(np.sum(pred & ~truth)),
        int(np.sum(~pred & truth)),
        int(np.sum(~pred & ~truth)),
    )


def pr_point(method: str, param: str, threshold: float, pred, truth) -> PRPoint:
    tp, fp, fn, tn = confusion(pred, truth)
    return PRPoint(method, param, float(threshold), tp, fp, fn, tn, no_positives=(tp + fn == 0))


def pr_auc(points) -> float:
    """Step-interpolated area under the PR curve (average-precision style)."""
    pts = sorted(((p.recall, p.precision) for p in points), key=lambda rp: (rp[0], -rp[1]))
    best = {}
    for r, p in pts:
        best[r] = max(best.get(r, 0.0), p)
    area, prev_r = 0.0, 0.0
    for r in sorted(best):
        area += (r - prev_r) * best[r]
        prev_r = r
    return float(area)


def splanning_predict(scene: SplatScene, sphere_sets, threshold: float) -> np.ndarray:
    """Collision iff any sphere's risk value reaches ``alpha * beta`` with ``alpha = beta = threshold``."""
    return np.array([np.any(sphere_risk_batch(scene, c, r) >= threshold * threshold) for c, r in sphere_sets])


def splanning_scores(scene: SplatScene, sphere_sets) -> np.ndarray:
    """Largest sphere risk value per configuration (threshold sweeps compare it with ``thr^2``)."""
    return np.array([float(np.max(sphere_risk_batch(scene, c, r))) for c, r in sphere_sets])


def splatnav_predict(scene: SplatScene, sphere_sets, n_sigma: float, n_samples: int = 1000) -> np.ndarray:
    return np.array([np.any(splatnav_check_many(scene, c, r, n_sigma, n_samples)) for c, r in sphere_sets])


def purr_hits(grid: PurrGrid, sphere_sets) -> np.ndarray:
    """Largest expected auxiliary hit count over each configuration's sphere centers."""
    return np.array([float(np.max(grid.expected_hits(c))) for c, _ in sphere_sets])


def classify_configs(scene: SplatScene, arm, configs, truth, method: str, threshold: float,
                     purr_grid: PurrGrid | None = None, n_max: int = 1, n_s: int = 5):
    """Predict collisions for static configurations with one method at one threshold.

    Each configuration is covered by its static link balls, all with the
    largest radius.  Returns the boolean predictions and their PR point.
    """
    from .scenegen import static_sfo_spheres

    sets = [static_sfo_spheres(arm, q, n_s) for q in np.atleast_2d(configs)]
    if method == "splanning":
        pred = splanning_predict(scene, sets, threshold)
        param = "alpha=beta"
    elif method == "splatnav":
        pred = splatnav_predict(scene, sets, threshold)
        param = "n_sigma"
    elif method == "catnips":
        if purr_grid is None:
            raise ValueError("catnips needs a PURR grid")
        pred = poisson.sf(n_max, purr_hits(purr_grid, sets)) > threshold
        param = f"N_max={n_max}"
    else:
        raise ValueError(f"unknown method {method!r}")
    return pred, pr_point(method, param, threshold, pred, truth)


def pr_sweep(scene, sphere_sets, truth, thresholds=None, purr_grid: PurrGrid | None = None,
             methods=("splanning", "splatnav", "catnips"), catnips_nmax=(1, 5, 10)):
    """PR records for every method and threshold.

    Parameters
    ----------
    sphere_sets : list of (centers, radii) per configuration
    truth : bool array, True = collision
    thresholds : dict mapping method name to its threshold list, optional
    purr_grid : PurrGrid built with the robot radius, required for ``catnips``
    catnips_nmax : auxiliary-hit counts swept for ``catnips`` (one row set each)
    """
    thresholds = thresholds or {}
    truth = np.asarray(truth, dtype=bool)
    recs = []
    if "splanning" in methods:
        th = thresholds.get("splanning", np.concatenate([np.logspace(-6, -1, 26), np.linspace(0.15, 0.95, 17)]))
        if len(th) < 1:
            raise ValueError("need at least one threshold")
        score = splanning_scores(scene, sphere_sets)
        for t in th:
            recs.append(pr_point("splanning", "alpha=beta", t, score >= t * t, truth))
    if "splatnav" in methods:
        th = thresholds.get("splatnav", np.linspace(1.0, 10.0, 19))
        for t in th:
            recs.append(pr_point("splatnav", "n_sigma", t, splatnav_predict(scene, sphere_sets, t), truth))
    if "catnips" in methods:
        if purr_grid is None:
            raise ValueError("catnips sweep needs a PURR grid")
        hits = purr_hits(purr_grid, sphere_sets)
        th = thresholds.get("catnips", np.concatenate([[0.0], np.logspace(-6, 0, 13)[:-1]]))
        for n_max in catnips_nmax:
            sf = poisson.sf(n_max, hits)
            for t in th:
                recs.append(pr_point("catnips", f"N_max={n_max}", t, sf > t, truth))
    return recs


def pool_records(per_scene) -> list:
    """Sum confusion counts of matching (method, param, threshold) rows across scenes."""
    pooled: dict = {}
    for recs in per_scene:
        for r in recs:
            key = (r.method, r.param, r.threshold)
            c = pooled.get(key, (0, 0, 0, 0))
            pooled[key] = (c[0] + r.tp, c[1] + r.fp, c[2] + r.fn, c[3] + r.tn)
    return [PRPoint(m, p, t, *c, no_positives=(c[0] + c[2] == 0)) for (m, p, t), c in pooled.items()]


def write_pr_csv(records, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "param", "threshold", "tp", "fp", "fn", "tn", "precision", "recall", "no_positives"])
        for r in records:
            w.writerow([r.method, r.param, repr(r.threshold), r.tp, r.fp, r.fn, r.tn, repr(r.precision), repr(r.recall), int(r.no_positives)])


def run_classification(arm, seeds, n_scenes: int, per_category: int = 10, n_obstacles: int = 3,
                       methods=("splanning", "splatnav", "catnips"), thresholds=None, catnips_nmax=(1, 5, 10),
                       h: float = 0.04, rho_t: float = 100.0, max_draws: int = 200_000):
    """Categorized-configuration PR experiment over seeded box scenes.

    Seeds are tried in order; a scene whose categories cannot be filled
    within ``max_draws`` samples is skipped.  Returns
    ``(pooled_records, used_seeds, skipped_seeds)``.
    """
    from .scenegen import UNSAFE, boxes_to_splat, gen_scene, sample_categorized, static_sfo_spheres

    per_scene, used, skipped = [], [], []
    for seed in seeds:
        if len(used) >= n_scenes:
            break
        gt = gen_scene(n_obstacles, int(seed))
        try:
            Q, labels = sample_categorized(gt, arm, per_category, int(seed), max_draws=max_draws)
        except RuntimeError:
            skipped.append(int(seed))
            continue
        scene = boxes_to_splat(gt, h, rho_t)
        sets = [static_sfo_spheres(arm, q) for q in Q]
        truth = np.array([lab == UNSAFE for lab in labels])
        grid = purr_build(scene, gt.bounds, robot_radius=float(sets[0][1][0])) if "catnips" in methods else None
        per_scene.append(pr_sweep(scene, sets, truth, thresholds, grid, methods, catnips_nmax))
        used.append(int(seed))
    return pool_records(per_scene), used, skipped
