"""Synthetic box scenes, their splat conversion and the exact geometric oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arm import ArmModel, joint_positions, sfo_radii, sfo_taus
from .scene import SplatScene

UNSAFE, NEARLY_SAFE, SAFE = "Unsafe", "NearlySafe", "Safe"
NEAR_THRESHOLD = 0.40
DEFAULT_BOUNDS = ((-0.9, -0.9, -0.9), (0.9, 0.9, 0.9))
BASE_CENTER = np.array([0.0, 0.0, 0.2])


@dataclass(frozen=True)
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        h = np.broadcast_to(np.asarray(self.half_extents, dtype=float), (3,)).copy()
        if np.any(h <= 0):
            raise ValueError("box half-extents must be > 0")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)

    @property
    def lower(self):
        return self.center - self.half_extents

    @property
    def upper(self):
        return self.center + self.half_extents


@dataclass
class GtScene:
    boxes: list
    bounds: tuple = DEFAULT_BOUNDS
    seed: int | None = None

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        self.bounds = (lo, hi)
        for b in self.boxes:
            if np.any(b.lower < lo - 1e-12) or np.any(b.upper > hi + 1e-12):
                raise ValueError("box outside workspace bounds")

    @property
    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.boxes]).reshape(-1, 3)

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([b.half_extents for b in self.boxes]).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "bounds": [self.bounds[0].tolist(), self.bounds[1].tolist()],
            "seed": self.seed,
            "boxes": [{"center": b.center.tolist(), "half_extents": b.half_extents.tolist()} for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GtScene":
        try:
            boxes = [BoxObstacle(b["center"], b["half_extents"]) for b in doc["boxes"]]
            return cls(boxes, tuple(doc["bounds"]), doc.get("seed"))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed box scene: {exc}") from exc


def save_gt(gt: GtScene, path) -> None:
    Path(path).write_text(json.dumps(gt.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_gt(path) -> GtScene:
    return GtScene.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def gen_scene(
    n_obstacles: int,
    seed: int,
    bounds=DEFAULT_BOUNDS,
    half_extent: float = 0.1,
    keep_out: float = 0.3,
) -> GtScene:
    """Uniformly placed cubes inside ``bounds``.

    Boxes that come within ``keep_out`` of the arm base at ``(0, 0, 0.2)`` are
    redrawn, since the first links occupy that region in every configuration.
    """
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be >= 0")
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    h = np.full(3, half_extent)
    boxes = []
    while len(boxes) < n_obstacles:
        c = rng.uniform(lo + h, hi - h)
        if keep_out > 0 and _point_box_distance(BASE_CENTER[None], c[None], h[None])[0, 0] < keep_out:
            continue
        boxes.append(BoxObstacle(c, h))
    return GtScene(boxes, (lo, hi), seed)


def boxes_to_splat(gt: GtScene, h: float = 0.04, rho_t: float = 100.0, surface_only: bool = False) -> SplatScene:
    """Tile every box with isotropic Gaussians of std ``h/2`` and weight ``rho_t h^3``.

    With ``surface_only`` only the lattice points on the box faces are kept.
    """
    if h <= 0:
        raise ValueError("spacing must be > 0")
    if rho_t < 0:
        raise ValueError("target density must be >= 0")
    means = []
    for b in gt.boxes:
        ext = 2 * b.half_extents
        if h > ext.min() + 1e-12:
            raise ValueError(f"spacing {h} exceeds the smallest box extent {ext.min()}")
        n = np.maximum(1, np.round(ext / h).astype(int))
        axes = [b.lower[d] + (np.arange(n[d]) + 0.5) * ext[d] / n[d] for d in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        if surface_only:
            idx = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), axis=-1).reshape(-1, 3)
            on_face = np.any((idx == 0) | (idx == n - 1), axis=1)
            grid = grid[on_face]
        means.append(grid)
    if not means:
        return SplatScene.empty()
    means = np.concatenate(means)
    m = means.shape[0]
    lam = np.full((m, 3), (h / 2) ** 2)
    w = np.full(m, rho_t * h**3)
    R = np.broadcast_to(np.eye(3), (m, 3, 3))
    colors = np.tile([0.6, 0.4, 0.2], (m, 1))
    return SplatScene(w, means, R, lam, colors)


# ---------------------------------------------------------------------------
# exact oracle


def _point_box_distance(points, centers, halves) -> np.ndarray:
    """Signed point-to-box distances ``(N, B)`` (negative inside)."""
    d = np.abs(points[:, None, :] - centers[None]) - halves[None]
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=2)
    inside = np.minimum(d.max(axis=2), 0.0)
    return outside + inside


def gt_distance(gt: GtScene, centers, radii) -> np.ndarray | float:
    """Signed clearance of spheres from the nearest box, minus the radius."""
    c = np.asarray(centers, dtype=float)
    single = c.ndim == 1
    c = c.reshape(-1, 3)
    r = np.broadcast_to(np.asarray(radii, dtype=float), (c.shape[0],))
    if not gt.boxes:
        out = np.full(c.shape[0], np.inf)
    else:
        out = _point_box_distance(c, gt.centers, gt.half_extents).min(axis=1) - r
    return float(out[0]) if single else out


def gt_collision(gt: GtScene, centers, radii):
    """True where a sphere overlaps a box (strictly negative clearance)."""
    d = gt_distance(gt, centers, radii)
    return d < 0 if np.ndim(d) else bool(d < 0)


def static_sfo_spheres(arm: ArmModel, q, n_s: int = 5, uniform: bool = True):
    """Link balls of a static configuration (or a batch of them).

    Returns the ``n_links * n_s`` centers and radii used by the classifiers;
    ``uniform`` replaces every radius with the largest one.  For a batch
    ``q`` of shape (N, n_q) the centers have shape (N, n_links * n_s, 3).
    """
    q = np.asarray(q, dtype=float)
    P = joint_positions(arm, q)
    taus = sfo_taus(n_s)
    lens = np.concatenate([np.linalg.norm(arm.offsets[1:], axis=1), [np.linalg.norm(arm.ee_offset)]])
    centers, radii = [], []
    for j in range(arm.n_q):
        centers.append((1 - taus)[None, :, None] * P[:, j, None, :] + taus[None, :, None] * P[:, j + 1, None, :])
        radii.append(sfo_radii(arm.radii[j], arm.radii[j + 1], lens[j], n_s))
    centers, radii = np.concatenate(centers, axis=1), np.concatenate(radii)
    if uniform:
        radii = np.full_like(radii, radii.max())
    return (centers[0] if q.ndim == 1 else centers), radii


def arm_geometry_spheres(arm: ArmModel, Q, depth_tol: float = 1e-4):
    """Dense balls along every link with interpolated radii (the link model).

    Ball spacing ``d`` is chosen so the uncovered depth ``r - sqrt(r^2 - d^2/4)``
    stays below ``depth_tol``.

    Returns
    -------
    centers : (N, S, 3) for N configurations
    radii : (S,)
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    P = joint_positions(arm, Q)
    lens = np.concatenate([np.linalg.norm(arm.offsets[1:], axis=1), [np.linalg.norm(arm.ee_offset)]])
    cs, rs = [], []
    for j in range(arm.n_q):
        r = min(arm.radii[j], arm.radii[j + 1])
        d = 2.0 * np.sqrt(max(r * r - (r - depth_tol) ** 2, 1e-16))
        n = max(2, int(np.ceil(lens[j] / d)) + 1)
        tau = np.linspace(0.0, 1.0, n)
        cs.append((1 - tau)[None, :, None] * P[:, j, None, :] + tau[None, :, None] * P[:, j + 1, None, :])
        rs.append((1 - tau) * arm.radii[j] + tau * arm.radii[j + 1])
    return np.concatenate(cs, axis=1), np.concatenate(rs)


def arm_clearance(gt: GtScene, arm: ArmModel, Q) -> np.ndarray:
    """Signed clearance of the arm link model for each configuration in ``Q``."""
    C, r = arm_geometry_spheres(arm, Q)
    N, S, _ = C.shape
    d = gt_distance(gt, C.reshape(-1, 3), np.tile(r, N))
    return np.asarray(d).reshape(N, S).min(axis=1)


def _categories(d: np.ndarray) -> list:
    return [UNSAFE if v < 0 else NEARLY_SAFE if v < NEAR_THRESHOLD else SAFE for v in d]


def config_clearance(gt: GtScene, arm: ArmModel, Q, n_s: int = 5) -> np.ndarray:
    """Smallest signed sphere clearance of the static link balls, per configuration."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    C, r = static_sfo_spheres(arm, Q, n_s)
    N, S, _ = C.shape
    return np.asarray(gt_distance(gt, C.reshape(-1, 3), np.tile(r, N))).reshape(N, S).min(axis=1)


def categorize_config(gt: GtScene, arm: ArmModel, q, n_s: int = 5) -> str:
    """Unsafe (< 0 m), NearlySafe (< 0.40 m) or Safe, from static link-ball clearance."""
    return _categories(config_clearance(gt, arm, q, n_s))[0]


def sample_config(arm: ArmModel, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    lo = np.where(np.isfinite(arm.q_limits[:, 0]), arm.q_limits[:, 0], -np.pi)
    hi = np.where(np.isfinite(arm.q_limits[:, 1]), arm.q_limits[:, 1], np.pi)
    return rng.uniform(lo, hi) if n is None else rng.uniform(lo, hi, (n, arm.n_q))


def sample_categorized(gt: GtScene, arm: ArmModel, per_category: int, seed: int, max_draws: int = 200_000, batch: int = 4096):
    """``per_category`` configurations of each category, in draw order.

    Returns
    -------
    configs : (3 * per_category, n_q)
    labels : list of category names
    """
    rng = np.random.default_rng(seed)
    want = {UNSAFE: per_category, NEARLY_SAFE: per_category, SAFE: per_category}
    configs, labels = [], []
    drawn = 0
    while any(want.values()) and drawn < max_draws:
        Q = sample_config(arm, rng, batch)
        drawn += batch
        for q, cat in zip(Q, _categories(config_clearance(gt, arm, Q))):
            if want[cat]:
                want[cat] -= 1
                configs.append(q)
                labels.append(cat)
    if any(want.values()):
        raise RuntimeError(f"could not fill categories after {drawn} draws: {want}")
    return np.array(configs), labels


def sample_free_config(gt: GtScene, arm: ArmModel, rng: np.random.Generator, clearance: float = 0.1, max_draws: int = 100_000):
    """A configuration whose link model clears every box by ``clearance``."""
    for _ in range(max_draws):
        q = sample_config(arm, rng)
        if arm_clearance(gt, arm, q[None])[0] > clearance:
            return q
    raise RuntimeError("no free configuration found")
