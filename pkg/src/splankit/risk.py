"""Collision-probability bound for balls in a splat density field.

For a ball ``S`` of radius ``rho`` centered at ``c`` the quantity

    H(S) = sum_n w_n prod_l 1/2 [erf((rho - mu'_l)/s_l) + erf((rho + mu'_l)/s_l)],
    mu' = R_n^T (mu_n - c),  s_l = sqrt(2 lambda_l),

integrates each normalized Gaussian over the cube ``[-rho, rho]^3`` in its own
eigenframe, which contains the ball.  The normalizer ``eta_n`` cancels exactly
against the 1D Gaussian integrals, leaving the product of half-erf sums.

The risk value used as a constraint is ``V = 1 - exp(-H / 4 pi)`` and the
collision bound is ``V / alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .scene import SplatScene, density, ray_depth_closed_form

FOUR_PI = 4.0 * np.pi
CULL_SIGMAS = 6.0
SQRT3 = float(np.sqrt(3.0))
DENSE_PAIR_LIMIT = 20_000_000


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not (self.radius > 0):
            raise ValueError(f"ball radius must be > 0, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class RiskParams:
    alpha: float = 0.025
    beta: float = 0.025

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    @property
    def threshold(self) -> float:
        return self.alpha * self.beta


def _half_erf_sum(mu, rho, s):
    """``1/2 [erf((rho-mu)/s) + erf((rho+mu)/s)]`` written with erfc of |mu|.

    Both erfc arguments have the same sign structure, so neither the saturated
    regime (``rho >> |mu|``) nor the far tail (``|mu| >> rho``) cancels.
    """
    m = np.abs(mu)
    return 0.5 * (erfc((m - rho) / s) - erfc((m + rho) / s))


def _half_erf_grads(mu, rho, s):
    """Partial derivatives of ``_half_erf_sum`` with respect to ``mu`` and ``rho``."""
    em = np.exp(-(((rho - mu) / s) ** 2))
    ep = np.exp(-(((rho + mu) / s) ** 2))
    k = 1.0 / (np.sqrt(np.pi) * s)
    return k * (ep - em), k * (ep + em)


def _sphere_prefilter(means, reach, centers, radii, chunk: int = 1 << 21):
    """Pairs whose center distance is within ``radius + reach``, from a dense distance matrix."""
    m2 = np.einsum("ni,ni->n", means, means)
    bis, cis = [], []
    step = max(1, chunk // len(means))
    for b0 in range(0, centers.shape[0], step):
        c = centers[b0 : b0 + step]
        d2 = np.einsum("bi,bi->b", c, c)[:, None] + m2[None] - 2.0 * (c @ means.T)
        lim = radii[b0 : b0 + step, None] + reach[None]
        # slack for rounding in the expanded square; the exact box test follows
        b, n = np.nonzero(d2 <= lim * lim * (1 + 1e-9) + 1e-12)
        bis.append(b + b0)
        cis.append(n)
    return np.concatenate(bis).astype(np.intp), np.concatenate(cis).astype(np.intp)


def candidate_pairs(scene: SplatScene, centers, radii, support: float = CULL_SIGMAS, margin: float = SQRT3):
    """Ball/component pairs whose support box lies within ``margin * radius``.

    ``H`` integrates over a cube of half-width ``rho`` in each component's
    eigenframe, whose corners sit at ``sqrt(3) rho``.  Culling at that
    distance keeps ``H`` continuous in the ball center.

    Returns
    -------
    ball_idx, comp_idx : int arrays of equal length
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    radii = margin * np.broadcast_to(np.asarray(radii, dtype=float), (centers.shape[0],))
    if len(scene) == 0 or centers.shape[0] == 0:
        e = np.zeros(0, dtype=np.intp)
        return e, e
    lo, hi = scene.bounding_boxes(support)
    if centers.shape[0] * len(scene) <= DENSE_PAIR_LIMIT:
        bi, ci = _sphere_prefilter(scene.means, np.linalg.norm(hi - scene.means, axis=1), centers, radii)
    else:
        reach = float(np.max(np.linalg.norm(hi - scene.means, axis=1)))
        cand = scene.tree.query_ball_point(centers, r=radii + reach)
        counts = np.fromiter((len(c) for c in cand), dtype=np.intp, count=len(cand))
        bi = np.repeat(np.arange(centers.shape[0]), counts)
        ci = np.fromiter((j for c in cand for j in c), dtype=np.intp, count=int(counts.sum()))
    if ci.size == 0:
        return bi, ci
    # distance from the ball center to the component's box
    c = centers[bi]
    gap = np.maximum(np.maximum(lo[ci] - c, c - hi[ci]), 0.0)
    keep = np.einsum("pi,pi->p", gap, gap) <= radii[bi] ** 2
    return bi[keep], ci[keep]


def erf_volume_bound_batch(scene: SplatScene, centers, radii, grad: bool = False, cull: bool = True):
    """Vectorized ``H`` for many balls, optionally with gradients.

    Parameters
    ----------
    centers : (M, 3) array
    radii : (M,) array or scalar
    grad : bool
        Also return ``dH/dc`` of shape (M, 3) and ``dH/drho`` of shape (M,).
    cull : bool
        Skip components whose 6-sigma box misses the ball's circumscribing sphere.

    Returns
    -------
    H : (M,) array, or ``(H, dH_dc, dH_drho)`` when ``grad``.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    M = centers.shape[0]
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (M,)).copy()
    H = np.zeros(M)
    dc = np.zeros((M, 3))
    dr = np.zeros(M)
    if len(scene) and M:
        if cull:
            bi, ci = candidate_pairs(scene, centers, radii)
        else:
            bi = np.repeat(np.arange(M), len(scene))
            ci = np.tile(np.arange(len(scene)), M)
        if bi.size:
            R = scene.rotations[ci]
            mup = np.einsum("pji,pj->pi", R, scene.means[ci] - centers[bi])
            s = np.sqrt(2.0 * scene.eigvals[ci])
            rho = radii[bi][:, None]
            f = _half_erf_sum(mup, rho, s)
            w = scene.weights[ci]
            H = np.bincount(bi, weights=w * np.prod(f, axis=1), minlength=M)
            if grad:
                dfm, dfr = _half_erf_grads(mup, rho, s)
                # products of the other two factors
                others = np.stack([f[:, 1] * f[:, 2], f[:, 0] * f[:, 2], f[:, 0] * f[:, 1]], axis=1)
                g_mu = w[:, None] * dfm * others
                g_c = -np.einsum("pij,pj->pi", R, g_mu)
                g_r = w * np.sum(dfr * others, axis=1)
                for k in range(3):
                    dc[:, k] = np.bincount(bi, weights=g_c[:, k], minlength=M)
                dr = np.bincount(bi, weights=g_r, minlength=M)
    if grad:
        return H, dc, dr
    return H


def erf_volume_bound(scene: SplatScene, ball: Ball) -> float:
    """Closed-form upper bound ``H`` on the integral of sigma over the ball."""
    return float(erf_volume_bound_batch(scene, ball.center[None], ball.radius)[0])


def risk_from_H(H):
    return -np.expm1(-np.asarray(H, dtype=float) / FOUR_PI)


def sphere_risk_value(scene: SplatScene, ball: Ball) -> float:
    """``1 - exp(-H / 4 pi)``."""
    return float(risk_from_H(erf_volume_bound(scene, ball)))


def sphere_risk_batch(scene: SplatScene, centers, radii, grad: bool = False):
    """Risk values ``V`` for many balls, and optionally ``dV/dc``, ``dV/drho``."""
    if not grad:
        return risk_from_H(erf_volume_bound_batch(scene, centers, radii))
    H, dc, dr = erf_volume_bound_batch(scene, centers, radii, grad=True)
    dV = np.exp(-H / FOUR_PI) / FOUR_PI
    return risk_from_H(H), dc * dV[:, None], dr * dV


def sphere_risk_gradient(scene: SplatScene, ball: Ball):
    """Exact derivatives of ``sphere_risk_value`` with respect to center and radius."""
    _, dc, dr = sphere_risk_batch(scene, ball.center[None], ball.radius, grad=True)
    return dc[0], float(dr[0])


def collision_probability_bound(scene: SplatScene, ball: Ball, alpha: float) -> float:
    """``(1/alpha) (1 - exp(-H / 4 pi))``."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return sphere_risk_value(scene, ball) / alpha


# ---------------------------------------------------------------------------
# oracles


def uniform_ball_samples(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform in the unit ball."""
    d = rng.standard_normal((n, 3))
    scale = np.cbrt(rng.random(n)) / np.sqrt(np.einsum("ij,ij->i", d, d))
    return d * scale[:, None]


def mc_ball_integral(scene: SplatScene, ball: Ball, n_samples: int, seed: int = 0):
    """Monte Carlo estimate of the integral of sigma over the ball.

    Returns
    -------
    (estimate, std_error)
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    if len(scene) == 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    vol = 4.0 / 3.0 * np.pi * ball.radius**3
    x = ball.center + ball.radius * uniform_ball_samples(n_samples, rng)
    # only components whose support box meets the ball's box can contribute
    lo, hi = scene.bounding_boxes()
    near = np.all((lo <= ball.center + ball.radius) & (hi >= ball.center - ball.radius), axis=1)
    if not np.any(near):
        return 0.0, 0.0
    vals = _mixture_quadratic(scene.subset(np.flatnonzero(near)), x - ball.center, ball.center)
    return float(vol * vals.mean()), float(vol * vals.std(ddof=1) / np.sqrt(n_samples))


def _mixture_quadratic(scene: SplatScene, y: np.ndarray, origin: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
    """Density at ``origin + y`` with every exponent written as a quadratic in ``y``.

    ``(y - m)^T P (y - m) = y^T P y - 2 (P m)^T y + m^T P m`` turns the
    whole mixture into one matrix product over the monomials of ``y``.
    """
    P = scene.precisions
    m = scene.means - origin
    Pm = np.einsum("nij,nj->ni", P, m)
    coef = np.stack([
        P[:, 0, 0], P[:, 1, 1], P[:, 2, 2], 2 * P[:, 0, 1], 2 * P[:, 0, 2], 2 * P[:, 1, 2],
        -2 * Pm[:, 0], -2 * Pm[:, 1], -2 * Pm[:, 2], np.einsum("ni,ni->n", m, Pm),
    ])
    amp = scene.weights * scene.normalizers
    coef = -0.5 * coef
    out = np.empty(len(y))
    mono = np.ones((min(chunk, len(y)), 10))
    for s0 in range(0, len(y), chunk):
        yc = y[s0 : s0 + chunk]
        k = len(yc)
        mono[:k, :3] = yc * yc
        np.multiply(yc[:, 0:1], yc[:, 1:3], out=mono[:k, 3:5])
        np.multiply(yc[:, 1], yc[:, 2], out=mono[:k, 5])
        mono[:k, 6:9] = yc
        e = mono[:k] @ coef
        np.minimum(e, 0.0, out=e)
        np.exp(e, out=e)
        out[s0 : s0 + chunk] = e @ amp
    return out


def uniform_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ray_collision_probabilities(scene: SplatScene, ball: Ball, directions) -> np.ndarray:
    """Per-ray ``1 - T`` for rays leaving the ball center and stopping at its surface."""
    v = np.asarray(directions, dtype=float).reshape(-1, 3)
    tau = ray_depth_closed_form(scene, ball.center[None], v, 0.0, ball.radius)
    return -np.expm1(-tau)


def ray_exceedance_probability(scene: SplatScene, ball: Ball, alpha: float, n_dirs: int = 100_000, seed: int = 0):
    """Fraction of uniformly random directions whose per-ray collision probability reaches ``alpha``."""
    rng = np.random.default_rng(seed)
    p = ray_collision_probabilities(scene, ball, uniform_directions(n_dirs, rng))
    return float(np.mean(p >= alpha))
