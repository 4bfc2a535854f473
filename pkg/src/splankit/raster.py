"""Forward rendering and analytic backward pass for normalized Gaussian splats.

Each Gaussian is pushed through the camera transform and a first-order
expansion of the image map ``(f_x t_x / t_z + 0.5 + c_x, f_y t_y / t_z + 0.5 + c_y, |t|)``;
marginalizing the range coordinate leaves a 2-D kernel
``q = det(J) N(u; mu', Sigma')`` and the per-pixel opacity ``alpha = w q``.
Opacities are composited front to back.

Images are stored row-major with shape ``(H, W, ...)``; the pixel in row ``i``
and column ``j`` is sampled at ``u = (j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .scene import SplatScene

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
ELLIPSE_SIGMA = 3.0


class RasterError(RuntimeError):
    pass


class FitDivergedError(RasterError):
    pass


@dataclass(frozen=True)
class Camera:
    W: int
    H: int
    fx: float
    fy: float
    cx: float
    cy: float
    z_near: float = 0.05
    z_far: float = 20.0
    R_cw: np.ndarray = field(default_factory=lambda: np.eye(3))
    d_cw: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.W < 1 or self.H < 1:
            raise ValueError("image size must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")
        if not (0 < self.z_near < self.z_far):
            raise ValueError("need 0 < z_near < z_far")
        R = np.asarray(self.R_cw, dtype=float).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("R_cw must be a rotation")
        object.__setattr__(self, "R_cw", R)
        object.__setattr__(self, "d_cw", np.asarray(self.d_cw, dtype=float).reshape(3))

    @classmethod
    def look_at(cls, eye, target, W: int, H: int, fov_deg: float = 60.0, up=(0.0, 0.0, 1.0), **kw) -> "Camera":
        """Pinhole camera at ``eye`` whose optical axis (+z) points at ``target``."""
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        f = 0.5 * W / np.tan(np.radians(fov_deg) / 2)
        return cls(W, H, f, f, W / 2, H / 2, R_cw=R, d_cw=-R @ eye, **kw)

    def pixel_coords(self) -> np.ndarray:
        """(H*W, 2) image coordinates of the pixel sample points."""
        jj, ii = np.meshgrid(np.arange(self.W) + 0.5, np.arange(self.H) + 0.5)
        return np.stack([jj.ravel(), ii.ravel()], axis=1)

    def pixel_rays(self):
        """World-frame origin and unit directions through every pixel sample."""
        u = self.pixel_coords()
        d_cam = np.stack([(u[:, 0] - 0.5 - self.cx) / self.fx, (u[:, 1] - 0.5 - self.cy) / self.fy, np.ones(len(u))], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        origin = -self.R_cw.T @ self.d_cw
        return origin, d_cam @ self.R_cw, d_cam

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "W": self.W, "H": self.H, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "z_near": self.z_near, "z_far": self.z_far,
            "R_cw": self.R_cw.tolist(), "d_cw": self.d_cw.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Camera":
        try:
            return cls(int(doc["W"]), int(doc["H"]), float(doc["fx"]), float(doc["fy"]), float(doc["cx"]),
                       float(doc["cy"]), float(doc["z_near"]), float(doc["z_far"]), doc["R_cw"], doc["d_cw"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed camera file: {exc}") from exc


def save_camera(cam: Camera, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class GaussianParams:
    """Raw per-Gaussian parameters used by the rasterizer (covariances kept as full matrices)."""

    means: np.ndarray
    covs: np.ndarray
    colors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.covs = np.asarray(self.covs, dtype=float).reshape(n, 3, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(n)

    @classmethod
    def from_scene(cls, scene: SplatScene) -> "GaussianParams":
        return cls(scene.means.copy(), scene.covariances.copy(), scene.colors.copy(), scene.weights.copy())

    def to_scene(self) -> SplatScene:
        covs = 0.5 * (self.covs + np.swapaxes(self.covs, 1, 2))
        return SplatScene.from_covariances(self.weights, self.means, covs, np.clip(self.colors, 0, 1))

    def copy(self) -> "GaussianParams":
        return GaussianParams(self.means.copy(), self.covs.copy(), self.colors.copy(), self.weights.copy())

    def __len__(self) -> int:
        return len(self.means)


# ---------------------------------------------------------------------------
# projection


@dataclass
class ProjectedGaussian:
    """Image-space quantities of one Gaussian."""

    index: int
    mean2: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    ntilde: float
    depth: float
    mean_cam: np.ndarray
    J: np.ndarray


def image_map(cam: Camera, t) -> np.ndarray:
    """Exact camera-to-image map (pixel u, pixel v, range)."""
    t = np.asarray(t, dtype=float)
    return np.stack([cam.fx * t[..., 0] / t[..., 2] + 0.5 + cam.cx,
                     cam.fy * t[..., 1] / t[..., 2] + 0.5 + cam.cy,
                     np.linalg.norm(t, axis=-1)], axis=-1)


def projection_jacobian(cam: Camera, t) -> np.ndarray:
    """Jacobian of :func:`image_map` at camera-frame points ``t`` (..., 3) -> (..., 3, 3)."""
    t = np.asarray(t, dtype=float)
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    n = np.linalg.norm(t, axis=-1)
    J = np.zeros(t.shape[:-1] + (3, 3))
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / z**2
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / z**2
    J[..., 2, :] = t / n[..., None]
    return J


def _jacobian_derivative(cam: Camera, t: np.ndarray) -> np.ndarray:
    """dJ_ab / dt_c as a (3, 3, 3) array."""
    x, y, z = t
    n = np.linalg.norm(t)
    D = np.zeros((3, 3, 3))
    D[0, 0, 2] = -cam.fx / z**2
    D[0, 2, 0] = -cam.fx / z**2
    D[0, 2, 2] = 2 * cam.fx * x / z**3
    D[1, 1, 2] = -cam.fy / z**2
    D[1, 2, 1] = -cam.fy / z**2
    D[1, 2, 2] = 2 * cam.fy * y / z**3
    D[2] = np.eye(3) / n - np.outer(t, t) / n**3
    return D


def project(params: GaussianParams, cam: Camera, k: int) -> ProjectedGaussian | None:
    """Project Gaussian ``k``; ``None`` when its mean lies outside the depth range."""
    mt = cam.R_cw @ params.means[k] + cam.d_cw
    if mt[2] <= cam.z_near or mt[2] >= cam.z_far:
        return None
    J = projection_jacobian(cam, mt)
    T = J @ cam.R_cw
    cov3 = T @ params.covs[k] @ T.T
    cov2 = cov3[:2, :2]
    det2 = np.linalg.det(cov2)
    if not det2 > 0:
        return None
    conic = np.linalg.inv(cov2)
    ntilde = np.linalg.det(J) / (2 * np.pi * np.sqrt(det2))
    return ProjectedGaussian(k, image_map(cam, mt)[:2], cov2, conic, float(ntilde), float(mt[2]), mt, J)


def project_all(params: GaussianParams, cam: Camera) -> list[ProjectedGaussian]:
    """Visible Gaussians sorted front to back by camera-frame depth."""
    out = [p for p in (project(params, cam, k) for k in range(len(params))) if p is not None]
    out.sort(key=lambda p: (p.depth, p.index))
    return out


def _footprint(pg: ProjectedGaussian, cam: Camera, u: np.ndarray):
    """Pixel indices inside the ``3 sigma`` ellipse, their offsets and kernel values."""
    ext = ELLIPSE_SIGMA * np.sqrt(np.diag(pg.cov2))
    lo = np.floor(pg.mean2 - ext - 0.5).astype(int)
    hi = np.ceil(pg.mean2 + ext - 0.5).astype(int)
    c0, c1 = max(lo[0], 0), min(hi[0], cam.W - 1)
    r0, r1 = max(lo[1], 0), min(hi[1], cam.H - 1)
    if c0 > c1 or r0 > r1:
        return None
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    idx = (rows * cam.W + cols).ravel()
    du = u[idx] - pg.mean2
    m2 = np.einsum("pi,ij,pj->p", du, pg.conic, du)
    keep = m2 <= ELLIPSE_SIGMA**2
    idx, du, m2 = idx[keep], du[keep], m2[keep]
    return idx, du, np.exp(-0.5 * m2)


# ---------------------------------------------------------------------------
# forward


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    transmittance: np.ndarray
    cache: dict = field(default=None, repr=False)


def render(params: GaussianParams | SplatScene, cam: Camera, background=None) -> RenderOutput:
    """Composite all Gaussians front to back.

    ``alpha_k = clip(w_k ntilde_k rho_k, 0, 0.999)``; values below ``1/255`` are
    skipped and a pixel stops once its transmittance drops below ``1e-4``.
    """
    if isinstance(params, SplatScene):
        params = GaussianParams.from_scene(params)
    P = cam.W * cam.H
    u = cam.pixel_coords()
    C = np.zeros((P, 3))
    D = np.zeros(P)
    T = np.ones(P)
    done = np.zeros(P, dtype=bool)
    order = project_all(params, cam)
    for pg in order:
        fp = _footprint(pg, cam, u)
        if fp is None:
            continue
        idx, _, rho = fp
        live = ~done[idx]
        idx, rho = idx[live], rho[live]
        a = np.minimum(params.weights[pg.index] * pg.ntilde * rho, ALPHA_MAX)
        use = a >= ALPHA_MIN
        idx, a = idx[use], a[use]
        C[idx] += a[:, None] * params.colors[pg.index] * T[idx, None]
        D[idx] += a * pg.depth * T[idx]
        T[idx] *= 1.0 - a
        done[idx] |= T[idx] < T_STOP
    # `done` pixels stop only after the Gaussian that crossed the threshold, so
    # the per-pixel processing set is reproducible from the sorted order alone.
    shape = (cam.H, cam.W)
    if background is not None:
        C += T[:, None] * np.asarray(background, dtype=float)
    return RenderOutput(C.reshape(shape + (3,)), D.reshape(shape), T.reshape(shape),
                        {"order": order, "T_final": T.copy(), "params": params, "camera": cam})


def gate_signature(out: RenderOutput) -> bytes:
    """Fingerprint of which (Gaussian, pixel) pairs were composited, clamped or skipped.

    Two renders with equal signatures use the same branch of every
    non-smooth rule, so finite differences between them are meaningful.
    """
    params, cam = out.cache["params"], out.cache["camera"]
    u = cam.pixel_coords()
    T = np.ones(cam.W * cam.H)
    done = np.zeros_like(T, dtype=bool)
    parts = []
    for pg in out.cache["order"]:
        fp = _footprint(pg, cam, u)
        if fp is None:
            parts.append(np.array([-1]))
            continue
        idx, _, rho = fp
        idx, rho = idx[~done[idx]], rho[~done[idx]]
        raw = params.weights[pg.index] * pg.ntilde * rho
        a = np.minimum(raw, ALPHA_MAX)
        use = a >= ALPHA_MIN
        parts += [np.array([pg.index]), idx, use.astype(int), (raw >= ALPHA_MAX).astype(int)]
        T[idx[use]] *= 1.0 - a[use]
        done[idx[use]] |= T[idx[use]] < T_STOP
    return np.concatenate(parts).astype(np.int64).tobytes()


# ---------------------------------------------------------------------------
# backward


@dataclass
class Gradients:
    means: np.ndarray
    covs: np.ndarray
    colors: np.ndarray
    weights: np.ndarray


def render_backward(out: RenderOutput, dL_dC, dL_dD=None) -> Gradients:
    """Gradients of a loss with image gradients ``dL_dC`` (H, W, 3) and ``dL_dD`` (H, W).

    Gaussians are visited back to front, reconstructing the transmittance in
    front of each one from the stored final transmittance.
    """
    if out.cache is None:
        raise RasterError("render output carries no forward cache")
    params: GaussianParams = out.cache["params"]
    cam: Camera = out.cache["camera"]
    order = out.cache["order"]
    P = cam.W * cam.H
    gC = np.asarray(dL_dC, dtype=float).reshape(P, 3)
    gD = np.zeros(P) if dL_dD is None else np.asarray(dL_dD, dtype=float).reshape(P)
    n = len(params)
    g_mu, g_cov = np.zeros((n, 3)), np.zeros((n, 3, 3))
    g_col, g_w = np.zeros((n, 3)), np.zeros(n)
    u = cam.pixel_coords()

    # replay the forward gating to know which pixels each Gaussian touched
    T = np.ones(P)
    done = np.zeros(P, dtype=bool)
    touched = []
    for pg in order:
        fp = _footprint(pg, cam, u)
        if fp is None:
            touched.append(None)
            continue
        idx, du, rho = fp
        live = ~done[idx]
        idx, du, rho = idx[live], du[live], rho[live]
        raw = params.weights[pg.index] * pg.ntilde * rho
        a = np.minimum(raw, ALPHA_MAX)
        use = a >= ALPHA_MIN
        idx, du, rho, a, raw = idx[use], du[use], rho[use], a[use], raw[use]
        T[idx] *= 1.0 - a
        done[idx] |= T[idx] < T_STOP
        touched.append((idx, du, rho, a, raw < ALPHA_MAX))

    T = out.cache["T_final"].copy()
    Cbar = np.zeros((P, 3))
    Dbar = np.zeros(P)
    R = cam.R_cw
    for pg, tch in zip(reversed(order), reversed(touched)):
        if tch is None:
            continue
        idx, du, rho, a, free = tch
        k = pg.index
        T_k = T[idx] / (1.0 - a)  # transmittance in front of Gaussian k
        T[idx] = T_k
        c_k = params.colors[k]
        g_col[k] += np.sum((a * T_k)[:, None] * gC[idx], axis=0)
        g_depth = np.sum(a * T_k * gD[idx])
        dL_da = (np.sum(gC[idx] * (c_k[None] * T_k[:, None] - Cbar[idx] / (1.0 - a)[:, None]), axis=1)
                 + gD[idx] * (pg.depth * T_k - Dbar[idx] / (1.0 - a)))
        Cbar[idx] += (a * T_k)[:, None] * c_k
        Dbar[idx] += a * pg.depth * T_k
        dL_da = np.where(free, dL_da, 0.0)

        w = params.weights[k]
        g_w[k] += np.sum(dL_da * pg.ntilde * rho)
        dL_dn = np.sum(dL_da * w * rho)
        dL_drho = dL_da * w * pg.ntilde
        # rho = exp(-du^T S du / 2), du = u - mu'
        Sdu = du @ pg.conic.T
        dL_dmean2 = np.sum((dL_drho * rho)[:, None] * Sdu, axis=0)
        dL_dS = -0.5 * np.einsum("p,pi,pj->ij", dL_drho * rho, du, du)
        # S = inv(Sigma2), ntilde = det J / (2 pi sqrt(det Sigma2))
        Sinv_T = pg.conic.T
        dL_dcov2 = -Sinv_T @ dL_dS @ Sinv_T - 0.5 * dL_dn * pg.ntilde * Sinv_T
        G3 = np.zeros((3, 3))
        G3[:2, :2] = dL_dcov2
        Tm = pg.J @ R
        Sig = params.covs[k]
        g_cov[k] += Tm.T @ G3 @ Tm
        dL_dT = G3 @ Tm @ Sig.T + G3.T @ Tm @ Sig
        dL_dJ = dL_dT @ R.T + dL_dn * pg.ntilde * np.linalg.inv(pg.J).T
        dJ = _jacobian_derivative(cam, pg.mean_cam)
        dL_dmt = np.einsum("ab,abc->c", dL_dJ, dJ) + pg.J[:2].T @ dL_dmean2
        dL_dmt[2] += g_depth
        g_mu[k] += R.T @ dL_dmt
    return Gradients(g_mu, g_cov, g_col, g_w)


# ---------------------------------------------------------------------------
# volume-rendering oracle


def render_oracle(params: GaussianParams | SplatScene, cam: Camera, n_steps: int = 4000, chunk: int = 2048):
    """Ray-marched color and depth of the normalized density field.

    Each Gaussian restricted to a ray is a 1-D Gaussian in the ray parameter,
    so its cumulative optical depth is an ``erf``; the outer compositing
    integral is then a trapezoid rule in the ray parameter.  Depth is
    reported as the camera-frame ``z`` of the stopping point.
    """
    if isinstance(params, SplatScene):
        params = GaussianParams.from_scene(params)
    origin, dirs, d_cam = cam.pixel_rays()
    P = len(dirs)
    n = len(params)
    C = np.zeros((P, 3))
    D = np.zeros(P)
    Tf = np.ones(P)
    if n == 0:
        return C.reshape(cam.H, cam.W, 3), D.reshape(cam.H, cam.W), Tf.reshape(cam.H, cam.W)
    S = np.linalg.inv(params.covs)
    norm = params.weights / np.sqrt((2 * np.pi) ** 3 * np.linalg.det(params.covs))
    rel = params.means - origin
    s_near = cam.z_near
    s_far = cam.z_far / d_cam[:, 2].min()
    for p0 in range(0, P, chunk):
        dd = dirs[p0:p0 + chunk]
        a = np.einsum("pi,kij,pj->pk", dd, S, dd)  # quadratic coefficient
        b = np.einsum("pi,kij,kj->pk", dd, S, rel)
        c = np.einsum("ki,kij,kj->k", rel, S, rel)
        s0 = b / a
        amp = norm[None] * np.exp(-0.5 * (c[None] - b**2 / a))
        sd = 1.0 / np.sqrt(a)
        lo = np.clip((s0 - 8 * sd).min(axis=1), s_near, s_far)
        hi = np.clip((s0 + 8 * sd).max(axis=1), s_near, s_far)
        ts = lo[:, None] + (hi - lo)[:, None] * np.linspace(0, 1, n_steps)[None]
        # cumulative optical depth from s_near
        z = (ts[:, :, None] - s0[:, None, :]) / (np.sqrt(2) * sd[:, None, :])
        z0 = (s_near - s0) / (np.sqrt(2) * sd)
        cum = np.sum(amp[:, None, :] * sd[:, None, :] * np.sqrt(np.pi / 2) * (erf(z) - erf(z0)[:, None, :]), axis=2)
        sig_k = amp[:, None, :] * np.exp(-0.5 * ((ts[:, :, None] - s0[:, None, :]) / sd[:, None, :]) ** 2)
        Tr = np.exp(-cum)
        wts = sig_k * Tr[:, :, None]
        C[p0:p0 + chunk] = np.trapezoid(np.einsum("psk,kc->psc", wts, params.colors), ts[:, :, None], axis=1)
        zc = ts * d_cam[p0:p0 + chunk, 2][:, None]
        D[p0:p0 + chunk] = np.trapezoid(zc * wts.sum(axis=2), ts, axis=1)
        Tf[p0:p0 + chunk] = Tr[:, -1]
    return C.reshape(cam.H, cam.W, 3), D.reshape(cam.H, cam.W), Tf.reshape(cam.H, cam.W)


# ---------------------------------------------------------------------------
# fitting


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _rot_to_quat(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(R).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def _quat_rot_grad(q: np.ndarray) -> np.ndarray:
    """dR_ij/dq_a for unit quaternions, shape (n, 3, 3, 4).  The map is quadratic in q."""
    E = np.eye(4)
    out = np.zeros(q.shape[:-1] + (3, 3, 4))
    for a in range(4):
        # derivative of a quadratic form: R(q + e) - R(q - e) = 2 (dR/dq . e)
        out[..., a] = 0.5 * (_quat_to_rot(q + E[a]) - _quat_to_rot(q - E[a]))
    return out


@dataclass
class FitResult:
    params: GaussianParams
    losses: list


DEFAULT_LR = {"means": 3e-2, "rot": 1e-2, "logeig": 1e-1, "colors": 1.0, "weights": 1e-6}


def fit_smoke_test(targets, init: GaussianParams | SplatScene, steps: int = 200, lr=None,
                   eig_floor: float = 1e-8, weight_floor: float = 1e-6) -> FitResult:
    """Plain gradient descent on mean squared color error.

    Parameters
    ----------
    targets : list of (Camera, image) pairs
    init : starting Gaussians
    lr : float or dict with keys ``means``, ``rot``, ``logeig``, ``colors``, ``weights``;
        defaults to :data:`DEFAULT_LR`

    Covariances are parameterized by a unit quaternion and log-eigenvalues
    (floored at ``eig_floor``); weights are floored at ``weight_floor``.
    Raises :class:`FitDivergedError` once the loss exceeds ten times its
    initial value.
    """
    if not targets:
        raise ValueError("need at least one target view")
    if isinstance(init, SplatScene):
        init = GaussianParams.from_scene(init)
    if lr is None:
        lr = DEFAULT_LR
    rates = dict.fromkeys(DEFAULT_LR, lr) if np.isscalar(lr) else {**DEFAULT_LR, **lr}
    lam, V = np.linalg.eigh(0.5 * (init.covs + np.swapaxes(init.covs, 1, 2)))
    V = V * np.where(np.linalg.det(V) < 0, -1.0, 1.0)[:, None, None]
    quat = _rot_to_quat(V)
    logeig = np.log(np.maximum(lam, eig_floor))
    means, colors, weights = init.means.copy(), init.colors.copy(), init.weights.copy()

    def assemble():
        Rq = _quat_to_rot(quat)
        cov = Rq @ (np.exp(logeig)[:, :, None] * np.swapaxes(Rq, 1, 2))
        return GaussianParams(means, cov, colors, weights), Rq

    losses = []
    for step in range(steps + 1):
        p, Rq = assemble()
        loss = 0.0
        g = Gradients(np.zeros_like(means), np.zeros_like(p.covs), np.zeros_like(colors), np.zeros_like(weights))
        npx = sum(cam.W * cam.H * 3 for cam, _ in targets)
        for cam, img in targets:
            out = render(p, cam)
            r = out.color - img
            loss += float(np.sum(r**2)) / npx
            gi = render_backward(out, 2 * r / npx)
            for name in ("means", "covs", "colors", "weights"):
                setattr(g, name, getattr(g, name) + getattr(gi, name))
        losses.append(loss)
        if loss > 10 * losses[0] and losses[0] > 0:
            raise FitDivergedError(f"loss {loss:.3g} exceeds ten times the initial {losses[0]:.3g}")
        if step == steps:
            break
        Gs = 0.5 * (g.covs + np.swapaxes(g.covs, 1, 2))
        lam_now = np.exp(logeig)
        g_lam = np.einsum("nia,nij,nja->na", Rq, Gs, Rq)
        g_R = 2 * Gs @ Rq * lam_now[:, None, :]
        g_q = np.einsum("nij,nija->na", g_R, _quat_rot_grad(quat))
        means = means - rates["means"] * g.means
        colors = colors - rates["colors"] * g.colors
        weights = np.maximum(weights - rates["weights"] * g.weights, weight_floor)
        logeig = np.maximum(logeig - rates["logeig"] * g_lam * lam_now, np.log(eig_floor))
        quat = quat - rates["rot"] * g_q
        quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return FitResult(assemble()[0], losses)


# ---------------------------------------------------------------------------
# image files


def write_pfm(path, image) -> None:
    """Little-endian portable float map (grey for 2-D, color for 3-channel input)."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 3)
    kind, (w, h), scale = lines[0], map(int, lines[1].split()), float(lines[2])
    dtype = "<f4" if scale < 0 else ">f4"
    ch = 3 if kind == b"PF" else 1
    img = np.frombuffer(lines[3], dtype=dtype).reshape((h, w, ch) if ch == 3 else (h, w))
    return img[::-1].astype(float)


def write_ppm(path, image, comment: str | None = None) -> None:
    """Binary 8-bit PPM of a color image with values in [0, 1], with an optional header comment."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]
    px = np.round(img * 255).astype(np.uint8)
    note = "".join(f"# {line}\n" for line in comment.splitlines()) if comment else ""
    Path(path).write_bytes(f"P6\n{note}{w} {h}\n255\n".encode("utf-8") + px.tobytes())


# ---------------------------------------------------------------------------
# finite-difference check


def random_params(rng: np.random.Generator, n: int = 4, depth=(0.9, 1.3), spread: float = 0.15,
                  std=(0.03, 0.08), weight=(0.005, 0.02)) -> GaussianParams:
    """Random anisotropic Gaussians in front of the identity camera."""
    from scipy.spatial.transform import Rotation

    means = rng.uniform([-spread, -spread, depth[0]], [spread, spread, depth[1]], (n, 3))
    R = Rotation.random(n, random_state=int(rng.integers(2**31))).as_matrix().reshape(n, 3, 3)
    lam = rng.uniform(*std, (n, 3)) ** 2
    covs = R @ (lam[:, :, None] * np.swapaxes(R, 1, 2))
    return GaussianParams(means, covs, rng.uniform(0, 1, (n, 3)), rng.uniform(*weight, n))


def gradient_check(params: GaussianParams, cam: Camera, seed: int = 0, rel_step: float = 1e-5) -> dict:
    """Compare :func:`render_backward` with central differences for every parameter.

    The loss is a random linear functional of color and depth.  Steps are
    scaled per parameter: ``rel_step`` for means and colors, ``rel_step``
    times the mean eigenvalue for covariance entries and ``rel_step * w`` for
    weights.  Probes whose two evaluations take different branches of a
    clamp, skip or cutoff rule are reported as ``skipped``.
    """
    rng = np.random.default_rng(seed)
    gC = rng.normal(size=(cam.H, cam.W, 3))
    gD = rng.normal(size=(cam.H, cam.W))

    def loss(p):
        o = render(p, cam)
        return float(np.sum(o.color * gC) + np.sum(o.depth * gD)), o

    _, out = loss(params)
    g = render_backward(out, gC, gD)
    errors, skipped = [], 0
    worst = None
    for k in range(len(params)):
        probes = [("means", (k, i), rel_step) for i in range(3)]
        probes += [("covs", (k, i, j), rel_step * np.trace(params.covs[k]) / 3) for i in range(3) for j in range(i, 3)]
        probes += [("colors", (k, i), rel_step) for i in range(3)]
        probes += [("weights", (k,), rel_step * params.weights[k])]
        for name, ix, h in probes:
            vals, sigs = [], []
            for sgn in (1.0, -1.0):
                q = params.copy()
                arr = getattr(q, name)
                arr[ix] += sgn * h
                if name == "covs" and ix[1] != ix[2]:
                    arr[ix[0], ix[2], ix[1]] += sgn * h
                v, o = loss(q)
                vals.append(v)
                sigs.append(gate_signature(o))
            if sigs[0] != sigs[1]:
                skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2 * h)
            an = getattr(g, name)[ix]
            if name == "covs" and ix[1] != ix[2]:
                an = an + g.covs[ix[0], ix[2], ix[1]]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-9)
            errors.append(err)
            if worst is None or err > worst["rel_err"]:
                worst = {"param": name, "index": list(ix), "analytic": float(an), "fd": float(fd), "rel_err": float(err)}
    return {
        "n_probes": len(errors),
        "skipped": skipped,
        "max_rel_err": float(max(errors)) if errors else 0.0,
        "worst": worst,
    }
