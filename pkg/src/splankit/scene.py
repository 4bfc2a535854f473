"""Scenes made of weighted, normalized 3D Gaussians.

The density field is

    sigma(x) = sum_n w_n * G_n(x),

where each ``G_n`` is a properly normalized Gaussian density with covariance
``R_n diag(lambda_n) R_n^T``.  Weights carry units of m^2 so that ``sigma`` is
in m^-1 and optical depths along rays are dimensionless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.spatial import cKDTree
from scipy.special import erf

TWO_PI_CUBED = (2.0 * np.pi) ** 3
BINARY_MAGIC = b"NSPLAT01"
FORMAT_VERSION = 1
FIELDS_PER_COMPONENT = 19
EIGENVALUE_FLOOR = 1e-12


class SceneError(ValueError):
    """Base class for invalid scene data."""


class SceneFormatError(SceneError):
    """The scene file could not be parsed."""


class EigenvalueError(SceneError):
    """A covariance eigenvalue is not strictly positive."""


class RotationError(SceneError):
    """A covariance eigenbasis is not a proper rotation."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not converge within its depth limit."""


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    rotation: np.ndarray
    eigvals: np.ndarray
    color: np.ndarray = np.zeros(3)

    @property
    def covariance(self) -> np.ndarray:
        return self.rotation @ np.diag(self.eigvals) @ self.rotation.T

    @property
    def normalizer(self) -> float:
        return float((TWO_PI_CUBED * np.prod(self.eigvals)) ** -0.5)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("ray direction must be nonzero")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / n)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 16
    rtol: float = 1e-10
    max_depth: int = 20


def _check_rotations(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape[0] == 0:
        return
    err = np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max(axis=(1, 2))
    bad = np.flatnonzero(err >= tol)
    if bad.size:
        raise RotationError(f"component {bad[0]} rotation is not orthonormal (err {err[bad[0]]:.3g})")
    det = np.linalg.det(R)
    bad = np.flatnonzero(det < 0)
    if bad.size:
        raise RotationError(f"component {bad[0]} rotation has det {det[bad[0]]:+.3f}")


class SplatScene:
    """Immutable collection of normalized Gaussian components.

    Parameters
    ----------
    weights : (n,) array
        Nonnegative weights, m^2.
    means : (n, 3) array
    rotations : (n, 3, 3) array
        Columns are the covariance eigenvectors; must be proper rotations.
    eigvals : (n, 3) array
        Strictly positive covariance eigenvalues, m^2.
    colors : (n, 3) array, optional
        RGB in [0, 1]; only the rasterizer uses it.
    support : float
        Support multiple (in standard deviations) of the axis-aligned boxes
        used by the spatial index.
    """

    def __init__(self, weights, means, rotations, eigvals, colors=None, support: float = 8.0):
        w = np.asarray(weights, dtype=float).reshape(-1)
        n = w.size
        mu = np.asarray(means, dtype=float).reshape(n, 3)
        R = np.asarray(rotations, dtype=float).reshape(n, 3, 3)
        lam = np.asarray(eigvals, dtype=float).reshape(n, 3)
        c = np.zeros((n, 3)) if colors is None else np.asarray(colors, dtype=float).reshape(n, 3)
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise EigenvalueError("covariance eigenvalues must be finite and > 0")
        if np.any(w < 0) or np.any(~np.isfinite(w)):
            raise SceneError("weights must be finite and >= 0")
        if np.any(~np.isfinite(mu)):
            raise SceneError("means must be finite")
        _check_rotations(R)
        for a in (w, mu, R, lam, c):
            a.setflags(write=False)
        self.weights, self.means, self.rotations, self.eigvals, self.colors = w, mu, R, lam, c
        self.support = float(support)
        self._tree = None

    # construction helpers -------------------------------------------------
    @classmethod
    def empty(cls) -> "SplatScene":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)))

    @classmethod
    def from_covariances(cls, weights, means, covariances, colors=None, **kw) -> "SplatScene":
        """Build a scene from raw symmetric covariances (eigenvalues floored at 1e-12 m^2)."""
        cov = np.asarray(covariances, dtype=float).reshape(-1, 3, 3)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        lam, R = np.linalg.eigh(cov)
        lam = np.maximum(lam, EIGENVALUE_FLOOR)
        flip = np.linalg.det(R) < 0
        R[flip, :, 2] *= -1.0
        return cls(weights, means, R, lam, colors, **kw)

    @classmethod
    def from_components(cls, comps, **kw) -> "SplatScene":
        comps = list(comps)
        if not comps:
            return cls.empty()
        return cls(
            [c.weight for c in comps],
            [c.mean for c in comps],
            [c.rotation for c in comps],
            [c.eigvals for c in comps],
            [c.color for c in comps],
            **kw,
        )

    def replace(self, **fields) -> "SplatScene":
        args = dict(
            weights=self.weights,
            means=self.means,
            rotations=self.rotations,
            eigvals=self.eigvals,
            colors=self.colors,
            support=self.support,
        )
        args.update(fields)
        return SplatScene(**args)

    def subset(self, idx) -> "SplatScene":
        idx = np.asarray(idx)
        return SplatScene(
            self.weights[idx], self.means[idx], self.rotations[idx], self.eigvals[idx], self.colors[idx], self.support
        )

    # basic properties -----------------------------------------------------
    def __len__(self) -> int:
        return self.weights.size

    def __getitem__(self, i) -> GaussianComponent:
        return GaussianComponent(
            float(self.weights[i]), self.means[i], self.rotations[i], self.eigvals[i], self.colors[i]
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def normalizers(self) -> np.ndarray:
        return (TWO_PI_CUBED * np.prod(self.eigvals, axis=1)) ** -0.5

    @property
    def covariances(self) -> np.ndarray:
        return np.einsum("nij,nj,nkj->nik", self.rotations, self.eigvals, self.rotations)

    @property
    def precisions(self) -> np.ndarray:
        return np.einsum("nij,nj,nkj->nik", self.rotations, 1.0 / self.eigvals, self.rotations)

    @property
    def max_std(self) -> float:
        return float(np.sqrt(self.eigvals.max())) if len(self) else 0.0

    def bounding_boxes(self, support: float | None = None):
        """Axis-aligned boxes ``mean +/- support * sqrt(diag(Sigma))``."""
        m = self.support if support is None else support
        half = m * np.sqrt(np.einsum("nij,nj->ni", self.rotations**2, self.eigvals))
        return self.means - half, self.means + half

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.means if len(self) else np.zeros((0, 3)))
        return self._tree


def _mahalanobis_sq(scene: SplatScene, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
    d = x - scene.means[idx]
    local = np.einsum("pji,pj->pi", scene.rotations[idx], d)
    return np.einsum("pi,pi->p", local * local, 1.0 / scene.eigvals[idx])


def density(scene: SplatScene, x, use_index: bool = True, chunk: int = 1 << 15) -> np.ndarray | float:
    """Evaluate sigma at one point ``(3,)`` or many points ``(N, 3)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(-1, 3)
    out = np.zeros(X.shape[0])
    n = len(scene)
    if n == 0 or X.shape[0] == 0:
        return float(out[0]) if single else out
    if not use_index:
        out = density_bruteforce(scene, X)
        return float(out[0]) if single else out
    amp = scene.weights * scene.normalizers
    lo, hi = scene.bounding_boxes()
    reach = float(np.max(np.linalg.norm(hi - scene.means, axis=1)))
    tree = scene.tree
    for s0 in range(0, X.shape[0], chunk):
        Xc = X[s0 : s0 + chunk]
        cand = tree.query_ball_point(Xc, r=reach)
        counts = np.fromiter((len(c) for c in cand), dtype=np.intp, count=len(cand))
        if not counts.sum():
            continue
        pts = np.repeat(np.arange(Xc.shape[0]), counts)
        comp = np.fromiter((j for c in cand for j in c), dtype=np.intp, count=int(counts.sum()))
        inside = np.all((Xc[pts] >= lo[comp]) & (Xc[pts] <= hi[comp]), axis=1)
        pts, comp = pts[inside], comp[inside]
        vals = amp[comp] * np.exp(-0.5 * _mahalanobis_sq(scene, comp, Xc[pts]))
        out[s0 : s0 + chunk] = np.bincount(pts, weights=vals, minlength=Xc.shape[0])
    return float(out[0]) if single else out


def density_bruteforce(scene: SplatScene, X: np.ndarray, chunk: int = 1 << 20) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    out = np.zeros(X.shape[0])
    n = len(scene)
    if n == 0:
        return out
    # whitening maps: z = A_n (x - mu_n), A_n = diag(lambda^-1/2) R_n^T
    A = scene.rotations.transpose(0, 2, 1) / np.sqrt(scene.eigvals)[:, :, None]
    amp = scene.weights * scene.normalizers
    step = max(1, chunk // n)
    for s in range(0, X.shape[0], step):
        d = X[s : s + step, None, :] - scene.means[None]
        z = np.einsum("nij,pnj->pni", A, d)
        out[s : s + step] = np.exp(-0.5 * np.einsum("pni,pni->pn", z, z)) @ amp
    return out


def ray_depth_closed_form(scene: SplatScene, origins, directions, a, b) -> np.ndarray:
    """Exact optical depth ``int_a^b sigma(o + t v) dt`` for a batch of rays.

    Each Gaussian restricted to a line is a 1D Gaussian in ``t``, so the
    segment integral is a difference of error functions.  ``origins`` and
    ``directions`` broadcast to ``(N, 3)``; ``a`` and ``b`` broadcast to
    ``(N,)``.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    v = np.atleast_2d(np.asarray(directions, dtype=float))
    o, v = np.broadcast_arrays(o, v)
    N = o.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=float), (N,))
    b = np.broadcast_to(np.asarray(b, dtype=float), (N,))
    out = np.zeros(N)
    if len(scene) == 0:
        return out
    amp = scene.weights * scene.normalizers
    # work in each component's eigenframe
    Rt = scene.rotations.transpose(0, 2, 1)
    inv_lam = 1.0 / scene.eigvals
    step = max(1, (1 << 20) // len(scene))
    for s in range(0, N, step):
        vv = np.einsum("nij,pj->pni", Rt, v[s : s + step])
        dd = np.einsum("nij,pnj->pni", Rt, scene.means[None] - o[s : s + step, None, :])
        A = np.einsum("pni,ni->pn", vv * vv, inv_lam)
        B = np.einsum("pni,ni->pn", vv * dd, inv_lam)
        C = np.einsum("pni,ni->pn", dd * dd, inv_lam)
        t0 = B / A
        k = np.sqrt(0.5 * A)
        pref = np.exp(-0.5 * (C - B * t0)) * np.sqrt(0.5 * np.pi / A)
        seg = erf(k * (b[s : s + step, None] - t0)) - erf(k * (a[s : s + step, None] - t0))
        out[s : s + step] = (pref * seg) @ amp
    return out


def _gl_rule(n: int):
    x, w = leggauss(n)
    return x, w


def _adaptive_gl(f, a: float, b: float, spec: QuadratureSpec, x, w) -> float:
    def est(lo, hi):
        half = 0.5 * (hi - lo)
        return half * float(w @ f(0.5 * (lo + hi) + half * x))

    total = 0.0
    stack = [(a, b, est(a, b), 0)]
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = est(lo, mid), est(mid, hi)
        if abs(left + right - whole) <= spec.rtol * abs(left + right) or (left + right == whole):
            total += left + right
            continue
        if depth + 1 > spec.max_depth:
            raise QuadratureError(f"adaptive quadrature exceeded depth {spec.max_depth} on [{lo}, {hi}]")
        stack.append((lo, mid, left, depth + 1))
        stack.append((mid, hi, right, depth + 1))
    return total


def optical_depth(scene: SplatScene, ray: Ray, a: float, b: float, quadrature: QuadratureSpec | None = None) -> float:
    """Line integral of sigma over ``[a, b]`` by adaptive composite Gauss-Legendre.

    The interval is first split at each component's closest-approach point and
    at the edges of its support window along the ray, so that narrow Gaussians
    cannot fall between quadrature nodes.
    """
    spec = quadrature or QuadratureSpec()
    if spec.nodes < 2:
        raise ValueError("quadrature needs at least 2 nodes")
    if a > b:
        raise ValueError("require a <= b")
    if a == b or len(scene) == 0:
        return 0.0
    o, v = ray.origin, ray.direction
    P = scene.precisions
    vPv = np.einsum("i,nij,j->n", v, P, v)
    t0 = np.einsum("i,nij,nj->n", v, P, scene.means - o) / vPv
    half = scene.support / np.sqrt(vPv)
    # skip components whose support window never meets the segment
    dmin = _mahalanobis_sq(scene, np.arange(len(scene)), o + np.outer(t0, v))
    keep = (dmin <= scene.support**2) & (t0 + half >= a) & (t0 - half <= b)
    if not np.any(keep):
        return 0.0
    sub = scene.subset(np.flatnonzero(keep))
    brk = np.concatenate([[a, b], t0[keep], t0[keep] - half[keep], t0[keep] + half[keep]])
    brk = np.unique(np.clip(brk, a, b))
    x, w = _gl_rule(spec.nodes)

    def f(t):
        return density(sub, o + np.outer(t, v), use_index=False)

    return float(sum(_adaptive_gl(f, lo, hi, spec, x, w) for lo, hi in zip(brk[:-1], brk[1:]) if hi > lo))


def transmittance(scene: SplatScene, ray: Ray, a: float, b: float, quadrature: QuadratureSpec | None = None) -> float:
    """``exp(-int_a^b sigma(ray(t)) dt)``."""
    return float(np.exp(-optical_depth(scene, ray, a, b, quadrature)))


def apply_world_lowpass(scene: SplatScene, s2: float) -> SplatScene:
    """Convolve every component with an isotropic Gaussian of variance ``s2`` (m^2).

    ``R diag(lam) R^T + s2 I = R diag(lam + s2) R^T``, so the eigenbasis is
    kept and only the eigenvalues shift.  Weights are unchanged.
    """
    if s2 < 0:
        raise ValueError("low-pass variance must be >= 0")
    return scene.replace(eigvals=scene.eigvals + s2)


# ---------------------------------------------------------------------------
# file formats


def _component_rows(scene: SplatScene) -> np.ndarray:
    n = len(scene)
    return np.concatenate(
        [
            scene.weights[:, None],
            scene.means,
            scene.eigvals,
            scene.rotations.reshape(n, 9),
            scene.colors,
        ],
        axis=1,
    )


def _scene_from_rows(rows: np.ndarray) -> SplatScene:
    rows = np.asarray(rows, dtype=float).reshape(-1, FIELDS_PER_COMPONENT)
    if rows.shape[0] == 0:
        return SplatScene.empty()
    if np.any(rows[:, 4:7] <= 0):
        raise EigenvalueError("non-positive eigenvalue in scene file")
    return SplatScene(
        rows[:, 0], rows[:, 1:4], rows[:, 7:16].reshape(-1, 3, 3), rows[:, 4:7], rows[:, 16:19]
    )


def save_scene(scene: SplatScene, path, binary: bool | None = None, comments: dict | None = None) -> None:
    """Write ``scene`` as structured text, or binary when ``binary`` (or a ``.bin`` suffix)."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    rows = _component_rows(scene)
    if binary:
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<Q", rows.shape[0]))
            fh.write(rows.astype("<f8").tobytes())
        return
    if not np.all(np.isfinite(rows)):
        raise SceneError("text scene files only hold finite values")
    header = {"format_version": FORMAT_VERSION, "count": int(rows.shape[0]), "units": "m"}
    lines = [json.dumps(header, sort_keys=True)]
    for key, val in (comments or {}).items():
        lines.append(f"# {key}: {json.dumps(val, sort_keys=True)}")
    lines.append("# w mx my mz l1 l2 l3 r00 r01 r02 r10 r11 r12 r20 r21 r22 r g b")
    lines.extend(" ".join(format(v, ".17g") for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scene(path) -> SplatScene:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(BINARY_MAGIC):
        body = raw[len(BINARY_MAGIC) :]
        if len(body) < 8:
            raise SceneFormatError("truncated binary scene header")
        (count,) = struct.unpack("<Q", body[:8])
        data = body[8:]
        if len(data) != count * FIELDS_PER_COMPONENT * 8:
            raise SceneFormatError("binary scene payload size does not match count")
        return _scene_from_rows(np.frombuffer(data, dtype="<f8").reshape(count, FIELDS_PER_COMPONENT))
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SceneFormatError("scene file is neither NSPLAT01 binary nor UTF-8 text") from exc
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise SceneFormatError("empty scene file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SceneFormatError("first line must be a JSON header") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene header {header!r}")
    if header.get("units") != "m":
        raise SceneFormatError("scene units must be 'm'")
    body = lines[1:]
    if len(body) != header.get("count"):
        raise SceneFormatError(f"header count {header.get('count')} but {len(body)} component rows")
    try:
        rows = np.array([[float(tok) for tok in ln.split()] for ln in body], dtype=float)
    except ValueError as exc:
        raise SceneFormatError(f"bad number in scene file: {exc}") from exc
    if body and rows.shape != (len(body), FIELDS_PER_COMPONENT):
        raise SceneFormatError(f"each component row needs {FIELDS_PER_COMPONENT} fields")
    return _scene_from_rows(rows)
