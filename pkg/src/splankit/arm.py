"""Serial revolute arm kinematics and its spherical forward occupancy.

Frames follow the chain

    p_1 = o_1,            R_1 = F_1 Rz(q_1),
    p_l = p_{l-1} + R_{l-1} o_l,   R_l = R_{l-1} F_l Rz(q_l),
    p_ee = p_n + R_n o_ee,

where ``o_l`` is the fixed offset of joint ``l`` in its parent frame and
``F_l`` the fixed rotation between consecutive joint frames.  Every joint
position carries a ball of radius ``r_j`` and the link between two joint
balls is their convex hull (a tapered capsule).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import sparse

from .polyzono import PolyZonotope, pz_add, pz_cos, pz_matmul, pz_mul, pz_sin
from .trajectory import InitialCondition, TrajectoryPZ, TrajParamSpace, build_trajectory_pz, traj_eval

log = logging.getLogger(__name__)

_A = np.diag([1.0, 1.0, 0.0])
_B = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
_EZ = np.diag([0.0, 0.0, 1.0])


def rot_z(q: float) -> np.ndarray:
    c, s = np.cos(q), np.sin(q)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis roll/pitch/yaw, ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class ArmModel:
    """Revolute chain description.

    Attributes
    ----------
    offsets : (n_q, 3) joint offsets in the parent frame, m
    rotations : (n_q, 3, 3) fixed rotations preceding each joint axis
    radii : (n_q + 1,) joint ball radii (last entry is the end-effector ball), m
    ee_offset : (3,) end-effector offset in the last joint frame, m
    q_limits, dq_limits : (n_q, 2) arrays; infinite entries mean unlimited
    """

    offsets: np.ndarray
    rotations: np.ndarray
    radii: np.ndarray
    ee_offset: np.ndarray
    q_limits: np.ndarray
    dq_limits: np.ndarray
    name: str = "arm"

    def __post_init__(self):
        n = np.asarray(self.offsets).shape[0]
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(n, 3))
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=float).reshape(n, 3, 3))
        object.__setattr__(self, "radii", np.asarray(self.radii, dtype=float).reshape(n + 1))
        object.__setattr__(self, "ee_offset", np.asarray(self.ee_offset, dtype=float).reshape(3))
        object.__setattr__(self, "q_limits", np.asarray(self.q_limits, dtype=float).reshape(n, 2))
        object.__setattr__(self, "dq_limits", np.asarray(self.dq_limits, dtype=float).reshape(n, 2))
        if np.any(self.radii <= 0):
            raise ValueError("joint ball radii must be > 0")
        if np.any(self.q_limits[:, 0] > self.q_limits[:, 1]) or np.any(self.dq_limits[:, 0] > self.dq_limits[:, 1]):
            raise ValueError("joint limits must be ordered")

    @property
    def n_q(self) -> int:
        return self.offsets.shape[0]

    @property
    def n_links(self) -> int:
        return self.n_q

    def within_limits(self, q, tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.q_limits[:, 0] - tol) and np.all(q <= self.q_limits[:, 1] + tol))


def _lim_to_json(a):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]


def _lim_from_json(rows):
    out = []
    for lo, hi in rows:
        out.append([-np.inf if lo is None else float(lo), np.inf if hi is None else float(hi)])
    return np.array(out, dtype=float)


def save_arm(arm: ArmModel, path) -> None:
    doc = {
        "format_version": 1,
        "name": arm.name,
        "n_q": arm.n_q,
        "joints": [
            {
                "offset": arm.offsets[j].tolist(),
                "rotation": arm.rotations[j].reshape(-1).tolist(),
                "radius": float(arm.radii[j]),
                "q_limits": _lim_to_json(arm.q_limits[j : j + 1])[0],
                "dq_limits": _lim_to_json(arm.dq_limits[j : j + 1])[0],
            }
            for j in range(arm.n_q)
        ],
        "end_effector": {"offset": arm.ee_offset.tolist(), "radius": float(arm.radii[-1])},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def arm_from_dict(doc: dict) -> ArmModel:
    try:
        joints = doc["joints"]
        if doc.get("n_q", len(joints)) != len(joints):
            raise ValueError("n_q does not match the joint list")
        ee = doc["end_effector"]
        return ArmModel(
            offsets=[j["offset"] for j in joints],
            rotations=[j["rotation"] for j in joints],
            radii=[j["radius"] for j in joints] + [ee["radius"]],
            ee_offset=ee["offset"],
            q_limits=_lim_from_json([j["q_limits"] for j in joints]),
            dq_limits=_lim_from_json([j["dq_limits"] for j in joints]),
            name=doc.get("name", "arm"),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed arm description: {exc}") from exc


def load_arm(path=None) -> ArmModel:
    """Load an arm file; ``None`` gives the bundled 7-joint arm."""
    if path is None:
        text = resources.files("splankit").joinpath("data/kinova_like.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return arm_from_dict(json.loads(text))


def default_arm() -> ArmModel:
    return load_arm(None)


# ---------------------------------------------------------------------------
# point kinematics


def fk_point(arm: ArmModel, q):
    """Joint frames for configuration ``q``.

    Returns
    -------
    rotations : (n_q, 3, 3)
    positions : (n_q + 1, 3), the last row being the end effector
    """
    q = np.asarray(q, dtype=float).reshape(arm.n_q)
    if not arm.within_limits(q):
        warnings.warn("configuration outside joint limits", RuntimeWarning, stacklevel=2)
    Rs = np.empty((arm.n_q, 3, 3))
    ps = np.empty((arm.n_q + 1, 3))
    R = np.eye(3)
    p = np.zeros(3)
    for j in range(arm.n_q):
        p = p + R @ arm.offsets[j]
        R = R @ arm.rotations[j] @ rot_z(q[j])
        Rs[j], ps[j] = R, p
    ps[-1] = p + R @ arm.ee_offset
    return Rs, ps


def joint_positions(arm: ArmModel, Q) -> np.ndarray:
    """Vectorized joint-ball centers for a batch of configurations ``(N, n_q) -> (N, n_q + 1, 3)``."""
    return fk_batch(arm, Q)[1]


# ---------------------------------------------------------------------------
# polynomial-zonotope kinematics


def rot_z_pz(q: PolyZonotope, order: int = 4) -> PolyZonotope:
    c = pz_cos(q, order)
    s = pz_sin(q, order)
    return pz_add(pz_mul(c, _A), pz_mul(s, _B)) + _EZ


def fk_pz(arm: ArmModel, angles: list, order: int = 4):
    """Rotation and position PZs of every joint for per-joint angle PZs.

    Returns
    -------
    rotations : list of (3, 3) PZs, length n_q
    positions : list of (3,) PZs, length n_q + 1 (end effector last)
    """
    R: PolyZonotope | np.ndarray = np.eye(3)
    p: PolyZonotope | np.ndarray = PolyZonotope(np.zeros(3))
    Rs, ps = [], []
    for j in range(arm.n_q):
        step = pz_matmul(R, arm.offsets[j]) if isinstance(R, PolyZonotope) else R @ arm.offsets[j]
        p = pz_add(p, step) if isinstance(step, PolyZonotope) else p + step
        local = pz_matmul(arm.rotations[j], rot_z_pz(angles[j], order))
        R = pz_matmul(R, local)
        Rs.append(R)
        ps.append(p)
    ps.append(pz_add(p, pz_matmul(R, arm.ee_offset)))
    return Rs, ps


def fold_radius(pz: PolyZonotope) -> tuple[np.ndarray, float]:
    """Shift and radius of a ball containing a vector PZ centered at the origin.

    Even monomials range over [0, 1], so they shift the center by ``g/2`` and
    contribute ``|g|/2``.  The radius is the smaller of the box-diagonal bound
    and the sum of generator norms.
    """
    if pz.n_generators == 0:
        return pz.center.copy(), float(np.linalg.norm(pz.rem))
    G = pz.coeffs
    even = np.all(pz.expmat % 2 == 0, axis=1)
    shift = pz.center + 0.5 * G[even].sum(axis=0)
    half = np.where(even[:, None], 0.5, 1.0) * G
    box = np.abs(half).sum(axis=0) + pz.rem
    r = min(float(np.linalg.norm(box)), float(np.linalg.norm(half, axis=1).sum() + np.linalg.norm(pz.rem)))
    return shift, r


@dataclass
class JointBall:
    center: PolyZonotope  # over k indeterminates only
    radius: float
    fold: float
    joint: int
    interval: int


def joint_balls(arm: ArmModel, positions: list, k_ids, interval: int = 0) -> list[JointBall]:
    """Balls for each joint position PZ: sliceable k-part as center, the rest folded into the radius."""
    out = []
    for j, p in enumerate(positions):
        kpart, rest = p.split(k_ids)
        shift, fold = fold_radius(rest)
        center = kpart + shift
        out.append(JointBall(center, float(arm.radii[j] + fold), fold, j, interval))
    return out


@dataclass
class SfoBall:
    center: PolyZonotope
    radius: float
    link: int
    interval: int
    index: int


def sfo_radii(r0: float, r1: float, length: float, n_s: int) -> np.ndarray:
    """Radii of ``n_s`` balls covering the tapered capsule of two joint balls."""
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    edges = np.arange(n_s + 1) / n_s
    interp = (1 - edges) * r0 + edges * r1
    return np.maximum(interp[:-1], interp[1:]) + length / (2 * n_s)


def sfo_taus(n_s: int) -> np.ndarray:
    return (np.arange(1, n_s + 1) - 0.5) / n_s


def _length_bound(a: PolyZonotope, b: PolyZonotope) -> float:
    box = (b - a).bound()
    return float(np.linalg.norm(np.maximum(np.abs(box.lower), np.abs(box.upper))))


def sfo_build(arm: ArmModel, balls: list[JointBall], n_s: int = 5) -> list[SfoBall]:
    """Balls covering each link's tapered capsule for one time subinterval."""
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    out = []
    taus = sfo_taus(n_s)
    for j in range(len(balls) - 1):
        a, b = balls[j], balls[j + 1]
        L = _length_bound(a.center, b.center)
        radii = sfo_radii(a.radius, b.radius, L, n_s)
        for m, (tau, r) in enumerate(zip(taus, radii)):
            c = pz_add(a.center * (1.0 - tau), b.center * tau)
            out.append(SfoBall(c, float(r), j, a.interval, m))
    return out


# ---------------------------------------------------------------------------
# fast evaluation of sliced centers and their k-Jacobians


class CenterPolynomials:
    """Stacked k-polynomials for a set of vector centers.

    Each center is ``c0 + sum_r g_r prod_d x_d^{E_rd}`` with ``x = k / eta``.
    Evaluation computes all monomials and their derivatives at once and sums
    them per owner with a sparse matrix.
    """

    def __init__(self, centers: list[PolyZonotope], k_ids, eta):
        k_ids = np.asarray(k_ids, dtype=np.int64)
        self.eta = np.asarray(eta, dtype=float)
        self.n = len(centers)
        self.c0 = np.array([c.center for c in centers]).reshape(self.n, 3)
        G, E, own = [], [], []
        for b, c in enumerate(centers):
            if c.n_generators == 0:
                continue
            if not np.all(np.isin(c.ids, k_ids)):
                raise ValueError("center polynomial depends on non-k indeterminates")
            Eb = np.zeros((c.n_generators, k_ids.size), dtype=np.int64)
            Eb[:, [int(np.flatnonzero(k_ids == i)[0]) for i in c.ids]] = c.expmat
            G.append(c.coeffs)
            E.append(Eb)
            own.append(np.full(c.n_generators, b))
        self.n_terms = int(sum(len(o) for o in own))
        d = k_ids.size
        self.G = np.concatenate(G) if G else np.zeros((0, 3))
        self.E = np.concatenate(E) if E else np.zeros((0, d), dtype=np.int64)
        owner = np.concatenate(own) if own else np.zeros(0, dtype=np.int64)
        self.owner = sparse.csr_matrix((np.ones(self.n_terms), (owner, np.arange(self.n_terms))), shape=(self.n, self.n_terms))
        self.d = d
        self.max_exp = int(self.E.max(initial=0))

    def evaluate(self, k, jac: bool = True):
        """Centers ``(n, 3)`` and, if requested, Jacobians ``(n, 3, n_q)`` with respect to ``k``."""
        k = np.asarray(k, dtype=float)
        x = np.divide(k, self.eta, out=np.zeros_like(k), where=self.eta > 0)
        if self.n_terms == 0:
            return (self.c0.copy(), np.zeros((self.n, 3, self.d))) if jac else self.c0.copy()
        pw = x[None, :] ** np.arange(self.max_exp + 1)[:, None]  # (e, d)
        cols = np.arange(self.d)
        P = pw[self.E, cols]
        m = np.prod(P, axis=1)
        C = self.c0 + self.owner @ (self.G * m[:, None])
        if not jac:
            return C
        # derivative of x_d^e is e x_d^(e-1)
        dP = self.E * pw[np.maximum(self.E - 1, 0), cols]
        pre = np.cumprod(np.concatenate([np.ones((self.n_terms, 1)), P[:, :-1]], axis=1), axis=1)
        suf = np.cumprod(np.concatenate([np.ones((self.n_terms, 1)), P[:, :0:-1]], axis=1), axis=1)[:, ::-1]
        dm = dP * pre * suf  # (terms, d) derivative w.r.t. x
        inv_eta = np.divide(1.0, self.eta, out=np.zeros_like(self.eta), where=self.eta > 0)
        dm = dm * inv_eta
        J = (self.owner @ (self.G[:, :, None] * dm[:, None, :]).reshape(self.n_terms, -1)).reshape(self.n, 3, self.d)
        return C, J


def chain_levers(arm: ArmModel) -> np.ndarray:
    """``D[l, j]``: upper bound on the distance from joint ``l``'s axis point to joint ball ``j``.

    Rigid links make ``|p_j - p_l| <= sum of offset norms between them`` in
    every configuration.  Zero for ``j <= l`` since joint ``l`` does not move
    those balls.
    """
    n = arm.n_q
    seg = np.concatenate([np.linalg.norm(arm.offsets[1:], axis=1), [np.linalg.norm(arm.ee_offset)]])
    D = np.zeros((n, n + 1))
    for l in range(n):
        for j in range(l + 1, n + 1):
            D[l, j] = seg[l:j].sum()
    return D


def fk_batch(arm: ArmModel, Q):
    """Rotations ``(N, n_q, 3, 3)`` and joint-ball positions ``(N, n_q + 1, 3)`` for a batch."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    N, n = Q.shape[0], arm.n_q
    Rs = np.empty((N, n, 3, 3))
    ps = np.empty((N, n + 1, 3))
    R = np.broadcast_to(np.eye(3), (N, 3, 3))
    p = np.zeros((N, 3))
    c, s = np.cos(Q), np.sin(Q)
    for j in range(n):
        p = p + R @ arm.offsets[j]
        Rz = np.zeros((N, 3, 3))
        Rz[:, 0, 0], Rz[:, 0, 1], Rz[:, 1, 0], Rz[:, 1, 1], Rz[:, 2, 2] = c[:, j], -s[:, j], s[:, j], c[:, j], 1.0
        R = (R @ arm.rotations[j]) @ Rz
        Rs[:, j], ps[:, j] = R, p
    ps[:, -1] = p + R @ arm.ee_offset
    return Rs, ps


def joint_jacobians(arm: ArmModel, Q):
    """Joint-ball positions and their derivatives with respect to ``q``.

    Parameters
    ----------
    Q : (n_q,) or (N, n_q)

    Returns
    -------
    positions : (N, n_q + 1, 3)
    jacobians : (N, n_q + 1, 3, n_q); joint ``l`` turns ball ``j > l`` about
        its axis ``z_l`` through ``p_l``.
    """
    Rs, ps = fk_batch(arm, Q)
    N, n = Rs.shape[0], arm.n_q
    z = Rs[:, :, :, 2]  # (N, n, 3)
    d = ps[:, None, :, :] - ps[:, :n, None, :]  # (N, l, j, 3)
    cr = np.cross(z[:, :, None, :], d)  # (N, l, j, 3)
    mask = np.arange(n + 1)[None, :] > np.arange(n)[:, None]  # (l, j)
    cr = cr * mask[None, :, :, None]
    return ps, cr.transpose(0, 2, 3, 1)


class CenterFK:
    """Exact joint-ball centers ``FK(a_i + b_i * k)`` for every subinterval.

    ``a_i + b_i * k`` is the configuration at the midpoint of subinterval ``i``;
    it is affine in ``k`` so the centers and their ``k``-Jacobians come from
    ordinary forward kinematics.
    """

    def __init__(self, arm: ArmModel, a: np.ndarray, b: np.ndarray):
        self.arm, self.a, self.b = arm, np.asarray(a, float), np.asarray(b, float)
        self.n = a.shape[0] * (arm.n_q + 1)

    def evaluate(self, k, jac: bool = True):
        k = np.asarray(k, dtype=float)
        Q = self.a + self.b * k
        if not jac:
            return joint_positions(self.arm, Q).reshape(-1, 3)
        P, Jq = joint_jacobians(self.arm, Q)
        Jk = Jq * self.b[:, None, None, :]
        return P.reshape(-1, 3), Jk.reshape(-1, 3, self.arm.n_q)


@dataclass
class SFO:
    """Spherical forward occupancy of one planning iteration.

    Attributes
    ----------
    joint_radii : (n_t, n_q + 1) total joint-ball radii
    radii : (n_t, n_links * n_s) link-ball radii, ordered by link then ball
    traj : TrajectoryPZ the occupancy was built from
    mode : ``"exact"`` (trigonometric centers) or ``"pz"`` (polynomial centers)
    joint : per-subinterval JointBall lists (``"pz"`` mode only)
    """

    joint_radii: np.ndarray
    radii: np.ndarray
    traj: TrajectoryPZ
    n_s: int
    mode: str
    joint_poly: object = field(repr=False)
    blend: sparse.csr_matrix = field(repr=False)
    joint: list | None = field(default=None, repr=False)

    @property
    def n_t(self) -> int:
        return self.radii.shape[0]

    @property
    def balls_per_interval(self) -> int:
        return self.radii.shape[1]

    @property
    def flat_radii(self) -> np.ndarray:
        return self.radii.reshape(-1)

    def centers(self, k, jac: bool = True):
        """Link-ball centers ``(n_t * nb, 3)`` and Jacobians ``(n_t * nb, 3, n_q)`` at ``k``."""
        if jac:
            Cj, Jj = self.joint_poly.evaluate(k, True)
            C = self.blend @ Cj
            J = (self.blend @ Jj.reshape(Jj.shape[0], -1)).reshape(C.shape[0], 3, -1)
            return C, J
        return self.blend @ self.joint_poly.evaluate(k, False)

    def joint_centers(self, k) -> np.ndarray:
        return self.joint_poly.evaluate(k, False).reshape(self.n_t, -1, 3)


def _blend_matrix(n_t: int, n_q: int, n_s: int) -> sparse.csr_matrix:
    nj = n_q + 1
    taus = sfo_taus(n_s)
    rows, cols, vals = [], [], []
    r = 0
    for i in range(n_t):
        for j in range(n_q):
            for tau in taus:
                rows += [r, r]
                cols += [i * nj + j, i * nj + j + 1]
                vals += [1.0 - tau, tau]
                r += 1
    return sparse.csr_matrix((vals, (rows, cols)), shape=(r, n_t * nj))


def time_deviation_bounds(traj: TrajectoryPZ) -> np.ndarray:
    """``max |q_j(t;k) - q_j(t_c;k)|`` over each subinterval and all of K, shape (n_t, n_q)."""
    out = np.zeros((len(traj.times), traj.space.n_q))
    for i, qs in enumerate(traj.q):
        for j, q in enumerate(qs):
            _, rest = q.split(traj.k_ids)
            box = rest.bound()
            out[i, j] = max(abs(float(box.lower)), abs(float(box.upper)))
    return out


def midpoint_affine(space: TrajParamSpace, ic: InitialCondition, times) -> tuple[np.ndarray, np.ndarray]:
    """``q(t_c; k) = a + b * k`` at every subinterval midpoint."""
    a, b = [], []
    for tpz in times:
        tc = float(tpz.center)
        q0, _ = traj_eval(space, ic, np.zeros(space.n_q), tc, check=False)
        q1, _ = traj_eval(space, ic, np.ones(space.n_q), tc, check=False)
        a.append(q0)
        b.append(q1 - q0)
    return np.array(a), np.array(b)


def build_sfo(
    arm: ArmModel,
    space: TrajParamSpace,
    ic: InitialCondition,
    n_t: int = 10,
    n_s: int = 5,
    order: int = 4,
    mode: str = "exact",
    traj: TrajectoryPZ | None = None,
) -> SFO:
    """Spherical forward occupancy for every subinterval.

    Parameters
    ----------
    mode : {"exact", "pz"}
        ``"pz"`` pushes the trajectory PZs through PZ kinematics and keeps
        the k-only part of each joint position as a polynomial center.
        ``"exact"`` centers each joint ball at the forward kinematics of the
        subinterval-midpoint configuration and bounds the time deviation with
        rigid-chain lever arms; it stays tight for wide parameter ranges.
    """
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    traj = traj or build_trajectory_pz(space, ic, n_t)
    n_ti = len(traj.times)
    nq = arm.n_q
    joint = None
    if mode == "pz":
        joint, jr = [], []
        for i in range(n_ti):
            _, ps = fk_pz(arm, traj.q[i], order)
            jb = joint_balls(arm, ps, traj.k_ids, i)
            joint.append(jb)
            jr.append([b.radius for b in jb])
        joint_radii = np.array(jr)
        poly = CenterPolynomials([b.center for jb in joint for b in jb], traj.k_ids, space.eta)
        lengths = np.array([[_length_bound(jb[j].center, jb[j + 1].center) for j in range(nq)] for jb in joint])
    elif mode == "exact":
        dev = time_deviation_bounds(traj)
        fold = dev @ chain_levers(arm)
        joint_radii = arm.radii + fold
        a, b = midpoint_affine(space, ic, traj.times)
        poly = CenterFK(arm, a, b)
        seg = np.concatenate([np.linalg.norm(arm.offsets[1:], axis=1), [np.linalg.norm(arm.ee_offset)]])
        lengths = np.broadcast_to(seg, (n_ti, nq))
    else:
        raise ValueError(f"unknown SFO mode {mode!r}")
    radii = np.array(
        [np.concatenate([sfo_radii(joint_radii[i, j], joint_radii[i, j + 1], lengths[i, j], n_s) for j in range(nq)]) for i in range(n_ti)]
    )
    return SFO(joint_radii, radii, traj, n_s, mode, poly, _blend_matrix(n_ti, nq, n_s), joint)
