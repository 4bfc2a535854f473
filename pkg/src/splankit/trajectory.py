"""Accelerate-then-brake trajectory family and its polynomial-zonotope enclosures.

For ``t <= t_plan`` every joint follows ``q = q0 + dq0 t + k t^2 / 2``.  After
``t_plan`` the joint decelerates at the constant rate that brings it to rest
exactly at ``t_fin``.  The parameter ``k`` ranges over the box
``K = prod_j [-eta_j, eta_j]`` and is written ``k_j = eta_j x_kj`` with one
indeterminate per joint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .polyzono import PolyZonotope, new_id, pz_add, pz_mul, pz_scale

_EPS = 1e-12


@dataclass(frozen=True)
class TrajParamSpace:
    n_q: int
    eta: np.ndarray
    t_plan: float = 0.5
    t_fin: float = 1.0

    def __post_init__(self):
        eta = np.broadcast_to(np.asarray(self.eta, dtype=float), (self.n_q,)).copy()
        if np.any(eta < 0):
            raise ValueError("eta must be >= 0")
        if not (0.0 < self.t_plan < self.t_fin):
            raise ValueError("need 0 < t_plan < t_fin")
        object.__setattr__(self, "eta", eta)

    @classmethod
    def default(cls, n_q: int = 7) -> "TrajParamSpace":
        return cls(n_q, np.full(n_q, 3.0))

    def contains(self, k, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(np.asarray(k, dtype=float)) <= self.eta + tol))

    def clip(self, k) -> np.ndarray:
        return np.clip(np.asarray(k, dtype=float), -self.eta, self.eta)

    @property
    def t_brake(self) -> float:
        return self.t_fin - self.t_plan


@dataclass(frozen=True)
class InitialCondition:
    q0: np.ndarray
    dq0: np.ndarray

    def __post_init__(self):
        q0 = np.asarray(self.q0, dtype=float).reshape(-1)
        dq0 = np.asarray(self.dq0, dtype=float).reshape(-1)
        if q0.shape != dq0.shape:
            raise ValueError("q0 and dq0 need equal length")
        if not (np.all(np.isfinite(q0)) and np.all(np.isfinite(dq0))):
            raise ValueError("initial condition must be finite")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "dq0", dq0)


def traj_eval(space: TrajParamSpace, ic: InitialCondition, k, t, check: bool = True):
    """Joint positions and velocities at time(s) ``t``.

    Parameters
    ----------
    k : (n_q,) array
    t : float or (N,) array

    Returns
    -------
    q, dq : arrays of shape (n_q,) or (N, n_q)
    """
    k = np.asarray(k, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if check:
        if not space.contains(k):
            raise ValueError("k outside K")
        if np.any(t_arr < -_EPS) or np.any(t_arr > space.t_fin + _EPS):
            raise ValueError("t outside [0, t_fin]")
    tt = np.clip(t_arr, 0.0, space.t_fin)[..., None]
    tp, tb = space.t_plan, space.t_brake
    q_acc = ic.q0 + ic.dq0 * tt + 0.5 * k * tt**2
    dq_acc = ic.dq0 + k * tt
    qp = ic.q0 + ic.dq0 * tp + 0.5 * k * tp**2
    vp = ic.dq0 + k * tp
    tau = np.maximum(tt - tp, 0.0)
    q_brk = qp + vp * tau - 0.5 * (vp / tb) * tau**2
    dq_brk = vp * (1.0 - tau / tb)
    late = tt > tp
    q = np.where(late, q_brk, q_acc)
    dq = np.where(late, dq_brk, dq_acc)
    return q, dq


@dataclass
class TrajectoryPZ:
    """Per-subinterval joint PZs plus the indeterminate bookkeeping.

    Attributes
    ----------
    q, dq : list over subintervals of lists over joints of scalar PZs
    k_ids : (n_q,) int array, id of ``x_kj``
    t_ids : (n_t,) int array, id of each subinterval's time indeterminate
    times : list of time PZs
    """

    q: list
    dq: list
    k_ids: np.ndarray
    t_ids: np.ndarray
    times: list
    space: TrajParamSpace = field(repr=False)

    def k_to_x(self, k) -> dict:
        """Indeterminate assignment realizing parameter ``k``."""
        k = np.asarray(k, dtype=float)
        x = np.divide(k, self.space.eta, out=np.zeros_like(k), where=self.space.eta > 0)
        return {int(i): float(np.clip(v, -1.0, 1.0)) for i, v in zip(self.k_ids, x)}


def aligned_partition(space: TrajParamSpace, n_t: int) -> list[PolyZonotope]:
    """Partition of ``[0, t_fin]`` into ``n_t`` equal cells, refined at ``t_plan``.

    When ``t_plan`` falls strictly inside a cell, that cell is split in two so
    no subinterval straddles the phase switch; the result then has
    ``n_t + 1`` elements.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    edges = np.linspace(0.0, space.t_fin, n_t + 1)
    edges[-1] = space.t_fin
    tp = space.t_plan
    near = np.abs(edges - tp) <= 1e-9 * space.t_fin
    if near.any():
        edges[np.argmax(near)] = tp
    else:
        edges = np.sort(np.append(edges, tp))
    return [PolyZonotope.from_interval(a, b) for a, b in zip(edges[:-1], edges[1:])]


def traj_pz(space: TrajParamSpace, ic: InitialCondition, time_pz: PolyZonotope, k_ids) -> tuple[list, list]:
    """Position and velocity PZs of every joint over one time subinterval.

    Both phases are polynomials in (t, k); substituting the time PZ and
    ``k_j = eta_j x_kj`` gives exact enclosures.
    """
    box = time_pz.bound()
    lo, hi = float(box.lower), float(box.upper)
    tp, tb = space.t_plan, space.t_brake
    if lo < tp - 1e-12 and hi > tp + 1e-12:
        raise ValueError("time subinterval straddles t_plan")
    brake = lo >= tp - 1e-12
    qs, dqs = [], []
    for j in range(space.n_q):
        kj = PolyZonotope.from_generator(0.0, space.eta[j], int(k_ids[j]))
        if not brake:
            t = time_pz
            t2 = pz_mul(t, t)
            q = pz_add(pz_scale(t, ic.dq0[j]), pz_scale(pz_mul(kj, t2), 0.5)) + ic.q0[j]
            dq = pz_mul(kj, t) + ic.dq0[j]
        else:
            tau = time_pz - tp
            tau2 = pz_mul(tau, tau)
            qp = pz_scale(kj, 0.5 * tp**2) + (ic.q0[j] + ic.dq0[j] * tp)
            vp = pz_scale(kj, tp) + ic.dq0[j]
            q = pz_add(qp, pz_mul(vp, pz_add(tau, pz_scale(tau2, -0.5 / tb))))
            dq = pz_mul(vp, pz_scale(tau, -1.0 / tb) + 1.0)
        qs.append(q)
        dqs.append(dq)
    return qs, dqs


_TEMPLATE_CACHE: dict = {}


def _template(space: TrajParamSpace, n_t: int):
    """Initial-condition-free parts of the trajectory PZs, cached per parameter space.

    The trajectory is affine in ``(q0, dq0)``, so
    ``q_ij = q0_j + dq0_j A_i + K_ij`` with ``A_i`` depending on time only.
    """
    key = (space.n_q, tuple(space.eta.tolist()), space.t_plan, space.t_fin, n_t)
    hit = _TEMPLATE_CACHE.get(key)
    if hit is not None:
        return hit
    times = aligned_partition(space, n_t)
    k_ids = np.array([new_id() for _ in range(space.n_q)], dtype=np.int64)
    zero = InitialCondition(np.zeros(space.n_q), np.zeros(space.n_q))
    unit = InitialCondition(np.zeros(space.n_q), np.ones(space.n_q))
    tmpl = []
    for tpz in times:
        kq, kdq = traj_pz(space, zero, tpz, k_ids)
        # with k = 0 the unit-velocity response isolates A_i
        aq, adq = traj_pz(TrajParamSpace(space.n_q, np.zeros(space.n_q), space.t_plan, space.t_fin), unit, tpz, k_ids)
        tmpl.append((kq, kdq, aq[0], adq[0]))
    if len(_TEMPLATE_CACHE) > 64:
        _TEMPLATE_CACHE.clear()
    _TEMPLATE_CACHE[key] = (times, k_ids, tmpl)
    return times, k_ids, tmpl


def build_trajectory_pz(space: TrajParamSpace, ic: InitialCondition, n_t: int = 10) -> TrajectoryPZ:
    """Position and velocity PZs of every joint over every subinterval."""
    times, k_ids, tmpl = _template(space, n_t)
    qs, dqs = [], []
    for kq, kdq, aq, adq in tmpl:
        qs.append([pz_add(pz_scale(aq, ic.dq0[j]), kq[j]) + ic.q0[j] for j in range(space.n_q)])
        dqs.append([pz_add(pz_scale(adq, ic.dq0[j]), kdq[j]) for j in range(space.n_q)])
    t_ids = np.array([int(tpz.ids[0]) for tpz in times], dtype=np.int64)
    return TrajectoryPZ(qs, dqs, k_ids, t_ids, times, space)
