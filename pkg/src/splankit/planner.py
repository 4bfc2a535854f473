"""Chance-constrained trajectory optimization over the spherical forward occupancy.

One planning step searches the parameter box ``K`` for ``k`` minimizing a
user cost subject to, for every time subinterval ``i``,

    sum_{balls b in i} (1 - exp(-H(b(k)) / 4 pi)) <= alpha * beta,

plus interval-enclosure joint position and velocity limits.  The receding
horizon loop executes the first ``t_plan`` seconds of each feasible plan and
falls back on the previous plan's braking segment when a step fails.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .arm import SFO, ArmModel, build_sfo
from .risk import RiskParams, sphere_risk_batch
from .scene import SplatScene
from .trajectory import InitialCondition, TrajParamSpace, traj_eval

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
GOAL_TOL = 0.05


@dataclass
class PlanProblem:
    scene: SplatScene
    arm: ArmModel
    space: TrajParamSpace
    ic: InitialCondition
    goal: np.ndarray
    risk: RiskParams = field(default_factory=RiskParams)
    n_t: int = 10
    n_s: int = 5
    budget: float | None = 0.5
    sfo_mode: str = "exact"
    per_sphere: bool = False
    max_iter: int = 100
    cost: Callable | None = None

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float).reshape(self.arm.n_q)
        if not self.arm.within_limits(self.goal):
            raise ValueError("goal outside joint limits")

    def with_ic(self, ic: InitialCondition) -> "PlanProblem":
        return PlanProblem(**{**self.__dict__, "ic": ic})


@dataclass
class PlanResult:
    status: str  # feasible | infeasible | timeout | solver_error
    k: np.ndarray
    iterations: int
    constraints: dict
    wall_time: float
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    @property
    def max_residual(self) -> float:
        vals = [np.max(v) for v in self.constraints.values() if np.size(v)]
        return float(max(vals)) if vals else -np.inf


def goal_cost(problem: PlanProblem):
    """``|q(t_plan; k) - goal|^2`` and its gradient."""
    tp = problem.space.t_plan
    base = problem.ic.q0 + problem.ic.dq0 * tp - problem.goal
    half = 0.5 * tp * tp

    def f(k):
        r = base + half * k
        return float(r @ r), 2.0 * half * r

    return f


class _Timeout(Exception):
    pass


class LimitEnclosures:
    """Joint position and velocity enclosures sliced at ``k`` and bounded over each subinterval.

    For a term ``g x_k^a x_t^b`` the sliced coefficient ``c = g x_k^a`` is a
    constant when ``b = 0``, ranges over ``[min(c,0), max(c,0)]`` for even
    ``b`` and over ``[-|c|, |c|]`` for odd ``b``.
    """

    def __init__(self, sfo: SFO, arm: ArmModel):
        traj = sfo.traj
        self.eta = traj.space.eta
        n_t, n_q = len(traj.times), arm.n_q
        blocks = []
        limits = []
        for kind, pzs, lim in (("q", traj.q, arm.q_limits), ("dq", traj.dq, arm.dq_limits)):
            for i in range(n_t):
                for j in range(n_q):
                    blocks.append((pzs[i][j], j, int(traj.t_ids[i]), int(traj.k_ids[j])))
                    limits.append(lim[j])
        self.n = len(blocks)
        self.limits = np.array(limits)
        c0, rem, G, EK, ET, own, joint = [], [], [], [], [], [], []
        for b, (pz, j, tid, kid) in enumerate(blocks):
            c0.append(float(pz.center))
            rem.append(float(pz.rem))
            ids = pz.ids.tolist()
            ek = pz.expmat[:, ids.index(kid)] if kid in ids else np.zeros(pz.n_generators, np.int64)
            et = pz.expmat[:, ids.index(tid)] if tid in ids else np.zeros(pz.n_generators, np.int64)
            G.append(pz.coeffs)
            EK.append(ek)
            ET.append(et)
            own.append(np.full(pz.n_generators, b))
            joint.append(j)
        self.c0, self.rem = np.array(c0), np.array(rem)
        self.G = np.concatenate(G)
        self.ek = np.concatenate(EK)
        self.et = np.concatenate(ET)
        self.own = np.concatenate(own)
        self.joint = np.array(joint)
        self.term_joint = self.joint[self.own]
        self.const = self.et == 0
        self.even = (self.et > 0) & (self.et % 2 == 0)
        self.odd = self.et % 2 == 1
        finite_hi = np.isfinite(self.limits[:, 1])
        finite_lo = np.isfinite(self.limits[:, 0])
        self.rows_hi = np.flatnonzero(finite_hi)
        self.rows_lo = np.flatnonzero(finite_lo)

    def evaluate(self, k):
        """Signed margins (positive = violated) and their gradients with respect to ``k``."""
        k = np.asarray(k, dtype=float)
        x = np.divide(k, self.eta, out=np.zeros_like(k), where=self.eta > 0)
        xe = x[self.term_joint]
        c = self.G * xe**self.ek
        dc = self.G * self.ek * xe ** np.maximum(self.ek - 1, 0)
        inv = np.divide(1.0, self.eta, out=np.zeros_like(self.eta), where=self.eta > 0)
        dc = dc * inv[self.term_joint]
        hi_c = np.where(self.const, c, np.where(self.even, np.maximum(c, 0), np.abs(c)))
        lo_c = np.where(self.const, c, np.where(self.even, np.minimum(c, 0), -np.abs(c)))
        hi_d = np.where(self.const, dc, np.where(self.even, dc * (c > 0), dc * np.sign(c)))
        lo_d = np.where(self.const, dc, np.where(self.even, dc * (c < 0), -dc * np.sign(c)))
        upper = self.c0 + self.rem + np.bincount(self.own, hi_c, self.n)
        lower = self.c0 - self.rem + np.bincount(self.own, lo_c, self.n)
        dup = np.bincount(self.own, hi_d, self.n)
        dlo = np.bincount(self.own, lo_d, self.n)
        nq = k.size
        vals = np.concatenate([upper[self.rows_hi] - self.limits[self.rows_hi, 1], self.limits[self.rows_lo, 0] - lower[self.rows_lo]])
        grads = np.zeros((vals.size, nq))
        nh = self.rows_hi.size
        grads[np.arange(nh), self.joint[self.rows_hi]] = dup[self.rows_hi]
        grads[nh + np.arange(self.rows_lo.size), self.joint[self.rows_lo]] = -dlo[self.rows_lo]
        return vals, grads


class PlanContext:
    """Everything one planning step needs, built once from the initial condition."""

    def __init__(self, problem: PlanProblem, sfo: SFO | None = None):
        self.problem = problem
        self.sfo = sfo or build_sfo(problem.arm, problem.space, problem.ic, problem.n_t, problem.n_s, mode=problem.sfo_mode)
        self.radii = self.sfo.flat_radii
        self.limits = LimitEnclosures(self.sfo, problem.arm)
        self.cost = problem.cost or goal_cost(problem)
        self._cache_key = None
        self._cache = None

    # constraint pieces ----------------------------------------------------
    def risk_constraint_eval(self, k):
        """Per-subinterval ``sum V - alpha beta`` (or per-ball ``V - alpha beta``) with gradients."""
        p = self.problem
        C, J = self.sfo.centers(k, jac=True)
        V, dVdc, _ = sphere_risk_batch(p.scene, C, self.radii, grad=True)
        G = np.einsum("bi,bij->bj", dVdc, J)
        thr = p.risk.threshold
        if p.per_sphere:
            return V - thr, G
        nb = self.sfo.balls_per_interval
        return V.reshape(-1, nb).sum(axis=1) - thr, G.reshape(-1, nb, G.shape[1]).sum(axis=1)

    def limits_constraint_eval(self, k):
        return self.limits.evaluate(k)

    def constraints(self, k):
        key = np.asarray(k, dtype=float).tobytes()
        if key != self._cache_key:
            rv, rg = self.risk_constraint_eval(k)
            lv, lg = self.limits_constraint_eval(k)
            self._cache = (np.concatenate([rv, lv]), np.concatenate([rg, lg]), rv.size)
            self._cache_key = key
        return self._cache

    def constraint_report(self, k) -> dict:
        rv, _ = self.risk_constraint_eval(k)
        lv, _ = self.limits_constraint_eval(k)
        return {"risk": rv, "limits": lv}


def solve(problem: PlanProblem, k0=None, context: PlanContext | None = None) -> PlanResult:
    """One planning step.

    Parameters
    ----------
    k0 : array, optional
        Warm start; clipped into ``K``.  Zero when omitted.
    """
    t_start = time.perf_counter()
    deadline = None if problem.budget is None else t_start + problem.budget
    ctx = context or PlanContext(problem)
    space = problem.space
    x0 = space.clip(np.zeros(space.n_q) if k0 is None else k0)
    best = {"k": None, "cost": np.inf}
    n_eval = [0]

    def check_deadline():
        if deadline is not None and time.perf_counter() > deadline:
            raise _Timeout

    def track(k):
        vals, _, _ = ctx.constraints(k)
        if np.all(vals <= FEAS_TOL) and space.contains(k):
            c = ctx.cost(k)[0]
            if c < best["cost"]:
                best["k"], best["cost"] = np.array(k, dtype=float), c

    def fun(k):
        check_deadline()
        n_eval[0] += 1
        return ctx.cost(k)

    def cons(k):
        check_deadline()
        track(k)
        return -ctx.constraints(k)[0]

    def cons_jac(k):
        check_deadline()
        return -ctx.constraints(k)[1]

    bounds = list(zip(-space.eta, space.eta))
    status, msg, nit = None, "", 0
    try:
        track(x0)
        with warnings.catch_warnings():
            # SLSQP clips out-of-bound line-search steps itself
            warnings.filterwarnings("ignore", message="Values in x were outside bounds")
            res = minimize(
                fun,
                x0,
                jac=True,
                method="SLSQP",
                bounds=bounds,
                constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                options={"maxiter": problem.max_iter, "ftol": 1e-9},
            )
        nit, msg = int(getattr(res, "nit", 0)), str(res.message)
        if not np.all(np.isfinite(res.x)):
            status = "solver_error"
        else:
            track(space.clip(res.x))
    except _Timeout:
        status, msg = "timeout", "planning budget exhausted"
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        status, msg = "solver_error", f"{type(exc).__name__}: {exc}"
    if best["k"] is not None:
        k = best["k"]
        status = "feasible"
    else:
        k = x0
        status = status or "infeasible"
    report = ctx.constraint_report(k)
    wall = time.perf_counter() - t_start
    return PlanResult(status, k, nit, report, wall, msg)


# ---------------------------------------------------------------------------
# receding horizon


@dataclass
class Segment:
    """Executed portion ``[t0, t1]`` of the plan ``(ic, k)``, starting at global time ``start``."""

    ic: InitialCondition
    k: np.ndarray
    t0: float
    t1: float
    start: float


@dataclass
class RunResult:
    success: bool
    status: str
    q: np.ndarray
    dq: np.ndarray
    steps: list
    segments: list
    trace: list

    def sample(self, space: TrajParamSpace, dt: float = 1e-3):
        """Executed configurations on a uniform time grid: ``(times, Q, dQ)``."""
        ts, Qs, dQs = [], [], []
        for seg in self.segments:
            n = max(2, int(np.ceil((seg.t1 - seg.t0) / dt)) + 1)
            tl = np.linspace(seg.t0, seg.t1, n)
            q, dq = traj_eval(space, seg.ic, seg.k, tl, check=False)
            ts.append(seg.start + tl - seg.t0)
            Qs.append(q)
            dQs.append(dq)
        if not ts:
            return np.zeros(0), np.zeros((0, space.n_q)), np.zeros((0, space.n_q))
        return np.concatenate(ts), np.concatenate(Qs), np.concatenate(dQs)


def receding_horizon_run(problem: PlanProblem, max_iters: int = 150, goal_tol: float = GOAL_TOL) -> RunResult:
    """Plan, execute ``[0, t_plan]``, repeat; brake on failure, stop after two consecutive failures."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    space = problem.space
    q, dq = problem.ic.q0.copy(), problem.ic.dq0.copy()
    clock = 0.0
    steps, segments, trace = [], [], []
    prev = None  # (ic, k) of the last feasible plan
    k_warm = None
    failures = 0

    def record(step, status, residual):
        trace.append({"step": step, "t": clock, "q": q.copy(), "dq": dq.copy(), "residual": residual, "status": status})

    record(0, "start", float("nan"))
    if np.max(np.abs(q - problem.goal)) < goal_tol:
        return RunResult(True, "success", q, dq, steps, segments, trace)
    for step in range(1, max_iters + 1):
        ic = InitialCondition(q, dq)
        res = solve(problem.with_ic(ic), k_warm)
        steps.append(res)
        if res.feasible:
            failures = 0
            segments.append(Segment(ic, res.k, 0.0, space.t_plan, clock))
            q, dq = traj_eval(space, ic, res.k, space.t_plan, check=False)
            clock += space.t_plan
            prev, k_warm = (ic, res.k), res.k
            record(step, res.status, res.max_residual)
            if np.max(np.abs(q - problem.goal)) < goal_tol:
                # come to rest along the verified braking tail of the last plan
                segments.append(Segment(ic, res.k, space.t_plan, space.t_fin, clock))
                q, _ = traj_eval(space, ic, res.k, space.t_fin, check=False)
                dq = np.zeros_like(dq)
                clock += space.t_brake
                record(step, "brake", float("nan"))
                return RunResult(True, "success", q, dq, steps, segments, trace)
            continue
        failures += 1
        if prev is not None and np.any(dq != 0.0):
            # finish the previous plan: its braking segment is already verified
            pic, pk = prev
            segments.append(Segment(pic, pk, space.t_plan, space.t_fin, clock))
            q, dq = traj_eval(space, pic, pk, space.t_fin, check=False)
            dq = np.zeros_like(dq)
            clock += space.t_brake
        prev, k_warm = None, None
        record(step, res.status, res.max_residual)
        if failures >= 2:
            return RunResult(False, "failed", q, dq, steps, segments, trace)
    if prev is not None and np.any(dq != 0.0):
        pic, pk = prev
        segments.append(Segment(pic, pk, space.t_plan, space.t_fin, clock))
        q, _ = traj_eval(space, pic, pk, space.t_fin, check=False)
        dq = np.zeros_like(dq)
        clock += space.t_brake
        record(max_iters, "brake", float("nan"))
    return RunResult(False, "max_iters", q, dq, steps, segments, trace)


# ---------------------------------------------------------------------------
# seeded benchmark trial


@dataclass
class TrialResult:
    seed: int
    success: bool
    status: str
    steps: int
    min_clearance: float
    collided: bool
    final_dq: np.ndarray
    run: RunResult = field(repr=False)


def run_trial(
    arm: ArmModel,
    seed: int,
    risk: RiskParams | None = None,
    n_obstacles: int = 3,
    h: float = 0.04,
    rho_t: float = 100.0,
    clearance: float = 0.1,
    max_iters: int = 150,
    budget: float | None = None,
    dt: float = 1e-3,
) -> TrialResult:
    """Random box scene, free start and goal, receding-horizon run, exact clearance check.

    The start and goal are drawn from the free space of the link model with
    ``clearance`` to spare.  The executed trajectory is sampled every ``dt``
    seconds and checked against the boxes.
    """
    from .scenegen import arm_clearance, boxes_to_splat, gen_scene, sample_free_config

    gt = gen_scene(n_obstacles, seed)
    rng = np.random.default_rng(1000 + seed)
    q0 = sample_free_config(gt, arm, rng, clearance)
    goal = sample_free_config(gt, arm, rng, clearance)
    problem = PlanProblem(
        boxes_to_splat(gt, h, rho_t), arm, TrajParamSpace.default(arm.n_q), InitialCondition(q0, np.zeros(arm.n_q)),
        goal, risk or RiskParams(), budget=budget,
    )
    run = receding_horizon_run(problem, max_iters)
    _, Q, _ = run.sample(problem.space, dt)
    cl = float(arm_clearance(gt, arm, Q).min()) if len(Q) else float(arm_clearance(gt, arm, q0[None])[0])
    return TrialResult(seed, run.success, run.status, len(run.steps), cl, cl < 0, run.dq, run)
