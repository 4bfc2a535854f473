import numpy as np
import pytest

import splankit.planner as planner
from splankit.arm import fk_batch
from splankit.planner import (
    PlanContext,
    PlanProblem,
    PlanResult,
    goal_cost,
    receding_horizon_run,
    solve,
)
from splankit.risk import RiskParams
from splankit.scene import SplatScene
from splankit.scenegen import boxes_to_splat, gen_scene, sample_free_config
from splankit.trajectory import InitialCondition, TrajParamSpace, traj_eval

SPACE = TrajParamSpace.default(7)


def problem(arm, scene=None, q0=None, dq0=None, goal=None, **kw):
    q0 = np.zeros(7) if q0 is None else np.asarray(q0, float)
    dq0 = np.zeros(7) if dq0 is None else np.asarray(dq0, float)
    goal = q0 if goal is None else goal
    kw.setdefault("budget", None)
    return PlanProblem(scene if scene is not None else SplatScene.empty(), arm, SPACE, InitialCondition(q0, dq0), goal, **kw)


def scene_near_arm(rng, arm, q0, n=30):
    """Gaussians scattered around the arm so that risk gradients are nonzero."""
    _, P = fk_batch(arm, q0)
    anchors = P[0, rng.integers(1, 8, n)]
    means = anchors + rng.normal(scale=0.15, size=(n, 3))
    lam = rng.uniform(0.03, 0.1, (n, 3)) ** 2
    return SplatScene(rng.uniform(0.001, 0.02, n), means, np.tile(np.eye(3), (n, 1, 1)), lam)


def fd_jacobian(f, k, h=1e-6):
    cols = []
    for l in range(k.size):
        e = np.zeros_like(k)
        e[l] = h
        cols.append((f(k + e) - f(k - e)) / (2 * h))
    return np.stack(cols, axis=-1)


# --- problem and cost ---------------------------------------------------------------------


def test_goal_must_respect_limits(arm):
    with pytest.raises(ValueError):
        problem(arm, goal=np.full(7, 3.0))


def test_goal_cost_gradient(rng, arm):
    pb = problem(arm, q0=rng.uniform(-1, 1, 7), dq0=rng.uniform(-0.5, 0.5, 7), goal=np.zeros(7))
    f = goal_cost(pb)
    k = rng.uniform(-3, 3, 7)
    q, _ = traj_eval(SPACE, pb.ic, k, SPACE.t_plan)
    assert f(k)[0] == pytest.approx(np.sum(q**2), rel=1e-14)
    assert np.allclose(f(k)[1], fd_jacobian(lambda x: np.array(f(x)[0]), k), atol=1e-6)


# --- risk constraint --------------------------------------------------------------------------


def test_risk_constraint_empty_scene(arm):
    ctx = PlanContext(problem(arm, risk=RiskParams(0.1, 0.2)))
    v, g = ctx.risk_constraint_eval(np.ones(7))
    assert np.allclose(v, -0.02, rtol=0, atol=1e-15) and np.all(g == 0)
    assert v.shape == (10,) and g.shape == (10, 7)


def test_risk_constraint_distant_gaussian(arm):
    far = SplatScene([1.0], [[5.0, 5.0, 5.0]], [np.eye(3)], [[0.01, 0.01, 0.01]])
    ctx = PlanContext(problem(arm, scene=far))
    v, _ = ctx.risk_constraint_eval(np.zeros(7))
    assert np.allclose(v, -0.025**2, atol=1e-8)


def test_per_sphere_variant(rng, arm):
    q0 = rng.uniform(-1, 1, 7)
    sc = scene_near_arm(rng, arm, q0)
    summed = PlanContext(problem(arm, sc, q0))
    each = PlanContext(problem(arm, sc, q0, per_sphere=True))
    k = rng.uniform(-2, 2, 7)
    vs, _ = summed.risk_constraint_eval(k)
    ve, _ = each.risk_constraint_eval(k)
    thr = 0.025**2
    assert ve.size == summed.sfo.n_t * summed.sfo.balls_per_interval
    assert np.allclose(vs + thr, (ve + thr).reshape(10, -1).sum(axis=1), rtol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_risk_constraint_gradient_fd(arm, seed):
    rng = np.random.default_rng(seed)
    q0, dq0 = rng.uniform(-1.5, 1.5, 7), rng.uniform(-0.5, 0.5, 7)
    sc = scene_near_arm(rng, arm, q0)
    ctx = PlanContext(problem(arm, sc, q0, dq0))
    k = rng.uniform(-2.9, 2.9, 7)
    v, g = ctx.risk_constraint_eval(k)
    fd = fd_jacobian(lambda x: ctx.risk_constraint_eval(x)[0], k)
    scale = np.max(np.abs(fd))
    assert scale > 0
    assert np.max(np.abs(g - fd)) <= 1e-5 * scale


# --- limit constraints -----------------------------------------------------------------------


def test_limits_stationary_midrange(arm):
    ctx = PlanContext(problem(arm))
    v, _ = ctx.limits_constraint_eval(np.zeros(7))
    assert np.all(v < -0.5)


def test_limits_violation_at_upper_bound(arm):
    q0 = np.zeros(7)
    q0[1] = arm.q_limits[1, 1]
    ctx = PlanContext(problem(arm, q0=q0))
    k = np.zeros(7)
    k[1] = 2.0
    v, _ = ctx.limits_constraint_eval(k)
    lim = ctx.limits
    nh = lim.rows_hi.size
    rows = lim.rows_hi[v[:nh] > 0]
    assert rows.size and set(lim.joint[rows].tolist()) == {1}


def test_limits_sound_against_dense_sampling(rng, arm):
    q0, dq0 = rng.uniform(-2, 2, 7), rng.uniform(-1, 1, 7)
    ctx = PlanContext(problem(arm, q0=np.clip(q0, -2.2, 2.2), dq0=dq0))
    lim = ctx.limits
    for _ in range(20):
        k = rng.uniform(-3, 3, 7)
        v, _ = ctx.limits_constraint_eval(k)
        t = np.linspace(0, SPACE.t_fin, 2001)
        q, dq = traj_eval(SPACE, ctx.problem.ic, k, t)
        n_t, nq = 10, 7
        # rows are ordered (kind, interval, joint)
        hi = np.full(2 * n_t * nq, -np.inf)
        lo = np.full(2 * n_t * nq, np.inf)
        for kind, X in enumerate((q, dq)):
            for i in range(n_t):
                sel = (t >= i / n_t - 1e-12) & (t <= (i + 1) / n_t + 1e-12)
                for j in range(nq):
                    r = (kind * n_t + i) * nq + j
                    hi[r], lo[r] = X[sel, j].max(), X[sel, j].min()
        sampled_hi = hi[lim.rows_hi] - lim.limits[lim.rows_hi, 1]
        sampled_lo = lim.limits[lim.rows_lo, 0] - lo[lim.rows_lo]
        nh = lim.rows_hi.size
        assert np.all(v[:nh] >= sampled_hi - 1e-12)
        assert np.all(v[nh:] >= sampled_lo - 1e-12)


def test_limits_gradient_fd(rng, arm):
    ctx = PlanContext(problem(arm, q0=rng.uniform(-1, 1, 7), dq0=rng.uniform(-0.5, 0.5, 7)))
    for _ in range(10):
        k = rng.uniform(-2.9, 2.9, 7)
        _, g = ctx.limits_constraint_eval(k)
        fd = fd_jacobian(lambda x: ctx.limits_constraint_eval(x)[0], k)
        assert np.allclose(g, fd, atol=1e-6)


# --- solve ------------------------------------------------------------------------------------------


def test_solve_empty_scene_reaches_unconstrained_optimum(rng, arm):
    q0 = rng.uniform(-0.5, 0.5, 7)
    k_star = rng.uniform(-2, 2, 7)
    goal, _ = traj_eval(SPACE, InitialCondition(q0, np.zeros(7)), k_star, SPACE.t_plan)
    res = solve(problem(arm, q0=q0, goal=goal))
    assert res.feasible
    q, _ = traj_eval(SPACE, InitialCondition(q0, np.zeros(7)), res.k, SPACE.t_plan)
    assert np.max(np.abs(q - goal)) <= 1e-3


def test_solve_enclosing_wall_infeasible(arm):
    wall = SplatScene([1e4], [[0, 0, 0.3]], [np.eye(3)], [[1, 1, 1]])
    res = solve(problem(arm, wall, goal=np.full(7, 0.5), risk=RiskParams(0.01, 0.01)))
    assert res.status == "infeasible" and not res.feasible
    assert res.max_residual > 0


def test_timeout_status(arm, rng):
    q0 = rng.uniform(-1, 1, 7)
    res = solve(problem(arm, scene_near_arm(rng, arm, q0), q0, goal=np.zeros(7), budget=1e-9))
    assert res.status in ("timeout", "feasible")


@pytest.mark.parametrize("seed", range(20))
def test_feasible_plans_survive_dense_time_recheck(arm, seed):
    gt = gen_scene(3, seed)
    sc = boxes_to_splat(gt)
    r = np.random.default_rng(1000 + seed)
    q0 = sample_free_config(gt, arm, r, 0.1)
    goal = sample_free_config(gt, arm, r, 0.1)
    res = solve(problem(arm, sc, q0, goal=goal))
    if not res.feasible:
        pytest.skip("no feasible plan for this seed")
    # independent re-evaluation at the reported k
    ctx = PlanContext(problem(arm, sc, q0, goal=goal))
    v = np.concatenate([ctx.risk_constraint_eval(res.k)[0], ctx.limits_constraint_eval(res.k)[0]])
    assert v.max() <= 1e-6
    fine = PlanContext(problem(arm, sc, q0, goal=goal, n_t=100))
    assert fine.risk_constraint_eval(res.k)[0].max() <= 1e-6
    # more slack in beta keeps the same k feasible
    loose = PlanContext(problem(arm, sc, q0, goal=goal, risk=RiskParams(0.025, 0.1)))
    assert loose.risk_constraint_eval(res.k)[0].max() <= v[:10].max()


# --- receding horizon --------------------------------------------------------------------------------


def test_goal_equals_start(arm):
    run = receding_horizon_run(problem(arm, q0=np.full(7, 0.2)))
    assert run.success and len(run.steps) == 0 and len(run.segments) == 0


def test_empty_scene_far_goal(rng, arm):
    q0 = rng.uniform(-1, 1, 7)
    goal = np.clip(q0 + rng.uniform(-2, 2, 7), arm.q_limits[:, 0] + 0.1, arm.q_limits[:, 1] - 0.1)
    run = receding_horizon_run(problem(arm, q0=q0, goal=goal))
    assert run.success
    # from rest, one step moves a joint by at least eta t_plan^2 / 2
    bound = int(np.ceil(np.max(np.abs(goal - q0)) / (0.5 * 3.0 * 0.25)))
    assert len(run.steps) <= bound
    # the goal is reached at the last planned state; the braking tail then brings the arm to rest
    assert run.trace[-1]["status"] == "brake"
    assert np.max(np.abs(run.trace[-2]["q"] - goal)) < 0.05
    assert np.all(run.dq == 0)
    ts, Q, dQ = run.sample(SPACE)
    assert np.all(np.diff(ts) >= -1e-12) and np.allclose(dQ[-1], 0, atol=1e-12)


def test_sealed_goal_fails_at_rest(arm):
    wall = SplatScene([1e4], [[0, 0, 0.3]], [np.eye(3)], [[1, 1, 1]])
    run = receding_horizon_run(problem(arm, wall, goal=np.full(7, 0.5), risk=RiskParams(0.01, 0.01)))
    assert not run.success and run.status == "failed"
    assert np.max(np.abs(run.dq)) <= 1e-9


def test_failure_after_motion_brakes_along_previous_plan(monkeypatch, arm):
    calls = []

    def fake_solve(pb, k0=None, context=None):
        calls.append(pb.ic)
        if len(calls) <= 2:
            return PlanResult("feasible", np.full(7, 1.0), 1, {}, 0.0)
        return PlanResult("infeasible", np.zeros(7), 1, {}, 0.0)

    monkeypatch.setattr(planner, "solve", fake_solve)
    run = receding_horizon_run(problem(arm, goal=np.full(7, 2.0)), max_iters=10)
    assert run.status == "failed" and len(run.steps) == 4
    assert np.max(np.abs(run.dq)) <= 1e-9
    # the braking tail is the previous plan's [t_plan, t_fin]
    last = run.segments[-1]
    assert (last.t0, last.t1) == (SPACE.t_plan, SPACE.t_fin)
    q_end, dq_end = traj_eval(SPACE, last.ic, last.k, SPACE.t_fin)
    assert np.allclose(run.q, q_end) and np.max(np.abs(dq_end)) <= 1e-12
    # the planner restarted from rest after braking
    assert np.all(calls[-1].dq0 == 0)


def test_max_iters_validation(arm):
    with pytest.raises(ValueError):
        receding_horizon_run(problem(arm), max_iters=0)
