import math

import numpy as np
import pytest

from vsls import se3
from vsls.curriculum import (LOOK_AT, SCREW, CurriculumConfig, CurriculumError, GoalContext,
                             evaluate_policy, init_curriculum, sample_goal, stage_params,
                             update_curriculum)
from vsls.sim import CameraIntrinsics, Workspace, home_pose, render

K = CameraIntrinsics()


@pytest.fixture
def ctx(scenes):
    return GoalContext(scenes[:2], K, Workspace(), home_pose(), (LOOK_AT,), (0.0, 0.0))


def zero_stage_cfg(**kw):
    return CurriculumConfig(first_box=(0, 0, 0), first_radius=0.0, first_roll_sigma=0.0, **kw)


def test_stage_zero_degenerate_is_home(ctx):
    st = stage_params(zero_stage_cfg(), 0)
    g = sample_goal(st, LOOK_AT, ctx, np.random.default_rng(0))
    ref = se3.lookat_pose(home_pose().t, [0, 0, 0])
    assert np.allclose(g.goal_pose.t, ref.t) and se3.rotation_angle(g.goal_pose.q, ref.q) < 1e-9
    assert np.array_equal(g.goal_image, render(g.scene, K, g.goal_pose))


def test_stage_params_monotone_and_endpoints():
    cfg = CurriculumConfig()
    vecs = [stage_params(cfg, i).as_vector() for i in range(cfg.n_stages)]
    for a, b in zip(vecs, vecs[1:]):
        assert np.all(b >= a - 1e-15)
    assert np.all(vecs[0] >= 0)
    last = stage_params(cfg, cfg.n_stages - 1)
    assert last.box == pytest.approx((0.75, 0.75, 0.6))
    assert last.lookat_radius == pytest.approx(0.10)
    assert last.screw_theta == pytest.approx(math.radians(70))


def test_positions_inside_box(ctx):
    st = stage_params(CurriculumConfig(), 3)
    rng = np.random.default_rng(1)
    half = 0.5 * np.asarray(st.box)
    for _ in range(1000):
        g = sample_goal(st, LOOK_AT, ctx, rng)
        assert np.all(np.abs(g.goal_pose.t - home_pose().t) <= half + 1e-12)


def test_lookat_target_within_radius(ctx):
    st = stage_params(CurriculumConfig(), 5)
    rng = np.random.default_rng(2)
    for _ in range(200):
        g = sample_goal(st, LOOK_AT, ctx, rng)
        p = g.goal_pose
        ax = se3.optical_axis(p)
        lam = -p.t[2] / ax[2]
        hit = p.t + lam * ax
        assert np.hypot(hit[0], hit[1]) <= st.lookat_radius + 1e-9


def test_screw_goal_decomposition(ctx):
    st = stage_params(CurriculumConfig(), 4)
    rng = np.random.default_rng(3)
    for _ in range(200):
        g = sample_goal(st, SCREW, ctx, rng)
        rel = se3.relative(home_pose(), g.goal_pose)
        assert abs(rel.t[1]) < 1e-12 and abs(rel.t[2]) < 1e-12
        assert abs(rel.t[0]) <= st.screw_disp + 1e-12
        rv = se3.quat_to_rotvec(rel.q)
        assert abs(rv[1]) < 1e-9 and abs(rv[2]) < 1e-9
        assert abs(rv[0]) <= st.screw_theta + 1e-9


def test_sampling_retries_exhausted(scenes):
    tiny = GoalContext(scenes[:1], K, Workspace(center=(5.0, 5.0, 5.0), dims=(0.1, 0.1, 0.1)), home_pose())
    with pytest.raises(CurriculumError):
        sample_goal(stage_params(CurriculumConfig(), 1), LOOK_AT, tiny,
                    np.random.default_rng(0), max_retries=5)
    with pytest.raises(ValueError):
        sample_goal(stage_params(CurriculumConfig(), 1), "spin", tiny, np.random.default_rng(0))


def test_evaluate_policy():
    assert evaluate_policy(lambda g, i: 3.0, None, 1) == 3.0
    assert evaluate_policy(lambda g, i: float(i), None, 3) == 1.0
    with pytest.raises(ValueError):
        evaluate_policy(lambda g, i: 0.0, None, 0)


def test_teleport_oracle_solves_goal(ctx):
    """A policy that jumps straight to the goal collects the bonus: R >= R_t."""
    from vsls.agent import RewardConfig, compute_reward
    cfg = CurriculumConfig()
    rc = RewardConfig.for_workspace((0.75, 0.75, 0.6))
    g = sample_goal(stage_params(cfg, 2), LOOK_AT, ctx, np.random.default_rng(4))

    def teleport(goal, i):
        d0 = se3.pose_distance(home_pose(), goal.goal_pose, rc.weights)
        return compute_reward(d0, 0.0, rc)

    assert evaluate_policy(teleport, g, 3) >= cfg.success_return


def test_random_policy_rarely_solves_distant_goal(ctx):
    from vsls.agent import RewardConfig, compute_reward
    rc = RewardConfig.for_workspace((0.75, 0.75, 0.6))
    cfg = CurriculumConfig()
    g = sample_goal(stage_params(cfg, 7), LOOK_AT, ctx, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    b = se3.DEFAULT_ACTION_BOUNDS

    def random_rollout(goal, i):
        p = home_pose()
        d = se3.pose_distance(p, goal.goal_pose, rc.weights)
        ret = 0.0
        for _ in range(50):
            p = se3.apply_action(p, rng.uniform(-b, b))
            d_new = se3.pose_distance(p, goal.goal_pose, rc.weights)
            r = compute_reward(d, d_new, rc)
            ret += r
            d = d_new
            if r == rc.goal_bonus:
                break
        return ret

    wins = sum(random_rollout(g, i) >= cfg.success_return for i in range(200))
    assert wins / 200 < 0.05


class Scripted:
    """Evaluator returning a fixed verdict per goal id."""

    def __init__(self, solves):
        self.solves = solves

    def __call__(self, goal):
        return 10.0 if self.solves(goal.goal_id) else 0.0


def test_solving_k_goals_advances_one_stage(ctx):
    cfg = CurriculumConfig(goals_per_stage=3, p_revisit=0.0)
    rng = np.random.default_rng(0)
    st = init_curriculum(cfg, ctx, rng)
    fails = Scripted(lambda i: False)
    for k in range(2):
        update_curriculum(st, 10.0, fails, ctx, rng)
        assert st.stage.stage_idx == 0 and st.solved_count_this_stage == k + 1
    update_curriculum(st, 10.0, fails, ctx, rng)
    assert st.stage.stage_idx == 1 and st.solved_count_this_stage == 0
    assert st.current.stage_idx == 1


def test_failed_goal_stays_current(ctx):
    cfg = CurriculumConfig()
    rng = np.random.default_rng(0)
    st = init_curriculum(cfg, ctx, rng)
    g = st.current
    update_curriculum(st, 1.0, Scripted(lambda i: False), ctx, rng)
    assert st.current is g and not g.solved and st.solved_count_this_stage == 0


def test_already_solved_goals_never_added(ctx):
    cfg = CurriculumConfig(goals_per_stage=50, p_revisit=0.0)
    rng = np.random.default_rng(1)
    st = init_curriculum(cfg, ctx, rng)
    ev = Scripted(lambda i: i % 3 != 0)  # the policy already solves two of every three goals
    for _ in range(10):
        update_curriculum(st, 10.0, ev, ctx, rng)
        assert all(not g.solved for g in st.active_goals)
    skipped = [r["goal_id"] for r in st.trace if r["event"] == "skip"]
    assert skipped and not any(g.goal_id in skipped for g in st.active_goals)
    assert all(r["goal_id"] % 3 == 0 for r in st.trace if r.get("source") == "fresh")
    assert st.solved_count_this_stage <= cfg.goals_per_stage


def test_revisit_frequency(ctx):
    cfg = CurriculumConfig(goals_per_stage=100000, p_revisit=0.2)
    rng = np.random.default_rng(2)
    st = init_curriculum(cfg, ctx, rng)
    # one solved goal so revisits are possible; evaluator always fails fresh goals
    update_curriculum(st, 10.0, Scripted(lambda i: False), ctx, rng)
    n, revisits = 10000, 0
    stage_before = st.stage.stage_idx
    for _ in range(n):
        before = len(st.trace)
        update_curriculum(st, 10.0, Scripted(lambda i: False), ctx, rng)
        revisits += any(r.get("source") == "revisit" for r in st.trace[before:])
    assert st.stage.stage_idx == stage_before
    sigma = math.sqrt(n * 0.2 * 0.8)
    assert abs(revisits - 0.2 * n) < 3 * sigma


def test_curriculum_deterministic(ctx):
    def run():
        rng = np.random.default_rng(7)
        st = init_curriculum(CurriculumConfig(goals_per_stage=2), ctx, rng)
        for i in range(8):
            update_curriculum(st, 10.0 if i % 2 else 0.0, Scripted(lambda j: j % 2 == 0), ctx, rng)
        return st.trace, [g.goal_pose.to_list() for g in st.all_goals()]

    assert run() == run()


def test_max_stage_caps_progress(ctx):
    cfg = CurriculumConfig(goals_per_stage=1, max_stage=1, p_revisit=0.0)
    rng = np.random.default_rng(3)
    st = init_curriculum(cfg, ctx, rng)
    for _ in range(5):
        update_curriculum(st, 10.0, Scripted(lambda i: False), ctx, rng)
    assert st.stage.stage_idx == 1 and st.complete
