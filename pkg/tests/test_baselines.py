import numpy as np
import pytest

from safepic.baselines import (
    CbfFilterConfig,
    PenaltyCostConfig,
    PenaltySubsystemCost,
    cbf_filter,
    hocbf_constraint_row,
    obstacle_penalty,
    penalty_pic_control,
    solve_soft_qp,
)
from safepic.cost import GoalCoordCost, SubsystemCost
from safepic.dynamics import BarrierConstraint, BasSpec, assemble_augmented, h_value, uav_drift, unicycle_model
from safepic.pic import SamplerConfig, estimate_control, path_value_terms, sample_paths
from safepic.topology import AgentGraph, factorize
from safepic.verify import _grid_minimizer, qp_oracle_check, random_qp_instance

OBS = BarrierConstraint([17.0, 40.0], 8.0, 0)


def numeric_hocbf(obstacle, state, k1, k2, step=1e-6):
    """Row and rhs from finite differences of hdot along the unicycle flow."""
    state = np.asarray(state, float)

    def hdot(x):
        return h_value(obstacle, x[:2] + 0.0) * 0 + 2 * (x[:2] - obstacle.center) @ uav_drift(x)[:2]

    grad = np.array([(hdot(state + step * e) - hdot(state - step * e)) / (2 * step) for e in np.eye(4)])
    row = grad[2:4]
    const = grad @ uav_drift(state) + (k1 + k2) * hdot(state) + k1 * k2 * h_value(obstacle, state[:2])
    return row, -const


@pytest.mark.parametrize(
    "state",
    [[5.0, 5.0, 1.0, 0.3], [25.5, 41.0, 2.0, np.pi], [10.0, 38.0, 0.5, -1.0], [17.0, 30.0, 3.0, 1.5]],
)
def test_hocbf_row_matches_finite_difference(state):
    row, rhs = hocbf_constraint_row(OBS, state, 1.0, 2.0)
    row_fd, rhs_fd = numeric_hocbf(OBS, state, 1.0, 2.0)
    np.testing.assert_allclose(row, row_fd, rtol=1e-6, atol=1e-6)
    assert rhs == pytest.approx(rhs_fd, rel=1e-6, abs=1e-6)


def test_hocbf_far_and_tangential_is_inactive():
    # far away, heading tangentially: hdot = 0 and h is large
    row, rhs = hocbf_constraint_row(OBS, [17.0, 0.0, 1.0, 0.0])
    assert rhs < -1000
    assert 0.0 >= rhs


def test_hocbf_boundary_inward_demands_braking():
    # on the boundary moving straight at the center
    row, rhs = hocbf_constraint_row(OBS, [25.0, 40.0, 1.0, np.pi])
    assert rhs > 0
    assert row[0] < 0  # satisfied only by decelerating (u < 0)
    assert row @ np.zeros(2) < rhs


def test_hocbf_zero_velocity_row():
    row, _ = hocbf_constraint_row(OBS, [25.0, 44.0, 0.0, 0.7])
    assert row[1] == 0.0
    assert row[0] == pytest.approx(2 * (8.0 * np.cos(0.7) + 4.0 * np.sin(0.7)))


def test_cbf_filter_returns_feasible_base_unchanged():
    u = np.array([0.3, -0.1])
    out, info = cbf_filter(u, [17.0, 0.0, 1.0, 0.0], [OBS], CbfFilterConfig(), return_info=True)
    np.testing.assert_array_equal(out, u)
    assert not info["infeasible"]


def test_cbf_filter_single_constraint_is_projection():
    state = [25.0, 40.0, 1.0, np.pi]
    row, rhs = hocbf_constraint_row(OBS, state)
    u_base = np.array([0.5, 0.2])
    expected = u_base + (rhs - row @ u_base) / (row @ row) * row
    np.testing.assert_allclose(cbf_filter(u_base, state, [OBS], CbfFilterConfig()), expected, rtol=1e-12)


def test_cbf_filter_two_constraints_matches_grid():
    rng = np.random.default_rng(12)
    for _ in range(200):
        state, obstacles, u_base, A, b = random_qp_instance(rng)
        u = cbf_filter(u_base, state, obstacles, CbfFilterConfig())
        if np.sum(np.abs(A @ u - b) < 1e-9) == 2:
            np.testing.assert_allclose(u, _grid_minimizer(u_base, A, b), atol=1e-3)
            return
    pytest.fail("no two-active instance generated")


def test_cbf_filter_grid_oracle_and_idempotence():
    result = qp_oracle_check(n_instances=50, seed=4)
    assert result.passed, result.line()


def test_cbf_filter_with_box_bounds():
    # head-on approach: row (-8, 0), rhs 4.25, so accel <= -0.53125; turn rate clipped to 1
    cfg = CbfFilterConfig(u_bounds=((-1.0, -1.0), (1.0, 1.0)))
    state = [0.0, 0.0, 1.0, 0.0]
    obstacles = [BarrierConstraint([4.0, 0.0], 2.5)]
    row, rhs = hocbf_constraint_row(obstacles[0], state)
    np.testing.assert_allclose(row, [-8.0, 0.0])
    assert rhs == pytest.approx(4.25)
    u, info = cbf_filter(np.array([0.9, 3.0]), state, obstacles, cfg, return_info=True)
    assert not info["infeasible"]
    np.testing.assert_allclose(u, [-0.53125, 1.0], atol=1e-9)


def test_cbf_filter_infeasible_falls_back_to_soft():
    # inside the penumbra with tight bounds: the hard problem has no solution
    cfg = CbfFilterConfig(u_bounds=((-0.01, -0.01), (0.01, 0.01)))
    state = [3.1, 0.0, 3.0, np.pi]
    obstacles = [BarrierConstraint([0.0, 0.0], 3.0)]
    u, info = cbf_filter(np.zeros(2), state, obstacles, cfg, return_info=True)
    assert info["infeasible"]
    assert np.all(np.abs(u) <= 0.01 + 1e-12)


def test_soft_qp_tends_to_hard_solution():
    A = np.array([[1.0, 0.0]])
    b = np.array([1.0])
    u = solve_soft_qp(np.zeros(2), A, b, 1e8)
    np.testing.assert_allclose(u, [1.0, 0.0], atol=1e-6)


def test_obstacle_penalty_shapes():
    cfg = PenaltyCostConfig(GoalCoordCost([0, 0]), 50.0, "indicator", (OBS,))
    assert obstacle_penalty(cfg, [17.0, 40.0]) == 50.0
    assert obstacle_penalty(cfg, [0.0, 0.0]) == 0.0
    hinge = PenaltyCostConfig(GoalCoordCost([0, 0]), 2.0, "hinge", (OBS,))
    assert obstacle_penalty(hinge, [17.0, 40.0]) == 128.0
    pts = np.random.default_rng(0).uniform(0, 50, (200, 2))
    assert np.all(obstacle_penalty(hinge, pts) >= 0)


def test_penalty_config_strips_bas_terms():
    base = GoalCoordCost([1, 2], 3.5, 4.0, bas_weight=0.5, indicator_weight=50, bas_targets=[0.1])
    cfg = PenaltyCostConfig(base, 10.0, obstacles=(OBS,))
    assert cfg.base.bas_weight == 0 and cfg.base.indicator_weight == 0 and cfg.base.bas_targets is None
    with pytest.raises(ValueError):
        PenaltyCostConfig(base, -1.0)


def test_penalty_inside_obstacle_accrues_per_step():
    sub = factorize(AgentGraph(1), 4)[0]
    aug = assemble_augmented(sub, [unicycle_model()], None)
    cfg = PenaltyCostConfig(GoalCoordCost([45, 25]), 50.0, "indicator", (OBS,))
    cost = PenaltySubsystemCost(cfg, aug)
    sampler = SamplerConfig(n_samples=50, horizon_steps=4, eps=0.05, horizon_mode="fixed")
    batch = sample_paths(aug, np.array([17.0, 40.0, 0.0, 0.0]), sampler)
    state = path_value_terms(aug, cost, batch, 0.1)["state"]
    assert np.all(state >= 4 * 50.0 * 0.05 / 0.1 - 1e-9)


def test_penalty_zero_weight_equals_unaugmented_pic():
    sub = factorize(AgentGraph.complete(3), 4)[0]
    agents = [unicycle_model()] * 3
    base = GoalCoordCost([45, 25], 3.5, 44.72, 1.4, 1, 40.0, bas_weight=0.5, indicator_weight=50)
    sampler = SamplerConfig(n_samples=200, horizon_steps=6, eps=0.05, seed=3)
    Y0 = np.array([5, 5, 0.5, 0.3, 5, 45, 0.2, -0.4, 5, 25, 1.0, 0.0])
    a = penalty_pic_control(sub, agents, PenaltyCostConfig(base, 0.0), Y0, sampler, 0.1, stream=(1,))
    aug = assemble_augmented(sub, agents, BasSpec(0.5, ()))
    b = estimate_control(aug, SubsystemCost(base.without_bas_terms(), aug), Y0, sampler, 0.1, stream=(1,))
    np.testing.assert_array_equal(a.joint_control, b.joint_control)
    c = penalty_pic_control(sub, agents, PenaltyCostConfig(base, 0.0), Y0, sampler, 0.1, stream=(1,))
    np.testing.assert_array_equal(a.joint_control, c.joint_control)
