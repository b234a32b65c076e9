import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safepic.cost import (
    GoalCoordCost,
    SubsystemCost,
    TerminalCost,
    cancellation_weights,
    default_bas_targets,
    freeze_episode_constants,
    running_cost,
    state_cost_gradient_direct,
    terminal_cost,
)
from safepic.dynamics import BarrierConstraint, BasSpec, DimensionError, assemble_augmented, bas_init, unicycle_model
from safepic.topology import AgentGraph, factorize

STARTS = np.array([[5.0, 5.0], [5.0, 45.0], [5.0, 25.0]])
GOAL = np.array([45.0, 25.0])
OBSTACLES = (
    BarrierConstraint([17.0, 40.0], 8.0, 0),
    BarrierConstraint([22.0, 16.0], 7.0, 1),
    BarrierConstraint([35.0, 30.0], 5.0, 2),
)


def subsystem(spec=None, central=0):
    sub = factorize(AgentGraph.complete(3), state_dim=4)[central]
    return assemble_augmented(sub, [unicycle_model()] * 3, spec)


def joint_state(aug, positions, z=None):
    Y = np.zeros(aug.total_dim)
    for k, member in enumerate(aug.subsystem.members):
        Y[aug.member_position_indices(k)] = positions[member]
    if z is not None:
        Y[aug.bas_slice] = z
    return Y


def uav1_cost(spec):
    d_max, d_pair = freeze_episode_constants(STARTS, [GOAL] * 3, [(0, 1)])
    return GoalCoordCost(
        goal=GOAL,
        goal_weight=3.5,
        d_max=d_max[0],
        coord_weight=1.4,
        coord_partner=1,
        d_pair_max=d_pair[(0, 1)],
        bas_weight=0.5,
        bas_targets=default_bas_targets(spec, GOAL),
        indicator_weight=50.0,
    )


def test_cancellation_weights_scenario_noise():
    w = cancellation_weights(np.diag([0.1, 0.05] * 3), 0.1, block_size=2)
    assert len(w.R_blocks) == 3
    for block in w.R_blocks:
        np.testing.assert_allclose(block, np.diag([10.0, 40.0]), rtol=1e-14)


def test_cancellation_weights_unit_entries():
    w = cancellation_weights(np.full(4, 0.1), 0.01)
    np.testing.assert_allclose(np.diag(w.R), 1.0, rtol=1e-14)


@given(
    st.lists(st.floats(1e-3, 10.0), min_size=1, max_size=8),
    st.floats(1e-3, 100.0),
)
@settings(max_examples=100, deadline=None)
def test_cancellation_condition_holds(diag, lam):
    sigma = np.diag(diag)
    R = cancellation_weights(sigma, lam).R
    assert np.max(np.abs(sigma @ sigma.T @ R - lam * np.eye(len(diag)))) <= 1e-12 * max(1.0, lam)


@pytest.mark.parametrize("lam, diag", [(0.1, [0.1, 0.0]), (0.0, [0.1, 0.1]), (-1.0, [0.1, 0.1])])
def test_cancellation_weights_rejects(lam, diag):
    with pytest.raises(ValueError):
        cancellation_weights(np.array(diag), lam)


def test_freeze_episode_constants():
    d_max, d_pair = freeze_episode_constants(STARTS, [GOAL] * 3, [(0, 1)])
    assert d_max[0] == pytest.approx(np.sqrt(2000.0), rel=1e-15)
    assert d_max[0] == pytest.approx(44.7214, abs=1e-4)
    assert d_pair[(0, 1)] == 40.0
    d0, _ = freeze_episode_constants([[3.0, 4.0]], [[3.0, 4.0]])
    assert d0[0] == 0.0


def test_running_cost_at_start_is_zero_for_distance_terms():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cfg = uav1_cost(spec).without_bas_terms()
    Y = joint_state(aug, {0: STARTS[0], 1: STARTS[1], 2: STARTS[2]})
    assert running_cost(cfg, Y, aug) == pytest.approx(0.0, abs=1e-12)


def test_running_cost_at_goal_keeps_only_shift():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cfg = uav1_cost(spec)
    partner = GOAL + np.array([0.0, 40.0])
    Y = joint_state(aug, {0: GOAL, 1: partner, 2: STARTS[2]}, z=cfg.bas_targets)
    assert running_cost(cfg, Y, aug) == pytest.approx(-3.5 * np.sqrt(2000.0), rel=1e-13)


def test_indicator_product_fires_only_when_all_exceed():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cfg = GoalCoordCost(goal=GOAL, indicator_weight=50.0)
    Y = joint_state(aug, {0: GOAL, 1: GOAL, 2: GOAL}, z=[0.02, 0.02, 0.02])
    assert running_cost(cfg, Y, aug) == 50.0
    Y[aug.bas_slice.start] = 0.005
    assert running_cost(cfg, Y, aug) == 0.0


def test_indicator_sum_mode():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cfg = GoalCoordCost(goal=GOAL, indicator_weight=50.0, indicator_mode="sum")
    Y = joint_state(aug, {0: GOAL, 1: GOAL, 2: GOAL}, z=[0.02, 0.005, 0.02])
    assert running_cost(cfg, Y, aug) == 100.0


def test_bas_term_on_manifold_at_goal_is_zero():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cfg = GoalCoordCost(goal=GOAL, bas_weight=0.5, bas_targets=default_bas_targets(spec, GOAL))
    z = bas_init(spec, np.array([*GOAL, 0.0, 0.0]))
    Y = joint_state(aug, {0: GOAL, 1: GOAL, 2: GOAL}, z=z)
    assert running_cost(cfg, Y, aug) == pytest.approx(0.0, abs=1e-20)


def test_running_cost_batched_and_dimension_checked():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cfg = uav1_cost(spec)
    Y = np.tile(joint_state(aug, {0: GOAL, 1: GOAL, 2: GOAL}), (4, 6, 1))
    assert running_cost(cfg, Y, aug).shape == (4, 6)
    with pytest.raises(DimensionError):
        running_cost(cfg, np.zeros(12), aug)


def test_coordination_partner_uses_subsystem_layout():
    aug = subsystem(None, central=1)
    cfg = GoalCoordCost(goal=GOAL, coord_weight=1.0, coord_partner=0, d_pair_max=0.0)
    Y = joint_state(aug, {0: np.array([0.0, 0.0]), 1: np.array([3.0, 4.0]), 2: np.array([9.0, 9.0])})
    assert running_cost(cfg, Y, aug) == pytest.approx(5.0)


@given(st.floats(-100, 100), st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_running_cost_translation_invariant(dx, dy):
    aug = subsystem(None)
    shift = np.array([dx, dy])
    pos = {0: np.array([12.0, 7.0]), 1: np.array([3.0, 30.0]), 2: np.array([8.0, 20.0])}
    d_max, d_pair = freeze_episode_constants(STARTS, [GOAL] * 3, [(0, 1)])
    base = GoalCoordCost(GOAL, 3.5, d_max[0], 1.4, 1, d_pair[(0, 1)])
    moved = GoalCoordCost(GOAL + shift, 3.5, d_max[0], 1.4, 1, d_pair[(0, 1)])
    q0 = running_cost(base, joint_state(aug, pos), aug)
    q1 = running_cost(moved, joint_state(aug, {k: v + shift for k, v in pos.items()}), aug)
    assert q1 == pytest.approx(q0, abs=1e-9)


def test_terminal_cost_modes():
    aug = subsystem(None)
    Y = joint_state(aug, {0: GOAL + [3.0, 0.0], 1: GOAL, 2: GOAL})
    assert terminal_cost(TerminalCost(), Y, aug) == 0.0
    assert terminal_cost(TerminalCost("goal-distance", 2.0, GOAL), Y, aug) == pytest.approx(6.0)
    at_goal = joint_state(aug, {0: GOAL, 1: GOAL, 2: GOAL})
    assert terminal_cost(TerminalCost("goal-distance", 2.0, GOAL), at_goal, aug) == 0.0
    with pytest.raises(ValueError):
        TerminalCost("quadratic")


def test_gradient_zero_for_uav_direct_coordinates():
    spec = BasSpec(0.5, OBSTACLES)
    aug = subsystem(spec)
    cost = SubsystemCost(uav1_cost(spec), aug)
    Y = joint_state(aug, {0: STARTS[0], 1: STARTS[1], 2: STARTS[2]}, z=bas_init(spec, np.r_[STARTS[0], 0, 0]))
    Y[aug.direct_indices] = 1.3
    grad = state_cost_gradient_direct(cost, Y, aug.direct_indices)
    np.testing.assert_array_equal(grad, np.zeros(6))


def test_gradient_quadratic_and_constant():
    quad = lambda Y: 0.5 * np.sum(np.asarray(Y)[..., :2] ** 2, axis=-1)  # noqa: E731
    np.testing.assert_allclose(state_cost_gradient_direct(quad, np.array([1.0, 2.0, 5.0]), [0, 1]), [1.0, 2.0], atol=1e-6)
    const = lambda Y: np.full(np.shape(Y)[:-1], 7.0)  # noqa: E731
    np.testing.assert_array_equal(state_cost_gradient_direct(const, np.ones(3), [0, 2]), [0.0, 0.0])
