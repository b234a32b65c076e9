"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The statistical reproductions (4, 5) run the bundled scenarios at their
committed seeds and full sample counts; expect tens of minutes.
"""

import time

import numpy as np
import pytest

from safepic.config import parse_config
from safepic.sim import episode_seeds, run_batch, verify_manifold
from safepic.verify import (
    cancellation_check,
    gradient_check,
    lq_sanity,
    path_value_oracle,
    qp_oracle_check,
    shift_invariance_check,
    weights_check,
)


@pytest.fixture
def say(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
        return passed

    return emit


def test_criterion_1_manifold_invariance(say):
    cfg = parse_config("scenario1")
    t0 = time.time()
    coarse = verify_manifold(cfg, dt=1e-3)
    elapsed = time.time() - t0
    fine = verify_manifold(cfg, dt=5e-4)
    reduction = coarse / fine
    ok = coarse < 1e-3 and reduction >= 1.5 and elapsed < 60.0
    detail = f"max dev {coarse:.3e} (< 1e-3), halving dt reduces by {reduction:.2f}x (>= 1.5), dt=1e-3 run {elapsed:.1f}s (< 60s)"
    assert say(1, "manifold invariance", ok, detail), detail


def test_criterion_2_path_value_oracle(say):
    t0 = time.time()
    result = path_value_oracle(n_instances=100, tol=1e-12)
    detail = f"max |diff| {result.value:.3e} over 100 instances (<= 1e-12), {time.time() - t0:.1f}s"
    assert say(2, "path-value oracle", result.passed, detail), detail


def test_criterion_3_lq_sanity(say):
    t0 = time.time()
    result = lq_sanity(n_samples=100_000, seeds=(0, 1, 2, 3, 4), tol=0.15)
    elapsed = time.time() - t0
    ok = result.passed and elapsed < 120.0
    detail = f"worst median rel. err {result.value:.3f} at 10 states (< 0.15), {elapsed:.1f}s (< 120s)"
    assert say(3, "LQ sanity", ok, detail), detail


def _safe_count(report):
    return sum(m.safe for m in report.metrics)


def test_criterion_4_safety_scenario1(say):
    cfg = parse_config("scenario1")
    seeds = episode_seeds(cfg.master_seed, 8)
    t0 = time.time()
    bas = run_batch(cfg.with_controller("bas-pic"), seeds=seeds)
    pen = run_batch(cfg.with_controller("penalty-pic"), seeds=seeds)
    elapsed = time.time() - t0
    n_bas, n_pen = _safe_count(bas), _safe_count(pen)
    ok = n_bas >= 7 and n_bas > n_pen and n_pen <= 7 and elapsed < 1800
    detail = (
        f"bas-pic safe {n_bas}/8 (>= 7), penalty-pic safe {n_pen}/8 (< bas-pic, >= 1 unsafe), "
        f"min margins bas {bas.summary['min_margin']:.3g} pen {pen.summary['min_margin']:.3g}, "
        f"{elapsed / 60:.1f} min (< 30)"
    )
    assert say(4, "scenario-1 safety", ok, detail), detail


def test_criterion_5_safety_and_goal_scenario2(say):
    cfg = parse_config("scenario2")
    seeds = episode_seeds(cfg.master_seed, 5)
    t0 = time.time()
    reports = {c: run_batch(cfg.with_controller(c), seeds=seeds) for c in ("bas-pic", "penalty-pic", "cbf-npo", "cbf-po")}
    elapsed = time.time() - t0
    bas = reports["bas-pic"]
    n_safe = _safe_count(bas)
    reached = sum(max(m.goal_errors) < 5.0 for m in bas.metrics)
    baseline_fail = any(
        (not m.safe) or max(m.goal_errors) > 10.0 for c, r in reports.items() if c != "bas-pic" for m in r.metrics
    )
    ok = n_safe == 5 and reached >= 4 and baseline_fail and elapsed < 1800
    worst = {c: f"{_safe_count(r)}/5 safe, max goal err {r.summary['max_goal_error']:.1f}m" for c, r in reports.items()}
    detail = (
        f"bas-pic safe {n_safe}/5 (= 5), goal < 5m in {reached}/5 (>= 4), "
        f"a baseline unsafe or > 10m: {baseline_fail}; {worst}; {elapsed / 60:.1f} min (< 30)"
    )
    assert say(5, "scenario-2 safety and task completion", ok, detail), detail


def test_criterion_6_reduction_equivalence(say):
    cfg = parse_config("scenario1", ["obstacles=[]", "penalty.weight=0.0"])
    seeds = episode_seeds(cfg.master_seed, 3)
    a = run_batch(cfg.with_controller("bas-pic"), seeds=seeds)
    b = run_batch(cfg.with_controller("penalty-pic"), seeds=seeds)
    same = all(
        np.array_equal(ta.states, tb.states) and np.array_equal(ta.controls, tb.controls, equal_nan=True)
        for ta, tb in zip(a.trajectories, b.trajectories)
    )
    same = same and [m.to_dict() for m in a.metrics] == [m.to_dict() for m in b.metrics]
    detail = "bit-for-bit identical states, controls and metrics over 3 episodes" if same else "trajectories differ"
    assert say(6, "reduction equivalence", same, detail), detail


def test_criterion_7_gradient_and_weight_suites(say):
    results = [gradient_check(n_points=100), weights_check(), shift_invariance_check(), cancellation_check()]
    ok = all(r.passed for r in results)
    detail = "; ".join(r.line() for r in results)
    assert say(7, "gradient/weight suites", ok, detail), detail


def test_criterion_8_qp_oracle(say):
    result = qp_oracle_check(n_instances=50, tol=1e-3)
    detail = f"max |u - u_grid| {result.value:.3e} on 50 instances (< 1e-3), idempotent: {result.details.get('idempotent')}"
    assert say(8, "QP oracle", result.passed, detail), detail
