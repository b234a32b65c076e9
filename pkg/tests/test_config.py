import numpy as np
import pytest
import yaml

from safepic.config import ConfigError, apply_overrides, build_config, bundled_scenarios, load_raw, parse_config


def test_bundled_scenarios_listed():
    assert {"scenario1", "scenario2"} <= set(bundled_scenarios())


def test_scenario1_values():
    cfg = parse_config("scenario1")
    assert cfg.n_agents == 3 and len(cfg.obstacles) == 3
    assert cfg.dt == 0.05 and cfg.t_final == 20.0 and cfg.bas.gamma == 0.5
    assert (cfg.noise.sigma, cfg.noise.nu) == (0.1, 0.05)
    np.testing.assert_array_equal(cfg.starts[:, :2], [[5, 5], [5, 45], [5, 25]])
    np.testing.assert_array_equal(cfg.goals, [[45, 25]] * 3)
    assert [c.goal_weight for c in cfg.costs] == [3.5, 3.5, 6.0]
    assert [c.coord_weight for c in cfg.costs] == [1.4, 1.4, 0.0]
    assert [c.bas_weight for c in cfg.costs] == [0.5, 1.5, 0.5]
    assert all(c.indicator_weight == 50.0 and c.indicator_threshold == 0.01 for c in cfg.costs)
    assert cfg.coordination_pairs() == [(0, 1)]
    assert cfg.costs[0].d_max == pytest.approx(np.sqrt(2000))
    assert cfg.costs[0].d_pair_max == 40.0


def test_scenario2_values():
    cfg = parse_config("scenario2")
    assert len(cfg.obstacles) == 5 and cfg.dt == 0.2
    np.testing.assert_array_equal(cfg.starts[:, :2], [[2.5, 2.5], [2.5, 70], [2.5, 40]])
    np.testing.assert_array_equal(cfg.goals, [[45, 45]] * 3)
    assert [c.goal_weight for c in cfg.costs] == [2.0, 2.0, 3.0]
    assert [c.coord_weight for c in cfg.costs] == [0.5, 0.5, 0.0]
    assert [c.bas_weight for c in cfg.costs] == [0.8] * 3
    assert [c.indicator_weight for c in cfg.costs] == [24.0, 24.0, 48.0]


def test_start_in_obstacle_rejected_with_field_path():
    with pytest.raises(ConfigError, match=r"agents\.0\.start"):
        parse_config("scenario1", ["agents.0.start=[17.0, 40.0, 0.0, 0.0]"])


def test_missing_field_rejected(tmp_path):
    raw = load_raw("scenario1")
    del raw["dt"]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(ConfigError, match=r"^dt: missing"):
        parse_config(path)


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigError, match=r"obstacles\.1\.center"):
        parse_config("scenario1", ["obstacles.1.center=[1.0, 2.0, 3.0]"])
    with pytest.raises(ConfigError, match=r"costs: expected 3"):
        raw = load_raw("scenario1")
        raw["costs"] = raw["costs"][:2]
        build_config(raw)


def test_unknown_override_lists_valid_keys():
    with pytest.raises(ConfigError) as exc:
        parse_config("scenario1", ["sampler.nsamples=10"])
    assert "sampler.n_samples" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_config("scenario1", ["lam"])


def test_override_equals_file_edit(tmp_path):
    raw = load_raw("scenario1")
    raw["lam"] = 0.7
    raw["costs"][2]["goal_weight"] = 4.0
    path = tmp_path / "edited.yaml"
    path.write_text(yaml.safe_dump(raw))
    a = parse_config(path)
    b = parse_config("scenario1", ["lam=0.7", "costs.2.goal_weight=4.0"])
    assert a.lam == b.lam == 0.7
    for ca, cb in zip(a.costs, b.costs):
        for name in vars(ca):
            np.testing.assert_array_equal(getattr(ca, name), getattr(cb, name))


def test_override_without_mutating_source():
    raw = load_raw("scenario1")
    apply_overrides(raw, ["dt=0.1"])
    assert raw["dt"] == 0.05


def test_sampler_eps_defaults_to_dt():
    assert parse_config("scenario2").sampler.eps == 0.2
    assert parse_config("scenario2", ["sampler.eps=0.1"]).sampler.eps == 0.1


def test_bad_values_become_config_errors():
    for ov in ["controller=mppi", "dt=0.3", "graph.n_agents=4", "costs.0.coord_partner=0", "obstacles.0.radius=-1"]:
        with pytest.raises(ConfigError):
            parse_config("scenario1", [ov])


def test_no_such_file():
    with pytest.raises(ConfigError, match="no such file"):
        parse_config("/nonexistent/file.yaml")
