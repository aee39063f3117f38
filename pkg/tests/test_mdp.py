import json

import numpy as np
import pytest

from rbengine.errors import InputError
from rbengine.instances import builtin
from rbengine.mdp import (
    ArmConfig,
    RBInstance,
    instance_from_dict,
    load_instance,
    reward,
    save_instance,
    validate,
)


def test_periodic_counterexample_is_valid():
    report = validate(builtin("periodic-two-state"))
    assert report.ok
    assert report.violations == ()


def test_nonstochastic_row_reported():
    inst = RBInstance(2, [[0.5, 0.4], [0.0, 1.0]], [[1, 0], [0, 1]],
                      [0, 0], [0, 0], alpha=0.5)
    report = validate(inst)
    assert not report.ok
    assert any("row 0 not stochastic" in v for v in report.violations)


def test_alpha_out_of_range_reported():
    inst = RBInstance(2, [[1, 0], [0, 1]], [[1, 0], [0, 1]],
                      [0, 0], [0, 0], alpha=1.0)
    report = validate(inst)
    assert any("alpha out of range" in v for v in report.violations)


def test_validate_idempotent_and_pure():
    inst = builtin("three-state-nongap")
    before = inst.p0.copy()
    r1 = validate(inst)
    r2 = validate(inst)
    assert r1 == r2
    np.testing.assert_array_equal(inst.p0, before)


def test_reward_eight_state_values():
    inst = builtin("eight-state-nongap")
    assert reward(inst, 7, 0) == 0.1
    assert reward(inst, 0, 1) == 1.0 / 300.0


def test_reward_zero_initialized():
    inst = RBInstance(3, np.eye(3), np.eye(3), np.zeros(3), np.zeros(3), 0.5)
    assert reward(inst, 1, 0) == 0.0


def test_reward_index_errors():
    inst = builtin("two-state-cycle")
    with pytest.raises(IndexError):
        reward(inst, 2, 0)
    with pytest.raises(IndexError):
        reward(inst, 0, 5)


def test_r_max_and_beta():
    inst = builtin("eight-state-nongap")
    assert inst.r_max == 0.1
    assert inst.beta == 0.5
    inst = builtin("non-sa-8")
    assert inst.beta == pytest.approx(0.4)


def test_transition_rows_are_distributions_empirically():
    # sampling frequencies should match P(s, a, .) within 4-sigma
    inst = builtin("three-state-nongap")
    rng = np.random.default_rng(7)
    n = 100_000
    for s in range(3):
        for a in (0, 1):
            p_row = inst.transition(a)[s]
            draws = rng.choice(3, size=n, p=p_row)
            freq = np.bincount(draws, minlength=3) / n
            sigma = np.sqrt(p_row * (1 - p_row) / n)
            assert np.all(np.abs(freq - p_row) <= 4 * sigma + 1e-12)


def test_arm_config_integrality():
    inst = builtin("three-state-nongap")  # alpha = 0.4
    cfg = ArmConfig.for_instance(inst, 10)
    assert cfg.budget == 4
    with pytest.raises(InputError):
        ArmConfig.for_instance(inst, 3)  # 1.2 arms not integral


def test_arm_config_initial_rules():
    inst = builtin("two-state-cycle")
    cfg = ArmConfig.for_instance(inst, 4, initial_states="all-state-1")
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(cfg.draw_initial_states(2, rng), [1, 1, 1, 1])
    with pytest.raises(InputError):
        ArmConfig.for_instance(inst, 4, initial_states="all-state-9")
    with pytest.raises(InputError):
        ArmConfig.for_instance(inst, 4, initial_states=[0, 1, 0])  # wrong length
    cfg = ArmConfig.for_instance(inst, 4, initial_states=[0, 1, 0, 1])
    np.testing.assert_array_equal(cfg.draw_initial_states(2, rng), [0, 1, 0, 1])


def test_json_roundtrip(tmp_path):
    inst = builtin("non-sa-8")
    path = tmp_path / "inst.json"
    save_instance(inst, path)
    loaded = load_instance(str(path))
    np.testing.assert_allclose(loaded.p0, inst.p0)
    np.testing.assert_allclose(loaded.p1, inst.p1)
    np.testing.assert_allclose(loaded.r1, inst.r1)
    assert loaded.alpha == inst.alpha
    assert loaded.name == inst.name


def test_normalize_rows_flag():
    d = builtin("two-state-cycle").to_json_dict()
    d["p0"][0][0] += 3e-7  # small rounding error
    with_flag = instance_from_dict(d, normalize_rows=True)
    assert validate(with_flag).ok
    without = instance_from_dict(d)
    assert not validate(without).ok


def test_load_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(InputError):
        load_instance(str(path))
