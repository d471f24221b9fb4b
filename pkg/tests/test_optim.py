"""Adam update rule: hand-checked single steps and bookkeeping invariants."""

import numpy as np
import pytest

from editsuggest.optim import adam_step, init_adam


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0]), "b": np.array(0.5)}
    state = init_adam(params)
    new_params, new_state = adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
    for k in params:
        np.testing.assert_array_equal(new_params[k], params[k])
    assert new_state.step == 1


def test_single_step_matches_hand_computation():
    """Bias-corrected first step with unit gradient moves a zero param to ~-lr."""
    params = {"w": np.array(0.0)}
    state = init_adam(params)
    new_params, new_state = adam_step(params, {"w": np.array(1.0)}, state)
    assert new_state.step == 1
    assert new_params["w"] == pytest.approx(-0.001, abs=1e-9)


def test_constant_gradient_strictly_decreases():
    params = {"w": np.array(0.0)}
    state = init_adam(params)
    seen = [params["w"].item()]
    for _ in range(2):
        params, state = adam_step(params, {"w": np.array(1.0)}, state)
        seen.append(params["w"].item())
    assert seen[2] < seen[1] < seen[0]


def test_step_counter_increments_by_one():
    params = {"w": np.zeros(3)}
    state = init_adam(params)
    for t in range(1, 5):
        params, state = adam_step(params, {"w": np.ones(3)}, state)
        assert state.step == t


def test_shape_mismatch_rejected():
    params = {"w": np.zeros(3)}
    state = init_adam(params)
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"w": np.ones(4)}, state)


def test_missing_gradient_treated_as_zero():
    params = {"w": np.array([1.0]), "frozen": np.array([2.0])}
    state = init_adam(params)
    new_params, _ = adam_step(params, {"w": np.array([1.0])}, state)
    np.testing.assert_array_equal(new_params["frozen"], params["frozen"])


def test_inputs_not_mutated():
    params = {"w": np.array([1.0])}
    state = init_adam(params)
    adam_step(params, {"w": np.array([0.5])}, state)
    np.testing.assert_array_equal(params["w"], [1.0])
    np.testing.assert_array_equal(state.first_moment["w"], [0.0])
