import numpy as np
import pytest

from longlab.optim import OptimizerState, adamw_step, lr_at
from longlab.tensor import Tensor


def _params(values):
    return {"w": Tensor(np.array(values, dtype=np.float64), requires_grad=True)}


def test_zero_grad_zero_decay_leaves_params():
    params = _params([1.0, -2.0])
    state = OptimizerState(params, lr=0.1, weight_decay=0.0)
    adamw_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])
    assert state.step == 1


def test_first_step_moves_by_about_lr():
    # bias-corrected moments at t=1: update = lr * g / (|g| + eps) ~= lr * sign(g)
    params = _params([0.0, 0.0])
    state = OptimizerState(params, lr=0.01, weight_decay=0.0)
    g = np.array([0.3, -0.7])
    adamw_step(params, {"w": g}, state)
    np.testing.assert_allclose(params["w"].data, -0.01 * np.sign(g), rtol=1e-6)


def test_decoupled_decay_shrinks_params():
    params = _params([2.0, -4.0])
    state = OptimizerState(params, lr=0.1, weight_decay=0.5)
    adamw_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(params["w"].data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_shape_mismatch_rejected():
    from longlab.errors import ShapeError

    params = _params([1.0, 2.0])
    state = OptimizerState(params, lr=0.1)
    with pytest.raises(ShapeError):
        adamw_step(params, {"w": np.zeros(3)}, state)


def test_lr_schedule_warmup_then_linear_decay():
    assert lr_at(0, 1.0, warmup_steps=4, total_steps=12) == pytest.approx(0.25)
    assert lr_at(3, 1.0, warmup_steps=4, total_steps=12) == pytest.approx(1.0)
    assert lr_at(8, 1.0, warmup_steps=4, total_steps=12) == pytest.approx(0.5)
    assert lr_at(12, 1.0, warmup_steps=4, total_steps=12) == pytest.approx(0.0)
    assert lr_at(5, 2.0, warmup_steps=0, total_steps=10) == pytest.approx(1.0)
