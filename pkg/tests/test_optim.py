import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgate.optim import SGD, SgdState, decayed_lr, sgd_momentum_step
from flowgate.tensor import Tensor


def scalar_param(w):
    return Tensor(np.array([w], dtype=np.float64), requires_grad=True)


def test_first_step_hand_values():
    w = scalar_param(1.0)
    state = SgdState(base_lr=0.1, momentum=0.9, decay=0.0)
    sgd_momentum_step([w], [np.array([1.0])], state)
    assert state.velocity[0][0] == pytest.approx(-0.1)
    assert w.data[0] == pytest.approx(0.9)
    sgd_momentum_step([w], [np.array([1.0])], state)
    assert state.velocity[0][0] == pytest.approx(-0.19)
    assert w.data[0] == pytest.approx(0.71)


def test_zero_gradient_from_rest_is_a_no_op():
    w = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    state = SgdState(base_lr=0.5)
    for _ in range(3):
        sgd_momentum_step([w], [np.zeros(2)], state)
    np.testing.assert_array_equal(w.data, [0.3, -2.0])


def test_matches_heavy_ball_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(3, 4))
    w0 = rng.normal(size=4)
    w = Tensor(w0.copy(), dtype=np.float64, requires_grad=True)
    state = SgdState(base_lr=0.01, momentum=0.9, decay=1e-6)
    ref_w, ref_v = w0.copy(), np.zeros(4)
    for t, g in enumerate(grads):
        ref_v = 0.9 * ref_v - 0.01 / (1 + 1e-6 * t) * g
        ref_w = ref_w + ref_v
        sgd_momentum_step([w], [g], state)
    np.testing.assert_allclose(w.data, ref_w, rtol=0, atol=1e-15)


@given(st.integers(0, 10**7))
@settings(max_examples=50, deadline=None)
def test_learning_rate_schedule(t):
    assert abs(decayed_lr(0.01, 1e-6, t) - 0.01 / (1 + 1e-6 * t)) < 1e-12


def test_schedule_is_tracked_per_update():
    w = scalar_param(0.0)
    opt = SGD([w], lr=0.01, momentum=0.9, decay=1e-6)
    lrs = []
    for _ in range(4):
        w.grad = np.array([1.0])
        lrs.append(opt.step())
    assert lrs == [0.01 / (1 + 1e-6 * t) for t in range(4)]


def test_none_gradient_treated_as_zero():
    w = scalar_param(2.0)
    opt = SGD([w], lr=0.1)
    opt.zero_grad()
    opt.step()
    assert w.data[0] == 2.0


def test_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        SGD([scalar_param(0.0)], lr=-1)
    with pytest.raises(ValueError):
        SGD([scalar_param(0.0)], momentum=1.0)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_momentum_step([scalar_param(0.0)], [np.zeros(2)], SgdState(0.1))
