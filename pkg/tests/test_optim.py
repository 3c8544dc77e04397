import numpy as np
import pytest

from hsegnet.errors import ConfigError
from hsegnet.optim import Adam, SGDMomentum, make_optimizer
from hsegnet.tensor import Tensor


def param(v, g):
    t = Tensor(np.array(v, dtype=float), requires_grad=True)
    t.grad = np.array(g, dtype=float)
    return t


def test_sgd_momentum_steps():
    p = param([1.0], [0.5])
    opt = SGDMomentum(lr=0.1, momentum=0.9)
    opt.step([("p", p)])
    assert p.data[0] == pytest.approx(1.0 - 0.05)
    opt.step([("p", p)])
    # velocity 0.9 * 0.5 + 0.5
    assert p.data[0] == pytest.approx(0.95 - 0.1 * 0.95)


def test_adam_first_step_has_unit_scale():
    p = param([0.0, 0.0], [3.0, -0.01])
    Adam(lr=0.01).step([("p", p)])
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_missing_grad_is_skipped():
    p = Tensor(np.array([1.0]), requires_grad=True)
    SGDMomentum().step([("p", p)])
    assert p.data[0] == 1.0


def test_factory():
    assert isinstance(make_optimizer("adam", 0.1), Adam)
    assert isinstance(make_optimizer("sgd_momentum", 0.1), SGDMomentum)
    with pytest.raises((ConfigError, ValueError)):
        make_optimizer("lbfgs", 0.1)
