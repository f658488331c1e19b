import numpy as np
import pytest

from transfed.layers import ShapeError
from transfed.optim import Adam, adam_step
from transfed.params import ParameterSet


def make_params(values):
    return ParameterSet([("w", np.array(values, dtype=np.float64))])


def test_first_step_moves_by_lr():
    # with g = 1 everywhere the bias-corrected ratio is 1, so the delta is
    # -lr/(1 + eps)
    params = make_params([0.0, 0.0, 0.0])
    grads = make_params([1.0, 1.0, 1.0])
    opt = Adam(lr=0.01, weight_decay=0.0)
    opt.step(params, grads)
    assert np.allclose(params["w"], -0.01, atol=1e-9)


def test_zero_gradient_leaves_params_unchanged():
    params = make_params([1.5, -2.0])
    opt = Adam(weight_decay=0.0)
    opt.step(params, make_params([0.0, 0.0]))
    assert np.array_equal(params["w"], [1.5, -2.0])


def test_decay_only_step_scales_params():
    # zero gradient, weight decay 0.001, lr 0.01 -> multiply by (1 - 1e-5)
    params = make_params([2.0, -4.0])
    opt = Adam(lr=0.01, weight_decay=0.001)
    opt.step(params, make_params([0.0, 0.0]))
    assert np.allclose(params["w"], np.array([2.0, -4.0]) * (1.0 - 1e-5),
                       rtol=0, atol=1e-15)


def test_decay_applies_after_adam_delta():
    params = make_params([0.0])
    opt = Adam(lr=0.01, weight_decay=0.001)
    opt.step(params, make_params([1.0]))
    delta = -0.01 / (1.0 + 1e-8)
    assert params["w"][0] == pytest.approx(delta * (1.0 - 0.01 * 0.001), rel=1e-12)


def test_moments_track_shapes_and_stay_nonnegative():
    rng = np.random.default_rng(0)
    params = ParameterSet([
        ("a", rng.normal(size=(3, 2))),
        ("b", rng.normal(size=4)),
    ])
    opt = Adam()
    for _ in range(5):
        grads = ParameterSet([
            ("a", rng.normal(size=(3, 2))),
            ("b", rng.normal(size=4)),
        ])
        opt.step(params, grads)
    assert opt.step_count == 5
    for name in ("a", "b"):
        assert opt._m[name].shape == params[name].shape
        assert opt._v[name].shape == params[name].shape
        assert (opt._v[name] >= 0).all()


def test_shape_mismatch_rejected():
    params = make_params([1.0, 2.0])
    opt = Adam()
    with pytest.raises(ShapeError):
        opt.step(params, make_params([[1.0, 2.0]]))


def test_name_mismatch_rejected():
    params = make_params([1.0])
    opt = Adam()
    with pytest.raises(ShapeError):
        opt.step(params, ParameterSet([("other", np.zeros(1))]))


def test_functional_wrapper_matches_method():
    params = make_params([1.0, 2.0])
    twin = params.copy()
    grads = make_params([0.3, -0.7])
    a, b = Adam(), Adam()
    a.step(params, grads)
    out = adam_step(twin, grads, b)
    assert out.equals(params)


def test_deterministic_across_runs():
    rng = np.random.default_rng(1)
    g = rng.normal(size=6)
    results = []
    for _ in range(2):
        params = make_params(np.linspace(-1, 1, 6))
        opt = Adam()
        for _ in range(10):
            opt.step(params, make_params(g))
        results.append(params["w"].copy())
    assert np.array_equal(results[0], results[1])
