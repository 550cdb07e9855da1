import math

import numpy as np
import pytest

from poems.errors import ContractError, NumericError, ShapeError
from poems.numerics import (Layer, MlpParams, OptState, adamw_step, finite_diff_check, init_mlp,
                            init_opt_state, mlp_backward, mlp_forward)


def straight_line_forward(params, x):
    # independent evaluation: explicit per-row loops, no shared helpers
    out = []
    for row in x:
        h = list(row)
        for layer in params.layers:
            nxt = []
            for j in range(layer.weight.shape[1]):
                s = layer.bias[j] + sum(h[i] * layer.weight[i, j] for i in range(len(h)))
                if layer.activation == "relu":
                    s = max(s, 0.0)
                elif layer.activation == "tanh":
                    s = math.tanh(s)
                nxt.append(s)
            h = nxt
        out.append(h)
    return np.array(out)


def test_identity_layer_passes_input_through():
    p = MlpParams([Layer(np.eye(2), np.zeros(2))])
    y, _ = mlp_forward(p, np.array([[1.0, 2.0]]))
    assert np.array_equal(y, [[1.0, 2.0]])


def test_empty_batch_gives_empty_output(rng):
    p = init_mlp([3, 5, 2], rng)
    y, _ = mlp_forward(p, np.zeros((0, 3)))
    assert y.shape == (0, 2)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_straight_line_evaluation(rng, act):
    p = init_mlp([4, 6, 3], rng, hidden_activation=act)
    for layer in p.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    x = rng.normal(size=(5, 4))
    y, _ = mlp_forward(p, x)
    assert np.allclose(y, straight_line_forward(p, x), atol=1e-13)


def test_forward_rejects_wrong_width(rng):
    with pytest.raises(ShapeError):
        mlp_forward(init_mlp([3, 2], rng), np.zeros((1, 4)))


def test_layer_dims_must_chain(rng):
    with pytest.raises(ShapeError):
        MlpParams([Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 1)), np.zeros(1))])


def test_linear_adjoint_gives_row_sums_of_weight():
    W = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    p = MlpParams([Layer(W, np.zeros(3))])
    y, cache = mlp_forward(p, np.array([[0.5, -1.0]]))
    _, d_in = mlp_backward(p, cache, np.ones_like(y))
    assert np.array_equal(d_in, [[6.0, 15.0]])


def test_zero_cotangent_gives_zero_gradients(rng):
    p = init_mlp([3, 4, 2], rng)
    y, cache = mlp_forward(p, rng.normal(size=(6, 3)))
    grads, d_in = mlp_backward(p, cache, np.zeros_like(y))
    assert not d_in.any()
    assert all(not dw.any() and not db.any() for dw, db in grads)


def test_backward_matches_finite_differences(rng):
    p = init_mlp([3, 5, 2], rng, hidden_activation="tanh")
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 2))

    def loss():
        y, cache = mlp_forward(p, x)
        grads, _ = mlp_backward(p, cache, c)
        named = {}
        for i, (dw, db) in enumerate(grads):
            named[f"l.{i}.weight"] = dw
            named[f"l.{i}.bias"] = db
        return float((y * c).sum()), named

    assert finite_diff_check(loss, p.named_arrays("l"), 1e-5) < 1e-4


def test_backward_rejects_foreign_cache(rng):
    p = init_mlp([3, 2], rng)
    q = init_mlp([3, 2], rng)
    y, cache = mlp_forward(p, np.ones((1, 3)))
    with pytest.raises(ContractError):
        mlp_backward(q, cache, np.ones_like(y))


def test_glorot_limits(rng):
    p = init_mlp([30, 20], rng)
    lim = math.sqrt(6 / 50)
    assert np.abs(p.layers[0].weight).max() <= lim
    assert not p.layers[0].bias.any()


def test_adamw_first_step_closed_form():
    params = {"t": np.zeros(1)}
    st = init_opt_state(params, lr=1e-3)
    adamw_step(params, {"t": np.ones(1)}, st)
    # m_hat = v_hat = 1, step = 1 / (1 + 1e-8)
    assert params["t"][0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)
    assert st.t == 1


def test_adamw_zero_gradient_is_identity():
    params = {"t": np.array([0.3, -2.0])}
    st = init_opt_state(params, lr=1e-3)
    adamw_step(params, {"t": np.zeros(2)}, st)
    assert np.array_equal(params["t"], [0.3, -2.0])


def test_adamw_decay_only_step():
    params = {"t": np.ones(1)}
    st = init_opt_state(params, lr=1e-3, weight_decay=0.01)
    adamw_step(params, {"t": np.zeros(1)}, st)
    assert params["t"][0] == pytest.approx(1 - 1e-5, abs=1e-15)


def test_adamw_decay_stays_out_of_moments():
    params = {"t": np.ones(1)}
    st = init_opt_state(params, lr=1e-3, weight_decay=0.5)
    adamw_step(params, {"t": np.zeros(1)}, st)
    assert st.m["t"][0] == 0.0 and st.v["t"][0] == 0.0


def test_adamw_rejects_non_finite_gradient():
    params = {"enc0.0.weight": np.zeros(2)}
    st = init_opt_state(params)
    with pytest.raises(NumericError, match="enc0.0.weight"):
        adamw_step(params, {"enc0.0.weight": np.array([0.0, np.nan])}, st)


def test_opt_state_validates_hyperparameters():
    with pytest.raises(ContractError):
        OptState(beta1=1.0)
    with pytest.raises(ContractError):
        OptState(lr=-1.0)


def test_fd_check_quadratic():
    theta = np.array([3.0])
    err = finite_diff_check(lambda: (float(theta[0] ** 2), {"t": 2 * theta.copy()}), {"t": theta})
    assert err < 1e-6


def test_fd_check_constant_loss():
    theta = np.array([1.0, 2.0])
    assert finite_diff_check(lambda: (4.0, {"t": np.zeros(2)}), {"t": theta}) == 0.0


def test_fd_check_reports_non_finite_as_failure():
    theta = np.array([1.0])
    err = finite_diff_check(lambda: (float(theta[0]), {"t": np.array([np.nan])}), {"t": theta})
    assert math.isinf(err)
