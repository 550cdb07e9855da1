import math

import numpy as np
import pytest

from poems import model as M
from poems.check import tempered_product_moments
from poems.errors import ContractError, ShapeError
from poems.numerics import Layer, MlpParams, finite_diff_check, init_mlp


def constant_encoder(d, k, b_mu, b_lv):
    return MlpParams([Layer(np.zeros((d, 2 * k)), np.concatenate([b_mu, b_lv]))])


def post(mu, var):
    return M.ModalityPosterior(np.atleast_2d(np.asarray(mu, float)), np.log(np.atleast_2d(np.asarray(var, float))))


# ---------------------------------------------------------------- encoder

def test_constant_encoder():
    enc = constant_encoder(4, 2, np.array([0.5, -1.0]), np.array([0.2, -0.3]))
    p = M.encode(np.random.default_rng(0).normal(size=(3, 4)), enc)
    assert np.array_equal(p.mu, np.tile([0.5, -1.0], (3, 1)))
    assert np.allclose(p.var, np.tile(np.exp([0.2, -0.3]), (3, 1)), rtol=1e-15)


def test_logvar_clamp():
    enc = constant_encoder(2, 1, np.zeros(1), np.array([50.0]))
    assert M.encode(np.zeros((1, 2)), enc).var[0, 0] == math.exp(10.0)
    enc = constant_encoder(2, 1, np.zeros(1), np.array([-50.0]))
    assert M.encode(np.zeros((1, 2)), enc).var[0, 0] == math.exp(-10.0)


def test_encoder_names_omic_on_bad_width(rng):
    with pytest.raises(ShapeError, match="mrna"):
        M.encode(np.zeros((1, 5)), init_mlp([4, 2], rng), "mrna")


def test_encoder_gradient(rng):
    enc = init_mlp([4, 6, 4], rng, hidden_activation="tanh")
    x = rng.normal(size=(3, 4))
    c1, c2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

    def loss():
        p, cache = M.encode_forward(x, enc)
        # scalar of (mu, var): sum c1*mu + c2*var
        grads = M.encode_backward(enc, cache, c1, c2 * p.var)
        named = {f"e.{i}.weight": g[0] for i, g in enumerate(grads)}
        named.update({f"e.{i}.bias": g[1] for i, g in enumerate(grads)})
        return float((c1 * p.mu + c2 * p.var).sum()), named

    assert finite_diff_check(loss, enc.named_arrays("e")) < 1e-4


# ---------------------------------------------------------------- gating

def zero_gate(v, k):
    return MlpParams([Layer(np.zeros((2 * v * k, v)), np.zeros(v))])


def test_zero_gate_is_uniform():
    ps = [post(np.ones((4, 2)), np.ones((4, 2))) for _ in range(3)]
    a = M.gate(ps, zero_gate(3, 2)).alpha
    assert np.array_equal(a, np.full((4, 3), 1 / 3))


def test_gate_softmax_arithmetic():
    ps = [post([[0.0]], [[1.0]]), post([[0.0]], [[1.0]])]
    g = MlpParams([Layer(np.zeros((4, 2)), np.array([math.log(3), 0.0]))])
    assert np.allclose(M.gate(ps, g).alpha, [[0.75, 0.25]], atol=1e-15)


def test_gate_rows_normalised(rng):
    ps = [post(rng.normal(size=(50, 3)), rng.uniform(0.1, 3, (50, 3))) for _ in range(3)]
    a = M.gate(ps, init_mlp([18, 8, 3], rng)).alpha
    assert np.abs(a.sum(axis=1) - 1).max() < 1e-9
    assert (a > 0).all() and (a < 1).all()


def test_gate_needs_a_modality(rng):
    with pytest.raises(ContractError):
        M.gate([], init_mlp([2, 1], rng))


# ---------------------------------------------------------------- fusion

def test_single_expert_is_identity():
    p = post([[0.3]], [[0.7]])
    f = M.poe_fuse([p], M.GatingWeights(np.ones((1, 1))))
    assert f.mu[0, 0] == 0.3
    assert abs(f.var[0, 0] - 0.7) < 1e-15


def test_equal_weights_two_experts():
    f = M.poe_fuse([post([[0.0]], [[1.0]]), post([[2.0]], [[1.0]])], M.GatingWeights(np.array([[0.5, 0.5]])))
    assert (f.mu[0, 0], f.var[0, 0]) == (1.0, 1.0)


def test_unequal_weights_against_tempered_product():
    f = M.poe_fuse([post([[0.0]], [[1.0]]), post([[2.0]], [[1.0]])], M.GatingWeights(np.array([[0.25, 0.75]])))
    assert f.mu[0, 0] == pytest.approx(1.5, abs=1e-15)
    assert f.var[0, 0] == pytest.approx(1.0, abs=1e-15)
    mean, var = tempered_product_moments([0.0, 2.0], [1.0, 1.0], [0.25, 0.75])
    assert abs(mean - 1.5) < 1e-6 and abs(var - 1.0) < 1e-6


def test_random_cases_against_tempered_product():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v, k = rng.integers(1, 5), rng.integers(1, 4)
        ps = [post(rng.normal(0, 2, (1, k)), np.exp(rng.uniform(-2, 2, (1, k)))) for _ in range(v)]
        a = rng.dirichlet(np.ones(v))[None]
        f = M.poe_fuse(ps, M.GatingWeights(a))
        for j in range(k):
            m, s2 = tempered_product_moments([p.mu[0, j] for p in ps], [p.var[0, j] for p in ps], a[0])
            assert abs(m - f.mu[0, j]) < 1e-6
            assert abs(s2 - f.var[0, j]) / s2 < 1e-6


def test_fused_variance_bound(rng):
    ps = [post(rng.normal(size=(20, 4)), rng.uniform(0.1, 3, (20, 4))) for _ in range(3)]
    a = rng.dirichlet(np.ones(3), size=20)
    f = M.poe_fuse(ps, M.GatingWeights(a))
    for v, p in enumerate(ps):
        assert (f.var <= p.var / a[:, v:v + 1] * (1 + 1e-12)).all()


def test_fused_mean_is_scale_free(rng):
    ps = [post(rng.normal(size=(5, 3)), rng.uniform(0.1, 3, (5, 3))) for _ in range(2)]
    a = rng.dirichlet(np.ones(2), size=5)
    raw = a * 7.3
    f1 = M.poe_fuse(ps, M.GatingWeights(a))
    f2 = M.poe_fuse(ps, M.GatingWeights(raw / raw.sum(axis=1, keepdims=True)))
    assert np.abs(f1.mu - f2.mu).max() < 1e-12


def test_fusion_shape_checks():
    with pytest.raises(ShapeError):
        M.poe_fuse([post([[0.0]], [[1.0]])], M.GatingWeights(np.ones((1, 2))))
    with pytest.raises(ContractError):
        M.poe_fuse([], M.GatingWeights(np.ones((1, 0))))


# ---------------------------------------------------------------- sampling

def test_zero_noise_returns_mean():
    f = M.FusedPosterior(np.array([[0.4, -1.0]]), np.array([[2.0, 3.0]]))
    assert np.array_equal(M.reparameterize(f, eps=np.zeros((1, 2))).z, f.mu)


def test_unit_noise():
    f = M.FusedPosterior(np.zeros((1, 1)), np.ones((1, 1)))
    assert M.reparameterize(f, eps=np.ones((1, 1))).z[0, 0] == 1.0


def test_monte_carlo_mean():
    n = 100_000
    mu = np.tile([[0.5, -2.0]], (n, 1))
    var = np.tile([[4.0, 0.25]], (n, 1))
    z = M.reparameterize(M.FusedPosterior(mu, var), rng=7).z
    assert (np.abs(z.mean(axis=0) - mu[0]) < 3 * np.sqrt(var[0]) / np.sqrt(n)).all()


def test_reparameterize_needs_noise_source():
    with pytest.raises(ContractError):
        M.reparameterize(M.FusedPosterior(np.zeros((1, 1)), np.ones((1, 1))))


# ---------------------------------------------------------------- decoder

def decoder(rng, k, d, hidden=(8,)):
    trunk = init_mlp([k, *hidden, 1], rng)
    for l in trunk.layers:
        l.bias[:] = rng.normal(size=l.bias.shape) * 0.1
    return M.DecoderParams(trunk, rng.normal(size=d))


@pytest.mark.parametrize("use_kernel", [False, True])
def test_all_ones_mask(rng, use_kernel):
    dec = decoder(rng, 3, 5)
    z = rng.normal(size=(4, 3))
    out = M.sparse_decode(z, np.ones((5, 3)), dec, use_kernel=use_kernel)
    from poems.numerics import mlp_forward
    base = mlp_forward(dec.trunk, z)[0]
    assert np.allclose(out, base + dec.bias, atol=1e-13)


@pytest.mark.parametrize("use_kernel", [False, True])
def test_zero_row_mask(rng, use_kernel):
    dec = decoder(rng, 3, 5)
    W = rng.normal(size=(5, 3))
    W[2] = 0
    out = M.sparse_decode(rng.normal(size=(4, 3)), W, dec, use_kernel=use_kernel)
    from poems.numerics import mlp_forward
    at_zero = mlp_forward(dec.trunk, np.zeros((1, 3)))[0][0, 0]
    assert np.allclose(out[:, 2], at_zero + dec.bias[2], atol=1e-14)


@pytest.mark.parametrize("shape", [(1, 1, 1), (7, 13, 3), (16, 40, 8), (5, 33, 32)])
@pytest.mark.parametrize("use_kernel", [False, True])
def test_vectorized_matches_reference(shape, use_kernel):
    rng = np.random.default_rng(sum(shape))
    n, d, k = shape
    dec = decoder(rng, k, d, hidden=(16,))
    z, W = rng.normal(size=(n, k)), rng.uniform(-1, 1, (d, k))
    diff = M.sparse_decode(z, W, dec, use_kernel=use_kernel) - M.sparse_decode_reference(z, W, dec)
    assert np.abs(diff).max() <= 1e-10


def test_deep_trunk_uses_batched_path(rng):
    dec = decoder(rng, 4, 6, hidden=(5, 5))
    assert not M.fused_trunk(dec.trunk)
    z, W = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    assert np.abs(M.sparse_decode(z, W, dec) - M.sparse_decode_reference(z, W, dec)).max() <= 1e-10


def test_decoder_shape_errors(rng):
    dec = decoder(rng, 3, 5)
    with pytest.raises(ShapeError):
        M.sparse_decode(np.zeros((2, 4)), np.zeros((5, 4)), dec)
    with pytest.raises(ShapeError):
        M.sparse_decode(np.zeros((2, 3)), np.zeros((6, 3)), dec)


@pytest.mark.parametrize("use_kernel", [False, True])
def test_decoder_backward(rng, use_kernel):
    dec = decoder(rng, 3, 4, hidden=(6,))
    z, W = rng.normal(size=(5, 3)), rng.uniform(-1, 1, (4, 3))
    c = rng.normal(size=(5, 4))
    params = dict(dec.trunk.named_arrays("t"), bias=dec.bias, W=W, z=z)

    def loss():
        out, cache = M.sparse_decode_forward(z, W, dec, use_kernel=use_kernel)
        tg, db, dz, dW = M.sparse_decode_backward(dec, cache, c)
        named = {f"t.{i}.weight": g[0] for i, g in enumerate(tg)}
        named.update({f"t.{i}.bias": g[1] for i, g in enumerate(tg)})
        named.update(bias=db, W=dW, z=dz)
        return float((out * c).sum()), named

    assert finite_diff_check(loss, params) < 1e-4


def test_composite_pipeline_gradient():
    from poems.check import check_gradients
    assert check_gradients().max_error < 1e-4
