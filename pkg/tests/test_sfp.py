import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastsfp import sfp
from fastsfp.exceptions import DimensionError, RangeError
from fastsfp.tensor import finite_diff_grad, max_rel_error, mse, mse_grad
from oracles import eq10_loops

PAPER_IN, PAPER_OUT = 2_097_152, 512


def random_layer(seed, max_in=64):
    rng = np.random.default_rng(seed)
    out_dim = int(rng.choice([1, 2, 3, 4, 6, 8, 9, 12, 16]))
    M = int(rng.integers(1, max_in // out_dim + 1))
    cfg = sfp.SfpConfig.from_dims(M * out_dim, out_dim, int(rng.integers(1, 5)))
    return sfp.init_layer(cfg, rng), rng.standard_normal(cfg.in_dim)


def test_factorize_examples():
    assert sfp.factorize_out_dim(512) == (16, 32)
    assert sfp.factorize_out_dim(4) == (2, 2)
    assert sfp.factorize_out_dim(7) == (1, 7)


@pytest.mark.parametrize("n", range(1, 80))
def test_factorize_is_most_balanced(n):
    d1, d2 = sfp.factorize_out_dim(n)
    pairs = [(a, n // a) for a in range(1, n + 1) if n % a == 0 and a <= n // a]
    assert (d1, d2) == min(pairs, key=lambda p: p[1] - p[0])


def test_config_validation():
    with pytest.raises(DimensionError):
        sfp.SfpConfig.from_dims(10, 4, 1)
    with pytest.raises(RangeError):
        sfp.SfpConfig.from_dims(8, 4, 0)
    with pytest.raises(DimensionError):
        sfp.SfpConfig(8, 4, 2, 3, 2, 1)


def test_forward_examples():
    cfg = sfp.SfpConfig.from_dims(8, 4, 2)
    assert not np.any(sfp.sfp_forward(sfp.zeros_layer(cfg), np.ones(8)))
    scalar = sfp.SfpConfig(1, 1, 1, 1, 1, 1)
    layer = sfp.SfpLayer(scalar, [[[[[2.0]]]]], [[[[3.0]]]])
    assert sfp.sfp_forward(layer, [5.0])[0] == 30.0
    with pytest.raises(DimensionError):
        sfp.sfp_forward(layer, [1.0, 2.0])


def test_forward_frozen_value():
    cfg = sfp.SfpConfig.from_dims(8, 4, 2)
    layer = sfp.init_layer(cfg, np.random.default_rng(7))
    x = np.arange(1, 9) / 8
    expected = [-0.022082959963392747, 0.02547934495169585, -0.10764394639191595,
                0.0695886122642588]
    np.testing.assert_allclose(sfp.sfp_forward(layer, x), expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(eq10_loops(layer, x), expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_loops_and_dense(seed):
    layer, x = random_layer(seed)
    y = sfp.sfp_forward(layer, x)
    assert np.max(np.abs(y - eq10_loops(layer, x))) < 1e-10
    assert np.max(np.abs(y - sfp.contract_to_dense(layer) @ x)) < 1e-8


def test_batched_bit_identical():
    layer, _ = random_layer(3)
    X = np.random.default_rng(4).standard_normal((3, layer.config.in_dim))
    Y = sfp.sfp_forward_batched(layer, X)
    for b in range(3):
        assert np.array_equal(Y[b], sfp.sfp_forward(layer, X[b]))
    dup = sfp.sfp_forward_batched(layer, np.stack([X[0], X[0]]))
    assert np.array_equal(dup[0], dup[1])
    assert np.array_equal(sfp.sfp_forward_batched(layer, X[:1])[0], sfp.sfp_forward(layer, X[0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, alpha, beta):
    layer, x = random_layer(seed)
    z = np.random.default_rng(seed + 1).standard_normal(x.size)
    lhs = sfp.sfp_forward(layer, alpha * x + beta * z)
    rhs = alpha * sfp.sfp_forward(layer, x) + beta * sfp.sfp_forward(layer, z)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_backward_examples():
    layer, x = random_layer(5)
    dL, dR, dx = sfp.sfp_backward(layer, x, np.zeros(layer.config.out_dim))
    assert not (dL.any() or dR.any() or dx.any())
    dY = np.random.default_rng(6).standard_normal(layer.config.out_dim)
    g1 = sfp.sfp_backward(layer, x, dY)
    g2 = sfp.sfp_backward(layer, x, 2 * dY)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    cfg = sfp.SfpConfig.from_dims(8, 4, 2)
    layer = sfp.init_layer(cfg, rng)
    x, t = rng.standard_normal(8), rng.standard_normal(4)
    dL, dR, dx = sfp.sfp_backward(layer, x, mse_grad(t, sfp.sfp_forward(layer, x)))
    f = lambda L, R, z: mse(sfp.sfp_forward(sfp.SfpLayer(cfg, L, R), z), t)  # noqa: E731
    assert max_rel_error(dL, finite_diff_grad(lambda L: f(L, layer.cores_R, x), layer.cores_L)) < 1e-4
    assert max_rel_error(dR, finite_diff_grad(lambda R: f(layer.cores_L, R, x), layer.cores_R)) < 1e-4
    assert max_rel_error(dx, finite_diff_grad(lambda z: f(layer.cores_L, layer.cores_R, z), x)) < 1e-4


def test_batched_backward_with_bias():
    rng = np.random.default_rng(8)
    cfg = sfp.SfpConfig.from_dims(8, 4, 2)
    layer = sfp.init_layer(cfg, rng, bias=True)
    X, dY = rng.standard_normal((3, 8)), rng.standard_normal((3, 4))
    dL, dR, dX, db = sfp.sfp_backward_batched(layer, X, dY)
    np.testing.assert_allclose(db, dY.sum(axis=0), atol=1e-15)
    sums = [sfp.sfp_backward(layer, X[b], dY[b]) for b in range(3)]
    np.testing.assert_allclose(dL, sum(s[0] for s in sums), atol=1e-13)
    np.testing.assert_allclose(dX[1], sums[1][2], atol=1e-14)


def test_contract_to_dense_examples():
    cfg = sfp.SfpConfig.from_dims(8, 4, 2)
    assert not sfp.contract_to_dense(sfp.zeros_layer(cfg)).any()
    scalar = sfp.SfpConfig(1, 1, 1, 1, 1, 1)
    assert sfp.contract_to_dense(sfp.SfpLayer(scalar, [[[[[2.0]]]]], [[[[3.0]]]])).tolist() == [[6.0]]
    layer = sfp.init_layer(cfg, np.random.default_rng(9))
    W = sfp.contract_to_dense(layer)
    for x in np.random.default_rng(10).standard_normal((20, 8)):
        assert np.max(np.abs(W @ x - sfp.sfp_forward(layer, x))) < 1e-10


def test_param_counts_paper_config():
    cfg = sfp.SfpConfig.from_dims(PAPER_IN, PAPER_OUT, 6)
    assert (cfg.d1, cfg.d2, cfg.M) == (16, 32, 4096)
    exact, nominal = sfp.param_count(cfg)
    assert exact == 4096 * 6 * 512 * 17 == 213_909_504
    assert nominal == round(2 * 6 * PAPER_IN * math.sqrt(512)) == 569_437_594
    assert sfp.dense_param_count(PAPER_IN, PAPER_OUT) == 16 * 16 * 16 * 512 * 512 == 1_073_741_824


def test_param_count_matches_storage():
    assert sfp.param_count(sfp.SfpConfig(1, 1, 1, 1, 1, 1))[0] == 2
    for seed in range(5):
        layer, _ = random_layer(seed)
        assert sfp.param_count(layer.config)[0] == layer.n_stored


def test_efficiency_bound():
    assert sfp.efficiency_bound(512) == pytest.approx(11.3137084989848, abs=1e-12)
    assert sfp.within_bound(11, 512) and not sfp.within_bound(12, 512)
    assert sfp.efficiency_bound(4) == 1.0
    assert sfp.efficiency_bound(16) == 2.0 and not sfp.within_bound(3, 16)


@pytest.mark.parametrize("r,rel", [(6, 0.5303), (5, 0.4419), (4, 0.3536), (3, 0.2652)])
def test_relative_flops(r, rel):
    _, _, got = sfp.flops_estimate(sfp.SfpConfig.from_dims(PAPER_IN, PAPER_OUT, r))
    assert got == pytest.approx(rel, abs=5e-5)


def low_rank_weight(rng, out_dim, M, r):
    return np.concatenate([rng.standard_normal((out_dim, r)) @ rng.standard_normal((r, out_dim))
                           for _ in range(M)], axis=1)


def test_svd_init_examples():
    cfg = sfp.SfpConfig.from_dims(8, 4, 2)
    assert not sfp.sfp_forward(sfp.svd_init(np.zeros((4, 8)), cfg), np.ones(8)).any()
    rng = np.random.default_rng(11)
    W = low_rank_weight(rng, 4, 2, 2)
    layer = sfp.svd_init(W, cfg)
    for x in rng.standard_normal((5, 8)):
        assert np.max(np.abs(sfp.sfp_forward(layer, x) - W @ x)) < 1e-8
    full = rng.standard_normal((4, 8))
    layer = sfp.svd_init(full, sfp.SfpConfig.from_dims(8, 4, 4))
    assert np.max(np.abs(sfp.contract_to_dense(layer) - full)) < 1e-8
    with pytest.raises(DimensionError):
        sfp.svd_init(np.zeros((4, 4)), cfg)
    with pytest.raises(RangeError):
        sfp.svd_init(np.zeros((4, 8)), sfp.SfpConfig.from_dims(8, 4, 5))


def test_svd_init_error_bound_and_monotone():
    rng = np.random.default_rng(12)
    W = rng.standard_normal((9, 27))
    prev = None
    for r in range(1, 10):
        cfg = sfp.SfpConfig.from_dims(27, 9, r)
        layer = sfp.svd_init(W, cfg)
        sig = [np.linalg.svd(W[:, i * 9:(i + 1) * 9], compute_uv=False) for i in range(3)]
        tail = sum(s[r] if r < 9 else 0.0 for s in sig)
        for x in rng.standard_normal((5, 27)):
            err = np.linalg.norm(sfp.sfp_forward(layer, x) - W @ x)
            assert err <= np.linalg.norm(x) * tail + 1e-9
        errs = sfp.block_reconstruction_errors(layer, W)
        if prev is not None:
            assert np.all(errs <= prev + 1e-12)
        prev = errs


def test_serialization_round_trip(tmp_path):
    layer, _ = random_layer(13)
    layer.bias = np.arange(layer.config.out_dim, dtype=float)
    blob = sfp.to_bytes(layer)
    assert blob[:4] == b"SFP1"
    back = sfp.from_bytes(blob)
    assert back.config == layer.config
    assert np.array_equal(back.cores_L, layer.cores_L) and np.array_equal(back.cores_R, layer.cores_R)
    assert np.array_equal(back.bias, layer.bias)
    sfp.save(layer, tmp_path / "l.bin")
    assert sfp.to_bytes(sfp.load(tmp_path / "l.bin")) == blob
    with pytest.raises(Exception):
        sfp.from_bytes(b"XXXX" + blob[4:])
