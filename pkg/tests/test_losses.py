import numpy as np
import pytest

from fastsfp import attention as att
from fastsfp import losses
from fastsfp.exceptions import DimensionError, RangeError, StructuralError
from fastsfp.gradcheck import check_asp, check_daf, check_fr


def make_taps(rng, n=4, d=3, g=2, kinds=(att.SPATIAL, att.TEMPORAL)):
    taps = []
    for i, kind in enumerate(kinds):
        q, k, v = (rng.standard_normal((g, n, d)) for _ in range(3))
        A = att.attention_scores(q, k, kind == att.TEMPORAL)
        taps.append(att.BlockTaps(q, k, v, A, A @ v, kind, i))
    return taps


def tap_from_scores(A, kind=att.SPATIAL, i=0):
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    z = np.zeros(A.shape[:-1] + (1,))
    return att.BlockTaps(z, z, np.zeros((n, 1)), A, A @ np.zeros((n, 1)), kind, i)


def test_gram_examples():
    assert np.array_equal(losses.gram(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(losses.gram(np.full((4, 4), 0.25)), np.full((4, 4), 0.25), atol=1e-16)
    A = np.random.default_rng(0).random((3, 3))
    oracle = [[sum(A[i, k] * A[j, k] for k in range(3)) for j in range(3)] for i in range(3)]
    np.testing.assert_allclose(losses.gram(A), oracle, atol=1e-15)
    with pytest.raises(DimensionError):
        losses.gram(np.ones((2, 3)))


def test_asp_examples():
    rng = np.random.default_rng(1)
    taps = make_taps(rng)
    assert losses.loss_asp(taps, taps) == 0.0
    t = [tap_from_scores(np.eye(2))]
    s = [tap_from_scores(np.zeros((2, 2)))]
    assert losses.loss_asp(t, s) == 0.5
    t2, s2 = make_taps(rng, g=1), make_taps(rng, g=1)
    per_block = [np.sum((losses.gram(a.scores[0]) - losses.gram(b.scores[0])) ** 2) / 16
                 for a, b in zip(t2, s2)]
    assert losses.loss_asp(t2, s2) == pytest.approx(sum(per_block), abs=1e-15)


def test_asp_fro_switch():
    t = [tap_from_scores(np.eye(2))]
    s = [tap_from_scores(np.zeros((2, 2)))]
    assert losses.loss_asp(t, s, norm="fro") == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_asp_permutation_invariant():
    rng = np.random.default_rng(2)
    t, s = make_taps(rng, kinds=(att.SPATIAL,)), make_taps(rng, kinds=(att.SPATIAL,))
    perm = rng.permutation(4)

    def permute(tap):
        A = tap.scores[:, perm][:, :, perm]
        return att.BlockTaps(tap.q[:, perm], tap.k[:, perm], tap.v[:, perm], A, A @ tap.v[:, perm],
                             tap.block_kind, tap.block_index)

    assert losses.loss_asp([permute(x) for x in t], [permute(x) for x in s]) == pytest.approx(
        losses.loss_asp(t, s), abs=1e-10)


def test_structural_errors():
    rng = np.random.default_rng(3)
    t = make_taps(rng)
    with pytest.raises(StructuralError):
        losses.loss_asp(t, t[:1])
    with pytest.raises(StructuralError):
        losses.loss_daf(t, make_taps(rng, n=3))


def test_daf_examples():
    rng = np.random.default_rng(4)
    taps = make_taps(rng)
    assert losses.loss_daf(taps, taps) == 0.0
    # N = 1: attention returns v
    def one(v):
        q = rng.standard_normal((1, 1, 3))
        return [att.BlockTaps(q, q, v, np.ones((1, 1, 1)), v, att.SPATIAL, 0)]
    vt, vs = rng.standard_normal((1, 1, 3)), rng.standard_normal((1, 1, 3))
    assert losses.loss_daf(one(vt), one(vs)) == pytest.approx(np.mean((vt - vs) ** 2), abs=1e-15)


def test_daf_oracle():
    rng = np.random.default_rng(5)
    t, s = make_taps(rng), make_taps(rng)
    total = 0.0
    for a, b in zip(t, s):
        ca = att.cross_attention(b.q, a.k, a.v, causal=a.causal)
        total += np.mean((a.out - b.out) ** 2) + np.mean((a.out - ca) ** 2)
    assert losses.loss_daf(t, s) == pytest.approx(total, abs=1e-14)


def test_fr_examples():
    assert losses.loss_fr([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert losses.loss_fr([1.0], [-1.0]) == 4.0
    a, b = np.random.default_rng(6).standard_normal((2, 5, 3))
    assert losses.loss_fr(a, b) == pytest.approx(np.mean((a - b) ** 2), abs=1e-15)


def test_total_examples():
    rng = np.random.default_rng(7)
    t, s = make_taps(rng), make_taps(rng)
    ft, fs = rng.standard_normal((2, 8, 3))
    assert losses.loss_total(t, t, ft, ft) == (0.0, (0.0, 0.0, 0.0))
    total, (a, b, c) = losses.loss_total(t, s, ft, fs, losses.FastWeights(1, 0, 0))
    assert total == losses.loss_asp(t, s)
    total, comps = losses.loss_total(t, s, ft, fs)
    a, b, c = losses.loss_asp(t, s), losses.loss_daf(t, s), losses.loss_fr(ft, fs)
    assert comps == (a, b, c)
    assert total == pytest.approx(2 * a + 5 * b + 22 * c, abs=1e-12)


def test_total_linear_in_weights():
    rng = np.random.default_rng(8)
    t, s = make_taps(rng), make_taps(rng)
    ft, fs = rng.standard_normal((2, 8, 3))
    w1, w2 = losses.FastWeights(1.0, 2.0, 3.0), losses.FastWeights(0.5, 0.0, 4.0)
    wsum = losses.FastWeights(1.5, 2.0, 7.0)
    lhs = losses.loss_total(t, s, ft, fs, wsum)[0]
    rhs = losses.loss_total(t, s, ft, fs, w1)[0] + losses.loss_total(t, s, ft, fs, w2)[0]
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_weights_validation():
    assert losses.FastWeights() == losses.FastWeights(2.0, 5.0, 22.0)
    with pytest.raises(RangeError):
        losses.FastWeights(0, 0, 0)
    with pytest.raises(RangeError):
        losses.FastWeights(-1, 1, 1)


@pytest.mark.parametrize("seed", range(6))
def test_loss_gradients_fd(seed):
    assert check_asp(seed) < 1e-4
    assert check_daf(seed) < 1e-4
    assert check_fr(seed) < 1e-4


def test_merge_tap_grads():
    g1 = {0: {"out": np.ones(2)}}
    g2 = {0: {"out": np.ones(2), "q": np.ones(2)}, 1: {"scores": np.ones(1)}}
    merged = losses.merge_tap_grads((2.0, g1), (3.0, g2), (0.0, {5: {"q": np.ones(1)}}))
    assert merged[0]["out"].tolist() == [5.0, 5.0]
    assert merged[0]["q"].tolist() == [3.0, 3.0]
    assert set(merged) == {0, 1}
