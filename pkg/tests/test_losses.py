import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustseg import diffcore as dc
from trustseg.crf import GridCRF, grid_pairs, pairwise_energy
from trustseg.diffcore import Tape, Tensor
from trustseg.losses import (
    UNLABELED,
    LossError,
    NoiseModel,
    bilinear_potts_grid,
    ce,
    forward_corrected_ce,
    kl_onehot,
    mixed_robust_kl,
    pce,
    robust_ce,
    uniform_transition,
)
from trustseg.verify import GRADIENT_CASES, fd_relative_error


def rand_q(rng, h, w, k, scale=2.0):
    return dc.softmax(Tensor(rng.normal(size=(h, w, k)) * scale))


def test_noise_model_coefficients():
    nm = NoiseModel(0.2, 2)
    assert nm.a == pytest.approx(0.2)
    assert nm.b == pytest.approx(0.6)
    with pytest.raises(LossError):
        NoiseModel(0.5, 2)
    with pytest.raises(LossError):
        NoiseModel(-0.1, 3)


def test_transition_rows_sum_to_one():
    T = uniform_transition(0.4, 10)
    np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-15)
    assert T[0, 0] == pytest.approx(0.6) and T[0, 1] == pytest.approx(0.4 / 9)


def test_pce_perfect_prediction_is_zero():
    q = Tensor(np.eye(3)[[[0, 1], [2, 0]]])
    seeds = np.array([[0, UNLABELED], [2, UNLABELED]])
    assert pce(q, seeds).item() == 0.0


def test_pce_single_half_prob_seed():
    q = Tensor(np.full((1, 2, 2), 0.5))
    seeds = np.array([[1, UNLABELED]])
    assert pce(q, seeds).item() == pytest.approx(math.log(2), rel=1e-15)


def test_pce_matches_summation_oracle():
    rng = np.random.default_rng(0)
    q = rand_q(rng, 4, 4, 3)
    seeds = np.full((4, 4), UNLABELED)
    pos = rng.choice(16, 5, replace=False)
    seeds.flat[pos] = rng.integers(0, 3, 5)
    expect = 0.0
    for i in range(4):
        for j in range(4):
            if seeds[i, j] != UNLABELED:
                expect -= math.log(q.data[i, j, seeds[i, j]])
    assert pce(q, seeds).item() == pytest.approx(expect, rel=1e-14)


def test_pce_needs_seeds():
    with pytest.raises(LossError):
        pce(Tensor(np.full((2, 2, 2), 0.5)), np.full((2, 2), UNLABELED))


def test_label_map_shape_checked():
    with pytest.raises(LossError):
        ce(Tensor(np.full((2, 2, 2), 0.5)), np.zeros((2, 3), int))


def test_robust_zero_epsilon_is_ce():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rand_q(rng, 3, 5, 4, scale=4.0)
        y = rng.integers(0, 4, size=(3, 5))
        assert abs(robust_ce(q, y, NoiseModel(0.0, 4)).item() - ce(q, y).item()) <= 1e-12


def test_robust_is_finite_at_zero_probability():
    q = Tensor(np.array([[0.0, 1.0]]))
    val = robust_ce(q, np.array([0]), NoiseModel(0.2, 2)).item()
    assert val == pytest.approx(-math.log(0.2), rel=1e-15)


def test_robust_matches_forward_correction_k10():
    rng = np.random.default_rng(2)
    eps = 0.4
    T = (1 - eps) * np.eye(10) + eps / 9 * (np.ones((10, 10)) - np.eye(10))
    for _ in range(10):
        q = rand_q(rng, 2, 3, 10)
        y = rng.integers(0, 10, size=(2, 3))
        r = robust_ce(q, y, NoiseModel(eps, 10)).item()
        assert abs(r - forward_corrected_ce(q, y, T).item()) <= 1e-12


def test_forward_correction_k2_identity():
    rng = np.random.default_rng(3)
    q = rand_q(rng, 4, 4, 2)
    y = rng.integers(0, 2, size=(4, 4))
    a = forward_corrected_ce(q, y, uniform_transition(0.4, 2)).item()
    assert abs(a - robust_ce(q, y, NoiseModel(0.4, 2)).item()) <= 1e-12


def test_forward_correction_identity_is_ce():
    rng = np.random.default_rng(4)
    q = rand_q(rng, 3, 3, 3)
    y = rng.integers(0, 3, size=(3, 3))
    assert forward_corrected_ce(q, y, np.eye(3)).item() == pytest.approx(ce(q, y).item(), rel=1e-14)


def test_forward_correction_asymmetric_oracle():
    T = np.array([[0.7, 0.2, 0.1], [0.0, 0.9, 0.1], [0.3, 0.3, 0.4]])
    q = np.array([[[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]]])
    y = np.array([[2, 0]])
    expect = 0.0
    for j in range(2):
        qt = T.T @ q[0, j]
        expect -= math.log(qt[y[0, j]])
    assert forward_corrected_ce(Tensor(q), y, T).item() == pytest.approx(expect, rel=1e-14)


def test_forward_correction_rejects_bad_matrix():
    q = Tensor(np.full((1, 1, 2), 0.5))
    with pytest.raises(LossError):
        forward_corrected_ce(q, np.zeros((1, 1), int), np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(LossError):
        forward_corrected_ce(q, np.zeros((1, 1), int), np.eye(3))


def test_flat_tail_gradient():
    x = Tensor(np.array([[-30.0, 0.0]]), requires_grad=True)
    with Tape():
        loss = robust_ce(dc.softmax(x), np.array([0]), NoiseModel(0.2, 2))
    dc.backward(loss)
    assert np.abs(x.grad).max() < 1e-10
    # plain CE keeps a unit-size gradient there
    x2 = Tensor(np.array([[-30.0, 0.0]]), requires_grad=True)
    with Tape():
        loss = ce(dc.softmax(x2), np.array([0]))
    dc.backward(loss)
    assert abs(x2.grad[0, 0] + 1.0) < 1e-12


def test_mixed_all_seeds_is_ce():
    rng = np.random.default_rng(5)
    q = rand_q(rng, 3, 3, 3)
    y = rng.integers(0, 3, size=(3, 3))
    assert mixed_robust_kl(q, y, y, NoiseModel(0.3, 3)).item() == pytest.approx(ce(q, y).item(), rel=1e-14)


def test_mixed_no_seeds_is_robust():
    rng = np.random.default_rng(6)
    q = rand_q(rng, 3, 3, 3)
    y = rng.integers(0, 3, size=(3, 3))
    none = np.full((3, 3), UNLABELED)
    nm = NoiseModel(0.3, 3)
    assert mixed_robust_kl(q, y, none, nm).item() == pytest.approx(robust_ce(q, y, nm).item(), rel=1e-14)


def test_mixed_half_split_componentwise():
    rng = np.random.default_rng(7)
    q = rand_q(rng, 4, 4, 3)
    labels = rng.integers(0, 3, size=(4, 4))
    seeds = np.full((4, 4), UNLABELED)
    seeds[:2] = rng.integers(0, 3, size=(2, 4))
    a = 0.3 / 2
    b = 1 - 3 * a
    expect = 0.0
    for i in range(4):
        for j in range(4):
            if seeds[i, j] != UNLABELED:
                expect -= math.log(q.data[i, j, seeds[i, j]])
            else:
                expect -= math.log(a + b * q.data[i, j, labels[i, j]])
    got = mixed_robust_kl(q, labels, seeds, NoiseModel(0.3, 3)).item()
    assert got == pytest.approx(expect, rel=1e-14)


def test_mixed_needs_full_labeling():
    q = Tensor(np.full((1, 2, 2), 0.5))
    with pytest.raises(LossError):
        mixed_robust_kl(q, np.array([[0, UNLABELED]]), np.array([[0, UNLABELED]]), NoiseModel(0.1, 2))


def test_kl_onehot_cases():
    rng = np.random.default_rng(8)
    p = rng.integers(0, 3, size=(3, 4))
    assert kl_onehot(p, np.eye(3)[p]) == 0.0
    assert kl_onehot(p, np.full((3, 4, 3), 1 / 3)) == pytest.approx(12 * math.log(3), rel=1e-14)
    q = rand_q(rng, 3, 4, 3).data
    expect = -sum(math.log(q[i, j, p[i, j]]) for i in range(3) for j in range(4))
    assert kl_onehot(p, q) == pytest.approx(expect, rel=1e-14)


def _crf(h, w, k, weights):
    ei, ej = grid_pairs(h, w)
    return GridCRF(h, w, k, ei, ej, np.broadcast_to(np.asarray(weights, float), ei.shape).copy())


def test_bilinear_tight_on_hard_labelings():
    rng = np.random.default_rng(9)
    for _ in range(20):
        crf = _crf(4, 5, 3, rng.uniform(0, 2, size=len(grid_pairs(4, 5)[0])))
        s = rng.integers(0, 3, size=20)
        q = Tensor(np.eye(3)[s].reshape(4, 5, 3))
        assert bilinear_potts_grid(q, crf).item() == pytest.approx(pairwise_energy(crf, s), rel=1e-13, abs=1e-13)


def test_bilinear_constant_q_closed_form():
    rng = np.random.default_rng(10)
    crf = _crf(3, 3, 4, rng.uniform(0, 2, size=len(grid_pairs(3, 3)[0])))
    p = rng.dirichlet(np.ones(4))
    q = Tensor(np.broadcast_to(p, (3, 3, 4)).copy())
    expect = crf.weights.sum() * (1 - np.sum(p**2))
    assert bilinear_potts_grid(q, crf).item() == pytest.approx(expect, rel=1e-13)


def test_bilinear_single_pair_uniform():
    # one unordered pair, w = 1, uniform K = 2: each pair counted once
    ei, ej = np.array([0]), np.array([1])
    crf = GridCRF(1, 2, 2, ei, ej, np.array([1.0]))
    q = Tensor(np.full((1, 2, 2), 0.5))
    assert bilinear_potts_grid(q, crf).item() == pytest.approx(0.5, rel=1e-15)


def test_bilinear_identical_one_hot_is_zero():
    crf = _crf(3, 3, 3, 1.0)
    q = Tensor(np.eye(3)[np.full((3, 3), 2)])
    assert bilinear_potts_grid(q, crf).item() == 0.0


@pytest.mark.parametrize("name", ["ce", "pce", "robust_ce", "forward_corrected_ce", "mixed_robust_kl", "bilinear_potts"])
def test_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        assert fd_relative_error(*GRADIENT_CASES[name](rng)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(eps=st.floats(0.01, 0.6), q1=st.floats(0.0, 1.0), q2=st.floats(0.0, 1.0))
def test_property_robust_bounded_and_monotone(eps, q1, q2):
    nm = NoiseModel(eps, 3)
    lo, hi = sorted((q1, q2))
    qa = Tensor(np.array([[lo, (1 - lo) / 2, (1 - lo) / 2]]))
    qb = Tensor(np.array([[hi, (1 - hi) / 2, (1 - hi) / 2]]))
    la = robust_ce(qa, np.array([0]), nm).item()
    lb = robust_ce(qb, np.array([0]), nm).item()
    assert lb <= la + 1e-15
    assert la <= -math.log(nm.a) + 1e-12
