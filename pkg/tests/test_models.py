import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topoalign.dp_kernel import EmissionMatrix, ScaleConfig, TransitionModel, log_softmax
from topoalign.models import (
    FirstOrderFHScores, IlmTable, MRnnTScores, PriorTable, ZeroOrderScores, diphone_targets,
    estimate_ilm, estimate_prior, fh_joint_score, mrnnt_hyp_score, zero_order_hyp_score,
)


def random_fh(rng, T=4, L=3):
    cgl = log_softmax(rng.normal(size=(T, L, L)))
    lp = log_softmax(rng.normal(size=(T, L)))
    return FirstOrderFHScores(cgl, lp)


def test_fh_prior_off_is_factor_sum():
    fh = random_fh(np.random.default_rng(0))
    s = fh_joint_score(fh, PriorTable.uniform(3), 2, 1, 0, ScaleConfig(gamma=0.0))
    assert s == fh.center_given_left[2, 1, 0] + fh.left_posterior[2, 1]


def test_fh_uniform_prior_adds_log_table_size():
    fh = random_fh(np.random.default_rng(1))
    s = fh_joint_score(fh, PriorTable.uniform(3), 0, 2, 1, ScaleConfig(gamma=1.0))
    base = fh.center_given_left[0, 2, 1] + fh.left_posterior[0, 2]
    assert s == pytest.approx(base + math.log(9), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 2))
def test_fh_matches_scalar_recompute(seed, gamma):
    rng = np.random.default_rng(seed)
    fh = random_fh(rng)
    prior = PriorTable(log_softmax(rng.normal(size=9)).reshape(3, 3))
    t, left, center = (int(x) for x in rng.integers(0, [4, 3, 3]))
    cgl_row = fh.center_given_left[t, left]
    expected = (float(cgl_row[center]) + float(fh.left_posterior[t, left])
                - gamma * float(prior.diphone_logprior[left][center]))
    got = fh_joint_score(fh, prior, t, left, center, ScaleConfig(gamma=gamma))
    assert got == pytest.approx(expected, abs=1e-12)


def test_fh_index_errors():
    fh = random_fh(np.random.default_rng(2))
    with pytest.raises(IndexError):
        fh_joint_score(fh, None, 4, 0, 0, ScaleConfig())
    with pytest.raises(IndexError):
        fh_joint_score(fh, None, 0, 3, 0, ScaleConfig())


def zero_order(rng, T=3, L=4):
    return ZeroOrderScores(EmissionMatrix(log_softmax(rng.normal(size=(T, L)))))


def test_zero_order_raw_posterior():
    sc = zero_order(np.random.default_rng(3))
    got = zero_order_hyp_score(sc, None, TransitionModel.uniform(), 1, 2, True,
                               ScaleConfig(alpha=1.0, beta=0.0, gamma=0.0))
    assert got == sc.em.scores[1, 2]


def test_zero_order_ilm_cancels_posterior():
    sc = zero_order(np.random.default_rng(4))
    ilm = IlmTable(zero_order=sc.em.scores[0])
    trans = TransitionModel.global_loop(0.7)
    got = zero_order_hyp_score(sc, ilm, trans, 0, 1, True, ScaleConfig(alpha=1.0, beta=1.0, gamma=1.0))
    assert got == pytest.approx(math.log(0.7), abs=1e-12)


def test_zero_order_tuned_scales_recompute():
    rng = np.random.default_rng(5)
    sc = zero_order(rng)
    ilm = IlmTable(zero_order=log_softmax(rng.normal(size=4)))
    trans = TransitionModel.per_label([0.3, 0.5, 0.6, 0.9])
    scales = ScaleConfig(alpha=0.7, beta=0.1, gamma=0.4)
    got = zero_order_hyp_score(sc, ilm, trans, 2, 3, False, scales)
    expected = 0.7 * sc.em.scores[2, 3] - 0.4 * ilm.zero_order[3] + 0.1 * math.log(0.1)
    assert got == pytest.approx(expected, abs=1e-12)
    exempt = zero_order_hyp_score(sc, ilm, trans, 2, 3, True, scales, ilm_exempt=(3,))
    assert exempt == pytest.approx(0.7 * sc.em.scores[2, 3] + 0.1 * math.log(0.9), abs=1e-12)


def test_zero_order_without_transitions_is_ctc_variant():
    sc = zero_order(np.random.default_rng(6))
    a = zero_order_hyp_score(sc, None, TransitionModel.global_loop(0.9), 0, 0, True, ScaleConfig(),
                             use_transitions=False)
    assert a == sc.em.scores[0, 0]


def test_mrnnt_scores():
    rng = np.random.default_rng(7)
    L = 4
    tab = MRnnTScores(log_softmax(rng.normal(size=(3, L, L))))
    assert mrnnt_hyp_score(tab, None, 1, 2, 0, ScaleConfig()) == tab.label_given_context[1, 2, 0]
    blank = L - 1
    got = mrnnt_hyp_score(tab, IlmTable.uniform(L, first_order=True), 0, blank, blank,
                          ScaleConfig(gamma=0.5))
    assert got == pytest.approx(tab.label_given_context[0, blank, blank] + 0.5 * math.log(L), abs=1e-12)
    with pytest.raises(IndexError):
        mrnnt_hyp_score(tab, None, 0, L, 0, ScaleConfig())


def test_tables_reject_unnormalized_input():
    with pytest.raises(ValueError):
        MRnnTScores(np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        FirstOrderFHScores(np.zeros((2, 3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PriorTable(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ZeroOrderScores(EmissionMatrix(np.zeros((2, 3)), normalized=False))


def test_diphone_targets_use_previous_segment():
    left, center = diphone_targets([3, 0, 0, 1, 3, 3, 2], start_context=3)
    assert left.tolist() == [3, 3, 3, 0, 1, 1, 3]
    assert center.tolist() == [3, 0, 0, 1, 3, 3, 2]


def test_prior_single_diphone_needs_smoothing():
    # one frame of label 1 after start context 0: only the diphone (0, 1) is seen
    with pytest.raises(ValueError):
        estimate_prior([[1]], 2, epsilon=0.0, start_context=0)
    p = estimate_prior([[1]], 2, epsilon=1e-8, start_context=0)
    assert p.diphone_logprior[0, 1] == pytest.approx(0.0, abs=1e-7)
    assert np.all(p.diphone_logprior[[0, 1, 1], [0, 0, 1]] < -18)


def test_prior_hand_counts():
    # start context 2; left contexts are 2,2,0,1 and 2,1,1
    seqs = [[0, 0, 1, 2], [1, 2, 2]]
    counts = np.zeros((3, 3))
    for l, c in [(2, 0), (2, 0), (0, 1), (1, 2), (2, 1), (1, 2), (1, 2)]:
        counts[l, c] += 1
    eps = 1e-3
    probs = counts / counts.sum() + eps
    probs /= probs.sum()
    got = estimate_prior(seqs, 3, epsilon=eps, start_context=2)
    assert np.allclose(got.diphone_logprior, np.log(probs), atol=1e-12, rtol=0)


def test_prior_from_uniform_soft_counts_is_uniform():
    L = 3
    soft = np.full((5, L, L), 1.0 / (L * L))
    got = estimate_prior([soft], L, epsilon=0.0)
    assert np.allclose(got.diphone_logprior, -2 * math.log(L), atol=1e-12)


def test_prior_empty_corpus():
    with pytest.raises(ValueError):
        estimate_prior([], 3)


def test_ilm_delta_on_one_hot_corpus():
    em = np.full((4, 3), -800.0)  # exp underflows to exactly 0
    em[:, 1] = 0.0
    ilm = estimate_ilm([EmissionMatrix(em)])
    assert ilm.zero_order[1] == 0.0
    assert np.all(np.isneginf(ilm.zero_order[[0, 2]]))


def test_ilm_two_frame_average():
    p = np.array([0.2, 0.3, 0.5])
    q = np.array([0.6, 0.3, 0.1])
    ilm = estimate_ilm([EmissionMatrix(np.log(np.stack([p, q])))])
    assert np.allclose(np.exp(ilm.zero_order), (p + q) / 2, atol=1e-12)


def test_ilm_streaming_mean_over_corpus():
    rng = np.random.default_rng(8)
    corpus = [EmissionMatrix(log_softmax(rng.normal(size=(int(rng.integers(1, 6)), 4))))
              for _ in range(7)]
    mean = np.zeros(4)
    n = 0
    for em in corpus:
        for row in np.exp(em.scores):
            n += 1
            mean += (row - mean) / n
    got = estimate_ilm(corpus)
    assert np.allclose(np.exp(got.zero_order), mean / mean.sum(), atol=1e-12, rtol=0)


def test_ilm_first_order_rows_normalized():
    rng = np.random.default_rng(9)
    ilm = estimate_ilm([MRnnTScores(log_softmax(rng.normal(size=(3, 4, 4))))])
    assert np.allclose(np.exp(ilm.first_order).sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        estimate_ilm([])
