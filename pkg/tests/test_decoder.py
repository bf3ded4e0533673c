import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_decode
from topoalign.decoder import (
    BeamConfig, DecodeStats, altas_lookahead, build_prefix_tree, decode, downsample,
    measure_rtf, word_error_rate,
)
from topoalign.dp_kernel import EmissionMatrix, ScaleConfig, TransitionModel, log_softmax
from topoalign.errors import LexiconError, OverPrunedError
from topoalign.lexicon import Lexicon, Topology, build_inventory
from topoalign.lm import BOS, EOS, NGramLm
from topoalign.models import (
    FirstOrderFHScores, IlmTable, MRnnTScores, PriorTable, ZeroOrderScores,
)

RULES = ("phmm", "ctc", "fh", "mrnnt")


def random_lexicon(rng, n_words):
    entries = {}
    for i in range(n_words):
        n = int(rng.integers(2, 4))
        entries[f"w{i}"] = list(rng.choice(list("abc"), size=n))
    return Lexicon.from_dict(entries)


def random_bigram(rng, words):
    """Full bigram table, so every score is a direct lookup."""
    vocab = sorted(words)
    uni = {(w,): (float(v), 0.0) for w, v in zip(vocab + [EOS], log_softmax(rng.normal(size=len(vocab) + 1)))}
    uni[(BOS,)] = (-99.0 * math.log(10), 0.0)
    bi = {}
    for h in [BOS] + vocab:
        row = log_softmax(rng.normal(size=len(vocab) + 1))
        for w, v in zip(vocab + [EOS], row):
            bi[(h, w)] = (float(v), 0.0)
    return NGramLm(2, [uni, bi])


def random_instance(seed, rule):
    rng = np.random.default_rng(seed)
    lex = random_lexicon(rng, int(rng.integers(1, 5)))
    topo = Topology.CTC if rule in ("ctc", "mrnnt") else Topology.PHMM
    inv = build_inventory(lex, topo)
    L = len(inv)
    T = int(rng.integers(3, 8))
    lm = random_bigram(rng, lex.words)
    scales = ScaleConfig(alpha=float(rng.uniform(0.3, 1.0)), beta=float(rng.uniform(0, 1)),
                         gamma=float(rng.uniform(0, 0.5)), lm_scale=float(rng.uniform(0, 2)))
    loop_p = rng.uniform(0.2, 0.8, size=L)
    trans = TransitionModel.per_label(loop_p)
    tables = {"allow_silence": True}
    kw = {}
    if rule in ("phmm", "ctc"):
        em = log_softmax(rng.normal(scale=2.0, size=(T, L)))
        ilm = log_softmax(rng.normal(size=L))
        scores = ZeroOrderScores(EmissionMatrix(em))
        tables.update(em=em, ilm=ilm)
        kw["ilm"] = IlmTable(zero_order=ilm)
    elif rule == "fh":
        cgl = log_softmax(rng.normal(scale=2.0, size=(T, L, L)))
        lp = log_softmax(rng.normal(size=(T, L)))
        prior = log_softmax(rng.normal(size=L * L)).reshape(L, L)
        scores = FirstOrderFHScores(cgl, lp)
        tables.update(cgl=cgl, lp=lp, prior=prior)
        kw["prior"] = PriorTable(prior)
    else:
        lgc = log_softmax(rng.normal(scale=2.0, size=(T, L, L)))
        ilm2 = log_softmax(rng.normal(size=(L, L)))
        scores = MRnnTScores(lgc)
        tables.update(lgc=lgc, ilm2=ilm2)
        kw["ilm"] = IlmTable(first_order=ilm2)
    if rule in ("phmm", "fh"):
        tables.update(loop=trans.loop_logprob, forward=trans.forward_logprob)
        kw["trans"] = trans
    return lex, inv, lm, scores, scales, tables, kw, T


def oracle(rule, lex, inv, lm, tables, scales, T):
    entries = {w: lex[w] for w in lex.words}
    return brute_force_decode(
        rule, entries, inv.index, lambda p: p.eow,
        lambda ws: lm.sentence_logprob(ws), T, inv.special_id, tables,
        (scales.alpha, scales.beta, scales.gamma), scales.lm_scale, max_words=3,
    )


def test_prefix_tree_shares_prefixes():
    lex = Lexicon.from_dict({"cat": "k ae t".split(), "cab": "k ae b".split()})
    tree = build_prefix_tree(lex)
    assert tree.num_nodes == 5
    assert tree.num_word_ends == 2
    assert tree.words[tree.lookup(lex["cat"])] == ("cat",)


def test_prefix_tree_single_word_and_empty():
    tree = build_prefix_tree(Lexicon.from_dict({"abc": "a b c".split()}))
    assert tree.num_nodes == 4
    with pytest.raises(LexiconError):
        build_prefix_tree(Lexicon.from_dict({}))


def test_prefix_tree_homophones_share_leaf():
    lex = Lexicon.from_dict({"two": "t u".split(), "too": "t u".split()})
    tree = build_prefix_tree(lex)
    assert tree.num_nodes == 3
    assert sorted(tree.words[tree.lookup(lex["two"])]) == ["too", "two"]


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.sampled_from(["w%d" % i for i in range(8)]),
                       st.lists(st.sampled_from("abcd"), min_size=1, max_size=4), min_size=1))
def test_prefix_tree_size_bounds(entries):
    lex = Lexicon.from_dict(entries)
    tree = build_prefix_tree(lex)
    assert tree.num_nodes <= sum(len(p) for p in entries.values()) + 1
    assert tree.num_word_ends == len(entries)
    for w in entries:
        assert w in tree.words[tree.lookup(lex[w])]


@pytest.mark.parametrize("rule", RULES)
@pytest.mark.parametrize("seed", range(6))
def test_exact_search_matches_brute_force(rule, seed):
    lex, inv, lm, scores, scales, tables, kw, T = random_instance(seed, rule)
    tree = build_prefix_tree(lex)
    res = decode(scores, tree, lm, inv, scales=scales, **kw)
    best, argmaxes = oracle(rule, lex, inv, lm, tables, scales, T)
    assert res.score == pytest.approx(best, abs=1e-9)
    assert tuple(res.words) in argmaxes


def one_hot_scores(rule, inv, label_path):
    T, L = len(label_path), len(inv)
    if rule in ("phmm", "ctc"):
        em = np.full((T, L), -30.0)
        em[np.arange(T), label_path] = 0.0
        return ZeroOrderScores(EmissionMatrix(log_softmax(em)))
    tab = np.full((T, L, L), -30.0)
    tab[np.arange(T), :, label_path] = 0.0
    tab = log_softmax(tab)
    if rule == "mrnnt":
        return MRnnTScores(tab)
    return FirstOrderFHScores(tab, np.full((T, L), -math.log(L)))


@pytest.mark.parametrize("rule", RULES)
def test_forced_optimum(rule):
    lex = Lexicon.from_dict({"dog": "d o g".split(), "dot": "d o t".split(), "go": "g o".split()})
    topo = Topology.CTC if rule in ("ctc", "mrnnt") else Topology.PHMM
    inv = build_inventory(lex, topo)
    ids = inv.ids(lex["dot"]) + inv.ids(lex["go"])
    sp = inv.special_id
    if rule == "mrnnt":
        path = [sp, ids[0], sp, ids[1], ids[2], ids[3], sp, ids[4], sp]
    else:
        path = [sp, ids[0], ids[0], ids[1], ids[2], sp, ids[3], ids[4], ids[4]]
    res = decode(one_hot_scores(rule, inv, path), build_prefix_tree(lex),
                 NGramLm.uniform(lex.words), inv, trans=TransitionModel.uniform())
    assert res.words == ["dot", "go"]


@pytest.mark.parametrize("rule", RULES)
def test_zero_scales_ignore_lm_and_prior(rule):
    lex, inv, lm, scores, _, tables, kw, T = random_instance(11, rule)
    tree = build_prefix_tree(lex)
    scales = ScaleConfig(gamma=0.0, lm_scale=0.0)
    other_lm = random_bigram(np.random.default_rng(99), lex.words)
    L = len(inv)
    other = {}
    if "ilm" in kw:
        other["ilm"] = (IlmTable.uniform(L, first_order=rule == "mrnnt"))
    if "prior" in kw:
        other["prior"] = PriorTable.uniform(L)
    a = decode(scores, tree, lm, inv, scales=scales, **kw)
    b = decode(scores, tree, other_lm, inv, scales=scales, **{**kw, **other})
    assert a.words == b.words
    assert a.score == b.score


@pytest.mark.parametrize("rule", RULES)
def test_determinism(rule):
    lex, inv, lm, scores, scales, _, kw, _ = random_instance(3, rule)
    tree = build_prefix_tree(lex)
    cfg = BeamConfig(beam_logwidth=8.0, max_hyps=20)
    a = decode(scores, tree, lm, inv, scales=scales, cfg=cfg, record_keys=True, **kw)
    b = decode(scores, tree, lm, inv, scales=scales, cfg=cfg, record_keys=True, **kw)
    assert (a.words, a.score, a.hyp_keys) == (b.words, b.score, b.hyp_keys)
    assert a.stats.per_frame_states == b.stats.per_frame_states
    assert a.stats.per_frame_trees == b.stats.per_frame_trees


@pytest.mark.parametrize("rule", RULES)
def test_altas_zero_is_neutral(rule):
    lex, inv, lm, scores, scales, _, kw, _ = random_instance(5, rule)
    tree = build_prefix_tree(lex)
    runs = [decode(scores, tree, lm, inv, scales=scales, record_keys=True, **kw,
                   cfg=BeamConfig(beam_logwidth=8.0, altas=a)) for a in (None, 0.0)]
    assert runs[0].hyp_keys == runs[1].hyp_keys
    assert runs[0].score == runs[1].score


def test_altas_lookahead_definition():
    assert altas_lookahead(-10.0, 0.5) == -5.0
    assert altas_lookahead(-10.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        altas_lookahead(-1.0, -0.1)


@pytest.mark.parametrize("rule", RULES)
@pytest.mark.parametrize("seed", range(4))
def test_pruning_never_beats_exact_search(rule, seed):
    lex, inv, lm, scores, scales, _, kw, _ = random_instance(seed, rule)
    tree = build_prefix_tree(lex)
    exact = decode(scores, tree, lm, inv, scales=scales, **kw)
    for beam in (1.0, 3.0, 10.0):
        try:
            pruned = decode(scores, tree, lm, inv, scales=scales, cfg=BeamConfig(beam), **kw)
        except OverPrunedError:
            continue
        assert pruned.score <= exact.score + 1e-12


@pytest.mark.parametrize("rule", RULES)
@pytest.mark.parametrize("seed", range(4))
def test_surviving_sets_nested_across_beams(rule, seed):
    lex, inv, lm, scores, scales, _, kw, _ = random_instance(seed + 20, rule)
    tree = build_prefix_tree(lex)
    prev = None
    for beam in (1.0, 2.0, 4.0, 8.0, math.inf):
        try:
            run = decode(scores, tree, lm, inv, scales=scales, cfg=BeamConfig(beam),
                         record_keys=True, **kw)
        except OverPrunedError:
            continue
        if prev is not None:
            assert all(a <= b for a, b in zip(prev.hyp_keys, run.hyp_keys))
        prev = run


def test_over_pruned_reported():
    lex = Lexicon.from_dict({"abc": "a b c".split()})
    inv = build_inventory(lex, Topology.PHMM)
    em = EmissionMatrix(log_softmax(np.zeros((2, len(inv)))))
    with pytest.raises(OverPrunedError):
        decode(ZeroOrderScores(em), build_prefix_tree(lex), NGramLm.uniform(lex.words), inv,
               allow_silence=False)


def test_dimension_mismatch():
    lex = Lexicon.from_dict({"ab": "a b".split()})
    inv = build_inventory(lex, Topology.PHMM)
    em = EmissionMatrix(log_softmax(np.zeros((4, len(inv) + 1))))
    with pytest.raises(ValueError):
        decode(ZeroOrderScores(em), build_prefix_tree(lex), NGramLm.uniform(lex.words), inv)


def test_stats_counts_and_rtf():
    lex, inv, lm, scores, scales, _, kw, T = random_instance(2, "phmm")
    res = decode(scores, build_prefix_tree(lex), lm, inv, scales=scales, **kw)
    st_ = res.stats
    assert st_.n_steps == T
    assert len(st_.per_frame_states) == T
    assert st_.avg_active_states == pytest.approx(np.mean(st_.per_frame_states))
    assert st_.rtf == st_.search_time_s / st_.audio_time_s
    assert all(tr <= s for tr, s in zip(st_.per_frame_trees, st_.per_frame_states))


def test_measure_rtf_definition():
    runs = [DecodeStats(search_time_s=1.5, audio_time_s=6.0, n_steps=10),
            DecodeStats(search_time_s=0.5, audio_time_s=4.0, n_steps=10)]
    agg = measure_rtf(runs)
    assert agg.rtf == pytest.approx(0.2)
    assert agg.encoder_time_s == 0.0
    with pytest.raises(ValueError):
        measure_rtf(runs, audio_duration_s=0.0)


def test_downsample_counts_steps():
    rng = np.random.default_rng(0)
    em = EmissionMatrix(log_softmax(rng.normal(size=(37, 4))), frame_shift_ms=10.0)
    ds = downsample(em, 4)
    assert ds.num_frames == 10
    assert ds.frame_shift_ms == 40.0
    assert np.allclose(np.exp(ds.scores).sum(axis=1), 1.0)


def test_word_error_rate():
    assert word_error_rate([["a", "b"]], [["a", "b"]]) == 0.0
    assert word_error_rate([["a"], ["x", "y"]], [["a", "b"], ["y"]]) == pytest.approx(200 / 3)
