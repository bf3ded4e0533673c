"""Time-synchronous beam search over a lexical prefix tree.

One search loop serves four decision rules:

* ``phmm``  zero-order posterior HMM: label posteriors, loop/forward transitions, ILM subtraction
* ``ctc``   zero-order CTC: label posteriors and ILM subtraction, blank states, no transitions
* ``fh``    first-order factored hybrid: diphone posterior divided by a diphone prior
* ``mrnnt`` strictly monotonic transducer: one label-or-blank decision per frame

A hypothesis is identified by ``(tree node, sub-state, LM state, context label)``
and hypotheses sharing that key are recombined by max. The word-level LM
score (times ``lm_scale``) is added when a word-end node is entered, and
the end-of-sentence score is added after the last frame.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dp_kernel import EmissionMatrix, ScaleConfig, TransitionModel
from .errors import LexiconError, OverPrunedError
from .lexicon import LabelInventory, Lexicon
from .lm import EOS, NGramLm
from .models import (
    FirstOrderFHScores, IlmTable, MRnnTScores, PriorTable, ZeroOrderScores,
)

ROOT = 0
IN, SPECIAL = 0, 1  # sub-states: inside a tree node, or on the blank/silence state at the root


@dataclass
class PrefixTree:
    phoneme: list = field(default_factory=lambda: [None])
    parent: list = field(default_factory=lambda: [-1])
    children: list = field(default_factory=lambda: [{}])
    words: list = field(default_factory=lambda: [()])

    @property
    def num_nodes(self) -> int:
        return len(self.phoneme)

    @property
    def num_word_ends(self) -> int:
        return sum(len(w) for w in self.words)

    def is_word_end(self, node: int) -> bool:
        return bool(self.words[node])

    def _add(self, parent, phoneme):
        node = self.children[parent].get(phoneme)
        if node is None:
            node = len(self.phoneme)
            self.phoneme.append(phoneme)
            self.parent.append(parent)
            self.children.append({})
            self.words.append(())
            self.children[parent][phoneme] = node
        return node

    def lookup(self, phonemes) -> int:
        node = ROOT
        for p in phonemes:
            node = self.children[node][p]
        return node


def build_prefix_tree(lex: Lexicon) -> PrefixTree:
    if len(lex) == 0:
        raise LexiconError("cannot build a prefix tree from an empty lexicon")
    tree = PrefixTree()
    for word, pron in lex.entries.items():
        node = ROOT
        for p in pron:
            node = tree._add(node, p)
        tree.words[node] = tree.words[node] + (word,)
    return tree


@dataclass(frozen=True)
class BeamConfig:
    beam_logwidth: float = math.inf
    max_hyps: int = 1_000_000
    altas: float | None = None
    word_end_beam: float | None = None

    def __post_init__(self):
        if not self.beam_logwidth > 0:
            raise ValueError("beam_logwidth must be positive")
        if self.max_hyps < 1:
            raise ValueError("max_hyps must be at least 1")
        if self.altas is not None and self.altas < 0:
            raise ValueError("ALTAS scale must be non-negative")


@dataclass
class DecodeStats:
    avg_active_states: float = 0.0
    avg_active_trees: float = 0.0
    search_time_s: float = 0.0
    audio_time_s: float = 0.0
    rtf: float = 0.0
    encoder_time_s: float = 0.0
    n_steps: int = 0
    per_frame_states: list = field(default_factory=list)
    per_frame_trees: list = field(default_factory=list)


@dataclass
class DecodeResult:
    words: list
    score: float
    stats: DecodeStats
    hyp_keys: list = field(default_factory=list)  # surviving keys per frame, when requested


def altas_lookahead(score_t: float, scale: float) -> float:
    """Approximate the next frame's acoustic score by the scaled current one."""
    if scale < 0:
        raise ValueError("ALTAS scale must be non-negative")
    return scale * score_t


def measure_rtf(runs, audio_duration_s: float | None = None) -> DecodeStats:
    """Aggregate decode statistics; RTF is total search time over total audio time."""
    runs = list(runs)
    if not runs:
        raise ValueError("measure_rtf needs at least one run")
    audio = sum(r.audio_time_s for r in runs) if audio_duration_s is None else audio_duration_s
    if audio <= 0:
        raise ValueError("audio duration must be positive")
    search = sum(r.search_time_s for r in runs)
    steps = sum(r.n_steps for r in runs)
    weight = [max(r.n_steps, 1) for r in runs]
    return DecodeStats(
        avg_active_states=float(np.average([r.avg_active_states for r in runs], weights=weight)),
        avg_active_trees=float(np.average([r.avg_active_trees for r in runs], weights=weight)),
        search_time_s=search,
        audio_time_s=audio,
        rtf=search / audio,
        n_steps=steps,
    )


def model_kind(scores, inventory: LabelInventory) -> str:
    if isinstance(scores, ZeroOrderScores):
        return "ctc" if inventory.topology.uses_blank else "phmm"
    if isinstance(scores, FirstOrderFHScores):
        if inventory.topology.uses_blank:
            raise ValueError("factored hybrid decoding needs a silence inventory")
        return "fh"
    if isinstance(scores, MRnnTScores):
        if not inventory.topology.uses_blank:
            raise ValueError("transducer decoding needs a blank inventory")
        return "mrnnt"
    raise TypeError(f"unsupported score type {type(scores).__name__}")


class _Rule:
    """Per-frame score of emitting ``label`` with context ``ctx`` after a move of ``kind``."""

    def __init__(self, kind, scores, inventory, trans, prior, ilm, scales):
        self.kind = kind
        L = inventory.num_labels
        if scores.num_labels != L:
            raise ValueError(f"scores have {scores.num_labels} labels, inventory has {L}")
        special = inventory.special_id
        g = scales.gamma
        # ``acoustic`` is the model's own log score (used by ALTAS), ``correction``
        # the scaled ILM or prior term subtracted from it
        self.correction = None
        if kind in ("ctc", "phmm"):
            self.acoustic = scales.alpha * scores.em.scores
            if g != 0.0 and ilm is not None:
                corr = g * ilm.zero_order.copy()
                corr[special] = 0.0
                self.correction = corr
        elif kind == "fh":
            self.acoustic = scores.center_given_left + scores.left_posterior[:, :, None]
            if g != 0.0 and prior is not None:
                self.correction = g * prior.diphone_logprior
        else:
            self.acoustic = scores.label_given_context
            if g != 0.0 and ilm is not None:
                self.correction = g * ilm.first_order
        trans = trans or TransitionModel.none()
        use_trans = kind in ("phmm", "fh") and trans.mode != "none"
        labels = np.arange(L)
        self.loop_w = scales.beta * trans._lookup(trans.loop_logprob, labels) if use_trans else np.zeros(L)
        self.fwd_w = scales.beta * trans._lookup(trans.forward_logprob, labels) if use_trans else np.zeros(L)


def decode(scores, tree: PrefixTree, lm: NGramLm, inventory: LabelInventory, *,
           trans: TransitionModel | None = None, prior: PriorTable | None = None,
           ilm: IlmTable | None = None, scales: ScaleConfig = ScaleConfig(),
           cfg: BeamConfig = BeamConfig(), allow_silence: bool = True,
           record_keys: bool = False) -> DecodeResult:
    kind = model_kind(scores, inventory)
    rule = _Rule(kind, scores, inventory, trans, prior, ilm, scales)
    node_label = [-1] + [inventory.index(p) for p in tree.phoneme[1:]]
    children = [list(ch.values()) for ch in tree.children]
    words_at = tree.words
    special = inventory.special_id
    first_order = kind in ("fh", "mrnnt")
    hmm = kind in ("phmm", "fh")
    lm_cache = {}
    lam = scales.lm_scale

    def lm_step(state, word):
        key = (state, word)
        hit = lm_cache.get(key)
        if hit is None:
            hit = lm_cache[key] = lm.score_word(state, word)
        return hit

    T = scores.num_frames
    acoustic, correction = rule.acoustic, rule.correction
    loop_w, fwd_w = rule.loop_w, rule.fwd_w
    altas = cfg.altas or 0.0
    wend_beam = cfg.word_end_beam
    t0 = time.perf_counter()

    # key -> (score, trace, local acoustic score, entered a word end this frame)
    hyps = {}
    per_states, per_trees, kept_keys = [], [], []
    start_lm = lm.start_state()

    def add(new, key, score, trace, local, wend):
        old = new.get(key)
        if old is None or score > old[0]:
            new[key] = (score, trace, local, wend)

    def emit(new, t, node, sub, lm_state, ctx, label, move, score, trace):
        """Score one move into (node, sub) emitting ``label``; ``move`` is loop/forward/entry/blank."""
        if first_order:
            local = acoustic[t, ctx, label]
            inc = local if correction is None else local - correction[ctx, label]
            new_ctx = label if kind == "mrnnt" and label != special else ctx
        else:
            local = acoustic[t, label]
            inc = local if correction is None else local - correction[label]
            new_ctx = ctx
        if hmm:
            inc = inc + (loop_w[label] if move == "loop" else fwd_w[label])
        entering = sub == IN and move in ("forward", "entry") and words_at[node]
        if not entering:
            add(new, (node, sub, lm_state, new_ctx), score + inc, trace, local, False)
            return
        for w in words_at[node]:
            lp, nxt = lm_step(lm_state, w)
            add(new, (node, sub, nxt, new_ctx), score + inc + lam * lp, (w, trace), local, True)

    def expand(new, t, key, score, trace):
        node, sub, lm_state, ctx = key
        label = special if sub == SPECIAL else node_label[node]
        is_leaf = bool(words_at[node]) and sub == IN
        nxt_nodes = children[ROOT] if (is_leaf or node == ROOT) else children[node]
        if kind == "ctc":
            if sub == IN:
                emit(new, t, node, IN, lm_state, ctx, label, "loop", score, trace)
                if is_leaf:
                    emit(new, t, ROOT, SPECIAL, lm_state, ctx, special, "forward", score, trace)
                else:
                    emit(new, t, node, SPECIAL, lm_state, ctx, special, "forward", score, trace)
                for c in nxt_nodes:
                    if node_label[c] != label:
                        emit(new, t, c, IN, lm_state, ctx, node_label[c], "forward", score, trace)
            else:
                emit(new, t, node, SPECIAL, lm_state, ctx, special, "loop", score, trace)
                for c in children[node]:
                    emit(new, t, c, IN, lm_state, ctx, node_label[c], "forward", score, trace)
        elif hmm:
            # the left context of a newly entered state is the label being left
            fwd_ctx = label if kind == "fh" else ctx
            emit(new, t, node, sub, lm_state, ctx, label, "loop", score, trace)
            for c in nxt_nodes:
                emit(new, t, c, IN, lm_state, fwd_ctx, node_label[c], "forward", score, trace)
            if is_leaf and allow_silence:
                emit(new, t, ROOT, SPECIAL, lm_state, fwd_ctx, special, "forward", score, trace)
        else:
            emit(new, t, node, sub, lm_state, ctx, special, "blank", score, trace)
            for c in nxt_nodes:
                emit(new, t, c, IN, lm_state, ctx, node_label[c], "forward", score, trace)

    def start(new):
        if kind == "ctc":
            emit(new, 0, ROOT, SPECIAL, start_lm, None, special, "entry", 0.0, None)
            for c in children[ROOT]:
                emit(new, 0, c, IN, start_lm, None, node_label[c], "entry", 0.0, None)
        elif hmm:
            ctx0 = special if kind == "fh" else None
            if allow_silence:
                emit(new, 0, ROOT, SPECIAL, start_lm, ctx0, special, "entry", 0.0, None)
            for c in children[ROOT]:
                emit(new, 0, c, IN, start_lm, ctx0, node_label[c], "entry", 0.0, None)
        else:
            emit(new, 0, ROOT, IN, start_lm, special, special, "blank", 0.0, None)
            for c in children[ROOT]:
                emit(new, 0, c, IN, start_lm, special, node_label[c], "entry", 0.0, None)

    def prune(new):
        if not new:
            return new
        items = list(new.items())
        if altas:
            look = [v[0] + altas_lookahead(v[2], altas) for _, v in items]
        else:
            look = [v[0] for _, v in items]
        best = max(look)
        thr = best - cfg.beam_logwidth
        wthr = best - wend_beam if wend_beam is not None else thr
        kept = [(k, v, s) for (k, v), s in zip(items, look)
                if s >= thr and (not v[3] or s >= wthr)]
        if len(kept) > cfg.max_hyps:
            order = sorted(range(len(kept)), key=lambda i: -kept[i][2])[: cfg.max_hyps]
            kept = [kept[i] for i in sorted(order, key=lambda i: -kept[i][2])]
        return {k: v for k, v, _ in kept}

    for t in range(T):
        new = {}
        if t == 0:
            start(new)
        else:
            for key, (score, trace, _, _) in hyps.items():
                expand(new, t, key, score, trace)
        hyps = prune(new)
        if not hyps:
            raise OverPrunedError(f"no hypothesis survived frame {t}")
        per_states.append(len(hyps))
        per_trees.append(len({k[2] for k in hyps}))
        if record_keys:
            kept_keys.append(frozenset(hyps))

    best = None
    for (node, sub, lm_state, ctx), (score, trace, _, _) in hyps.items():
        at_word_end = sub == IN and bool(words_at[node])
        at_boundary = node == ROOT and (sub == SPECIAL or kind == "mrnnt")
        if not (at_word_end or at_boundary):
            continue
        total = score + lam * lm_step(lm_state, EOS)[0]
        if best is None or total > best[0]:
            best = (total, trace)
    elapsed = time.perf_counter() - t0
    if best is None:
        raise OverPrunedError("no hypothesis ends in a word-final state")

    words = []
    trace = best[1]
    while trace is not None:
        words.append(trace[0])
        trace = trace[1]
    words.reverse()
    audio = T * scores.frame_shift_ms / 1000.0
    stats = DecodeStats(
        avg_active_states=float(np.mean(per_states)),
        avg_active_trees=float(np.mean(per_trees)),
        search_time_s=elapsed,
        audio_time_s=audio,
        rtf=elapsed / audio if audio > 0 else math.inf,
        n_steps=T,
        per_frame_states=per_states,
        per_frame_trees=per_trees,
    )
    return DecodeResult(words, float(best[0]), stats, kept_keys)


@dataclass
class CorpusResult:
    hyps: list
    scores: list
    stats: list
    failures: int
    wer: float | None
    summary: DecodeStats


def decode_corpus(items, tree: PrefixTree, lm: NGramLm, inventory: LabelInventory, refs=None,
                  **kwargs) -> CorpusResult:
    """Decode every score table; over-pruned utterances count as empty hypotheses."""
    hyps, scores, stats = [], [], []
    failures = 0
    for item in items:
        try:
            res = decode(item, tree, lm, inventory, **kwargs)
        except OverPrunedError:
            failures += 1
            hyps.append([])
            scores.append(-math.inf)
            continue
        hyps.append(res.words)
        scores.append(res.score)
        stats.append(res.stats)
    wer = word_error_rate(hyps, refs) if refs is not None else None
    summary = measure_rtf(stats) if stats else DecodeStats()
    return CorpusResult(hyps, scores, stats, failures, wer, summary)


def altas_sweep(items, refs, tree: PrefixTree, lm: NGramLm, inventory: LabelInventory,
                values=(0.0, 0.25, 0.5, 1.0), cfg: BeamConfig = BeamConfig(6.0), **kwargs) -> list:
    """One row per ALTAS scale: WER, #S, #L and search RTF over the corpus."""
    rows = []
    for a in values:
        res = decode_corpus(items, tree, lm, inventory, refs,
                            cfg=BeamConfig(cfg.beam_logwidth, cfg.max_hyps, a, cfg.word_end_beam), **kwargs)
        rows.append({"altas": a, "wer": res.wer, "avg_S": res.summary.avg_active_states,
                     "avg_L": res.summary.avg_active_trees, "rtf": res.summary.rtf,
                     "failures": res.failures})
    return rows


def word_error_rate(hyps, refs):
    """Corpus WER in percent from parallel lists of word sequences."""
    errors = 0
    n_ref = 0
    for h, r in zip(hyps, refs):
        prev = list(range(len(r) + 1))
        for i, x in enumerate(h, 1):
            cur = [i]
            for j, y in enumerate(r, 1):
                cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
            prev = cur
        errors += prev[-1]
        n_ref += len(r)
    return 100.0 * errors / max(n_ref, 1)


def downsample(em, factor: int):
    """Average posteriors over groups of ``factor`` frames (the last group may be shorter)."""
    if factor < 1:
        raise ValueError("downsampling factor must be at least 1")
    if not em.normalized:
        raise ValueError("downsampling averages probabilities; scores must be normalized")
    probs = np.exp(em.scores)
    T = em.num_frames
    groups = [probs[i:i + factor].mean(axis=0) for i in range(0, T, factor)]
    out = np.log(np.stack(groups))
    out -= np.log(np.exp(out).sum(axis=1, keepdims=True))
    return EmissionMatrix(out, em.frame_shift_ms * factor, True)
