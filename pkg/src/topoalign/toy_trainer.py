"""Desk-scale two-stage pipeline on synthetic data.

Stage one trains a zero-order frame classifier from scratch with the
full-sum criterion under a CTC or P-HMM topology. Its Viterbi alignments
then serve as frame-level targets for first-order models (factored hybrid
or strictly monotonic transducer) trained with frame-wise cross-entropy.
Features are Gaussian clusters around one mean per label, so the true
segmentation is known.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .align_eval import FrameAlignment, corpus_report
from .dp_kernel import (
    EmissionMatrix, ScaleConfig, TransitionModel, full_sum_gradient, full_sum_loss, log_softmax,
    viterbi,
)
from .lexicon import LabelInventory, Lexicon, Topology, build_inventory, phonemize
from .models import FirstOrderFHScores, MRnnTScores, ZeroOrderScores, diphone_targets
from .topology import build_alignment_fsa, remove_label_loops

log = logging.getLogger(__name__)

PHONEME_SYMBOLS = "aeioukstmn"


@dataclass(frozen=True)
class DurationModel:
    """Uniform integer durations in frames; silence between words with probability ``silence_prob``."""

    phoneme_min: int = 4
    phoneme_max: int = 8
    silence_min: int = 2
    silence_max: int = 8
    silence_prob: float = 0.3
    edge_silence: bool = True

    def __post_init__(self):
        if not 1 <= self.phoneme_min <= self.phoneme_max:
            raise ValueError("need 1 <= phoneme_min <= phoneme_max")
        if not 1 <= self.silence_min <= self.silence_max:
            raise ValueError("need 1 <= silence_min <= silence_max")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise ValueError("silence_prob must be a probability")

    def scaled(self, factor: int) -> "DurationModel":
        """Same segmentation statistics at a ``factor`` times finer frame rate."""
        return replace(self, phoneme_min=self.phoneme_min * factor, phoneme_max=self.phoneme_max * factor,
                       silence_min=self.silence_min * factor, silence_max=self.silence_max * factor)


@dataclass(eq=False)
class Utterance:
    utt_id: str
    features: np.ndarray  # T x D
    words: tuple
    truth: np.ndarray  # per-frame label id in the silence inventory
    segments: np.ndarray  # per-frame segment index, separates repeated labels


@dataclass(eq=False)
class SyntheticCorpus:
    utterances: list
    lexicon: Lexicon
    inventory: LabelInventory  # P-HMM inventory; the CTC one shares every id
    means: np.ndarray
    seed: int
    noise: float
    frame_shift_ms: float
    durations: DurationModel
    words_per_utt: tuple

    def __len__(self):
        return len(self.utterances)

    def inventory_for(self, topology) -> LabelInventory:
        return self.inventory.with_topology(Topology.parse(topology))

    def truth_alignments(self, topology=Topology.PHMM) -> list:
        inv = self.inventory_for(topology)
        return [FrameAlignment(u.utt_id, u.truth, self.frame_shift_ms, inv, u.words, u.segments)
                for u in self.utterances]

    def silence_fraction(self) -> float:
        special = self.inventory.special_id
        frames = sum(len(u.truth) for u in self.utterances)
        return sum(int(np.sum(u.truth == special)) for u in self.utterances) / frames

    def expected_silence_fraction(self) -> float:
        """Ratio of expected silence frames to expected frames under the generator settings."""
        d = self.durations
        lo, hi = self.words_per_utt
        n_words = (lo + hi) / 2
        phones_per_word = np.mean([len(self.lexicon[w]) for w in self.lexicon.words])
        sil_mean = (d.silence_min + d.silence_max) / 2
        n_sil = (2 if d.edge_silence else 0) + (n_words - 1) * d.silence_prob
        sil = n_sil * sil_mean
        phon = n_words * phones_per_word * (d.phoneme_min + d.phoneme_max) / 2
        return sil / (sil + phon)


def demo_lexicon(n_phonemes: int = 4, n_words: int = 6, seed: int = 0) -> Lexicon:
    """Random words of two or three phonemes with distinct pronunciations.

    Adjacent phonemes within a word differ, since a frame classifier without
    context cannot tell where one segment of a label ends and the next begins.
    """
    if not 2 <= n_phonemes <= len(PHONEME_SYMBOLS):
        raise ValueError(f"n_phonemes must be in [2, {len(PHONEME_SYMBOLS)}]")
    rng = np.random.default_rng(seed)
    symbols = list(PHONEME_SYMBOLS[:n_phonemes])
    prons = set()
    budget = 1000
    while len(prons) < n_words and budget:
        budget -= 1
        pron = tuple(rng.choice(symbols, size=int(rng.integers(2, 4))))
        if all(a != b for a, b in zip(pron, pron[1:])):
            prons.add(pron)
    if len(prons) < n_words:
        raise ValueError("too few phonemes for that many distinct words")
    ordered = sorted(prons)
    return Lexicon.from_dict({"".join(p): list(p) for p in ordered})


def generate_corpus(seed: int, n_utts: int, lexicon: Lexicon, *, noise: float = 0.5, dim: int = 8,
                    durations: DurationModel = DurationModel(), words_per_utt=(1, 3),
                    frame_shift_ms: float = 40.0, means: np.ndarray | None = None,
                    id_prefix: str = "utt") -> SyntheticCorpus:
    if len(lexicon) == 0:
        raise ValueError("lexicon is empty")
    if n_utts < 0 or noise < 0:
        raise ValueError("n_utts and noise must be non-negative")
    lo, hi = words_per_utt
    if not 1 <= lo <= hi:
        raise ValueError("need 1 <= min words <= max words")
    inv = build_inventory(lexicon, Topology.PHMM)
    rng = np.random.default_rng(seed)
    if means is None:
        # word-end variants get their own cluster, as they are separate labels
        means = 2.0 * rng.normal(size=(len(inv), dim))
    words = lexicon.words
    sil = inv.special_id
    d = durations
    utts = []
    for i in range(n_utts):
        ws = tuple(words[k] for k in rng.integers(0, len(words), size=int(rng.integers(lo, hi + 1))))
        truth, segs = [], []

        def segment(label, lo_, hi_):
            n = int(rng.integers(lo_, hi_ + 1))
            segs.extend([segs[-1] + 1 if segs else 0] * n)
            truth.extend([label] * n)

        def silence():
            segment(sil, d.silence_min, d.silence_max)

        if d.edge_silence:
            silence()
        for j, w in enumerate(ws):
            if j > 0 and rng.random() < d.silence_prob:
                silence()
            for p in lexicon[w]:
                segment(inv.index(p), d.phoneme_min, d.phoneme_max)
        if d.edge_silence:
            silence()
        truth = np.array(truth, dtype=np.int64)
        feats = means[truth] + noise * rng.normal(size=(len(truth), means.shape[1]))
        utts.append(Utterance(f"{id_prefix}{i:04d}", feats, ws, truth, np.array(segs, dtype=np.int64)))
    return SyntheticCorpus(utts, lexicon, inv, means, seed, noise, frame_shift_ms, durations, (lo, hi))


def stack_context(features: np.ndarray, context: int) -> np.ndarray:
    """Concatenate frames t-context..t+context, repeating the edge frames."""
    if context == 0:
        return features
    T = len(features)
    idx = np.clip(np.arange(T)[:, None] + np.arange(-context, context + 1)[None, :], 0, T - 1)
    return features[idx].reshape(T, -1)


@dataclass(eq=False)
class FrameClassifier:
    """One tanh hidden layer. The output layer starts at zero, so initial posteriors are uniform."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    context: int = 0

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, rng, context: int = 0) -> "FrameClassifier":
        w1 = rng.normal(scale=1.0 / math.sqrt(in_dim), size=(in_dim, hidden))
        return cls(w1, np.zeros(hidden), np.zeros((hidden, out_dim)), np.zeros(out_dim), context)

    @property
    def num_outputs(self) -> int:
        return self.w2.shape[1]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "FrameClassifier":
        return FrameClassifier(*(p.copy() for p in self.params()), context=self.context)

    def hidden(self, x):
        return np.tanh(x @ self.w1 + self.b1)

    def logits(self, x):
        return self.hidden(x) @ self.w2 + self.b2

    def backward(self, x, d_logits):
        h = self.hidden(x)
        dh = (d_logits @ self.w2.T) * (1.0 - h * h)
        return [x.T @ dh, dh.sum(axis=0), h.T @ d_logits, d_logits.sum(axis=0)]

    def step(self, grads, lr):
        for p, g in zip(self.params(), grads):
            p -= lr * g


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 1.0
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    topology: str = "phmm"
    batch_size: int = 10
    hidden: int = 32
    context: int = 0
    transitions: str = "uniform"  # none | uniform
    allow_silence: bool = True
    prior_scale: float = 0.0  # divide by the previous epoch's mean posterior to this power

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.prior_scale >= 0:
            raise ValueError("prior_scale must be non-negative")
        if self.transitions not in ("none", "uniform"):
            raise ValueError("transitions must be 'none' or 'uniform'")
        Topology.parse(self.topology)

    @classmethod
    def tuned(cls, topology, **overrides) -> "TrainConfig":
        """P-HMM with label posterior scale 0.7, transition scale 0.1 and prior scale 0.5; CTC unscaled."""
        base = {"topology": str(Topology.parse(topology).value)}
        if not Topology.parse(topology).uses_blank:
            base.update(alpha=0.7, beta=0.1, prior_scale=0.5)
        return cls(**{**base, **overrides})

    @property
    def scales(self) -> ScaleConfig:
        return ScaleConfig(alpha=self.alpha, beta=self.beta)

    def transition_model(self) -> TransitionModel:
        if self.transitions == "none" or Topology.parse(self.topology).uses_blank:
            return TransitionModel.none()
        return TransitionModel.uniform()

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        out = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in values:
                continue
            raw = values[name]
            if f.type in ("bool", bool):
                out[name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            elif f.type in ("int", int):
                out[name] = int(raw)
            elif f.type in ("float", float):
                out[name] = float(raw)
            else:
                out[name] = str(raw)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**out)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)  # full-sum loss per frame after each epoch, prior term excluded
    skipped: list = field(default_factory=list)


def _fsas(corpus: SyntheticCorpus, topology: Topology, allow_silence: bool):
    inv = corpus.inventory_for(topology)
    out = []
    for u in corpus.utterances:
        fsa = build_alignment_fsa(phonemize(u.words, corpus.lexicon), inv, allow_silence)
        out.append(fsa if fsa.min_path_length() <= len(u.truth) else None)
    return out


def train_zero_order(corpus: SyntheticCorpus, cfg: TrainConfig = TrainConfig(),
                     report: TrainReport | None = None) -> FrameClassifier:
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    topology = Topology.parse(cfg.topology)
    rng = np.random.default_rng(cfg.seed)
    fsas = _fsas(corpus, topology, cfg.allow_silence)
    report = report if report is not None else TrainReport()
    for u, fsa in zip(corpus.utterances, fsas):
        if fsa is None:
            log.warning("skipping %s: fewer frames than the shortest alignment path", u.utt_id)
            report.skipped.append(u.utt_id)
    items = [(stack_context(u.features, cfg.context), fsa)
             for u, fsa in zip(corpus.utterances, fsas) if fsa is not None]
    if not items:
        raise ValueError("no utterance has a valid alignment path")
    model = FrameClassifier.init(items[0][0].shape[1], cfg.hidden, len(corpus.inventory), rng, cfg.context)
    trans = cfg.transition_model()
    scales = cfg.scales
    L = len(corpus.inventory)
    # without the prior, silence grows into a catch-all label and words shrink to one frame per phoneme
    log_prior = None
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        frames = 0
        post_sum = np.zeros(L)
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            grads = [np.zeros_like(p) for p in model.params()]
            n = 0
            for x, fsa in batch:
                logits = model.logits(x)
                g = full_sum_gradient(fsa, logits, trans, scales, log_prior=log_prior)
                for acc, part in zip(grads, model.backward(x, g)):
                    acc += part
                n += len(x)
                post_sum += np.exp(log_softmax(logits)).sum(0)
            frames += n
            model.step([g / n for g in grads], cfg.lr)
        report.losses.append(sum(full_sum_loss(fsa, log_softmax(model.logits(x)), trans, scales)
                                 for x, fsa in items) / frames)
        if cfg.prior_scale > 0:
            log_prior = cfg.prior_scale * np.log(post_sum / frames)
    return model


def posteriors(model: FrameClassifier, features: np.ndarray, frame_shift_ms: float = 40.0) -> EmissionMatrix:
    return EmissionMatrix(log_softmax(model.logits(stack_context(features, model.context))), frame_shift_ms)


def full_sum_corpus_loss(model, corpus, cfg: TrainConfig) -> float:
    """Mean full-sum loss per frame over the utterances with a valid path."""
    topology = Topology.parse(cfg.topology)
    total, frames = 0.0, 0
    for u, fsa in zip(corpus.utterances, _fsas(corpus, topology, cfg.allow_silence)):
        if fsa is None:
            continue
        em = posteriors(model, u.features)
        total += full_sum_loss(fsa, em, cfg.transition_model(), cfg.scales)
        frames += len(u.truth)
    return total / frames


def force_align(corpus: SyntheticCorpus, model: FrameClassifier, topology, scales: ScaleConfig = ScaleConfig(),
                trans: TransitionModel | None = None, allow_silence: bool = True,
                remove_loops: bool = False) -> list:
    """Viterbi alignment of every utterance; ``remove_loops`` keeps one frame per CTC label run."""
    topology = Topology.parse(topology)
    inv = corpus.inventory_for(topology)
    if trans is None:
        trans = TransitionModel.none() if topology.uses_blank else TransitionModel.uniform()
    out = []
    for u in corpus.utterances:
        fsa = build_alignment_fsa(phonemize(u.words, corpus.lexicon), inv, allow_silence)
        em = posteriors(model, u.features, corpus.frame_shift_ms)
        path, _ = viterbi(fsa, em, trans, scales, inv)
        if remove_loops:
            if not topology.uses_blank:
                raise ValueError("label loops are removed from CTC alignments only")
            path = remove_label_loops(path)
        out.append(FrameAlignment(u.utt_id, path.labels, corpus.frame_shift_ms, inv, u.words, path.states))
    return out


@dataclass(eq=False)
class FirstOrderModel:
    """Frame classifiers conditioned on the previous label.

    ``kind == "fh"``: ``center`` sees [features, one-hot left] and ``left``
    sees the features alone. ``kind == "mrnnt"``: ``center`` sees
    [features, one-hot previous non-blank label] and also predicts blank.
    """

    kind: str
    center: FrameClassifier
    left: FrameClassifier | None
    num_labels: int

    def _center_input(self, x, ctx):
        onehot = np.zeros((len(x), self.num_labels))
        onehot[np.arange(len(x)), ctx] = 1.0
        return np.hstack([x, onehot])

    def scores(self, features: np.ndarray, frame_shift_ms: float = 40.0):
        x = stack_context(features, self.center.context)
        T, L = len(x), self.num_labels
        table = np.empty((T, L, L))
        for c in range(L):
            table[:, c, :] = log_softmax(self.center.logits(self._center_input(x, np.full(T, c))))
        if self.kind == "mrnnt":
            return MRnnTScores(table, frame_shift_ms)
        left = log_softmax(self.left.logits(x))
        return FirstOrderFHScores(table, left, frame_shift_ms)


def first_order_targets(alignment: FrameAlignment, kind: str, special: int):
    """(context, target) per frame. FH: context is the previous segment label;
    mRNN-T: the previous non-blank output, with blank at the start."""
    labels = alignment.labels
    if kind == "fh":
        if alignment.states is None:
            return diphone_targets(labels, special)
        ctx = np.empty_like(labels)
        cur = special
        for t in range(len(labels)):
            if t > 0 and alignment.states[t] != alignment.states[t - 1]:
                cur = int(labels[t - 1])
            ctx[t] = cur
        return ctx, labels
    ctx = np.empty_like(labels)
    cur = special
    for t, y in enumerate(labels):
        ctx[t] = cur
        if y != special:
            cur = int(y)
    return ctx, labels


def _train_ce(model: FrameClassifier, inputs, targets, cfg: TrainConfig, rng):
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        total, frames = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = np.vstack([inputs[i] for i in idx])
            y = np.concatenate([targets[i] for i in idx])
            logp = log_softmax(model.logits(x))
            total += -logp[np.arange(len(y)), y].sum()
            frames += len(y)
            d = np.exp(logp)
            d[np.arange(len(y)), y] -= 1.0
            model.step([g / len(y) for g in model.backward(x, d)], cfg.lr)
        losses.append(total / frames)
    return losses


# the second stage sees +-6 frames, enough to reach into the previous segment; the zero-order stage sees one frame
FIRST_ORDER_CONFIG = TrainConfig(epochs=30, context=6)


def train_first_order(corpus: SyntheticCorpus, alignments: list, kind: str,
                      cfg: TrainConfig = FIRST_ORDER_CONFIG, report: TrainReport | None = None) -> FirstOrderModel:
    if kind not in ("fh", "mrnnt"):
        raise ValueError(f"unknown first-order model {kind!r}")
    if len(alignments) != len(corpus):
        raise ValueError("alignments do not cover the corpus")
    L = len(corpus.inventory)
    special = corpus.inventory.special_id
    rng = np.random.default_rng(cfg.seed)
    xs, ctxs, ys = [], [], []
    for u, a in zip(corpus.utterances, alignments):
        if a.num_frames != len(u.features):
            raise ValueError(f"alignment of {u.utt_id} has the wrong length")
        ctx, y = first_order_targets(a, kind, special)
        if ctx.min() < 0 or ctx.max() >= L:
            raise IndexError("context label out of range")
        xs.append(stack_context(u.features, cfg.context))
        ctxs.append(ctx)
        ys.append(y)
    d = xs[0].shape[1]
    center = FrameClassifier.init(d + L, cfg.hidden, L, rng, cfg.context)
    fo = FirstOrderModel(kind, center, None, L)
    center_in = [fo._center_input(x, c) for x, c in zip(xs, ctxs)]
    losses = _train_ce(center, center_in, ys, cfg, rng)
    if kind == "fh":
        fo.left = FrameClassifier.init(d, cfg.hidden, L, rng, cfg.context)
        _train_ce(fo.left, xs, ctxs, cfg, rng)
    if report is not None:
        report.losses.extend(losses)
    return fo


def zero_order_scores(model: FrameClassifier, utt: Utterance, frame_shift_ms: float) -> ZeroOrderScores:
    return ZeroOrderScores(posteriors(model, utt.features, frame_shift_ms))


@dataclass
class PipelineResult:
    corpus: SyntheticCorpus
    dev: SyntheticCorpus
    zero_order: dict  # topology -> FrameClassifier
    configs: dict  # topology -> TrainConfig
    alignments: dict  # topology -> list of FrameAlignment
    reports: dict  # topology (and "truth") -> TseReport
    first_order: FirstOrderModel
    train_reports: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {}
        for key, rep in self.reports.items():
            out[f"{key}_tse_ms"] = rep.tse_ms
            out[f"{key}_special_pct"] = rep.silence_or_blank_pct
            out[f"{key}_phoneme_ms"] = rep.avg_phoneme_ms
        return out


def run_pipeline(seed: int = 0, n_utts: int = 100, noise: float = 1.0, n_phonemes: int = 4,
                 n_words: int = 6, n_dev: int = 40, durations: DurationModel = DurationModel(),
                 topologies=("phmm", "ctc"), first_order: str = "fh",
                 epochs: int | None = None) -> PipelineResult:
    """Generate, train zero-order models per topology, align, evaluate, train a first-order model.

    The first-order model learns from the alignments of the first topology in
    ``topologies`` (P-HMM alignments for FH; CTC alignments with label loops
    removed for mRNN-T).
    """
    lex = demo_lexicon(n_phonemes, n_words, seed)
    corpus = generate_corpus(seed, n_utts, lex, noise=noise, durations=durations)
    dev = generate_corpus(seed + 1, n_dev, lex, noise=noise, durations=durations, means=corpus.means,
                          id_prefix="dev")
    models, configs, aligns, reports, train_reports = {}, {}, {}, {}, {}
    truth = corpus.truth_alignments()
    reports["truth"] = corpus_report(zip(truth, truth))
    for topo in topologies:
        overrides = {"seed": seed} if epochs is None else {"seed": seed, "epochs": epochs}
        cfg = TrainConfig.tuned(topo, **overrides)
        rep = TrainReport()
        models[topo] = train_zero_order(corpus, cfg, rep)
        configs[topo] = cfg
        train_reports[topo] = rep
        aligns[topo] = force_align(corpus, models[topo], topo, cfg.scales, cfg.transition_model())
        reports[topo] = corpus_report(zip(aligns[topo], corpus.truth_alignments(topo)))
    source = topologies[0]
    targets = aligns[source]
    if first_order == "mrnnt":
        if not Topology.parse(source).uses_blank:
            raise ValueError("mRNN-T targets come from CTC alignments")
        targets = force_align(corpus, models[source], source, configs[source].scales, remove_loops=True)
    fo = train_first_order(corpus, targets, first_order, replace(FIRST_ORDER_CONFIG, seed=seed))
    return PipelineResult(corpus, dev, models, configs, aligns, reports, fo, train_reports)


def save_classifier(model: FrameClassifier, path):
    np.savez(path, w1=model.w1, b1=model.b1, w2=model.w2, b2=model.b2, context=model.context)


def load_classifier(path) -> FrameClassifier:
    with np.load(path) as z:
        return FrameClassifier(z["w1"], z["b1"], z["w2"], z["b2"], int(z["context"]))
