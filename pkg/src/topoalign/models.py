"""Frame-level score assembly for zero-order and first-order label context models.

All tables live in the natural-log domain. First-order tables are dense
``T x L_ctx x L`` arrays indexed by the full inventory, so the special
label doubles as the utterance-start context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dp_kernel import EmissionMatrix, ScaleConfig, TransitionModel, logsumexp

DEFAULT_PRIOR_EPSILON = 1e-8


def _normalized(table, axis, tol=1e-6):
    return np.all(np.abs(logsumexp(table, axis=axis)) <= tol)


@dataclass(frozen=True, eq=False)
class ZeroOrderScores:
    em: EmissionMatrix

    def __post_init__(self):
        if not self.em.normalized:
            raise ValueError("zero-order scores must be normalized posteriors")

    @property
    def num_frames(self):
        return self.em.num_frames

    @property
    def num_labels(self):
        return self.em.num_labels

    @property
    def frame_shift_ms(self):
        return self.em.frame_shift_ms


@dataclass(frozen=True, eq=False)
class FirstOrderFHScores:
    """``center_given_left[t, left, center]`` and ``left_posterior[t, left]``."""

    center_given_left: np.ndarray
    left_posterior: np.ndarray
    frame_shift_ms: float = 40.0

    def __post_init__(self):
        cgl = np.asarray(self.center_given_left, dtype=np.float64)
        lp = np.asarray(self.left_posterior, dtype=np.float64)
        if cgl.ndim != 3 or lp.shape != cgl.shape[:2]:
            raise ValueError("expected T x L x L and T x L tables")
        if not (_normalized(cgl, 2) and _normalized(lp, 1)):
            raise ValueError("first-order factors must be normalized")
        object.__setattr__(self, "center_given_left", cgl)
        object.__setattr__(self, "left_posterior", lp)

    @property
    def num_frames(self):
        return self.center_given_left.shape[0]

    @property
    def num_labels(self):
        return self.center_given_left.shape[2]


@dataclass(frozen=True, eq=False)
class MRnnTScores:
    """``label_given_context[t, ctx, out]``; the blank id is both an output and the start context."""

    label_given_context: np.ndarray
    frame_shift_ms: float = 40.0

    def __post_init__(self):
        tab = np.asarray(self.label_given_context, dtype=np.float64)
        if tab.ndim != 3:
            raise ValueError("expected a T x L_ctx x L table")
        if not _normalized(tab, 2):
            raise ValueError("every (t, context) slice must be normalized")
        object.__setattr__(self, "label_given_context", tab)

    @property
    def num_frames(self):
        return self.label_given_context.shape[0]

    @property
    def num_labels(self):
        return self.label_given_context.shape[2]


@dataclass(frozen=True, eq=False)
class PriorTable:
    """Joint diphone log-prior indexed ``[left, center]``."""

    diphone_logprior: np.ndarray
    epsilon: float = DEFAULT_PRIOR_EPSILON

    def __post_init__(self):
        tab = np.asarray(self.diphone_logprior, dtype=np.float64)
        if tab.ndim != 2:
            raise ValueError("prior must be a 2-D table")
        if not np.all(np.isfinite(tab)):
            raise ValueError("prior has -inf cells; use epsilon > 0")
        if abs(logsumexp(tab)) > 1e-6:
            raise ValueError("prior is not a normalized joint distribution")
        object.__setattr__(self, "diphone_logprior", tab)

    @classmethod
    def uniform(cls, num_labels: int) -> "PriorTable":
        return cls(np.full((num_labels, num_labels), -2 * np.log(num_labels)))


@dataclass(frozen=True, eq=False)
class IlmTable:
    zero_order: np.ndarray | None = None  # (L,)
    first_order: np.ndarray | None = None  # (L_ctx, L)

    def __post_init__(self):
        if self.zero_order is not None:
            z = np.asarray(self.zero_order, dtype=np.float64)
            if z.ndim != 1 or not _normalized(z, 0):
                raise ValueError("zero-order ILM must be a normalized vector")
            object.__setattr__(self, "zero_order", z)
        if self.first_order is not None:
            f = np.asarray(self.first_order, dtype=np.float64)
            if f.ndim != 2 or not _normalized(f, 1):
                raise ValueError("first-order ILM rows must be normalized")
            object.__setattr__(self, "first_order", f)

    @classmethod
    def uniform(cls, num_labels: int, first_order: bool = False) -> "IlmTable":
        row = np.full(num_labels, -np.log(num_labels))
        if first_order:
            return cls(first_order=np.tile(row, (num_labels, 1)))
        return cls(zero_order=row)


def _check_index(value, bound, what):
    if not 0 <= value < bound:
        raise IndexError(f"{what} {value} out of range [0, {bound})")


def fh_joint_score(fh: FirstOrderFHScores, prior: PriorTable | None, t: int, left: int,
                   center: int, scales: ScaleConfig) -> float:
    """log P(center | left, h_t) + log P(left | h_t) - gamma * log P_prior(left, center)."""
    _check_index(t, fh.num_frames, "frame")
    _check_index(left, fh.center_given_left.shape[1], "left label")
    _check_index(center, fh.num_labels, "center label")
    score = fh.center_given_left[t, left, center] + fh.left_posterior[t, left]
    if scales.gamma != 0.0 and prior is not None:
        score -= scales.gamma * prior.diphone_logprior[left, center]
    return float(score)


def zero_order_hyp_score(scores: ZeroOrderScores, ilm: IlmTable | None,
                         trans: TransitionModel | None, t: int, label: int,
                         prev_state_same: bool, scales: ScaleConfig,
                         ilm_exempt=(), use_transitions: bool = True) -> float:
    """Per-frame increment of the zero-order decision rule.

    ``use_transitions=False`` gives the CTC variant. Labels in ``ilm_exempt``
    (silence, blank) skip the ILM subtraction.
    """
    _check_index(t, scores.num_frames, "frame")
    _check_index(label, scores.num_labels, "label")
    score = scales.alpha * scores.em.scores[t, label]
    if scales.gamma != 0.0 and ilm is not None and label not in ilm_exempt:
        score -= scales.gamma * ilm.zero_order[label]
    if use_transitions and trans is not None:
        tr = trans.loop(label) if prev_state_same else trans.forward(label)
        score += scales.beta * tr
    return float(score)


def mrnnt_hyp_score(scores: MRnnTScores, ilm: IlmTable | None, t: int, ctx: int, out: int,
                    scales: ScaleConfig) -> float:
    """log P(out | ctx, h_t) - gamma * log P_ILM(out | ctx); blank keeps the context."""
    _check_index(t, scores.num_frames, "frame")
    _check_index(ctx, scores.label_given_context.shape[1], "context")
    _check_index(out, scores.num_labels, "output label")
    score = scores.label_given_context[t, ctx, out]
    if scales.gamma != 0.0 and ilm is not None:
        score -= scales.gamma * ilm.first_order[ctx, out]
    return float(score)


def diphone_targets(labels, start_context: int):
    """(left, center) per frame: left is the label of the previous segment."""
    labels = np.asarray(labels, dtype=np.int64)
    left = np.empty_like(labels)
    ctx = start_context
    for t in range(len(labels)):
        if t > 0 and labels[t] != labels[t - 1]:
            ctx = int(labels[t - 1])
        left[t] = ctx
    return left, labels


def _smooth_log(counts, epsilon):
    total = counts.sum()
    if total <= 0:
        raise ValueError("no frames observed")
    probs = counts / total + epsilon
    probs /= probs.sum()
    if np.any(probs == 0):
        raise ValueError("zero-probability cells; smoothing epsilon must be > 0")
    return np.log(probs)


def estimate_prior(source, num_labels: int, epsilon: float = DEFAULT_PRIOR_EPSILON,
                   start_context: int | None = None) -> PriorTable:
    """Diphone prior from hard alignments (label sequences or objects with ``labels``)
    or from soft ``T x L x L`` diphone posteriors (expected counts)."""
    counts = np.zeros((num_labels, num_labels))
    start = num_labels - 1 if start_context is None else start_context
    n = 0
    for item in source:
        if isinstance(item, FirstOrderFHScores):
            item = np.exp(item.center_given_left + item.left_posterior[:, :, None])
        arr = np.asarray(getattr(item, "labels", item))
        if arr.ndim == 3:
            counts += arr.sum(axis=0)
            n += arr.shape[0]
        else:
            left, center = diphone_targets(arr, start)
            np.add.at(counts, (left, center), 1.0)
            n += len(arr)
    if n == 0:
        raise ValueError("cannot estimate a prior from an empty corpus")
    return PriorTable(_smooth_log(counts, epsilon), epsilon)


def estimate_ilm(corpus) -> IlmTable:
    """Average frame posteriors over a corpus of zero-order or mRNN-T scores."""
    zero_sum, first_sum = None, None
    n_zero = n_first = 0
    for item in corpus:
        if isinstance(item, ZeroOrderScores):
            item = item.em
        if isinstance(item, EmissionMatrix):
            p = np.exp(item.scores)
            zero_sum = p.sum(axis=0) if zero_sum is None else zero_sum + p.sum(axis=0)
            n_zero += p.shape[0]
        elif isinstance(item, MRnnTScores):
            p = np.exp(item.label_given_context)
            first_sum = p.sum(axis=0) if first_sum is None else first_sum + p.sum(axis=0)
            n_first += p.shape[0]
        else:
            raise TypeError(f"cannot estimate an ILM from {type(item).__name__}")
    if n_zero == 0 and n_first == 0:
        raise ValueError("cannot estimate an ILM from an empty corpus")
    with np.errstate(divide="ignore"):
        return _ilm_from_sums(zero_sum, n_zero, first_sum, n_first)


def _ilm_from_sums(zero_sum, n_zero, first_sum, n_first) -> IlmTable:
    zero = first = None
    if n_zero:
        mean = zero_sum / n_zero
        zero = np.log(mean / mean.sum())
    if n_first:
        mean = first_sum / n_first
        first = np.log(mean / mean.sum(axis=1, keepdims=True))
    return IlmTable(zero, first)
