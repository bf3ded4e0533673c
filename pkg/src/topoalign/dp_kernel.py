"""Forward-backward and Viterbi over an :class:`AlignmentFsa` in the log semiring.

The kernel never looks at the topology: it only sees per-state emission
labels and per-arc transition weights. Scales are applied to the scores
before they enter the recursion, so occupancies are posteriors of the
scaled model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NoValidPathError, TopologyError
from .topology import AlignmentFsa, AlignmentPath, ArcKind

NEG_INF = -np.inf


@dataclass(frozen=True, eq=False)
class EmissionMatrix:
    scores: np.ndarray
    frame_shift_ms: float = 40.0
    normalized: bool = True

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
            raise ValueError(f"emission matrix must be T x L with T, L >= 1, got {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ValueError("emission matrix has non-finite entries")
        if self.normalized:
            row = logsumexp(scores, axis=1)
            if np.max(np.abs(row)) > 1e-6:
                raise ValueError("rows are not normalized log-distributions")
        object.__setattr__(self, "scores", scores)

    @property
    def num_frames(self) -> int:
        return self.scores.shape[0]

    @property
    def num_labels(self) -> int:
        return self.scores.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_shift_ms / 1000.0

    @classmethod
    def from_logits(cls, logits, frame_shift_ms=40.0) -> "EmissionMatrix":
        return cls(log_softmax(np.asarray(logits, dtype=np.float64)), frame_shift_ms, True)


@dataclass(frozen=True)
class TransitionModel:
    """Loop / forward log-probabilities, shared (``global``) or per emitted label.

    A frame is scored by the label it emits: ``loop[label]`` when the state
    is unchanged, ``forward[label]`` when the state was just entered
    (including the first frame).
    """

    mode: str = "none"
    loop_logprob: object = 0.0
    forward_logprob: object = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "global", "per-label"):
            raise ValueError(f"unknown transition mode {self.mode!r}")
        if self.mode == "none":
            return
        loop = np.asarray(self.loop_logprob, dtype=np.float64)
        fwd = np.asarray(self.forward_logprob, dtype=np.float64)
        if self.mode == "global" and (loop.ndim or fwd.ndim):
            raise ValueError("global transitions take scalars")
        if loop.shape != fwd.shape:
            raise ValueError("loop and forward tables differ in shape")
        total = np.exp(loop) + np.exp(fwd)
        if np.any(np.abs(total - 1.0) > 1e-6):
            raise ValueError("loop and forward probabilities must sum to one")

    @classmethod
    def none(cls) -> "TransitionModel":
        return cls("none")

    @classmethod
    def uniform(cls) -> "TransitionModel":
        return cls("global", np.log(0.5), np.log(0.5))

    @classmethod
    def global_loop(cls, loop_prob: float) -> "TransitionModel":
        return cls("global", float(np.log(loop_prob)), float(np.log1p(-loop_prob)))

    @classmethod
    def per_label(cls, loop_probs) -> "TransitionModel":
        p = np.asarray(loop_probs, dtype=np.float64)
        return cls("per-label", np.log(p), np.log1p(-p))

    def _lookup(self, table, labels):
        if self.mode == "global":
            return np.full(len(labels), float(table))
        return np.asarray(table, dtype=np.float64)[labels]

    def loop(self, label: int) -> float:
        if self.mode == "none":
            return 0.0
        return float(self._lookup(self.loop_logprob, np.array([label]))[0])

    def forward(self, label: int) -> float:
        if self.mode == "none":
            return 0.0
        return float(self._lookup(self.forward_logprob, np.array([label]))[0])

    def arc_weights(self, fsa: AlignmentFsa) -> np.ndarray:
        if self.mode == "none":
            return np.zeros(fsa.num_arcs)
        dst_label = fsa.state_label[fsa.arc_dst]
        loop = self._lookup(self.loop_logprob, dst_label)
        fwd = self._lookup(self.forward_logprob, dst_label)
        return np.where(fsa.arc_kind == ArcKind.LOOP, loop, fwd)

    def entry_weights(self, fsa: AlignmentFsa) -> np.ndarray:
        """Per-state weight of entering at frame 0 (meaningful for initial states only)."""
        if self.mode == "none":
            return np.zeros(fsa.num_states)
        return self._lookup(self.forward_logprob, fsa.state_label)


@dataclass(frozen=True)
class ScaleConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    lm_scale: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.lm_scale)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("scales must be finite")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True, eq=False)
class Occupancies:
    state: np.ndarray  # (T, S)
    label: np.ndarray  # (T, L)


@dataclass(frozen=True, eq=False)
class _Prepared:
    emit: np.ndarray  # (T, S) scaled emission score per state
    arc_w: np.ndarray  # (A,) scaled transition weights
    entry_w: np.ndarray  # (S,) scaled entry weights, -inf for non-initial states
    final_mask: np.ndarray
    offset: float = 0.0  # path-independent constant folded out of the recursion


def logsumexp(x, axis=None):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    return logits - np.expand_dims(logsumexp(logits, axis=axis), axis)


def _prepare(fsa, em, trans, scales) -> _Prepared:
    scores = em.scores if isinstance(em, EmissionMatrix) else np.asarray(em, dtype=np.float64)
    T, L = scores.shape
    if fsa.state_label.max(initial=-1) >= L:
        raise TopologyError(f"FSA uses label {fsa.state_label.max()} but emissions have {L} columns")
    min_len = fsa.min_path_length()
    if min_len < 0 or T < min_len:
        raise NoValidPathError(f"{T} frames but the shortest path needs {min_len}")
    trans = trans or TransitionModel.none()
    emit = scales.alpha * scores[:, fsa.state_label]
    arc_raw = trans.arc_weights(fsa)
    entry_raw = trans.entry_weights(fsa)[fsa.initial]
    offset = 0.0
    raw = np.concatenate([arc_raw, entry_raw])
    if raw.size and np.all(raw == raw[0]):
        # every path takes exactly T transitions of the same weight
        offset = T * (scales.beta * float(raw[0]))
        arc_w = np.zeros(fsa.num_arcs)
        entry_vals = np.zeros(len(fsa.initial))
    else:
        arc_w = scales.beta * arc_raw
        entry_vals = scales.beta * entry_raw
    entry_w = np.full(fsa.num_states, NEG_INF)
    entry_w[fsa.initial] = entry_vals
    final_mask = np.zeros(fsa.num_states, dtype=bool)
    final_mask[fsa.final] = True
    return _Prepared(emit, arc_w, entry_w, final_mask, offset)


def _forward(fsa, prep):
    T, S = prep.emit.shape
    src_in, arc_in = fsa.incoming()
    w_in = np.where(arc_in >= 0, prep.arc_w[np.maximum(arc_in, 0)], NEG_INF)
    alpha = np.empty((T, S))
    alpha[0] = prep.entry_w + prep.emit[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][src_in] + w_in, axis=1) + prep.emit[t]
    log_z = logsumexp(alpha[T - 1][prep.final_mask])
    return alpha, log_z


def _backward(fsa, prep):
    T, S = prep.emit.shape
    dst_out, arc_out = fsa.outgoing()
    w_out = np.where(arc_out >= 0, prep.arc_w[np.maximum(arc_out, 0)], NEG_INF)
    beta = np.empty((T, S))
    beta[T - 1] = np.where(prep.final_mask, 0.0, NEG_INF)
    for t in range(T - 2, -1, -1):
        nxt = prep.emit[t + 1] + beta[t + 1]
        beta[t] = logsumexp(nxt[dst_out] + w_out, axis=1)
    return beta


def _check_z(log_z):
    if not np.isfinite(log_z):
        raise NoValidPathError("no path of non-zero probability")


def full_sum_loss(fsa: AlignmentFsa, em, trans: TransitionModel | None = None,
                  scales: ScaleConfig = ScaleConfig()) -> float:
    """Negative log of the scaled score summed over all FSA paths."""
    prep = _prepare(fsa, em, trans, scales)
    _, log_z = _forward(fsa, prep)
    _check_z(log_z)
    return -log_z - prep.offset


def forward_backward(fsa: AlignmentFsa, em, trans: TransitionModel | None = None,
                     scales: ScaleConfig = ScaleConfig()):
    """Returns ``(loss, Occupancies)``; the loss matches :func:`full_sum_loss` exactly."""
    prep = _prepare(fsa, em, trans, scales)
    alpha, log_z = _forward(fsa, prep)
    _check_z(log_z)
    beta = _backward(fsa, prep)
    with np.errstate(under="ignore"):
        occ = np.exp(alpha + beta - log_z)
    T = occ.shape[0]
    n_labels = (em.num_labels if isinstance(em, EmissionMatrix) else np.shape(em)[1])
    label_occ = np.zeros((T, n_labels))
    np.add.at(label_occ.T, fsa.state_label, occ.T)
    return -log_z - prep.offset, Occupancies(occ, label_occ)


def full_sum_gradient(fsa: AlignmentFsa, em_logits, trans: TransitionModel | None = None,
                      scales: ScaleConfig = ScaleConfig(), return_loss: bool = False,
                      log_prior: np.ndarray | None = None):
    """Gradient of the full-sum loss w.r.t. unnormalized logits (log-softmax applied per frame).

    d loss / d logits[t, k] = alpha * (softmax(logits)[t, k] - label occupancy[t, k])

    ``log_prior`` (length L, already scaled) is subtracted from the scaled
    emission scores and treated as a constant.
    """
    logits = np.asarray(em_logits, dtype=np.float64)
    logp = log_softmax(logits)
    if log_prior is None:
        loss, occ = forward_backward(fsa, logp, trans, scales)
    else:
        loss, occ = forward_backward(fsa, scales.alpha * logp - np.asarray(log_prior, dtype=np.float64),
                                     trans, replace(scales, alpha=1.0))
    grad = scales.alpha * (np.exp(logp) - occ.label)
    return (grad, loss) if return_loss else grad


def viterbi(fsa: AlignmentFsa, em, trans: TransitionModel | None = None,
            scales: ScaleConfig = ScaleConfig(), inventory=None):
    """Best path and its scaled log-score. Ties go to the lowest state id."""
    prep = _prepare(fsa, em, trans, scales)
    T, S = prep.emit.shape
    src_in, arc_in = fsa.incoming()
    w_in = np.where(arc_in >= 0, prep.arc_w[np.maximum(arc_in, 0)], NEG_INF)
    delta = np.empty((T, S))
    back = np.zeros((T, S), dtype=np.int64)
    delta[0] = prep.entry_w + prep.emit[0]
    rows = np.arange(S)
    for t in range(1, T):
        cand = delta[t - 1][src_in] + w_in
        k = np.argmax(cand, axis=1)
        back[t] = src_in[rows, k]
        delta[t] = cand[rows, k] + prep.emit[t]
    finals = fsa.final
    best = finals[int(np.argmax(delta[T - 1][finals]))]
    score = delta[T - 1, best]
    if not np.isfinite(score):
        raise NoValidPathError("no path of non-zero probability")
    states = np.empty(T, dtype=np.int64)
    states[T - 1] = best
    for t in range(T - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    blank = inventory.blank_id if inventory is not None else None
    silence = inventory.silence_id if inventory is not None else None
    path = AlignmentPath(fsa.state_label[states], states, blank, silence)
    return path, float(score + prep.offset)


def path_score(fsa: AlignmentFsa, states, em, trans: TransitionModel | None = None,
               scales: ScaleConfig = ScaleConfig()) -> float:
    """Scaled log-score of one explicit state sequence (no recursion)."""
    scores = em.scores if isinstance(em, EmissionMatrix) else np.asarray(em, dtype=np.float64)
    trans = trans or TransitionModel.none()
    states = [int(s) for s in states]
    total = 0.0
    for t, s in enumerate(states):
        lab = int(fsa.state_label[s])
        total += scales.alpha * scores[t, lab]
        if t > 0 and states[t - 1] == s:
            total += scales.beta * trans.loop(lab)
        else:
            total += scales.beta * trans.forward(lab)
    return total


def frame_ce_loss(alignment, em_logits) -> float:
    """Mean over frames of -log softmax(logits_t)[label_t]."""
    labels = np.asarray(getattr(alignment, "labels", alignment), dtype=np.int64)
    logits = np.asarray(em_logits, dtype=np.float64)
    if len(labels) != logits.shape[0]:
        raise ValueError("alignment length differs from the number of frames")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise IndexError("alignment label id out of range")
    logp = log_softmax(logits)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))
