"""Alignment quality measures: word time stamp error, silence/blank share, phoneme duration.

Frame ``i`` covers ``[i * shift, (i + 1) * shift)`` and boundaries are
reported at frame start times, so a word occupying frames 1..3 at 40 ms
spans (40 ms, 120 ms).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .lexicon import LabelInventory


@dataclass(frozen=True, eq=False)
class FrameAlignment:
    utt_id: str
    labels: np.ndarray
    frame_shift_ms: float
    inventory: LabelInventory | None = None
    words: tuple = ()
    states: np.ndarray | None = None  # optional, splits runs of a repeated label

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) < 1:
            raise ValueError("alignment needs at least one frame")
        if self.inventory is not None and (labels.min() < 0 or labels.max() >= len(self.inventory)):
            raise ValueError("alignment label outside the inventory")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "words", tuple(self.words))
        if self.states is not None:
            object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))

    @property
    def num_frames(self) -> int:
        return len(self.labels)

    def segments(self):
        """Runs of identical labels as ``(label, first_frame, last_frame)``."""
        out = []
        start = 0
        lab = self.labels
        for t in range(1, len(lab) + 1):
            boundary = t == len(lab) or lab[t] != lab[t - 1]
            if not boundary and self.states is not None:
                boundary = self.states[t] != self.states[t - 1]
            if boundary:
                out.append((int(lab[start]), start, t - 1))
                start = t
        return out


@dataclass(frozen=True)
class WordBoundary:
    word: str
    start_ms: float
    end_ms: float


@dataclass
class TseReport:
    tse_ms: float
    n_words: int
    per_utterance: dict = field(default_factory=dict)
    silence_or_blank_pct: float = 0.0
    avg_phoneme_ms: float = 0.0


def word_boundaries(a: FrameAlignment, ctc_word_end: str = "peak") -> list:
    """Word start/end times from the EOW structure of an alignment.

    ``ctc_word_end="peak"`` ends a word at the last frame of its EOW label;
    ``"pre-next"`` extends it over the following blanks up to the frame before
    the next word's first label (the last word still ends at its peak).
    """
    if a.inventory is None:
        raise ValueError("word boundaries need the label inventory")
    if ctc_word_end not in ("peak", "pre-next"):
        raise ValueError(f"unknown CTC word-end convention {ctc_word_end!r}")
    inv = a.inventory
    spans = []
    start = None
    for lab, first, last in a.segments():
        if inv.is_special(lab):
            continue
        if start is None:
            start = first
        if inv.is_eow(lab):
            spans.append([start, last])
            start = None
    if start is not None:
        raise ValueError("alignment ends inside a word")
    if len(spans) != len(a.words):
        raise ValueError(f"{len(spans)} word ends in the alignment but {len(a.words)} words given")
    if ctc_word_end == "pre-next" and inv.blank_id is not None:
        for k in range(len(spans) - 1):
            spans[k][1] = spans[k + 1][0] - 1
    shift = a.frame_shift_ms
    return [WordBoundary(w, s * shift, e * shift) for w, (s, e) in zip(a.words, spans)]


def tse(hyp: Sequence[WordBoundary], ref: Sequence[WordBoundary]) -> float:
    """Mean absolute distance over all word start and end times, in ms."""
    _check_same_words(hyp, ref)
    if not hyp:
        return 0.0
    total = sum(abs(h.start_ms - r.start_ms) + abs(h.end_ms - r.end_ms) for h, r in zip(hyp, ref))
    return total / (2 * len(hyp))


def _check_same_words(hyp, ref):
    if [b.word for b in hyp] != [b.word for b in ref]:
        raise ValueError("hypothesis and reference word sequences differ")


def frame_stats(a: FrameAlignment):
    """(silence or blank percentage, mean phoneme run duration in ms)."""
    inv = a.inventory
    special = inv.special_id if inv is not None else None
    n_special = int(np.sum(a.labels == special)) if special is not None else 0
    pct = 100.0 * n_special / a.num_frames
    runs = [last - first + 1 for lab, first, last in a.segments() if lab != special]
    avg = float(np.mean(runs)) * a.frame_shift_ms if runs else 0.0
    return pct, avg


def corpus_report(pairs: Iterable[tuple], ctc_word_end: str = "peak") -> TseReport:
    """Pool boundary errors over ``(hyp_alignment, ref_alignment)`` pairs.

    Silence/blank share and phoneme duration describe the hypotheses.
    """
    total = 0.0
    n_words = 0
    per_utt = {}
    n_frames = n_special = 0
    run_frames = n_runs = 0
    shift = None
    for hyp, ref in pairs:
        hb = word_boundaries(hyp, ctc_word_end)
        rb = word_boundaries(ref, ctc_word_end)
        _check_same_words(hb, rb)
        err = sum(abs(h.start_ms - r.start_ms) + abs(h.end_ms - r.end_ms) for h, r in zip(hb, rb))
        per_utt[hyp.utt_id] = err / (2 * len(hb)) if hb else 0.0
        total += err
        n_words += len(hb)
        special = hyp.inventory.special_id
        n_frames += hyp.num_frames
        n_special += int(np.sum(hyp.labels == special))
        runs = [last - first + 1 for lab, first, last in hyp.segments() if lab != special]
        run_frames += sum(runs)
        n_runs += len(runs)
        shift = hyp.frame_shift_ms
    if n_frames == 0:
        raise ValueError("empty corpus")
    return TseReport(
        tse_ms=total / (2 * n_words) if n_words else 0.0,
        n_words=n_words,
        per_utterance=per_utt,
        silence_or_blank_pct=100.0 * n_special / n_frames,
        avg_phoneme_ms=(run_frames / n_runs) * shift if n_runs else 0.0,
    )
