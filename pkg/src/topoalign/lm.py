"""Back-off n-gram language model read from ARPA text files.

Probabilities are stored as natural logs; the file's log10 values are
converted once at load time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .errors import ArpaError

LN10 = math.log(10.0)
BOS, EOS, UNK = "<s>", "</s>", "<unk>"
DEFAULT_OOV_LOGPROB = -20.0

_NGRAM_COUNT = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION = re.compile(r"^\\(\d+)-grams:$")


@dataclass(frozen=True)
class LmState:
    history: tuple = ()


@dataclass
class NGramLm:
    order: int
    # tables[n-1][(w1, ..., wn)] = (ln prob, ln backoff)
    tables: list = field(default_factory=list)
    oov_logprob: float = DEFAULT_OOV_LOGPROB

    @property
    def vocabulary(self) -> set:
        return {ng[0] for ng in self.tables[0]} if self.tables else set()

    def start_state(self) -> LmState:
        return LmState((BOS,) if self.order > 1 else ())

    def _prob(self, ngram):
        entry = self.tables[len(ngram) - 1].get(ngram)
        return None if entry is None else entry[0]

    def _backoff(self, ngram):
        if not ngram or len(ngram) > len(self.tables):
            return 0.0
        entry = self.tables[len(ngram) - 1].get(ngram)
        return 0.0 if entry is None else entry[1]

    def score_word(self, state: LmState, word: str):
        """Natural-log P(word | history) with Katz back-off, and the successor state."""
        if (word,) not in self.tables[0]:
            if (UNK,) in self.tables[0]:
                word = UNK
            else:
                return self.oov_logprob, self._next_state(state, word)
        hist = state.history[-(self.order - 1):] if self.order > 1 else ()
        penalty = 0.0
        while True:
            p = self._prob(hist + (word,))
            if p is not None:
                return penalty + p, self._next_state(state, word)
            penalty += self._backoff(hist)
            hist = hist[1:]

    def _next_state(self, state: LmState, word: str) -> LmState:
        if self.order <= 1:
            return LmState(())
        return LmState((state.history + (word,))[-(self.order - 1):])

    def sentence_logprob(self, words: Iterable[str], with_eos: bool = True) -> float:
        state = self.start_state()
        total = 0.0
        for w in words:
            lp, state = self.score_word(state, w)
            total += lp
        if with_eos:
            total += self.score_word(state, EOS)[0]
        return total

    @classmethod
    def uniform(cls, words: Iterable[str]) -> "NGramLm":
        """Unigram model with equal mass on every word and the end-of-sentence token."""
        vocab = sorted(set(words)) + [EOS]
        lp = -math.log(len(vocab))
        table = {(w,): (lp, 0.0) for w in vocab}
        table[(BOS,)] = (-99.0 * LN10, 0.0)
        return cls(1, [table])

    def to_arpa(self) -> str:
        lines = ["", "\\data\\"]
        for n, tab in enumerate(self.tables, 1):
            lines.append(f"ngram {n}={len(tab)}")
        for n, tab in enumerate(self.tables, 1):
            lines += ["", f"\\{n}-grams:"]
            for ngram, (lp, bo) in tab.items():
                row = f"{lp / LN10:.7g}\t{' '.join(ngram)}"
                if n < self.order:
                    row += f"\t{bo / LN10:.7g}"
                lines.append(row)
        lines += ["", "\\end\\", ""]
        return "\n".join(lines)


def load_arpa(source: TextIO | Iterable[str]) -> NGramLm:
    counts = {}
    tables = []
    section = None  # "data", or n for an n-gram section
    ended = False
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise ArpaError("content after \\end\\", lineno)
        if line == "\\data\\":
            section = "data"
            continue
        if line == "\\end\\":
            ended = True
            continue
        m = _SECTION.match(line)
        if m:
            n = int(m.group(1))
            if n != len(tables) + 1 or n not in counts:
                raise ArpaError(f"unexpected section {line}", lineno)
            tables.append({})
            section = n
            continue
        if section is None:
            continue  # free text before \data\ is allowed
        if section == "data":
            m = _NGRAM_COUNT.match(line.replace(" =", "="))
            if not m:
                raise ArpaError(f"malformed count line {line!r}", lineno)
            counts[int(m.group(1))] = int(m.group(2))
            continue
        fields = line.split()
        n = section
        if len(fields) not in (n + 1, n + 2):
            raise ArpaError(f"expected {n}-gram entry, got {line!r}", lineno)
        try:
            lp = float(fields[0])
            bo = float(fields[n + 1]) if len(fields) == n + 2 else 0.0
        except ValueError:
            raise ArpaError(f"bad number in {line!r}", lineno) from None
        if lp > 0:
            raise ArpaError(f"positive log-probability in {line!r}", lineno)
        ngram = tuple(fields[1:n + 1])
        if n > 1 and ngram[:-1] not in tables[n - 2]:
            raise ArpaError(f"history of {' '.join(ngram)} is missing", lineno)
        tables[-1][ngram] = (lp * LN10, bo * LN10)
    if not ended:
        raise ArpaError("missing \\end\\ marker")
    if not counts or len(tables) != max(counts):
        raise ArpaError("n-gram sections do not match the \\data\\ header")
    for n, tab in enumerate(tables, 1):
        if counts[n] != len(tab):
            raise ArpaError(f"\\data\\ declares {counts[n]} {n}-grams, found {len(tab)}")
    return NGramLm(len(tables), tables)


def score_word(lm: NGramLm, state: LmState, word: str):
    return lm.score_word(state, word)
