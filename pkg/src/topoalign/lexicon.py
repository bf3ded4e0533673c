"""Label inventory and word-to-phoneme lexicon.

Phonemes carry an end-of-word flag, so ``t`` and ``t@eow`` are distinct
labels. CTC and transducer inventories get one extra blank label; HMM
inventories get an explicit silence label instead.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from .errors import LexiconError, OutOfVocabularyError

BLANK_SYMBOL = "<blank>"
SILENCE_SYMBOL = "[SILENCE]"
EOW_SUFFIX = "@eow"


class Topology(str, enum.Enum):
    CTC = "ctc"
    PHMM = "phmm"
    MRNNT = "mrnnt"
    FH = "fh"

    @property
    def uses_blank(self) -> bool:
        return self in (Topology.CTC, Topology.MRNNT)

    @classmethod
    def parse(cls, value) -> "Topology":
        if isinstance(value, Topology):
            return value
        try:
            return cls(str(value).lower().replace("-", ""))
        except ValueError:
            raise ValueError(f"unknown topology {value!r}") from None


@dataclass(frozen=True, order=True)
class Phoneme:
    symbol: str
    eow: bool = False

    def __post_init__(self):
        if not self.symbol or any(c.isspace() for c in self.symbol):
            raise LexiconError(f"invalid phoneme symbol {self.symbol!r}")

    def __str__(self):
        return self.symbol + (EOW_SUFFIX if self.eow else "")

    @classmethod
    def parse(cls, token: str) -> "Phoneme":
        if token.endswith(EOW_SUFFIX) and len(token) > len(EOW_SUFFIX):
            return cls(token[: -len(EOW_SUFFIX)], True)
        return cls(token, False)


@dataclass(frozen=True)
class Lexicon:
    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word):
        return word in self.entries

    def __getitem__(self, word) -> tuple:
        return self.entries[word]

    @property
    def words(self) -> list:
        return list(self.entries)

    @classmethod
    def from_dict(cls, mapping) -> "Lexicon":
        """Build from ``word -> [symbol, ...]``; the last symbol gets the EOW flag."""
        lines = [f"{w} {' '.join(p)}" for w, p in mapping.items()]
        return load_lexicon(io.StringIO("\n".join(lines)))

    def phonemes(self) -> set:
        return {p for pron in self.entries.values() for p in pron}


def _check_token(token: str, lineno: int):
    for c in token:
        if not c.isprintable() or c.isspace():
            raise LexiconError(f"unknown character class in {token!r}", lineno)
    if EOW_SUFFIX in token:
        raise LexiconError(f"reserved suffix {EOW_SUFFIX!r} in {token!r}", lineno)


def load_lexicon(source: TextIO | Iterable[str]) -> Lexicon:
    """Parse ``<word> <phoneme> <phoneme> ...`` lines; ``#`` starts a comment line."""
    entries = {}
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 2:
            raise LexiconError("entry needs a word and at least one phoneme", lineno)
        word, symbols = fields[0], fields[1:]
        for tok in fields:
            _check_token(tok, lineno)
        if word in entries:
            raise LexiconError(f"duplicate word {word!r}", lineno)
        pron = tuple(Phoneme(s, i == len(symbols) - 1) for i, s in enumerate(symbols))
        entries[word] = pron
    return Lexicon(entries)


def phonemize(words: Sequence[str], lex: Lexicon) -> list:
    out = []
    for w in words:
        if w not in lex.entries:
            raise OutOfVocabularyError(w)
        out.extend(lex.entries[w])
    return out


@dataclass(frozen=True)
class LabelInventory:
    """Dense label ids: sorted phoneme variants first, the special label last."""

    phonemes: tuple
    topology: Topology
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.phonemes)) != len(self.phonemes):
            raise LexiconError("duplicate (symbol, eow) pair in inventory")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.phonemes)})

    @property
    def num_labels(self) -> int:
        return len(self.phonemes) + 1

    def __len__(self):
        return self.num_labels

    @property
    def special_id(self) -> int:
        return len(self.phonemes)

    @property
    def blank_id(self):
        return self.special_id if self.topology.uses_blank else None

    @property
    def silence_id(self):
        return None if self.topology.uses_blank else self.special_id

    def index(self, phoneme: Phoneme) -> int:
        try:
            return self._index[phoneme]
        except KeyError:
            raise LexiconError(f"phoneme {phoneme} not in inventory") from None

    def ids(self, phonemes: Iterable[Phoneme]) -> list:
        return [self.index(p) for p in phonemes]

    def is_special(self, label_id: int) -> bool:
        return label_id == self.special_id

    def is_eow(self, label_id: int) -> bool:
        return label_id < self.special_id and self.phonemes[label_id].eow

    def name(self, label_id: int) -> str:
        if label_id == self.special_id:
            return BLANK_SYMBOL if self.topology.uses_blank else SILENCE_SYMBOL
        return str(self.phonemes[label_id])

    @property
    def names(self) -> list:
        return [self.name(i) for i in range(self.num_labels)]

    def with_topology(self, topology) -> "LabelInventory":
        """Same phoneme ids, special label swapped between blank and silence."""
        return LabelInventory(self.phonemes, Topology.parse(topology))


def build_inventory(lex: Lexicon, topology) -> LabelInventory:
    if len(lex) == 0:
        raise LexiconError("cannot build an inventory from an empty lexicon")
    phonemes = tuple(sorted(lex.phonemes(), key=lambda p: (p.symbol, p.eow)))
    return LabelInventory(phonemes, Topology.parse(topology))
