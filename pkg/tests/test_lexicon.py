import io

import pytest
from hypothesis import given, strategies as st

from topoalign.errors import LexiconError, OutOfVocabularyError
from topoalign.lexicon import (
    Lexicon, Phoneme, Topology, build_inventory, load_lexicon, phonemize,
)


def lex_from(text):
    return load_lexicon(io.StringIO(text))


def test_single_line():
    lex = lex_from("cat k ae t\n")
    assert lex["cat"] == (Phoneme("k"), Phoneme("ae"), Phoneme("t", True))


def test_empty_stream():
    assert len(lex_from("")) == 0


def test_comments_and_blank_lines_are_skipped():
    lex = lex_from("# header\n\ncat k ae t\n  # indented comment\n")
    assert lex.words == ["cat"]


def test_duplicate_word_reports_line():
    with pytest.raises(LexiconError) as exc:
        lex_from("cat k ae t\ncat k a t\n")
    assert exc.value.line == 2
    assert "duplicate" in str(exc.value)


@pytest.mark.parametrize("text", ["cat\n", "c\x07t k ae t\n", "cat k@eow\n"])
def test_malformed_lines(text):
    with pytest.raises(LexiconError):
        lex_from(text)


def test_phonemize():
    lex = lex_from("cat k ae t\n")
    assert [str(p) for p in phonemize(["cat"], lex)] == ["k", "ae", "t@eow"]
    assert [str(p) for p in phonemize(["cat", "cat"], lex)] == ["k", "ae", "t@eow"] * 2


def test_phonemize_oov():
    with pytest.raises(OutOfVocabularyError) as exc:
        phonemize(["dog"], lex_from("cat k ae t\n"))
    assert exc.value.word == "dog"


def test_inventory_counts():
    lex = lex_from("cat k ae t\n")
    ctc = build_inventory(lex, Topology.CTC)
    assert ctc.names == ["ae", "k", "t@eow", "<blank>"]
    assert ctc.blank_id == 3 and ctc.silence_id is None
    hmm = build_inventory(lex, "phmm")
    assert hmm.names == ["ae", "k", "t@eow", "[SILENCE]"]
    assert hmm.silence_id == 3 and hmm.blank_id is None


def test_inventory_keeps_eow_variants_apart():
    inv = build_inventory(lex_from("at a t\nta t a\n"), "ctc")
    assert inv.names == ["a", "a@eow", "t", "t@eow", "<blank>"]
    assert inv.is_eow(1) and not inv.is_eow(0) and not inv.is_eow(inv.blank_id)


def test_empty_inventory_rejected():
    with pytest.raises(LexiconError):
        build_inventory(Lexicon({}), "ctc")


def test_case_sensitive_symbols():
    inv = build_inventory(lex_from("w A a\n"), "phmm")
    assert inv.names[:2] == ["A", "a@eow"]


words = st.text(alphabet="abcdefgh", min_size=1, max_size=4)
prons = st.lists(st.sampled_from(["p", "b", "t", "d", "k", "aa", "iy"]), min_size=1, max_size=4)


@given(st.dictionaries(words, prons, min_size=1, max_size=6), st.data())
def test_phonemize_properties(mapping, data):
    lex = Lexicon.from_dict(mapping)
    seq = data.draw(st.lists(st.sampled_from(sorted(mapping)), max_size=5))
    phones = phonemize(seq, lex)
    assert len(phones) == sum(len(mapping[w]) for w in seq)
    assert sum(p.eow for p in phones) == len(seq)
    a, b = build_inventory(lex, "ctc"), build_inventory(lex, "ctc")
    assert a.names == b.names
    assert all(a.index(p) == b.index(p) for p in phones)
