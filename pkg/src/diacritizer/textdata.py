"""Corpus preparation: diacritic decomposition, vocabularies, windowing.

Diacritics are defined through Unicode canonical decomposition: a sentence
is NFD-normalized and every base character is paired with the contiguous
run of combining marks (nonzero canonical combining class) that follows
it.  The label of a character is that whole mark sequence, so compound
patterns (e.g. shadda plus a vowel) are single label classes.  Re-joining
bases with their labels and recomposing (NFC) reproduces the canonically
composed sentence byte for byte.

Characters whose decomposition does not split into base plus marks (e.g.
stroked letters) are treated as plain base characters.  Punctuation and
digits are kept as base characters with empty labels.  Words are whitespace
tokens; no further tokenization is applied.

Training examples are per-word windows: the center word plus up to
``window`` words of context on each side, joined with the ``<w>`` boundary
token, clipped (not padded) at sentence boundaries.
"""

from __future__ import annotations

import os
import unicodedata
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PAD",
    "UNK",
    "BOUNDARY",
    "PAD_ID",
    "UNK_ID",
    "BOUNDARY_ID",
    "NO_LABEL",
    "DiacritizedSentence",
    "Vocab",
    "CorpusFilterRules",
    "TrainingWindow",
    "decompose",
    "strip_diacritics",
    "recompose_words",
    "filter_corpus",
    "build_vocabs",
    "make_windows",
    "read_corpus",
    "atomic_write_text",
    "write_corpus",
    "write_lines",
    "read_lines",
]

PAD = "<pad>"
UNK = "<unk>"
BOUNDARY = "<w>"
PAD_ID = 0
UNK_ID = 1
BOUNDARY_ID = 2

NO_LABEL = ""  # label id 0: character carries no diacritic


@dataclass
class DiacritizedSentence:
    """Words as (base_char, label) pairs; label is the combining-mark run."""

    words: list[list[tuple[str, str]]]

    def n_words(self) -> int:
        return len(self.words)

    def n_chars(self) -> int:
        return sum(len(w) for w in self.words)

    def word_lengths(self) -> list[int]:
        return [len(w) for w in self.words]

    def has_diacritic(self) -> bool:
        return any(label for word in self.words for _, label in word)

    def labels(self) -> list[str]:
        return [label for word in self.words for _, label in word]

    def bases(self) -> list[str]:
        return [base for word in self.words for base, _ in word]

    def undiacritized_words(self) -> list[str]:
        return [
            unicodedata.normalize("NFC", "".join(base for base, _ in word))
            for word in self.words
        ]

    def to_text(self) -> str:
        return recompose_words(self.words)


def decompose(text: str) -> DiacritizedSentence:
    """Split whitespace-separated words into (base, marks) character pairs."""
    words = []
    for token in text.split():
        chars: list[tuple[str, str]] = []
        for ch in unicodedata.normalize("NFD", token):
            if unicodedata.combining(ch) and chars:
                base, label = chars[-1]
                chars[-1] = (base, label + ch)
            else:
                # Plain base character; a mark with nothing to attach to
                # (malformed input) is kept as its own base.
                chars.append((ch, NO_LABEL))
        words.append(chars)
    return DiacritizedSentence(words)


def recompose_words(words: list[list[tuple[str, str]]]) -> str:
    """Inverse of ``decompose``: canonically composed, single-spaced text."""
    return " ".join(
        unicodedata.normalize("NFC", "".join(base + label for base, label in word))
        for word in words
    )


def strip_diacritics(text: str) -> str:
    """Drop every combining mark; idempotent."""
    sent = decompose(text)
    return " ".join(
        unicodedata.normalize("NFC", "".join(base for base, _ in word))
        for word in sent.words
    )


@dataclass
class CorpusFilterRules:
    """Sentence admission rules for training corpora."""

    max_word_chars: int = 10
    require_diacritic: bool = True
    max_sentence_words: int = 70


def filter_corpus(
    sentences: list[DiacritizedSentence], rules: CorpusFilterRules
) -> tuple[list[DiacritizedSentence], dict[str, int]]:
    """Keep sentences passing all rules; count rejections by first reason.

    A sentence is kept iff every word has at most ``max_word_chars`` base
    characters, at least one non-empty label exists (when required), and
    the word count is at most ``max_sentence_words``.
    """
    kept = []
    counts = {"word_length": 0, "no_diacritic": 0, "sentence_length": 0}
    for sent in sentences:
        if any(len(word) > rules.max_word_chars for word in sent.words):
            counts["word_length"] += 1
        elif rules.require_diacritic and not sent.has_diacritic():
            counts["no_diacritic"] += 1
        elif sent.n_words() > rules.max_sentence_words:
            counts["sentence_length"] += 1
        else:
            kept.append(sent)
    return kept, counts


class Vocab:
    """Bidirectional string <-> dense id map with stable ordering."""

    def __init__(self, entries: list[str]):
        self.entries = list(entries)
        self._ids = {entry: i for i, entry in enumerate(self.entries)}
        if len(self._ids) != len(self.entries):
            raise ValueError("vocabulary entries must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry: str) -> bool:
        return entry in self._ids

    def id(self, entry: str) -> int:
        return self._ids[entry]

    def get(self, entry: str, default: int | None = None) -> int | None:
        return self._ids.get(entry, default)

    def token(self, i: int) -> str:
        return self.entries[i]


def build_vocabs(
    sentences: list[DiacritizedSentence],
) -> tuple[Vocab, Vocab, set[str]]:
    """Character and label vocabularies plus the undiacritized forms seen.

    Character ids start with the reserved <pad>=0, <unk>=1, <w>=2 entries;
    label id 0 is the empty label.  Remaining ids follow first appearance
    in the corpus, so two builds of the same corpus agree exactly.  The
    returned set of undiacritized word forms feeds the OOV metric.
    """
    if not sentences:
        raise ValueError("cannot build vocabularies from an empty corpus")
    chars: dict[str, None] = {}
    labels: dict[str, None] = {}
    seen_words: set[str] = set()
    for sent in sentences:
        for word in sent.words:
            for base, label in word:
                chars.setdefault(base, None)
                if label:
                    labels.setdefault(label, None)
        seen_words.update(sent.undiacritized_words())
    char_vocab = Vocab([PAD, UNK, BOUNDARY, *chars.keys()])
    label_vocab = Vocab([NO_LABEL, *labels.keys()])
    return char_vocab, label_vocab, seen_words


@dataclass
class TrainingWindow:
    """Character ids for a center word with clipped context.

    ``center_mask`` is true exactly on the center word's characters;
    ``label_ids`` hold gold labels per position (-1 where the gold label is
    absent from the label vocabulary; such positions can be scored but not
    trained).
    """

    char_ids: np.ndarray
    center_mask: np.ndarray
    label_ids: np.ndarray

    def __post_init__(self):
        if not (len(self.char_ids) == len(self.center_mask) == len(self.label_ids)):
            raise ValueError("window arrays must have equal length")
        if not self.center_mask.any():
            raise ValueError("window has no center positions")


def make_windows(
    sentence: DiacritizedSentence,
    char_vocab: Vocab,
    label_vocab: Vocab,
    window: int = 10,
) -> list[TrainingWindow]:
    """One window per word: the word plus up to ``window`` words each side.

    Words are joined by a single ``<w>`` id; context is clipped at sentence
    boundaries.  Padding ids never appear here (only batching pads).
    """
    if not sentence.words:
        raise ValueError("cannot window an empty sentence")
    n = sentence.n_words()
    out = []
    for center in range(n):
        lo, hi = max(0, center - window), min(n, center + window + 1)
        ids: list[int] = []
        mask: list[bool] = []
        labels: list[int] = []
        for wi in range(lo, hi):
            if wi > lo:
                ids.append(BOUNDARY_ID)
                mask.append(False)
                labels.append(0)
            is_center = wi == center
            for base, label in sentence.words[wi]:
                ids.append(char_vocab.get(base, UNK_ID))
                mask.append(is_center)
                lid = label_vocab.get(label)
                labels.append(-1 if lid is None else lid)
        out.append(
            TrainingWindow(
                char_ids=np.asarray(ids, dtype=np.int64),
                center_mask=np.asarray(mask, dtype=bool),
                label_ids=np.asarray(labels, dtype=np.int64),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Corpus and listing files
# ---------------------------------------------------------------------------


def read_corpus(path: str) -> list[DiacritizedSentence]:
    """One sentence per line, UTF-8, words separated by whitespace.

    Blank lines are skipped.  Text is canonically recomposed on read, so
    round trips compare against the NFC form.
    """
    sentences = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sentences.append(decompose(line))
    return sentences


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file and rename, so failures leave no partial file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_corpus(sentences: list[DiacritizedSentence], path: str) -> None:
    atomic_write_text(path, "".join(s.to_text() + "\n" for s in sentences))


def write_lines(entries, path: str) -> None:
    atomic_write_text(path, "".join(f"{e}\n" for e in entries))


def read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]
