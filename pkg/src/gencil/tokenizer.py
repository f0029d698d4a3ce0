"""Word-level vocabulary and the caption template.

Specials occupy the first four ids in fixed order (bos, eos, pad, img);
all words are lowercase and the id assignment is deterministic: specials
first, then the sorted word set.  The pad id exists for format completeness
and is never produced by `decode`.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Sequence

BOS_ID, EOS_ID, PAD_ID, IMG_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<img>")
TEMPLATE_WORDS = ("this", "is", "a", "photo", "of")
TEMPLATE_PREFIX = "this is a photo of"
QUESTION_TEXT = "what is this"

_PUNCT_TO_SPACE = str.maketrans({c: " " for c in string.punctuation})


class OutOfVocabularyError(ValueError):
    """encode() hit a word the vocab does not contain."""

    def __init__(self, word: str):
        self.word = word
        super().__init__(f"word not in vocabulary: {word!r}")


class DuplicateClassNameError(ValueError):
    """Two class names collide after normalization."""


def normalize(text: str) -> str:
    """Lowercase, punctuation to spaces, whitespace collapsed."""
    return " ".join(text.lower().translate(_PUNCT_TO_SPACE).split())


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus (optionally) the answer-span positions used by the loss."""

    ids: tuple[int, ...]
    answer_span: tuple[int, int] | None = None  # (start, length)

    def __post_init__(self):
        if self.answer_span is not None:
            start, length = self.answer_span
            if start < 0 or length < 0 or start + length > len(self.ids):
                raise ValueError(f"answer span {self.answer_span} out of bounds for {len(self.ids)} ids")

    def __len__(self) -> int:
        return len(self.ids)


class Vocab:
    """Immutable word table; id 0..3 are the specials, the rest sorted words."""

    def __init__(self, words: Sequence[str]):
        words = tuple(words)
        if words[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four special tokens")
        body = words[len(SPECIAL_TOKENS):]
        if any(w != w.lower() or not w or " " in w for w in body):
            raise ValueError("vocab words must be lowercase single tokens")
        if len(set(words)) != len(words):
            raise ValueError("vocab contains duplicate words")
        self.words = words
        self._index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    def word_to_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise OutOfVocabularyError(word) from None

    def id_to_word(self, idx: int) -> str:
        if not 0 <= idx < len(self.words):
            raise ValueError(f"token id {idx} out of range")
        return self.words[idx]

    def to_lines(self) -> list[str]:
        """One word per line, specials first; line number == token id."""
        return list(self.words)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocab":
        return cls([ln.rstrip("\n") for ln in lines if ln.strip()])


def build_vocab(class_names: Sequence[str], extra_words: Sequence[str] = ()) -> Vocab:
    """Vocabulary over all class-name words, the template words, and extras.

    Class names are normalized first; names that collide after normalization
    (e.g. "dog" vs "Dog") are rejected.
    """
    seen: dict[str, str] = {}
    for raw in class_names:
        norm = normalize(raw)
        if not norm:
            raise ValueError(f"class name normalizes to empty: {raw!r}")
        if norm in seen:
            raise DuplicateClassNameError(
                f"duplicate class name after normalization: {raw!r} vs {seen[norm]!r}")
        seen[norm] = raw
    words: set[str] = set(TEMPLATE_WORDS)
    for norm in seen:
        words.update(norm.split())
    for extra in extra_words:
        words.update(normalize(extra).split())
    return Vocab(SPECIAL_TOKENS + tuple(sorted(words)))


def encode(text: str, vocab: Vocab) -> TokenSequence:
    """Normalize then map words to ids; unknown words raise naming the word."""
    return TokenSequence(tuple(vocab.word_to_id(w) for w in normalize(text).split()))


def decode(ids: Sequence[int] | TokenSequence, vocab: Vocab) -> str:
    """Ids back to space-joined words; special ids are dropped, never emitted."""
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    words = [vocab.id_to_word(i) for i in ids]
    return " ".join(w for w in words if not (w.startswith("<") and w.endswith(">")))


def render_template(class_name: str) -> str:
    return f"{TEMPLATE_PREFIX} {normalize(class_name)}"


def extract_class(text: str) -> str:
    """Strip the template prefix if present; otherwise pass the text through."""
    text = normalize(text)
    if text == TEMPLATE_PREFIX:
        return ""
    if text.startswith(TEMPLATE_PREFIX + " "):
        return text[len(TEMPLATE_PREFIX) + 1:]
    return text
