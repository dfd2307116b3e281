"""Closed-vocabulary word tokenizer and prompt representation.

The vocabulary is a fixed tuple of words; prompts are whitespace-split word
sequences.  A single placeholder word marks the personalized concept, and its
position is carried alongside the token ids so downstream code can read the
concept's cross-attention column without re-parsing the text.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import InvalidArgument

CONCEPT_WORD = "<concept>"
NULL_WORD = "<none>"

COLOR_WORDS = ("red", "green", "blue", "yellow", "magenta", "cyan", "gray")
SHAPE_WORDS = ("circle", "square", "triangle", "cross")
TEXTURE_WORDS = ("solid", "striped", "checkered")
FILLER_WORDS = ("a", "photo", "of", "on", "background")


def default_vocab() -> tuple[str, ...]:
    return (NULL_WORD, CONCEPT_WORD) + FILLER_WORDS + COLOR_WORDS + SHAPE_WORDS + TEXTURE_WORDS


@dataclass(frozen=True)
class Prompt:
    """Token id sequence with the optional position of the concept token."""

    token_ids: tuple[int, ...]
    concept_index: int | None = None

    def __post_init__(self):
        if self.concept_index is not None and not (0 <= self.concept_index < len(self.token_ids)):
            raise InvalidArgument("concept_index outside the token sequence")

    def __len__(self):
        return len(self.token_ids)


class Vocabulary:
    """Bidirectional word <-> id mapping over a closed word list."""

    def __init__(self, words: tuple[str, ...] | None = None):
        self.words = tuple(words) if words is not None else default_vocab()
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise InvalidArgument("vocabulary contains duplicate words")

    def __len__(self):
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise InvalidArgument(f"word {word!r} not in vocabulary") from None

    def word_of(self, token_id: int) -> str:
        if not (0 <= token_id < len(self.words)):
            raise InvalidArgument(f"token id {token_id} outside vocabulary")
        return self.words[token_id]

    def encode(self, text: str) -> Prompt:
        words = text.split()
        if not words:
            raise InvalidArgument("empty prompt")
        ids = tuple(self.id_of(w) for w in words)
        concept = None
        if CONCEPT_WORD in words:
            concept = words.index(CONCEPT_WORD)
        return Prompt(token_ids=ids, concept_index=concept)

    def decode(self, prompt: Prompt) -> str:
        return " ".join(self.word_of(i) for i in prompt.token_ids)

    def validate(self, prompt: Prompt):
        for i in prompt.token_ids:
            self.word_of(i)
        if prompt.concept_index is not None:
            if prompt.token_ids[prompt.concept_index] != self.id_of(CONCEPT_WORD):
                raise InvalidArgument("concept_index does not point at the concept token")
