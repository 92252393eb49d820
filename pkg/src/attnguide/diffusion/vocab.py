"""Toy vocabulary and fixed-length prompts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError, UsageError

PROMPT_LEN = 8
VOCAB_SIZE = 16

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")

PAD = 0
WORDS = ("<pad>", "and") + COLORS + SHAPES
WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
ID_TO_WORD = dict(enumerate(WORDS))


def is_shape(token_id: int) -> bool:
    return ID_TO_WORD.get(int(token_id)) in SHAPES


def is_color(token_id: int) -> bool:
    return ID_TO_WORD.get(int(token_id)) in COLORS


@dataclass(frozen=True)
class PromptSpec:
    token_ids: tuple
    subject_positions: tuple = ()
    # subject position -> color position; evaluation only
    attribute_bindings: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        if len(ids) != PROMPT_LEN:
            raise ParameterError(f"prompt must have {PROMPT_LEN} token ids, got {len(ids)}")
        if any(i < 0 or i >= VOCAB_SIZE for i in ids):
            raise ParameterError(f"token ids must lie in [0, {VOCAB_SIZE}), got {ids}")
        subjects = tuple(sorted(int(p) for p in self.subject_positions))
        if any(not 0 <= p < PROMPT_LEN for p in subjects):
            raise ParameterError(f"subject positions out of range: {subjects}")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "subject_positions", subjects)
        object.__setattr__(self, "attribute_bindings",
                           {int(k): int(v) for k, v in dict(self.attribute_bindings).items()})

    @property
    def ids(self) -> np.ndarray:
        return np.array(self.token_ids, dtype=np.int64)

    @property
    def words(self) -> list[str]:
        return [ID_TO_WORD.get(i, f"<{i}>") for i in self.token_ids]

    def text(self) -> str:
        return " ".join(w for w in self.words if w != "<pad>")

    def subject_word(self, pos: int) -> str:
        return ID_TO_WORD[self.token_ids[pos]]

    def bound_color(self, pos: int) -> str | None:
        cpos = self.attribute_bindings.get(pos)
        return None if cpos is None else ID_TO_WORD[self.token_ids[cpos]]

    def to_dict(self) -> dict:
        return {
            "token_ids": list(self.token_ids),
            "subject_positions": list(self.subject_positions),
            "attribute_bindings": {str(k): v for k, v in self.attribute_bindings.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        return cls(tuple(d["token_ids"]), tuple(d.get("subject_positions", ())),
                   {int(k): v for k, v in d.get("attribute_bindings", {}).items()})


def parse_prompt(text: str, subjects=None) -> PromptSpec:
    """Turn space-separated vocabulary words into a padded prompt.

    Subjects default to every shape word; each shape is bound to a directly
    preceding color word, if any.
    """
    words = text.split()
    unknown = [w for w in words if w not in WORD_TO_ID or w == "<pad>"]
    if unknown:
        raise UsageError(f"unknown token(s) {unknown}; vocabulary: {', '.join(WORDS[1:])}")
    if len(words) > PROMPT_LEN:
        raise UsageError(f"prompt has {len(words)} words, at most {PROMPT_LEN} fit")
    ids = [WORD_TO_ID[w] for w in words] + [PAD] * (PROMPT_LEN - len(words))
    if subjects is None:
        subjects = [i for i, w in enumerate(words) if w in SHAPES]
    bindings = {i: i - 1 for i, w in enumerate(words) if w in SHAPES and i > 0 and words[i - 1] in COLORS}
    return PromptSpec(tuple(ids), tuple(subjects), bindings)
