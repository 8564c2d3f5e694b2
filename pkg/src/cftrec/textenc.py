"""Closed-vocabulary, whitespace-split word tokenizer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from cftrec.errors import EncodingError

PAD, BOS, EOS, NONE, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "None", ",")


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise EncodingError("vocabulary must start with the reserved tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise EncodingError("duplicate token in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, word: str) -> bool:
        return word in self.token_to_id

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(list(self.id_to_token), indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(tuple(json.loads(Path(path).read_text(encoding="utf-8"))))


def build_vocab(template: str, names: Iterable[str]) -> Vocab:
    """Reserved tokens, then template words, then item-name words, in first-occurrence order.

    ``names`` may be a :class:`~cftrec.corpus.Catalog` (anything iterable over
    item names works).
    """
    if hasattr(names, "items"):
        names = [item.name for item in names.items]
    seen: dict[str, None] = dict.fromkeys(RESERVED_TOKENS)
    for word in template.split():
        seen.setdefault(word)
    for name in names:
        for word in name.split():
            seen.setdefault(word)
    return Vocab(tuple(seen))


def encode(v: Vocab, s: str) -> list[int]:
    ids = []
    for word in s.split():
        try:
            ids.append(v.token_to_id[word])
        except KeyError:
            raise EncodingError(f"unknown word {word!r}") from None
    return ids


def decode(v: Vocab, ids: Sequence[int]) -> str:
    n = len(v)
    words = []
    for i in ids:
        if not 0 <= int(i) < n:
            raise EncodingError(f"token id {i} outside vocabulary of size {n}")
        words.append(v.id_to_token[int(i)])
    return " ".join(words)
