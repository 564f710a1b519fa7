"""Token and vocabulary model shared by all tasks and the model.

Tokens are plain whitespace-free strings; sequences are lists of tokens.
Seven special tokens occupy the lowest ids in a fixed order so that ids
are stable across runs and platforms.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence

PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
SEP = "[SEP]"
SEP2 = "[SEP2]"
EOI = "[END]"
UNK = "[UNK]"

SPECIAL_TOKENS: tuple[str, ...] = (PAD, BOS, EOS, SEP, SEP2, EOI, UNK)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
SEP2_ID = 4
EOI_ID = 5
UNK_ID = 6


class VocabularyError(ValueError):
    pass


def check_token(token: str) -> str:
    """Validate a single token: non-empty, no internal whitespace."""
    if not token:
        raise VocabularyError("empty token")
    if any(c.isspace() for c in token):
        raise VocabularyError(f"token contains whitespace: {token!r}")
    return token


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization, the only tokenization used anywhere."""
    return text.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Immutable token <-> id bijection with a fixed special-token prefix.

    Construction is single-threaded; afterwards the instance is read-only
    and safe to share between threads.
    """

    def __init__(self, tokens: Iterable[str]):
        ordered: list[str] = list(SPECIAL_TOKENS)
        seen = set(ordered)
        for tok in tokens:
            check_token(tok)
            if tok in seen:
                continue
            seen.add(tok)
            ordered.append(tok)
        self._token_of: tuple[str, ...] = tuple(ordered)
        self._id_of: dict[str, int] = {t: i for i, t in enumerate(ordered)}

    @classmethod
    def from_corpus(cls, corpus: Iterable[Sequence[str]]) -> "Vocabulary":
        """Build from a stream of token sequences, first-occurrence order."""
        def stream() -> Iterator[str]:
            empty = True
            for seq in corpus:
                empty = False
                yield from seq
            if empty:
                raise VocabularyError("empty corpus")

        return cls(stream())

    def __len__(self) -> int:
        return len(self._token_of)

    @property
    def size(self) -> int:
        return len(self._token_of)

    def __contains__(self, token: str) -> bool:
        return token in self._id_of

    def id_of(self, token: str) -> int:
        try:
            return self._id_of[token]
        except KeyError:
            raise VocabularyError(f"unregistered token: {token!r}") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._token_of):
            raise VocabularyError(f"bad token id: {idx}")
        return self._token_of[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        """Map tokens to ids; unknown tokens fall back to UNK."""
        get = self._id_of.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Inverse of encode on in-vocabulary sequences."""
        return [self.token_of(i) for i in ids]

    def tokens(self) -> tuple[str, ...]:
        return self._token_of

    def save(self, path) -> None:
        """One token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._token_of:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary file {path} lacks the special-token prefix")
        vocab = cls(lines[len(SPECIAL_TOKENS):])
        if vocab.tokens() != tuple(lines):
            raise VocabularyError(f"vocabulary file {path} has duplicate or misordered tokens")
        return vocab


def build_vocabulary(corpus: Iterable[Sequence[str]]) -> Vocabulary:
    return Vocabulary.from_corpus(corpus)
