"""Shared dataset containers and TSV pair files.

Every task exchanges data as (input, output) token-sequence pairs, one
pair per line, input and output separated by a single tab. Expanded
iterative datasets reuse the same format with one intermediate pair per
line.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .vocab import EOI, detokenize, tokenize

Pair = tuple[list[str], list[str]]


class DataError(ValueError):
    pass


@dataclass
class IterExample:
    """Ordered intermediate steps of one expanded example.

    The last step's output carries the end-of-iteration token; earlier
    outputs never do.
    """

    steps: list[Pair]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def inputs(self) -> list[list[str]]:
        return [s[0] for s in self.steps]

    @property
    def outputs(self) -> list[list[str]]:
        return [s[1] for s in self.steps]

    def validate(self) -> None:
        if not self.steps:
            raise DataError("iterative example with no steps")
        for i, (_, out) in enumerate(self.steps):
            last = i == len(self.steps) - 1
            if last and (not out or out[-1] != EOI):
                raise DataError("final intermediate output must end with the EOI token")
            if not last and EOI in out:
                raise DataError("EOI token before the final step")


def load_pairs(path) -> list[Pair]:
    """Read input<TAB>output pairs, whitespace-tokenized, in file order."""
    pairs: list[Pair] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: missing tab separator")
            left, _, right = line.partition("\t")
            pairs.append((tokenize(left), tokenize(right)))
    return pairs


def save_pairs(path, pairs: Iterable[Sequence[Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inp, out in pairs:
            fh.write(detokenize(inp) + "\t" + detokenize(out) + "\n")


def flatten_examples(examples: Iterable[IterExample]) -> list[Pair]:
    """All intermediate pairs of all examples, in order."""
    flat: list[Pair] = []
    for ex in examples:
        flat.extend(ex.steps)
    return flat
