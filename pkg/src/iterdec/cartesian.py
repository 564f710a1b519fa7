"""Cartesian-product task: instances, seq2seq serialization, expansions.

An instance is a vector of distinct digits and a vector of distinct
letters; the target is their row-major product. Iterative expansion
emits either one product row or one digit-letter pair per step, and the
intermediate inputs restate the original input followed by [SEP2] and
either the last output (short memory) or all outputs so far (long
memory).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .data import IterExample, Pair
from .vocab import EOI, SEP, SEP2

DIGITS: tuple[str, ...] = tuple("0123456789")
LETTERS: tuple[str, ...] = tuple("abcdefghij")


class CartesianError(ValueError):
    pass


@dataclass(frozen=True)
class CartesianInstance:
    numbers: tuple[str, ...]
    letters: tuple[str, ...]

    def __post_init__(self):
        for name, values, universe in (
            ("numbers", self.numbers, DIGITS),
            ("letters", self.letters, LETTERS),
        ):
            if not 1 <= len(values) <= 10:
                raise CartesianError(f"{name} must hold 1..10 elements, got {len(values)}")
            if len(set(values)) != len(values):
                raise CartesianError(f"{name} contains repeats: {values}")
            bad = [v for v in values if v not in universe]
            if bad:
                raise CartesianError(f"{name} outside alphabet: {bad}")


@dataclass(frozen=True)
class ExpansionMode:
    unit: str    # "row" or "token"
    memory: str  # "short" or "long"

    def __post_init__(self):
        if self.unit not in ("row", "token"):
            raise CartesianError(f"bad unit {self.unit!r}")
        if self.memory not in ("short", "long"):
            raise CartesianError(f"bad memory {self.memory!r}")


ROW_SHORT = ExpansionMode("row", "short")
ROW_LONG = ExpansionMode("row", "long")
TOKEN_SHORT = ExpansionMode("token", "short")
TOKEN_LONG = ExpansionMode("token", "long")
ALL_MODES = (ROW_SHORT, ROW_LONG, TOKEN_SHORT, TOKEN_LONG)


def generate(
    seed: int | random.Random,
    n_range: tuple[int, int],
    l_range: tuple[int, int],
) -> CartesianInstance:
    """Instance with sizes uniform in the given inclusive ranges and
    elements sampled without replacement; deterministic in the seed."""
    for lo, hi in (n_range, l_range):
        if not 1 <= lo <= hi <= 10:
            raise CartesianError(f"size range {(lo, hi)} outside 1..10")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    n = rng.randint(*n_range)
    l = rng.randint(*l_range)
    return CartesianInstance(tuple(rng.sample(DIGITS, n)), tuple(rng.sample(LETTERS, l)))


def product_tokens(inst: CartesianInstance) -> list[str]:
    """Row-major product, each digit and letter its own token."""
    out: list[str] = []
    for n in inst.numbers:
        for l in inst.letters:
            out.append(n)
            out.append(l)
    return out


def serialize_seq2seq(inst: CartesianInstance) -> Pair:
    inp = list(inst.numbers) + [SEP] + list(inst.letters)
    return inp, product_tokens(inst)


def parse_input(tokens: list[str]) -> CartesianInstance:
    """Inverse of the input side of serialize_seq2seq."""
    if tokens.count(SEP) != 1 or SEP2 in tokens:
        raise CartesianError(f"not a plain serialized instance: {tokens}")
    sep = tokens.index(SEP)
    return CartesianInstance(tuple(tokens[:sep]), tuple(tokens[sep + 1:]))


def step_outputs(inst: CartesianInstance, unit: str) -> list[list[str]]:
    """Per-step outputs before EOI: one row each, or one pair each."""
    if unit == "row":
        return [[t for l in inst.letters for t in (n, l)] for n in inst.numbers]
    if unit == "token":
        return [[n, l] for n in inst.numbers for l in inst.letters]
    raise CartesianError(f"bad unit {unit!r}")


def adapt_next_input(
    mode: ExpansionMode,
    original_input: list[str],
    prev_input: list[str],
    last_output: list[str],
) -> list[str]:
    """Next intermediate input from the previous one and its output.

    Short memory restarts from the original input and keeps only the last
    output as a cursor; long memory keeps appending to the previous input.
    """
    if last_output and last_output[-1] == EOI:
        raise CartesianError("adapt called on a finished iteration")
    if mode.memory == "short":
        return original_input + [SEP2] + last_output
    if SEP2 in prev_input:
        return prev_input + last_output
    return prev_input + [SEP2] + last_output


def expand(inst: CartesianInstance, mode: ExpansionMode) -> IterExample:
    original, _ = serialize_seq2seq(inst)
    outputs = step_outputs(inst, mode.unit)
    steps: list[Pair] = []
    current = original
    for i, out in enumerate(outputs):
        if i == len(outputs) - 1:
            out = out + [EOI]
        steps.append((current, out))
        if i < len(outputs) - 1:
            current = adapt_next_input(mode, original, current, out)
    return IterExample(steps)


def reassemble(outputs: list[list[str]]) -> list[str]:
    """Concatenate intermediate outputs, dropping the trailing EOI token."""
    if not outputs or not outputs[-1] or outputs[-1][-1] != EOI:
        raise CartesianError("unterminated iteration")
    flat: list[str] = []
    for out in outputs:
        flat.extend(out)
    return flat[:-1]


def sample_instances(
    seed: int,
    count: int,
    n_range: tuple[int, int],
    l_range: tuple[int, int],
) -> list[CartesianInstance]:
    rng = random.Random(seed)
    return [generate(rng, n_range, l_range) for _ in range(count)]
