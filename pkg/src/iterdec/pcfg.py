"""String-editing expression language: parser, interpreter, one-step reducer.

Programs are prefix-notation token sequences over ten editing operations
(six unary, four binary), with "," separating the two arguments of a
binary operation and bare element runs as literals, e.g.

    swap_first_last repeat copy J4 A9 N7 V8

The full recursive interpreter (`evaluate`) is the ground-truth oracle.
`reduce_rightmost` executes exactly one operation, the rightmost one,
whose arguments are always fully literal in prefix form; iterating it
yields the supervised intermediate steps of an example.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence, Union

from .data import IterExample, Pair, load_pairs  # noqa: F401  (load_pairs re-exported)
from .vocab import EOI

UNARY_OPS: tuple[str, ...] = ("copy", "reverse", "shift", "echo", "swap_first_last", "repeat")
BINARY_OPS: tuple[str, ...] = ("append", "prepend", "remove_first", "remove_second")
ALL_OPS: tuple[str, ...] = UNARY_OPS + BINARY_OPS
COMMA = ","

_UNARY = frozenset(UNARY_OPS)
_BINARY = frozenset(BINARY_OPS)
_OPS = frozenset(ALL_OPS)


class PcfgError(ValueError):
    """Malformed expression or invalid reduction; carries a token position."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at token {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Literal:
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Apply:
    op: str
    arg: "Expression"


@dataclass(frozen=True)
class Apply2:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Literal, Apply, Apply2]


def is_operation(token: str) -> bool:
    return token in _OPS


def is_element(token: str) -> bool:
    return token not in _OPS and token != COMMA


def count_ops(tokens: Sequence[str]) -> int:
    return sum(1 for t in tokens if t in _OPS)


def parse(tokens: Sequence[str]) -> Expression:
    """Parse the unique prefix-form expression covering all of `tokens`."""
    expr, pos = _parse_expr(tokens, 0)
    if pos != len(tokens):
        raise PcfgError("malformed expression: trailing tokens", pos)
    return expr


def _parse_expr(tokens: Sequence[str], pos: int) -> tuple[Expression, int]:
    if pos >= len(tokens):
        raise PcfgError("malformed expression: dangling operator", pos)
    tok = tokens[pos]
    if tok in _UNARY:
        arg, pos = _parse_expr(tokens, pos + 1)
        return Apply(tok, arg), pos
    if tok in _BINARY:
        left, mid = _parse_expr(tokens, pos + 1)
        if mid >= len(tokens) or tokens[mid] != COMMA:
            raise PcfgError("malformed expression: binary operation lacks a comma", mid)
        right, end = _parse_expr(tokens, mid + 1)
        return Apply2(tok, left, right), end
    if tok == COMMA:
        raise PcfgError("malformed expression: misplaced comma", pos)
    end = pos
    while end < len(tokens) and is_element(tokens[end]):
        end += 1
    return Literal(tuple(tokens[pos:end])), end


def to_tokens(expr: Expression) -> list[str]:
    """Flatten back to prefix token form; inverse of parse."""
    out: list[str] = []
    _flatten(expr, out)
    return out


def _flatten(expr: Expression, out: list[str]) -> None:
    if isinstance(expr, Literal):
        out.extend(expr.tokens)
    elif isinstance(expr, Apply):
        out.append(expr.op)
        _flatten(expr.arg, out)
    else:
        out.append(expr.op)
        _flatten(expr.left, out)
        out.append(COMMA)
        _flatten(expr.right, out)


def apply_unary(op: str, arg: Sequence[str]) -> list[str]:
    if not arg:
        raise PcfgError(f"empty argument to {op}")
    x = list(arg)
    if op == "copy":
        return x
    if op == "reverse":
        return x[::-1]
    if op == "shift":
        return x[1:] + x[:1]
    if op == "echo":
        return x + x[-1:]
    if op == "swap_first_last":
        x[0], x[-1] = x[-1], x[0]
        return x
    if op == "repeat":
        return x + x
    raise PcfgError(f"unknown unary operation {op!r}")


def apply_binary(op: str, first: Sequence[str], second: Sequence[str]) -> list[str]:
    if not first or not second:
        raise PcfgError(f"empty argument to {op}")
    x, y = list(first), list(second)
    if op == "append":
        return x + y
    if op == "prepend":
        return y + x
    if op == "remove_first":
        return y
    if op == "remove_second":
        return x
    raise PcfgError(f"unknown binary operation {op!r}")


def evaluate(expr: Expression | Sequence[str]) -> list[str]:
    """Fully evaluate an expression (or its token form) to a literal string."""
    if not isinstance(expr, (Literal, Apply, Apply2)):
        expr = parse(expr)
    return _eval(expr)


def _eval(expr: Expression) -> list[str]:
    if isinstance(expr, Literal):
        return list(expr.tokens)
    if isinstance(expr, Apply):
        return apply_unary(expr.op, _eval(expr.arg))
    return apply_binary(expr.op, _eval(expr.left), _eval(expr.right))


def reduce_rightmost(tokens: Sequence[str]) -> list[str]:
    """Execute the rightmost operation and splice its result in place.

    In prefix form the rightmost operation's arguments are always fully
    literal: a unary argument is the maximal element run following it
    (stopping at a comma or the end), a binary operation takes the two
    comma-separated element runs following it.
    """
    op_pos = -1
    for i in range(len(tokens) - 1, -1, -1):
        if tokens[i] in _OPS:
            op_pos = i
            break
    if op_pos < 0:
        raise PcfgError("already reduced: no operation token present")

    op = tokens[op_pos]
    run_end = op_pos + 1
    while run_end < len(tokens) and is_element(tokens[run_end]):
        run_end += 1
    first = tokens[op_pos + 1:run_end]
    if not first:
        raise PcfgError("malformed expression: operation lacks a literal argument", op_pos)

    if op in _UNARY:
        result = apply_unary(op, first)
        rest = run_end
    else:
        if run_end >= len(tokens) or tokens[run_end] != COMMA:
            raise PcfgError("malformed expression: binary operation lacks a comma", run_end)
        second_end = run_end + 1
        while second_end < len(tokens) and is_element(tokens[second_end]):
            second_end += 1
        second = tokens[run_end + 1:second_end]
        if not second:
            raise PcfgError("malformed expression: binary operation lacks a second argument", run_end)
        result = apply_binary(op, first, second)
        rest = second_end

    return list(tokens[:op_pos]) + result + list(tokens[rest:])


def expand_iterative(tokens: Sequence[str]) -> IterExample:
    """One step per operation; the final output gains the EOI token.

    Outputs feed straight back as the next step's input, so the pairs are
    (x, y1), (y1, y2), ..., (y_{N-1}, y_N + [END]).
    """
    parse(tokens)  # reject malformed input up front, with a position
    current = list(tokens)
    n = count_ops(current)
    steps: list[Pair] = []
    for i in range(n):
        reduced = reduce_rightmost(current)
        out = reduced + [EOI] if i == n - 1 else reduced
        steps.append((current, out))
        current = reduced
    if not steps:
        raise PcfgError("already reduced: no operation token present")
    return IterExample(steps)


def element_alphabet(n_letters: int = 26, max_number: int = 20) -> tuple[str, ...]:
    """Element tokens letter+number, e.g. A1..Z20."""
    letters = [chr(ord("A") + i) for i in range(n_letters)]
    return tuple(f"{c}{n}" for c in letters for n in range(1, max_number + 1))


def sample_expression(
    seed: int | random.Random,
    op_count: tuple[int, int],
    literal_len: tuple[int, int],
    alphabet: Sequence[str],
) -> Expression:
    """Random expression with op count and literal lengths in the given
    inclusive ranges; deterministic in the seed.

    Operations are drawn uniformly at each node; a binary operation splits
    its remaining op budget uniformly between the two subtrees.
    """
    if op_count[0] < 1 or op_count[1] < op_count[0]:
        raise ValueError(f"bad op_count range {op_count}")
    if literal_len[0] < 1 or literal_len[1] < literal_len[0]:
        raise ValueError(f"bad literal_len range {literal_len}")
    if not alphabet:
        raise ValueError("empty alphabet")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    budget = rng.randint(*op_count)
    return _sample_node(rng, budget, literal_len, alphabet)


def _sample_node(
    rng: random.Random,
    budget: int,
    literal_len: tuple[int, int],
    alphabet: Sequence[str],
) -> Expression:
    if budget == 0:
        length = rng.randint(*literal_len)
        return Literal(tuple(rng.choice(alphabet) for _ in range(length)))
    op = rng.choice(ALL_OPS)
    if op in _UNARY:
        return Apply(op, _sample_node(rng, budget - 1, literal_len, alphabet))
    left_budget = rng.randint(0, budget - 1)
    left = _sample_node(rng, left_budget, literal_len, alphabet)
    right = _sample_node(rng, budget - 1 - left_budget, literal_len, alphabet)
    return Apply2(op, left, right)


def sample_pairs(
    seed: int,
    count: int,
    op_count: tuple[int, int],
    literal_len: tuple[int, int] = (1, 5),
    alphabet: Sequence[str] | None = None,
) -> list[Pair]:
    """Sampled (program, result) training pairs."""
    alphabet = element_alphabet() if alphabet is None else alphabet
    rng = random.Random(seed)
    pairs: list[Pair] = []
    for _ in range(count):
        expr = sample_expression(rng, op_count, literal_len, alphabet)
        toks = to_tokens(expr)
        pairs.append((toks, evaluate(expr)))
    return pairs
