"""Question-to-query task: clause decomposition and long-input expansion.

Queries are whitespace-tokenized SPARQL-like strings with one brace pair
delimiting the WHERE body. The body splits into clauses on top-level "."
separators (FILTER groups stay atomic), and clauses are kept in
alphabetical order of their surface form. Expansion emits the header,
then one clause per step, then the closing brace; every intermediate
input is the question followed by all outputs so far.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import IterExample, Pair, load_pairs
from .vocab import EOI, SEP2, detokenize, tokenize


class CfqError(ValueError):
    pass


@dataclass(frozen=True)
class CfqExample:
    question: tuple[str, ...]
    query: tuple[str, ...]

    def __post_init__(self):
        if self.query.count("{") != 1 or self.query.count("}") != 1:
            raise CfqError(f"query must contain exactly one brace pair: {detokenize(self.query)}")

    @classmethod
    def from_text(cls, question: str, query: str) -> "CfqExample":
        return cls(tuple(tokenize(question)), tuple(tokenize(query)))


@dataclass
class ClauseDecomposition:
    header: list[str]   # from the query start through "{"
    clauses: list[list[str]]
    footer: list[str]   # the "}" token

    def to_tokens(self) -> list[str]:
        out = list(self.header)
        for i, clause in enumerate(self.clauses):
            if i:
                out.append(".")
            out.extend(clause)
        out.extend(self.footer)
        return out


def decompose(query: Sequence[str]) -> ClauseDecomposition:
    """Split the WHERE body into alphabetically sorted clauses."""
    query = list(query)
    if query.count("{") != 1 or query.count("}") != 1:
        raise CfqError("malformed query: need exactly one { and one }")
    open_pos = query.index("{")
    close_pos = query.index("}")
    if close_pos < open_pos or query[close_pos + 1:]:
        raise CfqError("malformed query: bad brace placement")

    body = query[open_pos + 1:close_pos]
    clauses: list[list[str]] = []
    current: list[str] = []
    depth = 0
    for tok in body:
        if tok == "(":
            depth += 1
        elif tok == ")":
            depth -= 1
            if depth < 0:
                raise CfqError("malformed query: unbalanced parentheses")
        if tok == "." and depth == 0:
            if not current:
                raise CfqError("malformed query: empty clause")
            clauses.append(current)
            current = []
        else:
            current.append(tok)
    if depth != 0:
        raise CfqError("malformed query: unbalanced parentheses")
    if current:
        clauses.append(current)
    elif clauses:
        raise CfqError("malformed query: trailing clause separator")

    clauses.sort(key=detokenize)
    return ClauseDecomposition(query[:open_pos + 1], clauses, [query[close_pos]])


def normalize_query(query: Sequence[str]) -> list[str]:
    """Canonical form: single-spaced tokens, sorted clauses."""
    return decompose(query).to_tokens()


def adapt_next_input(prev_input: list[str], last_output: list[str]) -> list[str]:
    """Append an intermediate output to the running long-form input.

    The first adaptation inserts the [SEP2] divider between the question
    and the accumulating query fragments.
    """
    if last_output and last_output[-1] == EOI:
        raise CfqError("cannot adapt a finished output")
    out = list(prev_input)
    if SEP2 not in out:
        out.append(SEP2)
    return out + list(last_output)


def expand_iterative(ex: CfqExample) -> IterExample:
    """Header, one clause per step, closing brace; long inputs throughout."""
    dec = decompose(ex.query)
    outputs = [list(dec.header)] + [list(c) for c in dec.clauses] + [dec.footer + [EOI]]
    steps: list[Pair] = []
    current = list(ex.question)
    for i, out in enumerate(outputs):
        steps.append((current, out))
        if i < len(outputs) - 1:
            current = adapt_next_input(current, out)
    return IterExample(steps)


def reassemble(outputs: list[list[str]]) -> list[str]:
    """Header, clauses rejoined with ".", footer; EOI stripped."""
    if not outputs or not outputs[-1] or outputs[-1][-1] != EOI:
        raise CfqError("unterminated iteration")
    header, middle, footer = outputs[0], outputs[1:-1], outputs[-1][:-1]
    out = list(header)
    for i, clause in enumerate(middle):
        if i:
            out.append(".")
        out.extend(clause)
    out.extend(footer)
    return out


def load_split_indices(path) -> dict[str, list[int]]:
    """Index file with "train" / "test" section headers, one index per line."""
    sections: dict[str, list[int]] = {"train": [], "test": []}
    current: list[int] | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line in sections:
                current = sections[line]
                continue
            if current is None:
                raise CfqError(f"{path}:{lineno}: index before a train/test header")
            try:
                current.append(int(line))
            except ValueError:
                raise CfqError(f"{path}:{lineno}: bad index line {line!r}") from None
    return sections


def load_cfq(path, indices: Sequence[int]) -> list[CfqExample]:
    """Question<TAB>query pairs selected by position."""
    pairs = load_pairs(path)
    out: list[CfqExample] = []
    for idx in indices:
        if not 0 <= idx < len(pairs):
            raise CfqError(f"split index {idx} out of range for {len(pairs)} examples")
        q, sparql = pairs[idx]
        out.append(CfqExample(tuple(q), tuple(sparql)))
    return out


# --- synthetic fixture grammar -------------------------------------------
#
# A small pool of question/query templates in the style of the real task,
# enough to exercise decomposition, sorting, FILTER atomicity and the
# expansion round trip without shipping any external data.

_DIRECT = "ns:film.director.film"
_EDIT = "ns:film.editor.film"
_PRODUCE = "ns:film.producer.film"
_WRITE = "ns:film.writer.film"
_GENDER = "ns:people.person.gender"
_NATION = "ns:people.person.nationality"
_SPOUSE = "ns:people.person.spouse_s"
_MALE = "ns:m.05zppz"
_FEMALE = "ns:m.02zsn"

_VERBS = {"direct": _DIRECT, "edit": _EDIT, "produce": _PRODUCE, "write": _WRITE}


def _count_query(clauses: list[str]) -> str:
    body = " . ".join(sorted(clauses))
    return f"SELECT count(*) WHERE {{ {body} }}"


def _distinct_query(clauses: list[str]) -> str:
    body = " . ".join(sorted(clauses))
    return f"SELECT DISTINCT ?x0 WHERE {{ {body} }}"


def fixture_examples() -> list[CfqExample]:
    """Deterministic hermetic corpus of ~60 question/query pairs."""
    out: list[CfqExample] = []

    for verb, pred in _VERBS.items():
        for a, b in [("M0", "M1"), ("M1", "M2"), ("M2", "M0"), ("M3", "M1")]:
            out.append(CfqExample.from_text(
                f"Did {a} {verb} {b}",
                _count_query([f"{a} {pred} {b}"]),
            ))
        for ent in ["M0", "M1", "M2"]:
            out.append(CfqExample.from_text(
                f"What did {ent} {verb}",
                _distinct_query([f"{ent} {pred} ?x0"]),
            ))
            out.append(CfqExample.from_text(
                f"Who did {verb} {ent}",
                _distinct_query([f"?x0 {pred} {ent}"]),
            ))

    for verb1, verb2 in [("direct", "edit"), ("produce", "write"), ("edit", "produce")]:
        p1, p2 = _VERBS[verb1], _VERBS[verb2]
        for a, b in [("M0", "M1"), ("M2", "M3")]:
            out.append(CfqExample.from_text(
                f"Did M0 {verb1} {a} and {verb2} {b}",
                _count_query([f"M0 {p1} {a}", f"M0 {p2} {b}"]),
            ))
            out.append(CfqExample.from_text(
                f"Who did {verb1} {a} and {verb2} {b}",
                _distinct_query([f"?x0 {p1} {a}", f"?x0 {p2} {b}"]),
            ))

    for gender, gtok in [("male", _MALE), ("female", _FEMALE)]:
        for ent in ["M0", "M1"]:
            out.append(CfqExample.from_text(
                f"Did a {gender} director direct {ent}",
                _count_query([
                    "?x0 a ns:film.director",
                    f"?x0 {_DIRECT} {ent}",
                    f"?x0 {_GENDER} {gtok}",
                ]),
            ))

    for a, b in [("M0", "M1"), ("M1", "M0"), ("M2", "M1")]:
        out.append(CfqExample.from_text(
            f"Was {a} married to a person other than {b}",
            _count_query([f"{a} {_SPOUSE} ?x0", f"FILTER ( ?x0 != {b} )"]),
        ))
        out.append(CfqExample.from_text(
            f"Was {a} a french person married to {b}",
            _count_query([f"{a} {_NATION} ns:m.0f8l9c", f"{a} {_SPOUSE} {b}"]),
        ))

    out.append(CfqExample.from_text("Did anything happen", _count_query([])))
    return out
