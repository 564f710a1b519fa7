"""Evaluation metrics: sentence accuracy, per-op-count histograms,
per-step error, error-example dumps, and CSV emission.

All aggregation is pure; callers decide where files go.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .vocab import EOI, EOS

CSV_HEADER = ("split,op_count,total,correct,accuracy,"
              "per_step_error_paper,per_step_error_alt")

# Placeholder text for predictions that never halted (None from the engine).
INVALID_TEXT = "<invalid>"


class MetricsError(ValueError):
    """Raised on malformed metric inputs."""


def normalize(value: str | Sequence[str]) -> str:
    """Canonical comparison text: terminator tokens dropped, whitespace
    collapsed to single spaces."""
    tokens = value.split() if isinstance(value, str) else [str(t) for t in value]
    return " ".join(t for t in tokens if t not in (EOS, EOI))


def matches(prediction: str | Sequence[str] | None,
            gold: str | Sequence[str]) -> bool:
    """Exact sentence match after normalization; a missing prediction
    (halting-cap overrun) never matches."""
    if prediction is None:
        return False
    return normalize(prediction) == normalize(gold)


def sentence_accuracy(predictions: Sequence, golds: Sequence) -> float:
    if len(predictions) != len(golds):
        raise MetricsError(
            f"length mismatch: {len(predictions)} predictions "
            f"vs {len(golds)} references")
    if not golds:
        raise MetricsError("cannot score an empty evaluation set")
    return sum(matches(p, g) for p, g in zip(predictions, golds)) / len(golds)


def per_op_histogram(op_counts: Sequence[int],
                     match_flags: Sequence[bool]) -> dict[int, tuple[int, int]]:
    """Bucket by op count; each bucket holds (correct, total)."""
    if len(op_counts) != len(match_flags):
        raise MetricsError(
            f"length mismatch: {len(op_counts)} op counts "
            f"vs {len(match_flags)} match flags")
    histogram: dict[int, tuple[int, int]] = {}
    for ops, ok in zip(op_counts, match_flags):
        if ops < 1:
            raise MetricsError(f"op count must be >= 1, got {ops}")
        correct, total = histogram.get(ops, (0, 0))
        histogram[ops] = (correct + bool(ok), total + 1)
    return dict(sorted(histogram.items()))


def per_step_error(accuracy_at_n: float, n: int) -> float:
    """(1 - accuracy)^(1/N): chance of a mistake at any intermediate step."""
    if not 0.0 <= accuracy_at_n <= 1.0:
        raise MetricsError(f"accuracy must lie in [0, 1], got {accuracy_at_n}")
    if n < 1:
        raise MetricsError(f"op count must be >= 1, got {n}")
    return (1.0 - accuracy_at_n) ** (1.0 / n)


def per_step_error_alt(accuracy_at_n: float, n: int) -> float:
    """Compounding reading: 1 - accuracy^(1/N), the per-step error rate that
    would yield the observed accuracy if steps failed independently."""
    if not 0.0 <= accuracy_at_n <= 1.0:
        raise MetricsError(f"accuracy must lie in [0, 1], got {accuracy_at_n}")
    if n < 1:
        raise MetricsError(f"op count must be >= 1, got {n}")
    return 1.0 - accuracy_at_n ** (1.0 / n)


@dataclass
class EvalReport:
    sentence_accuracy: float
    per_op_counts: dict[int, tuple[int, int]]
    per_step_error: dict[int, float]
    error_examples: list[tuple[str, str, str]]

    @property
    def total(self) -> int:
        return sum(total for _, total in self.per_op_counts.values())

    @property
    def correct(self) -> int:
        return sum(correct for correct, _ in self.per_op_counts.values())


def evaluate_predictions(inputs: Sequence,
                         golds: Sequence,
                         predictions: Sequence,
                         op_counts: Sequence[int]) -> EvalReport:
    """Aggregate one evaluation pass into an EvalReport."""
    n = len(golds)
    if not (len(inputs) == len(predictions) == len(op_counts) == n):
        raise MetricsError(
            f"length mismatch: {len(inputs)} inputs, {n} references, "
            f"{len(predictions)} predictions, {len(op_counts)} op counts")
    flags = [matches(p, g) for p, g in zip(predictions, golds)]
    histogram = per_op_histogram(op_counts, flags)
    errors = [
        (normalize(inp), normalize(gold),
         INVALID_TEXT if pred is None else normalize(pred))
        for inp, gold, pred, ok in zip(inputs, golds, predictions, flags)
        if not ok
    ]
    return EvalReport(
        sentence_accuracy=sentence_accuracy(predictions, golds),
        per_op_counts=histogram,
        per_step_error={ops: per_step_error(correct / total, ops)
                        for ops, (correct, total) in histogram.items()},
        error_examples=errors,
    )


def metrics_csv_text(split: str, report: EvalReport) -> str:
    """One row per op-count bucket under the fixed header."""
    lines = [CSV_HEADER]
    for ops, (correct, total) in report.per_op_counts.items():
        accuracy = correct / total
        lines.append(
            f"{split},{ops},{total},{correct},{accuracy:.6f},"
            f"{report.per_step_error[ops]:.6f},"
            f"{per_step_error_alt(accuracy, ops):.6f}")
    return "\n".join(lines) + "\n"


def dump_errors(report: EvalReport, limit: int) -> str:
    """Up to limit three-row blocks: Input / True output / Prediction."""
    blocks = [
        f"Input:       {inp}\nTrue output: {gold}\nPrediction:  {pred}\n"
        for inp, gold, pred in report.error_examples[:limit]
    ]
    return "\n".join(blocks)
