"""The inference-time iterative decoding loop.

predict_iterative runs a decode function on the current intermediate
input, checks whether the output carries the end-of-iteration token, and
otherwise adapts the output into the next intermediate input through a
task adapter.  Decode functions map token lists to token lists, so the
same loop drives a trained model, a ground-truth step oracle for testing
loop mechanics, or any stub in between.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import cartesian as cartesian_task
from . import cfq as cfq_task
from .vocab import EOI, SEP2, detokenize

HALT_EOI = "EOI"
HALT_MAX_STEPS = "MaxSteps"

DEFAULT_MAX_STEPS = 64


class EngineError(Exception):
    """Raised for invalid engine usage."""


@dataclass
class IterationTrace:
    """The (input, output) pairs actually produced, and why the loop ended.

    eoi_mid_sequence marks outputs whose EOI arrived before the final
    position; the output is truncated at the EOI and the loop halts, but
    the case is flagged because it signals a content error.
    """

    steps: list = field(default_factory=list)
    halt_reason: str = HALT_MAX_STEPS
    eoi_mid_sequence: bool = False

    def __len__(self):
        return len(self.steps)

    @property
    def outputs(self):
        return [output for _, output in self.steps]

    def to_jsonl(self, example_id=None):
        """One JSON record per step: {step, input, output}, optionally
        tagged with the example the trace belongs to."""
        lines = []
        for number, (inp, out) in enumerate(self.steps, start=1):
            record = {"step": number, "input": detokenize(inp),
                      "output": detokenize(out)}
            if example_id is not None:
                record["example"] = example_id
            lines.append(json.dumps(record))
        return "\n".join(lines) + ("\n" if lines else "")


class TaskAdapter:
    """How a task turns outputs into next inputs and a final prediction."""

    def initial_input(self, tokens):
        return list(tokens)

    def adapt(self, prev_input, last_output):
        raise NotImplementedError

    def reassemble(self, outputs):
        raise NotImplementedError


class PcfgAdapter(TaskAdapter):
    """Each intermediate output is itself the next intermediate input."""

    def adapt(self, prev_input, last_output):
        return list(last_output)

    def reassemble(self, outputs):
        final = list(outputs[-1])
        if final and final[-1] == EOI:
            final = final[:-1]
        return final


class CartesianAdapter(TaskAdapter):
    """Product-task adaptation for one expansion mode."""

    def __init__(self, mode):
        self.mode = mode

    def adapt(self, prev_input, last_output):
        if SEP2 in prev_input:
            original = prev_input[: prev_input.index(SEP2)]
        else:
            original = list(prev_input)
        return cartesian_task.adapt_next_input(self.mode, original, prev_input,
                                               last_output)

    def reassemble(self, outputs):
        return cartesian_task.reassemble(outputs)


class CfqAdapter(TaskAdapter):
    """Query-building adaptation: all outputs so far follow the question."""

    def adapt(self, prev_input, last_output):
        return cfq_task.adapt_next_input(prev_input, last_output)

    def reassemble(self, outputs):
        return cfq_task.reassemble(outputs)


def make_adapter(task, mode=None):
    """Adapter for a task name; Cartesian requires an expansion mode."""
    if task == "pcfg":
        return PcfgAdapter()
    if task == "cartesian":
        if mode is None:
            raise EngineError("cartesian adapter requires an expansion mode")
        return CartesianAdapter(mode)
    if task == "cfq":
        return CfqAdapter()
    raise EngineError(f"unknown task {task!r}")


def _truncate_at_eoi(output):
    """Clip anything after a mid-sequence EOI; returns (output, was_mid)."""
    if EOI in output[:-1]:
        return output[: output.index(EOI) + 1], True
    return list(output), False


def predict_iterative(decode_fn, adapter, input_tokens, max_steps=DEFAULT_MAX_STEPS):
    """Iterate decode-and-adapt until EOI; returns (prediction, trace).

    The prediction is None when the loop exhausts max_steps without
    seeing EOI, which downstream accuracy counts as wrong.
    """
    if max_steps < 1:
        raise EngineError(f"max_steps must be at least 1, got {max_steps}")
    current = adapter.initial_input(input_tokens)
    steps = []
    for _ in range(max_steps):
        output, mid = _truncate_at_eoi(decode_fn(current))
        steps.append((current, output))
        if output and output[-1] == EOI:
            trace = IterationTrace(steps, HALT_EOI, eoi_mid_sequence=mid)
            return adapter.reassemble(trace.outputs), trace
        current = adapter.adapt(current, output)
    return None, IterationTrace(steps, HALT_MAX_STEPS)


def predict_iterative_batch(batch_decode_fn, adapter, inputs,
                            max_steps=DEFAULT_MAX_STEPS):
    """Run the iterative loop over many examples in decoding lockstep.

    batch_decode_fn maps a list of token lists to a list of token lists.
    Each round decodes all unfinished examples together, so a batched
    greedy decoder amortizes its cost; results match per-example
    predict_iterative with the same decode function.
    """
    if max_steps < 1:
        raise EngineError(f"max_steps must be at least 1, got {max_steps}")
    count = len(inputs)
    currents = [adapter.initial_input(tokens) for tokens in inputs]
    steps = [[] for _ in range(count)]
    results = [None] * count
    traces = [None] * count
    active = list(range(count))
    for _ in range(max_steps):
        if not active:
            break
        outputs = batch_decode_fn([currents[i] for i in active])
        if len(outputs) != len(active):
            raise EngineError("batch decode returned a mismatched output count")
        still = []
        for i, raw in zip(active, outputs):
            output, mid = _truncate_at_eoi(raw)
            steps[i].append((currents[i], output))
            if output and output[-1] == EOI:
                traces[i] = IterationTrace(steps[i], HALT_EOI, eoi_mid_sequence=mid)
                results[i] = adapter.reassemble(traces[i].outputs)
            else:
                currents[i] = adapter.adapt(currents[i], output)
                still.append(i)
        active = still
    for i in active:
        traces[i] = IterationTrace(steps[i], HALT_MAX_STEPS)
    return results, traces


def predict_seq2seq(decode_fn, input_tokens):
    """Single full decode; the baseline path."""
    return list(decode_fn(list(input_tokens)))


class ModelDecoder:
    """Adapts a trained model and vocabulary to token-list decoding."""

    def __init__(self, model, vocabulary, max_len=None):
        self.model = model
        self.vocabulary = vocabulary
        self.max_len = max_len

    def __call__(self, tokens):
        ids = self.vocabulary.encode(tokens)
        return self.vocabulary.decode(self.model.decode_greedy(ids, self.max_len))

    def batch(self, token_lists):
        encoded = [self.vocabulary.encode(tokens) for tokens in token_lists]
        decoded = self.model.decode_greedy_batch(encoded, self.max_len)
        return [self.vocabulary.decode(ids) for ids in decoded]
