"""Command-line entry point.

Subcommands cover the full experiment cycle: gen (sample seq2seq
datasets), expand (rewrite them into intermediate-step form), train,
predict, and eval.  Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical abort.  Settings resolve as flags over config-file keys over
defaults, and every effective value is echoed into the run's
metadata.txt so later commands need only the run directory.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import cartesian as cartesian_task
from . import cfq as cfq_task
from . import pcfg as pcfg_task
from .autodiff import AutodiffError, no_grad
from .cartesian import CartesianError, ExpansionMode
from .cfq import CfqError, CfqExample
from .checkpoint import CheckpointError
from .data import DataError, save_pairs
from .engine import (
    DEFAULT_MAX_STEPS,
    EngineError,
    ModelDecoder,
    make_adapter,
    predict_iterative_batch,
)
from .metrics import (
    INVALID_TEXT,
    MetricsError,
    dump_errors,
    evaluate_predictions,
    metrics_csv_text,
)
from .model import ModelConfig, ModelError, TransformerModel
from .optim import OptimError
from .pcfg import PcfgError
from .training import (
    STEP_PRESETS,
    NumericalError,
    TrainError,
    TrainPlan,
    encode_pairs,
    latest_checkpoint,
    read_metadata,
    train,
)
from .vocab import (
    EOI,
    EOS,
    Vocabulary,
    VocabularyError,
    build_vocabulary,
    detokenize,
    tokenize,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TASKS = ("pcfg", "cartesian", "cfq")

_DATA_ERRORS = (DataError, TrainError, OptimError, CheckpointError,
                MetricsError, EngineError, ModelError, VocabularyError,
                PcfgError, CartesianError, CfqError, OSError)


class UsageError(Exception):
    """Raised for flag combinations argparse cannot reject on its own."""


def _parse_range(text, flag):
    lo, sep, hi = text.partition("..")
    if not sep:
        raise UsageError(f"{flag} expects LO..HI, got {text!r}")
    try:
        return int(lo), int(hi)
    except ValueError:
        raise UsageError(f"{flag} expects LO..HI, got {text!r}") from None


def _parse_size(text):
    n, sep, l = text.partition("x")
    if not sep:
        raise UsageError(f"--tests expects NxL entries, got {text!r}")
    try:
        return int(n), int(l)
    except ValueError:
        raise UsageError(f"--tests expects NxL entries, got {text!r}") from None


def _parse_bool(text):
    if text in ("true", "True"):
        return True
    if text in ("false", "False"):
        return False
    raise UsageError(f"expected true or false, got {text!r}")


def _refuse_existing(paths, force):
    if force:
        return
    for path in paths:
        if Path(path).exists():
            raise DataError(f"refusing to overwrite {path}; pass --force to allow")


def _read_tsv(path):
    """(line number, input tokens, output tokens) rows of a TSV file."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: missing tab separator")
            left, _, right = line.partition("\t")
            rows.append((lineno, tokenize(left), tokenize(right)))
    return rows


def _expansion_mode(expansion, memory):
    if expansion is None or memory is None:
        raise UsageError("cartesian runs need --expansion and --memory")
    return ExpansionMode(unit=expansion, memory=memory)


# ---------------------------------------------------------------- gen


def cmd_gen(args):
    out_dir = Path(args.out)
    if args.task == "pcfg":
        files = {"train.tsv": pcfg_task.sample_pairs(
            args.seed, args.n, _parse_range(args.ops, "--ops"),
            _parse_range(args.literal_len, "--literal-len"))}
        if args.test_ops:
            files["test.tsv"] = pcfg_task.sample_pairs(
                args.seed + 1, args.test_n, _parse_range(args.test_ops, "--test-ops"),
                _parse_range(args.literal_len, "--literal-len"))
    elif args.task == "cartesian":
        instances = cartesian_task.sample_instances(
            args.seed, args.n, (1, args.train_max), (1, args.train_max))
        files = {"train.tsv": [cartesian_task.serialize_seq2seq(i)
                               for i in instances]}
        for offset, entry in enumerate(filter(None, args.tests.split(","))):
            n, l = _parse_size(entry)
            held_out = cartesian_task.sample_instances(
                args.seed + 1 + offset, args.test_n, (n, n), (l, l))
            files[f"test-{n}x{l}.tsv"] = [cartesian_task.serialize_seq2seq(i)
                                          for i in held_out]
    else:
        if args.cfq_json:
            if not args.split_file:
                raise UsageError("--cfq-json requires --split-file")
            indices = cfq_task.load_split_indices(args.split_file)
            splits = {name: cfq_task.load_cfq(args.cfq_json, indices[name])
                      for name in ("train", "test")}
        else:
            examples = cfq_task.fixture_examples()
            splits = {"train": examples[0::2], "test": examples[1::2]}
        files = {f"{name}.tsv": [(ex.question, cfq_task.normalize_query(ex.query))
                                 for ex in examples]
                 for name, examples in splits.items()}

    paths = [out_dir / name for name in files]
    _refuse_existing(paths, args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, pairs in files.items():
        save_pairs(out_dir / name, pairs)
        print(f"wrote {out_dir / name} ({len(pairs)} pairs)")


# ------------------------------------------------------------- expand


def _expand_row(task, mode, lineno, src, tgt, path):
    if task == "pcfg":
        example = pcfg_task.expand_iterative(src)
        final = example.steps[-1][1]
        if [t for t in final if t != EOI] != tgt:
            raise DataError(f"{path}:{lineno}: output does not match evaluation")
    elif task == "cartesian":
        instance = cartesian_task.parse_input(src)
        if cartesian_task.product_tokens(instance) != tgt:
            raise DataError(f"{path}:{lineno}: output is not the row-major product")
        example = cartesian_task.expand(instance, mode)
    else:
        example = cfq_task.expand_iterative(
            CfqExample.from_text(detokenize(src), detokenize(tgt)))
    return example.steps


def cmd_expand(args):
    mode = _expansion_mode(args.expansion, args.memory) \
        if args.task == "cartesian" else None
    if args.task != "cartesian" and (args.expansion or args.memory):
        raise UsageError("--expansion/--memory only apply to --task cartesian")
    _refuse_existing([args.out], args.force)
    flat = []
    for lineno, src, tgt in _read_tsv(args.data):
        try:
            flat.extend(_expand_row(args.task, mode, lineno, src, tgt, args.data))
        except (PcfgError, CartesianError, CfqError) as err:
            raise DataError(f"{args.data}:{lineno}: {err}") from err
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pairs(args.out, flat)
    print(f"wrote {args.out} ({len(flat)} intermediate pairs)")


# -------------------------------------------------------------- train

_MODEL_FIELDS = {
    "layers": int, "d_model": int, "d_ff": int, "heads": int, "radius": int,
    "position": str, "copy_decoder": _parse_bool, "dropout": float,
    "label_smoothing": float, "max_len": int, "max_decode_len": int,
    "dtype": str,
}


def _setting(args, file_cfg, name, parse, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in file_cfg:
        try:
            return parse(file_cfg[name])
        except ValueError:
            raise UsageError(
                f"bad config value {name} = {file_cfg[name]!r}") from None
    return default


def _resolve_model_config(args, file_cfg, vocab_size):
    kwargs = {}
    for name, parse in _MODEL_FIELDS.items():
        value = _setting(args, file_cfg, name, parse, None)
        if value is not None:
            kwargs[name] = parse(value) if isinstance(value, str) else value
    return ModelConfig(vocab_size=vocab_size, **kwargs)


def _preset_steps(name):
    if name not in STEP_PRESETS:
        known = ", ".join(sorted(STEP_PRESETS))
        raise UsageError(f"unknown preset {name!r}; known presets: {known}")
    return STEP_PRESETS[name]


def _resolve_steps(args, file_cfg):
    if args.steps is not None and args.preset is not None:
        raise UsageError("--steps and --preset are mutually exclusive")
    if args.steps is not None:
        return args.steps, None
    if args.preset is not None:
        return _preset_steps(args.preset), args.preset
    file_steps = file_cfg.get("steps")
    file_preset = file_cfg.get("preset")
    if file_preset in (None, "", "none"):
        file_preset = None
    if file_steps is not None and file_preset is not None:
        raise UsageError("config file sets both steps and preset")
    if file_steps is not None:
        return int(file_steps), None
    if file_preset is not None:
        return _preset_steps(file_preset), file_preset
    raise UsageError("one of --steps or --preset is required")


def _train_single(args, file_cfg, run_dir, seed):
    rows = _read_tsv(args.data)
    pairs = [(src, tgt) for _, src, tgt in rows]
    vocabulary = build_vocabulary([src + tgt for src, tgt in pairs])
    config = _resolve_model_config(args, file_cfg, len(vocabulary))
    total_steps, preset = _resolve_steps(args, file_cfg)
    plan = TrainPlan(
        pairs=encode_pairs(pairs, vocabulary),
        total_steps=total_steps,
        batch_size=_setting(args, file_cfg, "batch_size", int, 64),
        seed=seed,
        checkpoint_every=_setting(args, file_cfg, "checkpoint_every", int, 1000),
        warmup_steps=_setting(args, file_cfg, "warmup_steps", int, 4000),
    )
    extra = {
        "task": args.task,
        "mode": args.mode,
        "data": args.data,
        "max_steps": _setting(args, file_cfg, "max_steps", int,
                              DEFAULT_MAX_STEPS),
    }
    if args.task == "cartesian":
        extra["expansion"] = _setting(args, file_cfg, "expansion", str, "row")
        extra["memory"] = _setting(args, file_cfg, "memory", str, "long")
    extra.update({f"model.{k}": v for k, v in vars(config).items()})
    model = TransformerModel(config, seed=seed)
    losses = train(model, plan, vocabulary, run_dir, preset=preset,
                   extra_metadata=extra)
    print(f"trained {run_dir}: {total_steps} steps, "
          f"final loss {losses[-1]:.6f}")


def cmd_train(args):
    file_cfg = read_metadata(args.config) if args.config else {}
    run_dir = Path(args.run_dir)
    seed = _setting(args, file_cfg, "seed", int, 0)
    if args.replicas and args.replicas > 1:
        for offset in range(args.replicas):
            _train_single(args, file_cfg, run_dir / f"seed-{seed + offset}",
                          seed + offset)
    else:
        _train_single(args, file_cfg, run_dir, seed)


# ------------------------------------------------------------ predict


def _load_run(run_dir):
    run_dir = Path(run_dir)
    model, _, _ = TransformerModel.load(latest_checkpoint(run_dir))
    vocabulary = Vocabulary.load(run_dir / "vocab.txt")
    if len(vocabulary) != model.config.vocab_size:
        raise DataError(
            f"vocabulary size {len(vocabulary)} does not match the model's "
            f"{model.config.vocab_size}")
    metadata = read_metadata(run_dir / "metadata.txt")
    return model, vocabulary, metadata


def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _predict_tokens(model, vocabulary, task, mode, exp_mode, inputs,
                    max_steps, jobs, batch_size=64):
    """Predictions (token list or None) and traces (or None) per input."""
    decoder = ModelDecoder(model, vocabulary)
    if mode == "iterative":
        adapter = make_adapter(task, exp_mode)

        def work(chunk):
            return predict_iterative_batch(decoder.batch, adapter, chunk,
                                           max_steps)
    else:
        def work(chunk):
            return decoder.batch(chunk), None

    chunks = _chunks(inputs, batch_size)
    with no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(chunk) for chunk in chunks]
    predictions, traces = [], []
    for preds, trs in parts:
        predictions.extend(preds)
        traces.extend(trs if trs is not None else [None] * len(preds))
    return predictions, traces


def _run_settings(args, metadata):
    task = args.task or metadata.get("task")
    if task not in TASKS:
        raise DataError("run directory does not record a task; pass --task")
    mode = args.mode or metadata.get("mode", "iterative")
    exp_mode = None
    if task == "cartesian":
        exp_mode = ExpansionMode(
            unit=args.expansion or metadata.get("expansion", "row"),
            memory=args.memory or metadata.get("memory", "long"))
    max_steps = args.max_steps if args.max_steps is not None else int(
        metadata.get("max_steps", DEFAULT_MAX_STEPS))
    return task, mode, exp_mode, max_steps


def cmd_predict(args):
    model, vocabulary, metadata = _load_run(args.run_dir)
    task, mode, exp_mode, max_steps = _run_settings(args, metadata)
    rows = _read_tsv(args.data)
    inputs = [src for _, src, _ in rows]
    out_path = Path(args.out)
    traces_path = Path(args.traces) if args.traces else \
        out_path.with_suffix(".traces.jsonl")
    _refuse_existing([out_path, traces_path] if mode == "iterative"
                     else [out_path], args.force)
    predictions, traces = _predict_tokens(
        model, vocabulary, task, mode, exp_mode, inputs, max_steps, args.jobs)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for src, pred in zip(inputs, predictions):
            text = INVALID_TEXT if pred is None else detokenize(pred)
            fh.write(detokenize(src) + "\t" + text + "\n")
    invalid = sum(p is None for p in predictions)
    if mode == "iterative":
        with open(traces_path, "w", encoding="utf-8") as fh:
            for index, trace in enumerate(traces):
                fh.write(trace.to_jsonl(example_id=index))
    print(f"wrote {out_path} ({len(predictions)} predictions, "
          f"{invalid} invalid)")


# --------------------------------------------------------------- eval


def _op_count(task, src, gold, unit):
    if task == "pcfg":
        return pcfg_task.count_ops(src)
    if task == "cartesian":
        instance = cartesian_task.parse_input(src)
        rows = len(instance.numbers)
        return rows if unit == "row" else rows * len(instance.letters)
    body = [t for t in gold if t not in (EOS, EOI)]
    return len(cfq_task.decompose(body).clauses) + 2


def _eval_single(args, run_dir):
    rows = _read_tsv(args.data)
    inputs = [src for _, src, _ in rows]
    golds = [tgt for _, _, tgt in rows]
    if args.pred:
        pred_rows = _read_tsv(args.pred)
        if len(pred_rows) != len(rows):
            raise DataError(
                f"{args.pred} has {len(pred_rows)} rows, "
                f"{args.data} has {len(rows)}")
        predictions = [None if tgt == [INVALID_TEXT] else tgt
                       for _, _, tgt in pred_rows]
        task = args.task
        if task not in TASKS:
            raise UsageError("--pred needs --task")
        unit = args.expansion or "row"
    else:
        model, vocabulary, metadata = _load_run(run_dir)
        task, mode, exp_mode, max_steps = _run_settings(args, metadata)
        unit = exp_mode.unit if exp_mode else "row"
        predictions, _ = _predict_tokens(
            model, vocabulary, task, mode, exp_mode, inputs, max_steps,
            args.jobs)
    op_counts = [_op_count(task, src, gold, unit)
                 for src, gold in zip(inputs, golds)]
    report = evaluate_predictions(inputs, golds, predictions, op_counts)

    split = args.split or Path(args.data).stem
    out_dir = Path(args.out) if args.out else Path(run_dir) / f"eval-{split}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(metrics_csv_text(split, report),
                                         encoding="utf-8")
    (out_dir / "errors.txt").write_text(
        dump_errors(report, args.error_limit), encoding="utf-8")
    print(f"{split}: accuracy {report.sentence_accuracy:.4f} "
          f"({report.correct}/{report.total}) -> {out_dir}")
    return report.sentence_accuracy


def cmd_eval(args):
    if args.replicas and args.replicas > 1:
        if args.pred:
            raise UsageError("--replicas evaluates run directories, not --pred")
        base = Path(args.run_dir)
        subruns = sorted(p for p in base.glob("seed-*") if p.is_dir())
        if len(subruns) < args.replicas:
            raise DataError(
                f"{base} holds {len(subruns)} replica runs, "
                f"need {args.replicas}")
        accuracies = [_eval_single(args, sub)
                      for sub in subruns[:args.replicas]]
        mean = sum(accuracies) / len(accuracies)
        print(f"mean accuracy over {len(accuracies)} replicas: {mean:.4f}")
    else:
        if not args.pred and not args.run_dir:
            raise UsageError("eval needs --run-dir or --pred")
        if args.pred and not args.out:
            raise UsageError("eval --pred needs --out")
        _eval_single(args, args.run_dir)


# ---------------------------------------------------------------- cli


def build_parser():
    parser = argparse.ArgumentParser(
        prog="iterdec",
        description="Compositional-generalization experiments with "
                    "iterative decoding.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="sample seq2seq dataset files")
    gen.add_argument("--task", required=True, choices=TASKS)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--force", action="store_true")
    gen.add_argument("--ops", default="1..8", help="pcfg op-count range LO..HI")
    gen.add_argument("--literal-len", default="1..5")
    gen.add_argument("--test-ops", default=None)
    gen.add_argument("--test-n", type=int, default=200)
    gen.add_argument("--train-max", type=int, default=5,
                     help="cartesian max train size per side")
    gen.add_argument("--tests", default="", help="cartesian sizes, e.g. 6x5,6x6")
    gen.add_argument("--cfq-json", default=None)
    gen.add_argument("--split-file", default=None)
    gen.set_defaults(func=cmd_gen)

    expand = sub.add_parser("expand",
                            help="rewrite a TSV into intermediate steps")
    expand.add_argument("--task", required=True, choices=TASKS)
    expand.add_argument("--data", required=True, help="seq2seq TSV to expand")
    expand.add_argument("--out", required=True)
    expand.add_argument("--expansion", choices=("row", "token"))
    expand.add_argument("--memory", choices=("short", "long"))
    expand.add_argument("--force", action="store_true")
    expand.set_defaults(func=cmd_expand)

    trn = sub.add_parser("train", help="train a model on a TSV")
    trn.add_argument("--task", required=True, choices=TASKS)
    trn.add_argument("--mode", required=True, choices=("seq2seq", "iterative"))
    trn.add_argument("--data", required=True)
    trn.add_argument("--run-dir", required=True)
    trn.add_argument("--config", default=None, help="key = value defaults file")
    trn.add_argument("--seed", type=int, default=None)
    trn.add_argument("--steps", type=int, default=None)
    trn.add_argument("--preset", default=None,
                     help="named step budget, e.g. cartesian-token")
    trn.add_argument("--batch-size", type=int, default=None)
    trn.add_argument("--warmup-steps", type=int, default=None)
    trn.add_argument("--checkpoint-every", type=int, default=None)
    trn.add_argument("--replicas", type=int, default=None,
                     help="train this many seeds into seed-N subdirectories")
    trn.add_argument("--expansion", choices=("row", "token"))
    trn.add_argument("--memory", choices=("short", "long"))
    trn.add_argument("--max-steps", type=int, default=None,
                     help="iteration cap recorded for prediction")
    for name in _MODEL_FIELDS:
        flag = "--" + name.replace("_", "-")
        if name in ("position",):
            trn.add_argument(flag, choices=("absolute", "relative"))
        elif name in ("copy_decoder",):
            trn.add_argument(flag, choices=("true", "false"))
        elif name == "dtype":
            trn.add_argument(flag, choices=("float32", "float64"))
        elif name in ("dropout", "label_smoothing"):
            trn.add_argument(flag, type=float, default=None)
        else:
            trn.add_argument(flag, type=int, default=None)
    trn.set_defaults(func=cmd_train)

    pred = sub.add_parser("predict", help="decode a TSV with a trained run")
    pred.add_argument("--run-dir", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--out", required=True, help="predictions TSV")
    pred.add_argument("--traces", default=None,
                      help="iterative trace JSONL (default: out with "
                           ".traces.jsonl suffix)")
    pred.add_argument("--task", choices=TASKS)
    pred.add_argument("--mode", choices=("seq2seq", "iterative"))
    pred.add_argument("--expansion", choices=("row", "token"))
    pred.add_argument("--memory", choices=("short", "long"))
    pred.add_argument("--max-steps", type=int, default=None)
    pred.add_argument("--jobs", type=int, default=1)
    pred.add_argument("--force", action="store_true")
    pred.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="score predictions and write metrics")
    ev.add_argument("--run-dir", default=None)
    ev.add_argument("--data", required=True, help="gold TSV")
    ev.add_argument("--pred", default=None,
                    help="score this predictions TSV instead of decoding")
    ev.add_argument("--out", default=None,
                    help="output directory (default: RUN_DIR/eval-SPLIT)")
    ev.add_argument("--split", default=None, help="split label for metrics.csv")
    ev.add_argument("--task", choices=TASKS)
    ev.add_argument("--mode", choices=("seq2seq", "iterative"))
    ev.add_argument("--expansion", choices=("row", "token"))
    ev.add_argument("--memory", choices=("short", "long"))
    ev.add_argument("--max-steps", type=int, default=None)
    ev.add_argument("--jobs", type=int, default=1)
    ev.add_argument("--replicas", type=int, default=None,
                    help="evaluate seed-N subruns and report the mean")
    ev.add_argument("--error-limit", type=int, default=50)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, AutodiffError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
