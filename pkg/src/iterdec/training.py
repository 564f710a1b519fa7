"""Batch construction, the equal-step-budget training loop, and run artifacts.

A run directory is self-describing: config.txt (model hyperparameters),
vocab.txt, loss.csv with one row per optimizer step, metadata.txt with the
effective settings, and checkpoints/step-N.ckpt files.  Training always
performs exactly the planned number of optimizer steps, cycling epochs as
needed, so alternative data expansions of one task can be compared under
identical budgets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import TransformerModel
from .optim import Adam
from .vocab import EOS_ID, PAD_ID

STEP_PRESETS = {
    "pcfg-iid": 33325,
    "pcfg-prod": 27049,
    "pcfg-syst": 31458,
    "cartesian-row": 4688,
    "cartesian-token": 14077,
    "cfq": 53318,
}

_DROPOUT_STREAM = 104729


class TrainError(Exception):
    """Raised on invalid training configuration or data."""


class NumericalError(TrainError):
    """Raised when the loss leaves the finite range and training aborts."""


@dataclass
class Batch:
    """Padded id matrices plus masks marking the non-PAD positions."""

    src: np.ndarray
    tgt: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self):
        return self.src.shape[0]


@dataclass
class TrainPlan:
    """Settings for one training run over a fixed list of id pairs."""

    pairs: list
    total_steps: int
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 1000
    warmup_steps: int = 4000

    def __post_init__(self):
        if self.total_steps < 1:
            raise TrainError(f"total_steps must be positive, got {self.total_steps}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be positive, got {self.batch_size}")
        if not self.pairs:
            raise TrainError("training requires at least one pair")


def encode_pairs(pairs, vocabulary):
    """Token pairs to (src ids, tgt ids with EOS appended)."""
    return [(vocabulary.encode(src), vocabulary.encode(tgt) + [EOS_ID])
            for src, tgt in pairs]


def make_batch(id_pairs):
    """Pad a list of (src ids, tgt ids) to one Batch."""
    if not id_pairs:
        raise TrainError("cannot build an empty batch")
    n = len(id_pairs)
    n_src = max(len(s) for s, _ in id_pairs)
    n_tgt = max(len(t) for _, t in id_pairs)
    src = np.full((n, n_src), PAD_ID, dtype=np.int64)
    tgt = np.full((n, n_tgt), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((n, n_src), dtype=bool)
    tgt_mask = np.zeros((n, n_tgt), dtype=bool)
    for row, (s, t) in enumerate(id_pairs):
        src[row, : len(s)] = s
        src_mask[row, : len(s)] = True
        tgt[row, : len(t)] = t
        tgt_mask[row, : len(t)] = True
    return Batch(src, tgt, src_mask, tgt_mask)


def epoch_order(n_pairs, seed, epoch):
    """Deterministic shuffle for one epoch, derived from (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n_pairs)


def make_batches(id_pairs, batch_size, seed, epoch=0):
    """All batches of one shuffled epoch, in order."""
    order = epoch_order(len(id_pairs), seed, epoch)
    return [make_batch([id_pairs[i] for i in order[lo: lo + batch_size]])
            for lo in range(0, len(order), batch_size)]


def batch_stream(id_pairs, batch_size, seed, skip=0):
    """Endless batch iterator cycling shuffled epochs; skip fast-forwards.

    Skipping k batches yields exactly the stream a fresh iterator would
    produce after k next() calls, which makes resumed runs line up with
    uninterrupted ones.
    """
    per_epoch = (len(id_pairs) + batch_size - 1) // batch_size
    epoch = skip // per_epoch
    within = skip % per_epoch
    while True:
        order = epoch_order(len(id_pairs), seed, epoch)
        for index in range(within, per_epoch):
            lo = index * batch_size
            yield make_batch([id_pairs[i] for i in order[lo: lo + batch_size]])
        within = 0
        epoch += 1


def batch_loss(model, batch, train=False, rng=None):
    """Label-smoothed loss of one batch under the model's output mode."""
    result = model.forward_teacher_forced(batch.src, batch.tgt, batch.src_mask,
                                          batch.tgt_mask, train=train, rng=rng)
    smoothing = model.config.label_smoothing
    if result.is_probs:
        return ad.nll_from_probs(result.scores, batch.tgt, batch.tgt_mask, smoothing)
    return ad.cross_entropy(result.scores, batch.tgt, batch.tgt_mask, smoothing)


def _write_metadata(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def read_metadata(path):
    entries = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            entries[key] = value
    return entries


def train(model, plan, vocabulary, run_dir, preset=None, extra_metadata=None,
          optimizer=None, start_step=0):
    """Run (total_steps - start_step) optimizer steps and write artifacts.

    Returns the list of per-step losses from this call.  Pass the
    optimizer and start_step recovered by :func:`load_for_resume` to
    continue an interrupted run; loss rows are appended in that case.
    """
    run_dir = Path(run_dir)
    checkpoints = run_dir / "checkpoints"
    checkpoints.mkdir(parents=True, exist_ok=True)
    if len(vocabulary) != model.config.vocab_size:
        raise TrainError(
            f"vocabulary has {len(vocabulary)} tokens, model expects "
            f"{model.config.vocab_size}")
    id_pairs = plan.pairs
    for src, tgt in id_pairs:
        top = max(max(src, default=0), max(tgt, default=0))
        if top >= model.config.vocab_size:
            raise TrainError(f"pair contains id {top} outside the vocabulary")

    (run_dir / "config.txt").write_text(model.config.to_text(), encoding="utf-8")
    vocabulary.save(run_dir / "vocab.txt")
    metadata = {
        "seed": plan.seed,
        "preset": preset if preset else "none",
        "step_budget": plan.total_steps,
        "batch_size": plan.batch_size,
        "warmup_steps": plan.warmup_steps,
        "pairs": len(id_pairs),
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    _write_metadata(run_dir / "metadata.txt", metadata)

    opt = optimizer
    if opt is None:
        opt = Adam(model.parameters(), d_model=model.config.d_model,
                   warmup_steps=plan.warmup_steps)
        opt.step_count = start_step
    stream = batch_stream(id_pairs, plan.batch_size, plan.seed, skip=start_step)
    loss_path = run_dir / "loss.csv"
    losses = []
    mode = "a" if start_step else "w"
    with open(loss_path, mode, encoding="utf-8") as loss_file:
        if not start_step:
            loss_file.write("step,loss\n")
        for step in range(start_step + 1, plan.total_steps + 1):
            batch = next(stream)
            rng = np.random.default_rng([plan.seed, _DROPOUT_STREAM, step])
            loss = batch_loss(model, batch, train=True, rng=rng)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step}")
            loss.backward()
            opt.step()
            losses.append(value)
            loss_file.write(f"{step},{value:.17g}\n")
            if step % plan.checkpoint_every == 0 or step == plan.total_steps:
                _save_step(model, opt, plan, step, checkpoints)
    return losses


def _save_step(model, opt, plan, step, checkpoints_dir):
    model.save(checkpoints_dir / f"step-{step}.ckpt",
               extra_config={"train": {"step": step, "seed": plan.seed,
                                       "warmup_steps": plan.warmup_steps}},
               extra_tensors=opt.state_tensors())


def latest_checkpoint(run_dir):
    """Path of the highest-step checkpoint in a run directory."""
    checkpoints = Path(run_dir) / "checkpoints"
    best, best_step = None, -1
    if checkpoints.is_dir():
        for name in os.listdir(checkpoints):
            if name.startswith("step-") and name.endswith(".ckpt"):
                try:
                    step = int(name[len("step-"): -len(".ckpt")])
                except ValueError:
                    continue
                if step > best_step:
                    best, best_step = checkpoints / name, step
    if best is None:
        raise TrainError(f"no checkpoints found under {run_dir}")
    return best


def load_for_resume(run_dir):
    """Rebuild (model, optimizer, step) from a run's latest checkpoint."""
    path = latest_checkpoint(run_dir)
    model, config_block, extras = TransformerModel.load(path)
    train_block = config_block.get("train", {})
    step = int(train_block.get("step", 0))
    opt = Adam(model.parameters(), d_model=model.config.d_model,
               warmup_steps=int(train_block.get("warmup_steps", 4000)))
    opt.load_state_tensors(extras, step)
    return model, opt, step
