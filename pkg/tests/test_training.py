import numpy as np
import pytest

from iterdec.model import ModelConfig, TransformerModel
from iterdec.training import (
    STEP_PRESETS,
    Batch,
    TrainError,
    TrainPlan,
    batch_loss,
    batch_stream,
    encode_pairs,
    latest_checkpoint,
    load_for_resume,
    make_batch,
    make_batches,
    read_metadata,
    train,
)
from iterdec.vocab import EOS_ID, PAD_ID, build_vocabulary


def toy_vocabulary():
    return build_vocabulary([["t0", "t1", "t2", "t3", "t4", "t5"]])


def toy_id_pairs(rng, count, vocab_size=13, lo=7):
    pairs = []
    for _ in range(count):
        src = list(rng.integers(lo, vocab_size, size=rng.integers(2, 5)))
        tgt = list(rng.integers(lo, vocab_size, size=rng.integers(2, 5))) + [EOS_ID]
        pairs.append(([int(x) for x in src], [int(x) for x in tgt]))
    return pairs


def toy_model(**overrides):
    base = dict(vocab_size=13, layers=1, d_model=8, d_ff=16, heads=2,
                position="absolute", dropout=0.0, label_smoothing=0.0,
                max_len=32, max_decode_len=8, dtype="float32")
    base.update(overrides)
    return TransformerModel(ModelConfig(**base), seed=0)


class TestBatching:
    def test_batch_sizes_130_over_64(self):
        rng = np.random.default_rng(0)
        batches = make_batches(toy_id_pairs(rng, 130), 64, seed=1)
        assert [len(b) for b in batches] == [64, 64, 2]

    def test_same_seed_same_order(self):
        rng = np.random.default_rng(1)
        pairs = toy_id_pairs(rng, 50)
        a = make_batches(pairs, 16, seed=7)
        b = make_batches(pairs, 16, seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x.src, y.src)
            assert np.array_equal(x.tgt, y.tgt)

    def test_epochs_shuffle_differently(self):
        rng = np.random.default_rng(2)
        pairs = toy_id_pairs(rng, 64)
        first = make_batches(pairs, 64, seed=7, epoch=0)[0]
        second = make_batches(pairs, 64, seed=7, epoch=1)[0]
        assert not np.array_equal(first.src, second.src)

    def test_shuffle_preserves_multiset(self):
        rng = np.random.default_rng(3)
        pairs = toy_id_pairs(rng, 40)
        batches = make_batches(pairs, 7, seed=5)
        seen = []
        for batch in batches:
            for row in range(len(batch)):
                src = [int(x) for x in batch.src[row][batch.src_mask[row]]]
                tgt = [int(x) for x in batch.tgt[row][batch.tgt_mask[row]]]
                seen.append((tuple(src), tuple(tgt)))
        expected = sorted((tuple(s), tuple(t)) for s, t in pairs)
        assert sorted(seen) == expected

    def test_padding_and_masks(self):
        batch = make_batch([([7, 8], [9, EOS_ID]), ([10, 11, 12], [7, 8, 9, EOS_ID])])
        assert batch.src.shape == (2, 3)
        assert batch.tgt.shape == (2, 4)
        assert batch.src[0, 2] == PAD_ID
        assert batch.src_mask.tolist() == [[True, True, False], [True, True, True]]
        assert batch.tgt_mask[0].tolist() == [True, True, False, False]

    def test_stream_skip_matches_consumed(self):
        rng = np.random.default_rng(4)
        pairs = toy_id_pairs(rng, 25)
        plain = batch_stream(pairs, 4, seed=9)
        for _ in range(11):
            next(plain)
        skipped = batch_stream(pairs, 4, seed=9, skip=11)
        for _ in range(9):
            a, b = next(plain), next(skipped)
            assert np.array_equal(a.src, b.src)
            assert np.array_equal(a.tgt, b.tgt)

    def test_encode_pairs_appends_eos(self):
        vocab = toy_vocabulary()
        encoded = encode_pairs([(["t0", "t1"], ["t2"])], vocab)
        assert encoded[0][1][-1] == EOS_ID
        assert len(encoded[0][1]) == 2


class TestPlan:
    def test_presets(self):
        assert STEP_PRESETS["cartesian-token"] == 14077
        assert STEP_PRESETS["cartesian-row"] == 4688
        assert STEP_PRESETS["pcfg-iid"] == 33325
        assert STEP_PRESETS["pcfg-prod"] == 27049
        assert STEP_PRESETS["pcfg-syst"] == 31458
        assert STEP_PRESETS["cfq"] == 53318

    def test_invalid_plans(self):
        with pytest.raises(TrainError):
            TrainPlan(pairs=[([1], [2])], total_steps=0)
        with pytest.raises(TrainError):
            TrainPlan(pairs=[], total_steps=5)


class TestTrainLoop:
    def test_single_step_artifacts(self, tmp_path):
        rng = np.random.default_rng(5)
        model = toy_model()
        plan = TrainPlan(pairs=toy_id_pairs(rng, 8), total_steps=1, batch_size=4,
                         seed=3)
        losses = train(model, plan, toy_vocabulary(), tmp_path / "run",
                       preset="none")
        assert len(losses) == 1
        run = tmp_path / "run"
        assert (run / "config.txt").exists()
        assert (run / "vocab.txt").exists()
        assert (run / "checkpoints" / "step-1.ckpt").exists()
        lines = (run / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 2
        meta = read_metadata(run / "metadata.txt")
        assert meta["seed"] == "3"
        assert meta["step_budget"] == "1"

    def test_loss_decreases_on_memorization(self, tmp_path):
        rng = np.random.default_rng(6)
        model = toy_model(layers=2, d_model=16, d_ff=32)
        pairs = toy_id_pairs(rng, 10)
        plan = TrainPlan(pairs=pairs, total_steps=2000, batch_size=10, seed=0,
                         checkpoint_every=2000)
        losses = train(model, plan, toy_vocabulary(), tmp_path / "run")
        assert len(losses) == 2000
        assert min(losses) < 0.05

    def test_vocabulary_size_mismatch(self, tmp_path):
        model = toy_model(vocab_size=20)
        plan = TrainPlan(pairs=[([7], [8, EOS_ID])], total_steps=1)
        with pytest.raises(TrainError, match="vocabulary"):
            train(model, plan, toy_vocabulary(), tmp_path / "run")

    def test_out_of_vocab_id(self, tmp_path):
        model = toy_model()
        plan = TrainPlan(pairs=[([7, 99], [8, EOS_ID])], total_steps=1)
        with pytest.raises(TrainError, match="99"):
            train(model, plan, toy_vocabulary(), tmp_path / "run")

    def test_non_finite_abort_names_step(self, tmp_path):
        model = toy_model()
        for p in model.parameters():
            p.data = p.data * np.float32(1e30)
        plan = TrainPlan(pairs=[([7, 8], [9, EOS_ID])], total_steps=3, batch_size=1)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainError, match="step 1"):
                train(model, plan, toy_vocabulary(), tmp_path / "run")

    def test_determinism_two_runs(self, tmp_path):
        rng = np.random.default_rng(7)
        pairs = toy_id_pairs(rng, 12)
        outputs = []
        for name in ("a", "b"):
            model = toy_model(dropout=0.1)
            plan = TrainPlan(pairs=pairs, total_steps=20, batch_size=6, seed=11)
            train(model, plan, toy_vocabulary(), tmp_path / name)
            outputs.append((tmp_path / name / "loss.csv").read_text())
        assert outputs[0] == outputs[1]

    def test_resume_matches_uninterrupted(self, tmp_path):
        rng = np.random.default_rng(8)
        pairs = toy_id_pairs(rng, 20)

        model_full = toy_model(dropout=0.1)
        plan_full = TrainPlan(pairs=pairs, total_steps=10, batch_size=8, seed=2,
                              checkpoint_every=5)
        train(model_full, plan_full, toy_vocabulary(), tmp_path / "full")

        model_half = toy_model(dropout=0.1)
        plan_half = TrainPlan(pairs=pairs, total_steps=5, batch_size=8, seed=2,
                              checkpoint_every=5)
        train(model_half, plan_half, toy_vocabulary(), tmp_path / "half")
        resumed_model, opt, step = load_for_resume(tmp_path / "half")
        assert step == 5
        plan_rest = TrainPlan(pairs=pairs, total_steps=10, batch_size=8, seed=2,
                              checkpoint_every=5)
        train(resumed_model, plan_rest, toy_vocabulary(), tmp_path / "half",
              optimizer=opt, start_step=step)

        full = (tmp_path / "full" / "loss.csv").read_text()
        stitched = (tmp_path / "half" / "loss.csv").read_text()
        assert full == stitched

    def test_latest_checkpoint_selection(self, tmp_path):
        run = tmp_path / "run"
        (run / "checkpoints").mkdir(parents=True)
        for step in (3, 12, 7):
            (run / "checkpoints" / f"step-{step}.ckpt").write_bytes(b"")
        assert latest_checkpoint(run).name == "step-12.ckpt"
        with pytest.raises(TrainError, match="no checkpoints"):
            latest_checkpoint(tmp_path / "nothing")

    def test_batch_loss_copy_path(self):
        model = toy_model(copy_decoder=True, position="relative", radius=4)
        batch = make_batch([([7, 8, 9], [7, 8, EOS_ID])])
        loss = batch_loss(model, batch)
        assert np.isfinite(loss.item())
