"""Training loop, perplexity evaluation, checkpoint container."""

import math

import numpy as np
import pytest

from cachelm import numcore as nc
from cachelm.corpus import TokenStream, build_vocab, encode_stream
from cachelm.numcore import RngState
from cachelm.synthetic import repeated_sentence_lines
from cachelm.training import (
    Checkpoint,
    CompatibilityError,
    TrainConfig,
    batchify,
    build_model,
    evaluate_nll,
    evaluate_perplexity,
    train,
)

BCFG = dict(layers=1, hidden=12, embed=12, dropout=0.0)
PCFG = dict(enabled=True, window=6, memory_augmentation=True, exclude=[])
BASE_PCFG = dict(enabled=False, window=0, memory_augmentation=False, exclude=[])


def tiny_corpus(seed=0, n_lines=120):
    gen = RngState(seed).generator()
    lines = []
    for _ in range(n_lines):
        words = [f"w{int(i)}" for i in gen.integers(0, 15, size=9)]
        r = f"r{int(gen.integers(0, 8))}"
        words[2] = r
        words[6] = r
        lines.append(" ".join(words))
    return lines


@pytest.fixture(scope="module")
def corpus():
    lines = tiny_corpus()
    vocab = build_vocab(lines, min_count=1)
    train_stream = encode_stream(vocab, lines[:100], 6)
    dev_stream = encode_stream(vocab, lines[100:], 6)
    return vocab, train_stream, dev_stream


def tcfg(**kw):
    base = dict(
        lr0=1.0, lr_decay=0.5, clip_norm=5.0, epochs=3,
        batch_streams=4, chunk_len=6, seed=11, precision=64,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_lr_zero_keeps_initial_dev_perplexity(self, corpus):
        vocab, ts, ds = corpus
        ck = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(lr0=0.0, epochs=2))
        model = build_model(vocab, "lstm", BCFG, PCFG, RngState(tcfg().seed).child("init"), np.float64)
        init_ppl = evaluate_perplexity(model, ds, ck.train_cfg["dev_eval_streams"])
        assert ck.dev_ppl == pytest.approx(init_ppl, abs=1e-12)
        assert ck.epoch == 0

    def test_same_seed_bit_identical_checkpoints(self, corpus):
        vocab, ts, ds = corpus
        a = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg())
        b = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg())
        assert a.dev_ppl == b.dev_ppl
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name

    def test_different_seed_differs(self, corpus):
        vocab, ts, ds = corpus
        a = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg())
        b = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(seed=12))
        assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)

    def test_first_step_reduces_loss_on_fixed_batch(self, corpus):
        vocab, _, _ = corpus
        model = build_model(vocab, "lstm", BCFG, PCFG, RngState(3), np.float64)
        gen = RngState(4).generator()
        inputs = gen.integers(0, vocab.size, size=(4, 6))
        targets = gen.integers(0, vocab.size, size=(4, 6))
        before = model.forward_chunk(inputs, targets, None, mode="train")
        before.loss.backward()
        nc.sgd_step(model.parameters(), lr=1e-3, clip_norm=5.0)
        after = model.forward_chunk(inputs, targets, None, mode="train")
        assert float(after.loss.item()) < float(before.loss.item())

    def test_memorizes_repeated_sentence(self):
        # capacity probe: one fixed 50-token sentence repeated; recorded
        # first epoch under 1.1 train perplexity: 22
        lines = repeated_sentence_lines(sentence_tokens=50, copies=40)
        vocab = build_vocab(lines, min_count=1)
        stream = encode_stream(vocab, lines, 25)
        cfg = tcfg(epochs=30, batch_streams=4, chunk_len=25, seed=5)
        ck = train(vocab, stream, stream, "lstm", dict(layers=1, hidden=32, embed=32, dropout=0.0), BASE_PCFG, cfg)
        assert evaluate_perplexity(ck, stream) < 1.1

    def test_divergence_returns_last_good_checkpoint(self, corpus):
        vocab, ts, ds = corpus
        events = []
        ck = train(
            vocab, ts, ds, "lstm", BCFG, PCFG,
            tcfg(lr0=1e18, clip_norm=1e22, epochs=3, precision=32),
            log=lambda r: events.append(r),
        )
        assert any("event" in r for r in events)
        assert ck.epoch == 0  # only the init snapshot was good

    def test_carried_state_is_gradient_detached(self, corpus):
        vocab, _, _ = corpus
        model = build_model(vocab, "lstm", BCFG, PCFG, RngState(5), np.float64)
        gen = RngState(6).generator()
        ids = gen.integers(0, vocab.size, size=(2, 13))
        out1 = model.forward_chunk(ids[:, :6], ids[:, 1:7], None, mode="train")
        out1.loss.backward()
        grads_chunk1 = {p.name: p.value.grad.copy() for p in model.parameters()}
        for p in model.parameters():
            p.zero_grad()
        out2 = model.forward_chunk(ids[:, 6:12], ids[:, 7:13], out1.state_out, mode="train")
        # chunk-1 graph must be unreachable from chunk-2's loss: backward
        # succeeds (chunk-1 tape is already freed) and touches only live nodes
        out2.loss.backward()
        assert all(p.value.grad is not None for p in model.parameters())
        # carried state is a plain array, not a tape node
        assert isinstance(out1.state_out[0][0], np.ndarray)
        del grads_chunk1


class TestEvaluate:
    def test_uniform_probabilities_give_vocab_sized_perplexity(self, corpus):
        vocab, _, _ = corpus
        model = build_model(vocab, "lstm", BCFG, BASE_PCFG, RngState(7), np.float64)
        for p in model.parameters():
            p.value.data[:] = 0.0
        gen = RngState(8).generator()
        stream = TokenStream(gen.integers(0, vocab.size, size=200), chunk_len=6)
        # zero weights -> zero logits -> exactly uniform distribution
        assert evaluate_perplexity(model, stream) == pytest.approx(vocab.size, rel=1e-12)

    def test_batched_equals_pooled_single_segments(self, corpus):
        vocab, ts, _ = corpus
        model = build_model(vocab, "lstm", BCFG, PCFG, RngState(9), np.float64)
        B = 4
        mat = batchify(ts.ids, B)
        batched_nll, batched_count = evaluate_nll(model, ts, batch_streams=B)
        pooled_nll, pooled_count = 0.0, 0
        for row in mat:
            nll, count = evaluate_nll(model, TokenStream(row, ts.chunk_len), 1)
            pooled_nll += nll
            pooled_count += count
        assert pooled_count == batched_count
        ppl_a = math.exp(batched_nll / batched_count)
        ppl_b = math.exp(pooled_nll / pooled_count)
        assert ppl_a == pytest.approx(ppl_b, abs=1e-6)

    def test_perplexity_is_exp_of_mean_loss(self, corpus):
        vocab, ts, _ = corpus
        model = build_model(vocab, "lstm", BCFG, PCFG, RngState(10), np.float64)
        mat = batchify(ts.ids, 1)
        total, count = 0.0, 0
        state = model.initial_state(1)
        for start in range(0, ((mat.shape[1] - 1) // 6) * 6, 6):
            with nc.no_grad():
                out = model.forward_chunk(mat[:, start : start + 6], mat[:, start + 1 : start + 7], state)
            state = out.state_out
            total += float(out.loss.item()) * out.sigma.size
            count += out.sigma.size
        assert math.exp(total / count) == pytest.approx(evaluate_perplexity(model, ts), rel=1e-9)

    def test_vocab_hash_mismatch_rejected(self, corpus):
        vocab, ts, ds = corpus
        ck = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(epochs=1))
        other_vocab = build_vocab(["completely different words here"], min_count=1)
        alien = encode_stream(other_vocab, ["different words"], 6)
        with pytest.raises(CompatibilityError, match=other_vocab.content_hash()):
            evaluate_perplexity(ck, alien)


class TestCheckpoint:
    def test_save_load_round_trip(self, corpus, tmp_path):
        vocab, ts, ds = corpus
        ck = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(epochs=2))
        path = tmp_path / "model.ckpt"
        ck.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.vocab_hash == ck.vocab_hash
        assert loaded.epoch == ck.epoch
        for name in ck.params:
            assert np.array_equal(loaded.params[name], ck.params[name])

    def test_reload_reproduces_dev_perplexity(self, corpus, tmp_path):
        vocab, ts, ds = corpus
        ck = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(epochs=2))
        path = tmp_path / "model.ckpt"
        ck.save(path)
        loaded = Checkpoint.load(path)
        ppl = evaluate_perplexity(loaded, ds, batch_streams=loaded.train_cfg["dev_eval_streams"])
        assert ppl == pytest.approx(ck.dev_ppl, abs=1e-6)

    def test_save_is_deterministic(self, corpus, tmp_path):
        vocab, ts, ds = corpus
        ck = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(epochs=1))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ck.save(p1)
        ck.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_float32_training_round_trips(self, corpus, tmp_path):
        vocab, ts, ds = corpus
        ck = train(vocab, ts, ds, "lstm", BCFG, PCFG, tcfg(epochs=1, precision=32))
        path = tmp_path / "model32.ckpt"
        ck.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.params["embedding"].dtype == np.float32
        ppl = evaluate_perplexity(loaded, ds, batch_streams=loaded.train_cfg["dev_eval_streams"])
        assert ppl == pytest.approx(ck.dev_ppl, abs=1e-6)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(Exception):
            Checkpoint.load(bad)


class TestTrainConfig:
    def test_precision_validated(self):
        with pytest.raises(Exception):
            TrainConfig(precision=16)

    def test_batchify_too_short(self):
        with pytest.raises(Exception):
            batchify(np.arange(5), 4)
