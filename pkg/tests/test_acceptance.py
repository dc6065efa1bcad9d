"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines; the heavyweight synthetic-corpus training (criteria 6 and 7) runs
once as a module fixture and takes a few minutes.
"""

import math
import time

import numpy as np
import pytest

from cachelm import evaluation as ev
from cachelm import numcore as nc
from cachelm import pointer as ptr_ops
from cachelm import selftest as st
from cachelm.corpus import TokenStream, build_buckets, build_vocab, encode_stream
from cachelm.evaluation import per_token_scores
from cachelm.numcore import RngState
from cachelm.synthetic import self_trigger_corpus
from cachelm.training import TrainConfig, evaluate_perplexity, train


def report(criterion: int, ok: bool, detail: str = "") -> None:
    print(f"[acceptance] criterion={criterion} status={'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


# ---------------------------------------------------------------------------
# heavyweight fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synth_trained():
    """Matched baseline and pointer LSTMs on the self-trigger corpus."""
    t0 = time.monotonic()
    corpus = self_trigger_corpus(
        RngState(42), n_common=200, n_rare=800,
        train_tokens=100_000, dev_tokens=10_000, test_tokens=20_000,
    )
    vocab = build_vocab(corpus.train_lines, min_count=1)
    ts = encode_stream(vocab, corpus.train_lines, 64)
    ds = encode_stream(vocab, corpus.dev_lines, 64)
    xs = encode_stream(vocab, corpus.test_lines, 64)
    bcfg = dict(layers=2, hidden=128, embed=128, dropout=0.1)
    tcfg = TrainConfig(
        lr0=1.0, lr_decay=0.5, clip_norm=5.0, epochs=20,
        batch_streams=20, chunk_len=64, seed=7, precision=32,
    )
    out = {"corpus": corpus, "vocab": vocab, "test_stream": xs}
    for name, pcfg in (
        ("baseline", dict(enabled=False, window=64, memory_augmentation=False, exclude=[])),
        ("pointer", dict(enabled=True, window=64, memory_augmentation=True, exclude=[])),
    ):
        ck = train(vocab, ts, ds, "lstm", bcfg, pcfg, tcfg)
        pos, tgt, nll = per_token_scores(ck.to_model(), xs)
        out[name] = {
            "ckpt": ck,
            "test_ppl": evaluate_perplexity(ck, xs),
            "positions": pos,
            "nll": nll,
        }
    out["seconds"] = time.monotonic() - t0
    return out


@pytest.fixture(scope="module")
def toy_rescoring():
    """Small pointer LSTM trained on an always-repeat corpus, for rescoring."""
    gen = RngState(100).generator()
    lines = []
    for _ in range(1500):
        words = [f"c{int(i):02d}" for i in gen.integers(0, 20, size=11)]
        rare = f"r{int(gen.integers(0, 300)):03d}"
        i0 = int(gen.integers(0, 5))
        words[i0] = rare
        words[i0 + int(gen.integers(2, 6))] = rare
        lines.append(" ".join(words))
    vocab = build_vocab(lines, min_count=1)
    ts = encode_stream(vocab, lines[:1300], 16)
    ds = encode_stream(vocab, lines[1300:], 16)
    tcfg = TrainConfig(lr0=1.0, lr_decay=0.5, epochs=25, batch_streams=8, chunk_len=16, seed=13, precision=64)
    ck = train(
        vocab, ts, ds, "lstm",
        dict(layers=1, hidden=32, embed=32, dropout=0.0),
        dict(enabled=True, window=16, memory_augmentation=True, exclude=[]),
        tcfg,
    )
    return ck


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    t0 = time.monotonic()
    err_lstm = st.gradient_suite("lstm", V=20, H=8, L=5, T=6)
    err_tf = st.gradient_suite("transformer", V=20, H=8, L=5, T=6)
    elapsed = time.monotonic() - t0
    ok = err_lstm < 1e-4 and err_tf < 1e-4 and elapsed < 60
    report(1, ok, f"lstm={err_lstm:.2e} transformer={err_tf:.2e} sec={elapsed:.1f}")


def test_criterion_02_reduction_to_baseline():
    try:
        st.check_reduction_to_baseline(steps=1000)
    except AssertionError as e:
        report(2, False, str(e))
    report(2, True, "1000 steps bit-identical at L=0")


def test_criterion_03_parameter_count():
    gen = RngState(55).generator()
    for _ in range(10):
        V = int(gen.integers(8, 120))
        H = int(gen.integers(4, 48))
        L = int(gen.integers(1, 64))
        withp = st.toy_model("lstm", V=V, H=H, L=L, layers=1)
        without = st.toy_model("lstm", V=V, H=H, L=L, layers=1, enabled=False)
        diff = withp.parameter_count() - without.parameter_count()
        if diff != (L + 1) * H:
            report(3, False, f"V={V} H={H} L={L}: diff {diff} != {(L + 1) * H}")
    report(3, True, "10 random configurations add exactly (L+1)*H")


def test_criterion_04_normalization():
    V, L = 7, 4
    gen = RngState(13).generator()
    worst = 0.0
    for i in range(10_000):
        n_valid = 0 if i == 0 else (L if i == 1 else None)
        state = st.random_state(L, gen, V, n_valid)
        z = gen.normal(size=V + L) * 3.0
        z[V:][~state.valid] = nc.NEG_INF
        y = ptr_ops.stable_softmax(z)
        q = ptr_ops.aggregate_word_probs(y, state)
        worst = max(worst, abs(y.sum() - 1.0), abs(q.sum() - 1.0))
    report(4, worst < 1e-6, f"worst deviation {worst:.2e} over 10000 cases")


def test_criterion_05_perplexity_identity():
    model = st.toy_model("lstm", V=15, H=8, L=5, seed=77)
    gen = RngState(78).generator()
    stream = TokenStream(gen.integers(0, 15, size=601), chunk_len=8)
    total, count = 0.0, 0
    state = model.initial_state(1)
    mat = stream.ids[None, :]
    for start in range(0, ((len(stream.ids) - 1) // 8) * 8, 8):
        with nc.no_grad():
            out = model.forward_chunk(mat[:, start : start + 8], mat[:, start + 1 : start + 9], state)
        state = out.state_out
        total += float(out.loss.item()) * out.sigma.size
        count += out.sigma.size
    lhs = math.exp(total / count)
    rhs = evaluate_perplexity(model, stream)
    rel = abs(lhs - rhs) / rhs

    # the evaluation probability of a target is the same dot product used in
    # training: replay one chunk through the aggregation route
    ctx = model.consume(model.fresh_context(), int(stream.ids[0]))
    agg_ok = True
    for t in range(1, 9):
        target = int(stream.ids[t])
        q = model.word_probs(ctx)[target]
        if abs(q - model.target_prob(ctx, target)) > 1e-12:
            agg_ok = False
        ctx = model.consume(ctx, target)
    report(5, rel < 1e-9 and agg_ok, f"exp(mean loss) vs evaluate: rel={rel:.2e}")


def test_criterion_06_synthetic_self_trigger(synth_trained):
    base = synth_trained["baseline"]
    ptr = synth_trained["pointer"]
    second = {int(p) for p in synth_trained["corpus"].test_second_positions}
    probs = {}
    for name, data in (("baseline", base), ("pointer", ptr)):
        mask = np.isin(data["positions"], list(second))
        probs[name] = float(np.exp(-data["nll"][mask]).mean())
    ratio = probs["pointer"] / probs["baseline"]
    ok = (
        ptr["test_ppl"] < base["test_ppl"]
        and ratio >= 2.0
        and synth_trained["seconds"] < 1800
    )
    report(
        6, ok,
        f"ppl {base['test_ppl']:.1f} -> {ptr['test_ppl']:.1f}; "
        f"second-occurrence prob {probs['baseline']:.2e} -> {probs['pointer']:.2e} "
        f"(x{ratio:.1f}); sec={synth_trained['seconds']:.0f}",
    )


def test_criterion_07_bucket_trend(synth_trained):
    vocab = synth_trained["vocab"]
    xs = synth_trained["test_stream"]
    base_ck = synth_trained["baseline"]["ckpt"]
    ptr_ck = synth_trained["pointer"]["ckpt"]
    buckets = build_buckets(vocab, xs.ids, 10)
    rep = ev.bucket_analysis(base_ck, ptr_ck, xs, buckets)
    deltas = [r.delta for r in rep.rows]
    argmax = int(np.argmax(deltas))
    weighted = sum(r.ce_a * r.tokens for r in rep.rows) / rep.total_tokens
    identity = abs(weighted - math.log(synth_trained["baseline"]["test_ppl"]))
    ok = argmax == 9 and identity < 1e-9
    report(7, ok, f"largest delta {max(deltas):+.3f} in bucket {argmax} (rarest=9); identity={identity:.1e}")


def test_criterion_08_rescoring_state_carry(toy_rescoring):
    t0 = time.monotonic()
    ck = toy_rescoring
    rare, confusable = "r007", "r205"

    def nbest():
        return [
            ev.NBestList(utt="u1", conv="conv0", hyps=[
                ev.Hypothesis(words=["c05", rare, "c06"], score=0.0),
            ]),
            ev.NBestList(utt="u2", conv="conv0", hyps=[
                ev.Hypothesis(words=["c03", confusable, "c04"], score=0.0),
                ev.Hypothesis(words=["c03", rare, "c04"], score=-0.8),
            ]),
        ]

    carry = ev.rescore(ck, nbest(), lm_weight=1.0, state_carry=True)
    fresh = ev.rescore(ck, nbest(), lm_weight=1.0, state_carry=False)
    lm0 = ev.rescore(ck, nbest(), lm_weight=0.0, state_carry=True)
    elapsed = time.monotonic() - t0
    ok = (
        carry.utterances[1].chosen == 1
        and fresh.utterances[1].chosen == 0
        and all(u.chosen == 0 for u in lm0.utterances)
        and elapsed < 60
    )
    m_carry = carry.utterances[1].totals[1] - carry.utterances[1].totals[0]
    m_fresh = fresh.utterances[1].totals[1] - fresh.utterances[1].totals[0]
    report(8, ok, f"carry margin {m_carry:+.2f}, fresh margin {m_fresh:+.2f}, sec={elapsed:.1f}")


def test_criterion_09_cache_degeneracies():
    gen = RngState(900).generator()
    lines = []
    for _ in range(80):
        words = [f"w{int(i)}" for i in gen.integers(0, 10, size=9)]
        lines.append(" ".join(words))
    vocab = build_vocab(lines, min_count=1)
    ts = encode_stream(vocab, lines[:60], 8)
    ds = encode_stream(vocab, lines[60:], 8)
    tcfg = TrainConfig(lr0=1.0, epochs=2, batch_streams=4, chunk_len=8, seed=19, precision=64)
    base = train(
        vocab, ts, ds, "lstm",
        dict(layers=1, hidden=16, embed=16, dropout=0.0),
        dict(enabled=False, window=0, memory_augmentation=False, exclude=[]),
        tcfg,
    )
    stream = TokenStream(ds.ids[:501], 8, ds.vocab_hash)

    lam0 = ev.neural_cache_adapt(base, stream, cache_len=12, theta=0.3, lam=0.0)
    plain = evaluate_perplexity(base, stream)
    rel_lam0 = abs(lam0 - plain) / plain

    cache_len, lam = 12, 0.3
    got = ev.neural_cache_adapt(base, stream, cache_len=cache_len, theta=0.0, lam=lam)
    # brute-force window-unigram oracle
    model = base.to_model()
    from cachelm.training import _chunk_starts, batchify

    mat = batchify(stream.ids, 1)
    state = model.initial_state(1)
    total, count = 0.0, 0
    consumed: list[int] = []
    for start in _chunk_starts(mat.shape[1], stream.chunk_len):
        inputs = mat[:, start : start + stream.chunk_len]
        targets = mat[0, start + 1 : start + stream.chunk_len + 1]
        with nc.no_grad():
            out = model.forward_chunk(inputs, None, state, return_probs=True)
        state = out.state_out
        for t in range(inputs.shape[1]):
            q = out.probs.data[0, t].astype(np.float64)
            window = consumed[-cache_len:]
            if window:
                p_c = np.bincount(window, minlength=vocab.size) / len(window)
                q = (1 - lam) * q + lam * p_c
            total += -math.log(q[targets[t]])
            count += 1
            consumed.append(int(inputs[0, t]))
    oracle = math.exp(total / count)
    rel_theta0 = abs(got - oracle) / oracle
    ok = rel_lam0 < 1e-9 and rel_theta0 < 1e-9
    report(9, ok, f"lam0 rel={rel_lam0:.2e}, theta0-vs-oracle rel={rel_theta0:.2e}")


@pytest.mark.skip(
    reason="optional extended run, excluded from CI: full PTB (2x650 LSTM, dropout 0.5, "
    "L=chunk_len=100) targets test ppl ~72 baseline / ~68 pointer (+-3); hours-scale on CPU "
    "and requires the PTB corpus files. See README for the exact commands."
)
def test_criterion_10_full_ptb_extended_run():
    pass
