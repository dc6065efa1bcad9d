"""Invariant and gradient suite behind ``cachelm selftest``.

Each check is a small deterministic property with an independent oracle
(finite differences, hand-computed values, brute-force recomputation). The
acceptance tests reuse these entry points so the CLI and the test suite
cannot drift apart.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import numcore as nc
from . import pointer as ptr
from .backbone import LstmConfig, TransformerConfig
from .corpus import TokenStream
from .model import CacheLanguageModel, PointerConfig
from .numcore import RngState, Tensor
from .training import evaluate_perplexity


# ---------------------------------------------------------------------------
# toy model helpers
# ---------------------------------------------------------------------------

def toy_model(
    kind: str,
    V: int = 20,
    H: int = 8,
    L: int = 5,
    layers: int = 2,
    heads: int = 2,
    seed: int = 11,
    enabled: bool = True,
    memory_augmentation: bool = True,
    dropout: float = 0.0,
    max_len: int = 64,
) -> CacheLanguageModel:
    if kind == "lstm":
        bcfg = LstmConfig(layers=layers, hidden=H, embed=H, dropout=dropout)
    else:
        bcfg = TransformerConfig(
            layers=layers, d_model=H, heads=heads, ffn_mult=2, dropout=dropout, max_len=max_len
        )
    pcfg = PointerConfig(enabled=enabled, window=L, memory_augmentation=memory_augmentation)
    return CacheLanguageModel(V, kind, bcfg, pcfg, RngState(seed), dtype=np.float64)


def random_state(L: int, gen: np.random.Generator, vocab_size: int, n_valid: int | None = None) -> ptr.PointerState:
    state = ptr.PointerState(L)
    if L == 0:
        return state
    k = int(gen.integers(0, L + 1)) if n_valid is None else n_valid
    for j in range(L - k, L):
        state.tokens[j] = int(gen.integers(0, vocab_size))
        state.m[j] = float(gen.normal())
        state.valid[j] = True
    return state


_GRAD_PROBE_SEEDS = {"lstm": 26, "transformer": 18}


def gradient_suite(
    kind: str, V: int = 20, H: int = 8, L: int = 5, T: int = 6, seed: int | None = None
) -> float:
    """Max relative error of tape gradients vs central differences for the
    full pipeline: backbone -> pointer logits -> memory augmentation ->
    softmax -> at-least-one-hot loss. 64-bit, full coordinate coverage.

    Probes at a generic parameter point (all parameters uniform in +-0.5)
    rather than the training init: zero biases and the forget-gate offset
    leave coordinates whose true gradient sits at the central-difference
    roundoff floor, where the quotient is pure noise for any implementation.
    """
    seed = _GRAD_PROBE_SEEDS[kind] if seed is None else seed
    model = toy_model(kind, V=V, H=H, L=L, seed=seed, max_len=T)
    gen = RngState(seed).child("probe").generator()
    for p in model.parameters():
        p.value.data = gen.uniform(-0.5, 0.5, size=p.value.shape)
    inputs = gen.integers(0, V, size=(2, T))
    # Force some in-window repetitions so pointer supervision is exercised.
    inputs[:, T - 1] = inputs[:, 1]
    targets = np.roll(inputs, -1, axis=1)
    targets[:, -1] = inputs[:, 0]

    def loss_fn():
        out = model.forward_chunk(inputs, targets, None, mode="train", generator=None)
        return out.loss

    return nc.grad_check(loss_fn, model.parameters(), eps=1e-4)


# ---------------------------------------------------------------------------
# individual checks (raise AssertionError on failure)
# ---------------------------------------------------------------------------

def check_softmax_sums_to_one():
    gen = RngState(1).generator()
    for n in (1, 3, 100, 10**6):
        y = nc.softmax(Tensor(gen.normal(size=n) * 10)).data
        assert abs(y.sum() - 1.0) < 1e-6, f"softmax sum off at n={n}"


def check_softmax_shift_invariance():
    gen = RngState(2).generator()
    x = gen.normal(size=64)
    for c in (-1e3, -1.5, 0.0, 2.5, 1e3):
        a = nc.softmax(Tensor(x)).data
        b = nc.softmax(Tensor(x + c)).data
        assert np.abs(a - b).max() < 1e-9, f"shift invariance broken at c={c}"


def check_softmax_masking():
    y = nc.softmax(Tensor(np.array([0.0, nc.NEG_INF, 0.0]))).data
    assert y[1] == 0.0 and abs(y[0] - 0.5) < 1e-12 and abs(y[2] - 0.5) < 1e-12
    try:
        nc.softmax(Tensor(np.array([nc.NEG_INF, nc.NEG_INF])))
    except nc.InvalidDistributionError:
        return
    raise AssertionError("fully masked softmax did not raise")


def check_matmul_oracle():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    expect = np.array([[19.0, 22.0], [43.0, 50.0]])
    assert np.array_equal(nc.matmul(a, b).data, expect)


def check_sgd_contracts():
    p = nc.Parameter("p", np.array([1.0]))
    p.value.grad = np.array([0.5])
    nc.sgd_step([p], lr=0.1, clip_norm=10.0)
    assert abs(p.value.data[0] - 0.95) < 1e-15
    # lr = 0 leaves values bit-identical
    q = nc.Parameter("q", np.array([1.2345678901234567]))
    before = q.value.data.copy()
    q.value.grad = np.array([123.456])
    nc.sgd_step([q], lr=0.0, clip_norm=1.0)
    assert np.array_equal(q.value.data, before)
    # norm-20 gradients with clip 5 scale by 0.25 (scalar oracle: hypot)
    r = nc.Parameter("r", np.zeros(2))
    r.value.grad = np.array([12.0, 16.0])
    assert math.hypot(12.0, 16.0) == 20.0
    norm = nc.sgd_step([r], lr=1.0, clip_norm=5.0)
    assert abs(norm - 20.0) < 1e-12
    assert np.allclose(r.value.data, -np.array([3.0, 4.0]), atol=1e-15)


def check_gradients_lstm():
    err = gradient_suite("lstm", V=20, H=8, L=5, T=6)
    assert err < 1e-4, f"lstm pipeline gradient error {err:.3e}"


def check_gradients_transformer():
    err = gradient_suite("transformer", V=20, H=8, L=5, T=6)
    assert err < 1e-4, f"transformer pipeline gradient error {err:.3e}"


def check_parameter_count(n_configs: int = 10, seed: int = 5):
    gen = RngState(seed).generator()
    for _ in range(n_configs):
        V = int(gen.integers(8, 60))
        H = int(gen.integers(4, 24))
        L = int(gen.integers(1, 40))
        withp = toy_model("lstm", V=V, H=H, L=L, layers=1)
        without = toy_model("lstm", V=V, H=H, L=L, layers=1, enabled=False)
        diff = withp.parameter_count() - without.parameter_count()
        assert diff == (L + 1) * H, f"param diff {diff} != (L+1)H for V={V} H={H} L={L}"


def check_reduction_to_baseline(steps: int = 1000, seed: int = 9):
    V, H, T = 20, 8, 10
    pointer_model = toy_model("lstm", V=V, H=H, L=0, seed=seed, enabled=True)
    base_model = toy_model("lstm", V=V, H=H, L=0, seed=seed, enabled=False)
    shared = {k: v for k, v in pointer_model.parameter_table().items() if k != "head.w_m"}
    base_model.load_parameters(shared)
    gen = RngState(seed).child("stream").generator()
    ids = gen.integers(0, V, size=steps + 1)
    n_chunks = steps // T
    state_a = pointer_model.initial_state(1)
    state_b = base_model.initial_state(1)
    for c in range(n_chunks):
        inp = ids[None, c * T : (c + 1) * T]
        tgt = ids[None, c * T + 1 : (c + 1) * T + 1]
        with nc.no_grad():
            out_a = pointer_model.forward_chunk(inp, tgt, state_a, return_probs=True)
            out_b = base_model.forward_chunk(inp, tgt, state_b, return_probs=True)
        state_a, state_b = out_a.state_out, out_b.state_out
        assert np.array_equal(out_a.sigma, out_b.sigma), "per-token losses differ"
        assert np.array_equal(out_a.probs.data, out_b.probs.data), "distributions differ"


def check_normalization(cases: int = 10_000, seed: int = 13):
    V, L = 7, 4
    gen = RngState(seed).generator()
    for i in range(cases):
        if i == 0:
            n_valid = 0  # fully masked pointer
        elif i == 1:
            n_valid = L  # fully valid window
        else:
            n_valid = None
        state = random_state(L, gen, V, n_valid)
        z = gen.normal(size=V + L) * 3.0
        z[V:][~state.valid] = nc.NEG_INF
        y = ptr.stable_softmax(z)
        assert abs(y.sum() - 1.0) < 1e-6
        q = ptr.aggregate_word_probs(y, state)
        assert abs(q.sum() - 1.0) < 1e-6
        assert (q >= 0).all()


def check_perplexity_identity(seed: int = 17):
    model = toy_model("lstm", V=12, H=6, L=4, seed=seed)
    gen = RngState(seed).child("stream").generator()
    stream = TokenStream(gen.integers(0, 12, size=301), chunk_len=6)
    nll = 0.0
    count = 0
    state = model.initial_state(1)
    mat = stream.ids[None, :]
    for start in range(0, ((len(stream.ids) - 1) // 6) * 6, 6):
        with nc.no_grad():
            out = model.forward_chunk(
                mat[:, start : start + 6], mat[:, start + 1 : start + 7], state
            )
        state = out.state_out
        nll += float(out.loss.item()) * out.sigma.size
        count += out.sigma.size
    ppl_from_loss = math.exp(nll / count)
    ppl_eval = evaluate_perplexity(model, stream)
    assert abs(ppl_from_loss - ppl_eval) / ppl_eval < 1e-9

    # Aggregated word probabilities are the same dot product, position by
    # position: replay the first chunk sequentially.
    ctx = model.fresh_context()
    ctx = model.consume(ctx, int(stream.ids[0]))
    for t in range(1, 7):
        target = int(stream.ids[t])
        q = model.word_probs(ctx)[target]
        sv_prob = model.target_prob(ctx, target)
        assert abs(q - sv_prob) < 1e-12
        ctx = model.consume(ctx, target)


def check_monotone_memory(seed: int = 19):
    V, H, L = 9, 5, 3
    model = toy_model("lstm", V=V, H=H, L=L, seed=seed)
    gen = RngState(seed).generator()
    h = gen.normal(size=H)
    state = random_state(L, gen, V, n_valid=2)
    y0 = ptr.stable_softmax(ptr.pointer_logits(h, model.head, state))
    j = L - 1  # valid slot
    bumped = state.copy()
    bumped.m[j] += 0.7
    y1 = ptr.stable_softmax(ptr.pointer_logits(h, model.head, bumped))
    assert y1[V + j] > y0[V + j], "bumped slot did not gain mass"
    unmasked = y0 > 0
    unmasked[V + j] = False
    assert (y1[unmasked] < y0[unmasked]).all(), "other unmasked slots did not lose mass"


def check_lstm_state_carry(seed: int = 23):
    model = toy_model("lstm", V=10, H=6, L=0, seed=seed, enabled=False)
    gen = RngState(seed).generator()
    ids = gen.integers(0, 10, size=(1, 8))
    with nc.no_grad():
        full, _ = model.backbone.forward(ids, None, "eval")
        h1, st = model.backbone.forward(ids[:, :4], None, "eval")
        h2, _ = model.backbone.forward(ids[:, 4:], st, "eval")
    glued = np.concatenate([h1.data, h2.data], axis=1)
    assert np.abs(glued - full.data).max() <= 1e-9


def check_transformer_causality(seed: int = 29):
    model = toy_model("transformer", V=10, H=8, L=0, layers=2, seed=seed, enabled=False)
    gen = RngState(seed).generator()
    ids = gen.integers(0, 10, size=(1, 7))
    with nc.no_grad():
        base, _ = model.backbone.forward(ids, None, "eval")
    for j in range(1, 7):
        mutated = ids.copy()
        mutated[0, j] = (mutated[0, j] + 1) % 10
        with nc.no_grad():
            out, _ = model.backbone.forward(mutated, None, "eval")
        assert np.array_equal(out.data[0, :j], base.data[0, :j]), f"position < {j} saw the future"


CHECKS = [
    ("softmax_sums_to_one", check_softmax_sums_to_one),
    ("softmax_shift_invariance", check_softmax_shift_invariance),
    ("softmax_masking", check_softmax_masking),
    ("matmul_oracle", check_matmul_oracle),
    ("sgd_contracts", check_sgd_contracts),
    ("gradients_lstm_pipeline", check_gradients_lstm),
    ("gradients_transformer_pipeline", check_gradients_transformer),
    ("parameter_count", check_parameter_count),
    ("reduction_to_baseline", check_reduction_to_baseline),
    ("normalization", check_normalization),
    ("perplexity_identity", check_perplexity_identity),
    ("monotone_memory_effect", check_monotone_memory),
    ("lstm_state_carry", check_lstm_state_carry),
    ("transformer_causality", check_transformer_causality),
]


def run_selftest(emit=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.monotonic()
        try:
            fn()
        except Exception as err:  # noqa: BLE001 - report and continue
            ok = False
            emit(f"FAIL {name} ({err})")
            continue
        emit(f"PASS {name} ({time.monotonic() - t0:.2f}s)")
    return ok
