"""Analysis and application layer.

* frequency-bucket cross-entropy comparison between two checkpoints,
* test-time cache adaptation of a baseline (pointer-free) model,
* N-best rescoring with optional cross-utterance state carry,
* word error rate via Levenshtein alignment.

N-best lists are JSON Lines: one object per utterance
``{"utt": id, "conv": id, "hyps": [{"words": [...], "score": f, "ac": f}]}``
with hypothesis 0 the first-pass best; file order defines conversation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import ConfigurationError, FrequencyBuckets, TokenStream, Vocabulary
from .model import CacheLanguageModel, Context
from .training import Checkpoint, CompatibilityError, _chunk_starts, batchify


# ---------------------------------------------------------------------------
# per-token scoring shared by the analyses
# ---------------------------------------------------------------------------

def per_token_scores(model: CacheLanguageModel, stream: TokenStream):
    """Per-target (stream_position, target_id, nll) arrays, single-stream eval."""
    mat = batchify(stream.ids, 1)
    state = model.initial_state(1)
    T = stream.chunk_len
    positions, targets, nlls = [], [], []
    with nc.no_grad():
        for start in _chunk_starts(mat.shape[1], T):
            inputs = mat[:, start : start + T]
            tgt = mat[:, start + 1 : start + T + 1]
            out = model.forward_chunk(inputs, tgt, state, mode="eval")
            state = out.state_out
            positions.append(np.arange(start + 1, start + T + 1))
            targets.append(tgt[0])
            nlls.append(-np.log(out.sigma[0].astype(np.float64)))
    return np.concatenate(positions), np.concatenate(targets), np.concatenate(nlls)


# ---------------------------------------------------------------------------
# frequency-bucket cross-entropy analysis
# ---------------------------------------------------------------------------

@dataclass
class BucketRow:
    bucket: int
    freq_lo: int
    freq_hi: int
    tokens: int
    ce_a: float
    ce_b: float

    @property
    def delta(self) -> float:
        return self.ce_a - self.ce_b


@dataclass
class BucketReport:
    rows: list[BucketRow]
    total_tokens: int
    overall_ce_a: float
    overall_ce_b: float

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bucket,freq_lo,freq_hi,tokens,ce_a,ce_b,delta\n")
            for r in self.rows:
                fh.write(
                    f"{r.bucket},{r.freq_lo},{r.freq_hi},{r.tokens},"
                    f"{r.ce_a:.10f},{r.ce_b:.10f},{r.delta:.10f}\n"
                )


def bucket_analysis(
    ckpt_a: Checkpoint,
    ckpt_b: Checkpoint,
    stream: TokenStream,
    buckets: FrequencyBuckets,
) -> BucketReport:
    """Mean per-bucket cross entropy of both models and the A-B delta."""
    if ckpt_a.vocab_hash != ckpt_b.vocab_hash:
        raise CompatibilityError(
            f"checkpoints disagree on vocabulary: {ckpt_a.vocab_hash} vs {ckpt_b.vocab_hash}"
        )
    if stream.vocab_hash and stream.vocab_hash != ckpt_a.vocab_hash:
        raise CompatibilityError(
            f"vocabulary mismatch: stream {stream.vocab_hash} vs checkpoint {ckpt_a.vocab_hash}"
        )
    _, targets_a, nll_a = per_token_scores(ckpt_a.to_model(), stream)
    _, targets_b, nll_b = per_token_scores(ckpt_b.to_model(), stream)
    if not np.array_equal(targets_a, targets_b):
        raise CompatibilityError("models scored different target sequences")

    n = buckets.n_buckets
    bucket_of = buckets.assignment[targets_a]
    counts = np.bincount(bucket_of, minlength=n)
    sums_a = np.bincount(bucket_of, weights=nll_a, minlength=n)
    sums_b = np.bincount(bucket_of, weights=nll_b, minlength=n)
    rows = []
    for b in range(n):
        lo, hi = buckets.freq_ranges[b]
        c = int(counts[b])
        rows.append(
            BucketRow(
                bucket=b,
                freq_lo=lo,
                freq_hi=hi,
                tokens=c,
                ce_a=float(sums_a[b] / c) if c else 0.0,
                ce_b=float(sums_b[b] / c) if c else 0.0,
            )
        )
    total = int(counts.sum())
    return BucketReport(
        rows=rows,
        total_tokens=total,
        overall_ce_a=float(nll_a.sum() / total),
        overall_ce_b=float(nll_b.sum() / total),
    )


# ---------------------------------------------------------------------------
# test-time neural cache adaptation of a baseline model
# ---------------------------------------------------------------------------

def neural_cache_adapt(
    ckpt: Checkpoint,
    stream: TokenStream,
    cache_len: int = 50,
    theta: float = 0.3,
    lam: float = 0.1,
) -> float:
    """Perplexity of a baseline model mixed with a hidden-state cache.

    At each step the cache holds the last ``cache_len`` (input token, hidden)
    pairs from strictly earlier steps; similarity weights exp(theta * h_t.h_i)
    build a unigram-style distribution that is interpolated with the model's
    with weight ``lam``. No parameters are updated. While the cache is still
    empty the model distribution is used unmixed.
    """
    if stream.vocab_hash and stream.vocab_hash != ckpt.vocab_hash:
        raise CompatibilityError(
            f"vocabulary mismatch: stream {stream.vocab_hash} vs checkpoint {ckpt.vocab_hash}"
        )
    model = ckpt.to_model()
    if model.L != 0:
        raise ConfigurationError("cache adaptation applies to a baseline (pointer-free) model")
    if cache_len < 1:
        raise ConfigurationError("cache_len must be >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError("lam must be in [0, 1]")

    V = model.vocab_size
    mat = batchify(stream.ids, 1)
    state = model.initial_state(1)
    T = stream.chunk_len
    keys: list[np.ndarray] = []  # hiddens of recent steps
    words: list[int] = []  # inputs of the same steps
    total = 0.0
    count = 0
    with nc.no_grad():
        for start in _chunk_starts(mat.shape[1], T):
            inputs = mat[:, start : start + T]
            targets = mat[0, start + 1 : start + T + 1]
            out = model.forward_chunk(inputs, None, state, mode="eval", return_probs=True)
            state = out.state_out
            p_lm = out.probs.data[0].astype(np.float64)  # (T, V)
            hid = out.hiddens.data[0].astype(np.float64)  # (T, H)
            for t in range(inputs.shape[1]):
                q = p_lm[t]
                if keys:
                    sims = theta * (np.stack(keys) @ hid[t])
                    w = np.exp(sims - sims.max())
                    p_c = np.zeros(V)
                    np.add.at(p_c, words, w)
                    p_c /= w.sum()
                    q = (1.0 - lam) * q + lam * p_c
                total += -math.log(q[targets[t]])
                count += 1
                keys.append(hid[t])
                words.append(int(inputs[0, t]))
                if len(keys) > cache_len:
                    keys.pop(0)
                    words.pop(0)
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# N-best rescoring
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    words: list[str]
    score: float
    ac: float | None = None


@dataclass
class NBestList:
    utt: str
    conv: str
    hyps: list[Hypothesis]

    def __post_init__(self):
        if not self.hyps:
            raise ConfigurationError(f"utterance {self.utt} has no hypotheses")
        best = max(h.score for h in self.hyps)
        if self.hyps[0].score < best:
            raise ConfigurationError(f"utterance {self.utt}: hypothesis 0 is not the first-pass best")


def read_nbest(path) -> list[NBestList]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            hyps = [
                Hypothesis(words=list(h["words"]), score=float(h["score"]), ac=h.get("ac"))
                for h in obj["hyps"]
            ]
            out.append(NBestList(utt=str(obj["utt"]), conv=str(obj["conv"]), hyps=hyps))
    if not out:
        raise ConfigurationError(f"no utterances found in {path}")
    return out


@dataclass
class UtteranceResult:
    utt: str
    conv: str
    chosen: int
    words: list[str]
    totals: list[float]


@dataclass
class RescoreResult:
    utterances: list[UtteranceResult]
    wer: float | None = None
    wer_detail: dict = field(default_factory=dict)


def _bos_context(model: CacheLanguageModel, vocab: Vocabulary) -> Context:
    # Sentences are separated by </s> in the training stream, so an utterance
    # boundary is exactly the post-</s> state.
    return model.consume(model.fresh_context(), vocab.eos_id)


def score_word_sequence(
    model: CacheLanguageModel, vocab: Vocabulary, ctx: Context, words: list[str]
) -> tuple[float, Context]:
    """Sum of log q(word) over words plus the closing </s>, advancing ctx."""
    ids = [vocab.encode_word(w) for w in words] + [vocab.eos_id]
    total = 0.0
    for wid in ids:
        total += math.log(model.target_prob(ctx, wid))
        ctx = model.consume(ctx, wid)
    return total, ctx


def rescore(
    ckpt: Checkpoint,
    nbest: list[NBestList],
    lm_weight: float,
    wip: float = 0.0,
    state_carry: bool = True,
    refs: list[list[str]] | None = None,
) -> RescoreResult:
    """Re-rank hypotheses with the model, optionally carrying state.

    total = first_pass_score + lm_weight * log q(words </s>) + wip * |words|.
    With state carry, each conversation's LM state starts from the end of the
    previous utterance's chosen hypothesis; otherwise every hypothesis is
    scored from a fresh post-boundary state.
    """
    model = ckpt.to_model()
    vocab = ckpt.vocab
    contexts: dict[str, Context] = {}
    results: list[UtteranceResult] = []
    for utterance in nbest:
        if state_carry:
            base = contexts.get(utterance.conv)
            if base is None:
                base = _bos_context(model, vocab)
        else:
            base = _bos_context(model, vocab)
        totals = []
        end_contexts = []
        for hyp in utterance.hyps:
            lp, end_ctx = score_word_sequence(model, vocab, base.copy(), hyp.words)
            totals.append(hyp.score + lm_weight * lp + wip * len(hyp.words))
            end_contexts.append(end_ctx)
        chosen = int(np.argmax(totals))
        if state_carry:
            contexts[utterance.conv] = end_contexts[chosen]
        results.append(
            UtteranceResult(
                utt=utterance.utt,
                conv=utterance.conv,
                chosen=chosen,
                words=list(utterance.hyps[chosen].words),
                totals=totals,
            )
        )
    wer = None
    detail: dict = {}
    if refs is not None:
        if len(refs) != len(results):
            raise ConfigurationError(f"{len(refs)} references for {len(results)} utterances")
        wer, detail = word_error_rate(refs, [r.words for r in results])
    return RescoreResult(utterances=results, wer=wer, wer_detail=detail)


# ---------------------------------------------------------------------------
# word error rate
# ---------------------------------------------------------------------------

def _align_counts(ref: list[str], hyp: list[str]) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of the minimum-cost alignment."""
    R, H = len(ref), len(hyp)
    cost = np.zeros((R + 1, H + 1), dtype=np.int64)
    cost[:, 0] = np.arange(R + 1)
    cost[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            same = ref[i - 1] == hyp[j - 1]
            cost[i, j] = min(
                cost[i - 1, j - 1] + (0 if same else 1),
                cost[i - 1, j] + 1,
                cost[i, j - 1] + 1,
            )
    subs = dels = ins = 0
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins


def word_error_rate(refs: list[list[str]], hyps: list[list[str]]) -> tuple[float, dict]:
    """Aggregate WER = (S + D + I) / reference length over utterance pairs."""
    if len(refs) != len(hyps):
        raise ConfigurationError("refs and hyps differ in length")
    subs = dels = ins = ref_len = 0
    for ref, hyp in zip(refs, hyps):
        s, d, i = _align_counts(ref, hyp)
        subs += s
        dels += d
        ins += i
        ref_len += len(ref)
    if ref_len == 0:
        raise ConfigurationError("empty reference set")
    wer = (subs + dels + ins) / ref_len
    return wer, {"sub": subs, "del": dels, "ins": ins, "ref_len": ref_len}
