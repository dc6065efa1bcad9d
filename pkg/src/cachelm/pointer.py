"""Implicit cache pointer output layer.

The softmax output is extended by L history slots, one per recent input
token. Slot activations come from a linear projection of the hidden state,
optionally augmented by a scalar "repeat likelihood" memorized when each
history token was consumed. Supervision is at-least-one-hot: the target's
vocabulary slot plus every valid history slot holding the same word. The
training loss is -log of the total probability mass on those indices, and
evaluation aggregates slot mass back onto the words occupying the slots, so
training loss and evaluation probability are the same dot product.

Slot geometry: at step t, slot j refers to the input at position t-L+1+j;
slot L-1 is always the token just consumed. Slots referring to positions
before the start of the history window are masked with the -inf sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Parameter, RngState, Tensor


@dataclass
class PointerHead:
    """Output layer: tied vocabulary matrix plus L pointer slots.

    Beyond the baseline head (W, b), the pointer adds W_p (L x H) and, with
    memory augmentation, w_m (H): (L+1) x H extra parameters in total.
    """

    W: Parameter  # (V, H), tied to the input embedding
    b: Parameter  # (V,)
    w_p: Parameter | None  # (L, H); None when L == 0
    w_m: Parameter | None  # (H,); None without memory augmentation
    L: int
    memory_augmentation: bool = True
    exclude_ids: frozenset = field(default_factory=frozenset)

    @property
    def vocab_size(self) -> int:
        return self.W.value.shape[0]

    @property
    def hidden(self) -> int:
        return self.W.value.shape[1]

    def extra_parameters(self) -> list[Parameter]:
        """Parameters not shared with the baseline head (excludes tied W)."""
        out = [self.b]
        if self.w_p is not None:
            out.append(self.w_p)
        if self.w_m is not None:
            out.append(self.w_m)
        return out


def make_head(
    embedding: Parameter,
    L: int,
    rng: RngState,
    memory_augmentation: bool = True,
    exclude_ids=(),
    dtype=np.float64,
) -> PointerHead:
    V, H = embedding.value.shape
    b = Parameter("head.bias", np.zeros(V, dtype=dtype))
    w_p = None
    if L > 0:
        w_p = Parameter("head.w_p", nc.uniform_init((L, H), rng.child("head.w_p"), dtype=dtype))
    w_m = None
    if memory_augmentation:
        w_m = Parameter("head.w_m", nc.uniform_init((H,), rng.child("head.w_m"), dtype=dtype))
    return PointerHead(
        W=embedding,
        b=b,
        w_p=w_p,
        w_m=w_m,
        L=L,
        memory_augmentation=memory_augmentation,
        exclude_ids=frozenset(int(i) for i in exclude_ids),
    )


class PointerState:
    """Ring buffer of the last L (token, memory activation) pairs."""

    __slots__ = ("L", "tokens", "m", "valid")

    def __init__(self, L: int):
        self.L = L
        self.tokens = np.full(L, -1, dtype=np.int64)
        self.m = np.zeros(L, dtype=np.float64)
        self.valid = np.zeros(L, dtype=bool)

    def copy(self) -> "PointerState":
        out = PointerState(self.L)
        out.tokens = self.tokens.copy()
        out.m = self.m.copy()
        out.valid = self.valid.copy()
        return out

    def valid_count(self) -> int:
        return int(self.valid.sum())

    def __repr__(self):
        return f"PointerState(L={self.L}, valid={self.valid_count()})"


@dataclass(frozen=True)
class SupervisionVector:
    """Sparse at-least-one-hot target over V+L output slots."""

    indices: tuple[int, ...]
    output_dim: int
    vocab_size: int

    def __post_init__(self):
        below = [i for i in self.indices if i < self.vocab_size]
        if len(below) != 1:
            raise ValueError("supervision must mark exactly one vocabulary slot")
        if any(i < 0 or i >= self.output_dim for i in self.indices):
            raise ValueError("supervision index out of range")


# ---------------------------------------------------------------------------
# per-position operations (evaluation / rescoring path; no tape)
# ---------------------------------------------------------------------------

def update_state(state: PointerState, token: int, h: np.ndarray, head: PointerHead) -> PointerState:
    """Shift the window left and record (token, w_m . h) in the newest slot."""
    out = state.copy()
    if state.L == 0:
        return out
    out.tokens[:-1] = state.tokens[1:]
    out.m[:-1] = state.m[1:]
    out.valid[:-1] = state.valid[1:]
    out.tokens[-1] = int(token)
    out.m[-1] = float(head.w_m.value.data @ h) if head.w_m is not None else 0.0
    out.valid[-1] = True
    return out


def _slot_open(head: PointerHead, state: PointerState) -> np.ndarray:
    """Slots that may carry probability: valid and not excluded."""
    open_ = state.valid.copy()
    if head.exclude_ids:
        for j in range(state.L):
            if open_[j] and int(state.tokens[j]) in head.exclude_ids:
                open_[j] = False
    return open_


def pointer_logits(h: np.ndarray, head: PointerHead, state: PointerState) -> np.ndarray:
    """Extended pre-softmax activations z over V + L output slots."""
    z_vocab = head.W.value.data @ h + head.b.value.data
    if head.L == 0:
        return z_vocab
    p = head.w_p.value.data @ h
    if head.memory_augmentation:
        p = p + state.m
    open_ = _slot_open(head, state)
    p = np.where(open_, p, nc.NEG_INF)
    return np.concatenate([z_vocab, p])


def build_supervision(target: int, state: PointerState, vocab_size: int) -> SupervisionVector:
    """Indices of the target word slot plus every valid matching history slot."""
    if not 0 <= target < vocab_size:
        raise ValueError(f"target id {target} outside vocabulary of {vocab_size}")
    idx = [int(target)]
    for j in range(state.L):
        if state.valid[j] and int(state.tokens[j]) == int(target):
            idx.append(vocab_size + j)
    return SupervisionVector(tuple(idx), vocab_size + state.L, vocab_size)


def loss(y: np.ndarray, s: SupervisionVector) -> float:
    """Negative log of the probability mass on the supervision indices."""
    sigma = float(y[list(s.indices)].sum())
    if sigma <= 0.0:
        raise nc.NumericError("supervision mass is zero")
    return -float(np.log(sigma))


def aggregate_word_probs(y: np.ndarray, state: PointerState) -> np.ndarray:
    """Fold pointer-slot mass back onto the words occupying the slots."""
    V = len(y) - state.L
    q = y[:V].copy()
    if state.L:
        open_ = state.valid
        np.add.at(q, state.tokens[open_], y[V:][open_])
    return q


def stable_softmax(z: np.ndarray) -> np.ndarray:
    """1-D softmax mirroring the tape op: -inf entries get exactly 0."""
    m = z.max()
    if m == nc.NEG_INF:
        raise nc.InvalidDistributionError("softmax input has every entry masked")
    e = np.exp(z - m)
    return e / e.sum()


# ---------------------------------------------------------------------------
# batched chunk operations (training path; tape-aware)
# ---------------------------------------------------------------------------

def slot_geometry(inputs: np.ndarray, L: int, exclude_ids=frozenset()):
    """Per-position slot tokens and openness for a fresh-window chunk.

    Returns (slot_tokens, slot_open) with shape (B, T, L). Slot L-1-d of
    position t holds the input at t-d; slots reaching before position 0 are
    closed, as are slots holding excluded tokens.
    """
    B, T = inputs.shape
    slot_tokens = np.full((B, T, L), -1, dtype=np.int64)
    slot_open = np.zeros((B, T, L), dtype=bool)
    for d in range(min(L, T)):
        j = L - 1 - d
        slot_tokens[:, d:, j] = inputs[:, : T - d]
        slot_open[:, d:, j] = True
    if exclude_ids:
        excluded = np.isin(slot_tokens, np.fromiter(exclude_ids, dtype=np.int64))
        slot_open &= ~excluded
    return slot_tokens, slot_open


def supervision_match(slot_tokens: np.ndarray, slot_open: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Boolean (B, T, L): open slots whose token equals the position's target."""
    return slot_open & (slot_tokens == targets[:, :, None])


def chunk_supervision_dense(
    targets: np.ndarray, match: np.ndarray | None, vocab_size: int, dtype
) -> np.ndarray:
    """Dense 0/1 supervision (B, T, V+L): one-hot target plus history matches.

    Reference form of the training target, used by tests as an independent
    route to the supervision mass; the model itself gathers sparsely.
    """
    B, T = targets.shape
    L = 0 if match is None else match.shape[2]
    s = np.zeros((B, T, vocab_size + L), dtype=dtype)
    np.put_along_axis(s, targets[:, :, None], 1.0, axis=2)
    if match is not None and L:
        s[:, :, vocab_size:] = match.astype(dtype)
    return s


def slot_logits_op(p: Tensor, m: Tensor | None, slot_open: np.ndarray) -> Tensor:
    """Tape op: mask closed slots to -inf and add windowed memory activations.

    ``p`` is (B, T, L) raw slot activations; ``m`` is (B, T) per-position
    memory scalars (None disables augmentation). The scalar recorded at
    position u lands on slot L-1-d of every later position u+d, so its
    gradient is the sum of the incoming gradients over that diagonal.
    """
    B, T, L = p.shape
    out = np.where(slot_open, p.data, nc.NEG_INF)
    if m is not None:
        add = np.zeros_like(p.data)
        for d in range(min(L, T)):
            add[:, d:, L - 1 - d] = m.data[:, : T - d]
        out = np.where(slot_open, out + add, nc.NEG_INF)

    def backward(g):
        gp = g * slot_open
        if p.requires_grad:
            p._accumulate(gp)
        if m is not None and m.requires_grad:
            gm = np.zeros_like(m.data)
            for d in range(min(L, T)):
                gm[:, : T - d] += gp[:, d:, L - 1 - d]
            m._accumulate(gm)

    parents = (p,) if m is None else (p, m)
    return nc.custom(out, parents, backward, "slot_logits")
