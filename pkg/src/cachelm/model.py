"""Language model assembly: tied embedding, backbone, pointer output layer.

Two forward paths share the same math:

* ``forward_chunk`` — batched over (streams x positions) with a fresh pointer
  window per chunk; used for training and perplexity evaluation.
* ``fresh_context`` / ``consume`` / ``extended_probs`` — one token at a time
  with an explicit ring buffer that may be carried across utterances; used
  for rescoring and the test-time cache adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import pointer as ptr
from .backbone import LstmConfig, TransformerConfig, make_backbone
from .corpus import ConfigurationError
from .numcore import RngState, Tensor


@dataclass
class PointerConfig:
    enabled: bool = True
    window: int = 100
    memory_augmentation: bool = True
    exclude: tuple[str, ...] = ()

    @property
    def effective_window(self) -> int:
        return self.window if self.enabled else 0


@dataclass
class ChunkResult:
    loss: Tensor | None
    sigma: np.ndarray | None  # (B, T) supervision mass per position
    probs: Tensor | None  # (B, T, V+L) when requested
    hiddens: Tensor
    state_out: object


@dataclass
class Context:
    """Sequential decoding state: backbone carry + pointer ring + last hidden."""

    backbone_state: object
    pointer_state: ptr.PointerState
    last_hidden: np.ndarray | None
    prefix: list[int] = field(default_factory=list)
    consumed: int = 0

    def copy(self) -> "Context":
        if self.backbone_state is None:
            bstate = None
        else:
            bstate = [(h.copy(), c.copy()) for h, c in self.backbone_state]
        return Context(
            backbone_state=bstate,
            pointer_state=self.pointer_state.copy(),
            last_hidden=None if self.last_hidden is None else self.last_hidden.copy(),
            prefix=list(self.prefix),
            consumed=self.consumed,
        )


class CacheLanguageModel:
    def __init__(
        self,
        vocab_size: int,
        backbone_kind: str,
        backbone_cfg: LstmConfig | TransformerConfig,
        pointer_cfg: PointerConfig,
        rng: RngState,
        exclude_ids=(),
        dtype=np.float64,
    ):
        self.vocab_size = vocab_size
        self.backbone_kind = backbone_kind
        self.backbone_cfg = backbone_cfg
        self.pointer_cfg = pointer_cfg
        self.dtype = dtype
        self.backbone = make_backbone(backbone_kind, vocab_size, backbone_cfg, rng.child("backbone"), dtype)
        L = pointer_cfg.effective_window
        aug = pointer_cfg.memory_augmentation and pointer_cfg.enabled
        self.head = ptr.make_head(
            self.backbone.embedding,
            L,
            rng.child("head"),
            memory_augmentation=aug,
            exclude_ids=exclude_ids,
            dtype=dtype,
        )

    # -- plumbing --------------------------------------------------------
    @property
    def L(self) -> int:
        return self.head.L

    @property
    def hidden_dim(self) -> int:
        return self.head.hidden

    def parameters(self) -> list[nc.Parameter]:
        return self.backbone.parameters() + self.head.extra_parameters()

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def load_parameters(self, table: dict[str, np.ndarray]) -> None:
        mine = {p.name: p for p in self.parameters()}
        if set(mine) != set(table):
            missing = set(mine) ^ set(table)
            raise ConfigurationError(f"parameter table mismatch: {sorted(missing)}")
        for name, arr in table.items():
            p = mine[name]
            if p.value.shape != arr.shape:
                raise ConfigurationError(f"shape mismatch for {name}")
            p.value.data = arr.astype(self.dtype, copy=True)

    def parameter_table(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.data.copy() for p in self.parameters()}

    def initial_state(self, batch: int):
        return self.backbone.initial_state(batch)

    # -- batched path ------------------------------------------------------
    def forward_chunk(
        self,
        inputs: np.ndarray,
        targets: np.ndarray | None,
        state_in=None,
        mode: str = "eval",
        generator: np.random.Generator | None = None,
        return_probs: bool = False,
    ) -> ChunkResult:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
        B, T = inputs.shape
        V, H, L = self.vocab_size, self.hidden_dim, self.L
        training = mode == "train"

        hiddens, state_out = self.backbone.forward(inputs, state_in, mode, generator)
        h = hiddens
        if training and self._dropout_rate() > 0:
            # One mask for the whole output layer: W and W_p see the same h.
            h = nc.dropout(h, self._dropout_rate(), generator, True)
        flat = nc.reshape(h, (B * T, H))

        w_t = nc.swapaxes(self.head.W.value, 0, 1)
        vocab_logits = nc.reshape(nc.matmul(flat, w_t) + self.head.b.value, (B, T, V))

        match = None
        if L > 0:
            slot_tokens, slot_open = ptr.slot_geometry(inputs, L, self.head.exclude_ids)
            p_raw = nc.reshape(nc.matmul(flat, nc.swapaxes(self.head.w_p.value, 0, 1)), (B, T, L))
            m = None
            if self.head.memory_augmentation:
                m = nc.reshape(nc.matmul(flat, nc.reshape(self.head.w_m.value, (H, 1))), (B, T))
            slots = ptr.slot_logits_op(p_raw, m, slot_open)
            z = nc.concat([vocab_logits, slots], axis=2)
        else:
            z = vocab_logits
        y = nc.softmax(z, axis=-1)

        loss = None
        sigma = None
        if targets is not None:
            targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
            # Supervision mass: the target's vocabulary slot plus every open
            # history slot holding the target word.
            sigma_node = nc.gather_along_last(y, targets)
            if L > 0:
                match = ptr.supervision_match(slot_tokens, slot_open, targets)
                slot_mass = nc.tensor_sum(
                    nc.narrow(y, 2, V, L) * Tensor(match.astype(y.dtype)), axis=2
                )
                sigma_node = sigma_node + slot_mass
            loss = nc.mean(-nc.log(sigma_node))
            sigma = sigma_node.data
        return ChunkResult(
            loss=loss,
            sigma=sigma,
            probs=y if return_probs else None,
            hiddens=hiddens,
            state_out=state_out,
        )

    def _dropout_rate(self) -> float:
        return self.backbone_cfg.dropout

    # -- sequential path ---------------------------------------------------
    def fresh_context(self) -> Context:
        if self.backbone_kind == "lstm":
            return Context(
                backbone_state=self.backbone.initial_state(1),
                pointer_state=ptr.PointerState(self.L),
                last_hidden=np.zeros(self.hidden_dim, dtype=self.dtype),
            )
        return Context(
            backbone_state=None,
            pointer_state=ptr.PointerState(self.L),
            last_hidden=None,
            prefix=[],
        )

    def consume(self, ctx: Context, token: int) -> Context:
        """Feed one token; returns the advanced context."""
        token = int(token)
        with nc.no_grad():
            if self.backbone_kind == "lstm":
                hiddens, state = self.backbone.forward(
                    np.array([[token]], dtype=np.int64), ctx.backbone_state, "eval", None
                )
                h = hiddens.data[0, 0]
                prefix: list[int] = []
            else:
                cap = self.backbone.cfg.max_len
                prefix = (ctx.prefix + [token])[-cap:]
                hiddens, state = self.backbone.forward(
                    np.array([prefix], dtype=np.int64), None, "eval", None
                )
                h = hiddens.data[0, -1]
        return Context(
            backbone_state=state,
            pointer_state=ptr.update_state(ctx.pointer_state, token, h, self.head),
            last_hidden=h,
            prefix=prefix,
            consumed=ctx.consumed + 1,
        )

    def extended_probs(self, ctx: Context) -> np.ndarray:
        """Distribution over V+L output slots at the current context."""
        if ctx.last_hidden is None:
            raise ConfigurationError("context has consumed no token; feed a boundary token first")
        z = ptr.pointer_logits(ctx.last_hidden, self.head, ctx.pointer_state)
        return ptr.stable_softmax(z)

    def word_probs(self, ctx: Context) -> np.ndarray:
        return ptr.aggregate_word_probs(self.extended_probs(ctx), ctx.pointer_state)

    def target_prob(self, ctx: Context, target: int) -> float:
        """Probability of ``target``: its word slot plus matching history slots."""
        y = self.extended_probs(ctx)
        sv = ptr.build_supervision(int(target), ctx.pointer_state, self.vocab_size)
        return float(y[list(sv.indices)].sum())
