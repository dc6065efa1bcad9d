"""Hidden-state producers: a stacked LSTM and a decoder-only Transformer.

Both own the (tied) input embedding and emit one context vector per input
position; the pointer output layer consumes those vectors. LSTM state is
carried across chunks as plain detached arrays, so gradients never cross a
chunk boundary. Transformer chunks are independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .corpus import ConfigurationError
from .numcore import Parameter, RngState, Tensor


@dataclass
class LstmConfig:
    layers: int = 2
    hidden: int = 650
    embed: int = 650
    dropout: float = 0.5

    def __post_init__(self):
        if self.embed != self.hidden:
            raise ConfigurationError("tied embeddings require embed == hidden")
        if self.layers < 1 or self.hidden < 1:
            raise ConfigurationError("layers and hidden must be positive")


@dataclass
class TransformerConfig:
    layers: int = 6
    d_model: int = 512
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    use_positional_embedding: bool = True
    max_len: int = 512

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigurationError("layers must be positive")


def lstm_layer(
    ax: Tensor, wh: Tensor, h0: np.ndarray, c0: np.ndarray
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """One LSTM layer over a whole chunk, as a single tape op.

    ``ax`` is the precomputed input projection plus bias, (B, T, 4H) with
    gate order input/forget/cell/output; ``wh`` the recurrent matrix
    (H, 4H); ``h0``/``c0`` the carried (detached) state. Returns hidden
    outputs (B, T, H) and the final (h, c) as plain arrays. The backward
    pass replays the recurrence in reverse in one hand-written loop, which
    keeps the tape coarse enough for training speed.
    """
    B, T, H4 = ax.shape
    H = H4 // 4
    x = ax.data
    w = wh.data
    gates = np.empty((B, T, H4), dtype=x.dtype)
    cells = np.empty((B, T, H), dtype=x.dtype)
    tanh_c = np.empty((B, T, H), dtype=x.dtype)
    hs = np.empty((B, T, H), dtype=x.dtype)
    h, c = h0, c0
    for t in range(T):
        a = x[:, t] + h @ w
        i = expit(a[:, :H])
        f = expit(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = expit(a[:, 3 * H :])
        gates[:, t, :H] = i
        gates[:, t, H : 2 * H] = f
        gates[:, t, 2 * H : 3 * H] = g
        gates[:, t, 3 * H :] = o
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cells[:, t] = c
        tanh_c[:, t] = tc
        hs[:, t] = h

    def backward(grad_out):
        d_ax = np.empty_like(x)
        d_wh = np.zeros_like(w)
        dh = np.zeros((B, H), dtype=x.dtype)
        dc = np.zeros((B, H), dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            i = gates[:, t, :H]
            f = gates[:, t, H : 2 * H]
            g = gates[:, t, 2 * H : 3 * H]
            o = gates[:, t, 3 * H :]
            c_prev = cells[:, t - 1] if t > 0 else c0
            h_prev = hs[:, t - 1] if t > 0 else h0
            dht = dh + grad_out[:, t]
            tc = tanh_c[:, t]
            dct = dc + dht * o * (1.0 - tc * tc)
            da = d_ax[:, t]
            da[:, :H] = dct * g * i * (1.0 - i)
            da[:, H : 2 * H] = dct * c_prev * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dct * i * (1.0 - g * g)
            da[:, 3 * H :] = dht * tc * o * (1.0 - o)
            d_wh += h_prev.T @ da
            dh = da @ w.T
            dc = dct * f
        if ax.requires_grad:
            ax._accumulate(d_ax)
        if wh.requires_grad:
            wh._accumulate(d_wh)

    out = nc.custom(hs, (ax, wh), backward, "lstm_layer")
    return out, hs[:, -1].copy(), cells[:, -1].copy()


class LstmBackbone:
    """Stacked LSTM over a tied embedding. Gate order: input, forget, cell, output."""

    kind = "lstm"

    def __init__(self, vocab_size: int, cfg: LstmConfig, rng: RngState, dtype=np.float64):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.dtype = dtype
        H, E = cfg.hidden, cfg.embed
        self.embedding = Parameter(
            "embedding", nc.uniform_init((vocab_size, E), rng.child("embedding"), dtype=dtype)
        )
        self.layers: list[dict[str, Parameter]] = []
        for l in range(cfg.layers):
            in_dim = E if l == 0 else H
            wx = Parameter(f"lstm{l}.wx", nc.uniform_init((in_dim, 4 * H), rng.child(f"lstm{l}.wx"), dtype=dtype))
            wh = Parameter(f"lstm{l}.wh", nc.uniform_init((H, 4 * H), rng.child(f"lstm{l}.wh"), dtype=dtype))
            b = np.zeros(4 * H, dtype=dtype)
            b[H : 2 * H] = 1.0  # forget-gate bias, stabilizes early training
            self.layers.append({"wx": wx, "wh": wh, "b": Parameter(f"lstm{l}.b", b)})

    def parameters(self) -> list[Parameter]:
        out = [self.embedding]
        for layer in self.layers:
            out.extend([layer["wx"], layer["wh"], layer["b"]])
        return out

    def initial_state(self, batch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        H = self.cfg.hidden
        return [
            (np.zeros((batch, H), dtype=self.dtype), np.zeros((batch, H), dtype=self.dtype))
            for _ in range(self.cfg.layers)
        ]

    def forward(
        self,
        inputs: np.ndarray,
        state_in: list[tuple[np.ndarray, np.ndarray]] | None,
        mode: str = "eval",
        generator: np.random.Generator | None = None,
    ) -> tuple[Tensor, list[tuple[np.ndarray, np.ndarray]]]:
        """Run a (B, T) id chunk; returns hiddens (B, T, H) and detached state."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
        B, T = inputs.shape
        H = self.cfg.hidden
        training = mode == "train"
        if training and self.cfg.dropout > 0 and generator is None:
            raise ConfigurationError("train-mode forward with dropout needs a generator")
        if state_in is None:
            state_in = self.initial_state(B)
        if len(state_in) != self.cfg.layers or state_in[0][0].shape != (B, H):
            raise ConfigurationError("state_in does not match config/batch")

        x_seq = nc.gather_rows(self.embedding.value, inputs)  # (B, T, E)
        if training:
            x_seq = nc.dropout(x_seq, self.cfg.dropout, generator, True)

        state_out: list[tuple[np.ndarray, np.ndarray]] = []
        for l, layer in enumerate(self.layers):
            in_dim = x_seq.shape[-1]
            # Input projection for every position at once; only the recurrent
            # product runs step by step, inside the fused layer op.
            ax = nc.reshape(
                nc.matmul(nc.reshape(x_seq, (B * T, in_dim)), layer["wx"].value) + layer["b"].value,
                (B, T, 4 * H),
            )
            x_seq, h_last, c_last = lstm_layer(ax, layer["wh"].value, *state_in[l])
            state_out.append((h_last, c_last))
            if training and l < self.cfg.layers - 1:
                x_seq = nc.dropout(x_seq, self.cfg.dropout, generator, True)

        return x_seq, state_out


class TransformerBackbone:
    """Pre-norm decoder-only Transformer with mandatory causal masking."""

    kind = "transformer"

    def __init__(self, vocab_size: int, cfg: TransformerConfig, rng: RngState, dtype=np.float64):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.dtype = dtype
        H = cfg.d_model
        self.embedding = Parameter(
            "embedding", nc.uniform_init((vocab_size, H), rng.child("embedding"), dtype=dtype)
        )
        self.positional: Parameter | None = None
        if cfg.use_positional_embedding:
            self.positional = Parameter(
                "positional", nc.uniform_init((cfg.max_len, H), rng.child("positional"), dtype=dtype)
            )
        self.blocks: list[dict[str, Parameter]] = []
        F = cfg.ffn_mult * H
        for l in range(cfg.layers):
            blk = {}
            for ln in ("ln1", "ln2"):
                blk[f"{ln}_g"] = Parameter(f"block{l}.{ln}.gain", np.ones(H, dtype=dtype))
                blk[f"{ln}_b"] = Parameter(f"block{l}.{ln}.bias", np.zeros(H, dtype=dtype))
            for w in ("wq", "wk", "wv", "wo"):
                blk[w] = Parameter(f"block{l}.{w}", nc.uniform_init((H, H), rng.child(f"block{l}.{w}"), dtype=dtype))
                blk[f"{w}_b"] = Parameter(f"block{l}.{w}.bias", np.zeros(H, dtype=dtype))
            blk["w1"] = Parameter(f"block{l}.ffn.w1", nc.uniform_init((H, F), rng.child(f"block{l}.ffn.w1"), dtype=dtype))
            blk["b1"] = Parameter(f"block{l}.ffn.b1", np.zeros(F, dtype=dtype))
            blk["w2"] = Parameter(f"block{l}.ffn.w2", nc.uniform_init((F, H), rng.child(f"block{l}.ffn.w2"), dtype=dtype))
            blk["b2"] = Parameter(f"block{l}.ffn.b2", np.zeros(H, dtype=dtype))
            self.blocks.append(blk)
        self.final_g = Parameter("final_norm.gain", np.ones(H, dtype=dtype))
        self.final_b = Parameter("final_norm.bias", np.zeros(H, dtype=dtype))

    def parameters(self) -> list[Parameter]:
        out = [self.embedding]
        if self.positional is not None:
            out.append(self.positional)
        order = [
            "ln1_g", "ln1_b", "wq", "wq_b", "wk", "wk_b", "wv", "wv_b", "wo", "wo_b",
            "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
        ]
        for blk in self.blocks:
            out.extend(blk[k] for k in order)
        out.extend([self.final_g, self.final_b])
        return out

    def initial_state(self, batch: int) -> None:
        return None  # chunks are independent; nothing to carry

    def forward(
        self,
        inputs: np.ndarray,
        state_in=None,
        mode: str = "eval",
        generator: np.random.Generator | None = None,
    ) -> tuple[Tensor, None]:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
        B, T = inputs.shape
        cfg = self.cfg
        H, nh = cfg.d_model, cfg.heads
        dh = H // nh
        training = mode == "train"
        if training and cfg.dropout > 0 and generator is None:
            raise ConfigurationError("train-mode forward with dropout needs a generator")
        if self.positional is not None and T > cfg.max_len:
            raise ConfigurationError(f"chunk of {T} exceeds position table of {cfg.max_len}")

        x = nc.gather_rows(self.embedding.value, inputs)  # (B, T, H)
        if self.positional is not None:
            x = x + nc.narrow(self.positional.value, 0, 0, T)
        if training:
            x = nc.dropout(x, cfg.dropout, generator, True)

        causal = Tensor(np.triu(np.full((T, T), nc.NEG_INF, dtype=self.dtype), k=1))
        scale = 1.0 / np.sqrt(dh)

        def linear(t, w, b):
            flat = nc.reshape(t, (B * T, H))
            return nc.reshape(nc.matmul(flat, w.value) + b.value, (B, T, -1))

        for blk in self.blocks:
            h = nc.layer_norm(x, blk["ln1_g"].value, blk["ln1_b"].value)
            q = nc.swapaxes(nc.reshape(linear(h, blk["wq"], blk["wq_b"]), (B, T, nh, dh)), 1, 2)
            k = nc.swapaxes(nc.reshape(linear(h, blk["wk"], blk["wk_b"]), (B, T, nh, dh)), 1, 2)
            v = nc.swapaxes(nc.reshape(linear(h, blk["wv"], blk["wv_b"]), (B, T, nh, dh)), 1, 2)
            scores = nc.matmul(q, nc.swapaxes(k, 2, 3)) * scale  # (B, nh, T, T)
            weights = nc.softmax(scores + causal, axis=-1)
            ctx = nc.reshape(nc.swapaxes(nc.matmul(weights, v), 1, 2), (B, T, H))
            flat = nc.reshape(ctx, (B * T, H))
            attn_out = nc.reshape(nc.matmul(flat, blk["wo"].value) + blk["wo_b"].value, (B, T, H))
            if training:
                attn_out = nc.dropout(attn_out, cfg.dropout, generator, True)
            x = x + attn_out

            h2 = nc.layer_norm(x, blk["ln2_g"].value, blk["ln2_b"].value)
            f1 = nc.gelu(nc.matmul(nc.reshape(h2, (B * T, H)), blk["w1"].value) + blk["b1"].value)
            f2 = nc.reshape(nc.matmul(f1, blk["w2"].value) + blk["b2"].value, (B, T, H))
            if training:
                f2 = nc.dropout(f2, cfg.dropout, generator, True)
            x = x + f2

        hiddens = nc.layer_norm(x, self.final_g.value, self.final_b.value)
        return hiddens, None


def make_backbone(kind: str, vocab_size: int, cfg, rng: RngState, dtype=np.float64):
    if kind == "lstm":
        return LstmBackbone(vocab_size, cfg, rng, dtype)
    if kind == "transformer":
        return TransformerBackbone(vocab_size, cfg, rng, dtype)
    raise ConfigurationError(f"unknown backbone {kind!r}")
