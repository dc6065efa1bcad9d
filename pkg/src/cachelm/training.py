"""SGD training over chunked streams, perplexity evaluation, checkpointing.

The token stream is split into ``batch_streams`` contiguous segments
processed as parallel columns. LSTM hidden state is carried across chunks
within each segment but detached from the tape, so backpropagation is
truncated at chunk boundaries; the pointer window is fresh in every chunk.
Loss is averaged per token, which makes perplexity exactly exp(loss).
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbone import LstmConfig, TransformerConfig
from .corpus import ConfigurationError, TokenStream, Vocabulary
from .model import CacheLanguageModel, PointerConfig
from .numcore import RngState

CKPT_MAGIC = b"CLMCKPT\x00"
CKPT_VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CompatibilityError(RuntimeError):
    """Checkpoint and data were produced with different vocabularies."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1.0
    lr_decay: float = 0.5
    clip_norm: float = 5.0
    epochs: int = 10
    batch_streams: int = 16
    chunk_len: int = 100
    seed: int = 0
    precision: int = 64

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ConfigurationError("precision must be 32 or 64")
        if self.epochs < 0 or self.batch_streams < 1 or self.chunk_len < 1:
            raise ConfigurationError("bad training configuration")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    backbone_kind: str
    backbone_cfg: dict
    pointer_cfg: dict
    train_cfg: dict
    epoch: int
    dev_ppl: float
    rng: RngState

    @property
    def vocab_hash(self) -> str:
        return self.vocab.content_hash()

    def to_model(self) -> CacheLanguageModel:
        model = build_model(
            self.vocab,
            self.backbone_kind,
            self.backbone_cfg,
            self.pointer_cfg,
            RngState(self.rng.seed, self.rng.algorithm),
            dtype=next(iter(self.params.values())).dtype if self.params else np.float64,
        )
        model.load_parameters(self.params)
        return model

    # -- binary container ------------------------------------------------
    def save(self, path) -> None:
        meta = {
            "backbone_kind": self.backbone_kind,
            "backbone_cfg": self.backbone_cfg,
            "pointer_cfg": self.pointer_cfg,
            "train_cfg": self.train_cfg,
            "epoch": self.epoch,
            "dev_ppl": self.dev_ppl,
            "rng": {"seed": self.rng.seed, "algorithm": self.rng.algorithm},
            "vocab": self.vocab.serialize(),
            "vocab_hash": self.vocab_hash,
            "param_order": sorted(self.params),
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(self.params)))
        for name in meta["param_order"]:
            arr = self.params[name]
            enc = name.encode("utf-8")
            code = arr.dtype.itemsize
            buf.write(struct.pack("<H", len(enc)))
            buf.write(enc)
            buf.write(struct.pack("<BB", code, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint file")
        off = len(CKPT_MAGIC)
        version, blob_len = struct.unpack_from("<IQ", raw, off)
        off += 12
        if version != CKPT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        meta = json.loads(raw[off : off + blob_len].decode("utf-8"))
        off += blob_len
        (n_params,) = struct.unpack_from("<I", raw, off)
        off += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            dt = _DTYPE_CODES[code]
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape)
            off += count * dt.itemsize
            params[name] = arr.copy()
        vocab = Vocabulary.deserialize(meta["vocab"])
        if vocab.content_hash() != meta["vocab_hash"]:
            raise ConfigurationError("checkpoint vocabulary fails its own hash")
        return cls(
            params=params,
            vocab=vocab,
            backbone_kind=meta["backbone_kind"],
            backbone_cfg=meta["backbone_cfg"],
            pointer_cfg=meta["pointer_cfg"],
            train_cfg=meta["train_cfg"],
            epoch=meta["epoch"],
            dev_ppl=meta["dev_ppl"],
            rng=RngState(meta["rng"]["seed"], meta["rng"]["algorithm"]),
        )


def build_model(
    vocab: Vocabulary,
    backbone_kind: str,
    backbone_cfg: dict,
    pointer_cfg: dict,
    rng: RngState,
    dtype=np.float64,
) -> CacheLanguageModel:
    if backbone_kind == "lstm":
        bcfg = LstmConfig(**backbone_cfg)
    elif backbone_kind == "transformer":
        bcfg = TransformerConfig(**backbone_cfg)
    else:
        raise ConfigurationError(f"unknown backbone {backbone_kind!r}")
    pcfg = PointerConfig(**{**pointer_cfg, "exclude": tuple(pointer_cfg.get("exclude", ()))})
    exclude_ids = _resolve_exclusions(vocab, pcfg.exclude)
    return CacheLanguageModel(
        vocab.size, backbone_kind, bcfg, pcfg, rng, exclude_ids=exclude_ids, dtype=dtype
    )


def _resolve_exclusions(vocab: Vocabulary, names) -> tuple[int, ...]:
    ids = []
    for name in names:
        if name == "eos":
            ids.append(vocab.eos_id)
        elif name == "unk":
            ids.append(vocab.unk_id)
        else:
            ids.append(vocab.word_to_id[name])
    return tuple(ids)


def batchify(ids: np.ndarray, batch_streams: int) -> np.ndarray:
    """Split a flat stream into ``batch_streams`` equal contiguous segments."""
    n = len(ids) // batch_streams
    if n < 2:
        raise ConfigurationError("stream too short for the requested batch_streams")
    return np.asarray(ids[: batch_streams * n], dtype=np.int64).reshape(batch_streams, n)


def _chunk_starts(segment_len: int, chunk_len: int) -> range:
    n_chunks = (segment_len - 1) // chunk_len
    return range(0, n_chunks * chunk_len, chunk_len)


def evaluate_nll(
    model: CacheLanguageModel, stream: TokenStream, batch_streams: int = 1
) -> tuple[float, int]:
    """Total negative log likelihood and target count over a stream, eval mode."""
    mat = batchify(stream.ids, batch_streams)
    state = model.initial_state(batch_streams)
    total = 0.0
    count = 0
    with nc.no_grad():
        for start in _chunk_starts(mat.shape[1], stream.chunk_len):
            inputs = mat[:, start : start + stream.chunk_len]
            targets = mat[:, start + 1 : start + stream.chunk_len + 1]
            out = model.forward_chunk(inputs, targets, state, mode="eval")
            state = out.state_out
            total += float(-np.log(out.sigma.astype(np.float64)).sum())
            count += out.sigma.size
    if count == 0:
        raise ConfigurationError("stream yields no evaluation chunks")
    return total, count


def evaluate_perplexity(source, stream: TokenStream, batch_streams: int = 1) -> float:
    """Perplexity of a stream under a model or checkpoint.

    When given a checkpoint, the stream must have been encoded with the same
    vocabulary (hashes are compared).
    """
    if isinstance(source, Checkpoint):
        if stream.vocab_hash and stream.vocab_hash != source.vocab_hash:
            raise CompatibilityError(
                f"vocabulary mismatch: stream {stream.vocab_hash} vs checkpoint {source.vocab_hash}"
            )
        model = source.to_model()
    else:
        model = source
    total, count = evaluate_nll(model, stream, batch_streams)
    return math.exp(total / count)


def train(
    vocab: Vocabulary,
    train_stream: TokenStream,
    dev_stream: TokenStream,
    backbone_kind: str,
    backbone_cfg: dict,
    pointer_cfg: dict,
    tcfg: TrainConfig,
    log=None,
) -> Checkpoint:
    """SGD training loop; returns the best-dev checkpoint.

    The learning rate is multiplied by ``lr_decay`` after any epoch whose dev
    perplexity fails to improve on the best seen. A non-finite loss aborts
    training and the last good checkpoint is returned.
    """
    rng = RngState(tcfg.seed)
    model = build_model(vocab, backbone_kind, backbone_cfg, pointer_cfg, rng.child("init"), tcfg.dtype)
    params = model.parameters()
    dropout_gen = rng.child("dropout").generator()

    # Dev evaluation batched for speed, clamped so every segment still yields
    # at least one chunk.
    dev_streams = max(
        1, min(tcfg.batch_streams, len(dev_stream.ids) // (dev_stream.chunk_len + 1))
    )

    def snapshot(epoch: int, dev_ppl: float) -> Checkpoint:
        train_meta = dataclasses.asdict(tcfg)
        train_meta["dev_eval_streams"] = dev_streams
        return Checkpoint(
            params=model.parameter_table(),
            vocab=vocab,
            backbone_kind=backbone_kind,
            backbone_cfg=dict(backbone_cfg),
            pointer_cfg=dict(pointer_cfg),
            train_cfg=train_meta,
            epoch=epoch,
            dev_ppl=dev_ppl,
            rng=rng,
        )

    mat = batchify(train_stream.ids, tcfg.batch_streams)
    starts = list(_chunk_starts(mat.shape[1], tcfg.chunk_len))
    if not starts:
        raise ConfigurationError("training stream shorter than one chunk per segment")

    best = snapshot(0, evaluate_perplexity(model, dev_stream, dev_streams))
    lr = tcfg.lr0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.monotonic()
        state = model.initial_state(tcfg.batch_streams)
        total_nll = 0.0
        total_tok = 0
        try:
            for start in starts:
                inputs = mat[:, start : start + tcfg.chunk_len]
                targets = mat[:, start + 1 : start + tcfg.chunk_len + 1]
                out = model.forward_chunk(inputs, targets, state, mode="train", generator=dropout_gen)
                state = out.state_out
                out.loss.backward()
                nc.sgd_step(params, lr, tcfg.clip_norm)
                total_nll += float(out.loss.item()) * inputs.size
                total_tok += inputs.size
            train_ppl = math.exp(total_nll / total_tok)
            dev_ppl = evaluate_perplexity(model, dev_stream, dev_streams)
        except nc.NumericError as err:
            if log:
                log({"event": "diverged", "epoch": epoch, "error": str(err)})
            return best
        if dev_ppl < best.dev_ppl:
            best = snapshot(epoch, dev_ppl)
        else:
            lr *= tcfg.lr_decay
        if log:
            log(
                {
                    "epoch": epoch,
                    "train_ppl": train_ppl,
                    "dev_ppl": dev_ppl,
                    "lr": lr,
                    "sec": time.monotonic() - t0,
                }
            )
    return best
