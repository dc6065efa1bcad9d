"""Text ingestion: vocabulary, token streams, BPTT chunking, frequency buckets.

Corpora are UTF-8 plain text, one sentence per line, whitespace tokenized.
Sentences are joined into one flat id stream with a single end-of-sentence
token after each line; there is no begin-of-sentence token. Pre-tokenized
corpora that already contain the "<unk>" surface form pass through unchanged.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

UNK = "<unk>"
EOS = "</s>"


class IngestionError(ValueError):
    """Raised for empty or undersized input text."""


class ConfigurationError(ValueError):
    """Raised for invalid corpus-processing settings."""


@dataclass
class Vocabulary:
    """Dense word<->id maps with OOV and end-of-sentence handling.

    ids run 0..V-1 ordered by descending training frequency (ties broken
    lexicographically); ``train_freq`` counts the post-OOV-mapping training
    stream, end-of-sentence tokens included.
    """

    word_to_id: dict[str, int]
    id_to_word: list[str]
    unk_id: int
    eos_id: int
    train_freq: np.ndarray

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    def encode_word(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def encode_lines(self, lines: list[str]) -> np.ndarray:
        ids: list[int] = []
        for line in lines:
            for word in line.split():
                ids.append(self.word_to_id.get(word, self.unk_id))
            ids.append(self.eos_id)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.id_to_word[int(i)] for i in ids]

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]

    def serialize(self) -> str:
        lines = [
            f"{word}\t{idx}\t{int(self.train_freq[idx])}"
            for idx, word in enumerate(self.id_to_word)
        ]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())

    @classmethod
    def deserialize(cls, text: str) -> "Vocabulary":
        id_to_word: list[str] = []
        freqs: list[int] = []
        for line in text.splitlines():
            if not line:
                continue
            word, idx, freq = line.split("\t")
            if int(idx) != len(id_to_word):
                raise IngestionError("vocabulary file ids are not dense/sorted")
            id_to_word.append(word)
            freqs.append(int(freq))
        word_to_id = {w: i for i, w in enumerate(id_to_word)}
        if UNK not in word_to_id or EOS not in word_to_id:
            raise IngestionError("vocabulary file lacks <unk> or </s>")
        return cls(
            word_to_id=word_to_id,
            id_to_word=id_to_word,
            unk_id=word_to_id[UNK],
            eos_id=word_to_id[EOS],
            train_freq=np.asarray(freqs, dtype=np.int64),
        )

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.deserialize(fh.read())


def build_vocab(
    lines: list[str],
    min_count: int = 1,
    top_k: int | None = None,
) -> Vocabulary:
    """Build a vocabulary from training sentences.

    Words below ``min_count`` (or outside the ``top_k`` most frequent) map to
    ``<unk>``; counts are then re-taken over the mapped stream so that the
    stored frequencies sum to the training token count, eos included.
    """
    if min_count < 1:
        raise ConfigurationError("min_count must be >= 1")
    raw = Counter()
    n_sentences = 0
    for line in lines:
        words = line.split()
        raw.update(words)
        n_sentences += 1
    if sum(raw.values()) == 0:
        raise IngestionError("empty training text")
    raw[EOS] += n_sentences

    if top_k is not None:
        if top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        ordered = sorted(raw.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = {w for w, _ in ordered[:top_k]}
    else:
        kept = {w for w, c in raw.items() if c >= min_count}
    kept.update((UNK, EOS))

    mapped = Counter()
    for word, count in raw.items():
        mapped[word if word in kept else UNK] += count
    mapped[UNK] += 0  # ensure presence even with no OOV

    id_to_word = [w for w, _ in sorted(mapped.items(), key=lambda kv: (-kv[1], kv[0]))]
    word_to_id = {w: i for i, w in enumerate(id_to_word)}
    train_freq = np.asarray([mapped[w] for w in id_to_word], dtype=np.int64)
    return Vocabulary(
        word_to_id=word_to_id,
        id_to_word=id_to_word,
        unk_id=word_to_id[UNK],
        eos_id=word_to_id[EOS],
        train_freq=train_freq,
    )


@dataclass
class TokenStream:
    """Flat id sequence (sentences joined, eos-terminated) plus chunk length."""

    ids: np.ndarray
    chunk_len: int
    vocab_hash: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.chunk_len < 1:
            raise ConfigurationError("chunk_len must be >= 1")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_chunks(self) -> int:
        return max(0, (len(self.ids) - 1) // self.chunk_len)


def encode_stream(vocab: Vocabulary, lines: list[str], chunk_len: int) -> TokenStream:
    return TokenStream(vocab.encode_lines(lines), chunk_len, vocab.content_hash())


def chunk(stream: TokenStream, chunk_len: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a stream into consecutive (input, target) windows.

    Window c covers inputs ids[c*T : (c+1)*T) with targets shifted by one
    position; a trailing remainder shorter than a full window is dropped, so
    no token is ever supervised with history from outside its own window's
    chunk (fresh pointer state per chunk is enforced downstream).
    """
    T = stream.chunk_len if chunk_len is None else chunk_len
    if T < 1:
        raise ConfigurationError("chunk_len must be >= 1")
    ids = stream.ids
    n = (len(ids) - 1) // T
    if n < 1:
        raise IngestionError(f"stream of {len(ids)} ids shorter than one chunk of {T}+1")
    out = []
    for c in range(n):
        out.append((ids[c * T : (c + 1) * T], ids[c * T + 1 : (c + 1) * T + 1]))
    return out


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    lines = [line for line in lines if line.strip()]
    if not lines:
        raise IngestionError(f"no sentences found in {path}")
    return lines


@dataclass
class FrequencyBuckets:
    """Vocabulary partition by training frequency, balanced by test tokens.

    Bucket 0 holds the most frequent words. ``assignment[i]`` is the bucket
    of word id i; boundaries never place a strictly rarer word in an earlier
    bucket (tied frequencies may straddle a boundary).
    """

    n_buckets: int
    assignment: np.ndarray
    test_token_counts: np.ndarray
    freq_ranges: list[tuple[int, int]] = field(default_factory=list)


def build_buckets(vocab: Vocabulary, test_ids: np.ndarray, n_buckets: int = 10) -> FrequencyBuckets:
    """Greedily split the vocabulary into buckets of ~equal test-token mass.

    Words are taken in descending training-frequency order; a bucket closes
    as soon as its accumulated test-token count reaches total/n_buckets, and
    the last bucket absorbs the remainder.
    """
    if n_buckets < 1:
        raise ConfigurationError("n_buckets must be >= 1")
    V = vocab.size
    if n_buckets > V:
        raise ConfigurationError(f"n_buckets={n_buckets} exceeds vocabulary size {V}")
    test_ids = np.asarray(test_ids, dtype=np.int64)
    per_word = np.bincount(test_ids, minlength=V).astype(np.int64)
    total = int(per_word.sum())
    target = total / n_buckets

    order = sorted(range(V), key=lambda i: (-int(vocab.train_freq[i]), vocab.id_to_word[i]))
    assignment = np.zeros(V, dtype=np.int64)
    counts = np.zeros(n_buckets, dtype=np.int64)
    bucket = 0
    acc = 0
    for rank, wid in enumerate(order):
        remaining_words = V - rank
        remaining_buckets = n_buckets - bucket
        assignment[wid] = bucket
        acc += int(per_word[wid])
        counts[bucket] += int(per_word[wid])
        close = bucket < n_buckets - 1 and (
            acc >= target or remaining_words - 1 < remaining_buckets
        )
        if close:
            bucket += 1
            acc = 0

    freq_ranges = []
    for b in range(n_buckets):
        members = np.where(assignment == b)[0]
        freqs = vocab.train_freq[members]
        freq_ranges.append((int(freqs.min()), int(freqs.max())))
    return FrequencyBuckets(
        n_buckets=n_buckets,
        assignment=assignment,
        test_token_counts=counts,
        freq_ranges=freq_ranges,
    )
