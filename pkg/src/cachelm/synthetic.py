"""Synthetic corpora with controlled word-repetition structure.

The self-trigger corpus has a small set of frequent "common" words and a
large set of rare words; every sentence draws one rare word and places it
twice within a bounded window. A model that can copy from recent history
should predict the second occurrence far better than a plain LM, which is
the effect these corpora are built to expose at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import RngState


@dataclass
class SelfTriggerCorpus:
    train_lines: list[str]
    dev_lines: list[str]
    test_lines: list[str]
    # Stream positions (ids + eos layout) of each second rare-word occurrence
    # in the test split, aligned with Vocabulary.encode_lines output.
    test_second_positions: np.ndarray
    common_words: list[str]
    rare_words: list[str]


def _make_lines(
    gen: np.random.Generator,
    common: list[str],
    rare: list[str],
    n_tokens: int,
    sentence_len: int,
    min_gap: int,
    max_gap: int,
) -> tuple[list[str], np.ndarray]:
    lines: list[str] = []
    second_positions: list[int] = []
    stream_pos = 0
    produced = 0
    while produced < n_tokens:
        words = [common[int(i)] for i in gen.integers(0, len(common), size=sentence_len)]
        r = rare[int(gen.integers(0, len(rare)))]
        gap = int(gen.integers(min_gap, max_gap + 1))
        first = int(gen.integers(0, sentence_len - gap))
        words[first] = r
        words[first + gap] = r
        lines.append(" ".join(words))
        second_positions.append(stream_pos + first + gap)
        stream_pos += sentence_len + 1  # + eos
        produced += sentence_len + 1
    return lines, np.asarray(second_positions, dtype=np.int64)


def self_trigger_corpus(
    rng: RngState,
    n_common: int = 200,
    n_rare: int = 800,
    train_tokens: int = 100_000,
    dev_tokens: int = 10_000,
    test_tokens: int = 20_000,
    sentence_len: int = 25,
    min_gap: int = 2,
    max_gap: int = 20,
) -> SelfTriggerCorpus:
    """Generate train/dev/test splits with the repeated-rare-word pattern.

    ``max_gap`` keeps both occurrences of a sentence's rare word within a
    40-token window (sentences are shorter than that).
    """
    if sentence_len <= max_gap:
        raise ValueError("sentence_len must exceed max_gap")
    common = [f"c{i:03d}" for i in range(n_common)]
    rare = [f"r{i:03d}" for i in range(n_rare)]
    train_lines, _ = _make_lines(
        rng.child("train").generator(), common, rare, train_tokens, sentence_len, min_gap, max_gap
    )
    dev_lines, _ = _make_lines(
        rng.child("dev").generator(), common, rare, dev_tokens, sentence_len, min_gap, max_gap
    )
    test_lines, second = _make_lines(
        rng.child("test").generator(), common, rare, test_tokens, sentence_len, min_gap, max_gap
    )
    return SelfTriggerCorpus(
        train_lines=train_lines,
        dev_lines=dev_lines,
        test_lines=test_lines,
        test_second_positions=second,
        common_words=common,
        rare_words=rare,
    )


def repeated_sentence_lines(sentence_tokens: int = 50, copies: int = 40, seed: int = 7) -> list[str]:
    """One fixed random sentence repeated; a capacity probe for memorization."""
    gen = RngState(seed).generator()
    words = [f"w{int(i):02d}" for i in gen.integers(0, sentence_tokens, size=sentence_tokens)]
    line = " ".join(words)
    return [line] * copies
