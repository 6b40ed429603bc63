"""Subword tokenizer over a fixed vocabulary file.

Vocabulary format: UTF-8, one subword per line; the line number is the
token id. Line 0 is reserved for padding, line 1 for unknown fragments.
Captions are lowercased, whitespace-split, and each word is consumed by
greedy longest-prefix matching against the vocabulary; anything that
cannot be matched (not even as a single character) becomes UNK.

Every sequence is padded or cut to a fixed length (32 by default).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources

import numpy as np

PAD_ID = 0
UNK_ID = 1
SEQ_LEN = 32


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict

    def __len__(self):
        return len(self.tokens)


@dataclass
class TokenizedBatch:
    """Fixed-length token id matrix plus per-sample valid (non-pad) lengths."""

    token_ids: np.ndarray  # int64 [B, seq_len]
    valid_lengths: np.ndarray  # int64 [B]
    pad_id: int = PAD_ID

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def load_vocab(path=None) -> Vocab:
    """Read a vocabulary file; defaults to the packaged desk vocabulary."""
    if path is None:
        text = resources.files("flip").joinpath("vocab.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    tokens = tuple(line for line in text.splitlines())
    return Vocab(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


@functools.lru_cache(maxsize=1)
def default_vocab() -> Vocab:
    return load_vocab()


def _word_ids(word: str, vocab: Vocab) -> list[int]:
    ids = []
    i = 0
    while i < len(word):
        j = len(word)
        while j > i and word[i:j] not in vocab.index:
            j -= 1
        if j == i:
            ids.append(UNK_ID)
            i += 1
        else:
            ids.append(vocab.index[word[i:j]])
            i = j
    return ids


def tokenize(caption: str, vocab: Vocab | None = None, seq_len: int = SEQ_LEN) -> np.ndarray:
    """Token ids of a caption, padded or cut to exactly ``seq_len``."""
    vocab = vocab or default_vocab()
    ids: list[int] = []
    for word in caption.lower().split():
        ids.extend(_word_ids(word, vocab))
        if len(ids) >= seq_len:
            break
    ids = ids[:seq_len]
    ids.extend([PAD_ID] * (seq_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


def tokenize_batch(
    captions, vocab: Vocab | None = None, seq_len: int = SEQ_LEN
) -> TokenizedBatch:
    vocab = vocab or default_vocab()
    ids = np.stack([tokenize(c, vocab, seq_len) for c in captions])
    is_pad = ids == PAD_ID
    valid = np.where(is_pad.any(axis=1), is_pad.argmax(axis=1), seq_len).astype(np.int64)
    return TokenizedBatch(token_ids=ids, valid_lengths=valid)
