"""Whitespace/punctuation tokenizer with a hashed vocabulary.

Words are lower-cased and mapped into a fixed number of buckets with CRC32 so
that any description, including ones naming classes never seen in training,
encodes deterministically across processes.
"""
from __future__ import annotations

import re
import zlib

import torch

CONTEXT_LENGTH = 77
PAD_ID = 0
SOT_ID = 1
EOT_ID = 2
_N_SPECIAL = 3

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def count_tokens(text: str) -> int:
    """Number of context slots `text` occupies, start and end markers included."""
    return len(split_words(text)) + 2


def word_id(word: str, vocab_size: int) -> int:
    return _N_SPECIAL + zlib.crc32(word.encode("utf-8")) % (vocab_size - _N_SPECIAL)


def tokenize(texts: list[str], vocab_size: int, context_length: int = CONTEXT_LENGTH) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode texts into a padded id matrix.

    Returns ``(ids, eot_index)``. Overlong texts are cut so that the end marker
    always fits. The matrix is only as wide as the longest text; with causal
    attention trailing padding cannot change the end-token state.
    """
    rows = []
    for text in texts:
        ids = [word_id(w, vocab_size) for w in split_words(text)][: context_length - 2]
        rows.append([SOT_ID, *ids, EOT_ID])
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r)
    eot = torch.tensor([len(r) - 1 for r in rows])
    return out, eot
