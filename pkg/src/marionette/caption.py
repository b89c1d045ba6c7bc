"""Deterministic trainable text encoder: hashed bag of words.

Tokens are case/punctuation-normalized, FNV-hashed onto a fixed table of
trainable rows, mean-pooled, linearly projected, and unit-normalized. Small
and local by design; the template caption vocabulary doesn't need more.
"""

from __future__ import annotations

import string

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class CaptionError(ValueError):
    pass


def normalize_text(text: str) -> list:
    return text.lower().translate(_PUNCT_TABLE).split()


def _fnv1a(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class CaptionEncoder:
    """hash-embed -> mean-pool -> project -> L2 normalize."""

    def __init__(self, rng: np.random.Generator, table_size=512, token_dim=64,
                 embed_dim=64):
        self.table = Tensor(rng.standard_normal((table_size, token_dim)) / np.sqrt(token_dim),
                            requires_grad=True)
        self.proj = Tensor(rng.standard_normal((token_dim, embed_dim)) / np.sqrt(token_dim),
                           requires_grad=True)
        self.embed_dim = embed_dim

    def parameters(self):
        return [self.table, self.proj]

    def token_rows(self, text: str) -> np.ndarray:
        tokens = normalize_text(text)
        if not tokens:
            raise CaptionError(f"caption is empty after normalization: {text!r}")
        size = self.table.data.shape[0]
        return np.array([_fnv1a(t) % size for t in tokens], dtype=np.intp)

    def encode(self, text: str) -> np.ndarray:
        rows = self.token_rows(text)
        pooled = self.table.data[rows].mean(axis=0)
        out = pooled @ self.proj.data
        return out / np.sqrt((out * out).sum() + 1e-12)

    def encode_graph(self, texts) -> Tensor:
        """Differentiable batch encoding of a caption list."""
        row_lists = [self.token_rows(t) for t in texts]
        pooled = [ad.mean_rows(ad.gather_rows(self.table, rows)) for rows in row_lists]
        stacked = ad.concat(pooled, axis=0)
        out = ad.matmul(stacked, self.proj)
        sq = ad.sum_last(ad.mul(out, out))
        inv = ad.power(ad.add(sq, Tensor(np.array(1e-12))), -0.5)
        return ad.mul(out, inv)


def encode_caption(encoder: CaptionEncoder, text: str) -> np.ndarray:
    """Unit-norm embedding; rejects empty or whitespace-only text."""
    if not text or not text.strip():
        raise CaptionError("empty caption")
    return encoder.encode(text)
