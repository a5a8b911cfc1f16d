"""Deterministic toy text encoder standing in for a frozen CLIP text tower.

Tokens are lowercase whitespace-separated words hashed with 32-bit FNV-1a
into a fixed vocabulary. Weights come from a seeded PCG64 stream, so the
encoder is identical on every platform without shipping a weight file.
"""

from __future__ import annotations

import functools
import hashlib
import math

import numpy as np
import torch
import torch.nn as nn

from .errors import ParameterError
from .utils import FreezableMixin

VOCAB_SIZE = 4096
MAX_TOKENS = 16
PAD_ID = 0

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


def fnv1a_32(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


def token_id(word: str, vocab_size: int = VOCAB_SIZE) -> int:
    # id 0 is reserved for padding
    return 1 + fnv1a_32(word.encode("utf-8")) % (vocab_size - 1)


def tokenize(expression: str, vocab_size: int = VOCAB_SIZE, max_tokens: int = MAX_TOKENS) -> list[int]:
    if not expression or not expression.strip():
        raise ParameterError("expression must be a non-empty string")
    ids = [token_id(w, vocab_size) for w in expression.lower().split()][:max_tokens]
    return ids + [PAD_ID] * (max_tokens - len(ids))


def find_collisions(words, vocab_size: int = VOCAB_SIZE) -> dict[int, list[str]]:
    """Token ids shared by more than one distinct word."""
    buckets: dict[int, set] = {}
    for w in words:
        w = w.lower()
        buckets.setdefault(token_id(w, vocab_size), set()).add(w)
    return {k: sorted(v) for k, v in buckets.items() if len(v) > 1}


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : (d - d // 2)]
    return out


class TextEncoder(FreezableMixin, nn.Module):
    """Hashed token embeddings, sinusoidal positions and a two-layer mixer.

    Each mixer layer adds ``tanh(W_tok x_i + W_ctx mean(x))`` to every token,
    which lets position and sentence context reach each token embedding.
    """

    def __init__(self, d_text: int = 64, vocab_size: int = VOCAB_SIZE, max_tokens: int = MAX_TOKENS, seed: int = 0):
        super().__init__()
        self.d_text, self.vocab_size, self.max_tokens, self.seed = d_text, vocab_size, max_tokens, seed
        rng = np.random.default_rng(seed)
        self.embedding = nn.Embedding(vocab_size, d_text)
        self.mix_tok = nn.ModuleList([nn.Linear(d_text, d_text) for _ in range(2)])
        self.mix_ctx = nn.ModuleList([nn.Linear(d_text, d_text, bias=False) for _ in range(2)])
        with torch.no_grad():
            self.embedding.weight.copy_(torch.from_numpy(rng.standard_normal((vocab_size, d_text))))
            for lin in list(self.mix_tok) + list(self.mix_ctx):
                lin.weight.copy_(torch.from_numpy(rng.standard_normal((d_text, d_text)) / math.sqrt(d_text)))
                if lin.bias is not None:
                    lin.bias.zero_()
        self.register_buffer("positions", torch.from_numpy(_sinusoid(max_tokens, d_text)).float(), persistent=False)
        self.freeze()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids) + self.positions[: ids.shape[-1]]
        valid = (ids != PAD_ID).unsqueeze(-1).to(x.dtype)
        for tok, ctx in zip(self.mix_tok, self.mix_ctx):
            mean = (x * valid).sum(-2, keepdim=True) / valid.sum(-2, keepdim=True).clamp_min(1.0)
            x = x + torch.tanh(tok(x) + ctx(mean))
        return x

    @torch.no_grad()
    def encode(self, expression: str) -> torch.Tensor:
        ids = torch.tensor(tokenize(expression, self.vocab_size, self.max_tokens))
        return self(ids[None])[0]

    def vocab_hash(self) -> str:
        h = hashlib.sha256(f"fnv1a32/{self.vocab_size}/{self.max_tokens}/{self.d_text}/{self.seed}".encode())
        h.update(self.embedding.weight.detach().numpy().tobytes())
        return h.hexdigest()


@functools.lru_cache(maxsize=8)
def get_text_encoder(d_text: int = 64, seed: int = 0) -> TextEncoder:
    return TextEncoder(d_text=d_text, seed=seed)


def encode_text(expression: str, d_text: int = 64, seed: int = 0) -> torch.Tensor:
    """(MAX_TOKENS, d_text) embedding of ``expression``."""
    return get_text_encoder(d_text, seed).encode(expression)
