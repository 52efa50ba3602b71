"""Deterministic text encoder stand-in.

Tokens are hashed into ``VOCAB_SIZE`` buckets; an instruction embedding is
the mean of the corresponding rows of a seeded Gaussian table, scaled to
unit length.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

VOCAB_SIZE = 4096
EMBED_DIM = 64
SLOT = "___"

_TOKEN_RE = re.compile(r"[a-z0-9_]+")


@dataclass(frozen=True)
class Instruction:
    template: str
    filled_text: str
    variation_id: int = 0

    @classmethod
    def fill(cls, template: str, values, variation_id: int = 0) -> "Instruction":
        values = list(values)
        if template.count(SLOT) != len(values):
            raise ValueError(f"template {template!r} has {template.count(SLOT)} slots, got {len(values)}")
        text = template
        for v in values:
            text = text.replace(SLOT, v, 1)
        return cls(template, text, variation_id)


def tokenize(text: str, vocab_size: int = VOCAB_SIZE) -> list[int]:
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise ValueError("cannot tokenize empty text")
    return [int.from_bytes(hashlib.blake2b(t.encode(), digest_size=8).digest(), "little") % vocab_size
            for t in tokens]


@lru_cache(maxsize=8)
def _table(seed: int, vocab_size: int, dim: int) -> np.ndarray:
    table = np.random.default_rng(seed).standard_normal((vocab_size, dim))
    table.flags.writeable = False
    return table


def embed(text: str, seed: int = 0, dim: int = EMBED_DIM, vocab_size: int = VOCAB_SIZE) -> np.ndarray:
    ids = tokenize(text, vocab_size)
    v = _table(seed, vocab_size, dim)[ids].mean(axis=0)
    return v / np.linalg.norm(v)


def template_embeddings(templates, seed: int = 0, dim: int = EMBED_DIM) -> list[np.ndarray]:
    templates = list(templates)
    if not templates:
        raise ValueError("need at least one template")
    if len(set(templates)) != len(templates):
        raise ValueError("duplicate templates")
    return [embed(t, seed, dim) for t in templates]
