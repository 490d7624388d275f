"""Frozen token-level text embeddings behind a pluggable encoder interface.

The reference encoder maps each token to a fixed unit-norm Gaussian vector
seeded by a hash of the token, so distinct tokens get stable, near-orthogonal
rows without any external checkpoint. A pretrained clinical encoder can be
dropped in later by implementing the same interface.
"""

import hashlib
import string
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ConfigError, EmptyTextError

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    if not text or not text.strip():
        raise EmptyTextError("text annotation is empty")
    tokens = text.lower().translate(_PUNCT_TABLE).split()
    if not tokens:
        raise EmptyTextError(f"text {text!r} contains no tokens")
    return tokens


@dataclass(frozen=True)
class TextEmbedding:
    """Token strings plus their L x d_text embedding matrix (read-only)."""

    tokens: tuple
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise EmptyTextError("embedding requires at least one token")
        if self.matrix.shape[0] != len(self.tokens):
            raise ConfigError("matrix rows must match token count")
        if not np.all(np.isfinite(self.matrix)):
            raise ConfigError("embedding matrix contains NaN or Inf")
        self.matrix.setflags(write=False)

    @property
    def d_text(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.tokens)


class TextEncoder(ABC):
    """Frozen encoder: same string in, identical matrix out, always."""

    d_text: int

    @abstractmethod
    def encode(self, text: str) -> TextEmbedding:
        ...

    @abstractmethod
    def state_digest(self) -> str:
        """Checksum of everything that determines the encoder's output."""
        ...


class HashedGaussianEncoder(TextEncoder):
    """Deterministic reference embedder: token -> seeded unit Gaussian vector."""

    def __init__(self, d_text: int = 64, seed: int = 0):
        if d_text < 1:
            raise ConfigError(f"d_text must be >= 1, got {d_text}")
        self.d_text = int(d_text)
        self.seed = int(seed)
        self._memo = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._memo.get(token)
        if vec is None:
            h = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8)
            rng = np.random.default_rng(int.from_bytes(h.digest(), "big"))
            vec = rng.standard_normal(self.d_text)
            vec /= np.linalg.norm(vec)
            vec = vec.astype(np.float32)
            vec.setflags(write=False)
            self._memo[token] = vec
        return vec

    def encode(self, text: str) -> TextEmbedding:
        tokens = tuple(tokenize(text))
        matrix = np.stack([self._token_vector(tok) for tok in tokens])
        return TextEmbedding(tokens=tokens, matrix=matrix)

    def state_digest(self) -> str:
        # the memo is a pure cache; output is fully determined by (class, d_text, seed)
        key = f"{type(self).__name__}:{self.d_text}:{self.seed}"
        return hashlib.sha256(key.encode()).hexdigest()
