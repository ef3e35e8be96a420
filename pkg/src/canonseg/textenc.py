"""Prompt embedding (bag-of-tokens + MLP) and the intention classification head."""

from __future__ import annotations

import re

import numpy as np

from . import tensor as T
from .prompts import Prompt, TemplateBank
from .tensor import ShapeMismatch, Tensor


class EmptyText(ValueError):
    """Tokenizer given empty or punctuation-only text."""


class DimMismatch(ShapeMismatch):
    """Embedding dimensionality differs from the head's weight shape."""


_TOKEN_RE = re.compile(r"[a-z0-9]+")

UNK = 0
PAD = 1


class Vocabulary:
    """Dense token->id map; UNK=0, PAD=1, then first-seen order."""

    def __init__(self, tokens: list[str], max_len: int = 16):
        self.max_len = max_len
        self.token_to_id: dict[str, int] = {}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = 2 + len(self.token_to_id)

    @classmethod
    def from_texts(cls, texts, max_len: int = 16) -> "Vocabulary":
        seen: list[str] = []
        have = set()
        for text in texts:
            for tok in _TOKEN_RE.findall(text.lower()):
                if tok not in have:
                    have.add(tok)
                    seen.append(tok)
        return cls(seen, max_len=max_len)

    @classmethod
    def from_bank(cls, bank: TemplateBank, max_len: int = 16) -> "Vocabulary":
        return cls.from_texts(bank.texts_for_vocabulary(), max_len=max_len)

    @property
    def size(self) -> int:
        return 2 + len(self.token_to_id)

    def to_json(self) -> dict:
        return {"max_len": self.max_len, "tokens": list(self.token_to_id)}

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        return cls(list(doc["tokens"]), max_len=int(doc["max_len"]))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on non-alphanumerics, map to ids, pad/truncate to max_len."""
    if not text or not text.strip():
        raise EmptyText("cannot tokenize empty text")
    words = _TOKEN_RE.findall(text.lower())
    if not words:
        raise EmptyText(f"no tokens in {text!r}")
    ids = [vocab.token_to_id.get(w, UNK) for w in words][: vocab.max_len]
    ids += [PAD] * (vocab.max_len - len(ids))
    return ids


class TextEncoderNet:
    """PAD-excluding token mean followed by a 2-layer MLP to dimension D."""

    def __init__(
        self,
        vocab: Vocabulary,
        dim: int = 64,
        token_dim: int = 32,
        hidden: int = 64,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.dim = dim
        dt = T.get_default_dtype()
        scale = 1.0 / np.sqrt(token_dim)
        self.table = Tensor(rng.normal(0, 0.1, (vocab.size, token_dim)).astype(dt), requires_grad=True)
        self.w1 = Tensor((rng.normal(0, scale, (token_dim, hidden))).astype(dt), requires_grad=True)
        self.b1 = Tensor(np.zeros((1, hidden), dtype=dt), requires_grad=True)
        self.w2 = Tensor((rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, dim))).astype(dt), requires_grad=True)
        self.b2 = Tensor(np.zeros((1, dim), dtype=dt), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("text.table", self.table),
            ("text.w1", self.w1),
            ("text.b1", self.b1),
            ("text.w2", self.w2),
            ("text.b2", self.b2),
        ]

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        for name, _ in self.parameters():
            attr = name.split(".", 1)[1]
            setattr(self, attr, Tensor(arrays[name], requires_grad=True))

    def encode_ids(self, ids: np.ndarray) -> Tensor:
        """(N, max_len) int ids -> (N, D) embeddings; PAD excluded from the mean.

        Pooling goes through a per-sample bag-of-counts vector, so any
        permutation of the non-PAD tokens produces a bit-identical embedding.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeMismatch(f"encode_ids expects (N, L), got {ids.shape}")
        n, _ = ids.shape
        dt = self.table.data.dtype
        bag = np.zeros((n, self.vocab.size), dtype=dt)
        for row, sample in enumerate(ids):
            for tok in sample:
                if tok != PAD:
                    bag[row, tok] += 1.0
        counts = np.maximum(bag.sum(axis=1, keepdims=True), 1.0)
        bag /= counts
        pooled = T.matmul(Tensor(bag, dtype=dt), self.table)
        ones = Tensor(np.ones((n, 1), dtype=dt))
        h = T.leaky_relu(T.matmul(pooled, self.w1) + T.matmul(ones, self.b1))
        return T.matmul(h, self.w2) + T.matmul(ones, self.b2)

    def encode_texts(self, texts: list[str]) -> Tensor:
        ids = np.array([tokenize(t, self.vocab) for t in texts], dtype=np.int64)
        return self.encode_ids(ids)

    def encode(self, prompt) -> Tensor:
        """Single prompt (Prompt or raw text) -> (D,) embedding."""
        text = prompt.text if isinstance(prompt, Prompt) else str(prompt)
        return T.reshape(self.encode_texts([text]), (self.dim,))


class IntentionHead:
    """Linear classifier y = W t + b over the dataset's class set."""

    def __init__(self, class_count: int, dim: int = 64, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(1)
        dt = T.get_default_dtype()
        self.class_count = class_count
        self.dim = dim
        self.weight = Tensor(
            (rng.normal(0, 1.0 / np.sqrt(dim), (class_count, dim))).astype(dt), requires_grad=True
        )
        self.bias = Tensor(np.zeros((1, class_count), dtype=dt), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("intent.weight", self.weight), ("intent.bias", self.bias)]

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        self.weight = Tensor(arrays["intent.weight"], requires_grad=True)
        self.bias = Tensor(arrays["intent.bias"], requires_grad=True)


def classify_intent(head: IntentionHead, t_p: Tensor) -> Tensor:
    """Intent logits for one embedding (D,) or a batch (N, D)."""
    single = t_p.ndim == 1
    if single:
        t_p = T.reshape(t_p, (1, t_p.shape[0]))
    if t_p.shape[1] != head.dim:
        raise DimMismatch(f"embedding dim {t_p.shape[1]} vs head dim {head.dim}")
    ones = Tensor(np.ones((t_p.shape[0], 1), dtype=t_p.data.dtype))
    logits = T.matmul(t_p, T.transpose(head.weight)) + T.matmul(ones, head.bias)
    return T.reshape(logits, (head.class_count,)) if single else logits
