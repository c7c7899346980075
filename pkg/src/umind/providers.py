"""Frozen embedding providers.

Providers stand in for pretrained image/text encoders. Anything exposing
``dim``, ``fingerprint()`` and the relevant ``embed_*`` method works; the
classes here cover lookup tables (synthetic oracle, precomputed real
embeddings) and a hashing fallback for arbitrary text.
"""

from __future__ import annotations

import hashlib
import os
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import tensorfile
from .data.types import StimulusRecord
from .errors import DataError, FormatError


class ImageProvider(Protocol):
    dim: int

    def embed_images(self, records: Sequence[StimulusRecord]) -> np.ndarray: ...

    def fingerprint(self) -> str: ...


class TextProvider(Protocol):
    dim: int

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def fingerprint(self) -> str: ...


class PromptProvider(Protocol):
    """Sequence ("prompt") and pooled embeddings of a text, as a generator's text encoder emits them."""

    n_tokens: int
    d_prompt: int
    d_pool: int

    def encode_prompts(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]: ...

    def fingerprint(self) -> str: ...


class ProviderError(DataError):
    pass


def fused_prompt(record: StimulusRecord) -> str:
    """Prompt text combining both granularities: ``"<coarse>. <fine>"``."""
    return f"{record.coarse_text}. {record.fine_text}"


def _hash_arrays(tag: str, table: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256(tag.encode())
    for key in sorted(table):
        h.update(key.encode("utf-8") + b"\0")
        h.update(np.ascontiguousarray(table[key], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


class TableImageProvider:
    """Looks image embeddings up by ``image_ref``."""

    def __init__(self, table: Mapping[str, np.ndarray]):
        self.table = {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}
        self.dim = len(next(iter(self.table.values())))
        self._fp = _hash_arrays("image", self.table)

    def embed_images(self, records):
        try:
            return np.stack([self.table[r.image_ref] for r in records])
        except KeyError as exc:
            raise ProviderError(f"no image embedding for {exc.args[0]!r}") from None

    def fingerprint(self):
        return self._fp


class HashingTextProvider:
    """Deterministic pseudo-random unit vector per distinct string."""

    def __init__(self, dim: int, salt: str = ""):
        self.dim = dim
        self.salt = salt

    def _one(self, text: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256((self.salt + "\0" + text).encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed_texts(self, texts):
        return np.stack([self._one(t) for t in texts])

    def fingerprint(self):
        return hashlib.sha256(f"hashing:{self.dim}:{self.salt}".encode()).hexdigest()[:16]


class TableTextProvider:
    """Lookup by exact text; unknown strings fall back to hashing when allowed."""

    def __init__(self, table: Mapping[str, np.ndarray], fallback: bool = False):
        self.table = {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}
        self.dim = len(next(iter(self.table.values())))
        self._fallback = HashingTextProvider(self.dim) if fallback else None
        self._fp = _hash_arrays("text", self.table)

    def embed_texts(self, texts):
        rows = []
        for t in texts:
            if t in self.table:
                rows.append(self.table[t])
            elif self._fallback is not None:
                rows.append(self._fallback._one(t))
            else:
                raise ProviderError(f"no text embedding for {t!r}")
        return np.stack(rows)

    def fingerprint(self):
        return self._fp


class TablePromptProvider:
    def __init__(self, sequences: Mapping[str, np.ndarray], pooled: Mapping[str, np.ndarray]):
        self.sequences = {k: np.asarray(v, dtype=np.float32) for k, v in sequences.items()}
        self.pooled = {k: np.asarray(v, dtype=np.float32) for k, v in pooled.items()}
        first = next(iter(self.sequences.values()))
        self.n_tokens, self.d_prompt = first.shape
        self.d_pool = len(next(iter(self.pooled.values())))
        self._fp = _hash_arrays("prompt", {**{"s:" + k: v for k, v in self.sequences.items()},
                                           **{"p:" + k: v for k, v in self.pooled.items()}})

    def encode_prompts(self, texts):
        try:
            return (np.stack([self.sequences[t] for t in texts]), np.stack([self.pooled[t] for t in texts]))
        except KeyError as exc:
            raise ProviderError(f"no prompt embedding for {exc.args[0]!r}") from None

    def fingerprint(self):
        return self._fp


def load_image_provider(path: str | os.PathLike) -> TableImageProvider:
    """Precomputed image embeddings: tensor container with ``embedding`` [n, d]
    and header meta ``image_refs`` (list of n strings)."""
    arrays, meta = tensorfile.load(path)
    refs = meta.get("image_refs")
    if refs is None or len(refs) != len(arrays.get("embedding", [])):
        raise FormatError(f"{path}: needs 'embedding' tensor and matching 'image_refs' meta")
    return TableImageProvider(dict(zip(refs, arrays["embedding"])))


def load_text_provider(path: str | os.PathLike) -> TableTextProvider:
    """Precomputed text embeddings: ``embedding`` [n, d] plus meta ``texts``."""
    arrays, meta = tensorfile.load(path)
    texts = meta.get("texts")
    if texts is None or len(texts) != len(arrays.get("embedding", [])):
        raise FormatError(f"{path}: needs 'embedding' tensor and matching 'texts' meta")
    return TableTextProvider(dict(zip(texts, arrays["embedding"])))


def load_prompt_provider(path: str | os.PathLike) -> TablePromptProvider:
    """Precomputed prompt targets: ``sequence`` [n, L, d_prompt], ``pooled`` [n, d_pool], meta ``texts``."""
    arrays, meta = tensorfile.load(path)
    texts = meta.get("texts")
    if texts is None or "sequence" not in arrays or "pooled" not in arrays:
        raise FormatError(f"{path}: needs 'sequence', 'pooled' tensors and 'texts' meta")
    return TablePromptProvider(dict(zip(texts, arrays["sequence"])), dict(zip(texts, arrays["pooled"])))


def save_table(path: str | os.PathLike, keys: list[str], embeddings: np.ndarray, key_name: str) -> None:
    tensorfile.save(path, {"embedding": np.asarray(embeddings, dtype=np.float32)}, {key_name: list(keys)})
