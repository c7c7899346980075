"""Template banks, cosine retrieval/classification and top-k scoring."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data.types import StimulusRecord
from ..errors import DataError, DegenerateInputError, FormatError, ProtocolError


class BuildError(DataError):
    pass


@dataclass(frozen=True)
class TemplateBank:
    image_templates: np.ndarray        # (M, d)
    image_ids: tuple[int, ...]
    category_templates: np.ndarray     # (K, d)
    category_ids: tuple[int, ...]
    fingerprint: str

    @property
    def dim(self) -> int:
        return self.image_templates.shape[1]


def _bank_fingerprint(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()[:16]


def _check_rows(mat: np.ndarray, what: str, ids) -> None:
    if not np.isfinite(mat).all():
        raise BuildError(f"{what} templates contain NaN/Inf")
    zero = np.flatnonzero(np.linalg.norm(mat, axis=1) == 0)
    if len(zero):
        raise BuildError(f"{what} template for id {ids[zero[0]]} has zero norm")


def build_templates(catalog: Sequence[StimulusRecord], image_provider, text_provider,
                    one_image_per_category: bool = True) -> TemplateBank:
    """Image templates from the image provider, category templates from the coarse label text.

    Stimuli are ordered by image_id and categories by category_id, so the
    bank is independent of catalog order.
    """
    records = sorted(catalog, key=lambda r: r.image_id)
    if not records:
        raise BuildError("empty catalog")
    labels: dict[int, str] = {}
    for r in records:
        if labels.setdefault(r.category_id, r.coarse_text) != r.coarse_text:
            raise BuildError(f"category {r.category_id} has inconsistent coarse labels")
    if one_image_per_category and len(labels) != len(records):
        raise BuildError("expected exactly one image per test category")

    image_rows = []
    for r in records:
        try:
            image_rows.append(np.asarray(image_provider.embed_images([r])[0], dtype=np.float64))
        except Exception as exc:  # provider errors are arbitrary; name the stimulus
            raise BuildError(f"image provider failed on image {r.image_id} ({r.image_ref}): {exc}") from exc
    cat_ids = sorted(labels)
    cat_rows = []
    for c in cat_ids:
        try:
            cat_rows.append(np.asarray(text_provider.embed_texts([labels[c]])[0], dtype=np.float64))
        except Exception as exc:
            raise BuildError(f"text provider failed on category {c} ({labels[c]!r}): {exc}") from exc
    img = np.stack(image_rows)
    cat = np.stack(cat_rows)
    image_ids = tuple(r.image_id for r in records)
    _check_rows(img, "image", image_ids)
    _check_rows(cat, "category", cat_ids)
    fp = _bank_fingerprint(image_provider.fingerprint(), text_provider.fingerprint(), image_ids, tuple(cat_ids), img, cat)
    return TemplateBank(img, image_ids, cat, tuple(cat_ids), fp)


@dataclass
class RetrievalResult:
    query_id: int
    candidates: np.ndarray   # ids, best first
    scores: np.ndarray       # cosine, nonincreasing

    def rank_of(self, target: int) -> int:
        """1-based rank of ``target``."""
        hits = np.flatnonzero(self.candidates == target)
        if not len(hits):
            raise ProtocolError(f"id {target} is not in the template bank")
        return int(hits[0]) + 1


def _as_matrix(x) -> np.ndarray:
    if hasattr(x, "numpy") and hasattr(x, "modality"):
        x = x.numpy()
    elif hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def cosine_rank(queries, templates: np.ndarray, template_ids: Sequence[int],
                query_ids: Sequence[int] | None = None) -> list[RetrievalResult]:
    """Full ranking of templates per query by cosine; ties go to the smaller id."""
    q = _as_matrix(queries)
    if q.ndim != 2 or q.shape[1] != templates.shape[1]:
        raise FormatError(f"query width {q.shape[-1]} does not match template width {templates.shape[1]}")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    if (qn == 0).any():
        raise DegenerateInputError("zero-norm query: cosine similarity undefined")
    t = np.asarray(templates, dtype=np.float64)
    scores = (q / qn) @ (t / np.linalg.norm(t, axis=1, keepdims=True)).T
    ids = np.asarray(template_ids)
    if query_ids is None:
        query_ids = getattr(queries, "ids", None) or list(range(len(q)))
    out = []
    for qi, row in zip(query_ids, scores):
        order = np.lexsort((ids, -row))
        out.append(RetrievalResult(int(qi), ids[order].copy(), row[order].copy()))
    return out


def retrieve(zv_hat, bank: TemplateBank, query_ids: Sequence[int] | None = None) -> list[RetrievalResult]:
    return cosine_rank(zv_hat, bank.image_templates, bank.image_ids, query_ids)


def classify(zs_hat, bank: TemplateBank, query_ids: Sequence[int] | None = None) -> list[RetrievalResult]:
    return cosine_rank(zs_hat, bank.category_templates, bank.category_ids, query_ids)


@dataclass
class TopKReport:
    task: str
    top1: float
    top5: float
    n_queries: int
    ranks: list[int] = field(default_factory=list)
    k: int = 5
    top_k: float = 0.0

    def accuracy(self, k: int) -> float:
        return float(np.mean(np.asarray(self.ranks) <= k)) if self.ranks else 0.0


def topk_accuracy(results: Sequence[RetrievalResult], truth: Sequence[int], k: int = 5,
                  task: str = "retrieval") -> TopKReport:
    """Fraction of queries whose true id is among the first k candidates.

    ``top1``/``top5`` are always filled; ``top_k`` holds the value for ``k``.
    """
    if len(results) != len(truth):
        raise ProtocolError("one ground-truth id per query required")
    if k < 1:
        raise ProtocolError("k must be >= 1")
    ranks = [r.rank_of(int(t)) for r, t in zip(results, truth)]
    arr = np.asarray(ranks)
    n = len(arr)
    acc = (lambda kk: float(np.mean(arr <= kk)) if n else 0.0)
    return TopKReport(task, acc(1), acc(5), n, ranks, k, acc(k))
