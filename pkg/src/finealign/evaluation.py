"""Retrieval, box classification and candidate-matching metrics.

Ties are always resolved against the ground truth so metric values do not
depend on sort stability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadCandidateCountError, BadLabelError, ShapeError
from .model import CorpusEmbeddings

N_CANDIDATES = 11


def _hits(sims: np.ndarray, k: int) -> np.ndarray:
    """Row i hits if fewer than k other entries are >= the diagonal entry."""
    diag = np.diag(sims)
    competitors = (sims >= diag[:, None]).sum(axis=1) - 1
    return competitors < k


def recall_at_k(sims, k: int) -> dict[str, float]:
    """Image->text over rows and text->image over columns of a square matrix."""
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = s.shape[0]
    return {
        "image_to_text": int(_hits(s, k).sum()) / n,
        "text_to_image": int(_hits(s.T, k).sum()) / n,
    }


@dataclass(frozen=True)
class RetrievalResult:
    image_to_text: dict[int, float]
    text_to_image: dict[int, float]

    def as_dict(self) -> dict:
        return {
            "image_to_text": {f"R@{k}": v for k, v in self.image_to_text.items()},
            "text_to_image": {f"R@{k}": v for k, v in self.text_to_image.items()},
        }


def retrieval_metrics(sims, ks: Sequence[int] = (1, 5, 10)) -> RetrievalResult:
    i2t, t2i = {}, {}
    for k in ks:
        r = recall_at_k(sims, k)
        i2t[k], t2i[k] = r["image_to_text"], r["text_to_image"]
    return RetrievalResult(i2t, t2i)


def bbox_classification_top1(region_embs, class_embs, labels) -> float:
    """Fraction of rows whose most similar class (lowest index on ties) is the label.

    Applied to global image embeddings this is zero-shot classification.
    """
    r = np.atleast_2d(np.asarray(region_embs, dtype=np.float64))
    c = np.atleast_2d(np.asarray(class_embs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (r.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {r.shape[0]} regions")
    if np.any(labels < 0) or np.any(labels >= c.shape[0]):
        raise BadLabelError(f"labels must lie in [0, {c.shape[0]})")
    pred = np.argmax(r @ c.T, axis=1)
    return int(np.sum(pred == labels)) / r.shape[0]


@dataclass
class CandidateSet:
    box: tuple[float, float, float, float] | None
    positive: np.ndarray  # D
    distractors: np.ndarray  # 10 x D

    def embeddings(self) -> np.ndarray:
        return np.vstack([self.positive[None], self.distractors])


def candidate_match_top1(region_emb, candidates: CandidateSet | np.ndarray) -> bool:
    """Hit iff the positive (row 0) scores strictly above every distractor."""
    cand = candidates.embeddings() if isinstance(candidates, CandidateSet) else np.asarray(candidates, dtype=np.float64)
    if cand.ndim != 2 or cand.shape[0] != N_CANDIDATES:
        raise BadCandidateCountError(f"expected {N_CANDIDATES} candidates, got {cand.shape[0] if cand.ndim else 0}")
    s = cand @ np.asarray(region_emb, dtype=np.float64)
    return bool(np.all(s[0] > s[1:]))


def candidate_accuracy(hits: Sequence[bool]) -> float:
    hits = list(hits)
    return sum(1 for h in hits if h) / len(hits) if hits else 0.0


def fgovd_accuracy(emb: CorpusEmbeddings) -> float:
    """Top-1 accuracy of every region against its phrase and 10 hard negatives."""
    hits = [
        candidate_match_top1(emb.region[r], np.vstack([emb.phrase[r][None], emb.negs[r]]))
        for r in range(emb.region.shape[0])
    ]
    return candidate_accuracy(hits)


def corpus_retrieval(emb: CorpusEmbeddings, caption: str = "short") -> RetrievalResult:
    txt = emb.short if caption == "short" else emb.long
    return retrieval_metrics(emb.img @ txt.T)
