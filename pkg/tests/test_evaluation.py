import numpy as np
import pytest

from finealign.errors import BadCandidateCountError, BadLabelError, ShapeError
from finealign.evaluation import (
    CandidateSet,
    bbox_classification_top1,
    candidate_accuracy,
    candidate_match_top1,
    recall_at_k,
    retrieval_metrics,
)


def rank_oracle(sims, k):
    n = len(sims)
    hits = 0
    for i in range(n):
        rank = sum(1 for j in range(n) if j != i and sims[i][j] >= sims[i][i])
        hits += rank < k
    return hits / n


class TestRecall:
    def test_identity(self):
        assert recall_at_k(np.eye(5), 1) == {"image_to_text": 1.0, "text_to_image": 1.0}

    def test_anti_diagonal(self):
        s = np.fliplr(np.eye(4))
        assert recall_at_k(s, 1) == {"image_to_text": 0.0, "text_to_image": 0.0}

    def test_rank_oracle(self, rng):
        for _ in range(20):
            s = rng.normal(size=(8, 8)).round(1)  # rounding forces ties
            for k in (1, 3, 5):
                r = recall_at_k(s, k)
                assert r["image_to_text"] == rank_oracle(s.tolist(), k)
                assert r["text_to_image"] == rank_oracle(s.T.tolist(), k)

    def test_monotone_in_k(self, rng):
        res = retrieval_metrics(rng.normal(size=(12, 12)))
        assert res.image_to_text[1] <= res.image_to_text[5] <= res.image_to_text[10]

    def test_not_square(self):
        with pytest.raises(ShapeError):
            recall_at_k(np.zeros((2, 3)), 1)


class TestBbox:
    def test_self_classes(self, rng):
        e = rng.normal(size=(6, 4))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        assert bbox_classification_top1(e, e, range(6)) == 1.0

    def test_orthogonal(self):
        assert bbox_classification_top1([[0.0, 1.0, 0.0]], np.eye(3), [1]) == 1.0

    def test_argmax_oracle(self, rng):
        r, c = rng.normal(size=(20, 6)), rng.normal(size=(5, 6))
        labels = rng.integers(5, size=20)
        want = sum(int(max(range(5), key=lambda j: r[i] @ c[j]) == labels[i]) for i in range(20)) / 20
        assert bbox_classification_top1(r, c, labels) == want

    def test_bad_label(self):
        with pytest.raises(BadLabelError):
            bbox_classification_top1(np.eye(2), np.eye(2), [0, 2])


class TestCandidates:
    def test_hit(self):
        e = np.eye(11)
        region = 0.9 * e[0] + 0.1 * e[1:].sum(axis=0)
        assert candidate_match_top1(region, CandidateSet(None, e[0], e[1:]))

    def test_tie_is_miss(self):
        e = np.eye(11)
        assert not candidate_match_top1(e[0] + e[3], e)

    def test_aggregate_oracle(self, rng):
        hits, want = [], 0
        for _ in range(50):
            cand, region = rng.normal(size=(11, 5)), rng.normal(size=5)
            s = cand @ region
            want += all(s[0] > s[j] for j in range(1, 11))
            hits.append(candidate_match_top1(region, cand))
        assert candidate_accuracy(hits) == want / 50

    def test_count(self):
        with pytest.raises(BadCandidateCountError):
            candidate_match_top1(np.ones(3), np.ones((10, 3)))
