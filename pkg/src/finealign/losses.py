"""The five alignment objectives and their weighted combination.

Each loss takes unit-norm embeddings and returns a :class:`GradPair` whose
gradients are taken with respect to those unit embeddings (and the shared
sigmoid scale/bias).  Callers chain through normalization themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadIndexError,
    BadNegativeCountError,
    BatchTooSmallError,
    MissingComponentError,
    NotNormalizedError,
    ShapeError,
)
from .numerics import GradPair, exact_sum, log_sigmoid, sigmoid, softmax

COMPONENTS = ("global", "fgv", "fgt", "cmr", "tic")
N_NEGATIVES = 10
TIC_MAX_SIM = 0.95
TIC_TOP_K = 10


@dataclass(frozen=True)
class LossWeights:
    global_: float = 1.0
    fgv: float = 0.1
    fgt: float = 0.5
    cmr: float = 0.4
    tic: float = 0.1

    def __post_init__(self):
        if any(v < 0 for v in self.as_dict().values()):
            raise ValueError("loss weights must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {"global": self.global_, "fgv": self.fgv, "fgt": self.fgt, "cmr": self.cmr, "tic": self.tic}

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "LossWeights":
        d = dict(d)
        if "global" in d:
            d["global_"] = d.pop("global")
        return cls(**d)


@dataclass(frozen=True)
class SigmoidLossParams:
    log_scale: float = math.log(10.0)
    bias: float = -10.0


def _check_unit(name: str, x: np.ndarray, tol: float = 1e-6):
    norms = np.sqrt(np.einsum("...d,...d->...", x, x))
    if np.any(np.abs(norms - 1.0) > tol):
        raise NotNormalizedError(f"{name} rows are not unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def _pairwise_sigmoid(a: np.ndarray, b: np.ndarray, p: SigmoidLossParams):
    """-(1/N) sum_ij log sigmoid(z_ij (e^t S_ij + b)); returns value, dA, dB, dt, db."""
    n = a.shape[0]
    if n < 1 or b.shape[0] != n:
        raise ShapeError(f"paired sets must share N >= 1, got {a.shape[0]} and {b.shape[0]}")
    scale = math.exp(p.log_scale)
    sims = a @ b.T
    z = 2.0 * np.eye(n) - 1.0
    logits = scale * sims + p.bias
    value = -float(np.sum(log_sigmoid(z * logits))) / n
    g = -(z * sigmoid(-z * logits)) / n  # d value / d logits
    ds = scale * g
    return value, ds @ b, ds.T @ a, float(np.sum(g * sims) * scale), float(np.sum(g))


def global_sigmoid_loss(img_embs, txt_embs, p: SigmoidLossParams) -> GradPair:
    img = np.asarray(img_embs, dtype=np.float64)
    txt = np.asarray(txt_embs, dtype=np.float64)
    _check_unit("image", img)
    _check_unit("text", txt)
    v, da, db, dt, dbias = _pairwise_sigmoid(img, txt, p)
    return GradPair(v, {"img": da, "txt": db, "log_scale": np.array(dt), "bias": np.array(dbias)})


def dual_caption_global_loss(img_embs, short_txt_embs, long_txt_embs, p: SigmoidLossParams) -> GradPair:
    """Mean of the sigmoid loss against short captions and against long captions."""
    s = global_sigmoid_loss(img_embs, short_txt_embs, p)
    lg = global_sigmoid_loss(img_embs, long_txt_embs, p)
    return GradPair(
        0.5 * (s.value + lg.value),
        {
            "img": 0.5 * (s.grads["img"] + lg.grads["img"]),
            "short": 0.5 * s.grads["txt"],
            "long": 0.5 * lg.grads["txt"],
            "log_scale": 0.5 * (s.grads["log_scale"] + lg.grads["log_scale"]),
            "bias": 0.5 * (s.grads["bias"] + lg.grads["bias"]),
        },
    )


def fgv_regional_loss(region_embs, phrase_embs, p: SigmoidLossParams) -> GradPair:
    """Pairwise sigmoid loss between region features and their phrases."""
    g = global_sigmoid_loss(region_embs, phrase_embs, p)
    return GradPair(g.value, {"region": g.grads["img"], "phrase": g.grads["txt"], "log_scale": g.grads["log_scale"], "bias": g.grads["bias"]})


def fgt_batch_loss(region_embs, pos_embs, neg_embs, p: SigmoidLossParams, n_negatives: int = N_NEGATIVES) -> GradPair:
    """Per-candidate binary loss over 1 positive + n negatives, averaged over regions.

    Region ``r`` contributes ``(1/(n+1)) [-log s(l_pos) + sum_k -log s(-l_k)]``
    with ``l = e^t S + b``.
    """
    r = np.asarray(region_embs, dtype=np.float64)
    pos = np.asarray(pos_embs, dtype=np.float64)
    neg = np.asarray(neg_embs, dtype=np.float64)
    if neg.ndim != 3 or neg.shape[1] != n_negatives:
        raise BadNegativeCountError(f"expected {n_negatives} negatives per region, got shape {neg.shape}")
    if not (r.shape == pos.shape and neg.shape[0] == r.shape[0] and neg.shape[2] == r.shape[1]):
        raise ShapeError(f"mismatched shapes {r.shape}, {pos.shape}, {neg.shape}")
    for name, x in (("region", r), ("positive", pos), ("negative", neg)):
        _check_unit(name, x)
    n_reg = r.shape[0]
    scale = math.exp(p.log_scale)
    s_pos = np.einsum("rd,rd->r", r, pos)
    s_neg = np.einsum("rd,rkd->rk", r, neg)
    l_pos = scale * s_pos + p.bias
    l_neg = scale * s_neg + p.bias
    denom = (n_negatives + 1) * n_reg
    value = -(float(np.sum(log_sigmoid(l_pos))) + float(np.sum(log_sigmoid(-l_neg)))) / denom
    g_pos = -sigmoid(-l_pos) / denom
    g_neg = sigmoid(l_neg) / denom
    d_pos = scale * g_pos
    d_neg = scale * g_neg
    return GradPair(
        value,
        {
            "region": d_pos[:, None] * pos + np.einsum("rk,rkd->rd", d_neg, neg),
            "phrase": d_pos[:, None] * r,
            "negs": d_neg[..., None] * r[:, None, :],
            "log_scale": np.array(scale * (float(np.sum(g_pos * s_pos)) + float(np.sum(g_neg * s_neg)))),
            "bias": np.array(float(np.sum(g_pos)) + float(np.sum(g_neg))),
        },
    )


def fgt_hard_negative_loss(region_emb, pos_emb, neg_embs, p: SigmoidLossParams, n_negatives: int = N_NEGATIVES) -> GradPair:
    """Single-region form of :func:`fgt_batch_loss`."""
    g = fgt_batch_loss(np.asarray(region_emb)[None], np.asarray(pos_emb)[None], np.asarray(neg_embs)[None], p, n_negatives)
    grads = {k: (v[0] if k in ("region", "phrase", "negs") else v) for k, v in g.grads.items()}
    grads["pos"] = grads.pop("phrase")
    return GradPair(g.value, grads)


# -- cross-modal rank loss with synchronized margins -------------------------


@dataclass
class MarginState:
    """Per-slot margins plus the similarity cache from the previous step."""

    tau: np.ndarray
    prev_pos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prev_neg: np.ndarray = field(default_factory=lambda: np.zeros((0, N_NEGATIVES)))
    step: int = 0

    @classmethod
    def initial(cls, slots: int = N_NEGATIVES) -> "MarginState":
        return cls(np.zeros(slots), np.zeros(0), np.zeros((0, slots)), 0)

    def copy(self) -> "MarginState":
        return MarginState(self.tau.copy(), self.prev_pos.copy(), self.prev_neg.copy(), self.step)


def cmr_loss(pos_sims, neg_sims, margins: MarginState | np.ndarray) -> GradPair:
    """Mean over (pair, slot) of ``max(0, S_neg - S_pos + tau_k)``; margins get no gradient."""
    pos = np.asarray(pos_sims, dtype=np.float64)
    neg = np.asarray(neg_sims, dtype=np.float64)
    tau = np.asarray(margins.tau if isinstance(margins, MarginState) else margins, dtype=np.float64)
    if pos.ndim != 1 or neg.shape != (pos.shape[0], tau.shape[0]):
        raise ShapeError(f"pos {pos.shape}, neg {neg.shape} and tau {tau.shape} do not line up")
    terms = neg - pos[:, None] + tau[None, :]
    active = (terms > 0.0).astype(np.float64)
    count = max(terms.size, 1)
    value = float(np.sum(terms * active)) / count
    return GradPair(value, {"pos_sims": -active.sum(axis=1) / count, "neg_sims": active / count})


def cmr_embedding_loss(region_embs, phrase_embs, neg_embs, margins) -> tuple[GradPair, np.ndarray, np.ndarray]:
    """CMR on embeddings; also returns the (pos, neg) similarities it used."""
    r = np.asarray(region_embs, dtype=np.float64)
    pos = np.asarray(phrase_embs, dtype=np.float64)
    neg = np.asarray(neg_embs, dtype=np.float64)
    s_pos = np.einsum("rd,rd->r", r, pos)
    s_neg = np.einsum("rd,rkd->rk", r, neg)
    g = cmr_loss(s_pos, s_neg, margins)
    dp, dn = g.grads["pos_sims"], g.grads["neg_sims"]
    grads = {
        "region": dp[:, None] * pos + np.einsum("rk,rkd->rd", dn, neg),
        "phrase": dp[:, None] * r,
        "negs": dn[..., None] * r[:, None, :],
    }
    return GradPair(g.value, grads), s_pos, s_neg


def margin_partials(pos_sims, neg_sims) -> tuple[list[Fraction], int]:
    """Exact per-slot sums of ``S_pos - S_neg_k`` and the pair count for one shard."""
    pos = np.asarray(pos_sims, dtype=np.float64)
    neg = np.asarray(neg_sims, dtype=np.float64)
    if pos.ndim != 1 or neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
        raise ShapeError(f"cache shapes {pos.shape} and {neg.shape} do not line up")
    gaps = pos[:, None] - neg
    return [exact_sum(gaps[:, k]) for k in range(neg.shape[1])], int(pos.shape[0])


def margins_from_partials(sums: Sequence[Fraction], count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(len(sums))
    return np.array([float(s / count) for s in sums])


def cmr_update_margins(prev_pos_sims, prev_neg_sims, state: MarginState) -> MarginState:
    """Margins for the next step: per-slot mean gap over the previous global batch.

    Sums are exact rationals, so any sharding of the cache yields
    bit-identical margins.
    """
    neg = np.asarray(prev_neg_sims, dtype=np.float64)
    if neg.ndim == 2 and neg.shape[1] != state.tau.shape[0]:
        raise ShapeError(f"cache has {neg.shape[1]} slots, state has {state.tau.shape[0]}")
    sums, count = margin_partials(prev_pos_sims, neg)
    return MarginState(
        margins_from_partials(sums, count),
        np.array(prev_pos_sims, dtype=np.float64),
        neg.copy(),
        state.step + 1,
    )


# -- textual intra-modal contrastive loss ------------------------------------


@dataclass(frozen=True)
class TicNegativeSet:
    indices: tuple[int, ...]
    sims: tuple[float, ...]


def tic_select_negatives(text_embs, max_sim: float = TIC_MAX_SIM, top_k: int = TIC_TOP_K) -> list[TicNegativeSet]:
    """Per text: the ``top_k`` most similar other texts with similarity <= ``max_sim``.

    Ties in similarity go to the lower index.
    """
    t = np.asarray(text_embs, dtype=np.float64)
    n = t.shape[0]
    if n < 2:
        raise BatchTooSmallError("need at least two texts to select negatives")
    sims = t @ t.T
    idx = np.arange(n)
    out = []
    for i in range(n):
        keep = (idx != i) & (sims[i] <= max_sim)
        cand = idx[keep]
        order = np.lexsort((cand, -sims[i, cand]))[:top_k]
        chosen = cand[order]
        out.append(TicNegativeSet(tuple(int(j) for j in chosen), tuple(float(sims[i, j]) for j in chosen)))
    return out


def tic_loss(text_embs, neg_sets: Sequence[TicNegativeSet], reduction: str = "sum") -> GradPair:
    """``sum_i log sum_{m in T_i} exp(S(T_i, T_m))``; empty sets contribute 0.

    ``reduction="mean"`` divides by the number of texts.
    """
    t = np.asarray(text_embs, dtype=np.float64)
    n = t.shape[0]
    if len(neg_sets) != n:
        raise ShapeError(f"{len(neg_sets)} negative sets for {n} texts")
    grad = np.zeros_like(t)
    value = 0.0
    for i, ns in enumerate(neg_sets):
        if not ns.indices:
            continue
        m = np.asarray(ns.indices)
        if np.any(m < 0) or np.any(m >= n) or np.any(m == i):
            raise BadIndexError(f"negative set for text {i} has invalid indices {ns.indices}")
        s = t[m] @ t[i]
        top = float(np.max(s))
        value += top + math.log(float(np.sum(np.exp(s - top))))
        w = softmax(s)
        grad[i] += w @ t[m]
        np.add.at(grad, m, w[:, None] * t[i])
    if reduction == "mean":
        value /= n
        grad /= n
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return GradPair(value, {"text": grad})


# -- weighted total ----------------------------------------------------------


def total_loss(stage: int, components: Mapping[str, GradPair], w: LossWeights = LossWeights()) -> GradPair:
    """Stage 1: ``w_global * L_global``. Stage 2: weighted sum of all five."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    names = ("global",) if stage == 1 else COMPONENTS
    missing = [n for n in names if n not in components]
    if missing:
        raise MissingComponentError(f"stage {stage} needs components {missing}")
    weights = w.as_dict()
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name in names:
        lam = weights[name]
        gp = components[name]
        value += lam * gp.value
        for k, g in gp.grads.items():
            grads[k] = grads[k] + lam * g if k in grads else lam * np.asarray(g, dtype=np.float64)
    return GradPair(value, grads)
