"""Central-difference verification of every loss and of the full model gradient."""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .encoder import init_params
from .losses import (
    LossWeights,
    MarginState,
    SigmoidLossParams,
    cmr_embedding_loss,
    dual_caption_global_loss,
    fgt_batch_loss,
    fgv_regional_loss,
    global_sigmoid_loss,
    tic_loss,
    tic_select_negatives,
)
from .model import batch_objective, forward_shard
from .numerics import GradPair, finite_diff_grads, l2_normalize_backward, l2_normalize_rows, sample_coords
from .synthdata import CorpusConfig, generate_corpus
from .trainer import encoder_config_for

H = 1e-5


def _on_raw(loss: Callable[..., GradPair], keys: Mapping[str, str], **fixed) -> Callable[[Mapping[str, np.ndarray]], GradPair]:
    """Wrap a unit-embedding loss as a function of raw (unnormalized) embeddings.

    ``keys`` maps parameter names to the loss's gradient keys, in call order.
    """

    def f(params):
        units, norms = {}, {}
        for name in keys:
            units[name], norms[name] = l2_normalize_rows(params[name])
        scalars = SigmoidLossParams(float(params.get("log_scale", 0.0)), float(params.get("bias", 0.0)))
        out = loss(*[units[n] for n in keys], scalars, **fixed) if "log_scale" in params else loss(*[units[n] for n in keys], **fixed)
        if isinstance(out, tuple):
            out = out[0]
        grads = {n: l2_normalize_backward(units[n], norms[n], out.grads[g]) for n, g in keys.items()}
        for s in ("log_scale", "bias"):
            if s in out.grads:
                grads[s] = np.asarray(out.grads[s])
        return GradPair(out.value, grads)

    return f


def _max_rel_error(f, params, h=H, coords=None, seed=0) -> float:
    gp = f(params)
    coords = coords or sample_coords(params, None, np.random.default_rng(seed))
    fd = finite_diff_grads(lambda p: f(p).value, params, coords, h)
    worst = 0.0
    for name, vals in fd.items():
        g = np.asarray(gp.grads.get(name, np.zeros_like(params[name])))
        for idx, num in vals.items():
            worst = max(worst, abs(float(g[idx]) - num) / max(1.0, abs(num)))
    return worst


def kink_distance(pos_sims: np.ndarray, neg_sims: np.ndarray, tau: np.ndarray) -> float:
    """Smallest |hinge argument| of the CMR terms."""
    return float(np.min(np.abs(neg_sims - pos_sims[:, None] + tau[None, :])))


def tic_selection_gap(text_units: np.ndarray, max_sim: float = 0.95, top_k: int = 10) -> float:
    """How far the TIC selection is from flipping: threshold distance and rank-boundary gaps."""
    s = text_units @ text_units.T
    n = s.shape[0]
    gap = math.inf
    for i in range(n):
        others = np.delete(s[i], i)
        gap = min(gap, float(np.min(np.abs(others - max_sim))))
        kept = np.sort(others[others <= max_sim])[::-1]
        if kept.size > top_k:
            gap = min(gap, float(kept[top_k - 1] - kept[top_k]))
    return gap


def check_global(seed: int = 0, h: float = H) -> float:
    rng = np.random.default_rng(seed)
    p = {"img": rng.normal(size=(4, 6)), "txt": rng.normal(size=(4, 6)), "log_scale": np.array(0.7), "bias": np.array(-1.5)}
    return _max_rel_error(_on_raw(global_sigmoid_loss, {"img": "img", "txt": "txt"}), p, h)


def check_dual_caption(seed: int = 0, h: float = H) -> float:
    rng = np.random.default_rng(seed + 1)
    p = {k: rng.normal(size=(4, 6)) for k in ("img", "short", "long")}
    p.update(log_scale=np.array(0.4), bias=np.array(-0.8))
    return _max_rel_error(_on_raw(dual_caption_global_loss, {"img": "img", "short": "short", "long": "long"}), p, h)


def check_fgv(seed: int = 0, h: float = H) -> float:
    rng = np.random.default_rng(seed + 2)
    p = {"region": rng.normal(size=(3, 6)), "phrase": rng.normal(size=(3, 6)), "log_scale": np.array(1.1), "bias": np.array(-2.0)}
    return _max_rel_error(_on_raw(fgv_regional_loss, {"region": "region", "phrase": "phrase"}), p, h)


def check_fgt(seed: int = 0, h: float = H) -> float:
    rng = np.random.default_rng(seed + 3)
    p = {
        "region": rng.normal(size=(2, 6)),
        "phrase": rng.normal(size=(2, 6)),
        "negs": rng.normal(size=(2, 10, 6)),
        "log_scale": np.array(0.9),
        "bias": np.array(-1.0),
    }
    return _max_rel_error(_on_raw(fgt_batch_loss, {"region": "region", "phrase": "phrase", "negs": "negs"}), p, h)


def check_cmr(seed: int = 0, h: float = H) -> float:
    rng = np.random.default_rng(seed + 4)
    for _ in range(1000):
        p = {"region": rng.normal(size=(2, 6)), "phrase": rng.normal(size=(2, 6)), "negs": rng.normal(size=(2, 10, 6))}
        tau = rng.uniform(-0.3, 0.6, size=10)
        u = {k: l2_normalize_rows(v)[0] for k, v in p.items()}
        pos = np.einsum("rd,rd->r", u["region"], u["phrase"])
        neg = np.einsum("rd,rkd->rk", u["region"], u["negs"])
        active = neg - pos[:, None] + tau > 0
        # probe at least 10h away from every hinge kink, with both hinge branches present
        if kink_distance(pos, neg, tau) >= 10 * h and active.any() and not active.all():
            break
    else:
        raise RuntimeError("no kink-free CMR probe found")
    f = _on_raw(cmr_embedding_loss, {"region": "region", "phrase": "phrase", "negs": "negs"}, margins=tau)
    return _max_rel_error(f, p, h)


def check_tic(seed: int = 0, h: float = H) -> float:
    rng = np.random.default_rng(seed + 5)
    for _ in range(1000):
        raw = rng.normal(size=(14, 6))
        if tic_selection_gap(l2_normalize_rows(raw)[0]) >= 10 * h:
            break
    else:
        raise RuntimeError("no stable TIC probe found")

    def loss(text):
        return tic_loss(text, tic_select_negatives(text))

    f = _on_raw(loss, {"text": "text"})
    return _max_rel_error(f, {"text": raw}, h)


def _model_probe(seed: int, stage: int, h: float, per_param: int):
    corpus = generate_corpus(CorpusConfig(samples=4, seed=seed))
    enc = encoder_config_for(corpus, {"dim": 8})
    rng = np.random.default_rng(seed + 6)
    for attempt in range(100):
        params = init_params(enc, seed + attempt)
        margins = MarginState.initial()
        margins.tau = rng.uniform(-0.3, 0.3, size=10)
        if stage == 1:
            break
        shard = forward_shard(params, enc, corpus, True)
        u = {k: l2_normalize_rows(v)[0] for k, v in shard.raw.items()}
        pos = np.einsum("rd,rd->r", u["region"], u["phrase"])
        neg = np.einsum("rd,rkd->rk", u["region"], u["negs"])
        # parameter nudges of size h move similarities by O(h); keep a wide berth
        if kink_distance(pos, neg, margins.tau) >= 1e3 * h and tic_selection_gap(u["phrase"]) >= 1e3 * h:
            break
    else:
        raise RuntimeError("no kink-free model probe found")
    coords = sample_coords(params, per_param, np.random.default_rng(seed))
    used = sorted({t for s in corpus for t in s.short_caption + s.long_caption + [x for r in s.regions for x in r.phrase + sum(r.hard_negatives, [])]})
    max_len = max(len(s.long_caption) for s in corpus)
    coords["txt.tok_emb"] = [(t, j) for t in used[:: max(1, len(used) // per_param)][:per_param] for j in (0, enc.dim - 1)]
    coords["txt.pos_emb"] = [(i, i % enc.dim) for i in range(max_len)]

    def f(p):
        return batch_objective(p, enc, corpus, margins, stage, LossWeights())[0]

    return f, params, coords


def check_total(seed: int = 0, h: float = H, stage: int = 2, per_param: int = 6) -> float:
    """Full weighted objective on a 4-sample synthetic batch, through both encoders."""
    f, params, coords = _model_probe(seed, stage, h, per_param)
    return _max_rel_error(f, params, h, coords)


CHECKS: dict[str, Callable[..., float]] = {
    "global": check_global,
    "dual_caption": check_dual_caption,
    "fgv": check_fgv,
    "fgt": check_fgt,
    "cmr": check_cmr,
    "tic": check_tic,
    "total_stage1": lambda seed=0, h=H: check_total(seed, h, stage=1),
    "total": check_total,
}


def run_suite(seed: int = 0, h: float = H) -> dict[str, float]:
    return {name: float(fn(seed=seed, h=h)) for name, fn in CHECKS.items()}
