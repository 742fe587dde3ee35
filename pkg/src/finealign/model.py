"""Glue between encoders and losses for one batch of samples.

Encoding runs one sample at a time so that every embedding is a pure
function of its own sample; this keeps the gathered embeddings
bit-identical however the batch is split across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig, Params, image_backward, image_forward, text_backward, text_forward
from .errors import ShapeError
from .losses import (
    LossWeights,
    MarginState,
    SigmoidLossParams,
    cmr_embedding_loss,
    dual_caption_global_loss,
    fgt_batch_loss,
    fgv_regional_loss,
    tic_loss,
    tic_select_negatives,
    total_loss,
)
from .numerics import GradPair, l2_normalize_backward, l2_normalize_rows
from .region import roi_weights
from .synthdata import Sample

EMBEDDING_KEYS = ("img", "short", "long", "region", "phrase", "negs")


@dataclass
class SampleEncoding:
    img: np.ndarray  # D
    short: np.ndarray  # D
    long: np.ndarray  # D
    region: np.ndarray  # r x D
    phrase: np.ndarray  # r x D
    negs: np.ndarray  # r x n x D
    roi: list[np.ndarray]  # per region, 1 x (H*W) sampling matrix
    image_cache: tuple
    text_cache: tuple
    grid_shape: tuple[int, int]


def forward_sample(params: Mapping[str, np.ndarray], cfg: EncoderConfig, sample: Sample, with_regions: bool, n_negatives: int = 10) -> SampleEncoding:
    grid, pooled, image_cache = image_forward(params, cfg, sample.image)
    h, w, d = grid.shape
    seqs = [sample.short_caption, sample.long_caption]
    roi, region = [], np.zeros((0, d))
    n_reg = len(sample.regions) if with_regions else 0
    if with_regions:
        flat = grid.reshape(h * w, d)
        for r in sample.regions:
            if len(r.hard_negatives) != n_negatives:
                raise ShapeError(f"region has {len(r.hard_negatives)} hard negatives, expected {n_negatives}")
            roi.append(roi_weights(h, w, r.box, 1, 1, 2))
        region = np.concatenate([m @ flat for m in roi]) if roi else region
        seqs += [r.phrase for r in sample.regions]
        seqs += [neg for r in sample.regions for neg in r.hard_negatives]
    texts, text_cache = text_forward(params, cfg, seqs)
    return SampleEncoding(
        img=pooled,
        short=texts[0],
        long=texts[1],
        region=region,
        phrase=texts[2 : 2 + n_reg],
        negs=texts[2 + n_reg :].reshape(n_reg, n_negatives, d),
        roi=roi,
        image_cache=image_cache,
        text_cache=text_cache,
        grid_shape=(h, w),
    )


def backward_sample(params, cfg: EncoderConfig, enc: SampleEncoding, grads: Mapping[str, np.ndarray]) -> Params:
    """Parameter gradients of one sample given gradients on its raw embeddings."""
    h, w = enc.grid_shape
    d_grid = None
    n_reg = len(enc.roi)
    if n_reg:
        flat = sum(m.T @ grads["region"][i : i + 1] for i, m in enumerate(enc.roi))
        d_grid = flat.reshape(h, w, cfg.dim)
    out = image_backward(params, cfg, enc.image_cache, d_grid, grads["img"])
    d_text = [grads["short"][None], grads["long"][None]]
    if n_reg:
        d_text += [grads["phrase"], grads["negs"].reshape(-1, cfg.dim)]
    out.update(text_backward(params, cfg, enc.text_cache, np.concatenate(d_text)))
    return out


@dataclass
class Shard:
    """Raw embeddings of a contiguous run of samples, in sample order."""

    encodings: list[SampleEncoding]
    raw: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def region_counts(self) -> list[int]:
        return [e.region.shape[0] for e in self.encodings]


def forward_shard(params, cfg: EncoderConfig, samples: Sequence[Sample], with_regions: bool, n_negatives: int = 10) -> Shard:
    encs = [forward_sample(params, cfg, s, with_regions, n_negatives) for s in samples]
    d = cfg.dim
    raw = {
        "img": np.stack([e.img for e in encs]),
        "short": np.stack([e.short for e in encs]),
        "long": np.stack([e.long for e in encs]),
        "region": np.concatenate([e.region for e in encs]) if encs else np.zeros((0, d)),
        "phrase": np.concatenate([e.phrase for e in encs]) if encs else np.zeros((0, d)),
        "negs": np.concatenate([e.negs for e in encs]) if encs else np.zeros((0, n_negatives, d)),
    }
    return Shard(encs, raw)


def gather(shards: Sequence[Shard]) -> dict[str, np.ndarray]:
    """All-gather: concatenate raw embeddings in worker order."""
    return {k: np.concatenate([s.raw[k] for s in shards]) for k in EMBEDDING_KEYS}


def backward_shard(params, cfg: EncoderConfig, shard: Shard, raw_grads: Mapping[str, np.ndarray]) -> Params:
    """Sum of per-sample parameter gradients, accumulated in sample order."""
    total: Params = {}
    r0 = 0
    for i, enc in enumerate(shard.encodings):
        nr = enc.region.shape[0]
        g = {
            "img": raw_grads["img"][i],
            "short": raw_grads["short"][i],
            "long": raw_grads["long"][i],
        }
        if nr:
            g.update(
                region=raw_grads["region"][r0 : r0 + nr],
                phrase=raw_grads["phrase"][r0 : r0 + nr],
                negs=raw_grads["negs"][r0 : r0 + nr],
            )
        r0 += nr
        for k, v in backward_sample(params, cfg, enc, g).items():
            total[k] = total[k] + v if k in total else v
    return total


@dataclass
class Objective:
    total: GradPair  # grads keyed by EMBEDDING_KEYS (raw, pre-normalization) + loss scalars
    components: dict[str, float]
    pos_sims: np.ndarray
    neg_sims: np.ndarray


def objective_on_gathered(
    raw: Mapping[str, np.ndarray],
    scalars: SigmoidLossParams,
    margins: MarginState,
    stage: int,
    weights: LossWeights,
    tic_reduction: str = "sum",
    n_negatives: int = 10,
) -> Objective:
    """Weighted objective over the global batch, differentiated w.r.t. raw embeddings."""
    unit, norms = {}, {}
    keys = EMBEDDING_KEYS if stage == 2 else ("img", "short", "long")
    for k in keys:
        unit[k], norms[k] = l2_normalize_rows(raw[k])
    comps: dict[str, GradPair] = {"global": dual_caption_global_loss(unit["img"], unit["short"], unit["long"], scalars)}
    pos_sims = np.zeros(0)
    neg_sims = np.zeros((0, n_negatives))
    if stage == 2:
        g = fgv_regional_loss(unit["region"], unit["phrase"], scalars)
        comps["fgv"] = g
        comps["fgt"] = fgt_batch_loss(unit["region"], unit["phrase"], unit["negs"], scalars, n_negatives)
        comps["cmr"], pos_sims, neg_sims = cmr_embedding_loss(unit["region"], unit["phrase"], unit["negs"], margins)
        sets = tic_select_negatives(unit["phrase"])
        t = tic_loss(unit["phrase"], sets, tic_reduction)
        comps["tic"] = GradPair(t.value, {"phrase": t.grads["text"]})
    total = total_loss(stage, comps, weights)
    grads = {}
    for k in keys:
        gu = total.grads.get(k)
        grads[k] = np.zeros_like(raw[k]) if gu is None else l2_normalize_backward(unit[k], norms[k], gu)
    for k in ("region", "phrase", "negs"):
        grads.setdefault(k, np.zeros_like(raw[k]))
    grads["log_scale"] = np.asarray(total.grads.get("log_scale", 0.0))
    grads["bias"] = np.asarray(total.grads.get("bias", 0.0))
    values = {name: (comps[name].value if name in comps else None) for name in ("global", "fgv", "fgt", "cmr", "tic")}
    return Objective(GradPair(total.value, grads), values, pos_sims, neg_sims)


def loss_scalars(params: Mapping[str, np.ndarray]) -> SigmoidLossParams:
    return SigmoidLossParams(float(params["loss.log_scale"]), float(params["loss.bias"]))


def complete_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Params:
    """Fill parameters that received no gradient with exact zeros."""
    return {k: np.asarray(grads[k], dtype=np.float64) if k in grads else np.zeros_like(v) for k, v in params.items()}


def batch_objective(
    params: Mapping[str, np.ndarray],
    cfg: EncoderConfig,
    samples: Sequence[Sample],
    margins: MarginState,
    stage: int,
    weights: LossWeights = LossWeights(),
    tic_reduction: str = "sum",
    n_negatives: int = 10,
) -> tuple[GradPair, Objective]:
    """Single-process loss and full parameter gradient for one batch."""
    shard = forward_shard(params, cfg, samples, stage == 2, n_negatives)
    obj = objective_on_gathered(shard.raw, loss_scalars(params), margins, stage, weights, tic_reduction, n_negatives)
    grads = backward_shard(params, cfg, shard, obj.total.grads)
    grads["loss.log_scale"] = obj.total.grads["log_scale"]
    grads["loss.bias"] = obj.total.grads["bias"]
    return GradPair(obj.total.value, complete_grads(params, grads)), obj


@dataclass
class CorpusEmbeddings:
    img: np.ndarray
    short: np.ndarray
    long: np.ndarray
    region: np.ndarray
    phrase: np.ndarray
    negs: np.ndarray
    region_owner: np.ndarray


def embed_corpus(params, cfg: EncoderConfig, samples: Sequence[Sample], n_negatives: int = 10) -> CorpusEmbeddings:
    """Unit embeddings of every image, caption, region, phrase and hard negative."""
    shard = forward_shard(params, cfg, samples, True, n_negatives)
    unit = {k: l2_normalize_rows(v)[0] if v.shape[0] else v for k, v in shard.raw.items()}
    owner = np.repeat(np.arange(len(samples)), shard.region_counts)
    return CorpusEmbeddings(region_owner=owner, **unit)
