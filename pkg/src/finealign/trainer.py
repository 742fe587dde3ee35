"""Two-stage training loop: AdamW with linear warmup over simulated workers."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .distsim import parallel_train_step, worker_hash
from .encoder import (
    EncoderConfig,
    Params,
    init_params,
    load_checkpoint,
    save_checkpoint,
    select_resolution_bucket,
)
from .errors import DesyncError, MissingCheckpointError, NonFiniteGradError, ShapeError
from .losses import LossWeights, MarginState
from .synthdata import Sample, max_token_id

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-6
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup: int = 300
    batch_size: int | None = None  # None -> 32 in stage 1, 16 in stage 2
    workers: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    epochs: int = 1
    max_steps: int | None = None
    tic_reduction: str = "sum"
    n_negatives: int = 10
    threads: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("lr", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup < 0 or self.workers < 1:
            raise ValueError("weight_decay and warmup must be >= 0, workers >= 1")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if self.stage == 1 else 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights.from_dict(d["weights"])
        return cls(**d)

    @classmethod
    def desk(cls, stage: int, **overrides) -> "TrainConfig":
        """Desk-scale settings: short warmup and a learning rate that moves a toy model."""
        base = dict(stage=stage, lr=3e-3, warmup=30, epochs=1, max_steps=200)
        base.update(overrides)
        return cls(**base)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to ``cfg.lr`` over ``cfg.warmup`` steps, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup == 0 or step >= cfg.warmup:
        return cfg.lr
    return cfg.lr * step / cfg.warmup


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> tuple[Params, OptimizerState]:
    """One AdamW update with decoupled weight decay; inputs are not mutated."""
    lr = cfg.lr if lr is None else lr
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(f"non-finite gradient for {name}")
    t = state.step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        decayed = p - lr * cfg.weight_decay * p
        new_p[name] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(new_m, new_v, t)


def encoder_config_for(corpus: Sequence[Sample], overrides: Mapping | None = None) -> EncoderConfig:
    """Encoder sized to the corpus vocabulary and patch codes."""
    d = dict(overrides or {})
    d.setdefault("vocab_size", max_token_id(corpus) + 1)
    d["vocab_size"] = max(d["vocab_size"], max_token_id(corpus) + 1)
    d.setdefault("patch_dim", int(corpus[0].image.shape[-1]))
    return EncoderConfig.from_dict(d)


def check_batch_bucket(batch: Sequence[Sample], enc: EncoderConfig) -> int:
    """Pick the batch's resolution bucket and require every image to be laid out for it."""
    max_side = max(max(s.image.shape[:2]) for s in batch) * enc.patch_size
    bucket = select_resolution_bucket(max_side, enc.buckets)
    side = bucket // enc.patch_size
    for s in batch:
        if s.image.shape[:2] != (side, side):
            raise ShapeError(f"image grid {s.image.shape[:2]} does not match bucket {bucket} ({side}x{side} patches)")
    return bucket


def iterate_batches(n: int, cfg: TrainConfig):
    """Yield index batches forever: a seeded permutation per epoch, chunked."""
    bs = min(cfg.effective_batch_size, n)
    epoch = 0
    while True:
        order = np.random.default_rng([cfg.seed, cfg.stage, epoch]).permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if len(idx) >= cfg.workers:
                yield epoch, [int(i) for i in idx]
        epoch += 1


def total_steps(n: int, cfg: TrainConfig) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    bs = min(cfg.effective_batch_size, n)
    return cfg.epochs * math.ceil(n / bs)


def _fmt(x):
    return None if x is None else float(x)


def _atomic_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class StageResult:
    params: Params
    margins: MarginState
    metrics: list[dict]
    encoder: EncoderConfig
    checkpoint: Path | None = None


def run_stage(
    corpus: Sequence[Sample],
    cfg: TrainConfig,
    out_dir=None,
    init_checkpoint=None,
    encoder_overrides: Mapping | None = None,
) -> StageResult:
    """Train one stage and (optionally) write ``checkpoint/`` and ``metrics.jsonl`` under ``out_dir``."""
    if cfg.stage == 2 and init_checkpoint is None:
        raise MissingCheckpointError("stage 2 starts from a stage-1 checkpoint")
    if init_checkpoint is not None:
        ckpt = Path(init_checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise MissingCheckpointError(f"no checkpoint at {ckpt}")
        params, meta = load_checkpoint(ckpt)
        enc = EncoderConfig.from_dict(meta["encoder"])
    else:
        enc = encoder_config_for(corpus, encoder_overrides)
        params = init_params(enc, cfg.seed)

    k = cfg.workers
    replicas = [{n: p.copy() for n, p in params.items()} for _ in range(k)]
    opt = [OptimizerState.zeros_like(params) for _ in range(k)]
    margins = [MarginState.initial(cfg.n_negatives) for _ in range(k)]
    metrics: list[dict] = []
    steps = total_steps(len(corpus), cfg)
    batches = iterate_batches(len(corpus), cfg)
    for step in range(steps):
        _, idx = next(batches)
        batch = [corpus[i] for i in idx]
        check_batch_bucket(batch, enc)
        lr = lr_schedule(step, cfg)
        res = parallel_train_step(batch, replicas, margins, enc, cfg.stage, cfg.weights, cfg.tic_reduction, cfg.n_negatives, cfg.threads)
        for w in range(k):
            replicas[w], opt[w] = adamw_step(replicas[w], res.grads[w], opt[w], cfg, lr)
        margins = res.margins
        hashes = {worker_hash(replicas[w], margins[w]) for w in range(k)}
        if len(hashes) != 1:
            raise DesyncError(f"workers diverged after step {step}")
        c = res.components
        record = {
            "step": step,
            "lr": lr,
            "loss_total": float(res.loss),
            "loss_global": _fmt(c["global"]),
            "loss_fgv": _fmt(c["fgv"]),
            "loss_fgt": _fmt(c["fgt"]),
            "loss_cmr": _fmt(c["cmr"]),
            "loss_tic": _fmt(c["tic"]),
            "tau": [float(t) for t in res.tau_used],
            "worker_hash": hashes.pop(),
        }
        metrics.append(record)
        if step % 50 == 0:
            log.info("stage %d step %d loss %.5f", cfg.stage, step, res.loss)

    final = replicas[0]
    result = StageResult(final, margins[0], metrics, enc)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "stage": cfg.stage,
            "steps": steps,
            "encoder": enc.to_dict(),
            "train": cfg.to_dict(),
            "tau": [float(t) for t in margins[0].tau],
        }
        result.checkpoint = save_checkpoint(out / "checkpoint", final, meta)
        _atomic_text(out / "metrics.jsonl", "".join(json.dumps(r) + "\n" for r in metrics))
    return result
