"""Simulated K-worker data parallelism.

Each worker encodes its contiguous shard of the batch.  Embeddings are
all-gathered so batch-coupled losses (pairwise sigmoid over all pairs, TIC
negative selection) see the whole global batch; each worker then
back-propagates only into its own samples.  Gradients are all-reduced as a
shard-size weighted mean, and CMR margin statistics are all-reduced as
exact rational sums so the margins are bit-identical for any sharding.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig, Params, params_digest
from .errors import DesyncError, ShapeError, TooFewSamplesError
from .losses import LossWeights, MarginState, margin_partials, margins_from_partials
from .model import Shard, backward_shard, complete_grads, forward_shard, gather, loss_scalars, objective_on_gathered
from .synthdata import Sample


@dataclass
class WorkerShard:
    worker: int
    start: int
    stop: int
    grads: Params = field(default_factory=dict)
    margin_sums: list[Fraction] = field(default_factory=list)
    margin_count: int = 0

    @property
    def size(self) -> int:
        return self.stop - self.start

    def indices(self) -> range:
        return range(self.start, self.stop)


@dataclass
class ReduceResult:
    value: object
    count: int


def shard_batch(n: int, k: int) -> list[WorkerShard]:
    """Contiguous balanced partition: the first ``n % k`` workers get one extra sample."""
    if k < 1:
        raise ValueError("need at least one worker")
    if n < k:
        raise TooFewSamplesError(f"{n} samples cannot be split across {k} workers")
    base, extra = divmod(n, k)
    shards, start = [], 0
    for w in range(k):
        size = base + (1 if w < extra else 0)
        shards.append(WorkerShard(w, start, start + size))
        start += size
    return shards


def all_reduce(values: Sequence, mode: str = "sum", counts: Sequence[int] | None = None) -> ReduceResult:
    """Reduce per-worker arrays (or dicts of arrays) in fixed worker order.

    ``mode="mean"`` weights worker ``w`` by ``counts[w] / sum(counts)``.
    """
    if not values:
        raise ValueError("nothing to reduce")
    counts = list(counts) if counts is not None else [1] * len(values)
    if len(counts) != len(values):
        raise ShapeError("one count per worker required")
    total = sum(counts)
    if isinstance(values[0], Mapping):
        keys = list(values[0])
        if any(list(v) != keys for v in values):
            raise ShapeError("workers disagree on tensor names")
        reduced = {k: all_reduce([v[k] for v in values], mode, counts).value for k in keys}
        return ReduceResult(reduced, total)
    arrays = [np.asarray(v, dtype=np.float64) for v in values]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeError(f"worker tensors disagree in shape: {[a.shape for a in arrays]}")
    if mode == "sum":
        acc = arrays[0].copy()
        for a in arrays[1:]:
            acc = acc + a
    elif mode == "mean":
        acc = (counts[0] / total) * arrays[0]
        for c, a in zip(counts[1:], arrays[1:]):
            acc = acc + (c / total) * a
    else:
        raise ValueError(f"unknown reduce mode {mode!r}")
    return ReduceResult(acc, total)


def reduce_margin_stats(shards: Sequence[WorkerShard]) -> ReduceResult:
    """Sum exact per-slot gap totals and pair counts across workers."""
    sums = [Fraction(0)] * len(shards[0].margin_sums)
    count = 0
    for s in shards:
        if len(s.margin_sums) != len(sums):
            raise ShapeError("workers disagree on the number of margin slots")
        sums = [a + b for a, b in zip(sums, s.margin_sums)]
        count += s.margin_count
    return ReduceResult(margins_from_partials(sums, count), count)


def margin_digest(m: MarginState) -> str:
    h = hashlib.sha256()
    for arr in (m.tau, m.prev_pos, m.prev_neg):
        h.update(np.asarray(arr, dtype="<f8", order="C").tobytes())
    h.update(str(m.step).encode())
    return h.hexdigest()


def worker_hash(params: Mapping[str, np.ndarray], margins: MarginState) -> str:
    """Cross-worker consistency hash over parameters and margin state."""
    return hashlib.sha256((params_digest(params) + margin_digest(margins)).encode()).hexdigest()[:16]


@dataclass
class StepResult:
    grads: list[Params]  # one (identical) copy per worker
    margins: list[MarginState]
    loss: float
    components: dict[str, float | None]
    tau_used: np.ndarray
    shards: list[WorkerShard]


def parallel_train_step(
    samples: Sequence[Sample],
    replicas: Sequence[Mapping[str, np.ndarray]],
    margins: Sequence[MarginState],
    cfg: EncoderConfig,
    stage: int,
    weights: LossWeights = LossWeights(),
    tic_reduction: str = "sum",
    n_negatives: int = 10,
    threads: int = 0,
) -> StepResult:
    """One synchronized forward/backward over ``len(replicas)`` simulated workers."""
    k = len(replicas)
    if len(margins) != k:
        raise ValueError("one margin state per worker required")
    digests = {params_digest(p) for p in replicas}
    if len(digests) != 1:
        raise DesyncError("worker parameters diverged before the step")
    if len({margin_digest(m) for m in margins}) != 1:
        raise DesyncError("worker margin states diverged before the step")
    shards = shard_batch(len(samples), k)
    with_regions = stage == 2

    def run(fn: Callable[[int], object]) -> list:
        if threads and k > 1:
            with ThreadPoolExecutor(max_workers=min(threads, k)) as pool:
                return list(pool.map(fn, range(k)))
        return [fn(w) for w in range(k)]

    # phase 1: local forward on each shard
    local: list[Shard] = run(
        lambda w: forward_shard(replicas[w], cfg, [samples[i] for i in shards[w].indices()], with_regions, n_negatives)
    )
    gathered = gather(local)

    # phase 2: every worker evaluates the global objective, back-props into its own samples
    n_total = len(samples)

    def local_backward(w: int):
        params = replicas[w]
        obj = objective_on_gathered(gathered, loss_scalars(params), margins[w], stage, weights, tic_reduction, n_negatives)
        s = shards[w]
        r_start = sum(sum(sh.region_counts) for sh in local[:w])
        r_stop = r_start + sum(local[w].region_counts)
        mine = {key: obj.total.grads[key][s.start : s.stop] for key in ("img", "short", "long")}
        mine.update({key: obj.total.grads[key][r_start:r_stop] for key in ("region", "phrase", "negs")})
        partial = backward_shard(params, cfg, local[w], mine)
        scale = n_total / s.size
        g = {name: scale * v for name, v in partial.items()}
        # loss scalars see the whole objective on every worker already
        g["loss.log_scale"] = obj.total.grads["log_scale"]
        g["loss.bias"] = obj.total.grads["bias"]
        s.grads = complete_grads(params, g)
        s.margin_sums, s.margin_count = margin_partials(obj.pos_sims[r_start:r_stop], obj.neg_sims[r_start:r_stop])
        return obj

    objectives = run(local_backward)

    # phase 3: barriers - gradient reduce, then margin reduce
    grad_reduce = all_reduce([s.grads for s in shards], "mean", [s.size for s in shards])
    margin_reduce = reduce_margin_stats(shards)
    obj0 = objectives[0]
    new_margins = []
    for w in range(k):
        m = MarginState(
            np.array(margin_reduce.value, copy=True),
            np.array(objectives[w].pos_sims, copy=True),
            np.array(objectives[w].neg_sims, copy=True),
            margins[w].step + 1,
        )
        new_margins.append(m)
    grads = [{name: v.copy() for name, v in grad_reduce.value.items()} for _ in range(k)]
    losses = {o.total.value for o in objectives}
    if len(losses) != 1:
        raise DesyncError("workers computed different global losses")
    return StepResult(grads, new_margins, obj0.total.value, obj0.components, np.array(margins[0].tau, copy=True), shards)
