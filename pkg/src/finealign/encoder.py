"""Toy dual encoders with hand-written backward passes.

Image path: patch grid -> linear patch projection (the trunk tokens) ->
``dense_layers`` residual single-head self-attention layers -> dense
feature grid.  The global image embedding is a masked-attention-pooling
(MAP) head over the trunk tokens, so the dense layers only receive
gradient from region-level objectives.

Text path: token embedding + learned positional embedding (196 slots) ->
MAP head with padding masked out.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names,
which keeps the optimizer, checkpoint format and gradient checks generic.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptyPoolError,
    ShapeError,
    TooLongError,
    UnknownTokenError,
)
from .numerics import softmax

DEFAULT_BUCKETS = (128, 256, 576, 784, 1024)
MAX_TEXT_LEN = 196

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ResolutionBuckets:
    sides: tuple[int, ...] = DEFAULT_BUCKETS

    def __post_init__(self):
        if not self.sides or any(b <= a for a, b in zip(self.sides, self.sides[1:])):
            raise ValueError(f"bucket sides must be strictly increasing: {self.sides}")


def select_resolution_bucket(max_side: float, buckets: ResolutionBuckets | Sequence[int] = DEFAULT_BUCKETS) -> int:
    """Bucket side needing the smallest relative resize of ``max_side``.

    Distance is ``|ln(bucket / max_side)|``; ties go to the smaller bucket.
    """
    if max_side <= 0:
        raise ValueError("max_side must be positive")
    sides = buckets.sides if isinstance(buckets, ResolutionBuckets) else tuple(buckets)
    best = sides[0]
    best_d = abs(math.log(best / max_side))
    for side in sides[1:]:
        d = abs(math.log(side / max_side))
        if d < best_d:
            best, best_d = side, d
    return best


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 32
    vocab_size: int = 64
    patch_dim: int = 8
    patch_size: int = 16
    dense_layers: int = 1
    max_text_len: int = MAX_TEXT_LEN
    buckets: tuple[int, ...] = DEFAULT_BUCKETS
    image_positional: bool = False
    init_log_scale: float = math.log(10.0)
    init_bias: float = -10.0

    def __post_init__(self):
        if self.dense_layers < 1:
            raise ValueError("dense_layers must be >= 1")
        ResolutionBuckets(tuple(self.buckets))

    def grid_sides(self) -> tuple[int, ...]:
        """Patch-grid side lengths supported by the bucket list."""
        return tuple(b // self.patch_size for b in self.buckets if b % self.patch_size == 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buckets"] = list(self.buckets)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        if "buckets" in d:
            d["buckets"] = tuple(d["buckets"])
        return cls(**d)


@dataclass
class FeatureGrid:
    height: int
    width: int
    features: np.ndarray  # H x W x D

    def __post_init__(self):
        if self.height * self.width < 1 or self.features.shape[:2] != (self.height, self.width):
            raise ShapeError(f"bad feature grid shape {self.features.shape}")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {"img.patch_proj": (cfg.patch_dim, d)}
    for layer in range(cfg.dense_layers):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"img.dense{layer}.{w}"] = (d, d)
    for prefix in ("img.map", "txt.map"):
        shapes[f"{prefix}.query"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)
    shapes["txt.tok_emb"] = (cfg.vocab_size, d)
    shapes["txt.pos_emb"] = (cfg.max_text_len, d)
    shapes["loss.log_scale"] = ()
    shapes["loss.bias"] = ()
    return shapes


def init_params(cfg: EncoderConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d = cfg.dim
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "loss.log_scale":
            params[name] = np.array(cfg.init_log_scale)
        elif name == "loss.bias":
            params[name] = np.array(cfg.init_bias)
        elif name.endswith(".query") or name.endswith("_emb"):
            params[name] = rng.normal(0.0, 1.0, shape)
        elif name.endswith(".wo") and ".dense" in name:
            # small residual branch so the dense grid starts near the trunk tokens
            params[name] = rng.normal(0.0, 0.1 / math.sqrt(d), shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return params


def sub_params(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# -- single-head residual self-attention -------------------------------------


def attention_forward(x: np.ndarray, w: Mapping[str, np.ndarray]):
    """``y = x + softmax(q k^T / sqrt(D)) v wo`` for one K x D token set."""
    s = 1.0 / math.sqrt(x.shape[-1])
    q = x @ w["wq"]
    k = x @ w["wk"]
    v = x @ w["wv"]
    a = softmax((q @ k.T) * s)
    o = a @ v
    y = x + o @ w["wo"]
    return y, (x, q, k, v, a, o, s)


def attention_backward(cache, dy: np.ndarray, w: Mapping[str, np.ndarray]):
    x, q, k, v, a, o, s = cache
    grads = {"wo": o.T @ dy}
    do = dy @ w["wo"].T
    da = do @ v.T
    dv = a.T @ do
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * s
    dq = ds @ k
    dk = ds.T @ q
    grads["wq"] = x.T @ dq
    grads["wk"] = x.T @ dk
    grads["wv"] = x.T @ dv
    dx = dy + dq @ w["wq"].T + dk @ w["wk"].T + dv @ w["wv"].T
    return dx, grads


# -- masked attention pooling ------------------------------------------------


def map_forward(x: np.ndarray, mask: np.ndarray, head: Mapping[str, np.ndarray]):
    """Pool a B x K x D token batch to B x D with one learned query."""
    if np.any(~mask.any(axis=-1)):
        raise EmptyPoolError("every position is masked")
    s = 1.0 / math.sqrt(x.shape[-1])
    q = head["query"] @ head["wq"]
    k = x @ head["wk"]
    v = x @ head["wv"]
    a = softmax((k @ q) * s, mask=mask)
    pooled = np.einsum("bk,bkd->bd", a, v)
    out = pooled @ head["wo"]
    return out, (x, mask, q, k, v, a, pooled, s)


def map_backward(cache, dout: np.ndarray, head: Mapping[str, np.ndarray]):
    x, mask, q, k, v, a, pooled, s = cache
    grads = {"wo": pooled.T @ dout}
    dpooled = dout @ head["wo"].T
    da = np.einsum("bkd,bd->bk", v, dpooled)
    dv = a[..., None] * dpooled[:, None, :]
    dlogit = a * (da - np.sum(a * da, axis=-1, keepdims=True)) * s
    dk = dlogit[..., None] * q
    dq = np.einsum("bk,bkd->d", dlogit, k)
    grads["query"] = head["wq"] @ dq
    grads["wq"] = np.outer(head["query"], dq)
    xf = x.reshape(-1, x.shape[-1])
    grads["wk"] = xf.T @ dk.reshape(-1, dk.shape[-1])
    grads["wv"] = xf.T @ dv.reshape(-1, dv.shape[-1])
    dx = dk @ head["wk"].T + dv @ head["wv"].T
    return dx, grads


def pool_map(tokens, mask, head: Mapping[str, np.ndarray]) -> np.ndarray:
    """Pool one K x D token set; masked positions get exactly zero weight."""
    tokens = np.asarray(tokens, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out, _ = map_forward(tokens[None], mask[None], head)
    return out[0]


# -- image encoder -----------------------------------------------------------


def positional_code(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code: first half of channels encodes rows, second half columns."""
    half = d // 2
    freqs = 1.0 / (100.0 ** (np.arange(half // 2) * 2.0 / max(half, 1)))
    rows = np.arange(h)[:, None] * freqs
    cols = np.arange(w)[:, None] * freqs
    row_code = np.concatenate([np.sin(rows), np.cos(rows)], axis=1)
    col_code = np.concatenate([np.sin(cols), np.cos(cols)], axis=1)
    code = np.zeros((h, w, d))
    code[:, :, : row_code.shape[1]] = row_code[:, None, :]
    code[:, :, half : half + col_code.shape[1]] = col_code[None, :, :]
    return code


def _check_image(image: np.ndarray, cfg: EncoderConfig):
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x P, got shape {image.shape}")
    h, w, p = image.shape
    if h != w or h not in cfg.grid_sides():
        raise ShapeError(f"{h}x{w} patch grid matches no resolution bucket {cfg.buckets} at patch {cfg.patch_size}")
    if p != cfg.patch_dim:
        raise ShapeError(f"patch dimension {p} != {cfg.patch_dim}")


def image_forward(params: Mapping[str, np.ndarray], cfg: EncoderConfig, image):
    """Return ``(grid H x W x D, pooled D, cache)`` for one image."""
    image = np.asarray(image, dtype=np.float64)
    _check_image(image, cfg)
    h, w, p = image.shape
    flat = image.reshape(h * w, p)
    x0 = flat @ params["img.patch_proj"]
    if cfg.image_positional:
        x0 = x0 + positional_code(h, w, cfg.dim).reshape(h * w, cfg.dim)
    x = x0
    layer_caches = []
    for layer in range(cfg.dense_layers):
        x, c = attention_forward(x, sub_params(params, f"img.dense{layer}"))
        layer_caches.append(c)
    head = sub_params(params, "img.map")
    pooled, map_cache = map_forward(x0[None], np.ones((1, h * w), dtype=bool), head)
    grid = x.reshape(h, w, cfg.dim)
    return grid, pooled[0], (flat, layer_caches, map_cache, h, w)


def image_backward(params, cfg: EncoderConfig, cache, d_grid: np.ndarray | None, d_pooled: np.ndarray | None) -> Params:
    flat, layer_caches, map_cache, h, w = cache
    grads: Params = {}
    dx0 = np.zeros((h * w, cfg.dim))
    if d_grid is not None:
        dx = d_grid.reshape(h * w, cfg.dim)
        for layer in reversed(range(cfg.dense_layers)):
            dx, g = attention_backward(layer_caches[layer], dx, sub_params(params, f"img.dense{layer}"))
            grads.update({f"img.dense{layer}.{k}": v for k, v in g.items()})
        dx0 = dx0 + dx
    if d_pooled is not None:
        dxm, g = map_backward(map_cache, d_pooled[None], sub_params(params, "img.map"))
        grads.update({f"img.map.{k}": v for k, v in g.items()})
        dx0 = dx0 + dxm[0]
    grads["img.patch_proj"] = flat.T @ dx0
    return grads


def encode_image_dense(image, params, cfg: EncoderConfig) -> FeatureGrid:
    grid, _, _ = image_forward(params, cfg, image)
    return FeatureGrid(grid.shape[0], grid.shape[1], grid)


def encode_image_global(image, params, cfg: EncoderConfig) -> np.ndarray:
    _, pooled, _ = image_forward(params, cfg, image)
    return pooled


# -- text encoder ------------------------------------------------------------


def _check_ids(ids: Sequence[int], cfg: EncoderConfig):
    if len(ids) < 1:
        raise ShapeError("empty token sequence")
    if len(ids) > cfg.max_text_len:
        raise TooLongError(f"{len(ids)} tokens exceeds the {cfg.max_text_len}-token limit")
    for t in ids:
        if not 0 <= t < cfg.vocab_size:
            raise UnknownTokenError(f"token id {t} outside vocabulary of size {cfg.vocab_size}")


def text_forward(params: Mapping[str, np.ndarray], cfg: EncoderConfig, seqs: Sequence[Sequence[int]], pad_to: int | None = None):
    """Encode a batch of token sequences to a B x D array (padding masked)."""
    for s in seqs:
        _check_ids(s, cfg)
    length = max(len(s) for s in seqs) if pad_to is None else pad_to
    if length > cfg.max_text_len:
        raise TooLongError(f"padding length {length} exceeds {cfg.max_text_len}")
    ids = np.zeros((len(seqs), length), dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    x = params["txt.tok_emb"][ids] + params["txt.pos_emb"][:length]
    out, map_cache = map_forward(x, mask, sub_params(params, "txt.map"))
    return out, (ids, mask, map_cache)


def text_backward(params, cfg: EncoderConfig, cache, d_out: np.ndarray) -> Params:
    ids, mask, map_cache = cache
    dx, g = map_backward(map_cache, d_out, sub_params(params, "txt.map"))
    grads = {f"txt.map.{k}": v for k, v in g.items()}
    dx = dx * mask[..., None]
    dtok = np.zeros_like(params["txt.tok_emb"])
    np.add.at(dtok, ids[mask], dx[mask])
    dpos = np.zeros_like(params["txt.pos_emb"])
    dpos[: ids.shape[1]] = dx.sum(axis=0)
    grads["txt.tok_emb"] = dtok
    grads["txt.pos_emb"] = dpos
    return grads


def encode_text(ids: Sequence[int], params, cfg: EncoderConfig) -> np.ndarray:
    out, _ = text_forward(params, cfg, [list(ids)])
    return out[0]


# -- checkpoint format -------------------------------------------------------
#
# <dir>/manifest.json : {"format": "finealign-ckpt-1", "dtype": "<f8",
#                        "meta": {...}, "tensors": [{"name", "shape", "offset"}]}
# <dir>/params.bin    : tensors concatenated in manifest order as
#                       little-endian float64; offset is in bytes.

CKPT_FORMAT = "finealign-ckpt-1"


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(directory, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": CKPT_FORMAT, "dtype": "<f8", "meta": dict(meta or {}), "tensors": entries}
    _atomic_write(directory / "params.bin", b"".join(chunks))
    _atomic_write(directory / "manifest.json", (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode())
    return directory


def load_checkpoint(directory) -> tuple[Params, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CKPT_FORMAT:
        raise ValueError(f"unknown checkpoint format {manifest.get('format')!r}")
    raw = (directory / "params.bin").read_bytes()
    params: Params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return params, manifest["meta"]


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names and little-endian bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.asarray(params[name], dtype="<f8", order="C").tobytes())
    return h.hexdigest()
