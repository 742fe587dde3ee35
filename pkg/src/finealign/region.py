"""Region features from dense grids, and detector score fusion.

Boxes use normalized ``[0, 1]`` coordinates.  Patch ``(i, j)`` of an
``H x W`` grid has its center at ``((j + 0.5) / W, (i + 0.5) / H)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import FeatureGrid
from .errors import InvalidBoxError, InvalidConfidenceError, ShapeError
from .numerics import l2_normalize, softmax_row


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise InvalidBoxError(f"degenerate or out-of-range box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def of(cls, box) -> "Box":
        return box if isinstance(box, Box) else cls(*(float(v) for v in box))


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float
    category: int

    def __post_init__(self):
        if not 0.0 < self.confidence <= 1.0:
            raise InvalidConfidenceError(f"confidence {self.confidence} outside (0, 1]")


def _bilinear_weights(gy: float, gx: float, h: int, w: int) -> list[tuple[int, float]]:
    """Flat-index weights for one sample in continuous patch coordinates (clamped)."""
    gy = min(max(gy, 0.0), h - 1.0)
    gx = min(max(gx, 0.0), w - 1.0)
    y0, x0 = int(np.floor(gy)), int(np.floor(gx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = gy - y0, gx - x0
    return [
        (y0 * w + x0, (1 - ly) * (1 - lx)),
        (y0 * w + x1, (1 - ly) * lx),
        (y1 * w + x0, ly * (1 - lx)),
        (y1 * w + x1, ly * lx),
    ]


def roi_weights(h: int, w: int, box, out_h: int = 1, out_w: int = 1, samples: int = 2) -> np.ndarray:
    """Sampling matrix ``M`` with ``roi_align(grid) == M @ grid.reshape(H*W, D)``.

    Rows are output bins in row-major order; each row averages
    ``samples x samples`` bilinear taps spread regularly inside the bin.
    """
    box = Box.of(box)
    if h < 1 or w < 1:
        raise ShapeError("empty grid")
    m = np.zeros((out_h * out_w, h * w))
    bin_w = (box.x2 - box.x1) / out_w
    bin_h = (box.y2 - box.y1) / out_h
    tap = 1.0 / (samples * samples)
    for by in range(out_h):
        for bx in range(out_w):
            row = m[by * out_w + bx]
            for sy in range(samples):
                y = box.y1 + (by + (sy + 0.5) / samples) * bin_h
                for sx in range(samples):
                    x = box.x1 + (bx + (sx + 0.5) / samples) * bin_w
                    for idx, wt in _bilinear_weights(y * h - 0.5, x * w - 0.5, h, w):
                        row[idx] += tap * wt
    return m


def roi_align(grid: FeatureGrid, box, out_h: int = 1, out_w: int = 1, samples: int = 2) -> np.ndarray:
    """``out_h x out_w x D`` region features by bilinear sampling."""
    feats = np.asarray(grid.features, dtype=np.float64)
    h, w, d = feats.shape
    m = roi_weights(h, w, box, out_h, out_w, samples)
    return (m @ feats.reshape(h * w, d)).reshape(out_h, out_w, d)


def region_embedding(grid: FeatureGrid, box) -> np.ndarray:
    pooled = roi_align(grid, box, 1, 1, 2).reshape(-1, grid.features.shape[-1]).mean(axis=0)
    return l2_normalize(pooled)


def ovd_fuse(
    confidences: Sequence[float], sims: Sequence[float], alpha: float = 0.5, scale: float = 10.0
) -> tuple[np.ndarray, int]:
    """Fuse per-category detector confidences with alignment similarities.

    ``fused_c = conf_c ** alpha * softmax(scale * sims)_c ** (1 - alpha)``.
    Returns the fused vector and its argmax (lowest index on ties).
    """
    conf = np.asarray(confidences, dtype=np.float64)
    sims = np.asarray(sims, dtype=np.float64)
    if conf.shape != sims.shape or conf.ndim != 1:
        raise ShapeError(f"confidences {conf.shape} and sims {sims.shape} must be equal-length vectors")
    if np.any(conf <= 0.0):
        raise InvalidConfidenceError("detector confidences must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    p = softmax_row(sims, scale)
    fused = conf**alpha * p ** (1.0 - alpha)
    return fused, int(np.argmax(fused))
