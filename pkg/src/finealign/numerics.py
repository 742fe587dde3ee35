"""Dense float64 primitives shared by the encoders, losses and evaluators.

Tensors are plain ``numpy.ndarray`` objects in double precision; use
:func:`as_tensor` at trust boundaries to reject NaN/Inf early.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError, ZeroVectorError

EPS = 1e-12


def as_tensor(x, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Convert ``x`` to a finite float64 array, optionally checking its shape."""
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass
class GradPair:
    """A scalar value together with gradients keyed by parameter name."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, w: float) -> "GradPair":
        return GradPair(w * self.value, {k: w * g for k, g in self.grads.items()})


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(np.dot(v, v))
    if n <= EPS:
        raise ZeroVectorError("cannot normalize a zero vector")
    return v / n


def l2_normalize_rows(a) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize ``a``; returns ``(unit_rows, norms)``."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.sqrt(np.einsum("...d,...d->...", a, a))
    if np.any(norms <= EPS):
        raise ZeroVectorError("cannot normalize a zero row")
    return a / norms[..., None], norms


def l2_normalize_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``unit = x/|x|`` back to ``x``."""
    radial = np.einsum("...d,...d->...", unit, grad_unit)
    return (grad_unit - unit * radial[..., None]) / norms[..., None]


def cosine_similarity_matrix(a, b) -> np.ndarray:
    ua, _ = l2_normalize_rows(np.atleast_2d(a))
    ub, _ = l2_normalize_rows(np.atleast_2d(b))
    return ua @ ub.T


def log_sigmoid(x):
    """``log(1 / (1 + exp(-x)))`` without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def softmax_row(x, scale: float = 1.0) -> np.ndarray:
    z = scale * np.asarray(x, dtype=np.float64)
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def softmax(z: np.ndarray, mask: np.ndarray | None = None, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis``; positions where ``mask`` is False get weight exactly 0."""
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def exact_sum(values: Iterable[float]) -> Fraction:
    """Exact rational sum of floats; the result does not depend on order or grouping."""
    total = Fraction(0)
    for v in values:
        total += Fraction(float(v))
    return total


def finite_diff_grads(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    coords: Mapping[str, Iterable[tuple[int, ...]]],
    h: float = 1e-5,
) -> dict[str, dict[tuple[int, ...], float]]:
    """Central differences of scalar ``f`` at the requested coordinates."""
    out: dict[str, dict[tuple[int, ...], float]] = {}
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    for name, idxs in coords.items():
        out[name] = {}
        arr = work[name]
        for idx in idxs:
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(f(work))
            arr[idx] = orig - h
            fm = float(f(work))
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value probing {name}{idx}")
            out[name][idx] = (fp - fm) / (2.0 * h)
    return out


def sample_coords(
    params: Mapping[str, np.ndarray], per_param: int | None, rng: np.random.Generator
) -> dict[str, list[tuple[int, ...]]]:
    """All coordinates of each parameter, or ``per_param`` random ones."""
    coords = {}
    for name in sorted(params):
        shape = np.shape(params[name])
        total = int(np.prod(shape))
        if per_param is None or per_param >= total:
            flat = range(total)
        else:
            flat = sorted(rng.choice(total, size=per_param, replace=False).tolist())
        coords[name] = [np.unravel_index(i, shape) for i in flat]
    return coords


def finite_diff_report(
    f: Callable[[Mapping[str, np.ndarray]], GradPair],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    per_param: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference gradients.

    The error of one coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    gp = f(params)
    if not np.isfinite(gp.value):
        raise NonFiniteError("function value is not finite at the probe point")
    coords = sample_coords(params, per_param, np.random.default_rng(seed))
    fd = finite_diff_grads(lambda p: f(p).value, params, coords, h)
    report = {}
    for name, vals in fd.items():
        analytic = gp.grads.get(name)
        worst = 0.0
        for idx, numeric in vals.items():
            a = 0.0 if analytic is None else float(np.asarray(analytic)[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
        report[name] = worst
    return report


def finite_diff_check(
    f: Callable[[Mapping[str, np.ndarray]], GradPair],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative gradient error over the sampled coordinates of every parameter."""
    report = finite_diff_report(f, params, h=h, per_param=per_param, seed=seed)
    return max(report.values(), default=0.0)
