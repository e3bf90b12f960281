"""Annotation-noise models for corrupting ground-truth boxes.

Each model draws a raw 4-vector per box, in pixels:
``(d_cx, d_cy, d_w, d_h)``. Center offsets are added to the center; size
offsets (only ``gaussian_full``) act multiplicatively as
``w * exp(d_w / w)``. Draw ``i`` of a given seed depends only on
``(model, seed, i)``: every random component comes from its own
sequentially consumed stream, so ``sample(n)[:m] == sample(m)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special, stats

from .boxgeom import BoundingBox

KINDS = ("none", "gaussian_center", "gaussian_full", "student_t", "skewed", "bimodal")
MIN_SIDE_PX = 1.0


@dataclass(frozen=True)
class NoiseModel:
    """Annotation corruption distribution.

    ``scale`` is the per-coordinate std (gaussian kinds), the t scale
    (student_t), the exponential scale (skewed) or the component std
    (bimodal). ``nu`` is the t degrees of freedom, ``skew`` the weight of the
    right-pointing exponential, ``offset`` the bimodal mode distance and
    ``weight`` the mass of the ``+offset`` component.
    """

    kind: str = "none"
    scale: float = 0.0
    nu: float = 3.0
    skew: float = 0.8
    offset: float = 2.0
    weight: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if not (self.scale >= 0 and math.isfinite(self.scale)):
            raise ValueError("noise scale must be finite and >= 0")
        if self.kind == "student_t" and not self.nu > 2:
            raise ValueError("student_t noise needs nu > 2")
        if not 0.0 <= self.skew <= 1.0:
            raise ValueError("skew must lie in [0, 1]")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("bimodal weight must lie in [0, 1]")
        if self.offset < 0:
            raise ValueError("bimodal offset must be >= 0")

    @property
    def is_identity(self):
        if self.kind == "none":
            return True
        if self.kind == "bimodal":
            return self.scale == 0 and self.offset == 0
        return self.scale == 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _streams(seed, k):
    return [np.random.default_rng([int(seed), j]) for j in range(k)]


def residual_distribution_sample(model, n, seed):
    """Raw ``(n, 4)`` noise draws in pixels, before they touch any box."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.zeros((n, 4))
    if model.is_identity:
        return out
    kind, s = model.kind, model.scale
    if kind in ("gaussian_center", "gaussian_full"):
        (g,) = _streams(seed, 1)
        cols = 4 if kind == "gaussian_full" else 2
        out[:, :cols] = s * g.standard_normal((n, cols))
    elif kind == "student_t":
        (g,) = _streams(seed, 1)
        out[:, :2] = s * g.standard_t(model.nu, size=(n, 2))
    elif kind == "skewed":
        u_rng, e_rng = _streams(seed, 2)
        right = u_rng.random((n, 2)) < model.skew
        e = e_rng.standard_exponential((n, 2))
        out[:, :2] = s * (np.where(right, e, -e) - _skew_mean(model.skew))
    elif kind == "bimodal":
        u_rng, g = _streams(seed, 2)
        plus = u_rng.random((n, 2)) < model.weight
        out[:, :2] = np.where(plus, model.offset, -model.offset) + s * g.standard_normal((n, 2))
    return out


def _skew_mean(p):
    return 2.0 * p - 1.0


def apply_noise(boxes, draws):
    """Corrupt ``(N, 4)`` center-size boxes with raw draws; sides floored at 1 px."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[:, :2] += draws[:, :2]
    out[:, 2:] = boxes[:, 2:] * np.exp(draws[:, 2:] / boxes[:, 2:])
    out[:, 2:] = np.maximum(out[:, 2:], MIN_SIDE_PX)
    return out


def corrupt_boxes(boxes, model, seed):
    """Row ``i`` is corrupted with draw ``i`` of ``seed``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if model.is_identity:
        return boxes.copy()
    return apply_noise(boxes, residual_distribution_sample(model, len(boxes), seed))


def corrupt(box, model, seed, index=0):
    """Corrupt a single box with draw ``index`` of ``seed``."""
    if model.is_identity:
        return BoundingBox(*box)
    draw = residual_distribution_sample(model, index + 1, seed)[index:index + 1]
    return BoundingBox(*apply_noise(np.asarray([box], dtype=np.float64), draw)[0])


def log_density_1d(model, x):
    """Analytic log-density of one center-offset coordinate."""
    x = np.asarray(x, dtype=np.float64)
    if model.is_identity:
        raise ValueError("identity noise has no density")
    kind, s = model.kind, model.scale
    if kind in ("gaussian_center", "gaussian_full"):
        return stats.norm.logpdf(x, scale=s)
    if kind == "student_t":
        return stats.t.logpdf(x, model.nu, scale=s)
    if kind == "skewed":
        y = x / s + _skew_mean(model.skew)
        with np.errstate(divide="ignore"):
            right = np.log(model.skew) - y
            left = np.log1p(-model.skew) + y
        return np.where(y >= 0, right, left) - np.log(s)
    if kind == "bimodal":
        if s == 0:
            raise ValueError("bimodal noise with zero component std has no density")
        a = stats.norm.logpdf(x, loc=model.offset, scale=s)
        b = stats.norm.logpdf(x, loc=-model.offset, scale=s)
        with np.errstate(divide="ignore"):
            lw = np.log([model.weight, 1.0 - model.weight])
        return special.logsumexp(np.stack([a + lw[0], b + lw[1]]), axis=0)
    raise ValueError(kind)


def log_density(model, pts):
    """Joint log-density of ``(N, 2)`` center offsets (independent coordinates)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return log_density_1d(model, pts[:, 0]) + log_density_1d(model, pts[:, 1])


def std_1d(model):
    """Standard deviation of one center coordinate (used for grid sizing)."""
    if model.is_identity:
        return 0.0
    kind, s = model.kind, model.scale
    if kind in ("gaussian_center", "gaussian_full"):
        return s
    if kind == "student_t":
        return s * math.sqrt(model.nu / (model.nu - 2.0))
    if kind == "skewed":
        p = model.skew
        m = _skew_mean(p)
        return s * math.sqrt(2.0 - m * m)
    w = model.weight
    mean = (2 * w - 1) * model.offset
    return math.sqrt(s * s + model.offset ** 2 - mean * mean)
