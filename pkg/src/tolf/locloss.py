"""Localization losses and the closed-form TOLF gradients.

Every loss takes targets of shape ``(..., 4)`` and returns one value per
leading index (a scalar for a single target). Arguments may be numpy arrays
or :class:`~tolf.gradcore.Var`; the computation is recorded when they are.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 3.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

LOSS_NAMES = ("l2", "kl", "gfl", "tolf", "flow_only", "uncertainty_only")
BASE_NAMES = ("l2", "kl", "none")


@dataclass
class Prediction:
    """Predicted mean and log-uncertainty per coordinate.

    The uncertainty is carried as ``log_sigma`` so positivity is structural;
    ``sigma_hat`` is the derived value.
    """

    t_hat: object
    log_sigma: object

    @classmethod
    def from_sigma(cls, t_hat, sigma_hat):
        sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
        if np.any(sigma_hat <= 0):
            raise ValueError("sigma_hat must be strictly positive")
        return cls(np.asarray(t_hat, dtype=np.float64), np.log(sigma_hat))

    @property
    def sigma_hat(self):
        return np.exp(gc.value_of(self.log_sigma))


def clamp_log_sigma(u):
    return gc.clip(u, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def normalized_residual(T, pred):
    """``(T - T_hat) / sigma_hat``."""
    return gc.mul(gc.sub(T, pred.t_hat), gc.exp(gc.neg(pred.log_sigma)))


def l2_loss(T, t_hat):
    return gc.sum(gc.square(gc.sub(T, t_hat)), axis=-1)


def gaussian_kl_loss(T, pred):
    """Dirac-vs-Gaussian KL: ``sum (T-T_hat)^2 / (2 sigma^2) + log sigma + C``."""
    r = normalized_residual(T, pred)
    per = gc.add(gc.add(gc.mul(gc.square(r), 0.5), pred.log_sigma), HALF_LOG_2PI)
    return gc.sum(per, axis=-1)


def _flat_rows(x):
    """Reshape ``(..., 4)`` to ``(B, 4)``; returns the reshaped value and the lead shape."""
    shape = np.shape(gc.value_of(x))
    lead = shape[:-1]
    return gc.reshape(x, (-1, shape[-1])), lead


def tolf_loss(T, pred, flow, params=None):
    """Flow negative log-likelihood of the normalized residual plus ``sum log sigma``."""
    r = normalized_residual(T, pred)
    rows, lead = _flat_rows(r)
    nll = gc.neg(flow.log_prob(rows, params))
    return gc.add(gc.reshape(nll, lead), gc.sum(pred.log_sigma, axis=-1))


def ablation_flow_only_loss(T, t_hat, flow, params=None):
    """``-log p(T - T_hat)``: flow likelihood of the raw residual, no uncertainty."""
    rows, lead = _flat_rows(gc.sub(T, t_hat))
    return gc.reshape(gc.neg(flow.log_prob(rows, params)), lead)


def ablation_uncertainty_only_loss(T, pred, regularized=False):
    """``sum |T - T_hat| / sigma`` (+ ``sum log sigma`` when regularized)."""
    r = gc.absolute(normalized_residual(T, pred))
    if regularized:
        r = gc.add(r, pred.log_sigma)
    return gc.sum(r, axis=-1)


def tolf_grad_mu_analytic(t_bar, sigma_hat, dlogQ, dlogG):
    """Closed-form dL/dT_hat: ``(dlogQ + dlogG) / sigma``."""
    return (np.asarray(dlogQ) + np.asarray(dlogG)) / np.asarray(sigma_hat)


def tolf_grad_sigma_analytic(T, t_hat, sigma_hat, dlogQ, dlogG):
    """Closed-form dL/dsigma: ``(T - T_hat)/sigma^2 * (dlogQ + dlogG) + 1/sigma``."""
    T, t_hat, sigma_hat = (np.asarray(a, dtype=np.float64) for a in (T, t_hat, sigma_hat))
    return (T - t_hat) / sigma_hat ** 2 * (np.asarray(dlogQ) + np.asarray(dlogG)) + 1.0 / sigma_hat


def flow_score_terms(flow, t_bar):
    """Split ``d log p / dt`` into the prior part ``-t`` and the correction part."""
    t_bar = np.asarray(t_bar, dtype=np.float64)
    dlogp = flow.grad_log_prob(t_bar)
    dlogQ = -t_bar
    return dlogQ, dlogp - dlogQ


def base_loss(name, T, pred):
    if name == "l2":
        return l2_loss(T, pred.t_hat)
    if name == "kl":
        return gaussian_kl_loss(T, pred)
    if name == "none":
        return 0.0
    raise ValueError(f"unknown base loss {name!r}; expected one of {BASE_NAMES}")


def total_loss(T, pred, flow, lam=0.1, base="l2", params=None):
    """``base(T, T_hat) + lam * tolf_loss``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    b = base_loss(base, T, pred)
    if lam == 0:
        return b
    return gc.add(b, gc.mul(tolf_loss(T, pred, flow, params), lam))


# -- GFL ---------------------------------------------------------------------

@dataclass(frozen=True)
class GflConfig:
    n: int = 16
    alpha: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("GFL needs n >= 1")
        if not self.alpha > 0:
            raise ValueError("GFL alpha must be positive")

    @property
    def grid(self):
        g = np.linspace(-self.alpha, self.alpha, self.n + 1)
        g[0], g[-1] = -self.alpha, self.alpha
        return g

    @property
    def step(self):
        return 2.0 * self.alpha / self.n


class TargetRangeError(ValueError):
    pass


def clamp_targets(T, cfg):
    """Clip targets into ``[-alpha, alpha]``; returns ``(clipped, n_clipped)``."""
    T = np.asarray(T, dtype=np.float64)
    out = np.clip(T, -cfg.alpha, cfg.alpha)
    return out, int(np.count_nonzero(out != T))


def gfl_encode_twohot(T, cfg, literal=False):
    """Two-hot weights over the grid for scalar or array targets.

    Returns an array of shape ``T.shape + (n + 1,)``. The default is the
    convex-combination encoding (weights sum to 1, expectation equals
    ``T``). ``literal=True`` reproduces ``|y_i - T| * (n+1) / (2 alpha)`` on
    both bracketing points verbatim, which is neither normalized nor
    mean-preserving; it exists for comparison only.
    """
    T = np.asarray(T, dtype=np.float64)
    if np.any(~np.isfinite(T)) or np.any(np.abs(T) > cfg.alpha):
        raise TargetRangeError(f"GFL targets must lie in [-{cfg.alpha}, {cfg.alpha}]")
    grid = cfg.grid
    il = np.clip(np.floor((T + cfg.alpha) / cfg.step).astype(np.int64), 0, cfg.n - 1)
    # rounding in (T + alpha) / step can land one interval off
    il = np.clip(il - (grid[il] > T) + (grid[np.minimum(il + 1, cfg.n)] < T), 0, cfg.n - 1)
    ir = il + 1
    yl, yr = grid[il], grid[ir]
    if literal:
        scale = (cfg.n + 1) / (2.0 * cfg.alpha)
        wl, wr = np.abs(yl - T) * scale, np.abs(yr - T) * scale
    else:
        wl = (yr - T) / (yr - yl)
        wr = (T - yl) / (yr - yl)
    out = np.zeros(T.shape + (cfg.n + 1,))
    np.put_along_axis(out, il[..., None], wl[..., None], axis=-1)
    np.put_along_axis(out, ir[..., None], wr[..., None], axis=-1)
    return out


def gfl_loss(T, logits, cfg, clamp=False, literal=False):
    """Softmax over each coordinate's logits, cross-entropy to the two-hot target.

    ``logits`` has shape ``(..., 4, n + 1)``; the result is summed over
    coordinates.
    """
    T = np.asarray(T, dtype=np.float64)
    if clamp:
        T, _ = clamp_targets(T, cfg)
    weights = gfl_encode_twohot(T, cfg, literal=literal)
    logp = gc.log_softmax(logits, axis=-1)
    ce = gc.neg(gc.sum(gc.mul(logp, weights), axis=-1))
    return gc.sum(ce, axis=-1)


def gfl_expectation(logits, cfg):
    """Mean and std of the softmax distribution over the grid."""
    logits = np.asarray(logits, dtype=np.float64)
    p = np.exp(gc.log_softmax(logits, axis=-1))
    grid = cfg.grid
    mu = p @ grid
    var = p @ (grid ** 2) - mu ** 2
    return mu, np.sqrt(np.maximum(var, 1e-12))
