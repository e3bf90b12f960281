"""Evaluation on clean ground truth, density-fit KL, noise-sensitivity curves.

"Localization AP" here is the mean, over IoU thresholds 0.50:0.05:0.95, of
the fraction of samples whose decoded prediction clears the threshold
against the *clean* box. There is no confidence ranking in this benchmark,
so this is not detector precision-recall AP.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxgeom
from .synthbench import SCALE_BINS, predict

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def config_digest(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ExperimentRecord:
    config_digest: str
    accuracy: dict  # threshold (str) -> fraction
    loc_ap: float
    bin_loc_ap: dict  # scale bin -> loc_ap, absent for empty bins
    bin_counts: dict
    mean_iou: float
    density_kl: float | None = None
    loss_trace: list = field(default_factory=list)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, include_timing=True):
        d = self.to_dict()
        if not include_timing:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


def accuracy_table(ious, thresholds=IOU_THRESHOLDS):
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return {}
    return {f"{t:.2f}": float(np.mean(ious >= t)) for t in thresholds}


def loc_ap_from_ious(ious, thresholds=IOU_THRESHOLDS):
    acc = accuracy_table(ious, thresholds)
    if not acc:
        return None
    return float(np.mean(list(acc.values())))


def evaluate_boxes(pred_boxes, gt_boxes, bins, digest="", loss_trace=None):
    """Score decoded boxes against clean ground truth."""
    ious = boxgeom.iou_array(pred_boxes, gt_boxes)
    bins = np.asarray(bins)
    bin_ap, counts = {}, {}
    for b, name in enumerate(SCALE_BINS):
        mask = bins == b
        counts[name] = int(mask.sum())
        if counts[name]:
            bin_ap[name] = loc_ap_from_ious(ious[mask])
    return ExperimentRecord(
        config_digest=digest,
        accuracy=accuracy_table(ious),
        loc_ap=loc_ap_from_ious(ious),
        bin_loc_ap=bin_ap,
        bin_counts=counts,
        mean_iou=float(np.mean(ious)),
        loss_trace=list(loss_trace or []),
    ), ious


def evaluate(head, flow, data, digest="", loss_trace=None):
    """Decode the head's predictions on ``data`` and score them against clean boxes.

    ``flow`` is not used for box predictions; it is accepted so every loss
    variant is evaluated through the same call.
    """
    pred = predict(head, data.features)
    boxes = boxgeom.decode_array(pred.t_hat, data.anchors)
    record, ious = evaluate_boxes(boxes, data.gt, data.bins, digest, loss_trace)
    sigma = pred.sigma_hat.mean(axis=1)
    resid = np.abs(data.clean_targets - pred.t_hat).mean(axis=1)
    record.extra["sigma_residual_spearman"] = _spearman(sigma, resid)
    return record


def _spearman(a, b):
    from scipy import stats

    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(stats.spearmanr(a, b).statistic)


# -- density fit quality -------------------------------------------------------

class GridCoverageError(ValueError):
    pass


def make_grid(bounds, points):
    """Axes for a 1-D or 2-D grid: ``bounds`` is ``[(lo, hi), ...]``."""
    return [np.linspace(lo, hi, points) for lo, hi in bounds]


def density_kl(flow, true_log_density, axes, coords=None, min_coverage=0.999):
    """Trapezoid-rule ``KL(true || flow)`` over a 1-D or 2-D grid.

    ``true_log_density`` maps an ``(M, k)`` array of points to log-densities
    (``k = len(axes)``). ``coords`` names the flow coordinates the grid axes
    correspond to (default: the first ``k``). If the flow has more
    dimensions than the grid, the flow density is the slice with the other
    coordinates at 0, renormalized over the grid.
    """
    k = len(axes)
    if k not in (1, 2):
        raise ValueError("density_kl supports 1-D and 2-D grids")
    coords = list(range(k)) if coords is None else list(coords)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    log_p = np.asarray(true_log_density(pts), dtype=np.float64)
    p = np.exp(log_p)
    mass = _trapz_nd(p.reshape(mesh[0].shape), axes)
    if mass < min_coverage:
        raise GridCoverageError(f"grid covers only {mass:.6f} of the true density (need {min_coverage})")

    full = np.zeros((pts.shape[0], flow.dim))
    full[:, coords] = pts
    log_q = np.asarray(flow.log_prob(full), dtype=np.float64)
    if flow.dim != k:
        q = np.exp(log_q - log_q.max())
        log_q = log_q - log_q.max() - math.log(_trapz_nd(q.reshape(mesh[0].shape), axes))
    integrand = np.where(p > 0, p * (log_p - log_q), 0.0)
    return float(_trapz_nd(integrand.reshape(mesh[0].shape), axes) / mass)


def _trapz_nd(values, axes):
    out = values
    for ax in reversed(axes):
        out = np.trapezoid(out, ax, axis=-1)
    return float(out)


def mixture_log_density(offset=2.0, std=0.5, weight=0.5):
    """Two-component 1-D Gaussian mixture at ``+-offset`` (vectorised callable)."""
    from scipy import stats

    def f(x):
        x = np.asarray(x, dtype=np.float64)
        a = stats.norm.logpdf(x, offset, std) + math.log(weight)
        b = stats.norm.logpdf(x, -offset, std) + math.log(1.0 - weight)
        return np.logaddexp(a, b)

    return f


def count_local_maxima(values):
    v = np.asarray(values)
    return int(np.sum((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])))


# -- noise sensitivity ---------------------------------------------------------

def relative_drop(clean, noisy):
    if clean is None or noisy is None or clean <= 0:
        return float("nan")
    return (clean - noisy) / clean


def sensitivity_curve(loss, scales, seeds, run_fn):
    """Train and evaluate for every ``(scale, seed)``; aggregate per bin.

    ``run_fn(loss, scale, seed)`` must return an :class:`ExperimentRecord`
    (the CLI and the tests supply it, so this module does not depend on the
    config layer). Returns ``{scale: {key: (mean, std)}}`` where keys are
    ``"all"``, the scale-bin names, and ``"vt+t"``/``"s+m"``.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    table = {}
    for scale in scales:
        rows = [run_fn(loss, scale, seed) for seed in seeds]
        table[scale] = aggregate_records(rows)
    return table


def grouped_ap(record, names):
    num, den = 0.0, 0
    for name in names:
        if name in record.bin_loc_ap:
            num += record.bin_loc_ap[name] * record.bin_counts[name]
            den += record.bin_counts[name]
    return num / den if den else None


def aggregate_records(records):
    keys = {"all": [r.loc_ap for r in records]}
    for name in SCALE_BINS:
        vals = [r.bin_loc_ap[name] for r in records if name in r.bin_loc_ap]
        if vals:
            keys[name] = vals
    keys["vt+t"] = [grouped_ap(r, ("very_tiny", "tiny")) for r in records]
    keys["s+m"] = [grouped_ap(r, ("small", "medium")) for r in records]
    keys["mean_iou"] = [r.mean_iou for r in records]
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in keys.items()
            if all(x is not None for x in v)}
