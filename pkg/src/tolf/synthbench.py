"""Synthetic tiny-object localization benchmark.

Objects are boxes of side 2-64 px. A sample's feature vector is a fixed
linear embedding of its clean regression target plus observation noise that
shrinks like ``1/sqrt(side)``, together with a log-size channel, so small
objects are intrinsically harder. Training targets come from annotations
corrupted by :mod:`tolf.noisegen`; evaluation always uses the clean box.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxgeom
from . import gradcore as gc
from . import locloss as L
from .flowdist import FlowConfig, FlowModel, load_params, save_params
from .noisegen import NoiseModel, corrupt_boxes

log = logging.getLogger(__name__)

SCALE_BINS = ("very_tiny", "tiny", "small", "medium")
BIN_EDGES = (2.0, 8.0, 16.0, 32.0, 64.0)
EMBED_SEED = 7
IMAGE_SIZE = 800.0


def scale_bin(side):
    """Bin index for geometric-mean side length(s); -1 outside [2, 64)."""
    side = np.asarray(side, dtype=np.float64)
    idx = np.searchsorted(BIN_EDGES, side, side="right") - 1
    return np.where((side >= BIN_EDGES[0]) & (side < BIN_EDGES[-1]), idx, -1)


@dataclass
class SceneSample:
    feature: np.ndarray
    gt_box: boxgeom.BoundingBox
    noisy_box: boxgeom.BoundingBox
    anchor: boxgeom.Anchor
    scale_bin: str


@dataclass
class Dataset:
    """Struct-of-arrays container; indexing yields :class:`SceneSample`."""

    features: np.ndarray  # (N, F)
    gt: np.ndarray  # (N, 4) clean boxes
    noisy: np.ndarray  # (N, 4) training annotations
    anchors: np.ndarray  # (N, 4)
    bins: np.ndarray  # (N,) index into SCALE_BINS
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.bins)

    def __getitem__(self, i):
        return SceneSample(
            self.features[i].copy(),
            boxgeom.BoundingBox(*self.gt[i]),
            boxgeom.BoundingBox(*self.noisy[i]),
            boxgeom.Anchor(*self.anchors[i]),
            SCALE_BINS[self.bins[i]],
        )

    @property
    def clean_targets(self):
        return boxgeom.encode_array(self.gt, self.anchors)

    @property
    def noisy_targets(self):
        return boxgeom.encode_array(self.noisy, self.anchors)

    def save(self, path):
        """``<path>.f64`` holds features|gt|noisy|anchors|bins row-major; ``<path>.json`` the manifest."""
        import json

        arr = np.concatenate(
            [self.features, self.gt, self.noisy, self.anchors, self.bins[:, None].astype(np.float64)],
            axis=1,
        )
        arr.astype("<f8").tofile(str(path) + ".f64")
        counts = {SCALE_BINS[b]: int(np.sum(self.bins == b)) for b in range(len(SCALE_BINS))}
        manifest = dict(self.meta, n=len(self), feature_dim=self.features.shape[1],
                        columns=["feature"] * self.features.shape[1]
                        + ["gt_cx", "gt_cy", "gt_w", "gt_h", "noisy_cx", "noisy_cy", "noisy_w",
                           "noisy_h", "anchor_cx", "anchor_cy", "anchor_w", "anchor_h", "bin"],
                        bin_counts=counts, dtype="<f8")
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        import json

        with open(str(path) + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        f = meta["feature_dim"]
        arr = np.fromfile(str(path) + ".f64", dtype="<f8").reshape(meta["n"], f + 13)
        return cls(arr[:, :f].copy(), arr[:, f:f + 4].copy(), arr[:, f + 4:f + 8].copy(),
                   arr[:, f + 8:f + 12].copy(), arr[:, f + 12].astype(np.int64),
                   {k: meta[k] for k in ("seed", "noise", "feature_noise", "scale_mix") if k in meta})


def _embedding(feature_dim):
    rng = np.random.default_rng(EMBED_SEED)
    return rng.standard_normal((5, feature_dim)) / math.sqrt(5.0)


def generate_dataset(n, scale_mix=(0.25, 0.25, 0.25, 0.25), feature_noise=0.3,
                     noise=None, seed=0, feature_dim=16, anchor_jitter=0.1):
    """Draw ``n`` scenes; see the module docstring for the generative model."""
    mix = np.asarray(scale_mix, dtype=np.float64)
    if mix.shape != (4,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"scale_mix must be 4 non-negative proportions summing to 1, got {scale_mix}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if feature_noise < 0:
        raise ValueError("feature_noise must be >= 0")
    noise = noise or NoiseModel()
    ss = np.random.SeedSequence(int(seed))
    r_bin, r_size, r_pos, r_anchor, r_obs, r_noise = [np.random.default_rng(s) for s in ss.spawn(6)]

    bins = r_bin.choice(4, size=n, p=mix)
    lo = np.asarray(BIN_EDGES[:-1])[bins]
    hi = np.asarray(BIN_EDGES[1:])[bins]
    # log-uniform side within the bin, mild aspect ratio
    side = np.exp(r_size.uniform(np.log(lo), np.log(hi)))
    side = np.clip(side, lo, np.nextafter(hi, lo))
    aspect = np.exp(r_size.uniform(-0.2, 0.2, size=n))
    w, h = side * np.sqrt(aspect), side / np.sqrt(aspect)
    centers = r_pos.uniform(0.0, IMAGE_SIZE, size=(n, 2))
    gt = np.column_stack([centers, w, h])

    jit = r_anchor.uniform(-anchor_jitter, anchor_jitter, size=(n, 4))
    anchors = np.column_stack([
        gt[:, 0] + jit[:, 0] * w,
        gt[:, 1] + jit[:, 1] * h,
        w * np.exp(jit[:, 2]),
        h * np.exp(jit[:, 3]),
    ])

    clean_t = boxgeom.encode_array(gt, anchors)
    obs = r_obs.standard_normal((n, 4)) * (feature_noise / np.sqrt(side))[:, None]
    size_channel = (np.log2(side) - 3.5) / 1.5
    feats = np.column_stack([clean_t + obs, size_channel]) @ _embedding(feature_dim)

    noise_seed = int(r_noise.integers(0, 2**31 - 1))
    noisy = corrupt_boxes(gt, noise, noise_seed)
    meta = {"seed": int(seed), "noise": noise.to_dict(), "feature_noise": float(feature_noise),
            "scale_mix": [float(m) for m in mix]}
    return Dataset(feats, gt, noisy, anchors, bins.astype(np.int64), meta)


# -- regression head -----------------------------------------------------------

class RegressionHead:
    """Fully connected tanh network ``feature -> (T_hat, log sigma)``.

    In ``gfl`` mode the output is ``4 * (n + 1)`` logits instead and the
    prediction is the softmax expectation over the grid.
    """

    def __init__(self, feature_dim=16, hidden=(64, 64), mode="gaussian", gfl=None,
                 seed=None, params=None):
        self.feature_dim = feature_dim
        self.hidden = tuple(hidden)
        self.mode = mode
        self.gfl = gfl or L.GflConfig()
        if mode not in ("gaussian", "gfl"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.params = params if params is not None else self._init(seed)

    @property
    def out_dim(self):
        return 8 if self.mode == "gaussian" else 4 * (self.gfl.n + 1)

    def _init(self, seed):
        rng = np.random.default_rng(seed)
        widths = [self.feature_dim, *self.hidden, self.out_dim]
        items = []
        for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = j == len(widths) - 2
            w = np.zeros((a, b)) if last else rng.standard_normal((a, b)) / math.sqrt(a)
            items.append((f"W{j}", w))
            items.append((f"b{j}", np.zeros(b)))
        return gc.ParamVector.from_arrays(items)

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def raw(self, features, params=None):
        p = self.params.view() if params is None else params
        ws = [p[f"W{j}"] for j in range(self.n_layers)]
        bs = [p[f"b{j}"] for j in range(self.n_layers)]
        return gc.mlp(np.atleast_2d(features), ws, bs)

    def prediction(self, features, params=None):
        """Differentiable prediction for a ``(B, F)`` batch (gaussian mode)."""
        out = self.raw(features, params)
        t_hat = gc.getitem(out, (slice(None), slice(0, 4)))
        log_sigma = L.clamp_log_sigma(gc.getitem(out, (slice(None), slice(4, 8))))
        return L.Prediction(t_hat, log_sigma)

    def logits(self, features, params=None):
        out = self.raw(features, params)
        b = np.shape(gc.value_of(out))[0]
        return gc.reshape(out, (b, 4, self.gfl.n + 1))

    def save(self, path):
        """Write ``<path>.json`` (architecture + layout) and ``<path>.f64`` (params)."""
        save_params(path, self.params, {
            "feature_dim": self.feature_dim, "hidden": list(self.hidden), "mode": self.mode,
            "gfl": {"n": self.gfl.n, "alpha": self.gfl.alpha}})

    @classmethod
    def load(cls, path):
        params, meta = load_params(path)
        return cls(meta["feature_dim"], meta["hidden"], meta["mode"],
                   L.GflConfig(**meta["gfl"]), params=params)


def predict(head, feature):
    """Numeric :class:`~tolf.locloss.Prediction` for one feature vector or a batch."""
    feature = np.asarray(feature, dtype=np.float64)
    single = feature.ndim == 1
    if feature.shape[-1] != head.feature_dim:
        raise ValueError(f"feature length must be {head.feature_dim}")
    x = np.atleast_2d(feature)
    if head.mode == "gfl":
        mu, std = L.gfl_expectation(head.logits(x), head.gfl)
        pred = L.Prediction(mu, np.log(std))
    else:
        pred = head.prediction(x)
    if single:
        return L.Prediction(pred.t_hat[0], pred.log_sigma[0])
    return pred


# -- training ----------------------------------------------------------------

FLOW_LOSSES = ("tolf", "flow_only")


@dataclass
class TrainConfig:
    loss: str = "tolf"
    lam: float = 0.1
    base: str = "l2"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch: int = 64
    seed: int = 0
    # global-norm clip; with lam near 1 the flow term otherwise sharpens the
    # flow within a few momentum steps and the loss blows up
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.loss not in L.LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {L.LOSS_NAMES}")
        if self.base not in L.BASE_NAMES:
            raise ValueError(f"unknown base {self.base!r}; expected one of {L.BASE_NAMES}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0 or None")

    def to_dict(self):
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    head: RegressionHead
    flow: FlowModel
    trace: list
    gfl_clamped: int = 0


def batch_loss(cfg, head, flow, features, targets, view):
    """Mean training objective over a batch for the selected loss."""
    hv = view.sub("head")
    fv = view.sub("flow") if cfg.loss in FLOW_LOSSES else None
    if cfg.loss == "gfl":
        per = L.gfl_loss(targets, head.logits(features, hv), head.gfl, clamp=True)
        return gc.mean(per)
    pred = head.prediction(features, hv)
    if cfg.loss == "l2":
        per = L.l2_loss(targets, pred.t_hat)
    elif cfg.loss == "kl":
        per = L.gaussian_kl_loss(targets, pred)
    elif cfg.loss == "tolf":
        per = L.total_loss(targets, pred, flow, cfg.lam, cfg.base, fv)
    elif cfg.loss == "flow_only":
        extra = L.ablation_flow_only_loss(targets, pred.t_hat, flow, fv)
        per = gc.add(L.base_loss(cfg.base, targets, pred), gc.mul(extra, cfg.lam))
    else:  # uncertainty_only
        extra = L.ablation_uncertainty_only_loss(targets, pred, regularized=True)
        per = gc.add(L.base_loss(cfg.base, targets, pred), gc.mul(extra, cfg.lam))
    return gc.mean(per)


def train(head, flow, data, cfg):
    """Minibatch SGD with momentum on the selected objective.

    Head and flow parameters are updated jointly with one learning rate.
    Returns a :class:`TrainResult` with new model objects (inputs untouched).
    """
    uses_flow = cfg.loss in FLOW_LOSSES
    parts = {"head": head.params}
    if uses_flow:
        parts["flow"] = flow.params
    params = gc.ParamVector.concat(parts)
    theta = params.values.copy()
    velocity = np.zeros_like(theta)

    features = np.ascontiguousarray(data.features)
    targets = data.noisy_targets
    clamped = 0
    if cfg.loss == "gfl":
        _, clamped = L.clamp_targets(targets, head.gfl)
        if clamped:
            log.warning("clamped %d GFL target entries into [-%g, %g]", clamped,
                        head.gfl.alpha, head.gfl.alpha)

    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    trace = []
    initial = None
    running = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            pv = gc.ParamVector(theta, params.layout)
            try:
                value, grad = gc.value_and_grad(
                    lambda v: batch_loss(cfg, head, flow, features[idx], targets[idx], v), pv)
            except gc.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {start // cfg.batch}: {exc}") from exc
            if initial is None:
                initial = running = value
            running = 0.9 * running + 0.1 * value
            if not math.isfinite(value) or running > initial + 9.0 * abs(initial):
                raise TrainingDiverged(
                    f"running loss {running:.4g} exceeded 10x initial {initial:.4g} "
                    f"at epoch {epoch}, step {start // cfg.batch}")
            if cfg.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > cfg.grad_clip:
                    grad *= cfg.grad_clip / norm
            velocity *= cfg.momentum
            velocity += grad
            theta -= cfg.lr * velocity
            total += value * len(idx)
            count += len(idx)
        trace.append(total / count)
        log.debug("epoch %d loss %.6f", epoch, trace[-1])

    final = gc.ParamVector(theta, params.layout)
    new_head = RegressionHead(head.feature_dim, head.hidden, head.mode, head.gfl,
                              params=final.split("head"))
    new_flow = FlowModel(flow.config, final.split("flow")) if uses_flow else flow
    return TrainResult(new_head, new_flow, trace, clamped)


def make_models(cfg, feature_dim=16, hidden=(64, 64), flow_config=None, gfl=None):
    """Fresh head and identity-initialized flow for ``cfg``; seeded from ``cfg.seed``."""
    mode = "gfl" if cfg.loss == "gfl" else "gaussian"
    head = RegressionHead(feature_dim, hidden, mode, gfl, seed=cfg.seed)
    flow = FlowModel(flow_config or FlowConfig(), seed=cfg.seed + 1)
    return head, flow


def fit_flow(flow, samples, epochs=20, lr=2e-3, batch=256, seed=0):
    """Maximum-likelihood fit of ``flow`` to ``samples`` with cosine-decayed Adam.

    Used to probe the flow's expressiveness on known densities, apart from
    the box-regression objective. Uses Adam rather than the trainer's
    momentum SGD, which diverges on a standalone fit at step sizes large
    enough to converge in a few epochs.

    Args:
      flow: starting :class:`FlowModel` (left untouched).
      samples: (N, flow.dim) array.

    Returns:
      (fitted flow, per-epoch mean negative log-likelihood list).
    """
    x = np.ascontiguousarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != flow.dim:
        raise ValueError(f"samples must have shape (N, {flow.dim})")
    layout = flow.params.layout
    theta = flow.params.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    total_steps = epochs * math.ceil(n / batch)
    step = 0
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            value, grad = gc.value_and_grad(
                lambda p: gc.neg(gc.mean(flow.log_prob(x[idx], p))),
                gc.ParamVector(theta, layout))
            step += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            rate = lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            theta -= rate * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
            total += value * len(idx)
        trace.append(total / n)
    return FlowModel(flow.config, gc.ParamVector(theta, layout)), trace
