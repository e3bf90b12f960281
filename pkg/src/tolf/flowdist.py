"""Affine coupling flow (RealNVP style) over residual vectors.

The density is the exact change-of-variables density of a stack of affine
coupling layers on top of a standard normal base, so it is normalized by
construction. The Gaussian-prior-times-correction view is recovered as
``log G + log s = log p - log Q`` (see :meth:`FlowModel.log_correction`).

All methods accept an optional ``params`` mapping (a
:class:`~tolf.gradcore.ParamView`, possibly taped) so the same code path is
used for evaluation and for differentiation.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import gradcore as gc
from . import kernels

COORD_NAMES = ("x", "y", "w", "h")
EVAL_CHUNK = 16384


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 4
    num_coupling_layers: int = 6
    subnet_layers: int = 3  # affine maps per subnet; hidden width below
    subnet_width: int = 64
    scale_bound: float = 2.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling flows need dim >= 2")
        if self.num_coupling_layers < 1:
            raise ValueError("num_coupling_layers must be >= 1")
        if self.subnet_layers < 1 or self.subnet_width < 1:
            raise ValueError("subnet_layers and subnet_width must be >= 1")
        if not self.scale_bound > 0:
            raise ValueError("scale_bound must be positive")

    @property
    def split(self):
        return self.dim // 2

    def partition(self, layer):
        """``(conditioning, transformed)`` coordinate slices for ``layer``."""
        first, second = slice(0, self.split), slice(self.split, self.dim)
        return (first, second) if layer % 2 == 0 else (second, first)

    def masks(self):
        """Binary masks (1 = conditioning coordinate), one row per layer."""
        out = np.zeros((self.num_coupling_layers, self.dim), dtype=np.int8)
        for k in range(self.num_coupling_layers):
            out[k, self.partition(k)[0]] = 1
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _subnet_shapes(cfg, d_in, d_out):
    widths = [d_in] + [cfg.subnet_width] * (cfg.subnet_layers - 1) + [d_out]
    return list(zip(widths[:-1], widths[1:]))


def _slice_len(s, dim):
    return len(range(*s.indices(dim)))


def init_params(cfg, seed=None, init_scale=None):
    """Parameters with a zero final layer in every subnet (identity flow).

    ``init_scale`` overrides the std of the *final* layer to get a
    non-identity flow, which the tests use.
    """
    rng = np.random.default_rng(seed)
    items = []
    for k in range(cfg.num_coupling_layers):
        cond, trans = cfg.partition(k)
        d_in, d_out = _slice_len(cond, cfg.dim), _slice_len(trans, cfg.dim)
        for net in ("s", "t"):
            shapes = _subnet_shapes(cfg, d_in, d_out)
            for j, (a, b) in enumerate(shapes):
                last = j == len(shapes) - 1
                if last:
                    std = 0.0 if init_scale is None else init_scale
                else:
                    std = math.sqrt(1.0 / a)
                w = rng.standard_normal((a, b)) * std if std > 0 else np.zeros((a, b))
                items.append((f"c{k}.{net}.W{j}", w))
                items.append((f"c{k}.{net}.b{j}", np.zeros(b)))
    return gc.ParamVector.from_arrays(items)


def standard_normal_log_prob(z):
    """Row-wise log N(z; 0, I) for a ``(B, d)`` array or Var."""
    d = gc.value_of(z).shape[-1]
    return gc.mul(gc.sum(gc.square(z), axis=-1), -0.5) - 0.5 * d * gc.LOG_2PI


class FlowModel:
    """Coupling-layer density ``p(t) = Q(f^{-1}(t)) |det J_{f^{-1}}(t)|``."""

    def __init__(self, config=None, params=None, seed=None):
        self.config = config or FlowConfig()
        self.params = params if params is not None else init_params(self.config, seed)

    @property
    def dim(self):
        return self.config.dim

    def _view(self, params):
        return self.params.view() if params is None else params

    def _subnet(self, p, k, net, x):
        n = self.config.subnet_layers
        ws = [p[f"c{k}.{net}.W{j}"] for j in range(n)]
        bs = [p[f"c{k}.{net}.b{j}"] for j in range(n)]
        return gc.mlp(x, ws, bs)

    def _scale_shift(self, p, k, cond):
        c = self.config.scale_bound
        s = gc.mul(gc.tanh(self._subnet(p, k, "s", cond)), c)
        t = self._subnet(p, k, "t", cond)
        return s, t

    def _assemble(self, k, cond_part, trans_part):
        if self.config.partition(k)[0].start == 0:
            return gc.concat([cond_part, trans_part], axis=-1)
        return gc.concat([trans_part, cond_part], axis=-1)

    def coupling_forward(self, k, z, params=None):
        """One layer, latent -> data. Returns ``(x, log_det)`` per row."""
        p = self._view(params)
        cond_sl, trans_sl = self.config.partition(k)
        cond = gc.getitem(z, (slice(None), cond_sl))
        s, t = self._scale_shift(p, k, cond)
        moved = gc.add(gc.mul(gc.getitem(z, (slice(None), trans_sl)), gc.exp(s)), t)
        return self._assemble(k, cond, moved), gc.sum(s, axis=-1)

    def coupling_inverse(self, k, x, params=None):
        """One layer, data -> latent. Returns ``(z, log_det)`` per row."""
        p = self._view(params)
        cond_sl, trans_sl = self.config.partition(k)
        cond = gc.getitem(x, (slice(None), cond_sl))
        s, t = self._scale_shift(p, k, cond)
        moved = gc.mul(gc.sub(gc.getitem(x, (slice(None), trans_sl)), t), gc.exp(gc.neg(s)))
        return self._assemble(k, cond, moved), gc.neg(gc.sum(s, axis=-1))

    def forward(self, z, params=None):
        """Latent -> data for a ``(B, dim)`` batch; returns ``(x, log_det)``."""
        z, squeeze = _as_batch(z, self.dim)
        log_det = 0.0
        for k in range(self.config.num_coupling_layers):
            z, ld = self.coupling_forward(k, z, params)
            log_det = gc.add(log_det, ld)
        return _unbatch(z, log_det, squeeze)

    def inverse(self, x, params=None):
        """Data -> latent for a ``(B, dim)`` batch; returns ``(z, log_det)``.

        Runs as one fused node (``kernels.flow_inverse_*``); it matches
        composing :meth:`coupling_inverse` layer by layer.
        """
        x, squeeze = _as_batch(x, self.dim)
        p = self._view(params)
        cfg = self.config
        n = cfg.subnet_layers
        inputs = [x]
        layers = []
        for k in range(cfg.num_coupling_layers):
            cond, trans = (sl.indices(cfg.dim)[:2] for sl in cfg.partition(k))
            nets = []
            for net in ("s", "t"):
                ws = [p[f"c{k}.{net}.W{j}"] for j in range(n)]
                bs = [p[f"c{k}.{net}.b{j}"] for j in range(n)]
                inputs.extend(ws)
                inputs.extend(bs)
                nets.append(([gc.value_of(w) for w in ws], [gc.value_of(b) for b in bs]))
            layers.append((cond, trans, nets[0], nets[1]))
        z, log_det, caches = kernels.flow_inverse_forward(gc.value_of(x), layers, cfg.scale_bound)
        d = cfg.dim

        def vjp(g):
            gx, grads = kernels.flow_inverse_backward(g[:, :d], g[:, d], caches)
            out = [gx]
            for (gws_s, gbs_s), (gws_t, gbs_t) in grads:
                out.extend(gws_s)
                out.extend(gbs_s)
                out.extend(gws_t)
                out.extend(gbs_t)
            return out

        both = gc.primitive("flow_inverse", inputs, np.column_stack([z, log_det]), vjp)
        z = gc.getitem(both, (slice(None), slice(0, d)))
        log_det = gc.getitem(both, (slice(None), d))
        return _unbatch(z, log_det, squeeze)

    def inverse_layerwise(self, x, params=None):
        """Unfused reference for :meth:`inverse`, one tape node per primitive."""
        x, squeeze = _as_batch(x, self.dim)
        log_det = 0.0
        for k in reversed(range(self.config.num_coupling_layers)):
            x, ld = self.coupling_inverse(k, x, params)
            log_det = gc.add(log_det, ld)
        return _unbatch(x, log_det, squeeze)

    def log_prob(self, x, params=None):
        """Normalized log-density at each row of ``x``.

        Plain-array calls on large batches run in chunks of
        :data:`EVAL_CHUNK` rows to bound the memory held by layer caches.
        """
        xb, squeeze = _as_batch(x, self.dim)
        if (not isinstance(xb, gc.Var) and xb.shape[0] > EVAL_CHUNK
                and (params is None or getattr(params, "tape", None) is None)):
            return np.concatenate([self.log_prob(xb[i:i + EVAL_CHUNK], params)
                                   for i in range(0, xb.shape[0], EVAL_CHUNK)])
        z, log_det = self.inverse(xb, params)
        out = gc.add(standard_normal_log_prob(z), log_det)
        if squeeze:
            return gc.getitem(out, 0)
        return out

    def grad_log_prob(self, x):
        """d log p / dx at each row (via the tape), shape like ``x``."""
        xb, squeeze = _as_batch(x, self.dim)
        tape = gc.Tape()
        leaf = tape.leaf(np.array(xb, dtype=np.float64))
        total = gc.sum(self.log_prob(leaf))
        g = tape.backward(total)[leaf.index]
        if g is None:
            g = np.zeros_like(xb)
        return g[0] if squeeze else g

    def log_correction(self, x):
        """``log G(t) + log s = log p(t) - log Q(t)``."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self.log_prob(xb) - standard_normal_log_prob(xb)
        return out[0] if np.ndim(x) == 1 else out

    def sample(self, seed, n):
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.dim))
        return self.forward(z)[0]

    def conditional_log_prob(self, coordinate, grid, fixed=0.0, norm_grid=None):
        """Log-density of one coordinate with the others held at ``fixed``.

        The slice of the joint density is renormalized by trapezoid
        quadrature over ``norm_grid`` (default [-16, 16], 8001 points).
        """
        coordinate = coord_index(coordinate, self.dim)
        grid = np.asarray(grid, dtype=np.float64)
        if norm_grid is None:
            norm_grid = np.linspace(-16.0, 16.0, 8001)
        lp = self.log_prob(_slice_points(grid, coordinate, self.dim, fixed))
        norm = self.log_prob(_slice_points(norm_grid, coordinate, self.dim, fixed))
        m = norm.max()
        log_z = m + math.log(np.trapezoid(np.exp(norm - m), norm_grid))
        return lp - log_z

    # -- checkpoints ---------------------------------------------------------

    def save(self, path):
        """Write ``<path>.json`` (config + layout) and ``<path>.f64`` (params)."""
        save_params(path, self.params, {"flow_config": asdict(self.config)})

    @classmethod
    def load(cls, path):
        params, meta = load_params(path)
        return cls(FlowConfig.from_dict(meta["flow_config"]), params)


def coord_index(coordinate, dim):
    if isinstance(coordinate, str):
        if coordinate not in COORD_NAMES[:dim]:
            raise ValueError(f"unknown coordinate {coordinate!r}; expected one of {COORD_NAMES[:dim]}")
        return COORD_NAMES.index(coordinate)
    coordinate = int(coordinate)
    if not 0 <= coordinate < dim:
        raise ValueError(f"coordinate index {coordinate} out of range for dim {dim}")
    return coordinate


def _slice_points(grid, coordinate, dim, fixed):
    pts = np.full((grid.size, dim), float(fixed))
    pts[:, coordinate] = grid
    return pts


def _as_batch(x, dim):
    v = gc.value_of(x)
    if np.ndim(v) == 1:
        if isinstance(x, gc.Var):
            return gc.reshape(x, (1, dim)), True
        return np.asarray(v, dtype=np.float64)[None, :], True
    if np.shape(v)[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got {np.shape(v)}")
    if not isinstance(x, gc.Var):
        x = np.asarray(x, dtype=np.float64)
    return x, False


def _unbatch(x, log_det, squeeze):
    if squeeze:
        return gc.getitem(x, 0), gc.getitem(log_det, 0)
    return x, log_det


def save_params(path, params, meta):
    """Flat little-endian float64 array file plus a JSON manifest."""
    path = os.fspath(path)
    arr_path = path + ".f64"
    params.values.astype("<f8").tofile(arr_path)
    manifest = dict(meta)
    manifest["array_file"] = os.path.basename(arr_path)
    manifest["dtype"] = "<f8"
    manifest["count"] = int(params.values.size)
    manifest["layout"] = [[name, params.layout[name][0], list(params.layout[name][1])]
                          for name in params.names()]
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_params(path):
    path = os.fspath(path)
    if path.endswith(".json"):
        path = path[:-5]
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    arr = np.fromfile(os.path.join(os.path.dirname(path), meta["array_file"]), dtype="<f8")
    if arr.size != meta["count"]:
        raise ValueError(f"checkpoint array has {arr.size} values, manifest says {meta['count']}")
    layout = {name: (off, tuple(shape)) for name, off, shape in meta["layout"]}
    return gc.ParamVector(arr.astype(np.float64), layout), meta
