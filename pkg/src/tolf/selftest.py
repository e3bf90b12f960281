"""Fast numerical invariant checks run by ``tolf selftest``.

Each check returns ``(ok, detail)``. The full pytest suite covers the same
ground more thoroughly; this module needs no test dependencies and finishes
in well under a minute.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import boxgeom, kernels
from . import evalmetrics as em
from . import gradcore as gc
from . import locloss as L
from . import synthbench as sb
from .flowdist import FlowConfig, FlowModel, init_params, standard_normal_log_prob
from .noisegen import NoiseModel, residual_distribution_sample


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-8)))


def check_iou_arithmetic():
    a = boxgeom.iou((5, 5, 10, 10), (7, 5, 10, 10))
    b = boxgeom.iou((50, 50, 100, 100), (52, 50, 100, 100))
    err = max(abs(a - 80 / 120), abs(b - 9800 / 10200))
    return err < 1e-12, f"max error {err:.2e}"


def check_gaussian_bridge():
    rng = np.random.default_rng(0)
    T = rng.normal(size=(200, 4))
    pred = L.Prediction(rng.normal(size=(200, 4)), rng.uniform(-2, 1, size=(200, 4)))
    flow = FlowModel(FlowConfig(), seed=0)
    err = float(np.max(np.abs(L.tolf_loss(T, pred, flow) - L.gaussian_kl_loss(T, pred))))
    return err < 1e-12, f"max |tolf - kl| {err:.2e}"


def check_tolf_gradients():
    rng = np.random.default_rng(1)
    flow = FlowModel(FlowConfig(), init_params(FlowConfig(), seed=3, init_scale=0.3))
    T = rng.normal(size=(8, 4))
    p = gc.ParamVector.from_arrays([("t_hat", rng.normal(size=(8, 4))),
                                    ("log_sigma", rng.uniform(-1, 0.5, size=(8, 4)))])

    def f(v):
        return gc.sum(L.tolf_loss(T, L.Prediction(v["t_hat"], v["log_sigma"]), flow))

    _, g = gc.value_and_grad(f, p)
    fd = gc.finite_diff_grad(f, p)
    ad_err = _rel_err(g, fd)
    sigma = np.exp(p["log_sigma"])
    t_bar = (T - p["t_hat"]) / sigma
    dq, dg = L.flow_score_terms(flow, t_bar)
    g = gc.ParamVector(g, p.layout)
    mu_err = _rel_err(g["t_hat"], L.tolf_grad_mu_analytic(t_bar, sigma, dq, dg))
    # d/dlog sigma = sigma * d/dsigma
    sig_err = _rel_err(g["log_sigma"] / sigma,
                       L.tolf_grad_sigma_analytic(T, p["t_hat"], sigma, dq, dg))
    err = max(ad_err, mu_err, sig_err)
    return err < 1e-4, f"autodiff vs fd {ad_err:.1e}, closed forms {mu_err:.1e}/{sig_err:.1e}"


def check_flow_invertibility():
    flow = FlowModel(FlowConfig(), init_params(FlowConfig(), seed=5, init_scale=0.3))
    z = np.random.default_rng(2).normal(size=(1000, 4))
    x, ld_f = flow.forward(z)
    z2, ld_i = flow.inverse(x)
    err = max(float(np.max(np.abs(z2 - z))), float(np.max(np.abs(ld_f + ld_i))))
    return err < 1e-9, f"max error {err:.2e}"


def check_flow_normalization():
    cfg = FlowConfig(dim=2)
    flow = FlowModel(cfg, init_params(cfg, seed=4, init_scale=0.05))
    axes = em.make_grid([(-8, 8), (-8, 8)], 401)
    mesh = np.meshgrid(*axes, indexing="ij")
    p = np.exp(flow.log_prob(np.column_stack([m.ravel() for m in mesh]))).reshape(mesh[0].shape)
    mass = np.trapezoid(np.trapezoid(p, axes[1], axis=1), axes[0])
    return abs(mass - 1) < 1e-3, f"integral {mass:.6f}"


def check_identity_flow():
    flow = FlowModel(FlowConfig(), seed=0)
    x = np.random.default_rng(3).normal(size=(500, 4))
    ok = np.array_equal(flow.log_prob(x), standard_normal_log_prob(x))
    return ok, "log_prob equals the standard normal log-density" if ok else "mismatch"


def check_gfl_identities():
    cfg = L.GflConfig()
    T = np.random.default_rng(4).uniform(-1, 1, size=1000)
    w = L.gfl_encode_twohot(T, cfg)
    err = max(float(np.max(np.abs(w.sum(-1) - 1))), float(np.max(np.abs(w @ cfg.grid - T))))
    loss = float(L.gfl_loss(np.full(4, cfg.grid[3]), np.zeros((4, cfg.n + 1)), cfg)) / 4
    err = max(err, abs(loss - math.log(cfg.n + 1)))
    return err < 1e-12, f"max error {err:.2e}"


def check_noise_prefix():
    m = NoiseModel("student_t", 1.0)
    ok = np.array_equal(residual_distribution_sample(m, 50, 9)[:20], residual_distribution_sample(m, 20, 9))
    return ok, "prefix-stable draws" if ok else "draws depend on n"


def check_kernel_backends():
    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        return True, "compiled backend not built; skipped"
    rng = np.random.default_rng(5)
    x = rng.normal(size=(64, 16))
    ws = [rng.normal(size=(16, 32)), rng.normal(size=(32, 8))]
    bs = [rng.normal(size=32), rng.normal(size=8)]
    a = kernels.get_backend("python").mlp_forward(x, ws, bs)[0]
    b = compiled.mlp_forward(x, ws, bs)[0]
    err = float(np.max(np.abs(a - b)))
    return err < 1e-12, f"mlp max difference {err:.2e}"


def check_training_determinism():
    data = sb.generate_dataset(256, noise=NoiseModel("gaussian_center", 1.0), seed=0)
    cfg = sb.TrainConfig(loss="tolf", epochs=2, batch=64)
    runs = [sb.train(*sb.make_models(cfg), data, cfg) for _ in range(2)]
    ok = (runs[0].trace == runs[1].trace
          and np.array_equal(runs[0].head.params.values, runs[1].head.params.values))
    return ok, "bit-identical" if ok else "runs differ"


def check_kl_zero():
    axes = em.make_grid([(-8, 8)], 4001)
    flow = FlowModel(FlowConfig(dim=2), seed=0)
    kl = em.density_kl(flow, lambda p: -0.5 * p[:, 0] ** 2 - 0.5 * math.log(2 * math.pi), axes)
    return abs(kl) < 1e-4, f"KL {kl:.2e}"


CHECKS = [
    ("iou_arithmetic", check_iou_arithmetic),
    ("gaussian_bridge", check_gaussian_bridge),
    ("tolf_gradients", check_tolf_gradients),
    ("flow_invertibility", check_flow_invertibility),
    ("flow_normalization", check_flow_normalization),
    ("identity_flow", check_identity_flow),
    ("gfl_identities", check_gfl_identities),
    ("noise_prefix", check_noise_prefix),
    ("kernel_backends", check_kernel_backends),
    ("training_determinism", check_training_determinism),
    ("kl_identical_densities", check_kl_zero),
]


def run(verbose=False):
    """Run every check; return the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name:<24} {detail} ({time.perf_counter() - t0:.2f}s)")
    if verbose:
        print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
