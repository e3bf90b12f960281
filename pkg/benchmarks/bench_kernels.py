"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--out results.csv]

Times each hot kernel at training batch size, plus one full tolf training
step (forward, backward, parameter update) and a short training run, and
prints the speedup of the compiled backend.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from tolf import gradcore as gc
from tolf import kernels
from tolf import synthbench as sb
from tolf.flowdist import FlowConfig, init_params
from tolf.noisegen import NoiseModel


def _mlp_case(rng, batch=64):
    x = rng.normal(size=(batch, 16))
    ws = [rng.normal(size=(16, 64)) / 4, rng.normal(size=(64, 64)) / 8, rng.normal(size=(64, 8)) / 8]
    bs = [np.zeros(64), np.zeros(64), np.zeros(8)]
    y, hidden = kernels.mlp_forward(x, ws, bs)
    gy = rng.normal(size=y.shape)
    return {
        "mlp_forward": lambda: kernels.mlp_forward(x, ws, bs),
        "mlp_backward": lambda: kernels.mlp_backward(gy, x, ws, hidden),
    }


def _flow_case(rng, batch=64):
    cfg = FlowConfig()
    params = init_params(cfg, seed=0, init_scale=0.1)
    layers = []
    for k in range(cfg.num_coupling_layers):
        cond, trans = (sl.indices(cfg.dim)[:2] for sl in cfg.partition(k))
        nets = []
        for net in ("s", "t"):
            ws = [params[f"c{k}.{net}.W{j}"] for j in range(cfg.subnet_layers)]
            bs = [params[f"c{k}.{net}.b{j}"] for j in range(cfg.subnet_layers)]
            nets.append((ws, bs))
        layers.append((cond, trans, nets[0], nets[1]))
    x = rng.normal(size=(batch, cfg.dim))
    z, ld, caches = kernels.flow_inverse_forward(x, layers, cfg.scale_bound)
    gz = rng.normal(size=z.shape)
    gld = rng.normal(size=ld.shape)
    return {
        "flow_inverse_forward": lambda: kernels.flow_inverse_forward(x, layers, cfg.scale_bound),
        "flow_inverse_backward": lambda: kernels.flow_inverse_backward(gz, gld, caches),
    }


def _iou_case(rng, n=20_000):
    a = np.column_stack([rng.uniform(0, 100, (n, 2)), rng.uniform(2, 64, (n, 2))])
    b = a + rng.normal(scale=1.0, size=a.shape) * [1, 1, 0, 0]
    return {"iou_aligned_20k": lambda: kernels.iou_aligned(a, b)}


def _train_case():
    data = sb.generate_dataset(2048, noise=NoiseModel("gaussian_center", 2.0), seed=0)
    cfg = sb.TrainConfig(loss="tolf", epochs=1)
    head, flow = sb.make_models(cfg)
    params = gc.ParamVector.concat({"head": head.params, "flow": flow.params})
    feats, targets = data.features[:64], data.noisy_targets[:64]

    def step():
        gc.value_and_grad(lambda v: sb.batch_loss(cfg, head, flow, feats, targets, v), params)

    return {
        "tolf_train_step": step,
        "tolf_epoch_2048": lambda: sb.train(head, flow, data, cfg),
    }


def time_all(repeat):
    rows = {}
    for backend in ("python", "cython"):
        try:
            kernels.set_backend(backend)
        except ImportError:
            print(f"{backend} backend unavailable; skipping", file=sys.stderr)
            continue
        rng = np.random.default_rng(0)
        cases = {**_mlp_case(rng), **_flow_case(rng), **_iou_case(rng), **_train_case()}
        for name, fn in cases.items():
            fn()  # warm up
            number = 1 if name.startswith("tolf_epoch") else 50
            best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
            rows.setdefault(name, {})[backend] = best
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--out", default=None, help="optional CSV output")
    args = ap.parse_args(argv)
    previous = kernels.BACKEND
    try:
        rows = time_all(args.repeat)
    finally:
        kernels.set_backend(previous)
    print(f"{'kernel':<24}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    table = []
    for name, t in rows.items():
        py, cy = t.get("python"), t.get("cython")
        speed = py / cy if py and cy else float("nan")
        print(f"{name:<24}{py * 1e6 if py else float('nan'):>14.1f}"
              f"{cy * 1e6 if cy else float('nan'):>14.1f}{speed:>10.2f}")
        table.append((name, py, cy, speed))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["kernel", "python_s", "cython_s", "speedup"])
            w.writerows(table)


if __name__ == "__main__":
    main()
