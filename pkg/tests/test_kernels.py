import numpy as np
import pytest

from tolf import kernels
from tolf.flowdist import FlowConfig, FlowModel, init_params

py = kernels.get_backend("python")
try:
    cy = kernels.get_backend("cython")
except ImportError:  # extension not built
    cy = None

needs_cython = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def _mlp(rng, b=33, widths=(5, 17, 9, 3)):
    x = rng.normal(size=(b, widths[0]))
    ws = [rng.normal(size=(a, c)) / np.sqrt(a) for a, c in zip(widths[:-1], widths[1:])]
    bs = [rng.normal(size=c) for c in widths[1:]]
    return x, ws, bs


def _layers(cfg, params):
    out = []
    for k in range(cfg.num_coupling_layers):
        cond, trans = (sl.indices(cfg.dim)[:2] for sl in cfg.partition(k))
        nets = tuple(([params[f"c{k}.{n}.W{j}"] for j in range(cfg.subnet_layers)],
                      [params[f"c{k}.{n}.b{j}"] for j in range(cfg.subnet_layers)]) for n in "st")
        out.append((cond, trans, *nets))
    return out


def test_backend_names():
    assert kernels.BACKEND in ("python", "cython")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_set_backend_roundtrip():
    prev = kernels.set_backend("python")
    try:
        assert kernels.BACKEND == "python"
    finally:
        kernels.set_backend(prev)
    assert kernels.BACKEND == prev


@needs_cython
@pytest.mark.parametrize("b", [1, 2, 64, 257])
def test_mlp_backends_agree(b):
    rng = np.random.default_rng(b)
    x, ws, bs = _mlp(rng, b)
    y1, h1 = py.mlp_forward(x, ws, bs)
    y2, h2 = cy.mlp_forward(x, ws, bs)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
    gy = rng.normal(size=y1.shape)
    g1 = py.mlp_backward(gy, x, ws, h1)
    g2 = cy.mlp_backward(gy, x, ws, h2)
    np.testing.assert_allclose(g1[0], g2[0], rtol=1e-12, atol=1e-12)
    for a, c in zip(g1[1] + g1[2], g2[1] + g2[2]):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)


@needs_cython
def test_iou_backends_agree():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0, 30, (999, 2)), rng.uniform(0.5, 20, (999, 2))])
    b = np.column_stack([rng.uniform(0, 30, (999, 2)), rng.uniform(0.5, 20, (999, 2))])
    np.testing.assert_allclose(py.iou_aligned(a, b), cy.iou_aligned(a, b), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(cy.iou_aligned(a, a), 1.0)


@needs_cython
def test_flow_backends_agree():
    cfg = FlowConfig()
    params = init_params(cfg, seed=2, init_scale=0.2)
    layers = _layers(cfg, params)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 4))
    z1, ld1, c1 = py.flow_inverse_forward(x, layers, cfg.scale_bound)
    z2, ld2, c2 = cy.flow_inverse_forward(x, layers, cfg.scale_bound)
    np.testing.assert_allclose(z1, z2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ld1, ld2, rtol=1e-12, atol=1e-12)
    gz, gld = rng.normal(size=z1.shape), rng.normal(size=ld1.shape)
    gx1, gr1 = py.flow_inverse_backward(gz, gld, c1)
    gx2, gr2 = cy.flow_inverse_backward(gz, gld, c2)
    np.testing.assert_allclose(gx1, gx2, rtol=1e-11, atol=1e-12)
    flat1 = [a for (s, t) in gr1 for part in (s, t) for arrs in part for a in arrs]
    flat2 = [a for (s, t) in gr2 for part in (s, t) for arrs in part for a in arrs]
    for a, c in zip(flat1, flat2):
        np.testing.assert_allclose(a, c, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_fused_inverse_matches_layerwise(backend):
    if backend == "cython" and cy is None:
        pytest.skip("compiled kernels not built")
    prev = kernels.set_backend(backend)
    try:
        cfg = FlowConfig()
        flow = FlowModel(cfg, init_params(cfg, seed=4, init_scale=0.3))
        x = np.random.default_rng(5).normal(size=(40, 4))
        z1, ld1 = flow.inverse(x)
        z2, ld2 = flow.inverse_layerwise(x)
        np.testing.assert_allclose(z1, z2, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(ld1, ld2, rtol=1e-13, atol=1e-13)
    finally:
        kernels.set_backend(prev)
