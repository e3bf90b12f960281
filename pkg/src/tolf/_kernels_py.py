"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them with a
compiled loop. Both must agree to ~1e-12 (see tests/test_kernels.py).
"""
import numpy as np


def mlp_forward(x, weights, biases):
    """Evaluate a tanh MLP with a linear output layer.

    Args:
      x: (B, d_in) float64 array.
      weights: list of (d_l, d_{l+1}) arrays.
      biases: list of (d_{l+1},) arrays.

    Returns:
      (y, hidden) where ``hidden`` holds the post-activation output of every
      hidden layer, which ``mlp_backward`` needs.
    """
    h = x
    hidden = []
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        a = h @ w
        a += b
        if i < last:
            np.tanh(a, out=a)
            hidden.append(a)
        h = a
    return h, hidden


def mlp_backward(gy, x, weights, hidden):
    """Vector-Jacobian product of ``mlp_forward``.

    Returns:
      (gx, gweights, gbiases).
    """
    n = len(weights)
    gws = [None] * n
    gbs = [None] * n
    g = gy
    for i in range(n - 1, -1, -1):
        h_in = x if i == 0 else hidden[i - 1]
        gws[i] = h_in.T @ g
        gbs[i] = g.sum(axis=0)
        g = g @ weights[i].T
        if i > 0:
            g *= 1.0 - hidden[i - 1] * hidden[i - 1]
    return g, gws, gbs


def iou_aligned(a, b):
    """Row-wise IoU of two (N, 4) center-size box arrays."""
    ax0 = a[:, 0] - 0.5 * a[:, 2]
    ax1 = a[:, 0] + 0.5 * a[:, 2]
    ay0 = a[:, 1] - 0.5 * a[:, 3]
    ay1 = a[:, 1] + 0.5 * a[:, 3]
    bx0 = b[:, 0] - 0.5 * b[:, 2]
    bx1 = b[:, 0] + 0.5 * b[:, 2]
    by0 = b[:, 1] - 0.5 * b[:, 3]
    by1 = b[:, 1] + 0.5 * b[:, 3]
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = iw * ih
    # areas from the rounded corners keep iou(a, a) == 1 exactly
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def coupling_inverse_forward(x, cond, trans, s_net, t_net, bound):
    """Data -> latent through one affine coupling layer.

    Args:
      x: (B, d) input.
      cond, trans: ``(start, stop)`` column ranges of the conditioning and
        transformed halves.
      s_net, t_net: ``(weights, biases)`` of the scale and shift subnets.
      bound: scale squashing constant, ``s = bound * tanh(raw)``.

    Returns:
      ``(z, log_det, cache)`` with ``log_det = -sum(s)`` per row.
    """
    xc = np.ascontiguousarray(x[:, cond[0]:cond[1]])
    xt = x[:, trans[0]:trans[1]]
    raw, s_hidden = mlp_forward(xc, *s_net)
    shift, t_hidden = mlp_forward(xc, *t_net)
    th = np.tanh(raw)
    s = bound * th
    inv_scale = np.exp(-s)
    zt = (xt - shift) * inv_scale
    z = np.array(x, dtype=np.float64, copy=True)
    z[:, trans[0]:trans[1]] = zt
    log_det = -s.sum(axis=1)
    cache = (xc, cond, trans, s_net, t_net, bound, s_hidden, t_hidden, th, inv_scale, zt)
    return z, log_det, cache


def coupling_inverse_backward(gz, glog_det, cache):
    """VJP of ``coupling_inverse_forward``.

    Returns ``(gx, (gws_s, gbs_s), (gws_t, gbs_t))``.
    """
    xc, cond, trans, s_net, t_net, bound, s_hidden, t_hidden, th, inv_scale, zt = cache
    gzt = gz[:, trans[0]:trans[1]]
    g_xt = gzt * inv_scale
    g_shift = -g_xt
    g_s = -gzt * zt - glog_det[:, None]
    g_raw = g_s * bound * (1.0 - th * th)
    gc_s, gws_s, gbs_s = mlp_backward(g_raw, xc, s_net[0], s_hidden)
    gc_t, gws_t, gbs_t = mlp_backward(g_shift, xc, t_net[0], t_hidden)
    gx = np.array(gz, dtype=np.float64, copy=True)
    gx[:, trans[0]:trans[1]] = g_xt
    gx[:, cond[0]:cond[1]] += gc_s + gc_t
    return gx, (gws_s, gbs_s), (gws_t, gbs_t)


def flow_inverse_forward(x, layers, bound):
    """Run ``coupling_inverse_forward`` for ``layers`` in reverse order.

    ``layers[k]`` is ``(cond, trans, s_net, t_net)``. Returns
    ``(z, log_det, caches)``.
    """
    z = np.ascontiguousarray(x, dtype=np.float64)
    log_det = np.zeros(z.shape[0])
    caches = []
    for cond, trans, s_net, t_net in reversed(layers):
        z, ld, cache = coupling_inverse_forward(z, cond, trans, s_net, t_net, bound)
        log_det += ld
        caches.append(cache)
    return z, log_det, caches


def flow_inverse_backward(gz, glog_det, caches):
    """VJP of ``flow_inverse_forward``; parameter grads in ``layers`` order."""
    g = gz
    grads = []
    for cache in reversed(caches):
        g, gs, gt = coupling_inverse_backward(g, glog_det, cache)
        grads.append((gs, gt))
    return g, grads
