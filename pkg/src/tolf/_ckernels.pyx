# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``.

All arrays are C-contiguous float64. Row-major ``C = A @ B`` is issued to
column-major BLAS as ``C^T = B^T A^T``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fmin, fmax
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _matmul(double* a, double* b, double* c, int m, int k, int n,
                  double beta) noexcept nogil:
    # c (m, n) = a (m, k) @ b (k, n) + beta * c, all row-major
    cdef char no = b'N'
    cdef double one = 1.0
    dgemm(&no, &no, &n, &m, &k, &one, b, &n, a, &k, &beta, c, &n)


cdef void _matmul_tn(double* a, double* b, double* c, int m, int k, int n) noexcept nogil:
    # c (k, n) = a(m, k)^T @ b (m, n)
    cdef char no = b'N'
    cdef char tr = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&no, &tr, &n, &k, &m, &one, b, &n, a, &k, &zero, c, &n)


cdef void _matmul_nt(double* a, double* b, double* c, int m, int k, int n) noexcept nogil:
    # c (m, k) = a (m, n) @ b (k, n)^T
    cdef char no = b'N'
    cdef char tr = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&tr, &no, &k, &m, &n, &one, b, &n, a, &n, &zero, c, &k)


def mlp_forward(x, weights, biases):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a
    cdef int nb = h.shape[0]
    cdef int i, r, j, din, dout
    cdef int last = len(weights) - 1
    cdef double* ap
    cdef double* bp
    hidden = []
    for i in range(last + 1):
        w = np.ascontiguousarray(weights[i], dtype=np.float64)
        b = np.ascontiguousarray(biases[i], dtype=np.float64)
        din = w.shape[0]
        dout = w.shape[1]
        a = np.empty((nb, dout), dtype=np.float64)
        ap = <double*> a.data
        bp = <double*> b.data
        # seed with bias then accumulate the product (beta = 1)
        for r in range(nb):
            for j in range(dout):
                ap[r * dout + j] = bp[j]
        if nb > 0 and din > 0:
            _matmul(<double*> h.data, <double*> w.data, ap, nb, din, dout, 1.0)
        if i < last:
            # numpy's SIMD tanh beats a scalar libm loop by ~5x
            np.tanh(a, out=a)
            hidden.append(a)
        h = a
    return h, hidden


def mlp_backward(gy, x, weights, hidden):
    cdef int n = len(weights)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g = np.array(gy, dtype=np.float64, order="C")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xin = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h_in
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gw
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gb
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gnext
    cdef cnp.ndarray[cnp.float64_t, ndim=2] hp
    cdef int nb = g.shape[0]
    cdef int i, r, j, din, dout
    cdef double* gp
    cdef double* gbp
    cdef double* gnp
    cdef double* hpp
    cdef double hv
    gws = [None] * n
    gbs = [None] * n
    for i in range(n - 1, -1, -1):
        h_in = xin if i == 0 else hidden[i - 1]
        w = np.ascontiguousarray(weights[i], dtype=np.float64)
        din = w.shape[0]
        dout = w.shape[1]
        gw = np.zeros((din, dout), dtype=np.float64)
        gb = np.zeros(dout, dtype=np.float64)
        gp = <double*> g.data
        gbp = <double*> gb.data
        if nb > 0:
            _matmul_tn(<double*> h_in.data, gp, <double*> gw.data, nb, din, dout)
        for r in range(nb):
            for j in range(dout):
                gbp[j] += gp[r * dout + j]
        gws[i] = gw
        gbs[i] = gb
        gnext = np.zeros((nb, din), dtype=np.float64)
        gnp = <double*> gnext.data
        if nb > 0 and din > 0:
            _matmul_nt(gp, <double*> w.data, gnp, nb, din, dout)
        if i > 0:
            hp = hidden[i - 1]
            hpp = <double*> hp.data
            for r in range(nb * din):
                hv = hpp[r]
                gnp[r] *= 1.0 - hv * hv
        g = gnext
    return g, gws, gbs


def iou_aligned(a, b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = aa.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i
    cdef double iw, ih, inter, union
    cdef double ax0, ax1, ay0, ay1, bx0, bx1, by0, by1
    for i in range(n):
        ax0 = aa[i, 0] - 0.5 * aa[i, 2]
        ax1 = aa[i, 0] + 0.5 * aa[i, 2]
        ay0 = aa[i, 1] - 0.5 * aa[i, 3]
        ay1 = aa[i, 1] + 0.5 * aa[i, 3]
        bx0 = bb[i, 0] - 0.5 * bb[i, 2]
        bx1 = bb[i, 0] + 0.5 * bb[i, 2]
        by0 = bb[i, 1] - 0.5 * bb[i, 3]
        by1 = bb[i, 1] + 0.5 * bb[i, 3]
        iw = fmin(ax1, bx1) - fmax(ax0, bx0)
        ih = fmin(ay1, by1) - fmax(ay0, by0)
        if iw < 0.0:
            iw = 0.0
        if ih < 0.0:
            ih = 0.0
        inter = iw * ih
        union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
        out[i] = inter / union
    return out


def coupling_inverse_forward(x, cond, trans, s_net, t_net, double bound):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef int c0 = cond[0], c1 = cond[1], t0 = trans[0], t1 = trans[1]
    cdef int nb = xa.shape[0], d = xa.shape[1], nt = t1 - t0
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xc = np.ascontiguousarray(xa[:, c0:c1])
    raw_obj, s_hidden = mlp_forward(xc, *s_net)
    shift_obj, t_hidden = mlp_forward(xc, *t_net)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] raw = raw_obj
    cdef cnp.ndarray[cnp.float64_t, ndim=2] shift = shift_obj
    cdef cnp.ndarray[cnp.float64_t, ndim=2] th = np.tanh(raw)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] inv_scale = np.exp(-bound * th)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] zt = np.empty((nb, nt), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] z = xa.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] log_det = np.zeros(nb, dtype=np.float64)
    cdef int r, j
    cdef double v
    for r in range(nb):
        for j in range(nt):
            v = (xa[r, t0 + j] - shift[r, j]) * inv_scale[r, j]
            zt[r, j] = v
            z[r, t0 + j] = v
            log_det[r] -= bound * th[r, j]
    cache = (xc, cond, trans, s_net, t_net, bound, s_hidden, t_hidden, th, inv_scale, zt)
    return z, log_det, cache


def coupling_inverse_backward(gz, glog_det, cache):
    xc, cond, trans, s_net, t_net, bound_obj, s_hidden, t_hidden, th_obj, inv_obj, zt_obj = cache
    cdef double bound = bound_obj
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g = np.ascontiguousarray(gz, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gld = np.ascontiguousarray(glog_det, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] th = th_obj
    cdef cnp.ndarray[cnp.float64_t, ndim=2] inv_scale = inv_obj
    cdef cnp.ndarray[cnp.float64_t, ndim=2] zt = zt_obj
    cdef int c0 = cond[0], c1 = cond[1], t0 = trans[0], t1 = trans[1]
    cdef int nb = g.shape[0], nt = t1 - t0, nc = c1 - c0
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g_raw = np.empty((nb, nt), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g_shift = np.empty((nb, nt), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx = g.copy()
    cdef int r, j
    cdef double gzt, gxt, tv
    for r in range(nb):
        for j in range(nt):
            gzt = g[r, t0 + j]
            gxt = gzt * inv_scale[r, j]
            gx[r, t0 + j] = gxt
            g_shift[r, j] = -gxt
            tv = th[r, j]
            g_raw[r, j] = (-gzt * zt[r, j] - gld[r]) * bound * (1.0 - tv * tv)
    gcs_obj, gws_s, gbs_s = mlp_backward(g_raw, xc, s_net[0], s_hidden)
    gct_obj, gws_t, gbs_t = mlp_backward(g_shift, xc, t_net[0], t_hidden)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gcs = gcs_obj
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gct = gct_obj
    for r in range(nb):
        for j in range(nc):
            gx[r, c0 + j] += gcs[r, j] + gct[r, j]
    return gx, (gws_s, gbs_s), (gws_t, gbs_t)


def flow_inverse_forward(x, layers, double bound):
    z = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] log_det = np.zeros(z.shape[0], dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ld
    cdef Py_ssize_t r
    caches = []
    for cond, trans, s_net, t_net in reversed(layers):
        z, ld, cache = coupling_inverse_forward(z, cond, trans, s_net, t_net, bound)
        for r in range(log_det.shape[0]):
            log_det[r] += ld[r]
        caches.append(cache)
    return z, log_det, caches


def flow_inverse_backward(gz, glog_det, caches):
    g = gz
    grads = []
    for cache in reversed(caches):
        g, gs, gt = coupling_inverse_backward(g, glog_det, cache)
        grads.append((gs, gt))
    return g, grads
