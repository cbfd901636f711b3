# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels.

Same contract as ``sharpdiag._mlp_py``.  Matrix products go through BLAS
``dgemm`` directly so a small-batch call costs one Python entry instead of
dozens of numpy dispatches; everything elementwise is fused into C loops.
Row-major (m, k) buffers are handed to BLAS as column-major (k, m).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef enum:
    RELU = 0


cdef inline void _affine(const double* W, const double* b, const double* h,
                         double* z, int m, int fan_in, int fan_out) noexcept nogil:
    # z (m x fan_out) = h (m x fan_in) @ W (fan_in x fan_out) + b
    cdef int i, j
    cdef double one = 1.0, beta = 1.0
    cdef char trans = b'N'
    for i in range(m):
        for j in range(fan_out):
            z[i * fan_out + j] = b[j]
    dgemm(&trans, &trans, &fan_out, &m, &fan_in, &one, <double*>W, &fan_out,
          <double*>h, &fan_in, &beta, z, &fan_out)


cdef inline void _activate(double* z, int n, int act) noexcept nogil:
    cdef int i
    if act == RELU:
        for i in range(n):
            if z[i] < 0.0:
                z[i] = 0.0
    else:
        for i in range(n):
            z[i] = tanh(z[i])


def mlp_forward(const double[::1] params, const long[::1] dims, int act,
                const double[:, ::1] X):
    cdef int n_layers = dims.shape[0] - 1
    cdef int m = X.shape[0]
    cdef int l, fan_in, fan_out
    cdef Py_ssize_t off = 0
    cdef const double* h = &X[0, 0]
    cdef double[:, ::1] z
    bufs = []
    for l in range(n_layers):
        fan_in = dims[l]
        fan_out = dims[l + 1]
        out = np.empty((m, fan_out), dtype=np.float64)
        bufs.append(out)  # keeps the previous layer alive while h points into it
        z = out
        _affine(&params[off], &params[off + fan_in * fan_out], h, &z[0, 0],
                m, fan_in, fan_out)
        off += fan_in * fan_out + fan_out
        if l < n_layers - 1:
            _activate(&z[0, 0], m * fan_out, act)
        h = &z[0, 0]
    return out


def mlp_loss(const double[::1] params, const long[::1] dims, int act,
             const double[:, ::1] X, const long[::1] y, const double[::1] sw):
    cdef double[:, ::1] z = mlp_forward(params, dims, act, X)
    cdef int m = z.shape[0], k = z.shape[1]
    cdef int i, j
    cdef double mx, s, total = 0.0
    for i in range(m):
        mx = z[i, 0]
        for j in range(1, k):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(k):
            s += exp(z[i, j] - mx)
        total += sw[i] * (mx + log(s) - z[i, y[i]])
    return total / m


def mlp_loss_grad(const double[::1] params, const long[::1] dims, int act,
                  const double[:, ::1] X, const long[::1] y, const double[::1] sw):
    cdef int n_layers = dims.shape[0] - 1
    cdef int m = X.shape[0]
    cdef int l, i, j, fan_in, fan_out, k
    cdef Py_ssize_t off
    cdef double mx, s, total = 0.0, scale
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N', tt = b'T'

    offsets = np.empty(n_layers, dtype=np.int64)
    cdef long[::1] offs = offsets
    off = 0
    for l in range(n_layers):
        offs[l] = off
        off += dims[l] * dims[l + 1] + dims[l + 1]

    # activations: acts[0] is X, acts[l] the output of hidden layer l
    acts = [X]
    cdef double[:, ::1] z
    cdef const double* h = &X[0, 0]
    for l in range(n_layers):
        fan_in = dims[l]
        fan_out = dims[l + 1]
        buf = np.empty((m, fan_out), dtype=np.float64)
        z = buf
        _affine(&params[offs[l]], &params[offs[l] + fan_in * fan_out], h,
                &z[0, 0], m, fan_in, fan_out)
        if l < n_layers - 1:
            _activate(&z[0, 0], m * fan_out, act)
            acts.append(buf)
        h = &z[0, 0]

    # softmax cross-entropy; z now holds the logits and becomes dL/dz in place
    k = dims[n_layers]
    for i in range(m):
        mx = z[i, 0]
        for j in range(1, k):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(k):
            s += exp(z[i, j] - mx)
        total += sw[i] * (mx + log(s) - z[i, y[i]])
        scale = sw[i] / m
        for j in range(k):
            z[i, j] = exp(z[i, j] - mx) / s * scale
        z[i, y[i]] -= scale

    grad = np.empty(params.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef double[:, ::1] dz = z
    cdef double[:, ::1] dh
    cdef double[:, ::1] h_in
    for l in range(n_layers - 1, -1, -1):
        fan_in = dims[l]
        fan_out = dims[l + 1]
        off = offs[l]
        h_in = acts[l]
        # gW (fan_in x fan_out) = h_in^T @ dz
        dgemm(&tn, &tt, &fan_out, &fan_in, &m, &one, &dz[0, 0], &fan_out,
              &h_in[0, 0], &fan_in, &zero, &g[off], &fan_out)
        for j in range(fan_out):
            s = 0.0
            for i in range(m):
                s += dz[i, j]
            g[off + fan_in * fan_out + j] = s
        if l > 0:
            dh = np.empty((m, fan_in), dtype=np.float64)
            # dh (m x fan_in) = dz @ W^T
            dgemm(&tt, &tn, &fan_in, &m, &fan_out, &one, <double*>&params[off], &fan_out,
                  &dz[0, 0], &fan_out, &zero, &dh[0, 0], &fan_in)
            if act == RELU:
                for i in range(m):
                    for j in range(fan_in):
                        if h_in[i, j] <= 0.0:
                            dh[i, j] = 0.0
            else:
                for i in range(m):
                    for j in range(fan_in):
                        dh[i, j] = dh[i, j] * (1.0 - h_in[i, j] * h_in[i, j])
            dz = dh
    return total / m, grad
