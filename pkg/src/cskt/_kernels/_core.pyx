# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core with fused elementwise loops.

Bit parity with the NumPy reference backend is part of the contract. Two
rules keep it: transcendentals (exp) and axis reductions (sum, mean) are
delegated to NumPy, so both backends share one rounding behaviour for the
order-sensitive pieces, and every fused loop mirrors the reference
expression operation for operation (the build disables floating-point
contraction so no multiply-add fusing changes results). sqrt and pow map to
libm, which NumPy and CPython also use, and sqrt is correctly rounded by
IEEE 754 either way.
"""

import numpy as np

from libc.math cimport isnan, pow, sqrt

from cskt._kernels import _numpy_ref


cdef inline object _flat(object x):
    # keep the original shape around; ascontiguousarray turns 0-d into 1-d
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1)


# -- elementwise activations -------------------------------------------------


def relu_fwd(x):
    shp = np.shape(x)
    cdef double[::1] xv = _flat(x)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double xi
    for i in range(xv.shape[0]):
        xi = xv[i]
        # mirror np.maximum(x, 0.0): propagate NaN, send -0.0 to +0.0
        ov[i] = xi if (xi > 0.0 or isnan(xi)) else 0.0
    return out.reshape(shp)


def relu_bwd(x, g):
    xb, gb = np.broadcast_arrays(x, g)
    shp = xb.shape
    cdef double[::1] xv = _flat(xb)
    cdef double[::1] gv = _flat(gb)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out.reshape(shp)


def sigmoid_fwd(x):
    shp = np.shape(x)
    arr = np.ascontiguousarray(x, dtype=np.float64)
    e = np.exp(-arr)  # NumPy exp for parity with the reference
    cdef double[::1] ev = e.reshape(-1)
    out = np.empty(ev.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(ev.shape[0]):
        ov[i] = 1.0 / (1.0 + ev[i])
    return out.reshape(shp)


def sigmoid_bwd(y, g):
    yb, gb = np.broadcast_arrays(y, g)
    shp = yb.shape
    cdef double[::1] yv = _flat(yb)
    cdef double[::1] gv = _flat(gb)
    out = np.empty(yv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double yi
    for i in range(yv.shape[0]):
        yi = yv[i]
        ov[i] = (gv[i] * yi) * (1.0 - yi)
    return out.reshape(shp)


# -- row softmax -------------------------------------------------------------


def softmax_fwd(x):
    X = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = X
    cdef Py_ssize_t rows = xv.shape[0], n = xv.shape[1]
    shifted = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] sv = shifted
    cdef Py_ssize_t i, j
    cdef double m, xi
    for i in range(rows):
        m = xv[i, 0]
        for j in range(1, n):
            xi = xv[i, j]
            # mirror np.max: NaN is sticky
            if not isnan(m) and (xi > m or isnan(xi)):
                m = xi
        for j in range(n):
            sv[i, j] = xv[i, j] - m
    e = np.exp(shifted)
    s = e.sum(axis=1)  # NumPy pairwise summation, as in the reference
    cdef double[:, ::1] ev = e
    cdef double[::1] sumv = s
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    for i in range(rows):
        for j in range(n):
            ov[i, j] = ev[i, j] / sumv[i]
    return out


def softmax_bwd(y, g):
    Y = np.ascontiguousarray(y, dtype=np.float64)
    G = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] yv = Y
    cdef double[:, ::1] gv = G
    cdef Py_ssize_t rows = yv.shape[0], n = yv.shape[1]
    gy = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] gyv = gy
    cdef Py_ssize_t i, j
    for i in range(rows):
        for j in range(n):
            gyv[i, j] = gv[i, j] * yv[i, j]
    s = gy.sum(axis=1)
    cdef double[::1] sumv = s
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    for i in range(rows):
        for j in range(n):
            ov[i, j] = yv[i, j] * (gv[i, j] - sumv[i])
    return out


# -- layer norm --------------------------------------------------------------


def layer_norm_fwd(x, gain, bias, eps):
    X = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = X
    cdef double[::1] gv = np.ascontiguousarray(gain, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], n = xv.shape[1]
    cdef double epsv = eps
    # overflow on wildly diverged inputs is reported downstream as non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        mu = X.mean(axis=1)
    cdef double[::1] muv = mu
    xc = np.empty((rows, n), dtype=np.float64)
    sq = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] xcv = xc
    cdef double[:, ::1] sqv = sq
    cdef Py_ssize_t i, j
    cdef double c
    for i in range(rows):
        for j in range(n):
            c = xv[i, j] - muv[i]
            xcv[i, j] = c
            sqv[i, j] = c * c
    with np.errstate(over="ignore", invalid="ignore"):
        var = sq.mean(axis=1)
    cdef double[::1] varv = var
    inv_std = np.empty(rows, dtype=np.float64)
    xhat = np.empty((rows, n), dtype=np.float64)
    y = np.empty((rows, n), dtype=np.float64)
    cdef double[::1] iv = inv_std
    cdef double[:, ::1] xhv = xhat
    cdef double[:, ::1] yv = y
    cdef double inv, xh
    for i in range(rows):
        inv = 1.0 / sqrt(varv[i] + epsv)
        iv[i] = inv
        for j in range(n):
            xh = xcv[i, j] * inv
            xhv[i, j] = xh
            yv[i, j] = xh * gv[j] + bv[j]
    return y, xhat, inv_std


def layer_norm_bwd(g, xhat, inv_std, gain):
    G = np.ascontiguousarray(g, dtype=np.float64)
    XH = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef double[:, ::1] gv = G
    cdef double[:, ::1] xhv = XH
    cdef double[::1] iv = np.ascontiguousarray(inv_std, dtype=np.float64)
    cdef double[::1] gainv = np.ascontiguousarray(gain, dtype=np.float64)
    cdef Py_ssize_t rows = gv.shape[0], n = gv.shape[1]
    cdef double n_d = <double> n
    gxhat = np.empty((rows, n), dtype=np.float64)
    prod = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] gxv = gxhat
    cdef double[:, ::1] pv = prod
    cdef Py_ssize_t i, j
    cdef double gx
    for i in range(rows):
        for j in range(n):
            gx = gv[i, j] * gainv[j]
            gxv[i, j] = gx
            pv[i, j] = gx * xhv[i, j]
    t1 = gxhat.sum(axis=1)
    t2 = prod.sum(axis=1)
    cdef double[::1] t1v = t1
    cdef double[::1] t2v = t2
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double scale
    for i in range(rows):
        scale = iv[i] / n_d
        for j in range(n):
            ov[i, j] = scale * ((n_d * gxv[i, j] - t1v[i]) - xhv[i, j] * t2v[i])
        for j in range(n):
            pv[i, j] = gv[i, j] * xhv[i, j]
    ggain = prod.sum(axis=0)
    gbias = G.sum(axis=0)
    return out, ggain, gbias


# -- optimizer ---------------------------------------------------------------


cdef bint _inplace_ok(object a):
    return (isinstance(a, np.ndarray) and a.dtype == np.float64
            and a.flags.c_contiguous)


def adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    if not (_inplace_ok(p) and _inplace_ok(m) and _inplace_ok(v)
            and np.shape(g) == np.shape(p) == np.shape(m) == np.shape(v)):
        # exotic layouts keep the reference semantics (still in place)
        _numpy_ref.adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd)
        return
    cdef double[::1] pv = p.reshape(-1)
    cdef double[::1] gv = _flat(g)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef double b1 = beta1, b2 = beta2, lrv = lr, epsv = eps, wdv = wd
    cdef double c1 = 1.0 - b1
    cdef double c2 = 1.0 - b2
    cdef double bc1 = 1.0 - pow(b1, <double> t)
    cdef double bc2 = 1.0 - pow(b2, <double> t)
    cdef Py_ssize_t i
    cdef double gi, mi, vi
    for i in range(pv.shape[0]):
        gi = gv[i]
        mi = mv[i] * b1
        mi = mi + c1 * gi
        mv[i] = mi
        vi = vv[i] * b2
        vi = vi + c2 * (gi * gi)
        vv[i] = vi
        pv[i] = pv[i] - lrv * ((mi / bc1) / (sqrt(vi / bc2) + epsv) + wdv * pv[i])
