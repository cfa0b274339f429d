# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled hot kernels: fused adversarial train step and PAV pooling.

Numerically equivalent to `_kernel_py` (held to agreement by
tests/test_backends.py); matmuls go through BLAS dgemm, everything else
is straight C loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BN_EPS = 1e-5
PROB_CLAMP = 1e-7

cdef double _BN_EPS = 1e-5
cdef double _CLAMP = 1e-7


def pav_pool(values, weights):
    """Weighted non-decreasing isotonic least-squares fit (see _kernel_py)."""
    cdef double[::1] v = np.array(values, dtype=np.float64, order="C")
    cdef double[::1] w = np.array(weights, dtype=np.float64, order="C")
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] fitted = out
    cdef double[::1] level = np.empty(n, dtype=np.float64)
    cdef double[::1] wsum = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] count = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t i, b, pos, top = -1
    cdef double merged
    for i in range(n):
        top += 1
        level[top] = v[i]
        wsum[top] = w[i]
        count[top] = 1
        while top > 0 and level[top - 1] > level[top]:
            merged = wsum[top - 1] + wsum[top]
            level[top - 1] = (level[top - 1] * wsum[top - 1]
                              + level[top] * wsum[top]) / merged
            wsum[top - 1] = merged
            count[top - 1] += count[top]
            top -= 1
    pos = 0
    for b in range(top + 1):
        for i in range(count[b]):
            fitted[pos + i] = level[b]
        pos += count[b]
    return out


# --- row-major BLAS wrappers -------------------------------------------------

cdef void _mm_nn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                 double alpha, double beta) noexcept:
    """C (m,n) = alpha * A (m,k) @ B (k,n) + beta * C."""
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[1]
    cdef char t = b'n'
    dgemm(&t, &t, &n, &m, &k, &alpha, &B[0, 0], &n, &A[0, 0], &k,
          &beta, &C[0, 0], &n)

cdef void _mm_nt(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                 double alpha, double beta) noexcept:
    """C (m,n) = alpha * A (m,k) @ B.T (k,n) + beta * C, B stored (n,k)."""
    cdef int m = A.shape[0], k = A.shape[1], n = B.shape[0]
    cdef char tt = b't', tn = b'n'
    dgemm(&tt, &tn, &n, &m, &k, &alpha, &B[0, 0], &k, &A[0, 0], &k,
          &beta, &C[0, 0], &n)

cdef void _mm_tn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                 double alpha, double beta) noexcept:
    """C (m,n) = alpha * A.T (m,p) @ B (p,n) + beta * C, A stored (p,m)."""
    cdef int p = A.shape[0], m = A.shape[1], n = B.shape[1]
    cdef char tn = b'n', tt = b't'
    dgemm(&tn, &tt, &n, &m, &p, &alpha, &B[0, 0], &n, &A[0, 0], &m,
          &beta, &C[0, 0], &n)


cdef inline double _sigmoid(double x) noexcept:
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    cdef double e = exp(x)
    return e / (1.0 + e)


cdef void _sgd(double[:, ::1] grad_like, double[:, ::1] vel,
               double[:, ::1] param, double lr, double momentum) noexcept:
    cdef Py_ssize_t i, j
    for i in range(param.shape[0]):
        for j in range(param.shape[1]):
            vel[i, j] = momentum * vel[i, j] + grad_like[i, j]
            param[i, j] -= lr * vel[i, j]

cdef void _sgd1(double[::1] grad_like, double[::1] vel, double[::1] param,
                double lr, double momentum) noexcept:
    cdef Py_ssize_t i
    for i in range(param.shape[0]):
        vel[i] = momentum * vel[i] + grad_like[i]
        param[i] -= lr * vel[i]


def train_step_inplace(params, velocity, X_in, y_in, w_in, double lr,
                       double adv_lr, double momentum, double bn_momentum,
                       bint update_running=True):
    """One fused adversarial step; same contract as the numpy fallback."""
    # np.array copies, so read-only inputs still coerce to writable buffers
    cdef double[:, ::1] X = np.array(X_in, dtype=np.float64, order="C")
    cdef double[::1] y = np.array(y_in, dtype=np.float64, order="C")
    cdef double[::1] w_cond = np.array(w_in, dtype=np.float64, order="C")

    cdef double[:, ::1] enc_w = params["enc_w"]
    cdef double[::1] enc_b = params["enc_b"]
    cdef double[::1] gamma = params["bn_gamma"]
    cdef double[::1] beta = params["bn_beta"]
    cdef double[::1] run_mean = params["bn_run_mean"]
    cdef double[::1] run_var = params["bn_run_var"]
    cdef double[:, ::1] dec_w = params["dec_w"]
    cdef double[::1] dec_b = params["dec_b"]
    cdef double[:, ::1] adv_w1 = params["adv_w1"]
    cdef double[::1] adv_b1 = params["adv_b1"]
    cdef double[::1] adv_w2 = params["adv_w2"]
    cdef double[::1] adv_b2 = params["adv_b2"]

    cdef double[:, ::1] v_enc_w = velocity["enc_w"]
    cdef double[::1] v_enc_b = velocity["enc_b"]
    cdef double[::1] v_gamma = velocity["bn_gamma"]
    cdef double[::1] v_beta = velocity["bn_beta"]
    cdef double[:, ::1] v_dec_w = velocity["dec_w"]
    cdef double[::1] v_dec_b = velocity["dec_b"]
    cdef double[:, ::1] v_adv_w1 = velocity["adv_w1"]
    cdef double[::1] v_adv_b1 = velocity["adv_b1"]
    cdef double[::1] v_adv_w2 = velocity["adv_w2"]
    cdef double[::1] v_adv_b2 = velocity["adv_b2"]

    cdef Py_ssize_t m = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t z = enc_w.shape[0], h = adv_w1.shape[0]
    cdef Py_ssize_t i, j, t

    # ---- encoder forward (train-mode batchnorm) ----
    cdef double[:, ::1] pre = np.empty((m, z))
    cdef double[:, ::1] act = np.empty((m, z))
    _mm_nt(X, enc_w, pre, 1.0, 0.0)
    for i in range(m):
        for j in range(z):
            pre[i, j] += enc_b[j]
            act[i, j] = pre[i, j] if pre[i, j] > 0.0 else 0.0
    cdef double[::1] mu = np.zeros(z)
    cdef double[::1] var = np.zeros(z)
    cdef double[::1] inv = np.empty(z)
    cdef double dev
    for j in range(z):
        for i in range(m):
            mu[j] += act[i, j]
        mu[j] /= m
    for j in range(z):
        for i in range(m):
            dev = act[i, j] - mu[j]
            var[j] += dev * dev
        var[j] /= m
        inv[j] = 1.0 / sqrt(var[j] + _BN_EPS)
    cdef double[:, ::1] norm = np.empty((m, z))
    cdef double[:, ::1] Z = np.empty((m, z))
    for i in range(m):
        for j in range(z):
            norm[i, j] = (act[i, j] - mu[j]) * inv[j]
            Z[i, j] = gamma[j] * norm[i, j] + beta[j]
    if update_running:
        for j in range(z):
            run_mean[j] = (1.0 - bn_momentum) * run_mean[j] + bn_momentum * mu[j]
            run_var[j] = (1.0 - bn_momentum) * run_var[j] + bn_momentum * var[j]
            if run_var[j] < _BN_EPS:
                run_var[j] = _BN_EPS

    # ---- objective 1: adversary update on the frozen code ----
    cdef double[:, ::1] hpre = np.empty((m, h))
    cdef double[:, ::1] hact = np.empty((m, h))
    _mm_nt(Z, adv_w1, hpre, 1.0, 0.0)
    cdef double[::1] yhat = np.empty(m)
    cdef double[::1] dlogit = np.empty(m)
    cdef double s, p_true, loss_d = 0.0
    for i in range(m):
        s = adv_b2[0]
        for j in range(h):
            hpre[i, j] += adv_b1[j]
            hact[i, j] = hpre[i, j] if hpre[i, j] > 0.0 else 0.0
            s += hact[i, j] * adv_w2[j]
        yhat[i] = _sigmoid(s)
        p_true = yhat[i] if y[i] == 1.0 else 1.0 - yhat[i]
        if p_true < _CLAMP:
            loss_d -= log(_CLAMP)
        elif p_true > 1.0 - _CLAMP:
            loss_d -= log(1.0 - _CLAMP)
        else:
            loss_d -= log(p_true)
        dlogit[i] = (yhat[i] - y[i]) / m
    loss_d /= m

    cdef double[::1] g_w2 = np.zeros(h)
    cdef double[::1] g_b2 = np.zeros(1)
    cdef double[:, ::1] dh = np.empty((m, h))
    cdef double[::1] g_b1 = np.zeros(h)
    cdef double[:, ::1] g_w1 = np.empty((h, z))
    for i in range(m):
        g_b2[0] += dlogit[i]
        for j in range(h):
            g_w2[j] += hact[i, j] * dlogit[i]
            dh[i, j] = dlogit[i] * adv_w2[j] if hpre[i, j] > 0.0 else 0.0
            g_b1[j] += dh[i, j]
    _mm_tn(dh, Z, g_w1, 1.0, 0.0)

    _sgd(g_w1, v_adv_w1, adv_w1, adv_lr, momentum)
    _sgd1(g_b1, v_adv_b1, adv_b1, adv_lr, momentum)
    _sgd1(g_w2, v_adv_w2, adv_w2, adv_lr, momentum)
    _sgd1(g_b2, v_adv_b2, adv_b2, adv_lr, momentum)

    # ---- objective 2: encoder-decoder update against the new adversary ----
    cdef double[:, ::1] zw = np.empty((m, z + 1))
    for i in range(m):
        for j in range(z):
            zw[i, j] = Z[i, j]
        zw[i, z] = w_cond[i]
    cdef double[:, ::1] q = np.empty((m, d))
    cdef double[:, ::1] tq = np.empty((m, d))
    _mm_nt(zw, dec_w, q, 1.0, 0.0)
    cdef double[::1] tnorm = np.zeros(m)
    cdef double[::1] xnorm = np.zeros(m)
    cdef double[::1] cos = np.zeros(m)
    for i in range(m):
        for j in range(d):
            q[i, j] += dec_b[j]
            tq[i, j] = tanh(q[i, j])
            tnorm[i] += tq[i, j] * tq[i, j]
            xnorm[i] += X[i, j] * X[i, j]
        tnorm[i] = sqrt(tnorm[i])
        xnorm[i] = sqrt(xnorm[i])
        for j in range(d):
            cos[i] += (tq[i, j] / tnorm[i]) * X[i, j]
        cos[i] /= xnorm[i]

    _mm_nt(Z, adv_w1, hpre, 1.0, 0.0)  # adversary forward, updated params
    cdef double fool, loss_ae = 0.0
    for i in range(m):
        s = adv_b2[0]
        for j in range(h):
            hpre[i, j] += adv_b1[j]
            hact[i, j] = hpre[i, j] if hpre[i, j] > 0.0 else 0.0
            s += hact[i, j] * adv_w2[j]
        yhat[i] = _sigmoid(s)
        p_true = yhat[i] if y[i] == 1.0 else 1.0 - yhat[i]
        fool = 1.0 - p_true
        if fool < _CLAMP:
            loss_ae += (1.0 - cos[i]) - log(_CLAMP)
        elif fool > 1.0 - _CLAMP:
            loss_ae += (1.0 - cos[i]) - log(1.0 - _CLAMP)
        else:
            loss_ae += (1.0 - cos[i]) - log(fool)
        dlogit[i] = (yhat[i] - (1.0 - y[i])) / m
    loss_ae /= m

    # reconstruction gradient through length-norm and tanh
    cdef double[:, ::1] dxhat = np.empty((m, d))
    cdef double[:, ::1] dq = np.empty((m, d))
    cdef double dot, xh
    for i in range(m):
        dot = 0.0
        for j in range(d):
            dxhat[i, j] = -X[i, j] / (xnorm[i] * m)
            dot += dxhat[i, j] * (tq[i, j] / tnorm[i])
        for j in range(d):
            xh = tq[i, j] / tnorm[i]
            dq[i, j] = ((dxhat[i, j] - dot * xh) / tnorm[i]) \
                * (1.0 - tq[i, j] * tq[i, j])

    cdef double[:, ::1] g_dec_w = np.empty((d, z + 1))
    cdef double[::1] g_dec_b = np.zeros(d)
    _mm_tn(dq, zw, g_dec_w, 1.0, 0.0)
    for i in range(m):
        for j in range(d):
            g_dec_b[j] += dq[i, j]

    cdef double[:, ::1] dzw = np.empty((m, z + 1))
    _mm_nn(dq, dec_w, dzw, 1.0, 0.0)
    cdef double[:, ::1] dz = np.empty((m, z))
    for i in range(m):
        for j in range(h):
            dh[i, j] = dlogit[i] * adv_w2[j] if hpre[i, j] > 0.0 else 0.0
    for i in range(m):
        for j in range(z):
            dz[i, j] = dzw[i, j]
    _mm_nn(dh, adv_w1, dz, 1.0, 1.0)

    # batchnorm backward
    cdef double[::1] g_gamma = np.zeros(z)
    cdef double[::1] g_beta = np.zeros(z)
    cdef double[::1] sum_dn = np.zeros(z)
    cdef double[::1] sum_dn_norm = np.zeros(z)
    cdef double dn
    for j in range(z):
        for i in range(m):
            g_gamma[j] += dz[i, j] * norm[i, j]
            g_beta[j] += dz[i, j]
            dn = dz[i, j] * gamma[j]
            sum_dn[j] += dn
            sum_dn_norm[j] += dn * norm[i, j]
    cdef double[:, ::1] dpre = np.empty((m, z))
    for i in range(m):
        for j in range(z):
            if pre[i, j] > 0.0:
                dn = dz[i, j] * gamma[j]
                dpre[i, j] = inv[j] / m * (m * dn - sum_dn[j]
                                           - norm[i, j] * sum_dn_norm[j])
            else:
                dpre[i, j] = 0.0
    cdef double[:, ::1] g_enc_w = np.empty((z, d))
    cdef double[::1] g_enc_b = np.zeros(z)
    _mm_tn(dpre, X, g_enc_w, 1.0, 0.0)
    for i in range(m):
        for j in range(z):
            g_enc_b[j] += dpre[i, j]

    _sgd(g_dec_w, v_dec_w, dec_w, lr, momentum)
    _sgd1(g_dec_b, v_dec_b, dec_b, lr, momentum)
    _sgd1(g_gamma, v_gamma, gamma, lr, momentum)
    _sgd1(g_beta, v_beta, beta, lr, momentum)
    _sgd(g_enc_w, v_enc_w, enc_w, lr, momentum)
    _sgd1(g_enc_b, v_enc_b, enc_b, lr, momentum)

    return loss_d, loss_ae
