# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels.

Bitwise twin of _kernels_py: identical loop order, identical accumulation
order, contraction disabled at compile time. Any change here must be made
in the pure module as well, and vice versa.
"""

from libc.math cimport exp, log, sqrt, erf, isfinite

cdef double LN_EPS = 1e-5
cdef double _INV_SQRT2 = sqrt(0.5)
cdef double _PI = 3.141592653589793
cdef double _INV_SQRT2PI = 1.0 / sqrt(2.0 * _PI)

BACKEND_NAME = "c"


# ---------------------------------------------------------------- matmul ---

def matmul(double[::1] a, double[::1] b, double[::1] out,
           Py_ssize_t m, Py_ssize_t k, Py_ssize_t n, int acc):
    cdef Py_ssize_t i, j, p, ai, oi, bp
    cdef double av
    for i in range(m):
        ai = i * k
        oi = i * n
        if not acc:
            for j in range(n):
                out[oi + j] = 0.0
        for p in range(k):
            av = a[ai + p]
            if av == 0.0:
                continue
            bp = p * n
            for j in range(n):
                out[oi + j] += av * b[bp + j]


def matmul_nt(double[::1] a, double[::1] b, double[::1] out,
              Py_ssize_t m, Py_ssize_t k, Py_ssize_t n, int acc):
    cdef Py_ssize_t i, j, p, ai, oi, bj
    cdef double s
    for i in range(m):
        ai = i * k
        oi = i * n
        for j in range(n):
            bj = j * k
            s = 0.0
            for p in range(k):
                s += a[ai + p] * b[bj + p]
            if acc:
                out[oi + j] += s
            else:
                out[oi + j] = s


def matmul_tn(double[::1] a, double[::1] b, double[::1] out,
              Py_ssize_t m, Py_ssize_t k, Py_ssize_t n, int acc):
    cdef Py_ssize_t i, j, p, oi, bp
    cdef double av
    for i in range(m):
        oi = i * n
        if not acc:
            for j in range(n):
                out[oi + j] = 0.0
        for p in range(k):
            av = a[p * m + i]
            if av == 0.0:
                continue
            bp = p * n
            for j in range(n):
                out[oi + j] += av * b[bp + j]


def transpose(double[::1] a, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j, ai
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j * m + i] = a[ai + j]


# ----------------------------------------------------------- elementwise ---

def add(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        out[i] = a[i] + b[i]


def sub(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        out[i] = a[i] - b[i]


def hadamard(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        out[i] = a[i] * b[i]


def scale(double[::1] a, double s, double[::1] out, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        out[i] = a[i] * s


def axpy(double alpha, double[::1] x, double[::1] y, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        y[i] += alpha * x[i]


def copy_buf(double[::1] a, double[::1] out, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        out[i] = a[i]


def zero_buf(double[::1] a, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        a[i] = 0.0


def dot(double[::1] a, double[::1] b, Py_ssize_t length):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(length):
        s += a[i] * b[i]
    return s


def frob_norm(double[::1] a, Py_ssize_t length):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(length):
        s += a[i] * a[i]
    return sqrt(s)


def max_abs_diff(double[::1] a, double[::1] b, Py_ssize_t length):
    cdef Py_ssize_t i
    cdef double mx = 0.0, d
    for i in range(length):
        d = a[i] - b[i]
        if d < 0.0:
            d = -d
        if d > mx:
            mx = d
    return mx


def all_finite(double[::1] a, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        if not isfinite(a[i]):
            return 0
    return 1


# --------------------------------------------------------------- softmax ---

def softmax_rows(double[::1] a, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j, base
    cdef double mx, s, e, inv
    for i in range(m):
        base = i * n
        mx = a[base]
        for j in range(1, n):
            if a[base + j] > mx:
                mx = a[base + j]
        s = 0.0
        for j in range(n):
            e = exp(a[base + j] - mx)
            out[base + j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[base + j] *= inv


def softmax_backward(double[::1] p, double[::1] dp, double[::1] dout,
                     Py_ssize_t m, Py_ssize_t n, int acc):
    cdef Py_ssize_t i, j, base
    cdef double s, g
    for i in range(m):
        base = i * n
        s = 0.0
        for j in range(n):
            s += dp[base + j] * p[base + j]
        for j in range(n):
            g = p[base + j] * (dp[base + j] - s)
            if acc:
                dout[base + j] += g
            else:
                dout[base + j] = g


# ------------------------------------------------------------------ gelu ---

def gelu(double[::1] x, double[::1] out, Py_ssize_t length):
    cdef Py_ssize_t i
    cdef double v
    for i in range(length):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + erf(v * _INV_SQRT2))


def gelu_backward(double[::1] x, double[::1] dy, double[::1] dx,
                  Py_ssize_t length, int acc):
    cdef Py_ssize_t i
    cdef double v, phi, pdf, g
    for i in range(length):
        v = x[i]
        phi = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = exp(-0.5 * v * v) * _INV_SQRT2PI
        g = dy[i] * (phi + v * pdf)
        if acc:
            dx[i] += g
        else:
            dx[i] = g


# ------------------------------------------------------------- layernorm ---

def layernorm(double[::1] x, double[::1] gain, double[::1] bias,
              double[::1] out, double[::1] mean, double[::1] rstd,
              Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j, base
    cdef double mu, var, dv, r
    for i in range(m):
        base = i * n
        mu = 0.0
        for j in range(n):
            mu += x[base + j]
        mu = mu / n
        var = 0.0
        for j in range(n):
            dv = x[base + j] - mu
            var += dv * dv
        var = var / n
        r = 1.0 / sqrt(var + LN_EPS)
        mean[i] = mu
        rstd[i] = r
        for j in range(n):
            out[base + j] = (x[base + j] - mu) * r * gain[j] + bias[j]


def layernorm_backward(double[::1] x, double[::1] gain, double[::1] mean,
                       double[::1] rstd, double[::1] dy, double[::1] dx,
                       double[::1] dgain, double[::1] dbias,
                       Py_ssize_t m, Py_ssize_t n, int acc):
    cdef Py_ssize_t i, j, base
    cdef double mu, r, s1, s2, xh, dxh, g
    for i in range(m):
        base = i * n
        mu = mean[i]
        r = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            xh = (x[base + j] - mu) * r
            dxh = dy[base + j] * gain[j]
            dgain[j] += dy[base + j] * xh
            dbias[j] += dy[base + j]
            s1 += dxh
            s2 += dxh * xh
        s1 = s1 / n
        s2 = s2 / n
        for j in range(n):
            xh = (x[base + j] - mu) * r
            dxh = dy[base + j] * gain[j]
            g = r * (dxh - s1 - xh * s2)
            if acc:
                dx[base + j] += g
            else:
                dx[base + j] = g


# ---------------------------------------------------------- gather/index ---

def gather_rows(double[::1] table, long long[::1] idx, double[::1] out,
                Py_ssize_t count, Py_ssize_t width):
    cdef Py_ssize_t i, j, src, dst
    for i in range(count):
        src = idx[i] * width
        dst = i * width
        for j in range(width):
            out[dst + j] = table[src + j]


def scatter_add_rows(double[::1] d, long long[::1] idx, double[::1] dtable,
                     Py_ssize_t count, Py_ssize_t width):
    cdef Py_ssize_t i, j, src, dst
    for i in range(count):
        dst = idx[i] * width
        src = i * width
        for j in range(width):
            dtable[dst + j] += d[src + j]


def take_scalars(double[::1] table, long long[::1] idx, double[::1] out,
                 Py_ssize_t count, int acc):
    cdef Py_ssize_t i
    if acc:
        for i in range(count):
            out[i] += table[idx[i]]
    else:
        for i in range(count):
            out[i] = table[idx[i]]


def scatter_add_scalars(double[::1] d, long long[::1] idx, double[::1] dtable,
                        Py_ssize_t count):
    cdef Py_ssize_t i
    for i in range(count):
        dtable[idx[i]] += d[i]


def bias_dot_add(double[::1] q, double[::1] table, long long[::1] idx,
                 double[::1] out, Py_ssize_t m, Py_ssize_t n, Py_ssize_t width):
    cdef Py_ssize_t i, j, p, qi, oi, t
    cdef double s
    for i in range(m):
        qi = i * width
        oi = i * n
        for j in range(n):
            t = idx[oi + j] * width
            s = 0.0
            for p in range(width):
                s += q[qi + p] * table[t + p]
            out[oi + j] += s


def bias_dot_backward(double[::1] q, double[::1] table, long long[::1] idx,
                      double[::1] dout, double[::1] dq, double[::1] dtable,
                      Py_ssize_t m, Py_ssize_t n, Py_ssize_t width):
    cdef Py_ssize_t i, j, p, qi, oi, t
    cdef double g
    for i in range(m):
        qi = i * width
        oi = i * n
        for j in range(n):
            g = dout[oi + j]
            if g == 0.0:
                continue
            t = idx[oi + j] * width
            for p in range(width):
                dq[qi + p] += g * table[t + p]
                dtable[t + p] += g * q[qi + p]


def mix_rel_values(double[::1] w, double[::1] table, long long[::1] idx,
                   double[::1] out, Py_ssize_t m, Py_ssize_t n, Py_ssize_t width):
    cdef Py_ssize_t i, j, p, oi, wi, t
    cdef double wv
    for i in range(m):
        oi = i * width
        wi = i * n
        for j in range(n):
            wv = w[wi + j]
            if wv == 0.0:
                continue
            t = idx[wi + j] * width
            for p in range(width):
                out[oi + p] += wv * table[t + p]


def mix_rel_values_backward(double[::1] w, double[::1] table, long long[::1] idx,
                            double[::1] dout, double[::1] dw, double[::1] dtable,
                            Py_ssize_t m, Py_ssize_t n, Py_ssize_t width):
    cdef Py_ssize_t i, j, p, oi, wi, t
    cdef double s, wv, g
    for i in range(m):
        oi = i * width
        wi = i * n
        for j in range(n):
            t = idx[wi + j] * width
            s = 0.0
            wv = w[wi + j]
            for p in range(width):
                g = dout[oi + p]
                s += g * table[t + p]
                dtable[t + p] += wv * g
            dw[wi + j] += s


# --------------------------------------------------------- block copying ---

def paste_cols(double[::1] src, double[::1] dst, Py_ssize_t m, Py_ssize_t w,
               Py_ssize_t dst_cols, Py_ssize_t col_off):
    cdef Py_ssize_t i, j, si, di
    for i in range(m):
        si = i * w
        di = i * dst_cols + col_off
        for j in range(w):
            dst[di + j] = src[si + j]


def slice_cols(double[::1] src, double[::1] dst, Py_ssize_t m, Py_ssize_t w,
               Py_ssize_t src_cols, Py_ssize_t col_off):
    cdef Py_ssize_t i, j, si, di
    for i in range(m):
        si = i * src_cols + col_off
        di = i * w
        for j in range(w):
            dst[di + j] = src[si + j]


# ---------------------------------------------------------------- losses ---

def ce_loss(double[::1] logits, long long[::1] targets, double[::1] dlogits,
            Py_ssize_t m, Py_ssize_t c, double grad_scale, int want_grad):
    cdef Py_ssize_t i, j, base, t
    cdef double loss = 0.0
    cdef double mx, z, inv
    for i in range(m):
        base = i * c
        mx = logits[base]
        for j in range(1, c):
            if logits[base + j] > mx:
                mx = logits[base + j]
        z = 0.0
        for j in range(c):
            z += exp(logits[base + j] - mx)
        t = targets[i]
        loss += -(logits[base + t] - mx - log(z))
        if want_grad:
            inv = 1.0 / z
            for j in range(c):
                dlogits[base + j] = exp(logits[base + j] - mx) * inv * grad_scale
            dlogits[base + t] -= grad_scale
    return loss


def mse_loss(double[::1] pred, double[::1] target, double[::1] dpred,
             Py_ssize_t length, double grad_scale, int want_grad):
    cdef Py_ssize_t i
    cdef double loss = 0.0, d
    for i in range(length):
        d = pred[i] - target[i]
        loss += d * d
        if want_grad:
            dpred[i] = 2.0 * d * grad_scale
    return loss


# ------------------------------------------------------------- optimizers ---

def adam_step(double[::1] p, double[::1] g, double[::1] m1, double[::1] m2,
              double lr, double b1, double b2, double eps,
              double bc1, double bc2, Py_ssize_t length):
    cdef Py_ssize_t i
    cdef double gv, mh, vh
    for i in range(length):
        gv = g[i]
        m1[i] = b1 * m1[i] + (1.0 - b1) * gv
        m2[i] = b2 * m2[i] + (1.0 - b2) * gv * gv
        mh = m1[i] / bc1
        vh = m2[i] / bc2
        p[i] -= lr * mh / (sqrt(vh) + eps)


def sgd_step(double[::1] p, double[::1] g, double lr, Py_ssize_t length):
    cdef Py_ssize_t i
    for i in range(length):
        p[i] -= lr * g[i]


# ------------------------------------------------------------------- svd ---

def jacobi_sweeps(double[::1] w, double[::1] v, double[::1] sigma,
                  Py_ssize_t m, Py_ssize_t n, int max_sweeps, double tol):
    cdef Py_ssize_t i, p, q, sweep, j
    cdef int rotated
    cdef int converged = -1
    cdef double alpha, beta, gam, ag, zeta, az, t, cth, sth, wp, wq, vp, vq, s, wv
    # columns below this squared-norm floor are numerically zero; rotating
    # them only chases roundoff in dead directions and never converges
    cdef double fsq = 0.0
    cdef double floor
    for i in range(m * n):
        fsq += w[i] * w[i]
    floor = fsq * 1e-28
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gam = 0.0
                for i in range(m):
                    wp = w[i * n + p]
                    wq = w[i * n + q]
                    alpha += wp * wp
                    beta += wq * wq
                    gam += wp * wq
                if alpha <= floor or beta <= floor:
                    continue
                if gam == 0.0:
                    continue
                ag = gam if gam >= 0.0 else -gam
                if ag <= tol * sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gam)
                az = zeta if zeta >= 0.0 else -zeta
                t = (1.0 if zeta >= 0.0 else -1.0) / (az + sqrt(1.0 + zeta * zeta))
                cth = 1.0 / sqrt(1.0 + t * t)
                sth = cth * t
                rotated = 1
                for i in range(m):
                    wp = w[i * n + p]
                    wq = w[i * n + q]
                    w[i * n + p] = cth * wp - sth * wq
                    w[i * n + q] = sth * wp + cth * wq
                for i in range(n):
                    vp = v[i * n + p]
                    vq = v[i * n + q]
                    v[i * n + p] = cth * vp - sth * vq
                    v[i * n + q] = sth * vp + cth * vq
        if rotated == 0:
            converged = sweep
            break
    if converged < 0:
        return -1
    for j in range(n):
        s = 0.0
        for i in range(m):
            wv = w[i * n + j]
            s += wv * wv
        sigma[j] = sqrt(s)
    return converged
