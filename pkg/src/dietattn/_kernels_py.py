"""Pure-Python numeric kernels.

Reference implementation of the kernel contract shared with the compiled
extension (_kernels_c). Every function here must match its compiled twin
bitwise: same loop order, same accumulation order, no reassociation. The
compiled module is built with contraction disabled for the same reason.

All matrix arguments are flat row-major float64 buffers (array('d') or
any writable buffer); index arguments are int64 buffers (array('q')).
Shapes are passed explicitly; callers own allocation.
"""

import math

LN_EPS = 1e-5
_INV_SQRT2 = math.sqrt(0.5)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

BACKEND_NAME = "python"


# ---------------------------------------------------------------- matmul ---

def matmul(a, b, out, m, k, n, acc):
    """out[m,n] (+)= a[m,k] @ b[k,n]."""
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


def matmul_nt(a, b, out, m, k, n, acc):
    """out[m,n] (+)= a[m,k] @ b[n,k]^T."""
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


def matmul_tn(a, b, out, m, k, n, acc):
    """out[m,n] (+)= a[k,m]^T @ b[k,n]."""
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


def transpose(a, out, m, n):
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j * m + i] = a[ai + j]


# ----------------------------------------------------------- elementwise ---

def add(a, b, out, length):
    for i in range(length):
        out[i] = a[i] + b[i]


def sub(a, b, out, length):
    for i in range(length):
        out[i] = a[i] - b[i]


def hadamard(a, b, out, length):
    for i in range(length):
        out[i] = a[i] * b[i]


def scale(a, s, out, length):
    for i in range(length):
        out[i] = a[i] * s


def axpy(alpha, x, y, length):
    for i in range(length):
        y[i] += alpha * x[i]


def copy_buf(a, out, length):
    for i in range(length):
        out[i] = a[i]


def zero_buf(a, length):
    for i in range(length):
        a[i] = 0.0


def dot(a, b, length):
    s = 0.0
    for i in range(length):
        s += a[i] * b[i]
    return s


def frob_norm(a, length):
    s = 0.0
    for i in range(length):
        s += a[i] * a[i]
    return math.sqrt(s)


def max_abs_diff(a, b, length):
    mx = 0.0
    for i in range(length):
        d = a[i] - b[i]
        if d < 0.0:
            d = -d
        if d > mx:
            mx = d
    return mx


def all_finite(a, length):
    for i in range(length):
        if not math.isfinite(a[i]):
            return 0
    return 1


# --------------------------------------------------------------- softmax ---

def softmax_rows(a, out, m, n):
    """Row-wise softmax with max subtraction. Scale is pre-folded by callers."""
    for i in range(m):
        base = i * n
        mx = a[base]
        for j in range(1, n):
            if a[base + j] > mx:
                mx = a[base + j]
        s = 0.0
        for j in range(n):
            e = math.exp(a[base + j] - mx)
            out[base + j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[base + j] *= inv


def softmax_backward(p, dp, dout, m, n, acc):
    # ds = p * (dp - sum_j dp_j p_j), rowwise
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

def gelu(x, out, length):
    """Exact erf form: 0.5 x (1 + erf(x / sqrt 2))."""
    for i in range(length):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))


def gelu_backward(x, dy, dx, length, acc):
    for i in range(length):
        v = x[i]
        phi = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
        g = dy[i] * (phi + v * pdf)
        if acc:
            dx[i] += g
        else:
            dx[i] = g


# ------------------------------------------------------------- layernorm ---

def layernorm(x, gain, bias, out, mean, rstd, m, n):
    """Per-row layer norm; saves mean and reciprocal std for backward."""
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
        r = 1.0 / math.sqrt(var + LN_EPS)
        mean[i] = mu
        rstd[i] = r
        for j in range(n):
            out[base + j] = (x[base + j] - mu) * r * gain[j] + bias[j]


def layernorm_backward(x, gain, mean, rstd, dy, dx, dgain, dbias, m, n, acc):
    # dgain/dbias always accumulate; dx honors acc
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

def gather_rows(table, idx, out, count, width):
    for i in range(count):
        src = idx[i] * width
        dst = i * width
        for j in range(width):
            out[dst + j] = table[src + j]


def scatter_add_rows(d, idx, dtable, count, width):
    for i in range(count):
        dst = idx[i] * width
        src = i * width
        for j in range(width):
            dtable[dst + j] += d[src + j]


def take_scalars(table, idx, out, count, acc):
    if acc:
        for i in range(count):
            out[i] += table[idx[i]]
    else:
        for i in range(count):
            out[i] = table[idx[i]]


def scatter_add_scalars(d, idx, dtable, count):
    for i in range(count):
        dtable[idx[i]] += d[i]


def bias_dot_add(q, table, idx, out, m, n, width):
    """out[i,j] += q[i,:] . table[idx[i,j],:]  (relative key embeddings)."""
    for i in range(m):
        qi = i * width
        oi = i * n
        for j in range(n):
            t = idx[oi + j] * width
            s = 0.0
            for p in range(width):
                s += q[qi + p] * table[t + p]
            out[oi + j] += s


def bias_dot_backward(q, table, idx, dout, dq, dtable, m, n, width):
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


def mix_rel_values(w, table, idx, out, m, n, width):
    """out[i,:] += sum_j w[i,j] * table[idx[i,j],:]  (relative value embeddings)."""
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


def mix_rel_values_backward(w, table, idx, dout, dw, dtable, m, n, width):
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

def paste_cols(src, dst, m, w, dst_cols, col_off):
    for i in range(m):
        si = i * w
        di = i * dst_cols + col_off
        for j in range(w):
            dst[di + j] = src[si + j]


def slice_cols(src, dst, m, w, src_cols, col_off):
    for i in range(m):
        si = i * src_cols + col_off
        di = i * w
        for j in range(w):
            dst[di + j] = src[si + j]


# ---------------------------------------------------------------- losses ---

def ce_loss(logits, targets, dlogits, m, c, grad_scale, want_grad):
    """Sum of -log softmax(logits)[target] over rows; optional scaled grad."""
    loss = 0.0
    for i in range(m):
        base = i * c
        mx = logits[base]
        for j in range(1, c):
            if logits[base + j] > mx:
                mx = logits[base + j]
        z = 0.0
        for j in range(c):
            z += math.exp(logits[base + j] - mx)
        t = targets[i]
        loss += -(logits[base + t] - mx - math.log(z))
        if want_grad:
            inv = 1.0 / z
            for j in range(c):
                dlogits[base + j] = math.exp(logits[base + j] - mx) * inv * grad_scale
            dlogits[base + t] -= grad_scale
    return loss


def mse_loss(pred, target, dpred, length, grad_scale, want_grad):
    """Sum of squared errors; grad is 2 (pred - target) * grad_scale."""
    loss = 0.0
    for i in range(length):
        d = pred[i] - target[i]
        loss += d * d
        if want_grad:
            dpred[i] = 2.0 * d * grad_scale
    return loss


# ------------------------------------------------------------- optimizers ---

def adam_step(p, g, m1, m2, lr, b1, b2, eps, bc1, bc2, length):
    # bc1/bc2 are the bias corrections 1-b^t, computed once by the driver
    for i in range(length):
        gv = g[i]
        m1[i] = b1 * m1[i] + (1.0 - b1) * gv
        m2[i] = b2 * m2[i] + (1.0 - b2) * gv * gv
        mh = m1[i] / bc1
        vh = m2[i] / bc2
        p[i] -= lr * mh / (math.sqrt(vh) + eps)


def sgd_step(p, g, lr, length):
    for i in range(length):
        p[i] -= lr * g[i]


# ------------------------------------------------------------------- svd ---

def jacobi_sweeps(w, v, sigma, m, n, max_sweeps, tol):
    """One-sided Jacobi on w (m x n, m >= n); v must start as identity.

    Rotates column pairs until all are mutually orthogonal relative to tol.
    On return w holds U*Sigma, v the right singular vectors, sigma the
    unsorted singular values. Returns sweeps used, or -1 if not converged.
    """
    converged = -1
    # columns below this squared-norm floor are numerically zero; rotating
    # them only chases roundoff in dead directions and never converges
    fsq = 0.0
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
                if ag <= tol * math.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gam)
                az = zeta if zeta >= 0.0 else -zeta
                t = (1.0 if zeta >= 0.0 else -1.0) / (az + math.sqrt(1.0 + zeta * zeta))
                cth = 1.0 / math.sqrt(1.0 + t * t)
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
        sigma[j] = math.sqrt(s)
    return converged
