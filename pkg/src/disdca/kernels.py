"""Scalar loss kernels and the sequential dual-update loops.

Everything here works on CSR arrays (``indptr``, ``indices``, ``data``) and
integer loss codes so it compiles under numba's nopython mode.  With the JIT
disabled (see ``_jit``) the same code runs as ordinary Python.
"""
import math

import numpy as np

from ._jit import njit

SQUARED_HINGE = 0
LOGISTIC = 1
LEAST_SQUARES = 2

# logistic dual variables are kept strictly inside (0, 1) after the label flip
LOGISTIC_EDGE = 1e-12
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 100


@njit(cache=True)
def loss_value(kind, z, y):
    if kind == SQUARED_HINGE:
        r = 1.0 - y * z
        return r * r if r > 0.0 else 0.0
    if kind == LOGISTIC:
        t = -y * z
        if t > 0.0:
            return t + math.log1p(math.exp(-t))
        return math.log1p(math.exp(t))
    r = y - z
    return 0.5 * r * r


@njit(cache=True)
def loss_grad(kind, z, y):
    if kind == SQUARED_HINGE:
        r = 1.0 - y * z
        return -2.0 * y * r if r > 0.0 else 0.0
    if kind == LOGISTIC:
        t = y * z
        # -y * sigmoid(-t), written to avoid overflow on either side
        if t >= 0.0:
            e = math.exp(-t)
            return -y * e / (1.0 + e)
        return -y / (1.0 + math.exp(t))
    return z - y


@njit(cache=True)
def _xlogx(v):
    if v <= 0.0:
        return 0.0
    return v * math.log(v)


@njit(cache=True)
def conj_neg(kind, a, y):
    """phi*(-a); +inf outside the conjugate domain."""
    b = a * y
    if kind == SQUARED_HINGE:
        if b < 0.0:
            return math.inf
        return -b + 0.25 * a * a
    if kind == LOGISTIC:
        if b < 0.0 or b > 1.0:
            return math.inf
        return _xlogx(b) + _xlogx(1.0 - b)
    return -b + 0.5 * a * a


@njit(cache=True)
def increment_objective(kind, delta, alpha, margin, xx, scale, lam, n, y):
    """The one-dimensional objective maximized by a single dual update."""
    return (
        -conj_neg(kind, alpha + delta, y)
        - delta * margin
        - scale / (2.0 * lam * n) * delta * delta * xx
    )


@njit(cache=True)
def _logistic_h(b, c0, q, ay):
    return math.log1p(-b) - math.log(b) - c0 - q * (b - ay)


@njit(cache=True)
def dual_increment(kind, alpha, margin, xx, scale, lam, n, y, constrained):
    """Maximizer of ``increment_objective`` over delta.

    Returns NaN if the logistic Newton iteration fails to converge.
    """
    if kind == LEAST_SQUARES:
        return (lam * n / (scale * xx + lam * n)) * (y - margin - alpha)
    if kind == SQUARED_HINGE:
        delta = (lam * n / (2.0 * scale * xx + lam * n)) * (2.0 * (y - margin) - alpha)
        if constrained and (alpha + delta) * y < 0.0:
            delta = -alpha
        return delta

    # logistic: solve in b = (alpha + delta) * y, b in (0, 1)
    q = scale * xx / (lam * n)
    ay = alpha * y
    c0 = y * margin
    lo = LOGISTIC_EDGE
    hi = 1.0 - LOGISTIC_EDGE
    if _logistic_h(lo, c0, q, ay) <= 0.0:
        return lo * y - alpha
    if _logistic_h(hi, c0, q, ay) >= 0.0:
        return hi * y - alpha
    b = min(max(ay, lo), hi)
    if b == lo or b == hi:
        b = 0.5
    for _ in range(NEWTON_MAX_ITER):
        hb = _logistic_h(b, c0, q, ay)
        if abs(hb) <= NEWTON_TOL:
            return b * y - alpha
        if hb > 0.0:
            lo = b
        else:
            hi = b
        if hi - lo <= 8.9e-16 * hi:
            return b * y - alpha
        dh = -1.0 / (b * (1.0 - b)) - q
        nb = b - hb / dh
        if not (lo < nb < hi):
            nb = 0.5 * (lo + hi)
        b = nb
    return math.nan


@njit(cache=True)
def sparse_dot(indptr, indices, data, i, vec):
    acc = 0.0
    for p in range(indptr[i], indptr[i + 1]):
        acc += data[p] * vec[indices[p]]
    return acc


@njit(cache=True)
def sparse_axpy(indptr, indices, data, i, coef, vec):
    for p in range(indptr[i], indptr[i + 1]):
        vec[indices[p]] += coef * data[p]


@njit(cache=True)
def worker_round(kind, indptr, indices, data, xnorm2, y, alpha, shard, picks,
                 w_fixed, u, scale, u_step, lam, n, naive, constrained):
    """Run one worker's inner loop in place.

    ``naive`` freezes the margin at ``w_fixed``; otherwise the margin is read
    from ``u``, which receives ``u_step * delta * x`` after every update.
    Returns -1 on success or the position of the first failed update.
    """
    for j in range(picks.shape[0]):
        i = shard[picks[j]]
        if naive:
            margin = sparse_dot(indptr, indices, data, i, w_fixed)
        else:
            margin = sparse_dot(indptr, indices, data, i, u)
        delta = dual_increment(kind, alpha[i], margin, xnorm2[i], scale, lam, n, y[i], constrained)
        if delta != delta:
            return j
        alpha[i] += delta
        if not naive:
            sparse_axpy(indptr, indices, data, i, u_step * delta, u)
    return -1


@njit(cache=True)
def weighted_row_sum(indptr, indices, data, alpha, rows, coef, dim):
    """coef * sum_{i in rows} alpha_i x_i, accumulated in row order."""
    out = np.zeros(dim)
    for r in range(rows.shape[0]):
        i = rows[r]
        a = alpha[i]
        if a != 0.0:
            for p in range(indptr[i], indptr[i + 1]):
                out[indices[p]] += a * data[p]
    for q in range(dim):
        out[q] *= coef
    return out


@njit(cache=True)
def neg_conj_sum(kind, y, alpha, rows):
    """sum over rows of -phi*(-alpha_i); -inf if any alpha leaves the domain."""
    acc = 0.0
    for r in range(rows.shape[0]):
        i = rows[r]
        acc -= conj_neg(kind, alpha[i], y[i])
    return acc


@njit(cache=True)
def loss_sum(kind, indptr, indices, data, y, w, rows):
    acc = 0.0
    for r in range(rows.shape[0]):
        i = rows[r]
        acc += loss_value(kind, sparse_dot(indptr, indices, data, i, w), y[i])
    return acc


@njit(cache=True)
def sq_norm(v):
    acc = 0.0
    for q in range(v.shape[0]):
        acc += v[q] * v[q]
    return acc


@njit(cache=True)
def lockstep_round(kind, indptr, indices, data, xnorm2, y, alpha, shards, picks,
                   w_start, U, w_virtual, scale, u_step, w_step, lam, n, naive,
                   constrained, s, conj_total, track_primal,
                   out_R, out_D, out_P):
    """Interleave the K workers' inner loops step by step.

    Step j updates every worker once, all from the state after step j-1.
    ``shards`` is (K, max_shard) padded, ``picks`` is (K, m).  ``w_virtual``
    holds the never-communicated global primal (1/(lam n)) sum alpha_i x_i
    and is advanced in place.  Per step j this records the deviation term
    R^{t,j} in out_R[j], the dual objective after the step in out_D[j], and,
    when ``track_primal``, the primal objective at the pre-step point in
    out_P[j].  Returns the updated sum of -phi*(-alpha_i) or NaN on failure.
    """
    K = picks.shape[0]
    m = picks.shape[1]
    all_rows = np.arange(y.shape[0])
    rows = np.empty(K, dtype=np.int64)
    deltas = np.empty(K)
    for j in range(m):
        if track_primal:
            out_P[j] = loss_sum(kind, indptr, indices, data, y, w_virtual, all_rows) / n \
                + 0.5 * lam * sq_norm(w_virtual)
        R = 0.0
        for k in range(K):
            i = shards[k, picks[k, j]]
            rows[k] = i
            if naive:
                margin_u = sparse_dot(indptr, indices, data, i, w_start)
            else:
                margin_u = sparse_dot(indptr, indices, data, i, U[k])
            margin_w = sparse_dot(indptr, indices, data, i, w_virtual)
            omega = -loss_grad(kind, margin_w, y[i])
            delta = dual_increment(kind, alpha[i], margin_u, xnorm2[i], scale, lam, n, y[i], constrained)
            if delta != delta:
                return math.nan
            deltas[k] = delta
            R += (s * (omega - alpha[i]) - delta) * (margin_u - margin_w)
        out_R[j] = R / n
        for k in range(K):
            i = rows[k]
            delta = deltas[k]
            conj_total += conj_neg(kind, alpha[i], y[i])
            alpha[i] += delta
            conj_total -= conj_neg(kind, alpha[i], y[i])
            if not naive:
                for p in range(indptr[i], indptr[i + 1]):
                    U[k, indices[p]] += u_step * delta * data[p]
            sparse_axpy(indptr, indices, data, i, w_step * delta, w_virtual)
        out_D[j] = conj_total / n - 0.5 * lam * sq_norm(w_virtual)
    return conj_total
