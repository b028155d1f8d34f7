"""Numba-jitted dense kernels; array-level twins of `_numpy.py`.

Hot paths (column-pivoted QR with early stop, panel application, triangular
solves) run as nopython loops. Caching is enabled so compilation cost is
paid once per machine.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def reflector(x):
    m = x.shape[0]
    v = np.zeros(m)
    v[0] = 1.0
    alpha = x[0]
    sigma = 0.0
    for i in range(1, m):
        sigma += x[i] * x[i]
    if sigma == 0.0:
        if alpha >= 0.0:
            return v, 0.0, alpha
        return v, 2.0, -alpha
    beta = np.sqrt(alpha * alpha + sigma)
    if alpha <= 0.0:
        v0 = alpha - beta
    else:
        v0 = -sigma / (alpha + beta)
    for i in range(1, m):
        v[i] = x[i] / v0
    tau = -v0 / beta
    return v, tau, beta


@njit(cache=True)
def _apply_one(v, t, C, row0):
    """C[row0:, :] -= t * v (v^T C[row0:, :]) for reflector rows starting at row0."""
    m = C.shape[0] - row0
    n = C.shape[1]
    for j in range(n):
        s = 0.0
        for i in range(m):
            s += v[i] * C[row0 + i, j]
        s *= t
        for i in range(m):
            C[row0 + i, j] -= s * v[i]


@njit(cache=True)
def house_qr(B):
    B = B.copy()
    m, k = B.shape
    V = np.zeros((m, k))
    tau = np.zeros(k)
    nb = 32
    for j0 in range(0, k, nb):
        j1 = min(j0 + nb, k)
        # unblocked QR of the sub-panel columns j0:j1
        for j in range(j0, j1):
            v, t, beta = reflector(B[j:, j].copy())
            V[j:, j] = v
            tau[j] = t
            if t != 0.0 and j + 1 < j1:
                _apply_one(v, t, B[:, j + 1:j1], j)
            B[j, j] = beta
            for i in range(j + 1, m):
                B[i, j] = 0.0
        # blocked update of the trailing columns: H^T = I - V T^T V^T
        if j1 < k:
            Vb = np.ascontiguousarray(V[j0:, j0:j1])
            Tb = build_t(Vb, tau[j0:j1])
            C = np.ascontiguousarray(B[j0:, j1:])
            W = np.dot(Vb.T, C)
            W = np.dot(Tb.T, W)
            C -= np.dot(Vb, W)
            B[j0:, j1:] = C
    R = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            R[i, j] = B[i, j]
    return V, tau, R


@njit(cache=True)
def apply_reflectors(V, tau, C, transpose):
    k = V.shape[1]
    if transpose:
        for j in range(k):
            if tau[j] != 0.0:
                _apply_one(V[j:, j].copy(), tau[j], C, j)
    else:
        for j in range(k - 1, -1, -1):
            if tau[j] != 0.0:
                _apply_one(V[j:, j].copy(), tau[j], C, j)
    return C


@njit(cache=True)
def build_t(V, tau):
    m, k = V.shape
    T = np.zeros((k, k))
    Vt = np.ascontiguousarray(V.T)
    for i in range(k):
        T[i, i] = tau[i]
        if i > 0 and tau[i] != 0.0:
            # w = V[:, :i]^T v_i via one BLAS call; the small i x i
            # triangular product stays a scalar loop
            w = np.dot(Vt[:i], Vt[i])
            for a in range(i):
                acc = 0.0
                for b in range(a, i):
                    acc += T[a, b] * w[b]
                T[a, i] = -tau[i] * acc
    return T


@njit(cache=True)
def cpqr_threshold(M, eps, min_rank):
    T = M.copy()
    m, k = T.shape
    kmax = min(m, k)
    perm = np.arange(k)
    V = np.zeros((m, kmax))
    tau = np.zeros(kmax)
    norm0 = 0.0
    r = kmax
    for i in range(kmax):
        # recompute trailing column norms
        best = -1.0
        p = i
        for j in range(i, k):
            s = 0.0
            for a in range(i, m):
                s += T[a, j] * T[a, j]
            s = np.sqrt(s)
            if s > best:
                best = s
                p = j
        nrm = best
        if i == 0:
            norm0 = nrm
            if norm0 == 0.0:
                r = 0
                break
        elif nrm < eps * norm0 and i >= min_rank:
            r = i
            break
        if p != i:
            for a in range(m):
                tmp = T[a, i]
                T[a, i] = T[a, p]
                T[a, p] = tmp
            tp = perm[i]
            perm[i] = perm[p]
            perm[p] = tp
        v, t, beta = reflector(T[i:, i].copy())
        V[i:, i] = v
        tau[i] = t
        if t != 0.0 and i + 1 < k:
            _apply_one(v, t, T[:, i + 1:], i)
        T[i, i] = beta
        for a in range(i + 1, m):
            T[a, i] = 0.0
    return V[:, :r], tau[:r], T, perm.astype(np.int64), r


@njit(cache=True)
def tri_solve_left(R, C):
    k = R.shape[0]
    X = C.copy()
    for i in range(k - 1, -1, -1):
        if i + 1 < k:
            X[i] -= np.dot(np.ascontiguousarray(R[i, i + 1:]), X[i + 1:])
        X[i] /= R[i, i]
    return X


@njit(cache=True)
def tri_solve_right(R, C):
    # X R = C  <=>  R^T X^T = C^T, solved row by row on Y = X^T
    k = R.shape[0]
    Rt = np.ascontiguousarray(R.T)
    Y = np.ascontiguousarray(C.T)
    for j in range(k):
        if j:
            Y[j] -= np.dot(np.ascontiguousarray(Rt[j, :j]), Y[:j])
        Y[j] /= Rt[j, j]
    return np.ascontiguousarray(Y.T)
