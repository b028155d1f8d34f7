"""Pure-numpy reference implementations of the dense kernels.

Same array-level contracts as the numba backend (`_numba.py`); selected via
the NESTQR_KERNELS environment flag. Kept deliberately loop-parallel in
structure so the two backends can be diffed line by line.
"""

from __future__ import annotations

import numpy as np


def reflector(x):
    """Householder vector for one column.

    Returns (v, tau, beta) with H = I - tau*v*v^T, v[0] = 1, and
    H @ x = beta * e1 where beta = ||x|| >= 0 (nonnegative-R convention).
    A zero (or already e1-aligned, nonnegative) column yields tau = 0.
    """
    m = x.shape[0]
    v = np.zeros(m)
    v[0] = 1.0
    alpha = x[0]
    sigma = float(np.dot(x[1:], x[1:]))
    if sigma == 0.0:
        if alpha >= 0.0:
            return v, 0.0, alpha
        return v, 2.0, -alpha
    beta = np.sqrt(alpha * alpha + sigma)
    if alpha <= 0.0:
        v0 = alpha - beta
    else:
        v0 = -sigma / (alpha + beta)
    v[1:] = x[1:] / v0
    tau = -v0 / beta
    return v, tau, beta


def house_qr(B):
    """Householder QR of a tall block B (m x k, m >= k).

    Returns (V, tau, R): V unit-lower-trapezoidal (m x k), tau (k,), R (k x k)
    upper triangular with nonnegative diagonal, such that
    (H_1 ... H_k)^T B = [R; 0] with H_i = I - tau_i v_i v_i^T.
    """
    B = np.array(B, dtype=np.float64)
    m, k = B.shape
    V = np.zeros((m, k))
    tau = np.zeros(k)
    nb = 32
    for j0 in range(0, k, nb):
        j1 = min(j0 + nb, k)
        # unblocked QR of the sub-panel columns j0:j1
        for j in range(j0, j1):
            v, t, beta = reflector(B[j:, j])
            V[j:, j] = v
            tau[j] = t
            if t != 0.0 and j + 1 < j1:
                w = t * (v @ B[j:, j + 1:j1])
                B[j:, j + 1:j1] -= np.outer(v, w)
            B[j, j] = beta
            B[j + 1:, j] = 0.0
        # blocked update of the trailing columns: H^T = I - V T^T V^T
        if j1 < k:
            Vb = V[j0:, j0:j1]
            Tb = build_t(Vb, tau[j0:j1])
            B[j0:, j1:] -= Vb @ (Tb.T @ (Vb.T @ B[j0:, j1:]))
    return V, tau, np.triu(B[:k, :k])


def apply_reflectors(V, tau, C, transpose):
    """Apply H or H^T to C in place, one reflector at a time.

    H = H_1 ... H_k (ascending index order applied right-to-left), so
    H^T C applies reflectors ascending and H C descending.
    """
    k = V.shape[1]
    order = range(k) if transpose else range(k - 1, -1, -1)
    for j in order:
        t = tau[j]
        if t == 0.0:
            continue
        v = V[:, j]
        C -= np.outer(t * v, v @ C)
    return C


def build_t(V, tau):
    """Upper-triangular T of the compact WY form: H_1...H_k = I - V T V^T."""
    k = V.shape[1]
    T = np.zeros((k, k))
    for i in range(k):
        T[i, i] = tau[i]
        if i and tau[i] != 0.0:
            T[:i, i] = -tau[i] * (T[:i, :i] @ (V[:, :i].T @ V[:, i]))
    return T


def cpqr_threshold(M, eps, min_rank):
    """Column-pivoted Householder QR with threshold early stop.

    Factors until the would-be |R_ii| drops below eps * |R_11| (but at least
    `min_rank` steps, at most min(m, k)). Trailing column norms are recomputed
    each step (robust against downdating cancellation).

    Returns (V, tau, T, perm, r):
      V (m x r), tau (r,) — accepted reflectors;
      T (m x k) — the partially reduced matrix in pivoted column order:
        rows 0..r-1 are the R rows, T[r:, r:] is the untouched residual block;
      perm (k,) — original column index per pivoted position;
      r — accepted rank (0 for a zero matrix).
    """
    T = np.array(M, dtype=np.float64)
    m, k = T.shape
    kmax = min(m, k)
    perm = np.arange(k, dtype=np.int64)
    V = np.zeros((m, kmax))
    tau = np.zeros(kmax)
    norm0 = 0.0
    r = kmax
    for i in range(kmax):
        norms = np.sqrt(np.einsum("ij,ij->j", T[i:, i:], T[i:, i:]))
        p = int(np.argmax(norms)) + i
        nrm = float(norms[p - i])
        if i == 0:
            norm0 = nrm
            if norm0 == 0.0:
                r = 0
                break
        elif nrm < eps * norm0 and i >= min_rank:
            r = i
            break
        if p != i:
            T[:, [i, p]] = T[:, [p, i]]
            perm[[i, p]] = perm[[p, i]]
        v, t, beta = reflector(T[i:, i])
        V[i:, i] = v
        tau[i] = t
        if t != 0.0 and i + 1 < k:
            w = t * (v @ T[i:, i + 1:])
            T[i:, i + 1:] -= np.outer(v, w)
        T[i, i] = beta
        T[i + 1:, i] = 0.0
    return V[:, :r], tau[:r], T, perm, r


def tri_solve_left(R, C):
    """Solve R X = C for upper-triangular R (caller checks pivots)."""
    from scipy.linalg import solve_triangular

    if R.shape[0] == 0:
        return np.zeros_like(C)
    return solve_triangular(R, C, lower=False)


def tri_solve_right(R, C):
    """Solve X R = C for upper-triangular R (caller checks pivots)."""
    from scipy.linalg import solve_triangular

    if R.shape[0] == 0:
        return np.zeros_like(C)
    # X R = C  <=>  R^T X^T = C^T (lower-triangular solve)
    return solve_triangular(R.T, C.T, lower=True).T
