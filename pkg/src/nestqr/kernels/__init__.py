"""Dense kernels: blocked Householder QR, panel application, threshold
column-pivoted QR, triangular solves.

Two interchangeable backends carry the inner loops:

* ``numba`` — nopython-jitted loops (default when numba imports cleanly);
  the pivoted QR stops at the accepted rank instead of factoring all
  columns, which LAPACK's geqp3 cannot do.
* ``numpy`` — pure numpy/scipy reference path.

Select with the environment flag ``NESTQR_KERNELS={numba,numpy}`` or at
runtime via :func:`set_backend`. Results are identical to roundoff (the
backends are line-level twins); `nestqr bench` compares their speed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import NestqrError, SingularPivotError
from . import _numpy as _np_impl

_impl = None
_backend_name = ""


def set_backend(name):
    """Select the kernel backend: 'numba' or 'numpy'."""
    global _impl, _backend_name
    name = name.strip().lower()
    if name == "numpy":
        _impl = _np_impl
        _backend_name = "numpy"
    elif name == "numba":
        from . import _numba as _nb_impl  # deferred: triggers jit machinery

        _impl = _nb_impl
        _backend_name = "numba"
    else:
        raise NestqrError(f"unknown kernel backend {name!r} (use 'numba' or 'numpy')")
    return _backend_name


def backend_name():
    """Name of the active kernel backend."""
    return _backend_name


def _init_backend():
    env = os.environ.get("NESTQR_KERNELS", "").strip().lower()
    if env == "numpy":
        set_backend("numpy")
    elif env == "numba":
        set_backend("numba")
    elif env == "":
        try:
            set_backend("numba")
        except Exception:
            set_backend("numpy")
    else:
        raise NestqrError(f"NESTQR_KERNELS={env!r} not recognized (use 'numba' or 'numpy')")


_init_backend()

# Relative floor under which a triangular pivot counts as singular.
PIVOT_FLOOR = 1e-14


@dataclass
class HouseholderPanel:
    """Compact storage of a product of Householder reflectors.

    H = H_1 ... H_k = I - V T V^T with V unit-lower-trapezoidal (m x k),
    tau the reflector coefficients, T the upper-triangular compact-WY
    factor. `rows` optionally records the global row indices the panel
    acts on (set by the factorization driver).
    """

    V: np.ndarray
    tau: np.ndarray
    T: np.ndarray
    rows: np.ndarray | None = None

    @property
    def m(self):
        return self.V.shape[0]

    @property
    def k(self):
        return self.V.shape[1]

    @property
    def payload_scalars(self):
        return self.V.size + self.tau.size + self.T.size

    def apply(self, C, transpose=False, overwrite=False):
        """Return H @ C or H^T @ C (C: (m,) vector or (m, n) block).

        With ``overwrite=True`` and a conforming contiguous float64 block,
        the update happens in place (the caller must own the buffer).
        """
        C = np.asarray(C, dtype=np.float64)
        if C.shape[0] != self.m:
            raise NestqrError(f"panel expects leading dim {self.m}, got {C.shape[0]}")
        if self.k == 0:
            return C if overwrite else C.copy()
        vec = C.ndim == 1
        B = C.reshape(self.m, -1)
        Tm = self.T.T if transpose else self.T
        if overwrite and not vec and B.flags.c_contiguous:
            np.subtract(B, self.V @ (Tm @ (self.V.T @ B)), out=B)
            return B
        out = B - self.V @ (Tm @ (self.V.T @ B))
        return out[:, 0] if vec else out


@dataclass
class RRQRResult:
    """Threshold rank-revealing QR output.

    M[:, perm] = Q [R_top; [0, resid]] with Q = I - V T V^T (panel), rank r
    accepted by the relative-diagonal rule. `R` holds the first r rows in
    pivoted order (upper triangular in its leading r columns); `resid` is
    the untouched (m-r) x (k-r) block whose spectral norm bounds every
    dropped quantity.
    """

    panel: HouseholderPanel
    R: np.ndarray
    resid: np.ndarray
    perm: np.ndarray
    rank: int

    def q_dense(self):
        """Materialize the full m x m orthogonal factor (tests/audits only)."""
        return self.panel.apply(np.eye(self.panel.m))

    @property
    def Q(self):
        return self.q_dense()


def qr_house(B):
    """Householder QR of a tall block.

    Parameters
    ----------
    B : (m, k) ndarray, m >= k

    Returns
    -------
    (HouseholderPanel, ndarray)
        Panel with H^T B = [R; 0], and the k x k upper-triangular R with
        nonnegative diagonal. A zero column yields a tau = 0 reflector.
    """
    B = np.ascontiguousarray(B, dtype=np.float64)
    m, k = B.shape
    if m < k:
        raise NestqrError(f"qr_house needs m >= k, got {B.shape}")
    V, tau, R = _impl.house_qr(B)
    T = _impl.build_t(V, tau)
    return HouseholderPanel(V=V, tau=tau, T=T), R


def apply_panel_left(panel, C, transpose=False, overwrite=False):
    """Apply the panel's H (or H^T) to a conforming dense block."""
    return panel.apply(C, transpose=transpose, overwrite=overwrite)


def rrqr_threshold(M, eps, min_rank=0):
    """Column-pivoted QR truncated by the relative-diagonal threshold rule.

    The accepted rank is r = max{ i : |R_ii| / |R_11| >= eps } (r = 0 for a
    zero matrix), computed dlaqps-style with early stop; `min_rank` forces
    at least that many accepted columns (used for rank escalation).

    Parameters
    ----------
    M : (m, k) ndarray
    eps : float in [0, 1)

    Returns
    -------
    RRQRResult
    """
    if not (0.0 <= eps < 1.0):
        raise NestqrError(f"rrqr_threshold needs eps in [0, 1), got {eps}")
    M = np.ascontiguousarray(M, dtype=np.float64)
    m, k = M.shape
    min_rank = min(int(min_rank), min(m, k))
    V, tau, Tmat, perm, r = _impl.cpqr_threshold(M, float(eps), min_rank)
    T = _impl.build_t(V, tau)
    panel = HouseholderPanel(V=V, tau=tau, T=T)
    return RRQRResult(panel=panel, R=np.array(Tmat[:r, :]),
                      resid=np.array(Tmat[r:, r:]), perm=perm, rank=int(r))


def tri_solve(R, C, side="left"):
    """Solve with an upper-triangular factor: R^{-1} C or C R^{-1}.

    Raises
    ------
    SingularPivotError
        If some |R_ii| <= PIVOT_FLOOR * |R_11| (surfaced, never patched).
    """
    R = np.ascontiguousarray(R, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    k = R.shape[0]
    if k == 0:
        return C.copy()
    if k:
        diag = np.abs(np.diag(R))
        floor = PIVOT_FLOOR * diag[0]
        bad = np.nonzero(diag <= floor)[0]
        if diag[0] == 0.0:
            raise SingularPivotError(0, 0.0)
        if bad.size:
            i = int(bad[0])
            raise SingularPivotError(i, R[i, i])
    vec = C.ndim == 1
    if side == "left":
        B = C.reshape(k, -1)
        X = _impl.tri_solve_left(R, B)
    elif side == "right":
        B = C.reshape(-1, k) if not vec else C.reshape(1, k)
        X = _impl.tri_solve_right(R, B)
    else:
        raise NestqrError(f"tri_solve side must be 'left' or 'right', got {side!r}")
    return X[:, 0] if (vec and side == "left") else (X[0] if vec else X)


def spectral_norm(A):
    """Largest singular value (0 for an empty block)."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    return float(np.linalg.svd(A, compute_uv=False)[0])
