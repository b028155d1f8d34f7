"""Preconditioned GMRES driver and solve reporting.

The factorization chains turn A x = b into the right-preconditioned
system (Pᵀ Qᵀ A W⁻¹) y = Pᵀ Qᵀ b with x = W⁻¹ y.  Because Q is exactly
orthogonal and P a permutation, the preconditioned residual norm equals
the true residual norm, so convergence is decided on the Arnoldi
least-squares estimate (which keeps decreasing even after recomputed
residuals hit their rounding floor a little above a tight tolerance).
The reported history nevertheless recomputes ‖A x_k − b‖₂ / ‖b‖₂ from
the actual iterate at every step, so it stays honest even under loss of
basis orthogonality, and the returned iterate is the best one seen.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NestqrError

_REORTH_THRESHOLD = 1e-8


def apply_qt(F, b):
    """Pᵀ Qᵀ b for a computed factorization."""
    return F.apply_qt(b)


def solve_w(F, y):
    """W⁻¹ y for a computed factorization."""
    return F.solve_w(y)


@dataclass
class SolveReport:
    """Outcome of one iterative solve."""

    iterations: int
    residuals: np.ndarray        # relative true residuals, length iters+1
    converged: bool
    tol: float
    t_total: float = 0.0
    t_apply: float = 0.0         # time inside preconditioner/matrix applies
    meta: dict = field(default_factory=dict)

    @property
    def final_residual(self):
        return float(self.residuals[-1])

    def to_csv(self, path, config=None):
        """Write the residual history; `config` rows become '#' comments."""
        with open(path, "w", newline="") as fh:
            if config:
                for key in sorted(config):
                    fh.write(f"# {key} = {config[key]}\n")
            writer = csv.writer(fh)
            writer.writerow(["iteration", "relative_residual"])
            for k, r in enumerate(self.residuals):
                writer.writerow([k, f"{r:.16e}"])


def gmres(A, b, F=None, tol=1e-12, maxit=300, restart=None, x0=None):
    """Right-preconditioned GMRES with exact per-iteration residuals.

    Parameters
    ----------
    A : SparseMat
    b : rhs vector
    F : Factorization or None (unpreconditioned when None)
    tol : relative residual target on ‖A x − b‖₂ / ‖b‖₂
    maxit : total iteration cap (across restarts)
    restart : cycle length m for restarted GMRES; None = full GMRES
    x0 : optional initial guess

    Returns
    -------
    (x, SolveReport) — `converged=False` report when maxit is exhausted
    (no exception).
    """
    b = np.asarray(b, dtype=np.float64)
    if A.nrows != A.ncols:
        raise NestqrError(f"gmres needs a square matrix, got {A.shape}")
    if b.shape != (A.nrows,):
        raise NestqrError(f"rhs of shape {b.shape} incompatible with "
                          f"matrix of size {A.nrows}")
    if F is not None and F.N != A.ncols:
        raise NestqrError("factorization size does not match the matrix")
    if restart is not None and restart < 1:
        raise NestqrError(f"restart must be >= 1, got {restart}")

    t_start = time.perf_counter()
    t_apply = 0.0

    def timed(fn, v):
        nonlocal t_apply
        t0 = time.perf_counter()
        out = fn(v)
        t_apply += time.perf_counter() - t0
        return out

    if F is None:
        def op(v):
            return A.matvec(v)

        def back(v):
            return np.asarray(v, float)

        def fwd(r):
            return np.asarray(r, float)
    else:
        def op(v):
            return F.apply_qt(A.matvec(F.solve_w(v)))

        def back(v):
            return F.solve_w(v)

        def fwd(r):
            return F.apply_qt(r)

    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return np.zeros(A.ncols), SolveReport(
            0, np.array([0.0]), True, tol,
            time.perf_counter() - t_start, 0.0)

    x = np.zeros(A.ncols) if x0 is None else np.asarray(x0, float).copy()
    hist = [float(np.linalg.norm(b - A.matvec(x))) / nb]
    total = 0
    converged = hist[0] <= tol
    best_x, best_res = x, hist[0]

    while not converged and total < maxit:
        r = b - A.matvec(x)
        z = timed(fwd, r)
        beta = float(np.linalg.norm(z))
        if beta == 0.0:
            converged = True
            break
        m = maxit - total if restart is None else min(restart, maxit - total)
        V = np.zeros((A.ncols, m + 1))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[:, 0] = z / beta
        x_cycle = x
        for j in range(m):
            w = timed(op, V[:, j])
            # modified Gram-Schmidt + one conditional reorthogonalization
            for i in range(j + 1):
                H[i, j] = V[:, i] @ w
                w -= H[i, j] * V[:, i]
            wn = float(np.linalg.norm(w))
            if wn > 0.0:
                corr = V[:, :j + 1].T @ w
                if np.abs(corr).max(initial=0.0) / wn > _REORTH_THRESHOLD:
                    H[:j + 1, j] += corr
                    w -= V[:, :j + 1] @ corr
                    wn = float(np.linalg.norm(w))
            H[j + 1, j] = wn
            for i in range(j):
                h0 = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = h0
            denom = float(np.hypot(H[j, j], H[j + 1, j]))
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j] = H[j, j] / denom
                sn[j] = H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            # form the iterate and its exact residual
            y = solve_triangular(H[:j + 1, :j + 1], g[:j + 1], lower=False)
            u = V[:, :j + 1] @ y
            x_cycle = x + timed(back, u)
            total += 1
            hist.append(float(np.linalg.norm(b - A.matvec(x_cycle))) / nb)
            if hist[-1] < best_res:
                best_x, best_res = x_cycle, hist[-1]
            # |g[j+1]| is the least-squares residual of the Arnoldi
            # system: equal to the true residual in exact arithmetic, and
            # still meaningful once the recomputed residual has floored
            if abs(g[j + 1]) / nb <= tol or hist[-1] <= tol:
                converged = True
                break
            if wn <= 1e-300:      # happy breakdown: subspace is invariant
                break
            V[:, j + 1] = w / wn
        x = x_cycle

    report = SolveReport(
        iterations=total,
        residuals=np.asarray(hist),
        converged=bool(converged),
        tol=tol,
        t_total=time.perf_counter() - t_start,
        t_apply=t_apply,
        meta={"restart": restart, "maxit": maxit,
              "best_residual": best_res},
    )
    return best_x, report
