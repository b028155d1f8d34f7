"""Test-problem generators: variable-coefficient advection-diffusion on
regular 2D/3D grids, and high-contrast random coefficient fields.

The PDE is -div(a(x) grad u) + q div(b(x) u) = f with homogeneous
Dirichlet boundary, discretized by centered finite differences on an
n^d interior grid with spacing h = 1/(n+1):

* diffusion: flux faces carry the harmonic mean of the two adjacent
  nodal a-values (a boundary face reuses the interior node's value);
* advection: b is an isotropic vector field b(x)*(1,..,1); the centered
  difference of (b u) puts +-q*b(neighbor)/(2h) on the off-diagonals and
  nothing on the diagonal.

Unknowns are the interior nodes in row-major (C) order of the
(x, y[, z]) index grid.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import NestqrError
from .sparse import SparseMat


@dataclass(frozen=True)
class FieldSpec:
    """Coefficient configuration for one generated problem.

    a(x) is either the constant `a_const` or a high-contrast random field
    (values rho / 1/rho) drawn from `seed`; b(x) is a constant or the
    e^{x+y} preset; q scales the advection term.
    """

    n: int
    ndim: int = 2
    a_kind: str = "const"       # "const" | "hc"
    a_const: float = 1.0
    rho: float = 1.0
    seed: int = 0
    b_kind: str = "const"       # "const" | "exy"
    b_const: float = 1.0
    q: float = 0.0

    def __post_init__(self):
        if self.n < 2:
            raise NestqrError(f"grid needs n >= 2 per axis, got n={self.n}")
        if self.ndim not in (2, 3):
            raise NestqrError(f"ndim must be 2 or 3, got {self.ndim}")
        if self.a_kind not in ("const", "hc"):
            raise NestqrError(f"unknown a-field kind {self.a_kind!r}")
        if self.b_kind not in ("const", "exy"):
            raise NestqrError(f"unknown b-field kind {self.b_kind!r}")
        if self.a_kind == "hc" and self.rho < 1.0:
            raise NestqrError(f"high-contrast rho must be >= 1, got {self.rho}")

    @property
    def dims(self):
        return (self.n,) * self.ndim

    @property
    def N(self):
        return self.n ** self.ndim


def _smooth_reflect(U):
    """Separable truncated unit-sigma Gaussian smoothing, reflective edges."""
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(U.astype(np.float64), sigma=1.0,
                           mode="reflect", truncate=3.0)


def high_contrast_field(n, rho, seed, ndim=2):
    """Two-value random coefficient field on an n^ndim node grid.

    Per node: draw U(0,1), smooth with a truncated (radius 3) unit-sigma
    Gaussian using reflective boundaries, then threshold at 0.5 — above
    maps to rho, below to 1/rho. Deterministic for a given seed.

    Returns
    -------
    ndarray of shape (n,)*ndim with values in {rho, 1/rho}.
    """
    if n < 2:
        raise NestqrError(f"high_contrast_field needs n >= 2, got {n}")
    if rho < 1.0:
        raise NestqrError(f"high_contrast_field needs rho >= 1, got {rho}")
    rng = np.random.default_rng(seed)
    U = rng.random((n,) * ndim)
    S = _smooth_reflect(U)
    return np.where(S >= 0.5, float(rho), 1.0 / float(rho))


def _a_nodes(spec):
    if spec.a_kind == "const":
        return np.full(spec.dims, float(spec.a_const))
    return high_contrast_field(spec.n, spec.rho, spec.seed, ndim=spec.ndim)


def _b_nodes(spec):
    if spec.b_kind == "const":
        return np.full(spec.dims, float(spec.b_const))
    n = spec.n
    h = 1.0 / (n + 1)
    coord = (np.arange(n) + 1.0) * h
    if spec.ndim == 2:
        x, y = np.meshgrid(coord, coord, indexing="ij")
        return np.exp(x + y)
    x, y, _ = np.meshgrid(coord, coord, coord, indexing="ij")
    return np.exp(x + y)


def advection_diffusion(spec, ndim=None):
    """Assemble the advection-diffusion system matrix for `spec`.

    Parameters
    ----------
    spec : FieldSpec
    ndim : 2 or 3, optional
        Cross-check against spec.ndim if given.

    Returns
    -------
    SparseMat of size N x N, N = n^ndim, with 5-point (2D) / 7-point (3D)
    pattern. Pattern is symmetric; values are unsymmetric when q != 0.
    """
    if ndim is not None and ndim != spec.ndim:
        raise NestqrError(f"ndim mismatch: spec has {spec.ndim}, got {ndim}")
    n, d = spec.n, spec.ndim
    h = 1.0 / (n + 1)
    a = _a_nodes(spec)
    b = _b_nodes(spec)
    q = float(spec.q)
    dims = spec.dims
    N = spec.N
    idx = np.arange(N).reshape(dims)

    rows_list, cols_list, vals_list = [], [], []
    diag = np.zeros(dims)
    inv_h2 = 1.0 / (h * h)
    adv = q / (2.0 * h)

    for axis in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        # interior faces: harmonic mean of the two adjacent nodes
        a_lo, a_hi = a[lo], a[hi]
        face = 2.0 * a_lo * a_hi / (a_lo + a_hi)
        diag[lo] += face * inv_h2
        diag[hi] += face * inv_h2
        # boundary faces reuse the adjacent interior node's coefficient
        first = [slice(None)] * d
        last = [slice(None)] * d
        first[axis] = 0
        last[axis] = n - 1
        diag[tuple(first)] += a[tuple(first)] * inv_h2
        diag[tuple(last)] += a[tuple(last)] * inv_h2
        # off-diagonals: -face/h^2 +- q*b(neighbor)/(2h)
        east = -face * inv_h2 + adv * b[hi]   # coupling (node lo) -> (node hi)
        west = -face * inv_h2 - adv * b[lo]   # coupling (node hi) -> (node lo)
        rows_list.append(idx[lo].ravel())
        cols_list.append(idx[hi].ravel())
        vals_list.append(east.ravel())
        rows_list.append(idx[hi].ravel())
        cols_list.append(idx[lo].ravel())
        vals_list.append(west.ravel())

    rows_list.append(idx.ravel())
    cols_list.append(idx.ravel())
    vals_list.append(diag.ravel())
    return SparseMat.from_triplets(
        N, N,
        np.concatenate(rows_list),
        np.concatenate(cols_list),
        np.concatenate(vals_list),
    )


# ---------------------------------------------------------------- CLI spec strings

_HC_RE = re.compile(r"^hc\(\s*rho\s*=\s*([^,\s)]+)\s*(?:,\s*seed\s*=\s*(\d+)\s*)?\)$")


def _split_top_level(s):
    """Split on commas not nested inside parentheses."""
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(s):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(s[start:i])
            start = i + 1
    parts.append(s[start:])
    return [p for p in (p.strip() for p in parts) if p]


def parse_problem_spec(text):
    """Parse a generator string like ``ad2d:n=127,a=hc(rho=10,seed=7),b=1,q=1``.

    Supported heads: ad2d, ad3d. Keys: n (required), a (number or
    hc(rho=..,seed=..)), b (number or exy), q (number), seed.
    """
    text = text.strip()
    if ":" not in text:
        raise NestqrError(f"generator spec needs 'head:params', got {text!r}")
    head, _, body = text.partition(":")
    head = head.strip().lower()
    if head == "ad2d":
        ndim = 2
    elif head == "ad3d":
        ndim = 3
    else:
        raise NestqrError(f"unknown generator {head!r} (use ad2d or ad3d)")

    kw = {"ndim": ndim}
    for item in _split_top_level(body):
        if "=" not in item:
            raise NestqrError(f"bad generator parameter {item!r} (need key=value)")
        key, _, value = item.partition("=")
        key, value = key.strip().lower(), value.strip()
        if key == "n":
            kw["n"] = int(value)
        elif key == "q":
            kw["q"] = float(value)
        elif key == "seed":
            kw["seed"] = int(value)
        elif key == "a":
            m = _HC_RE.match(value)
            if m:
                kw["a_kind"] = "hc"
                kw["rho"] = float(m.group(1))
                if m.group(2) is not None:
                    kw["seed"] = int(m.group(2))
            else:
                kw["a_kind"] = "const"
                kw["a_const"] = float(value)
        elif key == "b":
            if value.lower() == "exy":
                kw["b_kind"] = "exy"
            else:
                kw["b_kind"] = "const"
                kw["b_const"] = float(value)
        else:
            raise NestqrError(f"unknown generator key {key!r}")
    if "n" not in kw:
        raise NestqrError(f"generator spec {text!r} is missing n=")
    try:
        return FieldSpec(**kw)
    except TypeError as e:
        raise NestqrError(f"bad generator spec {text!r}: {e}") from None


def default_levels(N):
    """Default hierarchy depth for an N-unknown problem: ceil(log2(N/64))."""
    return max(1, math.ceil(math.log(N / 64.0) / math.log(2.0)))
