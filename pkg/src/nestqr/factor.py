"""Hierarchical sparsified block-QR factorization.

Builds the approximate factorization Qᵀ A W⁻¹ = P + E where Q is a product
of orthogonal block transforms, W a product of invertible right-factors
(triangular pivots, interface rotations, a column equilibration), P a
permutation pairing retired rows with retired columns, and ‖E‖ is
controlled by the drop tolerance eps.

Per level lev = L..1 the driver

  1. factors every cluster born at lev (leaf interiors at L, whole
     separators below) with a block Householder panel over the cluster's
     column block, stacking the cluster's own rows with exactly those
     rows of coupled clusters that touch its columns — fill appears only
     among the rows and columns the panel actually involves;
  2. once more than `skip` levels have been processed, compresses every
     pending interface fragment: optionally rescales its diagonal block to
     the identity, then finds a reduced orthogonal column basis via
     threshold column-pivoted QR and drops the O(eps) couplings of the
     discarded ("fine") directions, retiring those rows/columns;
  3. merges interface fragments one depth up the cluster hierarchy.

Transforms are stored as two ordered chains (Q-side and W-side) of small
dense payloads; no global sparse factor is ever assembled.
"""

from __future__ import annotations

import time

import numpy as np

from .errors import (
    IllConditionedInterfaceError,
    NestqrError,
    SingularPivotError,
)
from .kernels import (
    PIVOT_FLOOR,
    apply_panel_left,
    qr_house,
    rrqr_threshold,
    spectral_norm,
    tri_solve,
)
from .ordering import assign_rows, partition_algebraic
from .problems import default_levels
from .sparse import equilibrate_columns

MODES = ("scaled", "unscaled", "variant1", "variant2")

# sigma_min floor (relative to sigma_max) below which an interface is
# considered too ill-conditioned for unscaled-mode compression
SIGMA_FLOOR = 1e-14


def _check_pivots(R, context):
    """Mirror tri_solve's singularity rule at factor time for early errors."""
    k = R.shape[0]
    if k == 0:
        return
    diag = np.abs(np.diag(R))
    if diag[0] == 0.0:
        raise SingularPivotError(0, 0.0, context)
    bad = np.nonzero(diag <= PIVOT_FLOOR * diag[0])[0]
    if bad.size:
        i = int(bad[0])
        raise SingularPivotError(i, R[i, i], context)


def _as2d(x):
    return (x.reshape(-1, 1), True) if x.ndim == 1 else (x, False)


# ================================================================ transforms


class BlockHouseholder:
    """Elimination of one cluster's column block.

    Q-side: the Householder panel over the stacked coupled rows.
    W-side: the factored pivot rows  y_s = R_ss x_s + R_sn x_n.
    """

    def __init__(self, rows, panel, cols_s, R_ss, cols_n, R_sn):
        self.rows = rows
        self.panel = panel
        self.cols_s = cols_s
        self.R_ss = R_ss
        self.cols_n = cols_n
        self.R_sn = R_sn

    @property
    def payload_scalars(self):
        return self.panel.payload_scalars + self.R_ss.size + self.R_sn.size

    def apply_qt(self, z):
        z[self.rows] = self.panel.apply(z[self.rows], transpose=True)
        return z

    def apply_w(self, x):
        xs = self.R_ss @ x[self.cols_s]
        if len(self.cols_n):
            xs += self.R_sn @ x[self.cols_n]
        x[self.cols_s] = xs
        return x

    def solve_w(self, y):
        rhs = y[self.cols_s]
        if len(self.cols_n):
            rhs = rhs - self.R_sn @ y[self.cols_n]
        y[self.cols_s] = tri_solve(self.R_ss, rhs)
        return y


class InterfaceScaling:
    """Rescaling of an interface's diagonal block to the identity.

    Q-side: U_ppᵀ on the interface's rows.  W-side: y_p = R_pp x_p.
    """

    def __init__(self, rows, panel, cols, R_pp):
        self.rows = rows
        self.panel = panel
        self.cols = cols
        self.R_pp = R_pp

    @property
    def payload_scalars(self):
        return self.panel.payload_scalars + self.R_pp.size

    def apply_qt(self, z):
        z[self.rows] = self.panel.apply(z[self.rows], transpose=True)
        return z

    def apply_w(self, x):
        x[self.cols] = self.R_pp @ x[self.cols]
        return x

    def solve_w(self, y):
        y[self.cols] = tri_solve(self.R_pp, y[self.cols])
        return y


class Sparsifier:
    """Low-rank compression of one interface fragment.

    The orthogonal basis Q_pp splits the fragment into coarse (kept, first
    `rank` columns) and fine (retired) directions.

    Scaled flavor (diagonal block is the identity): Q-side applies Q_ppᵀ to
    the fragment's rows; the fine rows become identity equations, so the
    W-side is the rotation x̂_p = Q_ppᵀ x_p alone.

    Unscaled flavor: Q-side applies the Householder panel H_fᵀ that
    eliminates the fine columns of A_pp Q_pp; the retired fine rows carry
    y_f = R_ff x̂_f + R_fc x̂_c on the W-side before the rotation.
    """

    def __init__(self, rows, cols, q_panel, rank, scaled,
                 hf_panel=None, R_ff=None, R_fc=None):
        self.rows = rows
        self.cols = cols
        self.q_panel = q_panel
        self.rank = rank
        self.scaled = scaled
        self.hf_panel = hf_panel
        self.R_ff = R_ff
        self.R_fc = R_fc

    @property
    def fine(self):
        return len(self.cols) - self.rank

    @property
    def payload_scalars(self):
        n = self.q_panel.payload_scalars
        if not self.scaled:
            n += self.hf_panel.payload_scalars + self.R_ff.size + self.R_fc.size
        return n

    def apply_qt(self, z):
        panel = self.q_panel if self.scaled else self.hf_panel
        z[self.rows] = panel.apply(z[self.rows], transpose=True)
        return z

    def apply_w(self, x):
        r = self.rank
        v = self.q_panel.apply(x[self.cols], transpose=True)
        if not self.scaled:
            v2, was_vec = _as2d(v)
            v2[r:] = self.R_ff @ v2[r:] + self.R_fc @ v2[:r]
            v = v2[:, 0] if was_vec else v2
        x[self.cols] = v
        return x

    def solve_w(self, y):
        r = self.rank
        v, was_vec = _as2d(np.array(y[self.cols]))
        if not self.scaled:
            rhs = v[r:] - self.R_fc @ v[:r]
            v[r:] = tri_solve(self.R_ff, rhs)
        v = v[:, 0] if was_vec else v
        y[self.cols] = self.q_panel.apply(v, transpose=False)
        return y


class Permutation:
    """Final row↔column pairing: out[j] = z[row_of_col[j]]."""

    def __init__(self, row_of_col):
        self.row_of_col = row_of_col

    @property
    def payload_scalars(self):
        return 0

    def apply_qt(self, z):
        return z[self.row_of_col]


class DiagonalScaling:
    """Column equilibration of A, recorded as the first W-side factor.

    The driver factors S = A diag(1/scale) (unit column norms), so the
    W-chain opens with y = diag(scale) x: forward multiplies by `scale`,
    inverse divides.
    """

    def __init__(self, scale):
        self.scale = scale

    @property
    def payload_scalars(self):
        return self.scale.size

    def apply_w(self, x):
        return x * (self.scale[:, None] if x.ndim == 2 else self.scale)

    def solve_w(self, y):
        return y / (self.scale[:, None] if y.ndim == 2 else self.scale)


# ============================================================== factorization


class Factorization:
    """Immutable result: ordered Q/W transform chains plus bookkeeping.

    Applying the chains to A (densely, at desk scale) yields
    Qᵀ A W⁻¹ = P + E with ‖E‖₂ controlled by the drop tolerance.
    """

    def __init__(self, A, tree, q_chain, w_chain, row_of_col, stats, options):
        self.A = A
        self.N = A.ncols
        self.tree = tree
        self.q_chain = q_chain
        self.w_chain = w_chain
        self.row_of_col = row_of_col
        self.stats = stats
        self.options = options

    @property
    def payload_scalars(self):
        seen = set()
        total = 0
        for rec in self.q_chain + self.w_chain:
            if id(rec) not in seen:
                seen.add(id(rec))
                total += rec.payload_scalars
        return total

    def _check_dim(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.N:
            raise NestqrError(f"vector of length {v.shape[0]} incompatible "
                              f"with matrix of size {self.N}")
        return v.copy()

    def apply_qt(self, b):
        """Pᵀ Qᵀ b: the transposed orthogonal chain in level L→1 order."""
        z = self._check_dim(b)
        for rec in self.q_chain:
            z = rec.apply_qt(z)
        return z

    def apply_w(self, x):
        """W x: forward application of the right-factor chain."""
        z = self._check_dim(x)
        for rec in self.w_chain:
            z = rec.apply_w(z)
        return z

    def solve_w(self, y):
        """W⁻¹ y: back substitution through the reversed right-factor chain."""
        z = self._check_dim(y)
        for rec in reversed(self.w_chain):
            z = rec.solve_w(z)
        return z

    # ------------------------------------------------------- audit helpers

    def materialize_preconditioned(self):
        """Dense Pᵀ Qᵀ A W⁻¹ (≈ I). Small problems only."""
        X = self.solve_w(np.eye(self.N))
        return self.apply_qt(self.A.to_dense() @ X)

    def materialize_w(self):
        """Dense W (small problems only)."""
        return self.apply_w(np.eye(self.N))

    def stats_fieldnames(self):
        return list(self.stats[0].keys()) if self.stats else []


# ============================================================= trailing state


class TrailingState:
    """The evolving block matrix plus live row/column bookkeeping.

    Blocks are dense ndarrays keyed by (row cluster id, col cluster id);
    only structurally coupled pairs hold a block, so untouched cluster
    pairs provably acquire no fill.
    """

    def __init__(self, A, tree, row_heuristic="same-as-columns",
                 equilibrate=True):
        if A.nrows != A.ncols:
            raise NestqrError(f"matrix must be square, got {A.shape}")
        self.tree = tree
        self.N = A.ncols
        self.w_prefix = []
        if equilibrate:
            S, scale = equilibrate_columns(A)
            self.w_prefix.append(DiagonalScaling(scale))
        else:
            S = A
        leaves = tree.leaf_clusters()
        if leaves and leaves[0].rows is None:
            assign_rows(A, tree, row_heuristic)

        self.rows_of = {c.id: c.rows.copy() for c in leaves}
        self.cols_of = {c.id: c.cols.copy() for c in leaves}
        self.active = set(self.rows_of)
        self.row_index = {cid: set() for cid in self.active}
        self.col_index = {cid: set() for cid in self.active}
        self.trailing = {}
        self.row_of_col = np.full(self.N, -1, np.int64)

        row_owner = np.empty(self.N, np.int64)
        col_owner = np.empty(self.N, np.int64)
        row_pos = np.empty(self.N, np.int64)
        col_pos = np.empty(self.N, np.int64)
        for c in leaves:
            row_owner[c.rows] = c.id
            col_owner[c.cols] = c.id
            row_pos[c.rows] = np.arange(len(c.rows))
            col_pos[c.cols] = np.arange(len(c.cols))

        r, cc, v = S.to_triplets()
        rk, ck = row_owner[r], col_owner[cc]
        order = np.lexsort((ck, rk))
        r, cc, v, rk, ck = r[order], cc[order], v[order], rk[order], ck[order]
        stride = len(tree.clusters) + 1
        key = rk * stride + ck
        starts = np.nonzero(np.r_[True, key[1:] != key[:-1]])[0]
        bounds = np.r_[starts, len(key)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            i, j = int(rk[a]), int(ck[a])
            B = np.zeros((len(self.rows_of[i]), len(self.cols_of[j])))
            np.add.at(B, (row_pos[r[a:b]], col_pos[cc[a:b]]), v[a:b])
            self._set_block(i, j, B)

    # ------------------------------------------------------------ block map

    def _set_block(self, i, j, B):
        self.trailing[(i, j)] = B
        self.row_index[i].add(j)
        self.col_index[j].add(i)

    def _del_block(self, i, j):
        self.trailing.pop((i, j), None)
        self.row_index[i].discard(j)
        self.col_index[j].discard(i)

    def _get(self, i, j):
        B = self.trailing.get((i, j))
        if B is None:
            B = np.zeros((len(self.rows_of[i]), len(self.cols_of[j])))
        return B

    def block_nnz(self):
        return sum(int(np.count_nonzero(B)) for B in self.trailing.values())

    def total_cols(self):
        return sum(len(self.cols_of[c]) for c in self.active)

    # ------------------------------------------------------ level operation 1

    def factor_interior(self, s):
        """Eliminate cluster s's column block with one Householder panel.

        The panel stacks s's own rows with, from every coupled cluster,
        exactly the rows that carry a nonzero in s's columns. Rows of a
        neighbor that do not touch s stay out of the panel, so the
        orthogonal mix cannot smear entries across them: fill lands only
        on rows already coupled to s, in columns some panel row touches.
        """
        rows_s, cols_s = self.rows_of[s], self.cols_of[s]
        ns = len(cols_s)
        if ns == 0:
            self._retire_cluster(s)
            return None
        row_cl = [s]
        row_idx = [np.arange(len(rows_s))]
        fulls = [True]
        parts = [self._get(s, s)]
        for r in sorted(self.col_index[s] - {s}):
            blk = self.trailing[(r, s)]
            idx = np.flatnonzero(np.any(blk, axis=1))
            if len(idx):
                full = len(idx) == blk.shape[0]
                row_cl.append(r)
                row_idx.append(idx)
                fulls.append(full)
                parts.append(blk if full else blk[idx])
        offs = np.r_[0, np.cumsum([len(ix) for ix in row_idx])]
        stack_rows = np.concatenate(
            [self.rows_of[r][ix] for r, ix in zip(row_cl, row_idx)])

        panel, R_ss = qr_house(np.vstack(parts))
        _check_pivots(R_ss, f"pivot block of cluster {s}")

        # columns holding a nonzero in some panel row, grouped by cluster;
        # assembled into one buffer by walking only the stored blocks
        cand = sorted(set().union(*(self.row_index[r] for r in row_cl))
                      - {s})
        candpos = {c: ci for ci, c in enumerate(cand)}
        nrows_tot = int(offs[-1])
        cw = np.r_[0, np.cumsum([len(self.cols_of[c]) for c in cand])]
        buf = np.zeros((nrows_tot, int(cw[-1])))
        present = np.zeros(len(cand), dtype=bool)
        for r, ix, full, o0, o1 in zip(row_cl, row_idx, fulls,
                                       offs[:-1], offs[1:]):
            for c in self.row_index[r]:
                ci = candpos.get(c)
                if ci is None:
                    continue
                blk = self.trailing[(r, c)]
                sub = blk if full else blk[ix]
                buf[o0:o1, cw[ci]:cw[ci + 1]] = sub
                if not present[ci] and np.any(sub):
                    present[ci] = True
        cols_t = [c for ci, c in enumerate(cand) if present[ci]]
        if present.all():
            C_all = buf
        else:
            colmask = np.zeros(int(cw[-1]), dtype=bool)
            for ci in np.flatnonzero(present):
                colmask[cw[ci]:cw[ci + 1]] = True
            C_all = np.ascontiguousarray(buf[:, colmask])
        woffs = np.r_[0, np.cumsum([len(self.cols_of[c]) for c in cols_t])]
        C_all = apply_panel_left(panel, C_all, transpose=True,
                                 overwrite=True)
        for c, w0, w1 in zip(cols_t, woffs[:-1], woffs[1:]):
            for r, ix, full, o0, o1 in zip(row_cl, row_idx, fulls,
                                           offs[:-1], offs[1:]):
                if r == s:
                    continue
                if full:
                    self._set_block(r, c, C_all[o0:o1, w0:w1].copy())
                    continue
                blk = self.trailing.get((r, c))
                if blk is None:
                    blk = np.zeros((len(self.rows_of[r]),
                                    len(self.cols_of[c])))
                blk[ix] = C_all[o0:o1, w0:w1]
                self._set_block(r, c, blk)
        for r in list(self.col_index[s]):
            self._del_block(r, s)
        for c in list(self.row_index[s]):
            self._del_block(s, c)

        cols_n = (np.concatenate([self.cols_of[c] for c in cols_t])
                  if cols_t else np.empty(0, np.int64))
        R_sn = C_all[:ns].copy()    # detach from the big panel buffer
        self.row_of_col[cols_s] = rows_s
        rec = BlockHouseholder(stack_rows, panel, cols_s.copy(), R_ss,
                               cols_n, R_sn)
        self._retire_cluster(s)
        return rec

    def _retire_cluster(self, s):
        self.active.discard(s)
        self.rows_of.pop(s, None)
        self.cols_of.pop(s, None)
        self.row_index.pop(s, None)
        self.col_index.pop(s, None)

    # ------------------------------------------------------ level operation 2

    def scale_interface(self, p):
        """Rotate/rescale so the interface's diagonal block becomes I."""
        np_ = len(self.cols_of[p])
        if np_ == 0:
            return None
        App = self._get(p, p)
        panel, R_pp = qr_house(App)
        _check_pivots(R_pp, f"diagonal block of interface {p}")
        cs = sorted(self.row_index[p] - {p})
        if cs:
            woffs = np.r_[0, np.cumsum(
                [self.trailing[(p, c)].shape[1] for c in cs])]
            Z = apply_panel_left(
                panel, np.hstack([self.trailing[(p, c)] for c in cs]),
                transpose=True, overwrite=True)
            for c, w0, w1 in zip(cs, woffs[:-1], woffs[1:]):
                self.trailing[(p, c)] = Z[:, w0:w1].copy()
        rs = sorted(self.col_index[p] - {p})
        if rs:
            hoffs = np.r_[0, np.cumsum(
                [self.trailing[(r, p)].shape[0] for r in rs])]
            Z = tri_solve(
                R_pp, np.vstack([self.trailing[(r, p)] for r in rs]),
                side="right")
            for r, h0, h1 in zip(rs, hoffs[:-1], hoffs[1:]):
                self.trailing[(r, p)] = Z[h0:h1].copy()
        self._set_block(p, p, np.eye(np_))
        return InterfaceScaling(self.rows_of[p].copy(), panel,
                                self.cols_of[p].copy(), R_pp)

    # ------------------------------------------------------ level operation 3

    def _compression_target(self, p, u_list, c_list, mode, scaled_now):
        """The block whose column-pivoted QR decides coarse vs fine."""
        np_ = len(self.cols_of[p])
        Anp = (np.vstack([self.trailing[(u, p)] for u in u_list])
               if u_list else np.zeros((0, np_)))
        Apn = (np.hstack([self.trailing[(p, c)] for c in c_list])
               if c_list else np.zeros((np_, 0)))
        sigma = None
        if mode == "variant1":
            M = Anp.T.copy()
        elif mode == "variant2":
            parts = []
            for c in c_list:
                acc = np.zeros((np_, len(self.cols_of[c])))
                for r in self.col_index[p] & self.col_index[c]:
                    acc += self.trailing[(r, p)].T @ self.trailing[(r, c)]
                parts.append(acc)
            M = np.hstack(parts) if parts else np.zeros((np_, 0))
        elif scaled_now:
            M = np.hstack([Anp.T, Apn])
        else:
            App = self._get(p, p)
            col_stack = np.vstack([App, Anp])
            sv = np.linalg.svd(col_stack, compute_uv=False)
            smin = float(sv[-1]) if len(sv) else 0.0
            smax = float(sv[0]) if len(sv) else 0.0
            if smin <= SIGMA_FLOOR * max(smax, 1e-300):
                raise IllConditionedInterfaceError(p, smin,
                                                   SIGMA_FLOOR * smax)
            sigma = 1.0 / smin
            M = np.hstack([Anp.T, sigma * (App.T @ Apn)])
        return M, Anp, Apn, sigma

    def sparsify_interface(self, p, eps, mode="scaled", scaled_now=True):
        """Compress interface p to its coarse directions; drop O(eps) blocks.

        Returns (transform-or-None, max dropped spectral norm).
        """
        np_ = len(self.cols_of[p])
        if np_ == 0:
            return None, 0.0
        u_list = sorted(self.col_index[p] - {p})
        c_list = sorted(self.row_index[p] - {p})
        M, Anp, Apn, _sigma = self._compression_target(
            p, u_list, c_list, mode, scaled_now)

        rank_max = min(M.shape) if min(M.shape) else 0
        colnorms = (np.sqrt(np.einsum("ij,ij->j", M, M)) if M.size
                    else np.zeros(M.shape[1]))
        maxcol = float(colnorms.max()) if M.size else 0.0
        if scaled_now:
            # with the diagonal scaled to the identity, couplings live on
            # the same footing as the retired equations, so directions
            # whose pivot column falls below eps are dropped outright.
            # The spectral norm of the whole dropped block can exceed eps
            # by a modest geometric factor; it is reported per level in
            # the stats rather than enforced, which would force the rank
            # far up a slowly decaying tail for no accuracy gain.
            ratio = 0.0 if maxcol == 0.0 else min(eps / maxcol, 0.999999)
            # columns already below the pivot threshold can never be
            # chosen while the acceptance test holds (residual norms only
            # decrease), so excluding them changes neither the pivot
            # sequence nor the accepted rank; the transform and the
            # dropped blocks are recomputed from the full couplings.
            Mk = M
            if maxcol > 0.0 and M.shape[1] > 4 * M.shape[0]:
                keep = colnorms >= ratio * maxcol
                if not keep.all():
                    Mk = np.ascontiguousarray(M[:, keep])
            res = rrqr_threshold(Mk, ratio)
            return self._apply_sparsify_scaled(p, u_list, c_list,
                                               Anp, Apn, res)
        # the unscaled route must honor the absolute coupling bound
        # |R_fn| <= eps, so the pivot threshold is normalized by the
        # largest column instead
        ratio = 0.0 if maxcol == 0.0 else min(eps / maxcol, 0.999999)
        res = rrqr_threshold(M, ratio)
        return self._apply_sparsify_unscaled(p, u_list, c_list,
                                             Anp, Apn, M, eps, mode,
                                             ratio, res)

    def _split_back(self, stacked, clusters, axis, p, sizes):
        offs = np.r_[0, np.cumsum(sizes)]
        for cid, o0, o1 in zip(clusters, offs[:-1], offs[1:]):
            blk = stacked[o0:o1] if axis == 0 else stacked[:, o0:o1]
            if blk.size:
                key = (cid, p) if axis == 0 else (p, cid)
                self._set_block(*key, blk.copy())
            else:
                self._del_block(*((cid, p) if axis == 0 else (p, cid)))

    def _apply_sparsify_scaled(self, p, u_list, c_list, Anp, Apn, res):
        rows_p, cols_p = self.rows_of[p], self.cols_of[p]
        np_, r = len(cols_p), res.rank
        if r >= np_:
            return None, 0.0
        Q = res.panel
        # columns: A(:,p) <- A(:,p) Q, keep the coarse first-r columns
        AnpQ = apply_panel_left(Q, Anp.T, transpose=True).T
        E1 = AnpQ[:, r:]
        self._split_back(AnpQ[:, :r], u_list, 0, p,
                         [len(self.rows_of[u]) for u in u_list])
        # rows: A(p,:) <- Qᵀ A(p,:), keep the coarse first-r rows
        ApnT = apply_panel_left(Q, Apn, transpose=True)
        E2 = ApnT[r:]
        self._split_back(ApnT[:r], c_list, 1, p,
                         [len(self.cols_of[c]) for c in c_list])
        dropped = max(spectral_norm(E1), spectral_norm(E2))

        rec = Sparsifier(rows_p.copy(), cols_p.copy(), Q, r, scaled=True)
        # fine slots retire as identity row/column pairs
        self.row_of_col[cols_p[r:]] = rows_p[r:]
        self.rows_of[p] = rows_p[:r].copy()
        self.cols_of[p] = cols_p[:r].copy()
        if r:
            self._set_block(p, p, np.eye(r))
        else:
            self._del_block(p, p)
            for u in u_list:
                self._del_block(u, p)
            for c in c_list:
                self._del_block(p, c)
        return rec, dropped

    def _apply_sparsify_unscaled(self, p, u_list, c_list, Anp, Apn,
                                 M, eps, mode, ratio, res):
        rows_p, cols_p = self.rows_of[p], self.cols_of[p]
        np_ = len(cols_p)
        rank_max = min(M.shape) if min(M.shape) else 0
        App = self._get(p, p)
        enforce = mode in ("scaled", "unscaled")
        while True:
            r = res.rank
            f = np_ - r
            if f == 0:
                return None, 0.0
            Q = res.panel
            G = apply_panel_left(Q, App.T, transpose=True).T   # App @ Q
            hf_panel, R_ff = qr_house(G[:, r:])
            G2 = apply_panel_left(hf_panel, G, transpose=True)
            ApnT = apply_panel_left(hf_panel, Apn, transpose=True)
            R_fn = ApnT[:f]
            nrm_fn = spectral_norm(R_fn)
            if (not enforce) or nrm_fn <= eps * (1.0 + 1e-8) \
                    or r >= rank_max:
                break
            res = rrqr_threshold(M, ratio, min_rank=r + 1)
        _check_pivots(R_ff, f"fine block of interface {p}")

        AnpQ = apply_panel_left(Q, Anp.T, transpose=True).T
        E1 = AnpQ[:, r:]
        dropped = max(spectral_norm(E1), nrm_fn)
        self._split_back(AnpQ[:, :r], u_list, 0, p,
                         [len(self.rows_of[u]) for u in u_list])
        self._split_back(ApnT[f:], c_list, 1, p,
                         [len(self.cols_of[c]) for c in c_list])

        rec = Sparsifier(rows_p.copy(), cols_p.copy(), Q, r, scaled=False,
                         hf_panel=hf_panel, R_ff=R_ff,
                         R_fc=G2[:f, :r].copy())
        # fine rows are the first f slots after H_f; they pair with the
        # fine columns (last f slots after the basis rotation)
        self.row_of_col[cols_p[r:]] = rows_p[:f]
        self.rows_of[p] = rows_p[f:].copy()
        self.cols_of[p] = cols_p[:r].copy()
        if r:
            self._set_block(p, p, G2[f:, :r].copy())
        else:
            self._del_block(p, p)
            for u in u_list:
                self._del_block(u, p)
            for c in c_list:
                self._del_block(p, c)
        return rec, dropped

    # ------------------------------------------------------ level operation 4

    def merge_level(self, lev):
        """Concatenate surviving fragments into their depth-(lev-1) parents."""
        parents = self.tree.active_at(lev - 1)
        parent_of, roff, coff = {}, {}, {}
        new_rows, new_cols = {}, {}
        for P in parents:
            ro, co = 0, 0
            rparts, cparts = [], []
            for k in P.children:
                parent_of[k] = P.id
                roff[k], coff[k] = ro, co
                ro += len(self.rows_of[k])
                co += len(self.cols_of[k])
                rparts.append(self.rows_of[k])
                cparts.append(self.cols_of[k])
            new_rows[P.id] = (np.concatenate(rparts) if rparts
                              else np.empty(0, np.int64))
            new_cols[P.id] = (np.concatenate(cparts) if cparts
                              else np.empty(0, np.int64))

        old = self.trailing
        self.rows_of, self.cols_of = new_rows, new_cols
        self.active = set(new_rows)
        self.trailing = {}
        self.row_index = {cid: set() for cid in self.active}
        self.col_index = {cid: set() for cid in self.active}
        for (i, j), B in old.items():
            if B.size == 0:
                continue
            Pi, Pj = parent_of[i], parent_of[j]
            tgt = self.trailing.get((Pi, Pj))
            if tgt is None:
                tgt = np.zeros((len(new_rows[Pi]), len(new_cols[Pj])))
                self._set_block(Pi, Pj, tgt)
            tgt[roff[i]:roff[i] + B.shape[0],
                coff[j]:coff[j] + B.shape[1]] = B


# thin functional wrappers over the state object, mirroring the level loop
def factor_interior(state, s):
    return state.factor_interior(s)


def scale_interface(state, p):
    return state.scale_interface(p)


def sparsify_interface(state, p, eps, mode="scaled", scaled_now=True):
    return state.sparsify_interface(p, eps, mode, scaled_now)


def merge_level(state, lev):
    return state.merge_level(lev)


# ==================================================================== driver


def factorize(A, tree=None, eps=1e-3, *, levels=None, sparsify=True,
              scaling=True, scale_every=1, skip=2, sparsify_min=40,
              mode="scaled", row_heuristic="same-as-columns",
              equilibrate=True, observer=None):
    """Run the full multilevel factorization.

    Parameters
    ----------
    A : SparseMat (square)
    tree : ClusterTree, optional — built algebraically when omitted.
    eps : drop tolerance (0 disables dropping; with sparsify=False the
        result is an exact nested-dissection Householder QR).
    levels : level count when the tree is built here.
    sparsify, scaling, scale_every, skip : interface compression controls;
        sparsification starts once `skip` levels have been factored and
        scaling runs on every `scale_every`-th sparsified level.
    sparsify_min : fragments narrower than this stay untouched (no scaling
        or rotation). Small fragments are essentially full-rank, and any
        orthogonal transform of an uncompressed fragment mixes its rows,
        destroying the row zero structure that keeps later-level panel
        fills local — so transforming them costs much and saves nothing.
    mode : 'scaled' | 'unscaled' | 'variant1' | 'variant2' — what block is
        compressed and whether identity-diagonal retirement is used
        ('unscaled' never rescales and always takes the sigma-weighted
        route; the variants compress one-sided/Gram targets).
    row_heuristic : row-assignment rule for unsymmetric patterns.
    equilibrate : scale columns of A to unit norm first (recorded in W).
    observer : optional hooks (on_level, on_sparsify) for audits.

    Returns
    -------
    Factorization
    """
    if mode not in MODES:
        raise NestqrError(f"unknown sparsification mode {mode!r}")
    if mode == "unscaled":
        scaling = False
    if tree is None:
        L = int(levels) if levels else default_levels(A.ncols)
        tree = partition_algebraic(A, L)
    state = TrailingState(A, tree, row_heuristic, equilibrate)
    L = tree.L

    q_chain = []
    w_chain = list(state.w_prefix)
    stats = []
    n_sparsified_levels = 0
    by_level = {lev: sorted(c.id for c in tree.factor_at(lev))
                for lev in range(1, L + 1)}
    pending_by_level = {lev: sorted(c.id for c in tree.sparsify_at(lev))
                        for lev in range(1, L + 1)}

    for lev in range(L, 0, -1):
        st = {"level": lev,
              "cols_before": state.total_cols(),
              "n_factored": 0, "factored_cols": 0,
              "n_scaled": 0, "n_sparsified": 0, "fine_retired": 0,
              "dropped_max": 0.0,
              "iface_q1": 0.0, "iface_q2": 0.0, "iface_q3": 0.0,
              "iface_max": 0, "cols_after": 0,
              "trailing_nnz": 0, "trailing_blocks": 0,
              "t_factor": 0.0, "t_scale": 0.0,
              "t_sparsify": 0.0, "t_merge": 0.0}

        t0 = time.perf_counter()
        for s in by_level[lev]:
            st["factored_cols"] += len(state.cols_of[s])
            rec = state.factor_interior(s)
            st["n_factored"] += 1
            if rec is not None:
                q_chain.append(rec)
                w_chain.append(rec)
        st["t_factor"] = time.perf_counter() - t0

        run_sparsify = (sparsify and (L - lev + 1) > skip and lev >= 2
                        and pending_by_level[lev])
        if run_sparsify:
            n_sparsified_levels += 1
            do_scale = (scaling
                        and (n_sparsified_levels - 1) % scale_every == 0)
            todo = [p for p in pending_by_level[lev]
                    if len(state.cols_of[p]) >= sparsify_min]
            if do_scale:
                t0 = time.perf_counter()
                for p in todo:
                    rec = state.scale_interface(p)
                    if rec is not None:
                        q_chain.append(rec)
                        w_chain.append(rec)
                        st["n_scaled"] += 1
                st["t_scale"] = time.perf_counter() - t0
            on_sp = getattr(observer, "on_sparsify", None)
            t0 = time.perf_counter()
            for p in todo:
                before = len(state.cols_of[p])
                if on_sp is not None:
                    on_sp(state, p, "before")
                rec, dropped = state.sparsify_interface(
                    p, eps, mode, scaled_now=do_scale)
                if on_sp is not None:
                    on_sp(state, p, "after")
                if rec is not None:
                    q_chain.append(rec)
                    w_chain.append(rec)
                    st["n_sparsified"] += 1
                    st["fine_retired"] += before - len(state.cols_of[p])
                    st["dropped_max"] = max(st["dropped_max"], dropped)
            st["t_sparsify"] = time.perf_counter() - t0

        iface_sizes = [len(state.cols_of[p]) for p in pending_by_level[lev]]
        if iface_sizes:
            q1, q2, q3 = np.percentile(iface_sizes, [25, 50, 75])
            st["iface_q1"], st["iface_q2"], st["iface_q3"] = \
                float(q1), float(q2), float(q3)
            st["iface_max"] = int(max(iface_sizes))
        st["cols_after"] = state.total_cols()
        st["trailing_nnz"] = state.block_nnz()
        st["trailing_blocks"] = len(state.trailing)

        on_lv = getattr(observer, "on_level", None)
        if on_lv is not None:
            on_lv(state, lev, st)

        if lev >= 2:
            t0 = time.perf_counter()
            state.merge_level(lev)
            st["t_merge"] = time.perf_counter() - t0
        stats.append(st)

    if (state.row_of_col < 0).any():
        missing = int(np.count_nonzero(state.row_of_col < 0))
        raise NestqrError(f"{missing} columns were never factored "
                          f"(inconsistent tree?)")
    q_chain.append(Permutation(state.row_of_col))

    options = {"eps": eps, "mode": mode, "sparsify": sparsify,
               "scaling": scaling, "scale_every": scale_every, "skip": skip,
               "sparsify_min": sparsify_min, "row_heuristic": row_heuristic,
               "equilibrate": equilibrate, "levels": L}
    return Factorization(A, tree, q_chain, w_chain, state.row_of_col,
                         stats, options)


# ========================================================== symbolic audits


def coupled_cluster_pairs(A, tree):
    """Symbolic Gram-coupling audit of the exact (drop-free) elimination.

    Mirrors the driver — same ordering, clique fill at each elimination,
    set unions at merges, no sparsification — and records which pairs of
    depth-L clusters ever become coupled in the Gram (AᵀA) sense: sharing
    a structurally nonzero row block, or meeting in one factored pivot
    row. Cluster pairs never coupled ("well separated") must carry only
    O(eps²) weight in the computed factorization's Gram matrix.

    Returns
    -------
    (coupled, leaf_ids) : (bool ndarray nl×nl, list of depth-L cluster ids)
    """
    leaves = tree.leaf_clusters()
    leaf_ids = [c.id for c in leaves]
    idx = {cid: k for k, cid in enumerate(leaf_ids)}
    nl = len(leaf_ids)
    coupled = np.eye(nl, dtype=bool)

    col_owner = np.empty(tree.N, np.int64)
    row_owner = np.empty(tree.N, np.int64)
    for c in leaves:
        col_owner[c.cols] = c.id
        row_owner[c.rows if c.rows is not None else c.cols] = c.id

    r, cc, _ = A.to_triplets()
    pattern = set(zip(row_owner[r].tolist(), col_owner[cc].tolist()))
    roots = {cid: {idx[cid]} for cid in leaf_ids}

    def mark_clique(col_ids):
        members = sorted(set().union(*(roots[c] for c in col_ids)))
        for a in members:
            coupled[a, members] = True

    def mark_shared_rows(row_index):
        for r_cl, cols in row_index.items():
            if cols:
                mark_clique(sorted(cols))

    row_index = {}
    col_index = {}

    def rebuild_indexes():
        row_index.clear()
        col_index.clear()
        for (i, j) in pattern:
            row_index.setdefault(i, set()).add(j)
            col_index.setdefault(j, set()).add(i)

    rebuild_indexes()
    mark_shared_rows(row_index)

    for lev in range(tree.L, 0, -1):
        for c in tree.factor_at(lev):
            s = c.id
            row_cl = {s} | col_index.get(s, set())
            cols_t = set().union(*(row_index.get(r_, set())
                                   for r_ in row_cl)) - {s}
            mark_clique(sorted({s} | cols_t))       # the factored pivot rows
            for r_ in row_cl:
                for c_ in list(row_index.get(r_, set())):
                    pattern.discard((r_, c_))
            for r_ in row_cl - {s}:
                for c_ in cols_t:
                    pattern.add((r_, c_))
            pattern = {(i, j) for (i, j) in pattern if i != s and j != s}
            rebuild_indexes()
            mark_shared_rows(row_index)
        if lev >= 2:
            parent_of = {}
            for P in tree.active_at(lev - 1):
                for k in P.children:
                    parent_of[k] = P.id
            pattern = {(parent_of[i], parent_of[j]) for (i, j) in pattern}
            new_roots = {}
            for P in tree.active_at(lev - 1):
                acc = set()
                for k in P.children:
                    acc |= roots[k]
                new_roots[P.id] = acc
            roots = new_roots
            rebuild_indexes()
            mark_shared_rows(row_index)
    return coupled, leaf_ids


def symbolic_fill_levels(A, tree):
    """Per-level block pattern of the exact (drop-free) elimination.

    Returns {level: set of (row cid, col cid)} — the pattern right before
    that level's clusters are factored; used to audit that the numeric
    driver creates fill only where the symbolic elimination predicts it.
    """
    leaves = tree.leaf_clusters()
    col_owner = np.empty(tree.N, np.int64)
    row_owner = np.empty(tree.N, np.int64)
    for c in leaves:
        col_owner[c.cols] = c.id
        row_owner[c.rows if c.rows is not None else c.cols] = c.id
    r, cc, _ = A.to_triplets()
    pattern = set(zip(row_owner[r].tolist(), col_owner[cc].tolist()))

    out = {}
    for lev in range(tree.L, 0, -1):
        row_index, col_index = {}, {}
        for (i, j) in pattern:
            row_index.setdefault(i, set()).add(j)
            col_index.setdefault(j, set()).add(i)
        for c in tree.factor_at(lev):
            s = c.id
            row_cl = {s} | col_index.get(s, set())
            cols_t = set().union(*(row_index.get(r_, set())
                                   for r_ in row_cl)) - {s}
            for r_ in row_cl - {s}:
                for c_ in cols_t:
                    pattern.add((r_, c_))
                    row_index.setdefault(r_, set()).add(c_)
                    col_index.setdefault(c_, set()).add(r_)
            pattern = {(i, j) for (i, j) in pattern if i != s and j != s}
            for r_ in list(row_index):
                row_index[r_].discard(s)
            for c_ in list(col_index):
                col_index[c_].discard(s)
            col_index.pop(s, None)
            row_index.pop(s, None)
        out[lev] = set(pattern)      # post-factor, pre-merge snapshot
        if lev >= 2:
            parent_of = {}
            for P in tree.active_at(lev - 1):
                for k in P.children:
                    parent_of[k] = P.id
            pattern = {(parent_of[i], parent_of[j]) for (i, j) in pattern}
    return out
