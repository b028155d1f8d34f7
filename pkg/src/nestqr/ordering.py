"""Modified nested-dissection hierarchy for the sparsified QR factorization.

The domain is cut recursively, level-synchronously, into interiors and
two-wide separators, where "width" is measured in the pattern of A^T A:
removing a separator must leave no A^T A coupling between the two sibling
interiors (QR fill follows distance-1 AND distance-2 grid neighbors, so a
one-plane grid separator would not suffice).

Unlike plain nested dissection, each recursion step also splits the
*boundary* pieces of every shallower separator adjacent to the region
being cut (recursion on interior-plus-boundary). A separator born at
level l therefore exists as one whole cluster at depth l and as
progressively finer fragments at depths l+1..L; the factorization driver
walks levels L..1, merging fragments one depth up after each level.

Clusters span both sides of their separator; the factorization keeps
fill local despite that by gathering only the rows of a cluster that
actually touch the columns being eliminated (see the factor module).

Two cutters share the construction engine:

* geometric — regular grids; cuts are coordinate planes {m, m+1} across
  the longest box axis; fragments stay boxes.
* algebraic — any square sparse matrix; cuts are single BFS layers of the
  symbolic A^T A graph (a layer is a vertex separator of that graph);
  fragments split by adjacency to the two sides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NestqrError, PartitionError, StructurallySingularError

KIND_INTERIOR = "interior"
KIND_INTERFACE = "interface"


@dataclass
class Cluster:
    """One node set of the hierarchy at one depth.

    Interiors live only at depth L. A separator contributes one cluster
    per depth d in [level, L]; the depth-`level` cluster is the whole
    separator (factored at that level), deeper ones are the interface
    fragments that get sparsified and later merged into their parent.
    """

    id: int
    kind: str
    level: int
    depth: int
    sep: int
    cols: np.ndarray
    rows: np.ndarray | None = None
    parent: int = -1
    children: list = field(default_factory=list)
    neighbors: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.cols)


class ClusterTree:
    """Container for the cluster hierarchy of one matrix.

    `depth_ids[d]` lists the clusters active while the driver processes
    level d: at d == L the leaf interiors plus the finest interface
    fragments, at d < L the whole separators born at d plus the pending
    fragments of shallower separators. `cuts` records, per separator,
    the column sets of the two sides it split (for partition audits).
    """

    def __init__(self, N, L, clusters, depth_ids, cuts=None, meta=None):
        self.N = N
        self.L = L
        self.clusters = clusters
        self.depth_ids = depth_ids
        self.cuts = cuts or []
        self.meta = meta or {}

    def cluster(self, cid):
        return self.clusters[cid]

    def active_at(self, depth):
        """Clusters forming the live partition while level `depth` runs."""
        return [self.clusters[i] for i in self.depth_ids[depth]]

    def factor_at(self, level):
        """Clusters factored at `level`: leaf interiors (level L) or the
        whole separators born at that level."""
        return [c for c in self.active_at(level) if c.level == level]

    def sparsify_at(self, level):
        """Interface fragments still pending at `level` (factored later)."""
        return [c for c in self.active_at(level) if c.level < level]

    def leaf_clusters(self):
        return self.active_at(self.L)

    # ------------------------------------------------------------- checks

    def _expected_cols_at(self, d):
        """Columns that are still unfactored when level d is processed."""
        live = np.ones(self.N, bool)
        if d < self.L:
            for c in self.leaf_clusters():
                if c.kind == KIND_INTERIOR:
                    live[c.cols] = False
            for lev in range(d + 1, self.L):
                for c in self.factor_at(lev):
                    live[c.cols] = False
        return live

    def check_column_partition(self):
        for d in range(1, self.L + 1):
            live = self._expected_cols_at(d)
            seen = np.zeros(self.N, np.int64)
            for c in self.active_at(d):
                seen[c.cols] += 1
            if not ((seen[live] == 1).all() and (seen[~live] == 0).all()):
                raise PartitionError(
                    f"depth-{d} clusters do not partition the unfactored columns")

    def check_row_partition(self):
        for d in range(1, self.L + 1):
            seen = np.zeros(self.N, np.int64)
            for c in self.active_at(d):
                if c.rows is None:
                    raise PartitionError(f"cluster {c.id} has no rows")
                if len(c.rows) != len(c.cols):
                    raise PartitionError(
                        f"cluster {c.id}: |rows|={len(c.rows)} != |cols|={len(c.cols)}")
                seen[c.rows] += 1
            if (seen > 1).any():
                raise PartitionError(f"depth-{d} row sets overlap")

    # -------------------------------------------------------- serialization

    def to_json(self, path):
        obj = {
            "N": self.N,
            "L": self.L,
            "meta": self.meta,
            "depth_ids": {str(d): ids for d, ids in self.depth_ids.items()},
            "cuts": [
                {"sep": s, "level": lvl,
                 "left": l.tolist(), "right": r.tolist()}
                for s, lvl, l, r in self.cuts
            ],
            "clusters": [
                {
                    "id": c.id, "kind": c.kind, "level": c.level,
                    "depth": c.depth, "sep": c.sep,
                    "cols": c.cols.tolist(),
                    "rows": None if c.rows is None else c.rows.tolist(),
                    "parent": c.parent, "children": list(c.children),
                    "neighbors": list(c.neighbors),
                }
                for c in self.clusters
            ],
        }
        with open(path, "w") as f:
            json.dump(obj, f)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            obj = json.load(f)
        clusters = [
            Cluster(
                id=c["id"], kind=c["kind"], level=c["level"], depth=c["depth"],
                sep=c["sep"], cols=np.asarray(c["cols"], np.int64),
                rows=None if c["rows"] is None else np.asarray(c["rows"], np.int64),
                parent=c["parent"], children=list(c["children"]),
                neighbors=list(c["neighbors"]),
            )
            for c in obj["clusters"]
        ]
        depth_ids = {int(d): ids for d, ids in obj["depth_ids"].items()}
        cuts = [(e["sep"], e["level"],
                 np.asarray(e["left"], np.int64),
                 np.asarray(e["right"], np.int64)) for e in obj.get("cuts", [])]
        return cls(obj["N"], obj["L"], clusters, depth_ids, cuts, obj.get("meta"))


# ===================================================================== engine


class _Region:
    __slots__ = ("nodes", "ctx")

    def __init__(self, nodes, ctx):
        self.nodes = nodes
        self.ctx = ctx


class _Piece:
    __slots__ = ("sep", "nodes", "payload")

    def __init__(self, sep, nodes, payload):
        self.sep = sep
        self.nodes = nodes
        self.payload = payload


def _build_tree(N, L, cutter, meta):
    """Level-synchronous construction shared by both cutters."""
    if L < 1:
        raise PartitionError(f"level count must be >= 1, got {L}")
    regions = [_Region(np.arange(N, dtype=np.int64), cutter.root_ctx())]
    pieces = []                     # current fragments of all separators
    sep_level = {}                  # sep id -> birth level
    snapshots = {}                  # (sep, depth) -> list of node arrays
    cut_record = []                 # (sep, level, left cols, right cols)
    next_sep = 0

    def snapshot(depth):
        by_sep = {}
        for p in pieces:
            by_sep.setdefault(p.sep, []).append(p.nodes.copy())
        for s, arrs in by_sep.items():
            snapshots[(s, depth)] = arrs

    for t in range(1, L):
        new_regions = []
        cut_infos = []
        for R in regions:
            sep_nodes, left, right, lctx, rctx, cut_ctx = cutter.cut(R)
            if len(left) == 0 or len(right) == 0:
                raise PartitionError(
                    f"level count {L} too deep: a depth-{t + 1} interior would "
                    f"be empty (region of {len(R.nodes)} nodes at depth {t})")
            new_regions.append(_Region(left, lctx))
            new_regions.append(_Region(right, rctx))
            cut_infos.append((R, cut_ctx))
            sid = -1
            if len(sep_nodes):
                sid = next_sep
                sep_level[sid] = t
                next_sep += 1
                pieces.append(_Piece(sid, sep_nodes,
                                     cutter.whole_payload(sep_nodes, cut_ctx)))
            cut_record.append((sid, t, left.copy(), right.copy()))

        # split every pre-existing fragment adjacent to this round of cuts
        cutter.begin_split(cut_infos)
        refined = []
        for p in pieces:
            if sep_level[p.sep] == t:
                refined.append(p)      # separators born this round stay whole
                continue
            parts = [p]
            for cut_ctx in cutter.adjacent_cuts(p, cut_infos):
                nxt = []
                for q in parts:
                    subs = cutter.classify(q, cut_ctx)
                    if len(subs) == 1:
                        nxt.append(q)
                    else:
                        nxt.extend(_Piece(q.sep, nodes, payload)
                                   for nodes, payload in subs)
                parts = nxt
            refined.extend(parts)
        pieces = refined
        snapshot(t)
        regions = new_regions

    snapshot(L)     # no cuts happen at depth L, fragments carry over
    return _assemble(N, L, regions, sep_level, snapshots, cut_record, meta)


def _assemble(N, L, leaf_regions, sep_level, snapshots, cut_record, meta):
    clusters = []
    depth_ids = {d: [] for d in range(1, L + 1)}

    def add(kind, level, depth, sep, cols):
        cid = len(clusters)
        clusters.append(Cluster(id=cid, kind=kind, level=level, depth=depth,
                                sep=sep, cols=np.sort(cols).astype(np.int64)))
        depth_ids[depth].append(cid)
        return cid

    for R in leaf_regions:
        add(KIND_INTERIOR, L, L, -1, R.nodes)

    owner = np.full(N, -1, np.int64)    # node -> cluster id at previous depth
    for s in sorted(sep_level):
        lvl = sep_level[s]
        prev_ids = []
        for d in range(lvl, L + 1):
            arrs = snapshots.get((s, d), [])
            cur_ids = []
            for nodes in arrs:
                cid = add(KIND_INTERFACE, lvl, d, s, nodes)
                cur_ids.append(cid)
            if prev_ids:
                for pcid in prev_ids:
                    owner[clusters[pcid].cols] = pcid
                for cid in cur_ids:
                    pcid = int(owner[clusters[cid].cols[0]])
                    clusters[cid].parent = pcid
                    clusters[pcid].children.append(cid)
            prev_ids = cur_ids

    tree = ClusterTree(N, L, clusters, depth_ids, cut_record, meta)
    tree.check_column_partition()
    return tree


# ================================================================= geometric


class _GeoCutter:
    """Coordinate-plane cuts on a regular grid; clusters stay boxes."""

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        self.nd = len(self.dims)
        self.strides = np.array(
            [int(np.prod(self.dims[a + 1:])) for a in range(self.nd)],
            dtype=np.int64)

    def root_ctx(self):
        lo = np.zeros(self.nd, np.int64)
        hi = np.array(self.dims, np.int64) - 1
        return (lo, hi)

    def _box_nodes(self, lo, hi):
        if (hi < lo).any():
            return np.empty(0, np.int64)
        ranges = [np.arange(lo[a], hi[a] + 1, dtype=np.int64)
                  for a in range(self.nd)]
        grids = np.meshgrid(*ranges, indexing="ij")
        flat = sum(g.ravel() * s for g, s in zip(grids, self.strides))
        return flat.astype(np.int64)

    def cut(self, region):
        lo, hi = region.ctx
        ext = hi - lo + 1
        axis = int(np.argmax(ext))
        if ext[axis] < 4:
            raise PartitionError(
                f"grid box extent {tuple(int(e) for e in ext)} too small "
                f"for a two-plane cut")
        m = int(lo[axis] + (ext[axis] - 1) // 2)
        slo, shi = lo.copy(), hi.copy()
        slo[axis], shi[axis] = m, m + 1
        llo, lhi = lo.copy(), hi.copy()
        lhi[axis] = m - 1
        rlo, rhi = lo.copy(), hi.copy()
        rlo[axis] = m + 2
        sep_nodes = self._box_nodes(slo, shi)
        left = self._box_nodes(llo, lhi)
        right = self._box_nodes(rlo, rhi)
        cut_ctx = (axis, m)
        self._sep_box = (slo, shi)
        return sep_nodes, left, right, (llo, lhi), (rlo, rhi), cut_ctx

    def whole_payload(self, nodes, cut_ctx):
        return self._sep_box

    def begin_split(self, cut_infos):
        self._boxes = [(R.ctx[0], R.ctx[1]) for R, _ in cut_infos]

    def adjacent_cuts(self, piece, cut_infos):
        plo, phi = piece.payload
        out = []
        for (rlo, rhi), (_, ctx) in zip(self._boxes, cut_infos):
            gap = np.maximum(0, np.maximum(rlo - phi, plo - rhi))
            if int(gap.sum()) <= 2:
                out.append(ctx)
        return out

    def classify(self, piece, cut_ctx):
        axis, m = cut_ctx
        plo, phi = piece.payload
        coords = (piece.nodes // self.strides[axis]) % self.dims[axis]
        out = []
        for blo, bhi in [(plo[axis], m - 1), (m, m + 1), (m + 2, phi[axis])]:
            blo2, bhi2 = max(blo, int(plo[axis])), min(bhi, int(phi[axis]))
            if blo2 > bhi2:
                continue
            mask = (coords >= blo2) & (coords <= bhi2)
            if not mask.any():
                continue
            qlo, qhi = plo.copy(), phi.copy()
            qlo[axis], qhi[axis] = blo2, bhi2
            out.append((piece.nodes[mask], (qlo, qhi)))
        return out


def partition_geometric(dims, L):
    """Modified nested dissection of a regular grid.

    Parameters
    ----------
    dims : (nx,), (nx, ny) or (nx, ny, nz)
        Grid extents; node indices follow C-order raveling, matching the
        generated problem matrices.
    L : int
        Level count; leaves at level L, root separator at level 1.

    Returns
    -------
    ClusterTree
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise NestqrError(f"bad grid dims {dims}")
    N = int(np.prod(dims))
    cutter = _GeoCutter(dims)
    return _build_tree(N, int(L), cutter,
                       meta={"kind": "geometric", "dims": list(dims)})


# ================================================================= algebraic


def symbolic_ata(A, degree_cap_factor=10.0):
    """Boolean pattern of A^T A, skipping overly dense rows of A.

    Rows with more than degree_cap_factor * (average nnz/row) entries are
    excluded from the pattern products (they would densify it); their
    couplings are repaired at bisection time.

    Returns
    -------
    (csr bool pattern with empty diagonal, list of dense-row column arrays)
    """
    S = A.to_scipy().tocsr() if hasattr(A, "to_scipy") else sp.csr_matrix(A)
    nnz_per_row = np.diff(S.indptr)
    if np.isfinite(degree_cap_factor):
        cap = max(8.0, degree_cap_factor * max(1.0, float(nnz_per_row.mean())))
        dense_rows = np.nonzero(nnz_per_row > cap)[0]
    else:
        dense_rows = np.empty(0, np.int64)
    overflow = [S.indices[S.indptr[r]:S.indptr[r + 1]].astype(np.int64)
                for r in dense_rows]
    W = (S != 0).astype(np.int64)
    if len(dense_rows):
        keep = np.ones(S.shape[0], bool)
        keep[dense_rows] = False
        W = W[keep]
    G = (W.T @ W).tocsr()
    G.setdiag(0)
    G.eliminate_zeros()
    return G.astype(bool), overflow


class _AlgCutter:
    """BFS-layer vertex bisection of the symbolic A^T A graph."""

    def __init__(self, G, overflow):
        self.G = G
        self.n = G.shape[0]
        self.overflow = overflow

    def root_ctx(self):
        return None

    def _neighbors(self, v):
        return self.G.indices[self.G.indptr[v]:self.G.indptr[v + 1]]

    def _neighbors_many(self, vs):
        if len(vs) == 0:
            return np.empty(0, np.int64)
        return np.concatenate([self._neighbors(int(v)) for v in vs])

    def _bfs_layers(self, start, inset):
        layer = np.array([start], dtype=np.int64)
        seen = np.zeros(self.n, bool)
        seen[start] = True
        layers = [layer]
        while True:
            nbr = np.unique(self._neighbors_many(layer))
            nxt = nbr[inset[nbr] & ~seen[nbr]] if len(nbr) else nbr
            if len(nxt) == 0:
                break
            seen[nxt] = True
            layers.append(nxt)
            layer = nxt
        return layers

    def cut(self, region):
        nodes = np.sort(region.nodes)
        inset = np.zeros(self.n, bool)
        inset[nodes] = True

        # connected components partition independently (empty separator)
        comps = []
        remaining = inset.copy()
        while remaining.any():
            start = int(np.argmax(remaining))
            layers = self._bfs_layers(start, remaining)
            comp = np.sort(np.concatenate(layers))
            remaining[comp] = False
            comps.append(comp)

        if len(comps) > 1:
            comps.sort(key=lambda c: (-len(c), int(c[0])))
            sides, sizes = ([], []), [0, 0]
            for c in comps:
                k = 0 if sizes[0] <= sizes[1] else 1
                sides[k].append(c)
                sizes[k] += len(c)
            left = np.sort(np.concatenate(sides[0]))
            right = np.sort(np.concatenate(sides[1])) if sides[1] else \
                np.empty(0, np.int64)
            sep = np.empty(0, np.int64)
        else:
            # pseudo-peripheral start, then the best-balanced layer cut
            start = int(nodes[0])
            for _ in range(2):
                layers = self._bfs_layers(start, inset)
                start = int(np.min(layers[-1]))
            layers = self._bfs_layers(start, inset)
            if len(layers) < 3:
                # not separable at this size: report via empty side
                sep = np.empty(0, np.int64)
                left = layers[0]
                right = np.sort(np.concatenate(layers[1:])) \
                    if len(layers) > 1 else np.empty(0, np.int64)
                if len(layers) == 2:
                    # single edge-connected blob: the far layer separates it
                    sep = layers[1]
                    right = np.empty(0, np.int64)
            else:
                sizes = np.cumsum([len(l) for l in layers])
                total = len(nodes)
                best, best_bal = 1, None
                for c in range(1, len(layers) - 1):
                    bal = abs(sizes[c - 1] - total / 2.0) + \
                        abs((total - sizes[c]) - total / 2.0)
                    if best_bal is None or bal < best_bal:
                        best, best_bal = c, bal
                sep = np.sort(layers[best])
                left = np.sort(np.concatenate(layers[:best]))
                right = np.sort(np.concatenate(layers[best + 1:]))

        left, sep, right = self._repair_overflow(left, sep, right)
        cut_ctx = (left, sep, right)
        return sep, left, right, None, None, cut_ctx

    def whole_payload(self, nodes, cut_ctx):
        return None

    def _repair_overflow(self, left, sep, right):
        """Keep the partition property in the presence of skipped dense rows:
        if a dense row couples both sides, move its smaller-side columns
        into the separator."""
        if not self.overflow:
            return left, sep, right
        lset = set(left.tolist())
        rset = set(right.tolist())
        moved = set()
        for cols in self.overflow:
            cl = [c for c in cols.tolist() if c in lset and c not in moved]
            cr = [c for c in cols.tolist() if c in rset and c not in moved]
            if cl and cr:
                moved.update(cl if len(cl) <= len(cr) else cr)
        if moved:
            left = np.array(sorted(lset - moved), np.int64)
            right = np.array(sorted(rset - moved), np.int64)
            sep = np.sort(np.concatenate(
                [sep, np.fromiter(moved, np.int64, len(moved))]))
        return left, sep, right

    def begin_split(self, cut_infos):
        self._node_region = np.full(self.n, -1, np.int64)
        for k, (R, _) in enumerate(cut_infos):
            self._node_region[R.nodes] = k

    def adjacent_cuts(self, piece, cut_infos):
        rids = self._node_region[self._neighbors_many(piece.nodes)]
        rids = np.unique(rids[rids >= 0])
        return [cut_infos[int(k)][1] for k in rids]

    def classify(self, piece, cut_ctx):
        left, sep, right = cut_ctx
        side = np.zeros(self.n, np.int8)
        side[left] = 1
        side[sep] = 2
        side[right] = 3
        parts = {0: [], 1: [], 2: [], 3: []}
        for v in piece.nodes.tolist():
            s = side[self._neighbors(v)]
            has_l = bool((s == 1).any())
            has_r = bool((s == 3).any())
            if has_l and not has_r:
                parts[1].append(v)
            elif has_r and not has_l:
                parts[3].append(v)
            elif has_l or has_r or bool((s == 2).any()):
                parts[2].append(v)      # band: sees both sides or only the cut
            else:
                parts[0].append(v)      # far: untouched by this cut
        return [(np.array(sorted(p), np.int64), None)
                for p in parts.values() if p]


def partition_algebraic(A, L):
    """Modified nested dissection of a general square sparse matrix via
    recursive BFS-layer bisection of the symbolic A^T A pattern.

    Returns
    -------
    ClusterTree
    """
    if A.nrows != A.ncols:
        raise NestqrError(f"matrix must be square, got {A.shape}")
    G, overflow = symbolic_ata(A)
    return _build_tree(A.nrows, int(L), _AlgCutter(G, overflow),
                       meta={"kind": "algebraic"})


# ================================================================ assign_rows


def _greedy_matching(A):
    """Perfect row-column matching: greedy on |A_ij| descending, completed
    with augmenting paths on the pattern."""
    S = A.to_scipy().tocsr()
    n = A.nrows
    C = S.tocoo()
    order = np.lexsort((C.col, C.row, -np.abs(C.data)))
    row_of_col = np.full(n, -1, np.int64)
    col_of_row = np.full(n, -1, np.int64)
    for k in order:
        r, c = int(C.row[k]), int(C.col[k])
        if col_of_row[r] < 0 and row_of_col[c] < 0:
            col_of_row[r] = c
            row_of_col[c] = r

    indptr, indices = S.indptr, S.indices

    def augment(r0):
        visited = np.zeros(n, bool)
        stack = [(r0, 0)]
        parent_col = {}
        while stack:
            r, pos = stack[-1]
            cols = indices[indptr[r]:indptr[r + 1]]
            advanced = False
            while pos < len(cols):
                c = int(cols[pos])
                pos += 1
                if visited[c]:
                    continue
                visited[c] = True
                parent_col[c] = r
                stack[-1] = (r, pos)
                if row_of_col[c] < 0:
                    while True:    # unwind the alternating path
                        r2 = parent_col[c]
                        nxt = int(col_of_row[r2])
                        col_of_row[r2] = c
                        row_of_col[c] = r2
                        if r2 == r0:
                            return True
                        c = nxt
                stack.append((int(row_of_col[c]), 0))
                advanced = True
                break
            if not advanced:
                stack.pop()
        return False

    for r in range(n):
        if col_of_row[r] < 0 and not augment(r):
            matched = int((col_of_row >= 0).sum())
            raise StructurallySingularError(matched, n)
    return col_of_row


def assign_rows(A, tree, heuristic="same-as-columns"):
    """Assign every matrix row to one depth-L cluster and propagate the
    row sets up the merge hierarchy so all diagonal blocks are square.

    heuristic:
      same-as-columns  row i joins the cluster owning column i
      max-weight       row r joins argmax_c sum_{j in c} A_rj^2, then
                       over-full clusters evict their lightest rows
      matching         row r joins the cluster of its matched column
                       (greedy large-entry matching + augmenting paths)

    Returns the per-row leaf-cluster index array.
    """
    leaves = tree.leaf_clusters()
    nleaf = len(leaves)
    cmap = np.full(tree.N, -1, np.int64)
    for k, c in enumerate(leaves):
        cmap[c.cols] = k
    if (cmap < 0).any():
        raise PartitionError("leaf clusters do not cover all columns")

    if heuristic in ("same-as-columns", "cols"):
        assign = cmap.copy()
    elif heuristic == "matching":
        col_of_row = _greedy_matching(A)
        assign = cmap[col_of_row]
    elif heuristic in ("max-weight", "maxweight"):
        assign = _assign_max_weight(A, tree, cmap, nleaf)
    else:
        raise NestqrError(f"unknown row heuristic {heuristic!r}")

    for k, c in enumerate(leaves):
        c.rows = np.sort(np.nonzero(assign == k)[0]).astype(np.int64)

    # propagate unions up the merge hierarchy
    for d in range(tree.L - 1, 0, -1):
        for c in tree.active_at(d):
            if not c.children:
                raise PartitionError(
                    f"cluster {c.id} at depth {d} has no children to merge")
            c.rows = np.sort(np.concatenate(
                [tree.cluster(ch).rows for ch in c.children]))
    tree.check_row_partition()
    return assign


def _assign_max_weight(A, tree, cmap, nleaf):
    S = A.to_scipy().tocsr()
    n = A.nrows
    indptr, indices, data = S.indptr, S.indices, S.data
    weights = [dict() for _ in range(n)]
    for r in range(n):
        w = weights[r]
        for t in range(indptr[r], indptr[r + 1]):
            k = int(cmap[indices[t]])
            w[k] = w.get(k, 0.0) + float(data[t]) ** 2
    assign = np.empty(n, np.int64)
    for r in range(n):
        w = weights[r]
        # highest weight wins; ties and empty rows fall to the lowest id
        assign[r] = min((-wt, k) for k, wt in w.items())[1] if w else 0

    capacity = np.zeros(nleaf, np.int64)
    for k, c in enumerate(tree.leaf_clusters()):
        capacity[k] = len(c.cols)
    counts = np.bincount(assign, minlength=nleaf)

    # eviction rebalancing to |rows| == |cols| per cluster
    for _ in range(nleaf + 1):
        over = np.nonzero(counts > capacity)[0]
        if len(over) == 0:
            break
        k = int(over[0])
        members = sorted(np.nonzero(assign == k)[0].tolist(),
                         key=lambda r: (weights[r].get(k, 0.0), r))
        n_evict = int(counts[k] - capacity[k])
        for r in members[:n_evict]:
            cands = sorted(((wt, kk) for kk, wt in weights[r].items()
                            if kk != k and counts[kk] < capacity[kk]),
                           key=lambda t: (-t[0], t[1]))
            if cands:
                tgt = int(cands[0][1])
            else:
                tgt = int(np.nonzero(counts < capacity)[0][0])
            assign[r] = tgt
            counts[k] -= 1
            counts[tgt] += 1
    if (counts != capacity).any():
        raise PartitionError("row rebalancing failed to reach square blocks")
    return assign


# ============================================================= neighbor lists


def neighbor_lists(A, tree):
    """Fill every cluster's neighbor list: clusters at the same depth with a
    structurally nonzero block in the symbolic A^T A pattern (symmetric)."""
    G, _ = symbolic_ata(A, degree_cap_factor=np.inf)
    Gc = G.tocoo()
    for d in range(1, tree.L + 1):
        ids = tree.depth_ids[d]
        cmap = np.full(tree.N, -1, np.int64)
        for cid in ids:
            cmap[tree.cluster(cid).cols] = cid
        ci = cmap[Gc.row]
        cj = cmap[Gc.col]
        mask = (ci != cj) & (ci >= 0) & (cj >= 0)
        pairs = np.unique(np.stack([ci[mask], cj[mask]], axis=1), axis=0)
        nbrs = {cid: set() for cid in ids}
        for a, b in pairs:
            nbrs[int(a)].add(int(b))
            nbrs[int(b)].add(int(a))
        for cid in ids:
            tree.cluster(cid).neighbors = sorted(nbrs[cid])


def check_partition_property(A, tree):
    """Assert no symbolic A^T A coupling between the two sides of any cut."""
    G, _ = symbolic_ata(A, degree_cap_factor=np.inf)
    for sid, lvl, left, right in tree.cuts:
        if len(left) == 0 or len(right) == 0:
            continue
        inright = np.zeros(tree.N, bool)
        inright[right] = True
        for v in left.tolist():
            nbr = G.indices[G.indptr[v]:G.indptr[v + 1]]
            if inright[nbr].any():
                w = int(nbr[np.argmax(inright[nbr])])
                raise PartitionError(
                    f"cut of separator {sid} (level {lvl}) leaves an A^T A "
                    f"edge between columns {v} and {w}")
