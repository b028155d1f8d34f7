"""Sparse storage, block gather/scatter, Matrix Market I/O, equilibration."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nestqr.errors import FormatError, NestqrError
from nestqr.sparse import (
    SparseMat,
    equilibrate_columns,
    gather_block,
    read_matrix_market,
    scatter_block,
    to_triplet_csv,
    write_matrix_market,
)


def random_sparse(rng, m, n, density=0.3):
    mask = rng.random((m, n)) < density
    D = np.where(mask, rng.standard_normal((m, n)), 0.0)
    return SparseMat.from_dense(D), D


# ---------------------------------------------------------------- storage

class TestSparseMat:
    def test_from_triplets_sums_duplicates(self):
        # oracle: dense accumulation of the triplet list
        rows = [0, 1, 1, 2, 1]
        cols = [0, 1, 1, 2, 0]
        vals = [1.0, 0.5, 0.5, 3.0, -2.0]
        dense = np.zeros((3, 3))
        for r, c, v in zip(rows, cols, vals):
            dense[r, c] += v
        A = SparseMat.from_triplets(3, 3, rows, cols, vals)
        assert A.nnz == 4
        assert_allclose(A.to_dense(), dense)

    def test_row_indices_strictly_increasing_per_column(self):
        rng = np.random.default_rng(7)
        A, _ = random_sparse(rng, 20, 15)
        for j in range(A.ncols):
            seg = A.indices[A.indptr[j]:A.indptr[j + 1]]
            assert np.all(np.diff(seg) > 0)

    def test_compress_removes_explicit_zeros(self):
        A = SparseMat.from_triplets(2, 2, [0, 1, 0], [0, 1, 1], [1.0, 2.0, 0.0])
        assert A.nnz == 3
        B = A.compress()
        assert B.nnz == 2
        assert_allclose(B.to_dense(), A.to_dense())

    def test_matvec_matches_dense(self):
        rng = np.random.default_rng(3)
        A, D = random_sparse(rng, 12, 9)
        x = rng.standard_normal(9)
        assert_allclose(A @ x, D @ x, atol=1e-14)

    def test_identity(self):
        I = SparseMat.identity(4)
        assert_allclose(I.to_dense(), np.eye(4))

    def test_roundtrip_triplets(self):
        rng = np.random.default_rng(11)
        A, D = random_sparse(rng, 8, 8)
        r, c, v = A.to_triplets()
        B = SparseMat.from_triplets(8, 8, r, c, v)
        assert_allclose(B.to_dense(), D)


# ---------------------------------------------------------------- equilibrate

class TestEquilibrate:
    def test_diagonal(self):
        A = SparseMat.from_dense(np.diag([2.0, 4.0]))
        S, scale = equilibrate_columns(A)
        assert_allclose(S.to_dense(), np.eye(2))
        assert_allclose(scale, [2.0, 4.0])

    def test_single_column_3_4(self):
        # oracle: explicit norm computation, ||(3,4)|| = 5
        A = SparseMat.from_dense(np.array([[3.0], [4.0]]))
        S, scale = equilibrate_columns(A)
        assert_allclose(S.to_dense(), np.array([[0.6], [0.8]]))
        assert_allclose(scale, [5.0])

    def test_already_unit_norm_unchanged(self):
        D = np.array([[0.6, 0.0], [0.8, 1.0]])
        A = SparseMat.from_dense(D)
        S, scale = equilibrate_columns(A)
        assert_allclose(S.to_dense(), D)
        assert_allclose(scale, [1.0, 1.0])

    def test_zero_column_raises_naming_index(self):
        A = SparseMat.from_dense(np.array([[1.0, 0.0], [2.0, 0.0]]))
        with pytest.raises(NestqrError, match="column 1"):
            equilibrate_columns(A)

    def test_property_unit_norms(self):
        # invariant: max deviation of column 2-norms from 1 <= 1e-14
        rng = np.random.default_rng(5)
        for trial in range(20):
            m = int(rng.integers(2, 40))
            n = int(rng.integers(2, 40))
            D = rng.standard_normal((m, n))
            D[0, :] += 1.0  # guarantee no zero column
            S, scale = equilibrate_columns(SparseMat.from_dense(D))
            norms = np.sqrt((S.to_dense() ** 2).sum(axis=0))
            assert np.abs(norms - 1.0).max() <= 1e-14
            assert_allclose(S.to_dense() * scale, D, atol=1e-13)


# ---------------------------------------------------------------- gather/scatter

class TestGatherScatter:
    def test_gather_full_diag(self):
        A = SparseMat.from_dense(np.diag([1.0, 2.0]))
        B = gather_block(A, np.array([0, 1]), np.array([0, 1]))
        assert_allclose(B, [[1.0, 0.0], [0.0, 2.0]])

    def test_gather_empty_offdiag_block(self):
        A = SparseMat.from_dense(np.diag([1.0, 2.0, 3.0, 4.0]))
        B = gather_block(A, np.array([0, 1]), np.array([2, 3]))
        assert_allclose(B, np.zeros((2, 2)))

    def test_gather_arrow_matrix(self):
        # oracle: triplet scan of a 4x4 arrow matrix
        rows = [0, 0, 0, 0, 1, 2, 3, 1, 2, 3]
        cols = [0, 1, 2, 3, 0, 0, 0, 1, 2, 3]
        vals = [4.0, 1.0, 2.0, 3.0, 1.5, 2.5, 3.5, 5.0, 6.0, 7.0]
        A = SparseMat.from_triplets(4, 4, rows, cols, vals)
        sub_rows, sub_cols = np.array([0, 3]), np.array([1, 2])
        expected = np.zeros((2, 2))
        for r, c, v in zip(rows, cols, vals):
            if r in sub_rows and c in sub_cols:
                expected[list(sub_rows).index(r), list(sub_cols).index(c)] = v
        assert_allclose(gather_block(A, sub_rows, sub_cols), expected)
        assert_allclose(expected, [[1.0, 2.0], [0.0, 0.0]])

    def test_gather_out_of_range(self):
        A = SparseMat.identity(3)
        with pytest.raises(NestqrError):
            gather_block(A, np.array([0, 5]), np.array([0]))

    def test_scatter_zeros_empties_block(self):
        A = SparseMat.from_dense(np.ones((3, 3)))
        r, c = np.array([0, 1]), np.array([0, 1])
        scatter_block(A, r, c, np.zeros((2, 2)), drop_tol=0.0)
        A = A.compress()
        assert_allclose(gather_block(A, r, c), np.zeros((2, 2)))
        # entries outside the rectangle stay
        assert_allclose(gather_block(A, np.array([2]), np.array([2])), [[1.0]])

    def test_scatter_gather_roundtrip(self):
        rng = np.random.default_rng(2)
        A, _ = random_sparse(rng, 10, 10)
        r = np.array([1, 4, 7])
        c = np.array([0, 5])
        blk = rng.standard_normal((3, 2))
        scatter_block(A, r, c, blk, drop_tol=0.0)
        assert_allclose(gather_block(A, r, c), blk)

    def test_scatter_drop_tol_removes_tiny(self):
        # oracle: pattern diff — 1e-18 entry absent at drop_tol 1e-16
        A = SparseMat.from_dense(np.zeros((2, 2)))
        blk = np.array([[1e-18, 1.0], [2.0, 1e-18]])
        scatter_block(A, np.array([0, 1]), np.array([0, 1]), blk, drop_tol=1e-16)
        r, c, v = A.to_triplets()
        pattern = set(zip(r.tolist(), c.tolist()))
        assert pattern == {(0, 1), (1, 0)}

    def test_property_gather_scatter_identity(self):
        # invariant: gather∘scatter identity for drop_tol=0, 100 trials, dims <= 50
        rng = np.random.default_rng(99)
        for trial in range(100):
            m = int(rng.integers(1, 51))
            n = int(rng.integers(1, 51))
            A, D = random_sparse(rng, m, n, density=0.2)
            kr = int(rng.integers(1, m + 1))
            kc = int(rng.integers(1, n + 1))
            r = rng.choice(m, size=kr, replace=False)
            c = rng.choice(n, size=kc, replace=False)
            blk = rng.standard_normal((kr, kc))
            scatter_block(A, r, c, blk, drop_tol=0.0)
            assert_allclose(gather_block(A, r, c), blk)
            # and untouched entries preserved
            D2 = D.copy()
            D2[np.ix_(r, c)] = blk
            assert_allclose(A.to_dense(), D2)


# ---------------------------------------------------------------- matrix market

class TestMatrixMarket:
    def test_identity_3x3(self, tmp_path):
        p = tmp_path / "id.mtx"
        p.write_text(
            "%%MatrixMarket matrix coordinate real general\n"
            "3 3 3\n1 1 1.0\n2 2 1.0\n3 3 1.0\n"
        )
        A = read_matrix_market(p)
        assert A.nnz == 3
        assert_allclose(A.to_dense(), np.eye(3))

    def test_duplicates_summed(self, tmp_path):
        # oracle: dense accumulation — (1,1,0.5) twice -> 1.0
        p = tmp_path / "dup.mtx"
        p.write_text(
            "%%MatrixMarket matrix coordinate real general\n"
            "2 2 2\n1 1 0.5\n1 1 0.5\n"
        )
        A = read_matrix_market(p)
        assert_allclose(A.to_dense(), [[1.0, 0.0], [0.0, 0.0]])

    def test_empty_coordinate_section(self, tmp_path):
        p = tmp_path / "empty.mtx"
        p.write_text("%%MatrixMarket matrix coordinate real general\n2 2 0\n")
        A = read_matrix_market(p)
        assert A.shape == (2, 2)
        assert A.nnz == 0
        assert_allclose(A.to_dense(), np.zeros((2, 2)))

    def test_complex_rejected(self, tmp_path):
        p = tmp_path / "cx.mtx"
        p.write_text("%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1.0 2.0\n")
        with pytest.raises(FormatError):
            read_matrix_market(p)

    def test_pattern_rejected(self, tmp_path):
        p = tmp_path / "pat.mtx"
        p.write_text("%%MatrixMarket matrix coordinate pattern general\n1 1 1\n1 1\n")
        with pytest.raises(FormatError):
            read_matrix_market(p)

    def test_parse_error_reports_line(self, tmp_path):
        p = tmp_path / "bad.mtx"
        p.write_text(
            "%%MatrixMarket matrix coordinate real general\n"
            "2 2 2\n1 1 1.0\n1 oops 2.0\n"
        )
        with pytest.raises(FormatError, match="line 4"):
            read_matrix_market(p)

    def test_out_of_bounds_index(self, tmp_path):
        p = tmp_path / "oob.mtx"
        p.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n")
        with pytest.raises(FormatError):
            read_matrix_market(p)

    def test_roundtrip_write_read(self, tmp_path):
        # invariant: round-trip <= 1e-15 relative at 17 significant digits
        rng = np.random.default_rng(42)
        A, D = random_sparse(rng, 15, 12, density=0.4)
        p = tmp_path / "rt.mtx"
        write_matrix_market(A, p, comment="round trip")
        B = read_matrix_market(p)
        assert B.shape == A.shape
        mask = D != 0
        rel = np.abs(B.to_dense() - D)[mask] / np.abs(D[mask])
        assert rel.max() <= 1e-15

    def test_triplet_csv(self, tmp_path):
        A = SparseMat.from_dense(np.array([[1.0, 0.0], [0.0, 2.0]]))
        p = tmp_path / "a.csv"
        to_triplet_csv(A, p)
        lines = p.read_text().strip().splitlines()
        assert lines[0].startswith("row")
        assert len(lines) == 3
