"""Dense kernels: Householder panels, threshold pivoted QR, triangular solves.

Every test runs against both kernel backends via the `backend` fixture.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nestqr.errors import NestqrError, SingularPivotError
from nestqr.kernels import (
    apply_panel_left,
    backend_name,
    qr_house,
    rrqr_threshold,
    set_backend,
    spectral_norm,
    tri_solve,
)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    previous = backend_name()
    set_backend(request.param)
    yield request.param
    set_backend(previous)


# ---------------------------------------------------------------- qr_house

class TestQrHouse:
    def test_identity_block(self, backend):
        panel, R = qr_house(np.eye(3))
        assert_allclose(R, np.eye(3), atol=1e-15)
        C = np.arange(12.0).reshape(3, 4)
        assert_allclose(panel.apply(C), C, atol=1e-14)

    def test_column_3_4(self, backend):
        # oracle: ||(3,4)|| = 5; nonnegative-diagonal convention
        panel, R = qr_house(np.array([[3.0], [4.0]]))
        assert_allclose(R, [[5.0]], atol=1e-14)
        out = panel.apply(np.array([3.0, 4.0]), transpose=True)
        assert_allclose(out, [5.0, 0.0], atol=1e-14)

    def test_reconstruction_20x5(self, backend):
        # oracle: ||QR - B||_F / ||B||_F <= 1e-14
        rng = np.random.default_rng(1)
        B = rng.standard_normal((20, 5))
        panel, R = qr_house(B)
        QR = panel.apply(np.vstack([R, np.zeros((15, 5))]))
        assert np.linalg.norm(QR - B) / np.linalg.norm(B) <= 1e-14

    def test_r_diag_nonnegative(self, backend):
        rng = np.random.default_rng(2)
        for _ in range(10):
            B = rng.standard_normal((9, 6))
            _, R = qr_house(B)
            assert (np.diag(R) >= 0).all()
            assert_allclose(np.tril(R, -1), 0, atol=1e-15)

    def test_zero_column_tau_zero(self, backend):
        B = np.zeros((4, 1))
        panel, R = qr_house(B)
        assert panel.tau[0] == 0.0
        assert R[0, 0] == 0.0
        x = np.arange(4.0)
        assert_allclose(panel.apply(x), x)

    def test_m_less_than_k_rejected(self, backend):
        with pytest.raises(NestqrError):
            qr_house(np.ones((2, 3)))


# ---------------------------------------------------------------- apply_panel_left

class TestApplyPanel:
    def test_inverse_pair(self, backend):
        # apply then apply-transpose -> identity to 1e-13
        rng = np.random.default_rng(3)
        panel, _ = qr_house(rng.standard_normal((15, 6)))
        C = rng.standard_normal((15, 4))
        back = apply_panel_left(panel, apply_panel_left(panel, C), transpose=True)
        assert np.abs(back - C).max() <= 1e-13

    def test_panel_applied_to_own_block(self, backend):
        # oracle: Ht B = [R; 0]
        rng = np.random.default_rng(4)
        B = rng.standard_normal((10, 3))
        panel, R = qr_house(B)
        HtB = apply_panel_left(panel, B, transpose=True)
        assert_allclose(HtB[:3], R, atol=1e-13)
        assert np.abs(HtB[3:]).max() <= 1e-13

    def test_empty_panel_identity(self, backend):
        panel, _ = qr_house(np.zeros((5, 0)))
        C = np.arange(10.0).reshape(5, 2)
        assert_allclose(apply_panel_left(panel, C), C)

    def test_dimension_mismatch(self, backend):
        panel, _ = qr_house(np.eye(3))
        with pytest.raises(NestqrError):
            apply_panel_left(panel, np.zeros((4, 2)))

    def test_vector_input(self, backend):
        rng = np.random.default_rng(5)
        panel, _ = qr_house(rng.standard_normal((8, 3)))
        v = rng.standard_normal(8)
        out = apply_panel_left(panel, v)
        assert out.shape == (8,)
        assert_allclose(apply_panel_left(panel, out, transpose=True), v, atol=1e-13)

    def test_orthogonality_up_to_512(self, backend):
        # invariant: ||Q^T Q - I||_F <= 1e-12 * k on blocks up to 512
        rng = np.random.default_rng(6)
        for m, k in [(32, 8), (128, 64), (512, 96)]:
            panel, _ = qr_house(rng.standard_normal((m, k)))
            Q = panel.apply(np.eye(m))
            assert np.linalg.norm(Q.T @ Q - np.eye(m)) <= 1e-12 * k


# ---------------------------------------------------------------- rrqr_threshold

class TestRrqrThreshold:
    def test_zero_matrix_rank_zero(self, backend):
        res = rrqr_threshold(np.zeros((4, 6)), 1e-3)
        assert res.rank == 0
        assert res.resid.shape == (4, 6)

    def test_identity_all_kept(self, backend):
        res = rrqr_threshold(np.eye(3), 0.5)
        assert res.rank == 3

    def test_rank_one_plus_noise(self, backend):
        # oracle: SVD — sigma_2/sigma_1 ~ 1e-6 < eps=1e-2 so r=1;
        # discarded residual <= 1e-4
        rng = np.random.default_rng(7)
        u = rng.standard_normal(10)
        v = rng.standard_normal(14)
        M = np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
        M += 1e-6 * rng.standard_normal((10, 14))
        s = np.linalg.svd(M, compute_uv=False)
        assert s[1] / s[0] < 1e-2  # oracle precondition
        res = rrqr_threshold(M, 1e-2)
        assert res.rank == 1
        assert spectral_norm(res.resid) <= 1e-4

    def test_reconstruction(self, backend):
        rng = np.random.default_rng(8)
        M = rng.standard_normal((12, 9))
        res = rrqr_threshold(M, 1e-8)
        m, k = M.shape
        S = np.zeros((m, k))
        S[:res.rank] = res.R
        S[res.rank:, res.rank:] = res.resid
        assert_allclose(res.q_dense() @ S, M[:, res.perm], atol=1e-12)

    def test_diag_ratios_respect_threshold(self, backend):
        rng = np.random.default_rng(9)
        M = rng.standard_normal((20, 20)) @ np.diag(10.0 ** -np.arange(20.0)) \
            @ rng.standard_normal((20, 20))
        eps = 1e-6
        res = rrqr_threshold(M, eps)
        d = np.abs(np.diag(res.R[:, :res.rank]))
        assert (d / d[0] >= eps).all()
        assert np.all(np.diff(d) <= 1e-12)  # |R_ii| nonincreasing

    def test_min_rank_escalation(self, backend):
        rng = np.random.default_rng(10)
        M = np.outer(rng.standard_normal(8), rng.standard_normal(8))
        res0 = rrqr_threshold(M, 1e-6)
        assert res0.rank == 1
        res3 = rrqr_threshold(M, 1e-6, min_rank=3)
        assert res3.rank >= 3

    def test_eps_zero_full_qr(self, backend):
        # invariant: eps=0 reproduces full QR, residual <= 1e-13 relative
        rng = np.random.default_rng(11)
        M = rng.standard_normal((15, 10))
        res = rrqr_threshold(M, 0.0)
        assert res.rank == 10
        S = np.zeros((15, 10))
        S[:10] = res.R
        rel = np.linalg.norm(res.q_dense() @ S - M[:, res.perm]) / np.linalg.norm(M)
        assert rel <= 1e-13

    def test_rank_monotone_in_eps(self, backend):
        # invariant: r nonincreasing in eps (50 matrices x 5 eps values)
        rng = np.random.default_rng(12)
        eps_grid = [0.0, 1e-8, 1e-4, 1e-2, 0.5]
        for _ in range(50):
            m = int(rng.integers(2, 16))
            k = int(rng.integers(2, 16))
            r0 = min(m, k, int(rng.integers(1, 6)))
            M = rng.standard_normal((m, r0)) @ rng.standard_normal((r0, k))
            M += 1e-7 * rng.standard_normal((m, k))
            ranks = [rrqr_threshold(M, e).rank for e in eps_grid]
            assert all(a >= b for a, b in zip(ranks, ranks[1:])), ranks

    def test_eps_out_of_range(self, backend):
        with pytest.raises(NestqrError):
            rrqr_threshold(np.eye(2), 1.0)

    def test_svd_proxy_recorded(self, backend):
        # pivoted-QR diagonal vs singular values: record the comparison
        rng = np.random.default_rng(13)
        M = rng.standard_normal((30, 25))
        res = rrqr_threshold(M, 0.0)
        d = np.abs(np.diag(res.R[:, :res.rank]))
        s = np.linalg.svd(M, compute_uv=False)
        # classical bound sanity: diagonal within a polynomial factor of sigma
        assert d[0] <= s[0] * (1 + 1e-12)
        assert d[-1] >= s[-1] / (2.0 ** 25)


# ---------------------------------------------------------------- tri_solve

class TestTriSolve:
    def test_identity(self, backend):
        C = np.arange(6.0).reshape(3, 2)
        assert_allclose(tri_solve(np.eye(3), C), C)

    def test_diagonal(self, backend):
        R = np.diag([2.0, 4.0])
        assert_allclose(tri_solve(R, np.eye(2)), np.diag([0.5, 0.25]))

    def test_residual_8x8(self, backend):
        # oracle: ||R (R^-1 C) - C|| / ||C|| <= 1e-13
        rng = np.random.default_rng(14)
        R = np.triu(rng.standard_normal((8, 8))) + 4 * np.eye(8)
        C = rng.standard_normal((8, 5))
        X = tri_solve(R, C)
        assert np.linalg.norm(R @ X - C) / np.linalg.norm(C) <= 1e-13

    def test_right_side(self, backend):
        rng = np.random.default_rng(15)
        R = np.triu(rng.standard_normal((6, 6))) + 4 * np.eye(6)
        C = rng.standard_normal((4, 6))
        X = tri_solve(R, C, side="right")
        assert np.linalg.norm(X @ R - C) / np.linalg.norm(C) <= 1e-13

    def test_singular_pivot_error(self, backend):
        R = np.array([[1.0, 2.0], [0.0, 1e-16]])
        with pytest.raises(SingularPivotError) as e:
            tri_solve(R, np.eye(2))
        assert e.value.index == 1
        assert e.value.value == pytest.approx(1e-16)

    def test_vector_rhs(self, backend):
        R = np.diag([2.0, 4.0])
        assert_allclose(tri_solve(R, np.array([2.0, 4.0])), [1.0, 1.0])

    def test_empty(self, backend):
        out = tri_solve(np.zeros((0, 0)), np.zeros((0, 3)))
        assert out.shape == (0, 3)


# ---------------------------------------------------------------- cross-backend

def test_backends_agree():
    rng = np.random.default_rng(16)
    M = rng.standard_normal((25, 18))
    results = {}
    for be in ("numpy", "numba"):
        set_backend(be)
        res = rrqr_threshold(M, 1e-3)
        panel, R = qr_house(M[:, :6])
        results[be] = (res.rank, res.perm.copy(), res.R.copy(), R.copy())
    set_backend("numba")
    assert results["numpy"][0] == results["numba"][0]
    assert (results["numpy"][1] == results["numba"][1]).all()
    assert_allclose(results["numpy"][2], results["numba"][2], atol=1e-12)
    assert_allclose(results["numpy"][3], results["numba"][3], atol=1e-12)
