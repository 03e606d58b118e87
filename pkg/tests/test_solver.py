import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from growfem.solver import (DistributedMatrix, SolverBreakdownError, StaleGhostError,
                            distributed_dot, distributed_matvec, jacobi_pcg, true_residual)
from growfem.transport import SerialTransport, ThreadedTransport


def random_spd(n, seed, density=0.1):
    rng = np.random.default_rng(seed)
    B = sp.random(n, n, density=density, random_state=rng)
    return (B @ B.T + n * sp.eye(n)).tocsr()


def even_bounds(n, P):
    return np.linspace(0, n, P + 1).round().astype(int)


class TestPCG:
    def test_identity(self):
        b = np.arange(1.0, 6.0)
        x, rep = jacobi_pcg(sp.eye(5), b)
        assert np.array_equal(x, b) and rep.iterations == 1 and rep.converged

    def test_diagonal(self):
        A = sp.diags([1.0, 2.0, 3.0, 4.0])
        x, rep = jacobi_pcg(A, np.ones(4), tol=1e-14)
        assert rep.iterations <= 1
        assert np.allclose(x, [1, 1 / 2, 1 / 3, 1 / 4], rtol=1e-15)

    def test_random_spd_against_cholesky(self):
        A = random_spd(50, 0)
        b = np.random.default_rng(1).normal(size=50)
        x, rep = jacobi_pcg(A, b, tol=1e-14)
        L = np.linalg.cholesky(A.toarray())
        ref = np.linalg.solve(L.T, np.linalg.solve(L, b))
        assert np.abs(x - ref).max() <= 1e-10 * np.abs(ref).max()

    def test_zero_rhs(self):
        x, rep = jacobi_pcg(random_spd(10, 2), np.zeros(10))
        assert np.all(x == 0) and rep.iterations == 0

    def test_non_positive_diagonal(self):
        with pytest.raises(SolverBreakdownError):
            jacobi_pcg(sp.diags([1.0, 0.0, 2.0]), np.ones(3))

    def test_indefinite_breakdown(self):
        A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(SolverBreakdownError):
            jacobi_pcg(A, np.array([1.0, -1.0]))

    def test_bad_tolerance(self):
        with pytest.raises(ValueError):
            jacobi_pcg(sp.eye(2), np.ones(2), tol=0)

    def test_iteration_cap(self):
        A = random_spd(100, 3, density=0.3)
        _, rep = jacobi_pcg(A, np.ones(100), tol=1e-14, max_iters=2)
        assert rep.iterations == 2 and not rep.converged

    @pytest.mark.parametrize("seed", range(4))
    def test_true_residual(self, seed):
        A = random_spd(120, seed)
        b = np.random.default_rng(seed).normal(size=120)
        x, rep = jacobi_pcg(A, b, tol=1e-8)
        assert rep.converged and rep.residual <= 1e-8
        assert abs(true_residual(A, x, b) - rep.residual) <= 1e-10

    @given(st.integers(0, 2 ** 31), st.integers(2, 60))
    def test_property_dense_oracle(self, seed, n):
        A = random_spd(n, seed, density=0.2)
        b = np.random.default_rng(seed).normal(size=n)
        x, rep = jacobi_pcg(A, b, tol=1e-13)
        ref = np.linalg.solve(A.toarray(), b)
        assert np.abs(x - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


class TestDistributed:
    @pytest.mark.parametrize("P", [1, 4])
    def test_matvec(self, P):
        A = sp.random(40, 40, density=0.2, random_state=np.random.default_rng(5)).tocsr()
        x = np.random.default_rng(6).normal(size=40)
        D = DistributedMatrix(A, even_bounds(40, P))
        assert np.array_equal(distributed_matvec(D, x), A @ x)

    def test_dot(self):
        x = np.random.default_rng(7).normal(size=30)
        parts = np.array_split(x, 4)
        assert distributed_dot(parts, parts) >= 0
        assert distributed_dot(parts, parts) == pytest.approx(x @ x, rel=1e-14)

    @pytest.mark.parametrize("transport", [SerialTransport, ThreadedTransport])
    def test_part_count_independence(self, transport):
        A = random_spd(200, 8)
        b = np.random.default_rng(9).normal(size=200)
        ref, _ = jacobi_pcg(A, b, tol=1e-12)
        for P in (2, 4, 8):
            x, _ = jacobi_pcg(A, b, tol=1e-12, bounds=even_bounds(200, P), transport=transport())
            assert np.abs(x - ref).max() <= 1e-12 * np.abs(ref).max()

    def test_empty_parts(self):
        A = random_spd(20, 10)
        b = np.ones(20)
        x, _ = jacobi_pcg(A, b, tol=1e-12, bounds=[0, 0, 10, 10, 20])
        assert np.allclose(A @ x, b, atol=1e-10)

    def test_stale_ghosts(self):
        A = random_spd(20, 11, density=0.5)
        D = DistributedMatrix(A, even_bounds(20, 2))
        x = D.split(np.ones(20))
        D.matvec(x, check_ghosts=True)

        class Corrupt(SerialTransport):
            def exchange(self, outbox, tag="exchange"):
                inbox = super().exchange(outbox, tag)
                for box in inbox:
                    for k in box:
                        box[k] = box[k] + 1.0
                return inbox

        D.transport = Corrupt()
        with pytest.raises(StaleGhostError):
            D.matvec(x, check_ghosts=True)

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            DistributedMatrix(sp.eye(4), [0, 3])
        with pytest.raises(ValueError):
            DistributedMatrix(sp.eye(4), [0, 3, 2, 4])
        with pytest.raises(ValueError):
            DistributedMatrix(sp.random(3, 4, density=0.5))

    def test_exchange_count_per_iteration(self):
        A = random_spd(60, 12)
        tr = SerialTransport()
        _, rep = jacobi_pcg(A, np.ones(60), bounds=even_bounds(60, 3), transport=tr)
        assert tr.counts["ghost_values"] == rep.iterations + 1
