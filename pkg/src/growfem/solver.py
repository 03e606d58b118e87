"""
Jacobi-preconditioned conjugate gradients over a row-distributed matrix.

Rows are split into contiguous blocks, one per part.  A matrix-vector
product first fetches the off-part entries each block needs (one exchange
round), then every part multiplies its rows against a full-length work
vector, so each row is summed in the same column order as a serial
product.  Dot products are per-part partial sums combined in part order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .transport import SerialTransport


class SolverBreakdownError(ArithmeticError):
    """Raised when the input is detected not to be symmetric positive definite."""


class StaleGhostError(RuntimeError):
    pass


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool


class DistributedMatrix:
    """Row blocks ``A[bounds[p]:bounds[p+1], :]`` with their ghost column lists."""

    def __init__(self, A, bounds=None, transport=None):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("matrix must be square")
        self.n = n
        self.bounds = np.asarray([0, n] if bounds is None else bounds, np.int64)
        if self.bounds[0] != 0 or self.bounds[-1] != n or np.any(np.diff(self.bounds) < 0):
            raise ValueError("row bounds must split 0..n")
        self.transport = transport or SerialTransport()
        self.blocks, self.ghosts = [], []
        for p in range(self.num_parts):
            lo, hi = self.range(p)
            blk = A[lo:hi]
            self.blocks.append(blk)
            cols = np.unique(blk.indices)
            self.ghosts.append(cols[(cols < lo) | (cols >= hi)])
        owner = np.searchsorted(self.bounds, np.arange(n), side="right") - 1
        # requests[q][p]: indices part q must send to part p
        self.requests = [dict() for _ in range(self.num_parts)]
        for p, g in enumerate(self.ghosts):
            own = owner[g]
            for q in np.unique(own):
                self.requests[int(q)][p] = g[own == q]

    @property
    def num_parts(self):
        return len(self.bounds) - 1

    def range(self, p):
        return int(self.bounds[p]), int(self.bounds[p + 1])

    def split(self, x):
        x = np.asarray(x, float)
        return [x[slice(*self.range(p))].copy() for p in range(self.num_parts)]

    def gather(self, parts):
        return np.concatenate(parts) if parts else np.zeros(0)

    def diagonal(self):
        return [blk.diagonal(k=lo) for blk, (lo, _) in
                zip(self.blocks, map(self.range, range(self.num_parts)))]

    def exchange_ghosts(self, x_parts):
        outbox = []
        for q in range(self.num_parts):
            lo, _ = self.range(q)
            outbox.append({p: x_parts[q][idx - lo] for p, idx in self.requests[q].items()})
        if self.num_parts == 1:
            return [dict()]
        return self.transport.exchange(outbox, tag="ghost_values")

    def matvec(self, x_parts, check_ghosts=False):
        inbox = self.exchange_ghosts(x_parts)

        def local(p):
            lo, hi = self.range(p)
            work = np.zeros(self.n)
            work[lo:hi] = x_parts[p]
            for q, vals in inbox[p].items():
                idx = self.requests[q][p]
                if check_ghosts:
                    qlo, _ = self.range(q)
                    if not np.array_equal(x_parts[q][idx - qlo], vals):
                        raise StaleGhostError(f"part {p} holds stale ghosts from part {q}")
                work[idx] = vals
            return self.blocks[p] @ work

        return self.transport.map(local, range(self.num_parts))


def distributed_matvec(A: DistributedMatrix, x):
    """``A @ x`` for a global vector, computed block-wise."""
    return A.gather(A.matvec(A.split(x)))


def distributed_dot(x_parts, y_parts, transport=None):
    transport = transport or SerialTransport()
    partial = [float(np.dot(a, b)) for a, b in zip(x_parts, y_parts)]
    return float(transport.allreduce(partial, tag="reduce"))


def jacobi_pcg(A, b, x0=None, tol=1e-8, max_iters=None, bounds=None, transport=None):
    """Solve ``A x = b`` by CG preconditioned with ``diag(A)``.

    Stops when ``||b - A x|| / ||b|| <= tol`` (tracked by the recurrence).
    ``A`` may be a sparse matrix or a :class:`DistributedMatrix`; with
    ``bounds`` a matrix is split into row blocks first.

    Returns ``(x, SolveReport)``.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    D = A if isinstance(A, DistributedMatrix) else DistributedMatrix(A, bounds, transport)
    tr = D.transport
    n = D.n
    max_iters = max(10 * n, 100) if max_iters is None else int(max_iters)
    diag = D.diagonal()
    if any(np.any(d <= 0) for d in diag):
        raise SolverBreakdownError("Jacobi preconditioner needs a positive diagonal")
    b = D.split(b)
    x = D.split(np.zeros(n) if x0 is None else x0)

    def dots(pairs, tag="reduce"):
        partial = [np.array([np.dot(u[p], v[p]) for u, v in pairs]) for p in range(D.num_parts)]
        return tr.allreduce(partial, tag=tag)

    bnorm = float(np.sqrt(dots([(b, b)])[0]))
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True)
    Ax = D.matvec(x)
    r = [bp - ap for bp, ap in zip(b, Ax)]
    z = [rp / dp for rp, dp in zip(r, diag)]
    p = [zp.copy() for zp in z]
    rz, rr = dots([(r, z), (r, r)])
    res = float(np.sqrt(rr)) / bnorm
    it = 0
    while res > tol and it < max_iters:
        q = D.matvec(p)
        pq = dots([(p, q)])[0]
        if not pq > 0:
            raise SolverBreakdownError(f"p'Ap = {pq:g} at iteration {it}; matrix is not SPD")
        alpha = rz / pq
        for k in range(D.num_parts):
            x[k] += alpha * p[k]
            r[k] -= alpha * q[k]
            z[k] = r[k] / diag[k]
        rz_new, rr = dots([(r, z), (r, r)])
        beta = rz_new / rz
        rz = rz_new
        for k in range(D.num_parts):
            p[k] = z[k] + beta * p[k]
        res = float(np.sqrt(rr)) / bnorm
        it += 1
    return D.gather(x), SolveReport(it, res, res <= tol)


def true_residual(A, x, b) -> float:
    b = np.asarray(b, float)
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(b - A @ x) / (nb if nb > 0 else 1.0))
