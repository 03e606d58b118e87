"""
Moving ellipsoidal source on a semi-infinite solid: reference solution by
Green's functions, the space-time gradient error, and the convergence
study.

Only the quarter ``y <= 0, z <= 0`` of the solid is meshed.  The top face
and the symmetry plane ``y = 0`` are adiabatic; the far faces carry the
reference solution as Dirichlet data.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .birth import ACTIVE
from .fe_space import build_dof_map
from .geometry import BoxMap
from .octree import OctreeMesh, enforce_2to1_balance, refine_and_coarsen
from .thermal import (BoundarySpec, DirichletSpec, GoldakSource, MaterialTable,
                      ThermalState, _geometry, advance)

logger = logging.getLogger(__name__)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_COEF = 6.0 * math.sqrt(3.0) / (math.pi * math.sqrt(math.pi))


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BenchmarkParams:
    u0: float = 20.0
    Q: float = 50.0
    v: float = 1.0
    alpha: float = 0.1
    k: float = 1.0
    a: float = 0.3
    b: float = 0.15
    c: float = 0.25
    lower: tuple = (-1.0, -2.0, -2.0)
    upper: tuple = (3.0, 0.0, 0.0)
    path_start: tuple = (0.0, 0.0, 0.0)
    path_end: tuple = (2.0, 0.0, 0.0)
    dt0: float = 0.008
    T: float = 0.512

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0 or self.alpha <= 0 or self.k <= 0:
            raise ValueError("a, b, c, alpha and k must be positive")

    @property
    def rho_c(self):
        return self.k / self.alpha

    @property
    def path_length(self):
        return math.dist(self.path_start, self.path_end)


def _integrand(s, x, y, z, t, p: BenchmarkParams, grad):
    """Integrand in ``s = t - tau``; shapes broadcast (points, nodes)."""
    Sa = p.a ** 2 + 12 * p.alpha * s
    Sb = p.b ** 2 + 12 * p.alpha * s
    Sc = p.c ** 2 + 12 * p.alpha * s
    xr = x - p.v * (t - s)
    g = np.exp(-3.0 * (xr ** 2 / Sa + y ** 2 / Sb + z ** 2 / Sc)) / np.sqrt(Sa * Sb * Sc)
    if not grad:
        return g[..., None]
    return np.stack([g, -6.0 * xr / Sa * g, -6.0 * y / Sb * g, -6.0 * z / Sc * g], axis=-1)


def _tau_integral(points, t, p, grad, tol, chunk=4096):
    """Adaptive composite Gauss-Legendre over ``s = t u**2``, ``u`` in [0, 1].

    Panels are bisected together until the estimate changes by less than
    ``tol`` at every point.
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    ncomp = 4 if grad else 1
    out = np.zeros((len(pts), ncomp))
    if t <= 0:
        return out
    scale = _COEF * p.alpha * p.Q / p.k
    for lo in range(0, len(pts), chunk):
        x, y, z = (pts[lo:lo + chunk, i:i + 1] for i in range(3))
        prev = None
        panels = 4
        while True:
            edges = np.linspace(0.0, 1.0, panels + 1)
            mid = (edges[:-1] + edges[1:]) / 2
            half = (edges[1] - edges[0]) / 2
            u = (mid[:, None] + half * _GL_X[None, :]).ravel()
            w = np.tile(half * _GL_W, panels)
            s = t * u ** 2
            jac = 2.0 * t * u
            vals = _integrand(s[None, :], x, y, z, t, p, grad)
            est = scale * np.einsum("pnk,n->pk", vals, w * jac)
            if prev is not None and np.max(np.abs(est - prev)) <= tol:
                break
            prev = est
            panels *= 2
            if panels > 1 << 14:
                raise QuadratureError("tau integral did not converge")
        out[lo:lo + chunk] = est
    return out


def green_solution(x, y, z, t, params: BenchmarkParams = BenchmarkParams(), tol=1e-8):
    """Reference temperature at points (broadcast arrays) and time ``t``."""
    x, y, z = np.broadcast_arrays(*(np.asarray(v, float) for v in (x, y, z)))
    pts = np.stack([x, y, z], -1).reshape(-1, 3)
    val = params.u0 + _tau_integral(pts, t, params, False, tol)[:, 0]
    return val.reshape(x.shape)


def green_gradient(points, t, params: BenchmarkParams = BenchmarkParams(), tol=1e-8):
    """Reference gradient (n, 3), differentiated under the integral sign."""
    return _tau_integral(points, t, params, True, tol)[:, 1:]


# -- discrete problem ----------------------------------------------------------

def benchmark_domain(params: BenchmarkParams = BenchmarkParams(), base_level=2, fine_level=5,
                     radius=0.5):
    """Adapted mesh, material and boundary setup.

    Leaves within ``radius`` of the part of the path covered up to ``T``
    are refined to ``fine_level``; the rest stay at ``base_level``.
    Returns ``(mesh, status, material, bc)``.
    """
    lo, hi = np.asarray(params.lower), np.asarray(params.upper)
    geo = BoxMap(tuple(lo), tuple(hi - lo))
    mesh = OctreeMesh.uniform(base_level, geometry=geo)
    p0 = np.asarray(params.path_start, float)
    d = np.asarray(params.path_end, float) - p0
    L = min(params.v * params.T, np.linalg.norm(d))
    d = d / np.linalg.norm(d)
    for _ in range(fine_level - base_level):
        X = mesh.physical_corners()
        cmin, cmax = X.min(axis=1), X.max(axis=1)
        # distance from each cell box to the covered segment, sampled along it
        ts = np.linspace(0.0, L, 33)
        seg = p0 + ts[:, None] * d
        gap = np.maximum(0.0, np.maximum(cmin[:, None, :] - seg[None], seg[None] - cmax[:, None, :]))
        dist = np.linalg.norm(gap, axis=-1).min(axis=1)
        flags = ((dist <= radius) & (mesh.levels < fine_level)).astype(int)
        if not flags.any():
            break
        mesh = refine_and_coarsen(mesh, flags)
    mesh = enforce_2to1_balance(mesh)
    status = np.full(len(mesh), ACTIVE, np.int8)
    material = MaterialTable.constant(params.rho_c, 1.0, params.k)
    span = hi - lo
    eps = 1e-9 * span.max()

    def where(pts):
        return ((np.abs(pts[:, 0] - lo[0]) < eps) | (np.abs(pts[:, 0] - hi[0]) < eps)
                | (np.abs(pts[:, 1] - lo[1]) < eps) | (np.abs(pts[:, 2] - lo[2]) < eps))

    def value(pts, t):
        return green_solution(pts[:, 0], pts[:, 1], pts[:, 2], t, params)

    bc = BoundarySpec(dirichlet=DirichletSpec(where, value))
    return mesh, status, material, bc


def refine_uniformly(mesh, times=1):
    for _ in range(times):
        mesh = refine_and_coarsen(mesh, np.ones(len(mesh), int))
    return mesh


@dataclass
class Trajectory:
    dofmap: object
    times: list
    fields: list


def simulate(params: BenchmarkParams, mesh, status, material, bc, dt, sample_every=None,
             tol=1e-10) -> Trajectory:
    """Backward-Euler run to ``params.T``; stores fields at sampled steps."""
    dofmap = build_dof_map(mesh, status)
    n_steps = int(round(params.T / dt))
    if not math.isclose(n_steps * dt, params.T, rel_tol=1e-9):
        raise ValueError("T must be a multiple of the time step")
    sample_every = sample_every or 1
    source = GoldakSource(params.Q, params.v, params.a, params.b, params.c, params.path_start)
    state = ThermalState(dofmap, np.full(dofmap.n_dofs, params.u0), 0.0)
    times, fields = [0.0], [state.U.copy()]
    for n in range(1, n_steps + 1):
        state = advance(state, dt, material, bc, source, tol=tol)
        state.reports.clear()
        if n % sample_every == 0 or n == n_steps:
            times.append(n * dt)
            fields.append(state.U.copy())
    return Trajectory(dofmap, times, fields)


def l2h1_error(dofmap, times, fields, grad_exact) -> float:
    """``sqrt(int_0^T |grad(u - u_h)|^2_{L2} dt)`` by Gauss points in space and trapezoid in time.

    ``grad_exact(points (n, 3), t) -> (n, 3)``.
    """
    if len(times) != len(fields) or len(times) == 0:
        raise ValueError("need one field per time")
    geo = _geometry(dofmap)
    pts = geo.points.reshape(-1, 3)
    sq = []
    for t, U in zip(times, fields):
        nodal = dofmap.nodal_values(U)[dofmap.cell_nodes]           # (n, 8)
        gh = np.einsum("na,nqak->nqk", nodal, geo.G).reshape(-1, 3)
        diff = gh - np.asarray(grad_exact(pts, t))
        sq.append(float(np.sum(np.sum(diff ** 2, axis=1) * geo.dV.ravel())))
    if len(times) == 1:
        return math.sqrt(sq[0])
    return math.sqrt(float(np.trapezoid(sq, times) if hasattr(np, "trapezoid")
                           else np.trapz(sq, times)))


def fit_rate(dofs, errors) -> float:
    """Decay rate of ``errors`` against ``dofs**(1/3)`` by least squares in log-log."""
    dofs, errors = np.asarray(dofs, float), np.asarray(errors, float)
    if len(dofs) < 2:
        raise ValueError("need at least two data points")
    slope = np.polyfit(np.log(dofs ** (1.0 / 3.0)), np.log(errors), 1)[0]
    return float(-slope)


@dataclass
class ConvergenceResult:
    dofs: list
    errors: list
    dts: list
    rate: float
    rate_tail: float

    def to_csv(self):
        rows = ["round,dofs,dt,error"]
        rows += [f"{i},{n},{dt!r},{e!r}" for i, (n, dt, e) in
                 enumerate(zip(self.dofs, self.dts, self.errors))]
        return "\n".join(rows) + f"\n# rate,{self.rate!r}\n"


def convergence_study(params: BenchmarkParams = BenchmarkParams(), rounds=3, base_level=2,
                      fine_level=5, radius=0.5, n_samples=8, progress=None) -> ConvergenceResult:
    """Refine the mesh uniformly and halve the step each round; fit the error decay.

    The error's time integral uses ``n_samples`` equally spaced times that
    are step boundaries in every round.
    """
    if rounds < 2:
        raise ValueError("need at least two rounds")
    mesh0, _, material, bc = benchmark_domain(params, base_level, fine_level, radius)
    steps0 = int(round(params.T / params.dt0))
    if steps0 % n_samples:
        raise ValueError("sample count must divide the number of coarse steps")
    dofs, errors, dts = [], [], []
    for r in range(rounds):
        mesh = refine_uniformly(mesh0, r)
        status = np.full(len(mesh), ACTIVE, np.int8)
        dt = params.dt0 / 2 ** r
        stride = (steps0 // n_samples) * 2 ** r
        traj = simulate(params, mesh, status, material, bc, dt, sample_every=stride)
        err = l2h1_error(traj.dofmap, traj.times, traj.fields,
                         lambda x, t: green_gradient(x, t, params))
        dofs.append(traj.dofmap.n_dofs)
        errors.append(err)
        dts.append(dt)
        if progress:
            progress(r, traj.dofmap.n_dofs, dt, err)
        logger.info("round %d: %d dofs, dt %g, error %.6g", r, dofs[-1], dt, err)
    rate = fit_rate(dofs, errors)
    tail = fit_rate(dofs[1:], errors[1:]) if rounds > 2 else rate
    return ConvergenceResult(dofs, errors, dts, rate, tail)
