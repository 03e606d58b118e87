"""
Semi-implicit heat transfer on the active cells.

One step solves

    (M_C / dt + A + M_loss) U^{n+1} = b_f + (M_C / dt) U^n + b_loss

with capacity, conductivity and loss coefficients frozen at ``U^n``.
Units are mm, s, W and degrees Celsius throughout, so conductivities are
W/(mm K), film coefficients W/(mm^2 K) and densities kg/mm^3.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .birth import ACTIVE, POWDER
from .fe_space import DofMap, q1_shape, q1_shape_grad
from .octree import ROOT_LEN
from .partition import Partition
from .solver import DistributedMatrix, jacobi_pcg
from .transport import SerialTransport

_G = 0.5 / math.sqrt(3.0)
GAUSS_1D = np.array([0.5 - _G, 0.5 + _G])
GAUSS_3D = np.array([[GAUSS_1D[c & 1], GAUSS_1D[(c >> 1) & 1], GAUSS_1D[(c >> 2) & 1]]
                     for c in range(8)])
GAUSS_W = np.full(8, 1.0 / 8.0)

FREE, POWDER_LOSS, PLATFORM = "free", "powder", "platform"


# -- material ------------------------------------------------------------

@dataclass(frozen=True)
class MaterialTable:
    """Piecewise-linear properties against temperature, clamped outside the table."""

    T: tuple
    rho: tuple
    c: tuple
    k: tuple

    def __post_init__(self):
        arrs = [np.asarray(v, float) for v in (self.T, self.rho, self.c, self.k)]
        if len(arrs[0]) == 0 or any(a.shape != arrs[0].shape for a in arrs):
            raise ValueError("material table columns must be non-empty and equally long")
        if np.any(np.diff(arrs[0]) <= 0):
            raise ValueError("temperature breakpoints must increase strictly")
        if np.any(arrs[3] < 0) or np.any(arrs[1] <= 0) or np.any(arrs[2] <= 0):
            raise ValueError("need k >= 0 and positive density and specific heat")
        for name, a in zip(("T", "rho", "c", "k"), arrs):
            object.__setattr__(self, name, tuple(a.tolist()))

    @classmethod
    def constant(cls, rho, c, k):
        return cls((0.0,), (rho,), (c,), (k,))

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"T", "rho", "c", "k"}:
            raise ValueError(f"{path}: expected header T,rho,c,k")
        cols = {key: [float(r[key]) for r in rows] for key in ("T", "rho", "c", "k")}
        return cls(**cols)

    @property
    def is_constant(self):
        return len(self.T) == 1

    def capacity(self, u):
        rho, c, _ = eval_property(self, u)
        return rho * c

    def conductivity(self, u):
        return eval_property(self, u)[2]


def eval_property(table: MaterialTable, T):
    """``(rho, c, k)`` at temperature(s) ``T`` by linear interpolation."""
    T = np.asarray(T, float)
    return tuple(np.interp(T, table.T, col) for col in (table.rho, table.c, table.k))


def ti6al4v() -> MaterialTable:
    """Approximate temperature-dependent Ti6Al4V data in mm units."""
    path = resources.files("growfem") / "data" / "ti6al4v.csv"
    with resources.as_file(path) as p:
        return MaterialTable.from_csv(p)


# -- boundary and sources --------------------------------------------------

@dataclass(frozen=True)
class LossRegion:
    h: float = 0.0
    u: float | Callable = 0.0

    def __post_init__(self):
        if self.h < 0:
            raise ValueError("film coefficient must be non-negative")

    def value(self, t):
        return self.u(t) if callable(self.u) else float(self.u)


@dataclass(frozen=True)
class DirichletSpec:
    """Fixed values on DOFs selected by ``where(points) -> mask``; ``value(points, t)``."""

    where: Callable
    value: Callable


@dataclass(frozen=True)
class BoundarySpec:
    free: LossRegion = LossRegion()
    powder: LossRegion = LossRegion()
    platform: LossRegion = LossRegion()
    dirichlet: DirichletSpec | None = None

    @classmethod
    def uniform(cls, h, u):
        r = LossRegion(h, u)
        return cls(r, r, r)

    def region(self, name) -> LossRegion:
        return {FREE: self.free, POWDER_LOSS: self.powder, PLATFORM: self.platform}[name]


def uniform_source_density(eta, W, V_acd):
    """Power per volume spread evenly over the activated cells."""
    if V_acd <= 0:
        raise ValueError("empty activated volume")
    return eta * W / V_acd


def goldak_source(x, y, z, t, Q, v, a, b, c):
    """Single-ellipsoid Gaussian source moving along +x at speed ``v``."""
    A = 6.0 * math.sqrt(3.0) / (math.pi * math.sqrt(math.pi)) * Q / (a * b * c)
    return A * np.exp(-3.0 * ((np.asarray(x) - v * t) ** 2 / a ** 2
                              + np.asarray(y) ** 2 / b ** 2 + np.asarray(z) ** 2 / c ** 2))


@dataclass(frozen=True)
class UniformSource:
    eta: float
    W: float
    cells: np.ndarray  # leaf indices of K_acd

    def __post_init__(self):
        if not (0 < self.eta <= 1) or self.W < 0:
            raise ValueError("need 0 < eta <= 1 and W >= 0")


@dataclass(frozen=True)
class GoldakSource:
    Q: float
    v: float
    a: float
    b: float
    c: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __call__(self, x, t):
        x = np.asarray(x) - np.asarray(self.origin)
        return goldak_source(x[..., 0], x[..., 1], x[..., 2], t,
                             self.Q, self.v, self.a, self.b, self.c)


# -- geometry cache --------------------------------------------------------

class CellGeometry:
    """Quadrature data for the active cells of a DOF map."""

    def __init__(self, dofmap: DofMap):
        mesh = dofmap.mesh
        X = mesh.physical_corners(dofmap.active)          # (n, 8, 3)
        self.N = q1_shape(GAUSS_3D)                        # (8q, 8)
        dN = q1_shape_grad(GAUSS_3D)                       # (8q, 8, 3)
        J = np.matmul(X.transpose(0, 2, 1)[:, None], dN[None])   # dx_k / dxi_j
        det = np.linalg.det(J)
        if np.any(det <= 0):
            raise ValueError("inverted cell in the mapped mesh")
        Jinv = np.linalg.inv(J)
        self.G = np.matmul(dN[None], Jinv)                 # physical gradients
        self.dV = det * GAUSS_W                            # (n, 8q)
        self.points = np.matmul(self.N[None], X)
        self.volume = self.dV.sum(axis=1)


def _geometry(dofmap: DofMap) -> CellGeometry:
    geo = dofmap.__dict__.get("_geometry")
    if geo is None:
        geo = CellGeometry(dofmap)
        dofmap.__dict__["_geometry"] = geo
    return geo


# -- boundary faces ----------------------------------------------------------

@dataclass
class BoundaryQuarters:
    """Quarter faces of active cells exposed to a loss region."""

    cell: np.ndarray       # active-cell position
    region: np.ndarray     # region names
    N: np.ndarray          # (m, 4, 8) shape values at face Gauss points
    dS: np.ndarray         # (m, 4) surface weights


def boundary_quarters(dofmap: DofMap) -> BoundaryQuarters:
    cached = dofmap.__dict__.get("_quarters")
    if cached is not None:
        return cached
    mesh, status = dofmap.mesh, dofmap.status
    act = dofmap.active
    s = mesh.sizes[act]
    anc = mesh.anchors[act]
    cells, regions, xis, axes = [], [], [], []
    for axis in range(3):
        t1, t2 = [a for a in range(3) if a != axis]
        for side in (0, 1):
            for q1 in (0, 1):
                for q2 in (0, 1):
                    # lattice point at the quarter centre, and the voxel outside it
                    c = anc.copy()
                    c[:, axis] += side * s
                    c[:, t1] += (2 * q1 + 1) * s // 4
                    c[:, t2] += (2 * q2 + 1) * s // 4
                    probe = c.copy()
                    if side == 0:
                        probe[:, axis] -= 1
                    outside = (probe[:, axis] < 0) | (probe[:, axis] >= ROOT_LEN)
                    region = np.full(len(act), "", dtype=object)
                    if axis == 2 and side == 0:
                        region[outside] = PLATFORM
                    else:
                        region[outside] = FREE
                    inside = ~outside
                    nb = mesh.locate(probe[inside])
                    st = status[nb]
                    r = np.where(st == ACTIVE, "", np.where(st == POWDER, POWDER_LOSS, FREE))
                    region[inside] = r
                    keep = region != ""
                    if not keep.any():
                        continue
                    xi = np.zeros((4, 3))
                    xi[:, axis] = side
                    xi[:, t1] = 0.5 * q1 + 0.5 * np.tile(GAUSS_1D, 2)
                    xi[:, t2] = 0.5 * q2 + 0.5 * np.repeat(GAUSS_1D, 2)
                    k = np.nonzero(keep)[0]
                    cells.append(k)
                    regions.append(region[keep])
                    xis.append(np.broadcast_to(xi, (len(k), 4, 3)))
                    axes.append(np.full(len(k), axis))
    if not cells:
        out = BoundaryQuarters(np.zeros(0, np.int64), np.zeros(0, object),
                               np.zeros((0, 4, 8)), np.zeros((0, 4)))
        dofmap.__dict__["_quarters"] = out
        return out
    cell = np.concatenate(cells)
    xi = np.concatenate(xis)
    X = mesh.physical_corners(act[cell])
    N = q1_shape(xi)
    dN = q1_shape_grad(xi)
    J = np.matmul(X.transpose(0, 2, 1)[:, None], dN)
    fixed = np.concatenate(axes)
    t1 = np.where(fixed == 0, 1, 0)
    t2 = np.where(fixed == 2, 1, 2)
    m = np.arange(len(cell))
    a = J[m, :, :, t1]
    b = J[m, :, :, t2]
    area = np.linalg.norm(np.cross(a, b), axis=-1)
    dS = area * (1.0 / 16.0)
    out = BoundaryQuarters(cell, np.concatenate(regions), N, dS)
    dofmap.__dict__["_quarters"] = out
    return out


# -- assembly ----------------------------------------------------------------

@dataclass
class AssembledSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    mass: sp.csr_matrix          # M_C
    source: np.ndarray           # b_f
    row_bounds: np.ndarray       # DOF ranges per part


def _node_to_dof(dofmap, cell_mats, cell_vecs, cells):
    nodes = dofmap.cell_nodes[cells]
    nN = dofmap.n_nodes
    out_m = []
    for Me in cell_mats:
        r = np.repeat(nodes, 8, axis=1).ravel()
        c = np.tile(nodes, (1, 8)).ravel()
        A = sp.csr_matrix((Me.ravel(), (r, c)), shape=(nN, nN))
        out_m.append(dofmap.P.T @ A @ dofmap.P)
    out_v = []
    for fe in cell_vecs:
        v = np.bincount(nodes.ravel(), weights=fe.ravel(), minlength=nN)
        out_v.append(dofmap.P.T @ v)
    return out_m, out_v


def _cell_integrals(dofmap, geo, Un, dt, t_new, material, bc, source, cells, bq_sel):
    nodal = dofmap.nodal_values(Un)
    ue = nodal[dofmap.cell_nodes[cells]]                      # (n, 8)
    uq = ue @ geo.N.T                                          # (n, 8q)
    Cq = material.capacity(uq)
    kq = material.conductivity(uq)
    N, G, dV = geo.N, geo.G[cells], geo.dV[cells]
    NN = (N[:, :, None] * N[:, None, :]).reshape(len(N), 64)
    Me = ((Cq * dV) @ NN).reshape(-1, 8, 8)
    Gs = G.transpose(0, 2, 1, 3).reshape(len(cells), 8, -1)       # (n, a, q*k)
    wk = np.repeat(kq * dV, 3, axis=1)[:, None, :]
    Ke = np.matmul(Gs * wk, Gs.transpose(0, 2, 1))
    fe = np.zeros((len(cells), 8))
    if isinstance(source, UniformSource) and len(source.cells):
        pos_of_leaf = np.full(len(dofmap.mesh), -1, np.int64)
        pos_of_leaf[dofmap.active] = np.arange(len(dofmap.active))
        acd = pos_of_leaf[np.asarray(source.cells)]
        if np.any(acd < 0):
            raise ValueError("source cells must be active")
        f = uniform_source_density(source.eta, source.W, geo.volume[acd].sum())
        in_acd = np.isin(cells, acd)
        fe[in_acd] = f * (dV[in_acd] @ N)
    elif isinstance(source, GoldakSource):
        fq = source(geo.points[cells], t_new)
        fe = (fq * dV) @ N
    # loss terms on exposed quarter faces
    Mb = np.zeros_like(Me)
    bb = np.zeros_like(fe)
    if len(bq_sel.cell):
        local = np.searchsorted(cells, bq_sel.cell)
        nq = bq_sel.N
        for name in (FREE, POWDER_LOSS, PLATFORM):
            reg = bc.region(name)
            sel = bq_sel.region == name
            if reg.h == 0 or not sel.any():
                continue
            w = reg.h * bq_sel.dS[sel]
            nw = nq[sel] * w[:, :, None]
            np.add.at(Mb, local[sel], np.matmul(nw.transpose(0, 2, 1), nq[sel]))
            np.add.at(bb, local[sel], reg.value(t_new) * nw.sum(axis=1))
    return Me, Ke, Mb, fe, bb


def assemble_step(dofmap: DofMap, Un, dt, material: MaterialTable, bc: BoundarySpec,
                  source=None, t_new=0.0, partition: Partition | None = None,
                  transport=None) -> AssembledSystem:
    """Assemble the semi-implicit system for one step of length ``dt``.

    With a partition, each part integrates its own active cells and sends
    the rows owned by other parts to them in one exchange; owners add the
    received rows in part order.
    """
    Un = np.asarray(Un, float)
    if len(Un) != dofmap.n_dofs:
        raise ValueError("field length differs from the DOF count")
    if dt <= 0:
        raise ValueError("time step must be positive")
    transport = transport or SerialTransport()
    partition = partition or Partition.single(len(dofmap.mesh))
    geo = _geometry(dofmap)
    bq = boundary_quarters(dofmap)
    P = partition.num_parts
    owner_of_cell = partition.owner(dofmap.active)
    dof_owner = dofmap.owners(partition) if dofmap.n_dofs else np.zeros(0, np.int64)
    bounds = np.searchsorted(dof_owner, np.arange(P + 1), side="left")
    bounds[-1] = dofmap.n_dofs

    def local(p):
        cells = np.nonzero(owner_of_cell == p)[0]
        sel = np.isin(bq.cell, cells)
        bsel = BoundaryQuarters(bq.cell[sel], bq.region[sel], bq.N[sel], bq.dS[sel])
        Me, Ke, Mb, fe, bb = _cell_integrals(dofmap, geo, Un, dt, t_new, material, bc,
                                             source, cells, bsel)
        (M, K, Mloss), (f, bl) = _node_to_dof(dofmap, [Me, Ke, Mb], [fe, bb], cells)
        return M, K, Mloss, f, bl

    parts = transport.map(local, range(P))

    def rows(mat, q):
        return mat[bounds[q]:bounds[q + 1]]

    if P > 1:
        outbox = [{q: [rows(m, q) for m in parts[p][:3]] + [v[bounds[q]:bounds[q + 1]]
                                                             for v in parts[p][3:]]
                   for q in range(P) if q != p} for p in range(P)]
        inbox = transport.exchange(outbox, tag="assembly")
    blocks = []
    for q in range(P):
        pieces = {q: [rows(m, q) for m in parts[q][:3]]
                  + [v[bounds[q]:bounds[q + 1]] for v in parts[q][3:]]}
        if P > 1:
            pieces.update(inbox[q])
        acc = None
        for src in sorted(pieces):
            acc = pieces[src] if acc is None else [a + b for a, b in zip(acc, pieces[src])]
        blocks.append(acc)
    M = sp.vstack([b[0] for b in blocks]).tocsr()
    K = sp.vstack([b[1] for b in blocks]).tocsr()
    Ml = sp.vstack([b[2] for b in blocks]).tocsr()
    f = np.concatenate([b[3] for b in blocks])
    bl = np.concatenate([b[4] for b in blocks])
    A = (M / dt + K + Ml).tocsr()
    rhs = f + (M @ Un) / dt + bl
    return AssembledSystem(A, rhs, M, f, bounds)


def apply_dirichlet(system: AssembledSystem, dofs, values):
    """Symmetric elimination of prescribed DOF values."""
    dofs = np.asarray(dofs, np.int64)
    if len(dofs) == 0:
        return system
    A = system.matrix.tocsr()
    g = np.zeros(A.shape[0])
    g[dofs] = values
    rhs = system.rhs - A @ g
    keep = np.ones(A.shape[0])
    keep[dofs] = 0.0
    Kd = sp.diags(keep)
    A = (Kd @ A @ Kd + sp.diags(1.0 - keep)).tocsr()
    rhs[dofs] = values
    return AssembledSystem(A, rhs, system.mass, system.source, system.row_bounds)


# -- time stepping ---------------------------------------------------------------

@dataclass
class ThermalState:
    dofmap: DofMap
    U: np.ndarray
    t: float = 0.0
    reports: list = field(default_factory=list)


def advance(state: ThermalState, dt, material, bc, source=None, partition=None,
            transport=None, tol=1e-8, max_iters=None) -> ThermalState:
    """One semi-implicit step of length ``dt``; returns the new state."""
    t_new = state.t + dt
    system = assemble_step(state.dofmap, state.U, dt, material, bc, source, t_new,
                           partition, transport)
    if bc.dirichlet is not None and state.dofmap.n_dofs:
        pts = state.dofmap.dof_points
        mask = bc.dirichlet.where(pts)
        system = apply_dirichlet(system, np.nonzero(mask)[0],
                                 bc.dirichlet.value(pts[mask], t_new))
    if state.dofmap.n_dofs == 0:
        return ThermalState(state.dofmap, state.U.copy(), t_new, state.reports)
    D = DistributedMatrix(system.matrix, system.row_bounds, transport)
    U, report = jacobi_pcg(D, system.rhs, x0=state.U, tol=tol, max_iters=max_iters)
    if not report.converged:
        raise ArithmeticError(f"PCG did not converge: {report}")
    return ThermalState(state.dofmap, U, t_new, state.reports + [report])


def printing_step(state, dt, material, bc, source, **kw) -> ThermalState:
    """Step with the laser on; ``source`` is a :class:`UniformSource` or :class:`GoldakSource`."""
    return advance(state, dt, material, bc, source, **kw)


def cooling_step(state, dt, material, bc, **kw) -> ThermalState:
    """Step with the laser off."""
    return advance(state, dt, material, bc, None, **kw)


def layer_print_time(V_layer, d_p):
    """Printing time of one layer at volumetric deposition rate ``d_p``."""
    if d_p <= 0:
        raise ValueError("deposition rate must be positive")
    return V_layer / d_p


def thermal_energy(system_or_mass, U):
    M = system_or_mass.mass if isinstance(system_or_mass, AssembledSystem) else system_or_mass
    return float(np.ones(M.shape[0]) @ (M @ U))
