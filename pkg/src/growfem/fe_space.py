"""
Trilinear (Q1) degrees of freedom on the active leaves of an octree mesh.

Nodes are identified by their integer lattice coordinates.  A node sitting
at the midpoint of an edge, or the centre of a face, of a coarser active
leaf is *hanging*: it gets no DOF and its value is fixed by the DOFs at
the corners of that edge (weights 1/2) or face (weights 1/4).  The whole
constraint set is kept as a sparse prolongation ``P`` from DOFs to nodes,
so that nodal values are ``P @ U`` and a matrix assembled on nodes
condenses to ``P.T @ A @ P``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .birth import is_active
from .octree import CHILD_OFFSETS, ROOT_LEN, OctreeMesh, is_balanced

_BITS = 20
_MASK = (1 << _BITS) - 1

#: local corner pairs spanning the 12 edges, and corner quadruples of the 6 faces
EDGES = np.array([(a, b) for a in range(8) for b in range(8)
                  if a < b and bin(a ^ b).count("1") == 1], np.int64)
FACES = np.array([[c for c in range(8) if (c >> axis) & 1 == side]
                  for axis in range(3) for side in (0, 1)], np.int64)


class UnbalancedMeshError(ValueError):
    pass


class FieldTransferError(ValueError):
    pass


def node_key(coords) -> np.ndarray:
    c = np.asarray(coords, np.int64)
    return c[..., 0] | (c[..., 1] << _BITS) | (c[..., 2] << (2 * _BITS))


def key_coords(keys) -> np.ndarray:
    k = np.asarray(keys, np.int64)
    return np.stack([k & _MASK, (k >> _BITS) & _MASK, (k >> 2 * _BITS) & _MASK], -1)


def _lookup(sorted_keys, keys):
    """Positions of ``keys`` in ``sorted_keys``, -1 where absent."""
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, max(len(sorted_keys) - 1, 0))
    if len(sorted_keys) == 0:
        return np.full(np.shape(keys), -1, np.int64)
    return np.where(sorted_keys[pos] == keys, pos, -1)


@dataclass(eq=False)
class DofMap:
    """DOF numbering of one mesh/status pair.

    Attributes
    ----------
    active : (nA,) leaf indices of the active cells, Morton ordered
    cell_nodes : (nA, 8) node index of each local corner
    node_keys : (nN,) sorted lattice keys of all active-cell nodes
    dof_of_node : (nN,) DOF id, or -1 for hanging nodes
    P : sparse (nN, n_dofs) nodal prolongation including constraints
    """

    mesh: OctreeMesh
    status: np.ndarray
    active: np.ndarray
    cell_nodes: np.ndarray
    node_keys: np.ndarray
    dof_of_node: np.ndarray
    P: sp.csr_matrix

    @property
    def n_dofs(self) -> int:
        return self.P.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.node_keys)

    @property
    def hanging(self) -> np.ndarray:
        return np.nonzero(self.dof_of_node < 0)[0]

    @cached_property
    def node_points(self) -> np.ndarray:
        return self.mesh.geometry(key_coords(self.node_keys) / ROOT_LEN)

    @cached_property
    def dof_points(self) -> np.ndarray:
        pts = np.empty((self.n_dofs, 3))
        free = self.dof_of_node >= 0
        pts[self.dof_of_node[free]] = self.node_points[free]
        return pts

    @cached_property
    def dof_keys(self) -> np.ndarray:
        k = np.empty(self.n_dofs, np.int64)
        free = self.dof_of_node >= 0
        k[self.dof_of_node[free]] = self.node_keys[free]
        return k

    def constraints(self) -> dict:
        """Hanging node key -> list of (master DOF, coefficient)."""
        out = {}
        P = self.P.tocsr()
        for n in self.hanging:
            row = slice(P.indptr[n], P.indptr[n + 1])
            out[int(self.node_keys[n])] = list(zip(P.indices[row].tolist(), P.data[row].tolist()))
        return out

    def nodal_values(self, U) -> np.ndarray:
        return self.P @ np.asarray(U, float)

    def cell_constraints(self, i):
        """``(dofs, C)`` for active cell ``i``: local nodal values are ``C @ U[dofs]``."""
        rows = self.P[self.cell_nodes[i]].tocoo()
        dofs = np.unique(rows.col)
        C = np.zeros((8, len(dofs)))
        np.add.at(C, (rows.row, np.searchsorted(dofs, rows.col)), rows.data)
        return dofs, C

    def owners(self, partition) -> np.ndarray:
        """Owning part of each DOF: the owner of the first active cell using it."""
        first = np.full(self.n_dofs, np.iinfo(np.int64).max)
        cells = np.repeat(np.arange(len(self.active)), 8)
        nodes = self.cell_nodes.ravel()
        free = self.dof_of_node[nodes] >= 0
        np.minimum.at(first, self.dof_of_node[nodes[free]], cells[free])
        return partition.owner(self.active[first])


def build_dof_map(mesh: OctreeMesh, status, check_balance=True) -> DofMap:
    """Number the Q1 nodes of active leaves and constrain the hanging ones.

    DOF ids follow the first appearance of each node when active leaves are
    scanned in Morton order and corners in child-index order, so every part
    of a z-order partition owns a contiguous id range.
    """
    status = np.asarray(status)
    if len(status) != len(mesh):
        raise ValueError("status length differs from leaf count")
    if check_balance and not is_balanced(mesh):
        raise UnbalancedMeshError("mesh is not 2:1 balanced")
    active = np.nonzero(is_active(status))[0]
    if len(active) == 0:
        empty = np.zeros(0, np.int64)
        return DofMap(mesh, status, active, np.zeros((0, 8), np.int64), empty, empty,
                      sp.csr_matrix((0, 0)))
    corners = mesh.corners(active)                         # (nA, 8, 3)
    ck = node_key(corners)
    node_keys, cell_nodes = np.unique(ck, return_inverse=True)
    cell_nodes = cell_nodes.reshape(-1, 8)
    nN = len(node_keys)

    # hanging candidates: edge midpoints and face centres of active leaves
    em = node_key((corners[:, EDGES[:, 0]] + corners[:, EDGES[:, 1]]) // 2)
    fc = node_key(corners[:, FACES].sum(axis=2) // 4)
    h_rows, h_cols, h_vals = [], [], []
    for mids, local, w in ((em, EDGES, 0.5), (fc, FACES, 0.25)):
        pos = _lookup(node_keys, mids)
        cell, which = np.nonzero(pos >= 0)
        if len(cell) == 0:
            continue
        hn = pos[cell, which]
        # keep one describing cell per hanging node
        hn, first = np.unique(hn, return_index=True)
        cell, which = cell[first], which[first]
        masters = cell_nodes[cell[:, None], local[which]]
        h_rows.append(np.repeat(hn, local.shape[1]))
        h_cols.append(masters.ravel())
        h_vals.append(np.full(masters.size, w))
    is_hanging = np.zeros(nN, bool)
    if h_rows:
        is_hanging[np.concatenate(h_rows)] = True

    # node-to-node constraint operator, resolved until masters are free
    free_nodes = np.nonzero(~is_hanging)[0]
    rows = np.concatenate([free_nodes, *h_rows])
    cols = np.concatenate([free_nodes, *h_cols])
    vals = np.concatenate([np.ones(len(free_nodes)), *h_vals])
    C = sp.csr_matrix((vals, (rows, cols)), shape=(nN, nN))
    for _ in range(64):
        bad = C[:, np.nonzero(is_hanging)[0]].nnz if is_hanging.any() else 0
        if bad == 0:
            break
        C = (C @ C).tocsr()
    else:
        raise RuntimeError("hanging node constraints do not resolve")
    C.eliminate_zeros()

    # first-appearance numbering of free nodes
    flat = cell_nodes.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first, kind="stable")]
    order = order[~is_hanging[order]]
    dof_of_node = np.full(nN, -1, np.int64)
    dof_of_node[order] = np.arange(len(order))
    C = C.tocoo()
    P = sp.csr_matrix((C.data, (C.row, dof_of_node[C.col])), shape=(nN, len(order)))
    P.sum_duplicates()
    return DofMap(mesh, status, active, cell_nodes, node_keys, dof_of_node, P)


def apply_constraints(Ke, fe, C):
    """Condense a local system onto the cell's master DOFs: ``C.T Ke C``, ``C.T fe``."""
    Ke = np.asarray(Ke, float)
    C = np.asarray(C, float)
    return C.T @ Ke @ C, C.T @ np.asarray(fe, float)


def q1_shape(xi) -> np.ndarray:
    """Q1 shape functions (…, 8) at reference points ``xi`` in [0, 1]^3."""
    xi = np.asarray(xi, float)
    o = CHILD_OFFSETS
    f = np.where(o == 1, xi[..., None, :], 1.0 - xi[..., None, :])
    return f.prod(axis=-1)


def q1_shape_grad(xi) -> np.ndarray:
    """Reference gradients (…, 8, 3) of the Q1 shape functions."""
    xi = np.asarray(xi, float)
    o = CHILD_OFFSETS
    f = np.where(o == 1, xi[..., None, :], 1.0 - xi[..., None, :])
    df = np.where(o == 1, 1.0, -1.0) * np.ones_like(f)
    g = np.empty(f.shape)
    g[..., 0] = df[..., 0] * f[..., 1] * f[..., 2]
    g[..., 1] = f[..., 0] * df[..., 1] * f[..., 2]
    g[..., 2] = f[..., 0] * f[..., 1] * df[..., 2]
    return g


def _locate_active_cells(mesh, status, lattice_points):
    """For each lattice point, an active leaf whose closure contains it (or -1)."""
    pts = np.asarray(lattice_points, np.int64)
    found = np.full(len(pts), -1, np.int64)
    active = is_active(status)
    for off in CHILD_OFFSETS:
        todo = found < 0
        if not todo.any():
            break
        probe = pts[todo] - off
        ok = np.all((probe >= 0) & (probe < ROOT_LEN), axis=1)
        leaf = np.full(len(probe), -1, np.int64)
        leaf[ok] = mesh.locate(probe[ok])
        good = leaf >= 0
        good[good] = active[leaf[good]]
        idx = np.nonzero(todo)[0]
        found[idx[good]] = leaf[good]
    return found


def evaluate_at_lattice(dofmap: DofMap, U, lattice_points, fill=np.nan):
    """Field values at integer lattice points, interpolated inside active cells."""
    pts = np.asarray(lattice_points, np.int64).reshape(-1, 3)
    out = np.full(len(pts), fill, float)
    if dofmap.n_dofs == 0 or len(pts) == 0:
        return out
    mesh = dofmap.mesh
    nodal = dofmap.nodal_values(U)
    leaf = _locate_active_cells(mesh, dofmap.status, pts)
    hit = leaf >= 0
    pos_of_leaf = np.full(len(mesh), -1, np.int64)
    pos_of_leaf[dofmap.active] = np.arange(len(dofmap.active))
    cell = pos_of_leaf[leaf[hit]]
    xi = (pts[hit] - mesh.anchors[leaf[hit]]) / mesh.sizes[leaf[hit]][:, None]
    out[hit] = np.einsum("nc,nc->n", q1_shape(xi), nodal[dofmap.cell_nodes[cell]])
    return out


def transfer_field(old: DofMap, U, new: DofMap, init_value=None) -> np.ndarray:
    """Values on ``new`` from a field on ``old``.

    Nodes present in ``old`` keep their (constrained) value; other nodes
    inside the old active region are interpolated there; nodes outside it
    get ``init_value``, or raise when ``init_value`` is None.
    """
    U = np.asarray(U, float)
    if len(U) != old.n_dofs:
        raise ValueError("field length differs from the old DOF count")
    out = np.empty(new.n_dofs)
    if new.n_dofs == 0:
        return out
    if old.n_dofs == 0:
        if init_value is None:
            raise FieldTransferError("no old active region to transfer from")
        out[:] = init_value
        return out
    keys = new.dof_keys
    nodal = old.nodal_values(U)
    pos = _lookup(old.node_keys, keys)
    same = pos >= 0
    out[same] = nodal[pos[same]]
    rest = np.nonzero(~same)[0]
    if len(rest):
        vals = evaluate_at_lattice(old, U, key_coords(keys[rest]))
        missing = np.isnan(vals)
        if missing.any():
            if init_value is None:
                raise FieldTransferError(f"{missing.sum()} nodes lie outside the old active region")
            vals[missing] = init_value
        out[rest] = vals
    return out


def _check_growth(old: DofMap, new: DofMap):
    if len(old.active) == 0:
        return
    m = old.mesh
    centres = m.anchors[old.active] + (m.sizes[old.active] // 2)[:, None]
    leaf = new.mesh.locate(centres)
    if not np.all(is_active(new.status)[leaf]):
        raise FieldTransferError("the active region shrank")


def increment(old: DofMap, U, new: DofMap, init_value) -> np.ndarray:
    """Field on an enlarged active region; new DOFs start at ``init_value``."""
    _check_growth(old, new)
    return transfer_field(old, U, new, init_value)


def project_on_transform(old: DofMap, U, new: DofMap) -> np.ndarray:
    """Field after refine/coarsen of the same active region.

    Refinement interpolates (exact for trilinear fields), coarsening
    injects at surviving nodes.
    """
    _check_growth(old, new)
    return transfer_field(old, U, new, None)
