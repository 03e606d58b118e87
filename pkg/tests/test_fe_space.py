import numpy as np
import pytest
from hypothesis import given, strategies as st

from growfem.birth import ACTIVE, GAS
from growfem.fe_space import (FieldTransferError, UnbalancedMeshError, apply_constraints,
                              build_dof_map, evaluate_at_lattice, increment, key_coords,
                              project_on_transform, q1_shape, transfer_field)
from growfem.octree import MAX_LEVEL, ROOT_LEN, OctreeMesh, enforce_2to1_balance, refine_and_coarsen
from growfem.partition import partition_by_weight
from oracles import q1_reference_stiffness


def one_refined(octant=0):
    mesh = OctreeMesh.uniform(1)
    f = np.zeros(8, int)
    f[octant] = 1
    return refine_and_coarsen(mesh, f)


def random_balanced(seed, level=2, p=0.3):
    rng = np.random.default_rng(seed)
    mesh = OctreeMesh.uniform(level)
    for _ in range(2):
        mesh = refine_and_coarsen(mesh, (rng.random(len(mesh)) < p).astype(int))
    return enforce_2to1_balance(mesh)


def physical(dm):
    return key_coords(dm.dof_keys) / ROOT_LEN


def cell_value(dm, U, cell, pts):
    """Field in active cell ``cell`` (position in dm.active) at unit-cube points."""
    leaf = dm.active[cell]
    m = dm.mesh
    xi = (pts * ROOT_LEN - m.anchors[leaf]) / m.sizes[leaf]
    return q1_shape(xi) @ dm.nodal_values(U)[dm.cell_nodes[cell]]


class TestNumbering:
    def test_all_inactive(self):
        mesh = OctreeMesh.uniform(2)
        assert build_dof_map(mesh, np.zeros(64)).n_dofs == 0

    @pytest.mark.parametrize("level", [0, 1, 2, 3])
    def test_uniform_count(self, level):
        mesh = OctreeMesh.uniform(level)
        dm = build_dof_map(mesh, np.full(len(mesh), ACTIVE))
        assert dm.n_dofs == (2 ** level + 1) ** 3
        assert len(dm.hanging) == 0

    def test_hanging_nodes_of_one_refined_octant(self):
        dm = build_dof_map(one_refined(), np.full(15, ACTIVE))
        cons = dm.constraints()
        weights = sorted(tuple(sorted(c for _, c in v)) for v in cons.values())
        # three face centres and nine edge midpoints on the interface
        assert weights.count((0.25, 0.25, 0.25, 0.25)) == 3
        assert weights.count((0.5, 0.5)) == 9
        assert dm.n_dofs == 27 + 19 - 12

    def test_constraints_match_coarse_shape_functions(self):
        dm = build_dof_map(one_refined(), np.full(15, ACTIVE))
        pts = physical(dm)
        for key, masters in dm.constraints().items():
            x = key_coords(np.array([key]))[0] / ROOT_LEN
            # the hanging node lies on a coarse octant; Q1 weights of its corners
            coarse_cell = [c for c in range(len(dm.active)) if dm.mesh.levels[dm.active[c]] == 1
                           and _inside(dm, c, x)][0]
            leaf = dm.active[coarse_cell]
            xi = (x * ROOT_LEN - dm.mesh.anchors[leaf]) / dm.mesh.sizes[leaf]
            N = q1_shape(xi)
            corner_pts = dm.mesh.corners([leaf])[0] / ROOT_LEN
            expected = {}
            for a in range(8):
                if N[a] > 1e-14:
                    d = int(np.argmin(np.linalg.norm(pts - corner_pts[a], axis=1)))
                    expected[d] = N[a]
            assert dict(masters) == pytest.approx(expected)
            assert sum(c for _, c in masters) == pytest.approx(1.0)

    def test_unbalanced(self):
        mesh = one_refined()
        f = np.zeros(15, int)
        f[7] = 1
        mesh = refine_and_coarsen(mesh, f)
        with pytest.raises(UnbalancedMeshError):
            build_dof_map(mesh, np.full(len(mesh), ACTIVE))

    def test_inactive_nodes_have_no_dofs(self):
        mesh = OctreeMesh.uniform(1)
        status = np.array([ACTIVE] + [GAS] * 7)
        assert build_dof_map(mesh, status).n_dofs == 8

    @given(st.integers(0, 2 ** 31))
    def test_constraint_properties(self, seed):
        mesh = random_balanced(seed)
        rng = np.random.default_rng(seed)
        status = np.where(rng.random(len(mesh)) < 0.7, ACTIVE, GAS)
        dm = build_dof_map(mesh, status)
        P = dm.P.tocsr()
        assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
        free = dm.dof_of_node >= 0
        assert np.array_equal(P[np.nonzero(free)[0]].toarray(),
                              np.eye(dm.n_dofs)[dm.dof_of_node[free]])

    def test_contiguous_ownership(self):
        mesh = random_balanced(3)
        dm = build_dof_map(mesh, np.full(len(mesh), ACTIVE))
        for P in (1, 2, 4, 8):
            owners = dm.owners(partition_by_weight(np.ones(len(mesh)), P))
            assert np.all(np.diff(owners) >= 0)
            assert len(owners) == dm.n_dofs


def _inside(dm, cell, x):
    leaf = dm.active[cell]
    lo = dm.mesh.anchors[leaf] / ROOT_LEN
    hi = lo + dm.mesh.sizes[leaf] / ROOT_LEN
    return bool(np.all((lo <= x + 1e-15) & (x <= hi + 1e-15)))


class TestContinuity:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_hanging_faces(self, seed):
        mesh = random_balanced(seed)
        dm = build_dof_map(mesh, np.full(len(mesh), ACTIVE))
        rng = np.random.default_rng(seed)
        U = rng.normal(size=dm.n_dofs)
        lv = mesh.levels[dm.active]
        lo = mesh.anchors[dm.active] / ROOT_LEN
        hi = lo + (mesh.sizes[dm.active] / ROOT_LEN)[:, None]
        checked = 0
        for f in np.nonzero(lv == lv.max())[0][:40]:
            for axis in range(3):
                for side in (0, 1):
                    plane = hi[f, axis] if side else lo[f, axis]
                    # coarse cells across this face
                    nb = np.nonzero((lv < lv[f]) & np.isclose(lo[:, axis] if side else hi[:, axis],
                                                               plane))[0]
                    for c in nb:
                        other = [a for a in range(3) if a != axis]
                        if not all(lo[c, a] <= lo[f, a] and hi[f, a] <= hi[c, a] for a in other):
                            continue
                        t = rng.random((27, 2))
                        pts = np.empty((27, 3))
                        pts[:, axis] = plane
                        for k, a in enumerate(other):
                            pts[:, a] = lo[f, a] + t[:, k] * (hi[f, a] - lo[f, a])
                        assert np.allclose(cell_value(dm, U, f, pts), cell_value(dm, U, c, pts),
                                           rtol=0, atol=1e-12)
                        checked += 1
        assert checked > 0


class TestApplyConstraints:
    def test_identity(self):
        rng = np.random.default_rng(0)
        K = rng.normal(size=(8, 8))
        f = rng.normal(size=8)
        K2, f2 = apply_constraints(K, f, np.eye(8))
        assert np.array_equal(K2, K) and np.array_equal(f2, f)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(8, 8))
        K2, _ = apply_constraints(A + A.T, np.zeros(8), rng.random((8, 5)))
        assert np.allclose(K2, K2.T, rtol=0, atol=1e-13)

    def test_quadratic_form_against_conforming_refinement(self):
        # coarse and refined octants side by side, everything else inactive
        mesh = one_refined(0)
        status = np.zeros(len(mesh), np.int8)
        status[:9] = ACTIVE            # the 8 children of octant 0 and octant 1
        dm = build_dof_map(mesh, status)
        Kref = q1_stiffness = q1_reference_stiffness()
        A = np.zeros((dm.n_dofs, dm.n_dofs))
        for c in range(len(dm.active)):
            h = mesh.sizes[dm.active[c]] / ROOT_LEN
            dofs, C = dm.cell_constraints(c)
            Kc, _ = apply_constraints(h * Kref, np.zeros(8), C)
            A[np.ix_(dofs, dofs)] += Kc
        # conforming oracle: octant 1 split into its children as well
        fine = refine_and_coarsen(mesh, np.r_[np.zeros(8, int), 1, np.zeros(6, int)])
        fstat = np.zeros(len(fine), np.int8)
        fstat[:16] = ACTIVE
        fdm = build_dof_map(fine, fstat)
        assert len(fdm.hanging) == 0
        Af = np.zeros((fdm.n_dofs, fdm.n_dofs))
        for c in range(len(fdm.active)):
            h = fine.sizes[fdm.active[c]] / ROOT_LEN
            d = fdm.dof_of_node[fdm.cell_nodes[c]]
            Af[np.ix_(d, d)] += h * q1_stiffness
        rng = np.random.default_rng(2)
        for _ in range(5):
            U = rng.normal(size=dm.n_dofs)
            V = evaluate_at_lattice(dm, U, key_coords(fdm.dof_keys))
            assert U @ A @ U == pytest.approx(V @ Af @ V, rel=1e-12)
        assert np.allclose(A, A.T)


class TestTransfer:
    def test_constant(self):
        mesh = random_balanced(4)
        dm = build_dof_map(mesh, np.full(len(mesh), ACTIVE))
        fine, origin = refine_and_coarsen(mesh, np.r_[1, np.zeros(len(mesh) - 1, int)],
                                          return_origin=True)
        fine = enforce_2to1_balance(fine)
        new = build_dof_map(fine, np.full(len(fine), ACTIVE))
        out = project_on_transform(dm, np.full(dm.n_dofs, 3.5), new)
        assert np.allclose(out, 3.5, rtol=0, atol=1e-14)

    def test_linear_exact_after_refinement(self):
        mesh = OctreeMesh.uniform(2)
        dm = build_dof_map(mesh, np.full(64, ACTIVE))
        x = physical(dm)
        U = 1 + 2 * x[:, 0] - x[:, 1] + 0.5 * x[:, 2]
        rng = np.random.default_rng(5)
        fine = enforce_2to1_balance(refine_and_coarsen(mesh, (rng.random(64) < 0.3).astype(int)))
        new = build_dof_map(fine, np.full(len(fine), ACTIVE))
        y = physical(new)
        out = project_on_transform(dm, U, new)
        assert np.allclose(out, 1 + 2 * y[:, 0] - y[:, 1] + 0.5 * y[:, 2], rtol=0, atol=1e-13)

    def test_refine_then_coarsen_restores(self):
        mesh = OctreeMesh.uniform(2)
        dm = build_dof_map(mesh, np.full(64, ACTIVE))
        U = np.random.default_rng(6).normal(size=dm.n_dofs)
        flags = np.zeros(64, int)
        flags[[5, 20, 41]] = 1
        fine, origin = refine_and_coarsen(mesh, flags, return_origin=True)
        fdm = build_dof_map(fine, np.full(len(fine), ACTIVE))
        Uf = project_on_transform(dm, U, fdm)
        back = refine_and_coarsen(fine, np.where(flags[origin] > 0, -1, 0))
        bdm = build_dof_map(back, np.full(64, ACTIVE))
        assert np.array_equal(project_on_transform(fdm, Uf, bdm), U)

    def test_increment_new_dofs(self):
        mesh = OctreeMesh.uniform(1)
        old_status = np.array([ACTIVE] * 4 + [GAS] * 4)
        old = build_dof_map(mesh, old_status)
        U = np.random.default_rng(7).normal(size=old.n_dofs)
        new = build_dof_map(mesh, np.full(8, ACTIVE))
        out = increment(old, U, new, 90.0)
        pos = {int(k): i for i, k in enumerate(old.dof_keys)}
        for i, k in enumerate(new.dof_keys):
            if int(k) in pos:
                assert out[i] == U[pos[int(k)]]
            else:
                assert out[i] == 90.0
        assert np.array_equal(increment(old, U, old, 90.0), U)

    def test_shrinking_is_an_error(self):
        mesh = OctreeMesh.uniform(1)
        old = build_dof_map(mesh, np.full(8, ACTIVE))
        new = build_dof_map(mesh, np.array([ACTIVE] * 4 + [GAS] * 4))
        with pytest.raises(FieldTransferError):
            increment(old, np.zeros(old.n_dofs), new, 0.0)

    def test_unrelated_region_without_init(self):
        mesh = OctreeMesh.uniform(1)
        old = build_dof_map(mesh, np.array([ACTIVE] + [GAS] * 7))
        new = build_dof_map(mesh, np.array([ACTIVE, ACTIVE] + [GAS] * 6))
        with pytest.raises(FieldTransferError):
            project_on_transform(old, np.zeros(old.n_dofs), new)
        with pytest.raises(ValueError):
            transfer_field(old, np.zeros(3), new, 0.0)
