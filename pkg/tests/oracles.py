"""Independent reference implementations used as test oracles.

None of these share code with the package beyond plain data types.
"""
from __future__ import annotations

import itertools

import numpy as np

MAX_LEVEL = 19
ROOT = 1 << MAX_LEVEL

# -- convex polyhedron intersection for boxes ---------------------------------

_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))[:, ::-1]
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
          if bin(a ^ b).count("1") == 1]


def box_vertices(center, half, axes):
    """(..., 8, 3) corners of oriented boxes; ``axes`` rows are the box axes."""
    center, half, axes = (np.asarray(v, float) for v in (center, half, axes))
    local = _SIGNS * half[..., None, :]
    return center[..., None, :] + np.einsum("...vi,...ik->...vk", local, axes)


def _to_local(points, center, axes):
    return np.einsum("...pk,...ik->...pi", points - center[..., None, :], axes)


def _contains(points, center, half, axes):
    loc = _to_local(points, center, axes)
    return np.all(np.abs(loc) <= half[..., None, :], axis=-1)


def _edges_cross_faces(verts, center, half, axes):
    """Any edge of polyhedron ``verts`` meeting a face of the box (closed)."""
    loc = _to_local(verts, center, axes)
    e = np.array(_EDGES)
    p0, p1 = loc[..., e[:, 0], :], loc[..., e[:, 1], :]
    d = p1 - p0
    hit = np.zeros(loc.shape[:-2], bool)
    for k in range(3):
        others = [j for j in range(3) if j != k]
        for side in (-1.0, 1.0):
            plane = side * half[..., k][..., None]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (plane - p0[..., k]) / d[..., k]
            ok = (d[..., k] != 0) & (t >= 0) & (t <= 1)
            q = p0 + np.where(ok, t, 0.0)[..., None] * d
            inside = np.ones(ok.shape, bool)
            for j in others:
                inside &= np.abs(q[..., j]) <= half[..., j][..., None]
            hit |= np.any(ok & inside, axis=-1)
    return hit


def boxes_intersect(ca, ha, Aa, cb, hb, Ab):
    """Closed oriented boxes intersect: vertex containment or edge-face crossing."""
    va, vb = box_vertices(ca, ha, Aa), box_vertices(cb, hb, Ab)
    hit = np.any(_contains(va, cb, hb, Ab), axis=-1) | np.any(_contains(vb, ca, ha, Aa), axis=-1)
    hit |= _edges_cross_faces(va, cb, hb, Ab) | _edges_cross_faces(vb, ca, ha, Aa)
    return hit


def random_rotations(rng, n):
    """Uniform random rotations as row-axis matrices (n, 3, 3)."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], 1)
    return R


# -- octree oracles -----------------------------------------------------------

def leaf_boxes(levels, anchors):
    size = np.left_shift(1, MAX_LEVEL - np.asarray(levels))
    lo = np.asarray(anchors)
    return lo, lo + size[:, None]


def touching_pairs(levels, anchors, chunk=512):
    """All pairs of distinct leaves whose closed boxes touch, by brute force."""
    lo, hi = leaf_boxes(levels, anchors)
    out_i, out_j = [], []
    n = len(lo)
    for s in range(0, n, chunk):
        a_lo, a_hi = lo[s:s + chunk, None, :], hi[s:s + chunk, None, :]
        touch = np.all((a_lo <= hi[None]) & (lo[None] <= a_hi), axis=-1)
        i, j = np.nonzero(touch)
        i = i + s
        keep = i != j
        out_i.append(i[keep])
        out_j.append(j[keep])
    return np.concatenate(out_i), np.concatenate(out_j)


def balance_violations(levels, anchors):
    i, j = touching_pairs(levels, anchors)
    lv = np.asarray(levels)
    return int(np.sum(np.abs(lv[i] - lv[j]) >= 2))


class RefTree:
    """Pointer-based octree: nodes hold a children list or None."""

    def __init__(self, min_level=0, max_level=MAX_LEVEL):
        self.root = {"level": 0, "anchor": (0, 0, 0), "children": None}
        self.min_level, self.max_level = min_level, max_level

    def leaves(self):
        out = []

        def walk(node):
            if node["children"] is None:
                out.append(node)
            else:
                for c in node["children"]:
                    walk(c)
        walk(self.root)
        return out

    def refine_uniform(self, level):
        for _ in range(level):
            self.apply([1] * len(self.leaves()))

    def apply(self, flags):
        leaves = self.leaves()
        flag = {id(n): f for n, f in zip(leaves, flags)}

        def split(node):
            lv = node["level"] + 1
            s = 1 << (MAX_LEVEL - lv)
            x, y, z = node["anchor"]
            node["children"] = [
                {"level": lv, "anchor": (x + s * (c & 1), y + s * ((c >> 1) & 1), z + s * (c >> 2)),
                 "children": None} for c in range(8)]

        def walk(node):
            if node["children"] is None:
                return
            kids = node["children"]
            if all(k["children"] is None and flag.get(id(k), 0) < 0 for k in kids) \
                    and kids[0]["level"] > self.min_level:
                node["children"] = None
                return
            for k in kids:
                walk(k)

        walk(self.root)
        for n in leaves:
            if flag[id(n)] > 0 and n["level"] < self.max_level:
                split(n)

    def as_arrays(self):
        leaves = self.leaves()
        return (np.array([n["level"] for n in leaves], np.int64),
                np.array([n["anchor"] for n in leaves], np.int64).reshape(-1, 3))


def voxel_cover(levels, anchors, level):
    """Set of level-``level`` voxel coordinates covered by the given leaves."""
    out = set()
    shift = MAX_LEVEL - level
    for lv, a in zip(np.asarray(levels).tolist(), np.asarray(anchors).tolist()):
        if lv > level:
            raise ValueError("leaf finer than the voxel level")
        n = 1 << (level - lv)
        i0, j0, k0 = (c >> shift for c in a)
        for i in range(i0, i0 + n):
            for j in range(j0, j0 + n):
                for k in range(k0, k0 + n):
                    out.add((i, j, k))
    return out


def voxels_hitting_box(level, lower, upper, origin=(0.0, 0.0, 0.0), size=1.0):
    """Level-``level`` voxels of the cube ``origin + [0, size]^3`` meeting a closed box."""
    n = 1 << level
    h = size / n
    ranges = []
    for ax in range(3):
        idx = np.arange(n)
        lo = origin[ax] + idx * h
        hi = lo + h
        ranges.append(idx[(lo <= upper[ax]) & (lower[ax] <= hi)])
    return {(int(i), int(j), int(k)) for i in ranges[0] for j in ranges[1] for k in ranges[2]}


# -- finite element oracles ----------------------------------------------------

def q1_reference_mass():
    """Exact Q1 mass matrix on the unit cube, by tensor product of 1-D masses."""
    m = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    M = np.zeros((8, 8))
    for a in range(8):
        for b in range(8):
            M[a, b] = np.prod([m[(a >> k) & 1, (b >> k) & 1] for k in range(3)])
    return M


def q1_reference_stiffness():
    """Exact Q1 Laplacian stiffness on the unit cube."""
    m = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    k = np.array([[1.0, -1.0], [-1.0, 1.0]])
    K = np.zeros((8, 8))
    for a in range(8):
        for b in range(8):
            bits = [((a >> d) & 1, (b >> d) & 1) for d in range(3)]
            for d in range(3):
                K[a, b] += np.prod([(k if e == d else m)[bits[e]] for e in range(3)])
    return K
