"""
Cuboid intersection by separating axes, and the search that refines the
mesh onto the volume swept by the laser and activates it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .birth import ACTIVE, is_active
from .geometry import BoxMap
from .octree import MAX_LEVEL, ROOT_LEN, OctreeMesh, enforce_2to1_balance, refine_and_coarsen

logger = logging.getLogger(__name__)

AXIS_EPS = 1e-12
ORTHO_TOL = 1e-12


class InvalidCuboidError(ValueError):
    pass


class SearchDidNotConvergeError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Cuboid:
    """Oriented box: ``center`` (3,), ``half_extents`` (3,), ``axes`` rows (3, 3)."""

    center: np.ndarray
    half_extents: np.ndarray
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float).reshape(3))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, float).reshape(3))
        object.__setattr__(self, "axes", np.asarray(self.axes, float).reshape(3, 3))
        if np.any(self.half_extents <= 0):
            raise InvalidCuboidError(f"half extents must be positive: {self.half_extents}")
        if np.max(np.abs(self.axes @ self.axes.T - np.eye(3))) > ORTHO_TOL:
            raise InvalidCuboidError("cuboid axes are not orthonormal")

    @classmethod
    def from_bounds(cls, lower, upper):
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        return cls((lower + upper) / 2, (upper - lower) / 2)

    def vertices(self) -> np.ndarray:
        """Corners (8, 3) in child-index order."""
        signs = np.array([[2 * (c & 1) - 1, 2 * ((c >> 1) & 1) - 1, 2 * ((c >> 2) & 1) - 1]
                          for c in range(8)], float)
        return self.center + (signs * self.half_extents) @ self.axes

    def bounds(self):
        r = np.abs(self.axes).T @ self.half_extents
        return self.center - r, self.center + r


def _candidate_axes(A_axes, B_axes):
    """The 15 candidate axes, shape (..., 15, 3), and a validity mask (..., 15)."""
    A_axes, B_axes = np.broadcast_arrays(A_axes, B_axes)
    cross = np.cross(A_axes[..., :, None, :], B_axes[..., None, :, :])
    cross = cross.reshape(*cross.shape[:-3], 9, 3)
    axes = np.concatenate([A_axes, B_axes, cross], axis=-2)
    norm = np.linalg.norm(axes, axis=-1)
    valid = np.ones(norm.shape, bool)
    valid[..., 6:] = norm[..., 6:] >= AXIS_EPS
    return axes, valid


def separating_axis_disjoint(A: Cuboid, B: Cuboid) -> bool:
    """True iff a separating axis exists between the closed cuboids ``A`` and ``B``.

    Boxes that only touch on their boundary are *not* disjoint.
    """
    for c in (A, B):
        if not isinstance(c, Cuboid):
            raise InvalidCuboidError(f"expected Cuboid, got {type(c).__name__}")
    return bool(~_overlap(A.center, A.half_extents, A.axes,
                          B.center, B.half_extents, B.axes))


def _overlap(ca, ha, Aa, cb, hb, Ab):
    """Vectorised 15-axis overlap test; arguments broadcast over leading dims."""
    axes, valid = _candidate_axes(Aa, Ab)
    t = np.einsum("...k,...jk->...j", cb - ca, axes)
    ra = np.einsum("...i,...ji->...j", ha, np.abs(np.einsum("...ik,...jk->...ji", Aa, axes)))
    rb = np.einsum("...i,...ji->...j", hb, np.abs(np.einsum("...ik,...jk->...ji", Ab, axes)))
    separated = (np.abs(t) > ra + rb) & valid
    return ~np.any(separated, axis=-1)


def overlaps_many(box: Cuboid, centers, half_extents, axes=None) -> np.ndarray:
    """Overlap of one cuboid against many; ``axes`` None means axis aligned."""
    centers = np.asarray(centers, float)
    half_extents = np.asarray(half_extents, float)
    n = len(centers)
    if n == 0:
        return np.zeros(0, bool)
    if axes is None:
        axes = np.broadcast_to(np.eye(3), (n, 3, 3))
    out = np.empty(n, bool)
    chunk = 20000
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        out[sl] = _overlap(box.center, box.half_extents, box.axes,
                           centers[sl], half_extents[sl], axes[sl])
    return out


@dataclass(frozen=True)
class HeatAffectedVolume:
    """Search box swept by the laser between two positions.

    Positions carry the height of the top of the layer being printed.  The
    box runs along the horizontal projection of ``current - previous``; its
    length and width are multiplied by ``xy_scale``, the thickness is not.
    """

    previous_laser_position: tuple
    current_laser_position: tuple
    laser_width: float
    layer_thickness: float
    xy_scale: float = 1.0

    def __post_init__(self):
        if self.laser_width <= 0 or self.layer_thickness <= 0:
            raise ValueError("laser width and layer thickness must be positive")
        if self.xy_scale < 1.0:
            raise ValueError("xy_scale must be >= 1")
        d = np.subtract(self.current_laser_position, self.previous_laser_position)[:2]
        if np.hypot(*d) == 0.0:
            raise ValueError("zero-length laser segment")

    @property
    def length(self) -> float:
        d = np.subtract(self.current_laser_position, self.previous_laser_position)[:2]
        return float(np.hypot(*d))

    def cuboid(self, vertical_clearance=0.0) -> Cuboid:
        """Box of the swept volume.

        ``vertical_clearance`` shrinks the top and bottom faces by that
        fraction of the thickness, so that cells merely flush with the
        layer above or below are not captured.
        """
        p = np.asarray(self.previous_laser_position, float)
        q = np.asarray(self.current_laser_position, float)
        d = (q - p)[:2]
        e1 = np.array([d[0], d[1], 0.0]) / np.hypot(*d)
        e3 = np.array([0.0, 0.0, 1.0])
        e2 = np.cross(e3, e1)
        half = np.array([self.length * self.xy_scale, self.laser_width * self.xy_scale,
                         self.layer_thickness * (1.0 - 2.0 * vertical_clearance)]) / 2
        center = np.array([(p[0] + q[0]) / 2, (p[1] + q[1]) / 2,
                           q[2] - self.layer_thickness / 2])
        return Cuboid(center, half, np.stack([e1, e2, e3]))

    @property
    def extents(self):
        return 2 * self.cuboid().half_extents

    @property
    def vertices(self):
        return self.cuboid().vertices()

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)


def build_hav(prev, cur, width, thickness, xy_scale=1.0) -> HeatAffectedVolume:
    return HeatAffectedVolume(tuple(map(float, prev)), tuple(map(float, cur)),
                              float(width), float(thickness), float(xy_scale))


def cell_obbs(mesh: OctreeMesh, idx=None):
    """Oriented boxes of leaves: ``(centers, half_extents, axes)``.

    Axis-aligned maps give exact boxes.  Otherwise the axes are the nearest
    rotation to the averaged edge directions and the extents cover all
    eight mapped corners.
    """
    if idx is None:
        idx = np.arange(len(mesh))
    geo = mesh.geometry
    if isinstance(geo, BoxMap):
        lo = geo(mesh.anchors[idx] / ROOT_LEN)
        hi = geo((mesh.anchors[idx] + mesh.sizes[idx][:, None]) / ROOT_LEN)
        return (lo + hi) / 2, (hi - lo) / 2, None
    x = mesh.physical_corners(idx)
    center = x.mean(axis=1)
    ex = (x[:, 1] - x[:, 0] + x[:, 3] - x[:, 2] + x[:, 5] - x[:, 4] + x[:, 7] - x[:, 6]) / 4
    ey = (x[:, 2] - x[:, 0] + x[:, 3] - x[:, 1] + x[:, 6] - x[:, 4] + x[:, 7] - x[:, 5]) / 4
    ez = (x[:, 4] - x[:, 0] + x[:, 5] - x[:, 1] + x[:, 6] - x[:, 2] + x[:, 7] - x[:, 3]) / 4
    M = np.stack([ex, ey, ez], axis=1)  # rows are edge directions
    if np.any(np.linalg.det(M) <= 0):
        raise InvalidCuboidError("inverted or degenerate mapped cell")
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    rel = x - center[:, None, :]
    half = np.max(np.abs(np.einsum("nck,nik->nci", rel, R)), axis=1)
    return center, half, R


def cell_obb(mesh: OctreeMesh, leaf) -> Cuboid:
    i = mesh.index_of(leaf)
    c, h, R = cell_obbs(mesh, np.array([i]))
    return Cuboid(c[0], h[0], np.eye(3) if R is None else R[0])


def overlaps_search_volume(mesh: OctreeMesh, box: Cuboid, ranges=None) -> np.ndarray:
    """Per-leaf intersection flag against ``box``.

    ``ranges`` lists the leaf ranges of each part; parts whose bounding box
    misses the search box skip the leaf loop.
    """
    n = len(mesh)
    ranges = ranges or [(0, n)]
    out = np.zeros(n, bool)
    blo, bhi = box.bounds()
    for lo, hi in ranges:
        if lo == hi:
            continue
        idx = np.arange(lo, hi)
        c, h, R = cell_obbs(mesh, idx)
        if R is None:
            plo, phi = (c - h).min(axis=0), (c + h).max(axis=0)
        else:
            r = np.einsum("nij,ni->nj", np.abs(R), h)
            plo, phi = (c - r).min(axis=0), (c + r).max(axis=0)
        if np.any(phi < blo) or np.any(plo > bhi):
            continue
        out[lo:hi] = overlaps_many(box, c, h, R)
    return out


def _vertical_range(mesh: OctreeMesh):
    x = mesh.physical_corners()
    return x[..., 2].min(axis=1), x[..., 2].max(axis=1)


@dataclass
class TransformResult:
    mesh: OctreeMesh
    status: np.ndarray
    affected: np.ndarray   # leaves intersecting the search box (all at max level)
    activated: np.ndarray  # the subset that was inactive before
    passes: int


def transform_to_hav(mesh: OctreeMesh, status, hav, max_level, min_level=None,
                     search_min_level=None, on_transform=None, ranges=None,
                     vertical_clearance=1e-6) -> TransformResult:
    """Refine onto the search box until every intersecting leaf is at ``max_level``.

    Each pass flags intersecting leaves for refinement and the others for
    coarsening (down to ``search_min_level`` inside the horizontal slab of
    the search box, ``min_level`` elsewhere), then refines/coarsens with
    status-uniform octets only, restores 2:1 balance and calls
    ``on_transform(old_mesh, old_status, new_mesh, new_status, origin)``.
    Intersecting leaves are finally activated.

    ``hav`` may be a :class:`HeatAffectedVolume` or a :class:`Cuboid`.
    """
    min_level = mesh.min_level if min_level is None else min_level
    search_min_level = min_level if search_min_level is None else search_min_level
    if not (min_level <= search_min_level <= max_level <= MAX_LEVEL):
        raise ValueError("need min_level <= search_min_level <= max_level")
    box = hav.cuboid(vertical_clearance) if isinstance(hav, HeatAffectedVolume) else hav
    blo, bhi = box.bounds()
    status = np.asarray(status)
    bound = max_level - min_level + 1
    work = OctreeMesh(mesh.levels, mesh.anchors, min_level, max_level, mesh.geometry)

    passes = 0
    while True:
        passes += 1
        if passes > bound + 1:
            raise SearchDidNotConvergeError(
                f"search exceeded {bound} passes; mesh has {len(work)} leaves")
        rng = ranges(work) if callable(ranges) else None
        hit = overlaps_search_volume(work, box, rng)
        zlo, zhi = _vertical_range(work)
        in_slab = (zhi >= blo[2]) & (zlo <= bhi[2])
        lv = work.levels
        floor = np.where(in_slab, search_min_level, min_level)
        refine = (hit & (lv < max_level)) | (in_slab & (lv < search_min_level))
        if not refine.any():
            break
        flags = np.where(refine, 1, np.where(~hit & (lv > floor), -1, 0))
        new, org = refine_and_coarsen(work, flags, group_codes=status, return_origin=True)
        new, org2 = enforce_2to1_balance(new, return_origin=True)
        origin = org[org2]
        new_status = status[origin]
        if on_transform is not None:
            on_transform(work, status, new, new_status, origin)
        work, status = new, new_status

    if passes > bound:
        raise SearchDidNotConvergeError(f"search needed {passes} passes, bound is {bound}")
    activated = np.nonzero(hit & ~is_active(status))[0]
    status = status.copy()
    status[hit] = ACTIVE
    out = OctreeMesh(work.levels, work.anchors, mesh.min_level, mesh.max_level, mesh.geometry)
    return TransformResult(out, status, np.nonzero(hit)[0], activated, passes)
