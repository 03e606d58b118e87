"""
Linear single-root octree with Morton-ordered leaves.

Leaves are stored as two parallel arrays, ``levels`` (N,) and ``anchors``
(N, 3), both integer and expressed in finest-level quanta of the root box
(the root spans ``[0, 2**MAX_LEVEL)^3``).  The child index of an octant
inside its parent is ``c = x + 2*y + 4*z`` with ``x``, ``y``, ``z`` the
per-level coordinate bits, so the x bit is the least significant.

Transformations never mutate a mesh; they return a new :class:`OctreeMesh`
and, on request, an ``origin`` array mapping each new leaf to the old leaf
it was derived from (the parent for refined children, the first child for
coarsened parents).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .geometry import IDENTITY

logger = logging.getLogger(__name__)

MAX_LEVEL = 19
ROOT_LEN = 1 << MAX_LEVEL

#: child offsets in units of the child size, ordered by child index
CHILD_OFFSETS = np.array(
    [[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
)
#: the 26 neighbour directions
DIRECTIONS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


class InvalidKeyError(ValueError):
    """Raised for octant keys that are misaligned or outside the root."""


class LeafNotFoundError(KeyError):
    """Raised when an octant is not a leaf of the mesh."""


def _spread_bits(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_keys(anchors) -> np.ndarray:
    """Full-depth Morton keys of lattice points, shape (...,) int64.

    For leaves of a tree these keys order the leaves depth first.
    """
    a = np.asarray(anchors, dtype=np.int64)
    key = (_spread_bits(a[..., 0])
           | (_spread_bits(a[..., 1]) << np.uint64(1))
           | (_spread_bits(a[..., 2]) << np.uint64(2)))
    return key.astype(np.int64)


@dataclass(frozen=True, order=True)
class OctantKey:
    """An octant identified by its level and its anchor (lower corner)."""

    level: int
    x: int
    y: int
    z: int

    def __post_init__(self):
        if not 0 <= self.level <= MAX_LEVEL:
            raise InvalidKeyError(f"level {self.level} outside [0, {MAX_LEVEL}]")
        step = 1 << (MAX_LEVEL - self.level)
        for c in (self.x, self.y, self.z):
            if c < 0 or c + step > ROOT_LEN:
                raise InvalidKeyError(f"anchor {self.anchor} outside the root box")
            if c % step:
                raise InvalidKeyError(
                    f"anchor {self.anchor} not aligned to level {self.level}")

    @property
    def anchor(self):
        return (self.x, self.y, self.z)

    @property
    def size(self) -> int:
        return 1 << (MAX_LEVEL - self.level)

    @classmethod
    def from_level_coords(cls, level: int, i: int, j: int, k: int) -> "OctantKey":
        """Build a key from per-level integer coordinates (0..2**level - 1)."""
        s = 1 << (MAX_LEVEL - level)
        return cls(level, i * s, j * s, k * s)


def morton_encode(key: OctantKey) -> int:
    """Level-relative Morton index of ``key``.

    One base-8 digit per level, most significant level first, each digit
    being the child index ``x + 2y + 4z`` at that level.  Shifting the
    result left by ``3 * (MAX_LEVEL - level)`` gives the full-depth key
    used to order leaves.

    Examples
    --------
    >>> morton_encode(OctantKey(0, 0, 0, 0))
    0
    >>> morton_encode(OctantKey.from_level_coords(1, 1, 0, 1))
    5
    """
    if not isinstance(key, OctantKey):
        raise InvalidKeyError(f"expected OctantKey, got {type(key).__name__}")
    full = int(morton_keys(np.array(key.anchor)))
    return full >> (3 * (MAX_LEVEL - key.level))


@dataclass(frozen=True, eq=False)
class OctreeMesh:
    """Leaves of a single-root octree sorted by Morton key.

    Attributes
    ----------
    levels : ndarray of int64, shape (N,)
    anchors : ndarray of int64, shape (N, 3)
        Lower corners in finest-level quanta.
    min_level, max_level : int
        Bounds honoured by :func:`refine_and_coarsen`.
    geometry : callable
        Map from unit-cube coordinates to physical coordinates (mm).
    """

    levels: np.ndarray
    anchors: np.ndarray
    min_level: int = 0
    max_level: int = MAX_LEVEL
    geometry: Callable = field(default=IDENTITY)

    def __post_init__(self):
        if not 0 <= self.min_level <= self.max_level <= MAX_LEVEL:
            raise ValueError("need 0 <= min_level <= max_level <= MAX_LEVEL")

    # -- construction ---------------------------------------------------
    @classmethod
    def root(cls, min_level=0, max_level=MAX_LEVEL, geometry=IDENTITY):
        return cls(np.zeros(1, np.int64), np.zeros((1, 3), np.int64),
                   min_level, max_level, geometry)

    @classmethod
    def uniform(cls, level, min_level=0, max_level=MAX_LEVEL, geometry=IDENTITY):
        n = 1 << level
        ijk = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), -1)
        anchors = ijk.reshape(-1, 3).astype(np.int64) << (MAX_LEVEL - level)
        order = np.argsort(morton_keys(anchors), kind="stable")
        return cls(np.full(n ** 3, level, np.int64), anchors[order],
                   min_level, max_level, geometry)

    def with_leaves(self, levels, anchors) -> "OctreeMesh":
        return OctreeMesh(levels, anchors, self.min_level, self.max_level,
                          self.geometry)

    # -- basic queries --------------------------------------------------
    def __len__(self):
        return len(self.levels)

    @cached_property
    def keys(self) -> np.ndarray:
        return morton_keys(self.anchors)

    @property
    def sizes(self) -> np.ndarray:
        return np.left_shift(1, MAX_LEVEL - self.levels)

    def leaf(self, i: int) -> OctantKey:
        a = self.anchors[i]
        return OctantKey(int(self.levels[i]), int(a[0]), int(a[1]), int(a[2]))

    def leaf_keys(self):
        return [self.leaf(i) for i in range(len(self))]

    def index_of(self, key: OctantKey) -> int:
        """Position of ``key`` among the leaves."""
        k = int(morton_keys(np.array(key.anchor)))
        i = int(np.searchsorted(self.keys, k))
        if i >= len(self) or self.keys[i] != k or self.levels[i] != key.level:
            raise LeafNotFoundError(key)
        return i

    def locate(self, points) -> np.ndarray:
        """Index of the leaf containing each finest-level voxel ``points``.

        ``points`` are integer lattice coordinates inside the root; the voxel
        ``[p, p + 1)^3`` lies in exactly one leaf.
        """
        k = morton_keys(points)
        return np.searchsorted(self.keys, k, side="right") - 1

    def corners(self, idx=None) -> np.ndarray:
        """Integer corner coordinates, shape (n, 8, 3), child-index order."""
        lv = self.levels if idx is None else self.levels[idx]
        an = self.anchors if idx is None else self.anchors[idx]
        s = np.left_shift(1, MAX_LEVEL - lv)
        return an[:, None, :] + CHILD_OFFSETS[None, :, :] * s[:, None, None]

    def physical_corners(self, idx=None) -> np.ndarray:
        return self.geometry(self.corners(idx) / ROOT_LEN)

    def volume_quanta(self) -> int:
        return int(sum(8 ** (MAX_LEVEL - int(l)) for l in self.levels))

    @cached_property
    def neighbour_pairs(self):
        """Symmetric vertex adjacency as index arrays ``(i, j)``, i != j."""
        i, j = _coarse_neighbour_pairs(self)
        a = np.concatenate([i, j])
        b = np.concatenate([j, i])
        code = np.unique(a * len(self) + b)
        return code // len(self), code % len(self)

    @cached_property
    def adjacency(self):
        """CSR-style ``(indptr, indices)`` of :attr:`neighbour_pairs`."""
        i, j = self.neighbour_pairs
        indptr = np.zeros(len(self) + 1, np.int64)
        np.add.at(indptr, i + 1, 1)
        return np.cumsum(indptr), j

    def dump(self) -> str:
        """Text dump, one leaf per line: ``level morton x y z``."""
        shift = 3 * (MAX_LEVEL - self.levels)
        codes = self.keys >> shift
        return "".join(
            f"{l} {m} {a[0]} {a[1]} {a[2]}\n"
            for l, m, a in zip(self.levels.tolist(), codes.tolist(),
                               self.anchors.tolist()))


def _coarse_neighbour_pairs(mesh: OctreeMesh):
    """Pairs (i, j) with leaf j touching leaf i and ``level[j] <= level[i]``.

    Every adjacent pair appears at least once, from the side of the finer
    (or equal) leaf.
    """
    n = len(mesh)
    s = mesh.sizes
    probes = mesh.anchors[:, None, :] + DIRECTIONS[None] * s[:, None, None]
    inside = np.all((probes >= 0) & (probes + s[:, None, None] <= ROOT_LEN), axis=-1)
    ii, dd = np.nonzero(inside)
    jj = mesh.locate(probes[ii, dd])
    keep = mesh.levels[jj] <= mesh.levels[ii]
    ii, jj = ii[keep], jj[keep]
    code = np.unique(ii * n + jj)
    return code // n, code % n


def adjacent_leaves(mesh: OctreeMesh, leaf: OctantKey) -> list:
    """All leaves sharing at least a vertex with ``leaf``."""
    i = mesh.index_of(leaf)
    indptr, indices = mesh.adjacency
    return [mesh.leaf(int(j)) for j in indices[indptr[i]:indptr[i + 1]]]


def leaf_box(mesh: OctreeMesh, leaf: OctantKey) -> np.ndarray:
    """Physical corners (8, 3) of ``leaf`` in child-index order."""
    i = mesh.index_of(leaf)
    return mesh.physical_corners(np.array([i]))[0]


def child_index(levels, anchors) -> np.ndarray:
    """Position of each octant inside its parent (undefined for the root)."""
    shift = (MAX_LEVEL - np.asarray(levels))[:, None]
    bits = (np.asarray(anchors) >> shift) & 1
    return bits[:, 0] + 2 * bits[:, 1] + 4 * bits[:, 2]


def _complete_octets(mesh: OctreeMesh) -> np.ndarray:
    """Start positions of runs of 8 consecutive leaves that are siblings."""
    n = len(mesh)
    if n < 8:
        return np.zeros(0, np.int64)
    lv = mesh.levels
    start = np.nonzero((lv[: n - 7] > 0) & (child_index(lv, mesh.anchors)[: n - 7] == 0))[0]
    last = start + 7
    same = lv[last] == lv[start]
    shift = (MAX_LEVEL - lv[start] + 1)[:, None]
    same &= np.all((mesh.anchors[start] >> shift) == (mesh.anchors[last] >> shift), axis=1)
    # a child 0 and a child 7 of one parent with equal level bracket exactly
    # six leaves, which must then be the remaining siblings
    return start[same]


def refine_and_coarsen(mesh: OctreeMesh, flags, group_codes=None,
                       return_origin=False):
    """Apply per-leaf refinement flags (-1 coarsen, 0 keep, +1 refine).

    A sibling octet is merged only when all eight siblings carry -1 (and,
    if ``group_codes`` is given, all eight share one code); partially
    flagged octets are left unchanged.  Flags that would cross
    ``mesh.max_level`` or ``mesh.min_level`` are clamped to 0 and the
    number clamped is logged.
    """
    flags = np.asarray(flags, dtype=np.int64)
    n = len(mesh)
    if flags.shape != (n,):
        raise ValueError(f"flags must have shape ({n},), got {flags.shape}")
    lv = mesh.levels
    over = (flags > 0) & (lv >= mesh.max_level)
    under = (flags < 0) & (lv <= mesh.min_level)
    if over.any() or under.any():
        logger.debug("clamped %d refine and %d coarsen flags", over.sum(), under.sum())
        flags = np.where(over | under, 0, flags)

    action = np.where(flags > 0, 1, 0)
    starts = _complete_octets(mesh)
    if len(starts):
        win = flags[starts[:, None] + np.arange(8)]
        ok = np.all(win < 0, axis=1)
        if group_codes is not None:
            g = np.asarray(group_codes)[starts[:, None] + np.arange(8)]
            ok &= np.all(g == g[:, :1], axis=1)
        heads = starts[ok]
        action[heads] = 2
        tails = (heads[:, None] + np.arange(1, 8)).ravel()
        action[tails] = 3

    counts = np.array([1, 8, 1, 0])[action]
    origin = np.repeat(np.arange(n), counts)
    kind = action[origin]
    first = np.cumsum(counts) - counts
    local = np.arange(len(origin)) - first[origin]

    new_lv = lv[origin].copy()
    new_an = mesh.anchors[origin].copy()
    ref = kind == 1
    if ref.any():
        new_lv[ref] += 1
        half = np.left_shift(1, MAX_LEVEL - new_lv[ref])
        new_an[ref] += CHILD_OFFSETS[local[ref]] * half[:, None]
    crs = kind == 2
    if crs.any():
        new_lv[crs] -= 1
        shift = (MAX_LEVEL - new_lv[crs])[:, None]
        new_an[crs] = (new_an[crs] >> shift) << shift
    out = mesh.with_leaves(new_lv, new_an)
    return (out, origin) if return_origin else out


def enforce_2to1_balance(mesh: OctreeMesh, return_origin=False):
    """Refine until leaves sharing a vertex differ by at most one level.

    Only the coarse side of each violating pair is refined, one level per
    sweep, so the result is the coarsest balanced refinement of ``mesh``.
    """
    origin = np.arange(len(mesh))
    while True:
        i, j = _coarse_neighbour_pairs(mesh)
        bad = mesh.levels[i] - mesh.levels[j] >= 2
        if not bad.any():
            break
        flags = np.zeros(len(mesh), np.int64)
        flags[j[bad]] = 1
        # balance refinements may exceed the user max level by construction
        unbounded = OctreeMesh(mesh.levels, mesh.anchors, 0, MAX_LEVEL, mesh.geometry)
        refined, org = refine_and_coarsen(unbounded, flags, return_origin=True)
        mesh = mesh.with_leaves(refined.levels, refined.anchors)
        origin = origin[org]
    return (mesh, origin) if return_origin else mesh


def is_balanced(mesh: OctreeMesh) -> bool:
    i, j = mesh.neighbour_pairs
    return not np.any(np.abs(mesh.levels[i] - mesh.levels[j]) >= 2)


def from_dump(text: str, **kw) -> OctreeMesh:
    """Inverse of :meth:`OctreeMesh.dump`."""
    rows = np.array([[int(t) for t in line.split()] for line in text.splitlines()
                     if line.strip()], dtype=np.int64).reshape(-1, 5)
    mesh = OctreeMesh(rows[:, 0].copy(), rows[:, 2:].copy(), **kw)
    shift = 3 * (MAX_LEVEL - mesh.levels)
    if not np.array_equal(mesh.keys >> shift, rows[:, 1]):
        raise InvalidKeyError("Morton column does not match the anchors")
    return mesh
