"""Smooth maps from the unit root cube to physical space (mm)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoxMap:
    """Affine map of the unit cube onto an axis-aligned box.

    ``BoxMap()`` is the identity.
    """

    origin: tuple = (0.0, 0.0, 0.0)
    size: tuple = (1.0, 1.0, 1.0)

    is_affine = True

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        return np.asarray(self.origin, float) + X * np.asarray(self.size, float)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        return (x - np.asarray(self.origin, float)) / np.asarray(self.size, float)

    @property
    def lower(self):
        return np.asarray(self.origin, float)

    @property
    def upper(self):
        return np.asarray(self.origin, float) + np.asarray(self.size, float)


@dataclass(frozen=True)
class RotationMap:
    """Rigid motion ``x = R @ (X * size) + origin``; keeps cells rectangular."""

    rotation: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    size: float = 1.0

    is_affine = True

    def __call__(self, X):
        R = np.asarray(self.rotation, float)
        X = np.asarray(X, dtype=float) * self.size
        return X @ R.T + np.asarray(self.origin, float)


@dataclass(frozen=True)
class WiggleMap:
    """Cube-to-wiggle map used for the curved-wall demo.

    The centre line ``y = w(x)`` joins two parabolic arcs with matching
    slope at mid-span; the shape is extruded along ``z``.  The map is a
    shear, so its Jacobian determinant is ``size**3`` everywhere.

    Parameters
    ----------
    size : float
        Edge length of the root cube in mm (distance between the wiggle ends).
    amplitude : float
        Peak lateral offset of the centre line in mm.
    """

    size: float = 30.72
    amplitude: float = 3.84
    origin: tuple = (0.0, 0.0, 0.0)

    is_affine = False

    def offset(self, s):
        s = np.asarray(s, dtype=float)
        first = 1.0 - (4.0 * s - 1.0) ** 2
        second = -(1.0 - (4.0 * s - 3.0) ** 2)
        return self.amplitude * np.where(s <= 0.5, first, second)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        out = X * self.size
        out[..., 1] = out[..., 1] + self.offset(X[..., 0])
        return out + np.asarray(self.origin, float)


IDENTITY = BoxMap()


def make_map(name: str, origin=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0), **kw):
    """Build a geometry map from its configuration id (``box`` or ``wiggle``)."""
    if name in ("identity", "box"):
        return BoxMap(tuple(float(v) for v in origin), tuple(float(v) for v in size))
    if name == "wiggle":
        edge = float(np.max(size))
        return WiggleMap(size=edge, origin=tuple(float(v) for v in origin), **kw)
    raise ValueError(f"unknown geometry map {name!r}")
