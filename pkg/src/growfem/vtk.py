"""Legacy ASCII VTK unstructured-grid output of hexahedral leaves."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .birth import is_active
from .fe_space import evaluate_at_lattice, key_coords, node_key
from .octree import ROOT_LEN

#: child-index corner order -> VTK_HEXAHEDRON order
VTK_HEX = np.array([0, 1, 3, 2, 4, 5, 7, 6])
VTK_HEXAHEDRON = 12


def write_vtk(path, mesh, status, dofmap=None, U=None, include_inactive=True, fill=0.0):
    """Write leaves as hexahedra with point data ``temperature`` and cell
    data ``status`` (0/1) and ``level``.  Points outside the active region
    get ``fill``."""
    status = np.asarray(status)
    act = is_active(status)
    cells = np.arange(len(mesh)) if include_inactive else np.nonzero(act)[0]
    corners = mesh.corners(cells)
    keys, inv = np.unique(node_key(corners), return_inverse=True)
    inv = inv.reshape(-1, 8)
    lattice = key_coords(keys)
    pts = mesh.geometry(lattice / ROOT_LEN) if len(lattice) else np.zeros((0, 3))
    if dofmap is not None and U is not None:
        temp = evaluate_at_lattice(dofmap, U, lattice, fill=fill)
    else:
        temp = np.full(len(lattice), fill)
    lines = ["# vtk DataFile Version 3.0", "growfem", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    lines.append(f"CELLS {len(cells)} {9 * len(cells)}")
    lines += ["8 " + " ".join(map(str, row)) for row in inv[:, VTK_HEX].tolist()]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(VTK_HEXAHEDRON)] * len(cells)
    lines += [f"CELL_DATA {len(cells)}", "SCALARS status int 1", "LOOKUP_TABLE default"]
    lines += [str(int(v)) for v in act[cells]]
    lines += ["SCALARS level int 1", "LOOKUP_TABLE default"]
    lines += [str(int(v)) for v in mesh.levels[cells]]
    lines += [f"POINT_DATA {len(pts)}", "SCALARS temperature double 1", "LOOKUP_TABLE default"]
    lines += [repr(float(v)) for v in temp]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path) -> dict:
    """Minimal reader for files produced by :func:`write_vtk`."""
    tokens = Path(path).read_text().split("\n")
    out = {"cell_data": {}, "point_data": {}}
    i = 4
    mode = None
    while i < len(tokens):
        line = tokens[i].strip()
        i += 1
        if not line:
            continue
        head = line.split()
        if head[0] == "POINTS":
            n = int(head[1])
            out["points"] = np.array([list(map(float, tokens[i + k].split())) for k in range(n)]).reshape(n, 3)
            i += n
        elif head[0] == "CELLS":
            n = int(head[1])
            out["cells"] = np.array([list(map(int, tokens[i + k].split()))[1:] for k in range(n)],
                                    np.int64).reshape(n, 8)
            i += n
        elif head[0] == "CELL_TYPES":
            n = int(head[1])
            out["cell_types"] = np.array([int(tokens[i + k]) for k in range(n)])
            i += n
        elif head[0] in ("CELL_DATA", "POINT_DATA"):
            mode = ("cell_data" if head[0] == "CELL_DATA" else "point_data", int(head[1]))
        elif head[0] == "SCALARS":
            name, kind = head[1], head[2]
            i += 1  # lookup table line
            n = mode[1]
            conv = int if kind == "int" else float
            out[mode[0]][name] = np.array([conv(tokens[i + k]) for k in range(n)])
            i += n
    return out
