"""
Element-birth bookkeeping: which leaves belong to the computational domain.

A status array holds one int8 code per leaf.  Inactive leaves carry a tag
(gas or powder) that only matters when classifying boundary faces.
"""
from __future__ import annotations

import numpy as np

from .transport import SerialTransport

GAS = 0
ACTIVE = 1
POWDER = 2

STATUS_DTYPE = np.int8


def is_active(status) -> np.ndarray:
    return np.asarray(status) == ACTIVE


def all_inactive(n, tag=GAS) -> np.ndarray:
    return np.full(n, tag, STATUS_DTYPE)


def activate_cells(status, activated) -> np.ndarray:
    """Return a copy of ``status`` with the leaves ``activated`` switched on.

    ``activated`` is an index array or a boolean mask; nothing is ever
    switched off.
    """
    status = np.asarray(status)
    out = status.copy()
    sel = np.asarray(activated)
    if sel.size == 0:
        return out
    if sel.dtype == bool:
        if sel.shape != status.shape:
            raise IndexError("activation mask does not match the leaf count")
    elif sel.min() < 0 or sel.max() >= len(status):
        raise IndexError("activated leaf index outside the mesh")
    out[sel] = ACTIVE
    return out


def inherit_on_refine(parent_status) -> np.ndarray:
    """Statuses of the eight children of a refined leaf."""
    return np.full(8, parent_status, STATUS_DTYPE)


def coarsen_admissible(sibling_statuses) -> bool:
    """True when all eight siblings share status and tag."""
    s = np.asarray(sibling_statuses)
    if s.shape != (8,):
        raise ValueError(f"expected 8 sibling statuses, got {s.shape}")
    return bool(np.all(s == s[0]))


def transfer_status(status, origin) -> np.ndarray:
    """Status after a refine/coarsen step described by ``origin``.

    Children copy their parent; merged octets were status-uniform, so the
    parent takes the status of its first child.
    """
    return np.asarray(status)[np.asarray(origin)]


def active_submesh(mesh, status) -> np.ndarray:
    """Indices of active leaves in Morton order."""
    return np.nonzero(is_active(status))[0]


def exchange_ghost_status(local_status, partition, ghosts, transport=None):
    """Refresh ghost statuses from their owners in one exchange round.

    Parameters
    ----------
    local_status : list of ndarray
        Owned statuses per part, laid out by ``partition``.
    ghosts : list of (indices, owners)
        Ghost descriptors per part, as returned by
        :func:`growfem.partition.ghost_layer`.

    Returns
    -------
    list of ndarray
        Ghost statuses per part, aligned with ``ghosts[p][0]``.
    """
    transport = transport or SerialTransport()
    nparts = partition.num_parts
    if nparts == 1:
        return [np.zeros(0, STATUS_DTYPE)]
    outbox = [dict() for _ in range(nparts)]
    for p, (idx, owners) in enumerate(ghosts):
        for q in np.unique(owners):
            lo, _ = partition.range(int(q))
            wanted = idx[owners == q] - lo
            outbox[int(q)][p] = local_status[int(q)][wanted]
    inbox = transport.exchange(outbox, tag="ghost_status")
    out = []
    for p, (idx, owners) in enumerate(ghosts):
        vals = np.zeros(len(idx), STATUS_DTYPE)
        for q, payload in inbox[p].items():
            vals[owners == q] = payload
        out.append(vals)
    return out
