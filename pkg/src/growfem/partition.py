"""
Weighted z-order partitioning, payload migration, ghost layers and
load-imbalance statistics.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .transport import SerialTransport


@dataclass(frozen=True)
class WeightFunction:
    """Per-leaf partition weight: ``w_active`` for active leaves, else ``w_inactive``."""

    w_active: int = 1
    w_inactive: int = 1

    def __post_init__(self):
        if int(self.w_active) < 1 or int(self.w_inactive) < 0:
            raise ValueError("weights must satisfy w_active >= 1, w_inactive >= 0")


@dataclass(frozen=True, eq=False)
class Partition:
    """Contiguous ranges of the Morton-ordered leaf sequence.

    ``boundaries`` has ``num_parts + 1`` entries, starting at 0 and ending
    at the leaf count; part ``p`` owns ``boundaries[p]:boundaries[p + 1]``.
    """

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries)
        if b.ndim != 1 or len(b) < 2 or b[0] != 0 or np.any(np.diff(b) < 0):
            raise ValueError(f"invalid partition boundaries {b}")

    @classmethod
    def single(cls, n):
        return cls(np.array([0, n], np.int64))

    @property
    def num_parts(self):
        return len(self.boundaries) - 1

    @property
    def num_leaves(self):
        return int(self.boundaries[-1])

    def range(self, p):
        return int(self.boundaries[p]), int(self.boundaries[p + 1])

    def owner(self, idx):
        return np.searchsorted(self.boundaries, idx, side="right") - 1

    def counts(self):
        return np.diff(self.boundaries)

    def follow(self, origin):
        """Partition of a transformed mesh keeping each leaf with the owner of its origin."""
        origin = np.asarray(origin)
        owners = self.owner(origin)
        b = np.searchsorted(owners, np.arange(self.num_parts + 1), side="left")
        b[-1] = len(origin)
        return Partition(b.astype(np.int64))

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.boundaries, other.boundaries)


def compute_weights(mesh, status, w: WeightFunction) -> np.ndarray:
    """Integer weight of every leaf from its active/inactive status."""
    from .birth import is_active

    active = is_active(status)
    if len(active) != len(mesh):
        raise ValueError("status length differs from leaf count")
    return np.where(active, int(w.w_active), int(w.w_inactive)).astype(np.int64)


def partition_by_weight(weights, num_parts) -> Partition:
    """Split the z-order sequence into ``num_parts`` contiguous ranges.

    Boundary ``k`` is placed after the first leaf whose cumulative weight
    reaches ``k * W / P``.  All arithmetic is integer, so the result is
    deterministic.  A zero total weight falls back to splitting by count.
    """
    if int(num_parts) <= 0:
        raise ValueError("number of parts must be positive")
    P = int(num_parts)
    w = np.asarray(weights, dtype=np.int64)
    n = len(w)
    total = int(w.sum())
    if total == 0:
        w = np.ones(n, np.int64)
        total = n
    cum = np.cumsum(w) * P
    targets = np.arange(1, P) * total
    cuts = np.searchsorted(cum, targets, side="left") + 1
    b = np.concatenate([[0], np.minimum(cuts, n), [n]]).astype(np.int64)
    return Partition(b)


def part_loads(values, partition: Partition) -> np.ndarray:
    """Sum of per-leaf ``values`` inside each part."""
    cum = np.concatenate([[0], np.cumsum(np.asarray(values, dtype=float))])
    return cum[partition.boundaries[1:]] - cum[partition.boundaries[:-1]]


def split(values, partition: Partition):
    values = np.asarray(values)
    return [values[slice(*partition.range(p))] for p in range(partition.num_parts)]


def redistribute(mesh, old: Partition, new: Partition, payloads, transport=None):
    """Move per-leaf payloads from their ``old`` owners to their ``new`` owners.

    ``payloads`` is either one array over all leaves or a list of per-part
    arrays laid out by ``old``.  Returns the list of per-part arrays laid
    out by ``new``.
    """
    transport = transport or SerialTransport()
    if isinstance(payloads, (list, tuple)):
        local = [np.asarray(p) for p in payloads]
        if len(local) != old.num_parts:
            raise ValueError("need one payload block per old part")
    else:
        local = split(payloads, old)
    sizes = [len(block) for block in local]
    if sum(sizes) != len(mesh) or old.num_leaves != len(mesh) or new.num_leaves != len(mesh):
        raise ValueError("payload count differs from leaf count")
    if old.num_parts != new.num_parts:
        raise ValueError("old and new partitions have different part counts")

    # one exchange round per call; blocks staying on their part never travel
    outbox, kept = [], {}
    for p in range(old.num_parts):
        lo, hi = old.range(p)
        messages = {}
        for q in range(new.num_parts):
            a, b = max(lo, new.boundaries[q]), min(hi, new.boundaries[q + 1])
            if a < b:
                if q == p:
                    kept[p] = local[p][a - lo:b - lo].copy()
                else:
                    messages[q] = local[p][a - lo:b - lo]
        outbox.append(messages)
    inbox = transport.exchange(outbox, tag="migrate")
    out = []
    for q in range(new.num_parts):
        if q in kept:
            inbox[q][q] = kept[q]
        pieces = [inbox[q][src] for src in sorted(inbox[q])]
        out.append(np.concatenate(pieces) if pieces else local[0][:0].copy())
    return out


def ghost_layer(mesh, partition: Partition, part_id: int):
    """Leaves owned by other parts that share a vertex with a leaf of ``part_id``.

    Returns ``(indices, owners)`` sorted by Morton order.
    """
    if not 0 <= part_id < partition.num_parts:
        raise ValueError(f"part {part_id} out of range")
    lo, hi = partition.range(part_id)
    if lo == hi or partition.num_parts == 1:
        empty = np.zeros(0, np.int64)
        return empty, empty
    indptr, indices = mesh.adjacency
    nbrs = indices[indptr[lo]:indptr[hi]]
    g = np.unique(nbrs[(nbrs < lo) | (nbrs >= hi)])
    return g, partition.owner(g)


@dataclass
class ImbalanceReport:
    """Per-step dispersion of per-part quantities.

    ``mean``, ``sigma`` and ``cv`` map each quantity name to an array over
    steps; ``cv_time_mean`` holds the time average of the per-step ``cv``.
    """

    mean: dict
    sigma: dict
    cv: dict
    cv_time_mean: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "quantity", "mean", "sigma", "cv"])
        for name in self.mean:
            for step, (m, s, c) in enumerate(zip(self.mean[name], self.sigma[name], self.cv[name])):
                writer.writerow([step, name, repr(float(m)), repr(float(s)), repr(float(c))])
        return buf.getvalue()


def imbalance_stats(samples) -> ImbalanceReport:
    """Mean, population standard deviation and coefficient of variation.

    Parameters
    ----------
    samples : mapping of name -> array_like (steps, parts)
        A 1-D array is treated as a single step.
    """
    if not samples:
        raise ValueError("no samples")
    mean, sigma, cv, cvt = {}, {}, {}, {}
    for name, values in samples.items():
        x = np.atleast_2d(np.asarray(values, dtype=float))
        if x.size == 0:
            raise ValueError(f"empty samples for {name!r}")
        mu = x.mean(axis=1)
        sd = x.std(axis=1)
        c = np.divide(sd, mu, out=np.zeros_like(sd), where=mu > 0)
        mean[name], sigma[name], cv[name] = mu, sd, c
        cvt[name] = float(c.mean())
    return ImbalanceReport(mean, sigma, cv, cvt)
