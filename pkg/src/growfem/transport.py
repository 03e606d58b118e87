"""In-process stand-ins for the message layer between parts.

Both transports move data between parts with the same bulk-synchronous
contract: ``exchange`` delivers one round of point-to-point messages and
``allreduce`` combines per-part partial results in fixed part order, so
reductions are reproducible for any part count.
"""
from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np


class CommunicationError(RuntimeError):
    pass


def _copy(payload):
    if isinstance(payload, np.ndarray):
        return payload.copy()
    return payload


class SerialTransport:
    """Deterministic loop over parts; the default for tests."""

    def __init__(self):
        self.counts = Counter()
        self.volume = Counter()

    def map(self, fn, items):
        return [fn(item) for item in items]

    def exchange(self, outbox, tag="data"):
        """Deliver ``outbox[src][dst] -> payload``; returns ``inbox[dst][src]``."""
        nparts = len(outbox)
        inbox = [dict() for _ in range(nparts)]
        for src, messages in enumerate(outbox):
            for dst, payload in messages.items():
                if not 0 <= dst < nparts:
                    raise CommunicationError(f"part {src} addressed unknown part {dst}")
                inbox[dst][src] = _copy(payload)
                self.volume[tag] += getattr(payload, "size", 1)
        self.counts[tag] += 1
        return inbox

    def allreduce(self, partials, tag="reduce"):
        self.counts[tag] += 1
        total = partials[0]
        for value in partials[1:]:
            total = total + value
        return total


class ThreadedTransport(SerialTransport):
    """Runs per-part work on a thread pool; reductions stay in part order."""

    def __init__(self, max_workers=None):
        super().__init__()
        self._pool = ThreadPoolExecutor(max_workers=max_workers)

    def map(self, fn, items):
        return list(self._pool.map(fn, items))

    def close(self):
        self._pool.shutdown()
