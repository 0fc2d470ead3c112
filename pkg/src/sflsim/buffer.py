"""Server-side replay buffer and the periodic transmission switch.

Devices transmit activations only at rounds where the switch is on
(t mod period == 0, so round 0 always transmits); between transmissions the
server replays the cached record for each (device, batch) key. Keys are
stable because the batch partition is fixed across rounds. The buffer can
optionally spill records to disk as {device}_{batch}.qact files holding the
exact wire bytes.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import quantize


class BufferError(ValueError):
    """Switch misuse or storing outside a transmission round."""


class BufferMiss(KeyError):
    """Fetch before the first refresh of a (device, batch) key."""


def switch_is_on(t, period):
    """True at transmission rounds: t mod period == 0."""
    if int(t) != t or int(period) != period:
        raise BufferError("round index and period must be integers")
    if t < 0:
        raise BufferError(f"round index must be >= 0, got {t}")
    if period < 1:
        raise BufferError(f"period must be >= 1, got {period}")
    return t % period == 0


class ReplayBuffer:
    """Latest activation record per (device, batch) key."""

    def __init__(self, period, spill_dir=None):
        if period < 1:
            raise BufferError(f"period must be >= 1, got {period}")
        self.period = int(period)
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        if self.spill_dir is not None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
        self._records = {}
        self._sizes = {}

    def _path(self, device_id, batch_index):
        return self.spill_dir / f"{device_id}_{batch_index}.qact"

    def store(self, record):
        """Cache a record; only legal while the switch is on for its round."""
        if not switch_is_on(record.round_tag, self.period):
            raise BufferError(
                f"store at round {record.round_tag}: switch is off (period {self.period})"
            )
        key = (record.device_id, record.batch_index)
        blob = quantize.serialize(record)
        self._sizes[key] = len(blob)
        if self.spill_dir is not None:
            with open(self._path(*key), "wb") as fh:
                fh.write(blob)
            self._records[key] = None
        else:
            self._records[key] = record

    def fetch(self, device_id, batch_index):
        """Latest record for a key; a miss before the first refresh is an error."""
        key = (device_id, batch_index)
        if key not in self._records:
            raise BufferMiss(f"no cached activation for device {device_id} batch {batch_index}")
        if self.spill_dir is not None:
            return quantize.parse(self._path(*key).read_bytes())
        return self._records[key]

    def __len__(self):
        return len(self._records)

    def keys(self):
        return list(self._records)

    def total_bytes(self):
        """Wire-format footprint of all live records (the buffer-memory cost)."""
        return sum(self._sizes.values())


def buffer_distance_proxy(buf, probes):
    """Mean distance between cached and fresh activations.

    probes: iterable of (device_id, batch_index, fresh activation batch).
    For each probe the cached record is decoded and compared to the fresh
    tensor; the distance is the per-sample L2 norm averaged over samples,
    then averaged over probes. Zero only when the cache is bit-fresh.
    """
    dists = []
    for device_id, batch_index, fresh in probes:
        cached = quantize.decode(buf.fetch(device_id, batch_index), dtype=np.float64)
        fresh64 = np.asarray(fresh, dtype=np.float64)
        if cached.shape != fresh64.shape:
            raise BufferError(
                f"probe shape {fresh64.shape} != cached shape {cached.shape}"
            )
        diff = (cached - fresh64).reshape(len(fresh64), -1)
        dists.append(float(np.mean(np.linalg.norm(diff, axis=1))))
    if not dists:
        raise BufferError("distance proxy needs at least one probe")
    return float(np.mean(dists))
