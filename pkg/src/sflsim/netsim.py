"""Analytic communication/computation cost model and first-order latency.

Byte accounting is exact and integer: 4-byte float32 model/activation
elements, 1-byte quantized codes, 2-byte labels, and the real wire-format
record overhead for replay transmissions. The traffic ledger records what a
simulated run actually moved; the analytic model predicts the same totals
to the byte. Latency is first-order: transfer time = bytes * 8 / (Mbps *
1e6), sequential with compute, no pipelining.

Methods: classic (full-model FedAvg), split (activation up, gradient down),
local_loss (activation up only, auxiliary head on device), replay_tx (a
replay-mode transmission round), replay_buffer (a replay-mode cached round).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import models

GIB = 2**30

METHODS = ("classic", "split", "local_loss", "replay_tx", "replay_buffer")
PURPOSES = ("activation", "gradient", "model_up", "model_down", "labels")
DIRECTIONS = ("up", "down")

FLOAT_BYTES = 4
CODE_BYTES = 1
LABEL_BYTES = 2


class NetsimError(ValueError):
    """Unknown method/purpose, bad bandwidth, or malformed ledger input."""


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    uplink_mbps: float
    downlink_mbps: float


PROFILES = {
    "wifi": NetworkProfile("wifi", 50.0, 50.0),
    "4g": NetworkProfile("4g", 10.0, 42.0),
    "3g": NetworkProfile("3g", 3.0, 6.0),
}


@dataclass(frozen=True)
class LedgerEntry:
    round_index: int
    device: int
    direction: str
    purpose: str
    nbytes: int


class TrafficLedger:
    """Append-only record of every simulated transfer."""

    def __init__(self):
        self.entries = []

    def record(self, round_index, device, direction, purpose, nbytes):
        if direction not in DIRECTIONS:
            raise NetsimError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        if purpose not in PURPOSES:
            raise NetsimError(f"purpose must be one of {PURPOSES}, got {purpose!r}")
        if nbytes < 0:
            raise NetsimError("byte counts cannot be negative")
        self.entries.append(LedgerEntry(round_index, device, direction, purpose, int(nbytes)))

    def total(self, direction=None, purpose=None, round_index=None, device=None):
        out = 0
        for e in self.entries:
            if direction is not None and e.direction != direction:
                continue
            if purpose is not None and e.purpose != purpose:
                continue
            if round_index is not None and e.round_index != round_index:
                continue
            if device is not None and e.device != device:
                continue
            out += e.nbytes
        return out

    def per_device_traffic(self, round_index=None):
        """{device: (bytes up, bytes down)} over an optional round slice."""
        out = {}
        for e in self.entries:
            if round_index is not None and e.round_index != round_index:
                continue
            up, down = out.get(e.device, (0, 0))
            if e.direction == "up":
                up += e.nbytes
            else:
                down += e.nbytes
            out[e.device] = (up, down)
        return out

    def devices(self):
        return sorted({e.device for e in self.entries})


@dataclass
class CostReport:
    """Per-device byte prediction for one round of one method."""

    method: str
    devices: int
    purpose_bytes: dict = field(default_factory=dict)  # purpose -> (up, down) per device

    @property
    def per_device_up(self):
        return sum(up for up, _ in self.purpose_bytes.values())

    @property
    def per_device_down(self):
        return sum(down for _, down in self.purpose_bytes.values())

    @property
    def total_bytes(self):
        return self.devices * (self.per_device_up + self.per_device_down)

    @property
    def gib(self):
        return self.total_bytes / GIB

    def per_device_traffic(self):
        return {d: (self.per_device_up, self.per_device_down) for d in range(self.devices)}


def record_bytes(batch, act_elements, rank, quantized):
    """Exact activation-record wire size for one batch.

    Mirrors the serialized layout: 27 fixed header bytes + 4 per dim +
    2 per label + payload (1 byte/element quantized, 4 raw).
    """
    header = 27 + 4 * rank
    payload = batch * act_elements * (CODE_BYTES if quantized else FLOAT_BYTES)
    return header + LABEL_BYTES * batch + payload


def _batched_record_bytes(samples, batch_size, act_elements, rank, quantized):
    full, rem = divmod(samples, batch_size)
    total = full * record_bytes(batch_size, act_elements, rank, quantized)
    if rem:
        total += record_bytes(rem, act_elements, rank, quantized)
    return total


def comm_bytes_per_round(method, spec, op_index=None, *, samples_per_device,
                         devices, batch_size, quantized=True, freeze_device=False):
    """Exact per-round traffic prediction for one method at one setting."""
    if method not in METHODS:
        raise NetsimError(f"unknown method {method!r}")
    facts = models.analyze(spec, op_index)
    zeros = {p: (0, 0) for p in PURPOSES}
    report = CostReport(method=method, devices=devices, purpose_bytes=zeros)
    act_raw = facts.activation_elements * FLOAT_BYTES * samples_per_device
    if method == "classic":
        model = facts.total_params * FLOAT_BYTES
        report.purpose_bytes["model_up"] = (model, 0)
        report.purpose_bytes["model_down"] = (0, model)
    elif method == "split":
        report.purpose_bytes["activation"] = (act_raw, 0)
        report.purpose_bytes["gradient"] = (0, act_raw)
        report.purpose_bytes["labels"] = (LABEL_BYTES * samples_per_device, 0)
        if not freeze_device:
            model = facts.device_params * FLOAT_BYTES
            report.purpose_bytes["model_up"] = (model, 0)
            report.purpose_bytes["model_down"] = (0, model)
    elif method == "local_loss":
        report.purpose_bytes["activation"] = (act_raw, 0)
        report.purpose_bytes["labels"] = (LABEL_BYTES * samples_per_device, 0)
        head_params = facts.activation_elements * spec.num_classes + spec.num_classes
        model = (facts.device_params + head_params) * FLOAT_BYTES
        report.purpose_bytes["model_up"] = (model, 0)
        report.purpose_bytes["model_down"] = (0, model)
    elif method == "replay_tx":
        rank = 1 + len(facts.activation_shape)
        wire = _batched_record_bytes(samples_per_device, batch_size,
                                     facts.activation_elements, rank, quantized)
        report.purpose_bytes["activation"] = (wire, 0)
    # replay_buffer: all zeros
    return report


def cost_ratio(method_a, method_b, spec, op_index=None, **setting):
    """Exact byte quotient of two methods' per-round costs."""
    a = comm_bytes_per_round(method_a, spec, op_index, **setting)
    b = comm_bytes_per_round(method_b, spec, op_index, **setting)
    if b.total_bytes == 0:
        raise NetsimError(f"{method_b} moves zero bytes; ratio undefined")
    return a.total_bytes / b.total_bytes


@dataclass(frozen=True)
class ComputeReport:
    device_units: float
    server_units: float


def computation_units(method, spec, op_index=None, *, samples_per_device):
    """Per-device and server MAC units for one round.

    Training a stack costs 2x its forward MACs (forward + backward), so a
    forward-only pass costs half of a trained one. classic trains the whole
    model on device; split/local_loss train the device stack there (the
    local-loss auxiliary head included); replay transmission rounds run the
    frozen device stack forward only, and cached rounds cost the device
    nothing while the server keeps training.
    """
    if method not in METHODS:
        raise NetsimError(f"unknown method {method!r}")
    facts = models.analyze(spec, op_index)
    server_train = 2 * facts.server_macs * samples_per_device
    if method == "classic":
        return ComputeReport(2 * (facts.device_macs + facts.server_macs) * samples_per_device, 0)
    if method == "split":
        return ComputeReport(2 * facts.device_macs * samples_per_device, server_train)
    if method == "local_loss":
        head_macs = facts.activation_elements * spec.num_classes
        return ComputeReport(2 * (facts.device_macs + head_macs) * samples_per_device, server_train)
    if method == "replay_tx":
        return ComputeReport(facts.device_macs * samples_per_device, server_train)
    return ComputeReport(0, server_train)  # replay_buffer


def transfer_time(nbytes, mbps):
    """Seconds to move nbytes over a link of the given megabits/second."""
    if mbps <= 0:
        raise NetsimError(f"bandwidth must be positive, got {mbps}")
    return nbytes * 8.0 / (mbps * 1e6)


@dataclass
class DeviceLatency:
    compute_s: float
    comm_s: float
    total_s: float


@dataclass
class LatencyReport:
    per_device: dict
    round_latency_s: float
    comm_share: float


def round_latency(per_device_traffic, compute, profile, device_speed, server_speed):
    """First-order round latency: per device, device compute + transfers +
    server compute, run sequentially; the round takes as long as its slowest
    device. comm_share is aggregate transfer seconds over aggregate total."""
    if not per_device_traffic:
        raise NetsimError("latency needs at least one device's traffic")
    if device_speed <= 0 or server_speed <= 0:
        raise NetsimError("compute speeds must be positive")
    per_device = {}
    comm_total = 0.0
    busy_total = 0.0
    for device, (up, down) in sorted(per_device_traffic.items()):
        comm = transfer_time(up, profile.uplink_mbps) + transfer_time(down, profile.downlink_mbps)
        comp = compute.device_units / device_speed + compute.server_units / server_speed
        per_device[device] = DeviceLatency(compute_s=comp, comm_s=comm, total_s=comp + comm)
        comm_total += comm
        busy_total += comp + comm
    slowest = max(d.total_s for d in per_device.values())
    share = comm_total / busy_total if busy_total > 0 else 0.0
    return LatencyReport(per_device=per_device, round_latency_s=slowest, comm_share=share)
