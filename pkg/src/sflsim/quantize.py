"""Per-tensor affine 8-bit activation quantization and the wire format.

One record covers one batch of activations plus its labels. The affine map
uses a single (scale, min) pair per tensor: scale = (max - min) / 255, code
= round-half-away-from-zero((a - min) / scale) clamped to [0, 255]. Internal
arithmetic runs in float64; the stored scale/min are float32 (wire width),
and quantization uses the stored float32 values so that requantizing a
dequantized grid is exact. Constant tensors get scale 0 and all-zero codes.

A "raw" codec variant carries the untouched float32 payload for runs with
quantization disabled; decoding it is a bit-exact passthrough.

Wire layout, little-endian: magic (QACT quantized / RACT raw), round tag
u32, device id u16, batch index u32, rank u8, dims u32 each, scale f32,
min f32, label count u32, labels u16 each, then the payload (u8 codes or
f32 values).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernel

MAGIC_Q8 = b"QACT"
MAGIC_RAW = b"RACT"


class QuantizeError(ValueError):
    """Non-finite input, malformed record bytes, or codec misuse."""


_EMPTY_LABELS = np.zeros(0, dtype=np.uint16)


@dataclass
class ActivationRecord:
    round_tag: int
    device_id: int
    batch_index: int
    shape: tuple
    codec: str
    scale: float
    min_val: float
    labels: np.ndarray = field(default_factory=lambda: _EMPTY_LABELS.copy())
    codes: np.ndarray | None = None
    values: np.ndarray | None = None

    def payload_bytes(self):
        n = int(np.prod(self.shape)) if self.shape else 0
        return n if self.codec == "q8" else 4 * n


def quantize(a, round_tag, device_id, batch_index, labels=None):
    """Affine-quantize a tensor to uint8 codes with one (scale, min) pair."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise QuantizeError("cannot quantize non-finite values")
    a64 = a.astype(np.float64)
    lo = np.float32(a64.min())
    hi = a64.max()
    scale = np.float32((hi - float(lo)) / 255.0)
    if scale == 0.0:
        codes = np.zeros(a.shape, dtype=np.uint8)
    else:
        # round half away from zero: arguments are >= 0 so floor(x + 0.5)
        x = (a64 - float(lo)) / float(scale)
        codes = np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)
    return ActivationRecord(
        round_tag=int(round_tag),
        device_id=int(device_id),
        batch_index=int(batch_index),
        shape=tuple(a.shape),
        codec="q8",
        scale=float(scale),
        min_val=float(lo),
        labels=_as_labels(labels),
        codes=codes,
    )


def dequantize(record, dtype=np.float32):
    """Map codes back to values: min + scale * code, float64 internally."""
    if record.codec == "q8":
        out = record.min_val + record.scale * record.codes.astype(np.float64)
        return out.astype(dtype)
    return record.values.astype(dtype) if dtype != np.float32 else record.values.copy()


def encode(a, round_tag, device_id, batch_index, labels=None, quantized=True):
    """Build a record with the quantized (q8) or passthrough (raw) codec."""
    if quantized:
        return quantize(a, round_tag, device_id, batch_index, labels)
    a = np.asarray(a, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise QuantizeError("cannot encode non-finite values")
    return ActivationRecord(
        round_tag=int(round_tag),
        device_id=int(device_id),
        batch_index=int(batch_index),
        shape=tuple(a.shape),
        codec="raw",
        scale=1.0,
        min_val=0.0,
        labels=_as_labels(labels),
        values=a.copy(),
    )


def decode(record, dtype=np.float32):
    """Recover the activation tensor; raw records come back bit-exact."""
    return dequantize(record, dtype)


def _as_labels(labels):
    if labels is None:
        return _EMPTY_LABELS.copy()
    arr = np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
        raise QuantizeError("labels must fit in uint16")
    return arr.astype(np.uint16)


def record_wire_bytes(record):
    """Exact serialized size: header + dims + labels + payload."""
    rank = len(record.shape)
    return 4 + 4 + 2 + 4 + 1 + 4 * rank + 4 + 4 + 4 + 2 * len(record.labels) + record.payload_bytes()


def serialize(record):
    magic = MAGIC_Q8 if record.codec == "q8" else MAGIC_RAW
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", record.round_tag)
    blob += struct.pack("<H", record.device_id)
    blob += struct.pack("<I", record.batch_index)
    blob += struct.pack("<B", len(record.shape))
    blob += struct.pack(f"<{len(record.shape)}I", *record.shape)
    blob += struct.pack("<f", record.scale)
    blob += struct.pack("<f", record.min_val)
    blob += struct.pack("<I", len(record.labels))
    blob += record.labels.astype("<u2").tobytes()
    if record.codec == "q8":
        blob += np.ascontiguousarray(record.codes, dtype=np.uint8).tobytes()
    else:
        blob += np.ascontiguousarray(record.values, dtype="<f4").tobytes()
    return bytes(blob)


def parse(blob):
    if blob[:4] == MAGIC_Q8:
        codec = "q8"
    elif blob[:4] == MAGIC_RAW:
        codec = "raw"
    else:
        raise QuantizeError(f"bad record magic {blob[:4]!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise QuantizeError("truncated activation record")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (round_tag,) = struct.unpack("<I", take(4))
    (device_id,) = struct.unpack("<H", take(2))
    (batch_index,) = struct.unpack("<I", take(4))
    (rank,) = struct.unpack("<B", take(1))
    shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
    (scale,) = struct.unpack("<f", take(4))
    (min_val,) = struct.unpack("<f", take(4))
    (n_labels,) = struct.unpack("<I", take(4))
    labels = np.frombuffer(take(2 * n_labels), dtype="<u2").copy()
    n = int(np.prod(shape)) if shape else 0
    if codec == "q8":
        codes = np.frombuffer(take(n), dtype=np.uint8).reshape(shape).copy()
        values = None
    else:
        values = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
        codes = None
    if off != len(blob):
        raise QuantizeError("trailing bytes after activation record")
    return ActivationRecord(
        round_tag=round_tag,
        device_id=device_id,
        batch_index=batch_index,
        shape=tuple(shape),
        codec=codec,
        scale=scale,
        min_val=min_val,
        labels=labels,
        codes=codes,
        values=values,
    )


def quantization_error(a, server_layers, labels, quantized=True):
    """Gradient gap the codec induces on the server stack.

    Runs the server forward/backward twice, once on the dequantized
    activations and once on the originals, and returns the L2 norm of the
    parameter-gradient difference for the batch. Zero when quantization is
    disabled (identity codec).
    """
    if not quantized:
        return 0.0
    a = np.asarray(a)
    rec = quantize(a, round_tag=0, device_id=0, batch_index=0)
    a_hat = dequantize(rec, dtype=a.dtype)
    vecs = []
    for x in (a_hat, a):
        trace = kernel.forward(server_layers, x)
        _, grad = kernel.softmax_cross_entropy(trace.output, np.asarray(labels))
        grads = kernel.backward(server_layers, trace, grad)
        vecs.append(kernel.grad_vector(grads))
    return float(np.linalg.norm(vecs[0] - vecs[1]))
