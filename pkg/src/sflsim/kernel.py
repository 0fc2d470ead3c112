"""Minimal exact-backprop layer kernel on numpy arrays.

Layers are stateful objects holding float32 parameters (float64 in test mode)
and exposing forward/backward with explicit caches. Stack-level helpers run a
list of layers as one network, validate traces, and apply plain SGD. Weight
checkpoints use a little-endian binary format with magic ``SFL1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SFL1"

KIND_TAGS = {
    "dense": 1,
    "conv3x3": 2,
    "conv1x1": 3,
    "maxpool2x2": 4,
    "relu": 5,
    "flatten": 6,
    "resblock": 7,
}


class KernelError(ValueError):
    """Shape, trace, label, or checkpoint contract violation."""


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: parameters, forward with cache, exact backward."""

    kind = "base"

    def __init__(self):
        self.trainable = True
        self.version = 0

    def params(self):
        return {}

    def param_count(self):
        return sum(int(p.size) for p in self.params().values())

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward_macs(self, in_shape):
        return 0

    def bump(self):
        self.version += 1


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        super().__init__()
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.w = _uniform_init(rng, (self.n_in, self.n_out), self.n_in, dtype)
        self.b = _uniform_init(rng, (self.n_out,), self.n_in, dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise KernelError(f"dense expects (batch, {self.n_in}), got {x.shape}")
        return x @ self.w + self.b, x

    def backward(self, cache, dy):
        x = cache
        return {"w": x.T @ dy, "b": dy.sum(axis=0)}, dy @ self.w.T

    def out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise KernelError(f"dense expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward_macs(self, in_shape):
        return self.n_in * self.n_out


def _conv3x3_windows(x_padded):
    # view of all 3x3 patches: (B, C, H, W, 3, 3)
    return np.lib.stride_tricks.sliding_window_view(x_padded, (3, 3), axis=(2, 3))


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "conv3x3"

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        fan_in = 9 * self.c_in
        self.w = _uniform_init(rng, (self.c_out, self.c_in, 3, 3), fan_in, dtype)
        self.b = _uniform_init(rng, (self.c_out,), fan_in, dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise KernelError(f"conv3x3 expects (batch, {self.c_in}, h, w), got {x.shape}")

    def forward(self, x):
        self._check(x)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.einsum("bchwij,ocij->bohw", _conv3x3_windows(xp), self.w, optimize=True)
        y += self.b[None, :, None, None]
        return y, xp

    def backward(self, cache, dy):
        xp = cache
        dw = np.einsum("bchwij,bohw->ocij", _conv3x3_windows(xp), dy, optimize=True)
        db = dy.sum(axis=(0, 2, 3))
        dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
        w_flip = self.w[:, :, ::-1, ::-1]
        dx = np.einsum("bohwij,ocij->bchw", _conv3x3_windows(dyp), w_flip, optimize=True)
        return {"w": dw, "b": db}, dx

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in:
            raise KernelError(f"conv3x3 expects {self.c_in} channels, got {c}")
        return (self.c_out, h, w)

    def forward_macs(self, in_shape):
        _, h, w = in_shape
        return 9 * self.c_in * self.c_out * h * w


class Conv1x1(Layer):
    """1x1 convolution (per-pixel channel mix), used as downsample projection."""

    kind = "conv1x1"

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.w = _uniform_init(rng, (self.c_out, self.c_in), self.c_in, dtype)
        self.b = _uniform_init(rng, (self.c_out,), self.c_in, dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise KernelError(f"conv1x1 expects (batch, {self.c_in}, h, w), got {x.shape}")
        y = np.einsum("bchw,oc->bohw", x, self.w, optimize=True)
        y += self.b[None, :, None, None]
        return y, x

    def backward(self, cache, dy):
        x = cache
        dw = np.einsum("bchw,bohw->oc", x, dy, optimize=True)
        db = dy.sum(axis=(0, 2, 3))
        dx = np.einsum("bohw,oc->bchw", dy, self.w, optimize=True)
        return {"w": dw, "b": db}, dx

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in:
            raise KernelError(f"conv1x1 expects {self.c_in} channels, got {c}")
        return (self.c_out, h, w)

    def forward_macs(self, in_shape):
        _, h, w = in_shape
        return self.c_in * self.c_out * h * w


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; ties route the gradient to the first max."""

    kind = "maxpool2x2"

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise KernelError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
        b, c, h, w = x.shape
        tiles = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = tiles.reshape(b, c, h // 2, w // 2, 4)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        (b, c, h, w), idx = cache
        flat = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        tiles = flat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return {}, tiles.reshape(b, c, h, w)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise KernelError(f"maxpool2x2 needs even spatial dims, got {in_shape}")
        return (c, h // 2, w // 2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, cache, dy):
        return {}, dy * cache

    def out_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return {}, dy.reshape(cache)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class ResidualBlock(Layer):
    """Downsampling residual block.

    Main path: conv3x3 -> ReLU -> conv3x3 -> maxpool2x2.
    Skip path: conv1x1 -> maxpool2x2. Output: ReLU(main + skip).
    Halves the spatial dims and maps c_in to c_out channels.
    """

    kind = "resblock"

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.conv1 = Conv3x3(c_in, c_out, rng, dtype)
        self.conv2 = Conv3x3(c_out, c_out, rng, dtype)
        self.skip = Conv1x1(c_in, c_out, rng, dtype)
        self.pool_main = MaxPool2x2()
        self.pool_skip = MaxPool2x2()
        self.relu_mid = ReLU()

    def params(self):
        out = {}
        for prefix, sub in (("conv1", self.conv1), ("conv2", self.conv2), ("skip", self.skip)):
            for k, v in sub.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def forward(self, x):
        a1, c1 = self.conv1.forward(x)
        r1, cr = self.relu_mid.forward(a1)
        a2, c2 = self.conv2.forward(r1)
        main, cpm = self.pool_main.forward(a2)
        s1, cs = self.skip.forward(x)
        side, cps = self.pool_skip.forward(s1)
        summed = main + side
        mask = summed > 0
        return np.maximum(summed, 0), (c1, cr, c2, cpm, cs, cps, mask)

    def backward(self, cache, dy):
        c1, cr, c2, cpm, cs, cps, mask = cache
        d_sum = dy * mask
        _, d_main = self.pool_main.backward(cpm, d_sum)
        g2, d_r1 = self.conv2.backward(c2, d_main)
        _, d_a1 = self.relu_mid.backward(cr, d_r1)
        g1, dx_main = self.conv1.backward(c1, d_a1)
        _, d_side = self.pool_skip.backward(cps, d_sum)
        gs, dx_skip = self.skip.backward(cs, d_side)
        grads = {f"conv1.{k}": v for k, v in g1.items()}
        grads.update({f"conv2.{k}": v for k, v in g2.items()})
        grads.update({f"skip.{k}": v for k, v in gs.items()})
        return grads, dx_main + dx_skip

    def out_shape(self, in_shape):
        shape = self.conv1.out_shape(in_shape)
        shape = self.conv2.out_shape(shape)
        return self.pool_main.out_shape(shape)

    def forward_macs(self, in_shape):
        mid = self.conv1.out_shape(in_shape)
        return (
            self.conv1.forward_macs(in_shape)
            + self.conv2.forward_macs(mid)
            + self.skip.forward_macs(in_shape)
        )


@dataclass
class Trace:
    """Forward record: per-layer caches plus identity/version stamps."""

    output: np.ndarray
    caches: list
    layer_ids: tuple
    versions: tuple
    input_shape: tuple


@dataclass
class Gradients:
    """Per-layer parameter gradients (dicts keyed like params()) + input grad."""

    layers: list
    input_grad: np.ndarray | None


def forward(layers, batch):
    """Run a layer stack; returns a Trace consumable by backward."""
    x = batch
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return Trace(
        output=x,
        caches=caches,
        layer_ids=tuple(id(l) for l in layers),
        versions=tuple(l.version for l in layers),
        input_shape=batch.shape,
    )


def backward(layers, trace, loss_grad):
    """Exact backprop through a stack using the caches from forward.

    Rejects traces from a different stack or taken before a parameter
    update (stale), and gradients whose shape does not match the output.
    """
    if trace.layer_ids != tuple(id(l) for l in layers):
        raise KernelError("trace does not belong to this layer stack")
    if trace.versions != tuple(l.version for l in layers):
        raise KernelError("stale trace: parameters changed since forward")
    if loss_grad.shape != trace.output.shape:
        raise KernelError(
            f"loss grad shape {loss_grad.shape} != output shape {trace.output.shape}"
        )
    dy = loss_grad
    per_layer = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grads, dy = layers[i].backward(trace.caches[i], dy)
        per_layer[i] = grads
    return Gradients(layers=per_layer, input_grad=dy)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dL/dlogits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise KernelError(f"logits must be 2-d, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise KernelError("labels must be one integer per row")
    if not np.issubdtype(labels.dtype, np.integer):
        raise KernelError("labels must be integers")
    c = logits.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise KernelError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), labels])))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


def sgd_step(layers, grads, lr):
    """In-place w -= lr * g on trainable layers; frozen layers keep their bits."""
    if len(grads.layers) != len(layers):
        raise KernelError("gradient list does not match layer stack")
    for layer, layer_grads in zip(layers, grads.layers):
        if not layer.trainable or not layer_grads:
            continue
        params = layer.params()
        if set(layer_grads) != set(params):
            raise KernelError(f"gradient keys {set(layer_grads)} != params {set(params)}")
        for name, g in layer_grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise KernelError(f"grad shape {g.shape} != param shape {p.shape}")
            p -= (lr * g).astype(p.dtype)
        layer.bump()


def stack_state(layers):
    """Deep copy of all parameter arrays, one dict per layer."""
    return [{k: v.copy() for k, v in layer.params().items()} for layer in layers]


def load_state(layers, state):
    """Copy a stack_state back into layers (shape-checked, bit-exact)."""
    if len(state) != len(layers):
        raise KernelError("state length does not match layer stack")
    for layer, entry in zip(layers, state):
        params = layer.params()
        if set(entry) != set(params):
            raise KernelError("state keys do not match layer params")
        for k, v in entry.items():
            if params[k].shape != v.shape:
                raise KernelError(f"state shape {v.shape} != param shape {params[k].shape}")
            params[k][...] = v
        layer.bump()


def param_vector(layers):
    """All parameters flattened into one float64 vector (diagnostics use).

    Keys are visited in sorted order per layer so the layout matches
    grad_vector and load_param_vector exactly.
    """
    chunks = []
    for layer in layers:
        params = layer.params()
        for k in sorted(params):
            chunks.append(params[k].reshape(-1).astype(np.float64))
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def load_param_vector(layers, vector):
    """Inverse of param_vector: scatter a flat vector back into the stack."""
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    offset = 0
    for layer in layers:
        params = layer.params()
        for k in sorted(params):
            p = params[k]
            chunk = vector[offset : offset + p.size]
            if chunk.size != p.size:
                raise KernelError("vector too short for this layer stack")
            p[...] = chunk.reshape(p.shape).astype(p.dtype)
            offset += p.size
        layer.bump()
    if offset != vector.size:
        raise KernelError(f"vector has {vector.size} entries, stack holds {offset}")


def grad_vector(grads):
    """All gradients flattened into one float64 vector, matching param_vector order."""
    chunks = []
    for layer_grads in grads.layers:
        for k in sorted(layer_grads):
            chunks.append(layer_grads[k].reshape(-1).astype(np.float64))
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def freeze(layers):
    for layer in layers:
        layer.trainable = False


def save_weights(path, layers):
    """Write layer parameters: magic SFL1, layer count, then per layer a kind
    tag, the number of parameter arrays, and each array as rank + dims (u32)
    + raw float32 payload. Little-endian throughout."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(layers))
    for layer in layers:
        params = layer.params()
        blob += struct.pack("<BB", KIND_TAGS[layer.kind], len(params))
        for name in params:
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            blob += struct.pack("<I", arr.ndim)
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
            blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_weights(path, layers):
    """Read an SFL1 checkpoint into an architecture-matched layer stack."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise KernelError(f"bad checkpoint magic {raw[:4]!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise KernelError("truncated checkpoint")
        chunk = raw[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    if count != len(layers):
        raise KernelError(f"checkpoint has {count} layers, stack has {len(layers)}")
    for layer in layers:
        tag, n_params = struct.unpack("<BB", take(2))
        if tag != KIND_TAGS[layer.kind]:
            raise KernelError(f"checkpoint layer tag {tag} != {layer.kind}")
        params = layer.params()
        if n_params != len(params):
            raise KernelError("checkpoint parameter count mismatch")
        for name in params:
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            if dims != params[name].shape:
                raise KernelError(f"checkpoint shape {dims} != param {params[name].shape}")
            n_bytes = 4 * int(np.prod(dims)) if rank else 4
            n_items = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(dims)
            params[name][...] = data
        layer.bump()
    if off != len(raw):
        raise KernelError("trailing bytes after checkpoint payload")
