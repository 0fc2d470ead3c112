"""Model specs, the desk/analytic zoo, partitioning, and central pretraining.

Architectures are compact layer strings like ``"C8-MP-C16-MP|C32-MP-FC"``:
``C{n}`` a 3x3 conv (+ReLU), ``MP`` 2x2 maxpool, ``RB{n}`` a downsampling
residual block, ``FC{n}`` a dense layer (+ReLU unless final), ``FC`` the
final classifier over num_classes, ``Flatten`` explicit (auto-inserted
before the first dense otherwise). The ``|`` marks the device/server split.

TinyVGG/TinyRes are built and trained at desk scale; the VGG11- and
ResNet9-shaped specs exist for the analytic cost model and are never
trained here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import kernel


class ModelError(ValueError):
    """Bad layer string, illegal partition point, or shape mismatch."""


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layer_string: str
    input_shape: tuple
    num_classes: int


@dataclass(frozen=True)
class LayerDesc:
    """Resolved layer descriptor: kind plus concrete in/out shapes."""

    kind: str
    in_shape: tuple
    out_shape: tuple
    arg: int = 0

    def param_count(self):
        if self.kind == "conv3x3":
            return 9 * self.in_shape[0] * self.arg + self.arg
        if self.kind == "conv1x1":
            return self.in_shape[0] * self.arg + self.arg
        if self.kind == "dense":
            return self.in_shape[0] * self.arg + self.arg
        if self.kind == "resblock":
            c_in, c_out = self.in_shape[0], self.arg
            return (9 * c_in * c_out + c_out) + (9 * c_out * c_out + c_out) + (c_in * c_out + c_out)
        return 0

    def forward_macs(self):
        if self.kind == "conv3x3":
            _, h, w = self.in_shape
            return 9 * self.in_shape[0] * self.arg * h * w
        if self.kind == "conv1x1":
            _, h, w = self.in_shape
            return self.in_shape[0] * self.arg * h * w
        if self.kind == "dense":
            return self.in_shape[0] * self.arg
        if self.kind == "resblock":
            c_in, c_out = self.in_shape[0], self.arg
            _, h, w = self.in_shape
            return (9 * c_in * c_out + 9 * c_out * c_out + c_in * c_out) * h * w
        return 0


@dataclass
class ModelFacts:
    """Analytic facts used by the cost model; no weights are materialized."""

    total_params: int
    device_params: int
    server_params: int
    activation_shape: tuple
    activation_elements: int
    device_macs: int
    server_macs: int
    layer_count: int
    op_index: int


@dataclass
class Model:
    spec: ModelSpec
    layers: list
    default_split: int


_TOKEN_RE = re.compile(r"^(C|RB|FC)(\d+)$")


def _micro_tokens(spec):
    """Side-tagged micro tokens from the layer string; 'post' marks device end."""
    parts = spec.layer_string.split("|")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise ModelError(f"layer string needs one '|' split point: {spec.layer_string!r}")
    out = []
    for side, chunk in zip(("device", "server"), parts):
        for token in chunk.split("-"):
            if token == "MP":
                out.append((side, "maxpool", 0))
            elif token == "Flatten":
                out.append((side, "flatten", 0))
            elif token == "FC":
                out.append((side, "dense", spec.num_classes))
            else:
                m = _TOKEN_RE.match(token)
                if not m:
                    raise ModelError(f"unknown layer token {token!r} in {spec.layer_string!r}")
                kind = {"C": "conv3x3", "RB": "resblock", "FC": "dense"}[m.group(1)]
                out.append((side, kind, int(m.group(2))))
    return out


def expand(spec):
    """Layer string -> (list of LayerDesc, default split index).

    Convs get a trailing ReLU; dense layers too except the final one; a
    Flatten is inserted before the first dense when the activation is still
    spatial. Shapes are threaded and validated as descriptors are emitted.
    """
    micro = _micro_tokens(spec)
    dense_positions = [i for i, (_, kind, _) in enumerate(micro) if kind == "dense"]
    last_dense = dense_positions[-1] if dense_positions else -1

    descs = []
    split_index = None
    shape = tuple(spec.input_shape)
    for i, (side, kind, arg) in enumerate(micro):
        if side == "server" and split_index is None:
            split_index = len(descs)
        if kind == "maxpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ModelError(f"maxpool needs even spatial input, got {shape}")
            out = (shape[0], shape[1] // 2, shape[2] // 2)
            descs.append(LayerDesc("maxpool2x2", shape, out))
        elif kind == "flatten":
            out = (int(np.prod(shape)),)
            descs.append(LayerDesc("flatten", shape, out))
        elif kind == "conv3x3":
            if len(shape) != 3:
                raise ModelError(f"conv needs spatial input, got {shape}")
            out = (arg, shape[1], shape[2])
            descs.append(LayerDesc("conv3x3", shape, out, arg))
            descs.append(LayerDesc("relu", out, out))
        elif kind == "resblock":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ModelError(f"residual block needs even spatial input, got {shape}")
            out = (arg, shape[1] // 2, shape[2] // 2)
            descs.append(LayerDesc("resblock", shape, out, arg))
        elif kind == "dense":
            if len(shape) == 3:
                flat = (int(np.prod(shape)),)
                descs.append(LayerDesc("flatten", shape, flat))
                shape = flat
            out = (arg,)
            descs.append(LayerDesc("dense", shape, out, arg))
            if i != last_dense:
                descs.append(LayerDesc("relu", out, out))
        else:
            raise ModelError(f"unknown kind {kind}")
        shape = descs[-1].out_shape
    if split_index is None or split_index == 0 or split_index == len(descs):
        raise ModelError("split point must leave layers on both sides")
    return descs, split_index


def analyze(spec, op_index=None):
    """Analytic parameter/MAC/activation facts at a partition point."""
    descs, default_split = expand(spec)
    idx = default_split if op_index is None else op_index
    if not 0 < idx < len(descs):
        raise ModelError(f"op_index {idx} out of range (0, {len(descs)})")
    device, server = descs[:idx], descs[idx:]
    act_shape = device[-1].out_shape
    return ModelFacts(
        total_params=sum(d.param_count() for d in descs),
        device_params=sum(d.param_count() for d in device),
        server_params=sum(d.param_count() for d in server),
        activation_shape=act_shape,
        activation_elements=int(np.prod(act_shape)),
        device_macs=sum(d.forward_macs() for d in device),
        server_macs=sum(d.forward_macs() for d in server),
        layer_count=len(descs),
        op_index=idx,
    )


def _instantiate(desc, rng, dtype):
    if desc.kind == "conv3x3":
        return kernel.Conv3x3(desc.in_shape[0], desc.arg, rng=rng, dtype=dtype)
    if desc.kind == "conv1x1":
        return kernel.Conv1x1(desc.in_shape[0], desc.arg, rng=rng, dtype=dtype)
    if desc.kind == "dense":
        return kernel.Dense(desc.in_shape[0], desc.arg, rng=rng, dtype=dtype)
    if desc.kind == "resblock":
        return kernel.ResidualBlock(desc.in_shape[0], desc.arg, rng=rng, dtype=dtype)
    if desc.kind == "maxpool2x2":
        return kernel.MaxPool2x2()
    if desc.kind == "relu":
        return kernel.ReLU()
    if desc.kind == "flatten":
        return kernel.Flatten()
    raise ModelError(f"cannot instantiate {desc.kind}")


def build_model(spec, seed, dtype=np.float32):
    """Materialize a spec with seeded uniform(-1/sqrt(fan_in), ..) weights."""
    descs, split = expand(spec)
    rng = np.random.default_rng(seed)
    layers = [_instantiate(d, rng, dtype) for d in descs]
    return Model(spec=spec, layers=layers, default_split=split)


def partition(model, op_index):
    """Split a model's layer stack at a boundary: (device stack, server stack)."""
    layers = model.layers if isinstance(model, Model) else model
    if not 0 < op_index < len(layers):
        raise ModelError(f"op_index {op_index} out of range (0, {len(layers)})")
    return layers[:op_index], layers[op_index:]


def concat_weights(device_stack, server_stack):
    """Reassemble the full stack from its two halves."""
    out_shape_ok = device_stack and server_stack
    if not out_shape_ok:
        raise ModelError("both stacks must be non-empty")
    return list(device_stack) + list(server_stack)


def clone_stack(layers, dtype=None):
    """Structural copy of a layer stack with identical parameter bits."""
    fresh = []
    throwaway = np.random.default_rng(0)
    for layer in layers:
        if layer.kind == "dense":
            copy = kernel.Dense(layer.n_in, layer.n_out, rng=throwaway, dtype=dtype or layer.w.dtype)
        elif layer.kind == "conv3x3":
            copy = kernel.Conv3x3(layer.c_in, layer.c_out, rng=throwaway, dtype=dtype or layer.w.dtype)
        elif layer.kind == "conv1x1":
            copy = kernel.Conv1x1(layer.c_in, layer.c_out, rng=throwaway, dtype=dtype or layer.w.dtype)
        elif layer.kind == "resblock":
            copy = kernel.ResidualBlock(layer.c_in, layer.c_out, rng=throwaway, dtype=dtype or layer.conv1.w.dtype)
        elif layer.kind == "maxpool2x2":
            copy = kernel.MaxPool2x2()
        elif layer.kind == "relu":
            copy = kernel.ReLU()
        elif layer.kind == "flatten":
            copy = kernel.Flatten()
        else:
            raise ModelError(f"cannot clone {layer.kind}")
        for k, v in layer.params().items():
            copy.params()[k][...] = v
        copy.trainable = layer.trainable
        fresh.append(copy)
    return fresh


def auxiliary_head(spec, seed, op_index=None):
    """Local-loss head: Flatten + Dense from the split activation to classes."""
    facts = analyze(spec, op_index)
    rng = np.random.default_rng(seed)
    return [
        kernel.Flatten(),
        kernel.Dense(facts.activation_elements, spec.num_classes, rng=rng),
    ]


def pretrain_device_side(model, dataset, epochs, lr, batch_size, seed, op_index=None):
    """Centrally train a clone of the full model on the pretrain split, then
    return its device half, frozen. epochs=0 returns the frozen initial half
    (the no-pretraining ablation). The input model is never mutated."""
    idx = model.default_split if op_index is None else op_index
    clone = clone_stack(model.layers)
    images, labels = dataset.subset("pretrain")
    rng = np.random.default_rng(seed)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            trace = kernel.forward(clone, images[take])
            _, grad = kernel.softmax_cross_entropy(trace.output, labels[take])
            grads = kernel.backward(clone, trace, grad)
            kernel.sgd_step(clone, grads, lr)
    device, _ = partition(clone, idx)
    kernel.freeze(device)
    return device


def tiny_vgg(num_classes=2, input_shape=(1, 16, 16)):
    """Desk-scale VGG-style spec; split after the second maxpool."""
    return ModelSpec(
        name="tiny_vgg",
        layer_string="C8-MP-C16-MP|C32-MP-FC",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def tiny_res(num_classes=2, input_shape=(1, 16, 16)):
    """Desk-scale residual spec; same device side as tiny_vgg."""
    return ModelSpec(
        name="tiny_res",
        layer_string="C8-MP-C16-MP|RB32-FC",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def vgg11(num_classes=10, input_shape=(3, 32, 32)):
    """VGG11-shaped analytic spec (34.4M params at 32x32x3, 10 classes)."""
    return ModelSpec(
        name="vgg11",
        layer_string="C64-MP-C128-MP|C256-C256-MP-C512-C512-MP-C512-C512-FC4096-FC4096-FC10",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def resnet9(num_classes=10, input_shape=(3, 32, 32)):
    """ResNet9-shaped analytic spec (9.65M params at 32x32x3, 10 classes)."""
    return ModelSpec(
        name="resnet9",
        layer_string="C64-MP-C128-MP|RB256-RB512-RB512-FC10",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


ZOO = {
    "tiny_vgg": tiny_vgg,
    "tiny_res": tiny_res,
    "vgg11": vgg11,
    "resnet9": resnet9,
}
