"""Federated training runtime: four protocol modes over one engine.

Modes
    classic     every device trains the full model locally for one pass
                over its shard, then the server averages full models.
    split       the model is cut at the partition point; per batch the
                device uploads the activation (full precision) plus labels,
                the server trains its stack and sends the cut gradient
                back, and the device updates its stack. Device and server
                stacks are both averaged at the end of the round.
    local_loss  like split, but the device trains its stack with a local
                auxiliary-head loss instead of server gradients; no
                gradient ever travels downlink.
    replay      the device stack is pretrained and frozen. On rounds with
                t mod rho = 0 each device uploads 8-bit-quantized
                activation records which the server caches; on the other
                rounds the server trains from its cache and the uplink is
                silent. Only server stacks are averaged.

One pass over each device's shard per round; the batch partition and batch
order are fixed across rounds so cached records keep stable keys. Device
loops run sequentially in device-id order and share no mutable state, so
runs are bit-deterministic under a fixed seed. Every transfer is recorded
in a TrafficLedger whose totals match the analytic cost model exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import buffer as buffer_mod
from . import data as data_mod
from . import diagnostics as diag_mod
from . import kernel, models, netsim, quantize

MODES = ("classic", "split", "local_loss", "replay")

METRICS_COLUMNS = (
    "round",
    "device",
    "mode",
    "server_loss",
    "test_acc",
    "bytes_up",
    "bytes_down",
    "epsilon_hat",
    "delta_hat",
    "sim_latency_s",
)


class TrainingError(RuntimeError):
    """A round failed; the message carries the round context."""


@dataclass
class RoundResult:
    t: int
    server_loss: dict  # device -> mean training loss of the learning half
    test_acc: float
    traffic: dict  # device -> (bytes up, bytes down)
    latency_s: float
    diagnostics: object  # DiagnosticsRecord or None


@dataclass
class TrainState:
    """Everything a round needs; built once by init_state."""

    config: object
    spec: models.ModelSpec
    op_index: int
    dataset: data_mod.Dataset
    shards: dict  # device -> index array into dataset
    batches: dict  # device -> list of index arrays, fixed across rounds
    frozen_device: bool
    global_model: list | None  # classic: the averaged full model
    global_device: list | None  # split family: averaged device stack
    global_server: list | None
    global_head: list | None  # local_loss auxiliary head
    buffer: object  # ReplayBuffer or None
    ledger: netsim.TrafficLedger
    device_rngs: dict  # device -> Generator (augmentation draws)
    diag_rng: object  # Generator for the observer stream
    probe_indices: dict  # device -> fixed probe subset (diagnostics)
    device_stacks: dict = field(default_factory=dict)  # refs for observers
    server_stacks: dict = field(default_factory=dict)
    diagnostics_records: list = field(default_factory=list)


@dataclass
class RunOutput:
    final_model: list
    results: list  # RoundResult per round
    rows: list  # metrics dicts, one per (round, device)
    state: TrainState


def fedavg(weight_sets, sample_counts):
    """Sample-count-weighted elementwise mean of stack states.

    Computed as W_0 + sum_k lambda_k * (W_k - W_0): identical inputs give
    bit-identical output for any counts, and power-of-two rescaling of the
    inputs rescales the output exactly.
    """
    weight_sets = list(weight_sets)
    sample_counts = [int(c) for c in sample_counts]
    if not weight_sets:
        raise TrainingError("fedavg needs at least one weight set")
    if len(weight_sets) != len(sample_counts):
        raise TrainingError("one sample count per weight set required")
    if any(c < 0 for c in sample_counts):
        raise TrainingError("sample counts cannot be negative")
    n = sum(sample_counts)
    if n <= 0:
        raise TrainingError("total sample count must be positive")
    lambdas = [c / n for c in sample_counts]
    base = weight_sets[0]
    for other in weight_sets[1:]:
        if len(other) != len(base):
            raise TrainingError("weight sets have different layer counts")
    out = []
    for li, layer0 in enumerate(base):
        agg = {}
        for key, ref in layer0.items():
            acc = np.zeros(ref.shape, np.float64)
            for lam, ws in zip(lambdas, weight_sets):
                arr = ws[li].get(key)
                if arr is None or arr.shape != ref.shape:
                    raise TrainingError(f"weight sets disagree on layer {li} param {key!r}")
                acc += lam * (arr.astype(np.float64) - ref.astype(np.float64))
            agg[key] = (ref.astype(np.float64) + acc).astype(ref.dtype)
        out.append(agg)
    return out


def evaluate(model_or_pair, dataset, split="test", batch_size=256):
    """Argmax accuracy on a dataset split; full precision, no quantization.

    Accepts either one layer stack or a (device_stack, server_stack) pair —
    the pair is evaluated as its concatenation, so both forms agree exactly.
    """
    if isinstance(model_or_pair, tuple):
        layers = models.concat_weights(*model_or_pair)
    else:
        layers = list(model_or_pair)
    images, labels = dataset.subset(split)
    if len(labels) == 0:
        raise TrainingError(f"split {split!r} is empty")
    hits = 0
    for start in range(0, len(labels), batch_size):
        x = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        logits = kernel.forward(layers, x).output
        hits += int(np.sum(np.argmax(logits, axis=1) == y))
    return hits / len(labels)


def _stack_param_bytes(layers):
    return 4 * sum(p.size for layer in layers for p in layer.params().values())


def _set_trainable(layers):
    for layer in layers:
        if layer.params():
            layer.trainable = True


def _batch_input(state, device, batch):
    """Fetch one training batch, applying this device's augmentation draw."""
    x = state.dataset.images[batch]
    y = state.dataset.labels[batch]
    if state.config.augment:
        x = data_mod.augment_hflip(x, state.device_rngs[device])
    return x, y


def _server_step(server_stack, activation, labels, lr):
    """Forward/loss/backward/SGD on a server stack; the one code path every
    split-family mode shares, so equal inputs give bit-equal weights."""
    trace = kernel.forward(server_stack, activation)
    loss, dlogits = kernel.softmax_cross_entropy(trace.output, labels)
    grads = kernel.backward(server_stack, trace, dlogits)
    kernel.sgd_step(server_stack, grads, lr)
    return loss, grads.input_grad


def init_state(config):
    """Build dataset, shards, model halves, RNG streams, and the ledger.

    RNG streams are spawned from the master seed in a fixed order — data,
    model init, pretraining, one per device, diagnostics — so adding or
    removing the observer never shifts a training stream.
    """
    ss = np.random.SeedSequence(config.seed)
    children = ss.spawn(3 + config.devices + 1)
    data_words = children[0].generate_state(2)
    dataset = _load_dataset(config, int(data_words[0]))
    model_words = children[1].generate_state(2)
    spec = models.ZOO[config.model]()
    model = models.build_model(spec, seed=int(model_words[0]))
    op_index = config.op_index if config.op_index is not None else model.default_split
    if tuple(dataset.images.shape[1:]) != tuple(spec.input_shape):
        raise TrainingError(
            f"dataset images {dataset.images.shape[1:]} do not match "
            f"model input {spec.input_shape}"
        )

    train_idx = dataset.splits["train"]
    shard_list = data_mod.shard_uniform(train_idx, config.devices, seed=int(data_words[1]))
    shards = {k: shard_list[k] for k in range(config.devices)}
    batches = {
        k: [shard[i : i + config.batch_size] for i in range(0, len(shard), config.batch_size)]
        for k, shard in shards.items()
    }
    if any(len(b) == 0 for b in batches.values()):
        raise TrainingError("every device needs at least one batch")

    frozen = config.mode == "replay" or config.freeze_device
    global_model = global_device = global_server = global_head = None
    if config.mode == "classic":
        global_model = model.layers
    else:
        device_half, server_half = models.partition(model, op_index)
        if config.pretrain_epochs > 0:
            device_half = models.pretrain_device_side(
                model,
                dataset,
                epochs=config.pretrain_epochs,
                lr=config.lr,
                batch_size=config.batch_size,
                seed=int(children[2].generate_state(1)[0]),
                op_index=op_index,
            )
        global_device, global_server = device_half, server_half
        if frozen:
            kernel.freeze(global_device)
        else:
            _set_trainable(global_device)
        if config.mode == "local_loss":
            global_head = models.auxiliary_head(spec, seed=int(model_words[1]), op_index=op_index)

    device_rngs = {k: np.random.default_rng(children[3 + k]) for k in range(config.devices)}
    diag_rng = np.random.default_rng(children[3 + config.devices])
    probe_indices = {}
    if config.diagnostics:
        for k, shard in shards.items():
            size = min(len(shard), diag_mod.PROBE_CAP)
            probe_indices[k] = np.sort(diag_rng.choice(shard, size=size, replace=False))

    replay_buffer = None
    if config.mode == "replay":
        replay_buffer = buffer_mod.ReplayBuffer(config.rho, spill_dir=config.spill_dir)

    return TrainState(
        config=config,
        spec=spec,
        op_index=op_index,
        dataset=dataset,
        shards=shards,
        batches=batches,
        frozen_device=frozen,
        global_model=global_model,
        global_device=global_device,
        global_server=global_server,
        global_head=global_head,
        buffer=replay_buffer,
        ledger=netsim.TrafficLedger(),
        device_rngs=device_rngs,
        diag_rng=diag_rng,
        probe_indices=probe_indices,
    )


def _load_dataset(config, seed):
    src = dict(config.dataset)
    kind = src.pop("kind")
    if kind == "blobs":
        return data_mod.generate_blobs(
            classes=src["classes"],
            per_class=src["per_class"],
            image_shape=tuple(src["image_shape"]),
            noise_sigma=src["noise_sigma"],
            seed=seed,
        )
    dataset = data_mod.load_idx(src["images"], src["labels"])
    dataset.splits.update(data_mod.make_splits(len(dataset.labels), seed))
    return dataset


def _maybe_observe(state, t):
    """Run the observer after SGD, before aggregation; pure reads only."""
    if not state.config.diagnostics:
        return None
    record = diag_mod.record_round(state, t)
    state.diagnostics_records.append(record)
    return record


def _finish_round(state, t, losses, diag_record):
    cfg = state.config
    traffic = state.ledger.per_device_traffic(round_index=t)
    traffic = {k: traffic.get(k, (0, 0)) for k in range(cfg.devices)}
    method = cfg.mode
    if method == "replay":
        method = "replay_tx" if buffer_mod.switch_is_on(t, cfg.rho) else "replay_buffer"
    compute = netsim.computation_units(
        method, state.spec, state.op_index,
        samples_per_device=max(len(s) for s in state.shards.values()),
    )
    latency = netsim.round_latency(
        traffic,
        compute,
        netsim.PROFILES[cfg.profile],
        cfg.device_speed,
        cfg.server_speed,
    )
    if cfg.mode == "classic":
        test_acc = evaluate(state.global_model, state.dataset)
    else:
        test_acc = evaluate((state.global_device, state.global_server), state.dataset)
    return RoundResult(
        t=t,
        server_loss=losses,
        test_acc=test_acc,
        traffic=traffic,
        latency_s=latency.round_latency_s,
        diagnostics=diag_record,
    )


def run_round_classic(state, t):
    """Full local training on every device, then full-model averaging."""
    cfg = state.config
    model_bytes = _stack_param_bytes(state.global_model)
    losses, states, counts = {}, [], []
    for k in sorted(state.batches):
        state.ledger.record(t, k, "down", "model_down", model_bytes)
        local = models.clone_stack(state.global_model)
        total = 0.0
        for batch in state.batches[k]:
            x, y = _batch_input(state, k, batch)
            trace = kernel.forward(local, x)
            loss, dlogits = kernel.softmax_cross_entropy(trace.output, y)
            kernel.sgd_step(local, kernel.backward(local, trace, dlogits), cfg.lr)
            total += loss * len(y)
        state.ledger.record(t, k, "up", "model_up", model_bytes)
        losses[k] = total / len(state.shards[k])
        states.append(kernel.stack_state(local))
        counts.append(len(state.shards[k]))
        state.device_stacks[k] = None
        state.server_stacks[k] = local
    diag_record = _maybe_observe(state, t)
    kernel.load_state(state.global_model, fedavg(states, counts))
    return _finish_round(state, t, losses, diag_record)


def run_round_split(state, t):
    """Activation up, gradient down, every batch; stacks averaged after."""
    cfg = state.config
    frozen = state.frozen_device
    dev_bytes = _stack_param_bytes(state.global_device)
    losses, device_states, server_states, counts = {}, [], [], []
    for k in sorted(state.batches):
        if frozen:
            dev = state.global_device
        else:
            state.ledger.record(t, k, "down", "model_down", dev_bytes)
            dev = models.clone_stack(state.global_device)
        srv = models.clone_stack(state.global_server)
        total = 0.0
        for batch in state.batches[k]:
            x, y = _batch_input(state, k, batch)
            dtrace = kernel.forward(dev, x)
            a = dtrace.output
            state.ledger.record(t, k, "up", "activation", 4 * a.size)
            state.ledger.record(t, k, "up", "labels", 2 * len(y))
            loss, cut_grad = _server_step(srv, a, y, cfg.lr)
            state.ledger.record(t, k, "down", "gradient", 4 * a.size)
            if not frozen:
                kernel.sgd_step(dev, kernel.backward(dev, dtrace, cut_grad), cfg.lr)
            total += loss * len(y)
        if not frozen:
            state.ledger.record(t, k, "up", "model_up", dev_bytes)
            device_states.append(kernel.stack_state(dev))
        losses[k] = total / len(state.shards[k])
        server_states.append(kernel.stack_state(srv))
        counts.append(len(state.shards[k]))
        state.device_stacks[k] = dev
        state.server_stacks[k] = srv
    diag_record = _maybe_observe(state, t)
    if not frozen:
        kernel.load_state(state.global_device, fedavg(device_states, counts))
    kernel.load_state(state.global_server, fedavg(server_states, counts))
    return _finish_round(state, t, losses, diag_record)


def run_round_local_loss(state, t):
    """Device trains with a local auxiliary-head loss; the server trains on
    uploaded activations; nothing travels downlink but weight syncs."""
    cfg = state.config
    sync_bytes = _stack_param_bytes(state.global_device) + _stack_param_bytes(state.global_head)
    losses, local_states, server_states, counts = {}, [], [], []
    n_device_layers = len(state.global_device)
    for k in sorted(state.batches):
        state.ledger.record(t, k, "down", "model_down", sync_bytes)
        dev = models.clone_stack(state.global_device)
        head = models.clone_stack(state.global_head)
        srv = models.clone_stack(state.global_server)
        total = 0.0
        for batch in state.batches[k]:
            x, y = _batch_input(state, k, batch)
            dtrace = kernel.forward(dev, x)
            a = dtrace.output
            state.ledger.record(t, k, "up", "activation", 4 * a.size)
            state.ledger.record(t, k, "up", "labels", 2 * len(y))
            loss, _ = _server_step(srv, a, y, cfg.lr)
            # Local update is decoupled: it never alters the activation the
            # server just consumed, and its gradient stays on the device.
            htrace = kernel.forward(head, a)
            _, daux = kernel.softmax_cross_entropy(htrace.output, y)
            hgrads = kernel.backward(head, htrace, daux)
            dgrads = kernel.backward(dev, dtrace, hgrads.input_grad)
            kernel.sgd_step(head, hgrads, cfg.lr)
            kernel.sgd_step(dev, dgrads, cfg.lr)
            total += loss * len(y)
        state.ledger.record(t, k, "up", "model_up", sync_bytes)
        losses[k] = total / len(state.shards[k])
        local_states.append(kernel.stack_state(dev) + kernel.stack_state(head))
        server_states.append(kernel.stack_state(srv))
        counts.append(len(state.shards[k]))
        state.device_stacks[k] = dev
        state.server_stacks[k] = srv
    diag_record = _maybe_observe(state, t)
    merged = fedavg(local_states, counts)
    kernel.load_state(state.global_device, merged[:n_device_layers])
    kernel.load_state(state.global_head, merged[n_device_layers:])
    kernel.load_state(state.global_server, fedavg(server_states, counts))
    return _finish_round(state, t, losses, diag_record)


def run_round_replay(state, t):
    """Quantized activations up on transmission rounds, cache replay on the
    others; the frozen device stack never receives a gradient or a sync."""
    cfg = state.config
    on = buffer_mod.switch_is_on(t, cfg.rho)
    losses, server_states, counts = {}, [], []
    for k in sorted(state.batches):
        srv = models.clone_stack(state.global_server)
        total = 0.0
        for b, batch in enumerate(state.batches[k]):
            if on:
                x, y = _batch_input(state, k, batch)
                a = kernel.forward(state.global_device, x).output
                record = quantize.encode(
                    a, round_tag=t, device_id=k, batch_index=b,
                    labels=y, quantized=cfg.quantized,
                )
                state.buffer.store(record)
                state.ledger.record(
                    t, k, "up", "activation", quantize.record_wire_bytes(record)
                )
            else:
                record = state.buffer.fetch(k, b)
            a_hat = quantize.decode(record)
            loss, _ = _server_step(srv, a_hat, record.labels, cfg.lr)
            total += loss * len(record.labels)
        losses[k] = total / len(state.shards[k])
        server_states.append(kernel.stack_state(srv))
        counts.append(len(state.shards[k]))
        state.device_stacks[k] = state.global_device
        state.server_stacks[k] = srv
    diag_record = _maybe_observe(state, t)
    kernel.load_state(state.global_server, fedavg(server_states, counts))
    return _finish_round(state, t, losses, diag_record)


_ROUND_FNS = {
    "classic": run_round_classic,
    "split": run_round_split,
    "local_loss": run_round_local_loss,
    "replay": run_round_replay,
}


def run_training(config):
    """Execute T rounds of the configured mode; returns the final model,
    per-round results, and metrics rows. Deterministic under fixed seeds."""
    state = init_state(config)
    round_fn = _ROUND_FNS[config.mode]
    results, rows = [], []
    for t in range(config.rounds):
        try:
            result = round_fn(state, t)
        except (kernel.KernelError, quantize.QuantizeError, buffer_mod.BufferError,
                buffer_mod.BufferMiss, netsim.NetsimError, data_mod.DataError) as exc:
            raise TrainingError(f"round {t} ({config.mode}): {exc}") from exc
        results.append(result)
        rows.extend(_metrics_rows(config, result))
    if config.mode == "classic":
        final = state.global_model
    else:
        final = models.concat_weights(state.global_device, state.global_server)
    return RunOutput(final_model=final, results=results, rows=rows, state=state)


def _metrics_rows(config, result):
    rows = []
    for k in sorted(result.server_loss):
        up, down = result.traffic[k]
        diag = result.diagnostics
        rows.append(
            {
                "round": result.t,
                "device": k,
                "mode": config.mode,
                "server_loss": result.server_loss[k],
                "test_acc": result.test_acc,
                "bytes_up": up,
                "bytes_down": down,
                "epsilon_hat": diag.eps[k] if diag is not None else "",
                "delta_hat": diag.delta[k] if diag is not None else "",
                "sim_latency_s": result.latency_s,
            }
        )
    return rows


def write_metrics_csv(path, rows):
    """Metrics log: one row per (round, device); fixed column set."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("server_loss", "test_acc", "sim_latency_s",
                        "epsilon_hat", "delta_hat"):
                if out[key] != "":
                    out[key] = repr(float(out[key]))
            writer.writerow(out)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(METRICS_COLUMNS) - set(reader.fieldnames):
            raise TrainingError(f"{path} is not a metrics log")
        return list(reader)
