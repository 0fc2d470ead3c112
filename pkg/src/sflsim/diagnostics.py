"""Empirical convergence diagnostics for server-side split training.

Measures the quantities a first-order convergence bound for the server
stack is made of — per-round gradient norms, the quantization-induced
gradient gap (eps), the replay-staleness activation gap (delta), a
gradient-bound estimate G and a smoothness estimate L — and assembles
them into a bound report:

    LHS = (1/Gamma) * sum_t eta_t * ||grad F_S||^2
    RHS = 4*(F_0 - F*)/(3*Gamma)
          + G*(1/Gamma) * sum_t eta_t * (mean_k(delta_k + eps_k) + (L/2)*eta_t)

with Gamma = sum_t eta_t and F* anchored at the minimum observed loss.
G and L are sampled maxima, not proven suprema, so the LHS <= RHS check
is warning-grade: the report says whether it held, and callers log
rather than assert.

Everything here is a pure observer: estimators read model parameters and
run extra forward/backward passes on probe data drawn from a dedicated
RNG stream, but never step an optimizer or touch a training RNG, so
enabling diagnostics cannot change a training trajectory bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import buffer as buffer_mod
from . import data as data_mod
from . import kernel, models, quantize

PROBE_CAP = 64  # probe-subset size per device for gradient norms
SAMPLE_GRAD_CAP = 8  # per-sample gradients per device per round (for G)

CSV_COLUMNS = (
    "t",
    "eta",
    "grad_norm_sq",
    "eps_mean",
    "delta_mean",
    "loss",
    "gamma",
    "lhs_running",
    "rhs_running",
)


class DiagnosticsError(ValueError):
    """Malformed records, empty estimator input, or a bad report request."""


@dataclass
class DiagnosticsRecord:
    """One round's measurements, taken after SGD steps, before aggregation."""

    t: int
    eta: float
    grad_norm_sq: float  # mean over devices of ||grad F_S||^2 on the probe
    eps: dict  # device -> quantization gradient-gap estimate
    delta: dict  # device -> buffer staleness estimate
    loss: float  # mean probe server loss
    gamma: float  # running sum of eta through this round
    max_sample_grad_sq: float  # max per-sample squared gradient norm seen
    server_params: np.ndarray  # trajectory snapshot (first device's stack)

    @property
    def eps_mean(self):
        return float(np.mean(list(self.eps.values()))) if self.eps else 0.0

    @property
    def delta_mean(self):
        return float(np.mean(list(self.delta.values()))) if self.delta else 0.0


def _server_probe_gradient(server_layers, activations, labels):
    """(loss, flat gradient) of the server stack on one probe batch."""
    trace = kernel.forward(server_layers, activations)
    loss, dlogits = kernel.softmax_cross_entropy(trace.output, labels)
    grads = kernel.backward(server_layers, trace, dlogits)
    return loss, kernel.grad_vector(grads)


def record_round(state, t):
    """Measure one round of a running training state.

    ``state`` is the runtime's TrainState; the fields read here are
    device_stacks / server_stacks (per device, post-SGD, pre-aggregation),
    batches, dataset, probe_indices, diag_rng, buffer, and config (lr,
    quantized, mode, augment). Reads only — no training state is mutated.
    """
    cfg = state.config
    quantized_pipeline = cfg.mode == "replay" and cfg.quantized
    grad_sqs, losses, eps, delta = [], [], {}, {}
    max_sample_sq = 0.0
    snapshot = None
    for k in sorted(state.batches):
        probe = state.probe_indices[k]
        x = state.dataset.images[probe]
        y = state.dataset.labels[probe]
        device_stack = state.device_stacks.get(k)
        a = kernel.forward(device_stack, x).output if device_stack else x
        server = state.server_stacks[k]
        loss, g = _server_probe_gradient(server, a, y)
        grad_sqs.append(float(g @ g))
        losses.append(loss)
        eps[k] = quantize.quantization_error(a, server, y, quantized=quantized_pipeline)
        delta[k] = _staleness(state, k, device_stack)
        for i in range(min(len(y), SAMPLE_GRAD_CAP)):
            _, gi = _server_probe_gradient(server, a[i : i + 1], y[i : i + 1])
            max_sample_sq = max(max_sample_sq, float(gi @ gi))
        if snapshot is None:
            snapshot = kernel.param_vector(server)
    prior = getattr(state, "diagnostics_records", [])
    gamma = sum(r.eta for r in prior) + cfg.lr
    return DiagnosticsRecord(
        t=t,
        eta=cfg.lr,
        grad_norm_sq=float(np.mean(grad_sqs)),
        eps=eps,
        delta=delta,
        loss=float(np.mean(losses)),
        gamma=gamma,
        max_sample_grad_sq=max_sample_sq,
        server_params=snapshot,
    )


def _staleness(state, device_id, device_stack):
    """Buffer-vs-fresh activation distance for one device (0 off-replay).

    The fresh side replays the device forward on one cached batch with
    this round's augmentation setting; augmentation draws come from the
    diagnostics RNG so the measurement never consumes training RNG state.
    """
    buf = getattr(state, "buffer", None)
    if buf is None:
        return 0.0
    batches = state.batches[device_id]
    b = int(state.diag_rng.integers(len(batches)))
    if (device_id, b) not in buf.keys():
        return 0.0
    x = state.dataset.images[batches[b]]
    if state.config.augment:
        x = data_mod.augment_hflip(x, state.diag_rng)
    fresh = kernel.forward(device_stack, x).output
    return buffer_mod.buffer_distance_proxy(buf, [(device_id, b, fresh)])


def estimate_G(records):
    """Observed bound on per-sample squared gradient norms (running max)."""
    records = list(records)
    if not records:
        raise DiagnosticsError("estimate_G needs at least one record")
    return max(r.max_sample_grad_sq for r in records)


def estimate_L(grad_fn, centers, rng, pairs_per_center=4, sigma=1e-2):
    """Smoothness estimate: max ||g(w) - g(v)|| / ||w - v|| over Gaussian
    perturbation pairs (w, v) drawn around each trajectory center."""
    centers = [np.asarray(c, dtype=np.float64).reshape(-1) for c in centers]
    if not centers:
        raise DiagnosticsError("estimate_L needs at least one trajectory point")
    if sigma <= 0:
        raise DiagnosticsError("sigma must be positive")
    best = 0.0
    for center in centers:
        for _ in range(pairs_per_center):
            w = center + sigma * rng.standard_normal(center.shape)
            v = center + sigma * rng.standard_normal(center.shape)
            gap = np.linalg.norm(w - v)
            while gap == 0.0:  # zero-denominator guard; measure-zero redraw
                v = center + sigma * rng.standard_normal(center.shape)
                gap = np.linalg.norm(w - v)
            best = max(best, float(np.linalg.norm(grad_fn(w) - grad_fn(v)) / gap))
    return best


def server_grad_fn(server_layers, activations, labels):
    """Closure theta -> flat CE gradient of a server-stack clone at theta,
    on a fixed probe batch. Feeds estimate_L from a training run."""
    stack = models.clone_stack(server_layers)

    def fn(theta):
        kernel.load_param_vector(stack, theta)
        _, g = _server_probe_gradient(stack, activations, labels)
        return g

    return fn


@dataclass
class BoundReport:
    rounds: int
    gamma: float
    lhs: float
    rhs: float
    f0: float
    f_star: float
    g_hat: float
    l_hat: float
    term_descent: float  # 4*(F0 - F*)/(3*Gamma)
    term_drift: float  # G/Gamma * sum eta_t * mean_k(delta+eps)
    term_step: float  # G/Gamma * sum (L/2) * eta_t^2
    holds: bool
    message: str


def bound_report(records, g_hat, l_hat, f_star=None):
    """Assemble the bound's two sides from logged rounds. Warning-grade:
    the report carries holds/message; callers log, never assert."""
    records = list(records)
    if len(records) < 2:
        raise DiagnosticsError("bound_report needs at least 2 records")
    gamma = sum(r.eta for r in records)
    if gamma <= 0:
        raise DiagnosticsError("Gamma must be positive")
    f0 = records[0].loss
    if f_star is None:
        f_star = min(r.loss for r in records)
    lhs = sum(r.eta * r.grad_norm_sq for r in records) / gamma
    drift = g_hat * sum(r.eta * (r.delta_mean + r.eps_mean) for r in records) / gamma
    step = g_hat * sum((l_hat / 2.0) * r.eta**2 for r in records) / gamma
    descent = 4.0 * (f0 - f_star) / (3.0 * gamma)
    rhs = descent + drift + step
    holds = bool(lhs <= rhs)
    message = (
        "bound holds"
        if holds
        else f"WARNING: LHS {lhs:.6g} exceeds RHS {rhs:.6g}; "
        "G and L are sampled estimates, not suprema"
    )
    return BoundReport(
        rounds=len(records),
        gamma=gamma,
        lhs=lhs,
        rhs=rhs,
        f0=f0,
        f_star=f_star,
        g_hat=g_hat,
        l_hat=l_hat,
        term_descent=descent,
        term_drift=drift,
        term_step=step,
        holds=holds,
        message=message,
    )


def format_report(report):
    lines = [
        f"rounds        {report.rounds}",
        f"Gamma         {report.gamma:.6g}",
        f"G_hat         {report.g_hat:.6g}",
        f"L_hat         {report.l_hat:.6g}",
        f"F0 / F*       {report.f0:.6g} / {report.f_star:.6g}",
        f"LHS           {report.lhs:.6g}",
        f"RHS           {report.rhs:.6g}"
        f"  (descent {report.term_descent:.3g}"
        f" + drift {report.term_drift:.3g}"
        f" + step {report.term_step:.3g})",
        report.message,
    ]
    return "\n".join(lines)


def write_diagnostics_csv(path, records, g_hat, l_hat):
    """One row per round. lhs_running/rhs_running are the bound's two sides
    over the prefix of rounds up to each row, using the full-run G and L
    estimates throughout (so the columns are comparable down the file)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i, rec in enumerate(records):
            if i >= 1:
                rep = bound_report(records[: i + 1], g_hat, l_hat)
                lhs, rhs = rep.lhs, rep.rhs
            else:
                lhs, rhs = "", ""
            writer.writerow(
                [
                    rec.t,
                    repr(rec.eta),
                    repr(rec.grad_norm_sq),
                    repr(rec.eps_mean),
                    repr(rec.delta_mean),
                    repr(rec.loss),
                    repr(rec.gamma),
                    repr(lhs) if lhs != "" else "",
                    repr(rhs) if rhs != "" else "",
                ]
            )


def read_diagnostics_csv(path):
    """Rows of the diagnostics CSV as dicts of floats ('' -> None)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
            raise DiagnosticsError(f"{path} is not a diagnostics log")
        rows = []
        for raw in reader:
            row = {}
            for key in CSV_COLUMNS:
                value = raw[key]
                row[key] = None if value == "" else float(value)
            row["t"] = int(row["t"])
            rows.append(row)
    if not rows:
        raise DiagnosticsError(f"{path} holds no rounds")
    return rows
