"""Command-line interface.

Subcommands
    run       config -> training -> metrics CSV (+ diagnostics CSV)
    cost      per-round communication tables, aligned text and CSV
    diagnose  convergence-bound report from a diagnostics log
    gen-data  write a synthetic dataset as an IDX file pair
    selftest  quick invariant suite

Exit codes: 0 success, 2 usage, 3 config error, 4 data error, 5 training
error. Set SFL_LOG_LEVEL (DEBUG/INFO/WARNING/...) to adjust logging.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import __version__
from . import buffer as buffer_mod
from . import config as config_mod
from . import data as data_mod
from . import diagnostics as diag_mod
from . import kernel, models, netsim, quantize, runtime

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAINING = 5

COST_METHODS = ("classic", "split", "local_loss", "replay_tx", "replay_buffer")

SETTINGS = {
    # The reference comparison point: 5 devices, 10k samples each, batch 100.
    "cifar10-k5": dict(samples_per_device=10_000, devices=5, batch_size=100),
}

log = logging.getLogger("sflsim")


def _configure_logging():
    level = os.environ.get("SFL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sflsim",
        description="Split federated learning simulator: training, cost model, diagnostics.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train per a JSON config and write metrics")
    p_run.add_argument("--config", required=True, help="path to a run-config JSON file")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=".", help="directory for metrics/diagnostics CSVs")
    p_run.add_argument("--profile", choices=sorted(netsim.PROFILES),
                       default=None, help="override the config network profile")

    p_cost = sub.add_parser("cost", help="print per-round communication cost tables")
    p_cost.add_argument("--model", choices=sorted(models.ZOO), default="vgg11")
    p_cost.add_argument("--setting", choices=sorted(SETTINGS), default="cifar10-k5")
    p_cost.add_argument("--devices", type=int, default=None)
    p_cost.add_argument("--samples", type=int, default=None, help="samples per device")
    p_cost.add_argument("--batch", type=int, default=None, help="batch size")
    p_cost.add_argument("--csv", default=None, help="also write the table to this CSV path")

    p_diag = sub.add_parser("diagnose", help="bound report from a diagnostics log")
    p_diag.add_argument("--log", required=True, help="diagnostics CSV from a run")
    p_diag.add_argument("--at", type=int, action="append", default=None,
                        help="report after this many rounds (repeatable)")

    p_gen = sub.add_parser("gen-data", help="write synthetic blobs as IDX files")
    p_gen.add_argument("--out", default=".", help="output directory")
    p_gen.add_argument("--classes", type=int, default=2)
    p_gen.add_argument("--per-class", type=int, default=200)
    p_gen.add_argument("--sigma", type=float, default=0.05)
    p_gen.add_argument("--height", type=int, default=16)
    p_gen.add_argument("--width", type=int, default=16)
    p_gen.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="run the built-in invariant suite")
    return parser


def cmd_run(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.profile is not None:
        overrides["profile"] = args.profile
    cfg = config_mod.load_config(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)
    log.info("running %s: %s rounds, %s devices", cfg.mode, cfg.rounds, cfg.devices)
    output = runtime.run_training(cfg)
    metrics_path = os.path.join(args.out, "metrics.csv")
    runtime.write_metrics_csv(metrics_path, output.rows)
    print(f"metrics written to {metrics_path}")
    if cfg.diagnostics:
        records = output.state.diagnostics_records
        g_hat = diag_mod.estimate_G(records)
        l_hat = _trajectory_smoothness(output, records)
        diag_path = os.path.join(args.out, "diagnostics.csv")
        diag_mod.write_diagnostics_csv(diag_path, records, g_hat, l_hat)
        print(f"diagnostics written to {diag_path}")
    final = output.results[-1]
    total_up = output.state.ledger.total(direction="up")
    total_down = output.state.ledger.total(direction="down")
    print(f"final test accuracy {final.test_acc:.4f}")
    print(f"total traffic up {total_up} B, down {total_down} B "
          f"({(total_up + total_down) / netsim.GIB:.4f} GiB)")
    return EXIT_OK


def _trajectory_smoothness(output, records):
    """L estimate for a finished run: perturbation pairs around the logged
    server trajectory, gradients on device 0's diagnostics probe."""
    state = output.state
    probe = state.probe_indices[0]
    x = state.dataset.images[probe]
    y = state.dataset.labels[probe]
    device_stack = state.device_stacks.get(0)
    a = kernel.forward(device_stack, x).output if device_stack else x
    grad_fn = diag_mod.server_grad_fn(state.server_stacks[0], a, y)
    centers = [r.server_params for r in records]
    step = max(1, len(centers) // 8)  # cap the probe work on long runs
    return diag_mod.estimate_L(grad_fn, centers[::step], state.diag_rng)


def cost_table(spec_name, *, samples_per_device, devices, batch_size):
    """Rows of the per-round communication table for one model."""
    spec = models.ZOO[spec_name]()
    rows = []
    for method in COST_METHODS:
        report = netsim.comm_bytes_per_round(
            method, spec,
            samples_per_device=samples_per_device,
            devices=devices,
            batch_size=batch_size,
        )
        rows.append(
            {
                "model": spec_name,
                "method": method,
                "per_device_up": report.per_device_up,
                "per_device_down": report.per_device_down,
                "total_bytes": report.total_bytes,
                "gib": report.gib,
            }
        )
    return rows


def _format_cost_rows(rows, setting):
    out = io.StringIO()
    out.write(
        f"per-round communication, {setting['devices']} devices x "
        f"{setting['samples_per_device']} samples, batch {setting['batch_size']}\n"
    )
    header = f"{'model':<10} {'method':<14} {'up/dev B':>15} {'down/dev B':>15} {'total GiB':>12}"
    out.write(header + "\n")
    out.write("-" * len(header) + "\n")
    for row in rows:
        out.write(
            f"{row['model']:<10} {row['method']:<14} "
            f"{row['per_device_up']:>15,} {row['per_device_down']:>15,} "
            f"{row['gib']:>12.5f}\n"
        )
    return out.getvalue()


def cmd_cost(args):
    setting = dict(SETTINGS[args.setting])
    if args.devices is not None:
        setting["devices"] = args.devices
    if args.samples is not None:
        setting["samples_per_device"] = args.samples
    if args.batch is not None:
        setting["batch_size"] = args.batch
    rows = cost_table(args.model, **setting)
    print(_format_cost_rows(rows, setting), end="")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"table written to {args.csv}")
    return EXIT_OK


def cmd_diagnose(args):
    rows = diag_mod.read_diagnostics_csv(args.log)
    points = sorted(args.at) if args.at else [len(rows)]
    any_warning = False
    for point in points:
        if point < 2 or point > len(rows):
            raise diag_mod.DiagnosticsError(
                f"--at {point} outside the log's range (2..{len(rows)})"
            )
        row = rows[point - 1]
        lhs, rhs = row["lhs_running"], row["rhs_running"]
        held = lhs is not None and rhs is not None and lhs <= rhs
        status = "holds" if held else "WARNING: does not hold"
        any_warning = any_warning or not held
        print(
            f"after {point:>4} rounds: Gamma {row['gamma']:.6g}  "
            f"LHS {lhs:.6g}  RHS {rhs:.6g}  -> bound {status}"
        )
    if any_warning:
        print("note: G and L are sampled estimates; a warning is diagnostic, not an error")
    return EXIT_OK


def cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)
    dataset = data_mod.generate_blobs(
        classes=args.classes,
        per_class=args.per_class,
        image_shape=(1, args.height, args.width),
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    images_path = os.path.join(args.out, "images.idx")
    labels_path = os.path.join(args.out, "labels.idx")
    data_mod.write_idx(images_path, labels_path, dataset.images, dataset.labels)
    print(f"wrote {len(dataset.labels)} samples to {images_path} / {labels_path}")
    return EXIT_OK


def cmd_selftest(args):
    """Fast invariant spot-checks covering each module."""
    checks = []

    def check(name, fn):
        fn()
        checks.append(name)
        print(f"selftest: {name} ok")

    def quantizer_roundtrip():
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.normal(0, 3, size=(4, 7)).astype(np.float32)
            rec = quantize.quantize(a, 0, 0, 0)
            back = quantize.dequantize(rec)
            tol = rec.scale / 2 + np.spacing(np.abs(a).max())
            assert np.max(np.abs(back - a)) <= tol

    def switch_counts():
        for rho in (1, 2, 4, 8):
            on = sum(buffer_mod.switch_is_on(t, rho) for t in range(64))
            assert on == -(-64 // rho)

    def fedavg_identity():
        spec = models.ZOO["tiny_vgg"]()
        stack = models.build_model(spec, seed=1).layers
        state = kernel.stack_state(stack)
        merged = runtime.fedavg([state, state, state], [1, 2, 3])
        for got, want in zip(merged, state):
            for key in want:
                assert np.array_equal(got[key], want[key])

    def gradient_spot_check():
        rng = np.random.default_rng(2)
        layer = kernel.Dense(6, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(4, 6))
        readout = rng.normal(size=(4, 3))
        trace = kernel.forward([layer], x)
        grads = kernel.backward([layer], trace, readout)
        eps = 1e-6
        w = layer.params()["w"]
        probe = (0, 0)
        keep = w[probe]
        w[probe] = keep + eps
        layer.bump()
        up = float(np.sum(kernel.forward([layer], x).output * readout))
        w[probe] = keep - eps
        layer.bump()
        down = float(np.sum(kernel.forward([layer], x).output * readout))
        w[probe] = keep
        layer.bump()
        fd = (up - down) / (2 * eps)
        assert abs(fd - grads.layers[0]["w"][probe]) <= 1e-6 * max(1.0, abs(fd))

    def cost_model_pinned():
        spec = models.ZOO["vgg11"]()
        report = netsim.comm_bytes_per_round(
            "split", spec, samples_per_device=10_000, devices=5, batch_size=100
        )
        assert report.total_bytes == 3_279_925_920

    check("quantizer round-trip", quantizer_roundtrip)
    check("transmission schedule counts", switch_counts)
    check("fedavg identity", fedavg_identity)
    check("dense gradient vs finite difference", gradient_spot_check)
    check("cost model pinned value", cost_model_pinned)
    print(f"selftest: {len(checks)} checks passed")
    return EXIT_OK


_COMMANDS = {
    "run": cmd_run,
    "cost": cmd_cost,
    "diagnose": cmd_diagnose,
    "gen-data": cmd_gen_data,
    "selftest": cmd_selftest,
}


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DataError, diag_mod.DiagnosticsError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (runtime.TrainingError, kernel.KernelError, quantize.QuantizeError,
            buffer_mod.BufferError, netsim.NetsimError, AssertionError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
