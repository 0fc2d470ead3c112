"""Shared test oracles: finite-difference gradient checks and conditioned inputs."""

from __future__ import annotations

import numpy as np

from sflsim import kernel

FD_STEP = 1e-5
FD_RTOL = 1e-4


def conditioned_input(rng, shape, margin=1e-3):
    """Random input kept away from ReLU kinks and maxpool ties.

    Values are drawn uniformly, then redrawn while any entry sits within
    `margin` of zero or any 2x2 pool window has two entries closer than
    `margin`. Events are measure-zero under the draw, so this terminates
    fast; it conditions the finite-difference oracle, it does not weaken it.
    """
    for _ in range(200):
        x = rng.uniform(-1.0, 1.0, size=shape)
        if np.min(np.abs(x)) <= margin:
            continue
        if len(shape) == 4 and shape[2] % 2 == 0 and shape[3] % 2 == 0:
            b, c, h, w = shape
            windows = x.reshape(b, c, h // 2, 2, w // 2, 2)
            windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            gaps = np.sort(windows, axis=1)
            if np.min(np.diff(gaps, axis=1)) <= margin:
                continue
        return x
    raise RuntimeError("could not condition input")


def _objective(layers, x, readout):
    trace = kernel.forward(layers, x)
    return float(np.sum(trace.output * readout))


def _rel_err(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return np.max(np.abs(analytic - numeric)) / scale


def fd_check_layer(layer, x, rng, step=FD_STEP, rtol=FD_RTOL):
    """Central finite differences vs analytic backward for one layer.

    Uses a fixed random linear readout J = sum(y * R) so dJ/dy = R, which
    exercises the full gradient path without needing a loss. Checks every
    parameter entry and every input entry. Requires float64 inputs/params.
    """
    layers = [layer]
    trace = kernel.forward(layers, x)
    readout = rng.standard_normal(trace.output.shape)
    grads = kernel.backward(layers, trace, readout)

    for name, param in layer.params().items():
        analytic = grads.layers[0][name]
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _objective(layers, x, readout)
            flat[i] = orig - step
            lo = _objective(layers, x, readout)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
        err = _rel_err(analytic, numeric)
        assert err <= rtol, f"{layer.kind} param {name}: fd rel err {err:.3e}"

    analytic = grads.input_grad
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _objective(layers, x, readout)
        flat[i] = orig - step
        lo = _objective(layers, x, readout)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)
    err = _rel_err(analytic, numeric)
    assert err <= rtol, f"{layer.kind} input grad: fd rel err {err:.3e}"


def quantizer_property_suite(trials, seed):
    """Round-trip bound, grid idempotence, endpoint coverage, constant
    handling over random tensors. Shared by the module test and the
    acceptance gate (criterion: 1e4 trials under 30 s)."""
    from sflsim import quantize

    rng = np.random.default_rng(seed)
    for t in range(trials):
        size = int(rng.integers(2, 65))
        loc = rng.uniform(-10.0, 10.0)
        width = rng.uniform(0.01, 20.0)
        a = (loc + width * rng.random(size)).astype(np.float32)
        if float(a.max()) == float(a.min()):
            a[0] += np.float32(width)
        rec = quantize.quantize(a, round_tag=t, device_id=0, batch_index=0)

        # endpoint codes 0 and 255 both present for non-constant tensors
        assert rec.codes.min() == 0 and rec.codes.max() == 255

        # round-trip error <= scale/2 + 1 ulp of the largest magnitude
        back = quantize.dequantize(rec)
        bound = rec.scale / 2.0 + float(np.spacing(np.abs(a).max()))
        err = float(np.max(np.abs(back.astype(np.float64) - a.astype(np.float64))))
        assert err <= bound, f"trial {t}: round-trip err {err} > bound {bound}"

        # quantizing the dequantized grid reproduces codes, scale, and min
        again = quantize.quantize(back, round_tag=t, device_id=0, batch_index=0)
        assert np.array_equal(again.codes, rec.codes), f"trial {t}: codes moved"
        assert again.scale == rec.scale and again.min_val == rec.min_val

    # constant tensors: scale 0, codes 0, exact reconstruction
    for value in (-3.5, 0.0, 7.25):
        rec = quantize.quantize(np.full(9, value, dtype=np.float32), round_tag=0, device_id=0, batch_index=0)
        assert rec.scale == 0.0 and np.all(rec.codes == 0)
        assert np.array_equal(quantize.dequantize(rec), np.full(9, value, dtype=np.float32))


def make_layer_instances(seed):
    """One randomly shaped instance of every layer kind, float64."""
    rng = np.random.default_rng(seed)
    c_in = int(rng.integers(1, 5))
    c_out = int(rng.integers(1, 5))
    n_in = int(rng.integers(2, 33))
    n_out = int(rng.integers(2, 17))
    hw = int(rng.choice([4, 6, 8]))
    init = np.random.default_rng(seed + 1)
    return [
        (kernel.Dense(n_in, n_out, rng=init, dtype=np.float64), (2, n_in)),
        (kernel.Conv3x3(c_in, c_out, rng=init, dtype=np.float64), (2, c_in, hw, hw)),
        (kernel.Conv1x1(c_in, c_out, rng=init, dtype=np.float64), (2, c_in, hw, hw)),
        (kernel.MaxPool2x2(), (2, c_in, hw, hw)),
        (kernel.ReLU(), (2, c_in, hw, hw)),
        (kernel.Flatten(), (2, c_in, hw, hw)),
        (kernel.ResidualBlock(c_in, c_out, rng=init, dtype=np.float64), (2, c_in, 6, 6)),
    ]
