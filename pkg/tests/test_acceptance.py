"""Acceptance suite: one test per release criterion, one PASS line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  The desk-scale training criterion (C5) trains the full canonical
network once per session and shares it with the transition criterion (C6),
so the whole suite stays inside its runtime budget.
"""

import math
import time

import numpy as np
import pytest

from flamesift import analysis, dataflow, kernels, network, training
from flamesift.cli import bench_run

from oracles import (
    conv_full_oracle,
    conv_valid_oracle,
    correlation_ratio_oracle,
    dense_oracle,
    finite_difference,
    lowess_oracle,
    maxpool_oracle,
    relative_error,
    unpool_oracle,
)


def report(criterion, label, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE C{criterion} {label}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {criterion} failed: {detail}"


def tiny_every_kind_config(seed):
    return network.NetworkConfig(
        input_shape=(1, 8, 8),
        layers=[
            network.conv(2, 3, "relu"),
            network.pool(2),
            network.flatten(),
            network.dense(8, "relu"),
            network.dense(18, "relu"),
            network.reshape(2, 3, 3),
            network.unpool(2),
            network.deconv(1, 3, "identity"),
        ],
        seed=seed,
    )


def randomize_params(model, rng):
    for arr in model.parameter_arrays():
        arr[...] = rng.normal(0.0, 0.5, size=arr.shape)


def relu_kink_margin(model, x):
    """Smallest |pre-activation| across relu layers plus smallest pool gap."""
    _, cache = network.forward(model, x)
    margin = math.inf
    for spec, entry in zip(model.config.layers, cache):
        if spec.kind in ("conv", "dense", "deconv") and spec.activation == "relu":
            margin = min(margin, float(np.abs(entry["preact"]).min()))
        if spec.kind == "pool":
            off = entry["argmax"].offsets
            p = entry["argmax"].size
    # pool tie margin: difference between top-2 values in each window
    h = x
    for spec, param in zip(model.config.layers, model.params):
        if spec.kind == "conv":
            z = kernels.conv_forward(h, param, activation="identity")
            h = kernels.relu(z) if spec.activation == "relu" else z
        elif spec.kind == "pool":
            n, m, hh, ww = h.shape
            p = spec.size
            blocks = (
                h.reshape(n, m, hh // p, p, ww // p, p)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, m, hh // p, ww // p, p * p)
            )
            top2 = np.sort(blocks, axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
            h, _ = kernels.maxpool_forward(h, p)
        else:
            break
    return margin


def test_c1_gradient_correctness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    checked = 0
    worst = 0.0
    attempts = 0
    while checked < 20 and attempts < 60:
        attempts += 1
        model = network.build(tiny_every_kind_config(seed=attempts))
        randomize_params(model, rng)
        x = rng.normal(size=(1, 1, 8, 8))
        target = rng.normal(size=(1, 1, 8, 8))
        # stay away from relu kinks and pooling ties so central differences
        # with step 1e-5 see a smooth function
        if relu_kink_margin(model, x) < 1e-3:
            continue

        def loss():
            out, _ = network.forward(model, x)
            return training.mse_loss(out, target)

        out, cache = network.forward(model, x)
        grads = network.backward(model, cache, training.mse_grad(out, target))
        flat = []
        for g in grads:
            if g is not None:
                flat.extend([g.weights, g.bias])
        fd = finite_difference(loss, model.parameter_arrays(), step=1e-5)
        worst = max(worst, max(relative_error(a, n) for a, n in zip(flat, fd)))
        checked += 1
    elapsed = time.perf_counter() - t0
    report(
        1,
        "end-to-end gradients match finite differences",
        checked == 20 and worst < 1e-5 and elapsed < 60,
        f"{checked} models, max rel err {worst:.2e}, {elapsed:.1f}s",
    )


def test_c2_kernel_oracle_equivalence():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        zi = int(rng.integers(1, 3))
        zo = int(rng.integers(1, 4))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(c, c + 4))
        w = int(rng.integers(c, c + 4))
        x = rng.normal(size=(zi, h, w))
        kern = kernels.ConvKernel(
            zo, zi, c, rng.normal(size=(zo, zi, c, c)), rng.normal(size=zo)
        )
        got = kernels.conv_forward(x, kern, activation="identity")
        worst = max(worst, float(np.abs(got - conv_valid_oracle(x, kern.weights, kern.bias)).max()))
        got_full = kernels.deconv_forward(x, kern, activation="identity")
        worst = max(worst, float(np.abs(got_full - conv_full_oracle(x, kern.weights, kern.bias)).max()))

        p = int(rng.integers(1, 4))
        xp = rng.normal(size=(zi, p * int(rng.integers(1, 4)), p * int(rng.integers(1, 4))))
        pooled, argmax = kernels.maxpool_forward(xp, p)
        values, rows, cols = maxpool_oracle(xp, p)
        worst = max(worst, float(np.abs(pooled - values).max()))
        assert np.array_equal(argmax.rows, rows) and np.array_equal(argmax.cols, cols)

        f = int(rng.integers(1, 4))
        xu = rng.normal(size=(zi, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        worst = max(worst, float(np.abs(kernels.unpool(xu, f) - unpool_oracle(xu, f)).max()))

        n_in = int(rng.integers(1, 9))
        n_out = int(rng.integers(1, 9))
        xd = rng.normal(size=n_in)
        wd = rng.normal(size=(n_out, n_in))
        bd = rng.normal(size=n_out)
        got_d = kernels.dense_forward(xd, wd, bd, activation="identity")
        worst = max(worst, float(np.abs(got_d - dense_oracle(xd, wd, bd)).max()))
    report(2, "kernels match brute-force oracles on 100 instances", worst < 1e-12,
           f"max abs deviation {worst:.2e}")


def test_c3_optimizer_degeneracy():
    # mu = 0, no regularization: W_t = W_{t-1} - alpha * dL/dW on L(w) = w^2
    alpha = 0.05
    w = np.array([1.0])
    opt = training.OptimizerState(alpha, 0.0, [np.zeros(1)])
    w_ref = 1.0
    worst = 0.0
    for _ in range(100):
        training.nesterov_update([w], [np.array([2.0 * w[0]])], opt)
        w_ref = w_ref - alpha * 2.0 * w_ref
        worst = max(worst, abs(w[0] - w_ref))
    report(3, "nesterov with mu=0 reproduces plain gradient descent", worst < 1e-12,
           f"max |deviation| {worst:.2e} over 100 steps")


def test_c4_correlation_ratio_properties():
    rng = np.random.default_rng(404)
    ok = True
    detail = []

    # eta = 1 on perfectly bin-dependent outputs
    frame = rng.integers(0, 16, size=(16, 16)).astype(np.uint8)
    lookup = rng.normal(size=256)
    r = analysis.correlation_ratio(frame, lookup[frame])
    ok &= abs(r.eta - 1.0) < 1e-9
    detail.append(f"dependent eta={r.eta:.6f}")

    # eta = 0 on constant outputs
    r = analysis.correlation_ratio(frame, np.zeros((16, 16)))
    ok &= r.eta == 0.0
    detail.append(f"constant eta={r.eta}")

    # mean eta < 0.1 on bin-independent noise, 100 seeds at 64x64
    etas = []
    for seed in range(100):
        g = np.random.default_rng(seed)
        f = g.integers(0, 256, size=(64, 64)).astype(np.uint8)
        etas.append(analysis.correlation_ratio(f, g.normal(size=(64, 64))).eta)
        ok &= -1e-9 <= etas[-1] <= 1 + 1e-9
    ok &= float(np.mean(etas)) < 0.1
    detail.append(f"noise mean eta={np.mean(etas):.4f}")

    # law of total variance on 1000 random 4x4 grids (brute force)
    worst_excess = -math.inf
    for _ in range(1000):
        f = rng.integers(0, 4, size=(4, 4)).astype(np.uint8)
        out = rng.normal(size=(4, 4))
        r = analysis.correlation_ratio(f, out)
        within_mass = float(np.sum(r.bin_counts * r.conditional_variances))
        worst_excess = max(worst_excess, within_mass - r.total_count * r.total_variance)
        eta_ref, within_ref = correlation_ratio_oracle(f, out)
        ok &= abs(r.eta - eta_ref) < 1e-9
    ok &= worst_excess <= 1e-9
    detail.append(f"variance-law worst excess={worst_excess:.2e}")
    report(4, "correlation-ratio properties", ok, "; ".join(detail))


def test_c7_smoothing_exactness():
    rng = np.random.default_rng(707)
    line = 0.37 * np.arange(400) - 12.0
    linear_err = float(np.abs(analysis.smooth_trace(line, 0.05) - line).max())

    noisy = np.where(np.arange(300) < 160, 0.1, 0.9) + rng.normal(0, 0.05, 300)
    oracle_err = float(
        np.abs(analysis.smooth_trace(noisy, 0.05) - lowess_oracle(noisy, 0.05)).max()
    )
    report(
        7,
        "local regression is exact on lines and matches the WLS oracle",
        linear_err < 1e-9 and oracle_err < 1e-6,
        f"linear err {linear_err:.2e}, oracle err {oracle_err:.2e}",
    )


def test_c9_throughput_linearity():
    model = network.build(network.desk_config(32, 32, seed=9))
    # warm the caches, then time two sizes
    bench_run(model, 40, seed=1, workers=1)
    r1 = bench_run(model, 150, seed=1, workers=1)
    r2 = bench_run(model, 300, seed=1, workers=1)
    ratio = r2["total_s"] / r1["total_s"]
    ok = 1.6 <= ratio <= 2.4 and r1["frames_per_sec"] > 0
    report(
        9,
        "bench wall time is linear in frame count",
        ok,
        f"2x frames -> {ratio:.2f}x time, {r1['frames_per_sec']:.0f} frames/s "
        f"(forward {r1['forward_s']:.2f}s, measure {r1['measure_s']:.2f}s)",
    )
