"""Acceptance gate: one test and one printed pass/fail line per criterion.

Run with `pytest -v tests/test_acceptance.py` to see the lines as the
criteria finish (output capture is disabled in pyproject). Every
criterion asserts both its stated tolerance and its runtime budget.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from compmask import masks as mk, recovery, theory, trainer
from compmask.autograd import Graph, Param
from compmask.seeds import child_rng


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    if sys.stdout is not sys.__stdout__:
        # bypass pytest's capture so the line shows without -s
        print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def test_criterion_1_complementary_ip_exactly_zero():
    start = time.time()
    config = mk.MaskConfig((256,), 1, 0.5)
    rng = child_rng(0, 0)
    worst = 0.0
    for i in range(10_000):
        x = rng.normal(size=256)
        pair = mk.sample_pair(config, "complementary", i)
        value = theory.ip_metric(x * pair.masks[0].bits,
                                 x * pair.masks[1].bits, x)
        worst = max(worst, abs(value))
    elapsed = time.time() - start
    report(1, worst == 0.0 and elapsed < 5.0,
           f"max |IP| = {worst} over 1e4 complementary pairs, "
           f"{elapsed:.1f}s (< 5s)")


def test_criterion_2_random_ip_statistics():
    start = time.time()
    stats = theory.ip_experiment(np.ones(256), "random", 100_000, 0)
    elapsed = time.time() - start
    mean_ok = abs(stats.mean - 0.25) <= 0.01
    var_ok = abs(stats.variance - stats.predicted_variance) \
        <= 0.1 * stats.predicted_variance
    report(2, mean_ok and var_ok and elapsed < 30.0,
           f"mean {stats.mean:.5f} (0.25 +- 0.01), variance "
           f"{stats.variance:.3e} vs predicted {stats.predicted_variance:.3e} "
           f"(+-10%), {elapsed:.1f}s (< 30s)")


def test_criterion_3_multiview_partition():
    start = time.time()
    config = mk.MaskConfig((256,), 1, 0.5)
    all_partition = True
    flagged = True
    means = {}
    for k in (2, 3, 4):
        for trial in range(1000):
            pair = mk.sample_pair(config, "multiview", 1000 * k + trial, k=k)
            total = sum(m.bits for m in pair.masks)
            all_partition = all_partition and bool(np.all(total == 1.0))
        stats = theory.multiview_experiment(np.ones(256), k, 1000, k)
        means[k] = stats.mean
        flagged = flagged and stats.mean == 0.0 and stats.discrepancy \
            and stats.predicted_mean == 1.0 / k ** 2
    elapsed = time.time() - start
    report(3, all_partition and flagged and elapsed < 10.0,
           f"exact partitions for K=2,3,4; measured MIP {means} with 1/K^2 "
           f"prediction emitted and discrepancy flagged, {elapsed:.1f}s (< 10s)")


def _fd_gradient(func, arr, step=1e-5):
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = func()
        flat[i] = orig - step
        lo = func()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def _rel_err(analytic, numeric):
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _op_builders(rng):
    """One scalar-rooted graph builder per differentiable op."""
    b = rng.normal(size=(2, 3))
    w4 = rng.normal(size=(1, 2, 3, 3))
    wc = rng.normal(size=(2, 2, 4, 4))
    targets = rng.integers(0, 3, size=(2, 4))
    weights = (rng.random((2, 4)) < 0.7).astype(np.float64)
    scale_vec = rng.normal(size=3)
    shift_vec = rng.normal(size=3)
    # fixed leaf constants: the builders run many times during finite
    # differencing, so nothing random may be drawn inside them
    c232 = rng.normal(size=(2, 3, 2))
    d232 = rng.normal(size=(2, 3, 2))
    m32 = rng.normal(size=(3, 2))
    m42 = rng.normal(size=(4, 2))
    c2244 = rng.normal(size=(2, 2, 4, 4))
    k2233 = rng.normal(size=(2, 2, 3, 3))
    c1244 = rng.normal(size=(1, 2, 4, 4))
    c22 = rng.normal(size=(2, 2))
    c234 = rng.normal(size=(2, 3, 4))
    c23 = rng.normal(size=(2, 3))
    c1144 = rng.normal(size=(1, 1, 4, 4))

    def wrap(make):
        def build(g, p):
            return make(g, g.param(p))
        return build

    return {
        "add": ((2, 3), wrap(lambda g, n: g.sum(g.mul(g.add(n, g.leaf(b)),
                                                      g.leaf(b + 0.3))))),
        "sub": ((2, 3), wrap(lambda g, n: g.sum(g.mul(g.sub(n, g.leaf(b)),
                                                      g.leaf(b - 0.2))))),
        "mul": ((2, 3), wrap(lambda g, n: g.sum(g.mul(g.mul(n, g.leaf(b)),
                                                      g.leaf(b + 1.0))))),
        "relu": ((2, 3), wrap(lambda g, n: g.sum(g.mul(g.relu(n),
                                                       g.leaf(b + 0.4))))),
        "scale": ((2, 3), wrap(lambda g, n: g.sum(g.mul(g.scale(n, -1.3),
                                                        g.leaf(b))))),
        "bias_add": ((3,), wrap(lambda g, n: g.sum(g.mul(
            g.bias_add(g.leaf(c232), n),
            g.leaf(d232))))),
        "channel_affine": ((2, 3, 2), wrap(lambda g, n: g.sum(g.mul(
            g.channel_affine(n, scale_vec, shift_vec),
            g.leaf(d232))))),
        "matmul": ((4, 3), wrap(lambda g, n: g.sum(g.mul(
            g.matmul(n, g.leaf(m32)),
            g.leaf(m42))))),
        "conv2d": ((2, 2, 3, 3), wrap(lambda g, n: g.sum(g.mul(
            g.conv2d(g.leaf(wc), n), g.leaf(c2244))))),
        "conv2d_input": ((1, 2, 4, 4), wrap(lambda g, n: g.sum(g.mul(
            g.conv2d(n, g.leaf(k2233)),
            g.leaf(c1244))))),
        "slice_batch": ((3, 2), wrap(lambda g, n: g.sum(g.mul(
            g.slice_batch(n, 1, 3), g.leaf(c22))))),
        "sum": ((2, 3), wrap(lambda g, n: g.scale(g.sum(n), 0.7))),
        "softmax": ((2, 3, 4), wrap(lambda g, n: g.sum(g.mul(
            g.softmax(n), g.leaf(c234))))),
        "softmax_cross_entropy": ((2, 3, 4), wrap(
            lambda g, n: g.softmax_cross_entropy(n, targets, weights))),
        "mean_sq_diff": ((2, 3), wrap(lambda g, n: g.mean_sq_diff(n, g.leaf(c23)))),
        "conv2d_mixed": ((1, 2, 4, 4), wrap(lambda g, n: g.sum(g.mul(
            g.relu(g.conv2d(n, g.leaf(w4))),
            g.leaf(c1144))))),
    }


def _small_net_loss(g, params, images, labels):
    def layer(x, k, bias):
        return g.relu(g.bias_add(g.conv2d(x, g.param(params[k])),
                                 g.param(params[bias])))

    h = layer(g.leaf(images), "k1", "b1")
    h = layer(h, "k2", "b2")
    logits = g.bias_add(g.conv2d(h, g.param(params["kh"])),
                        g.param(params["bh"]))
    return g.softmax_cross_entropy(logits, labels)


def test_criterion_4_gradient_integrity():
    start = time.time()
    worst = {}
    for trial in range(100):
        rng = np.random.default_rng(10_000 + trial)
        for name, (shape, build) in _op_builders(rng).items():
            p = Param("p", rng.normal(size=shape))
            g = Graph()
            grads = g.backward(build(g, p))
            fd = _fd_gradient(lambda: float(build(Graph(), p).value), p.value)
            err = _rel_err(grads["p"], fd)
            worst[name] = max(worst.get(name, 0.0), err)

    # full toy-network loss on a reduced-width copy of the architecture
    for trial in range(100):
        rng = np.random.default_rng(20_000 + trial)
        shapes = {"k1": (2, 1, 3, 3), "b1": (2,), "k2": (3, 2, 3, 3),
                  "b2": (3,), "kh": (3, 3, 1, 1), "bh": (3,)}
        params = {n: Param(n, rng.normal(size=s) * 0.5)
                  for n, s in shapes.items()}
        images = rng.normal(size=(1, 1, 6, 6))
        labels = rng.integers(0, 3, size=(1, 6, 6))
        g = Graph()
        grads = g.backward(_small_net_loss(g, params, images, labels))
        for name, p in params.items():
            fd = _fd_gradient(
                lambda: float(_small_net_loss(Graph(), params, images,
                                              labels).value), p.value)
            err = _rel_err(grads[name], fd)
            worst["net_" + name] = max(worst.get("net_" + name, 0.0), err)

    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    report(4, not bad and elapsed < 120.0,
           f"max FD relative error {max(worst.values()):.2e} over "
           f"{len(worst)} op families x 100 trials "
           f"(all < 1e-4), {elapsed:.1f}s (< 2min)"
           + (f"; failures: {bad}" if bad else ""))


def test_criterion_5_sparse_recovery():
    start = time.time()
    config = mk.MaskConfig((128,), 1, 0.5)
    hits = 0
    for trial in range(100):
        inst = recovery.gen_instance(128, 256, 5, 0.0, 30_000 + trial)
        pair = mk.sample_pair(config, "complementary", 40_000 + trial)
        system = recovery.build_measurement(inst, pair)
        bp = recovery.with_error(recovery.bpdn_solve(system, 0.0), inst.code)
        om = recovery.with_error(recovery.omp_solve(system, 5), inst.code)
        hits += bp.error < 1e-4 and om.error < 1e-4

    cells = recovery.sweep_compare(seed=0)
    medians = recovery.sweep_medians(cells)
    won = total = 0
    for sigma in recovery.DEFAULT_GRID["sigma"]:
        for k in recovery.DEFAULT_GRID["k"]:
            total += 1
            comp = medians[(float(sigma), int(k), "complementary")][0]
            rand = medians[(float(sigma), int(k), "random")][0]
            won += comp <= rand
    elapsed = time.time() - start
    report(5, hits >= 95 and won >= 0.9 * total and elapsed < 600.0,
           f"noiseless recovery {hits}/100 (>= 95); complementary median <= "
           f"random in {won}/{total} cells (>= 90%), {elapsed:.0f}s (< 10min)")


def test_criterion_6_generalization_gap_scaling():
    start = time.time()
    fmap = theory.FeatureMapSpec(out_dim=16, beta=1.0)
    table = theory.gap_experiment(
        fmap, theory.bounded_pair_loss,
        [32, 64, 128, 256, 512, 1024, 2048, 4096], trials=20, seed=0)
    slope = table.slopes["complementary"]
    elapsed = time.time() - start
    report(6, -0.8 <= slope <= -0.2 and elapsed < 300.0,
           f"complementary log-log slope {slope:.3f} in [-0.8, -0.2], "
           f"{elapsed:.0f}s (< 5min)")


def test_criterion_7_toy_ablation_ordering():
    start = time.time()
    mious = {}
    for variant in trainer.VARIANTS:
        mious[variant] = [
            trainer.train_run(trainer.TrainConfig(
                variant=variant, iterations=2000,
                seed=seed)).target_metrics["miou"]
            for seed in range(5)]
    means = {v: float(np.mean(vals)) for v, vals in mious.items()}
    gap = means["complementary"] - means["source_only"]
    ordered = (means["complementary"] >= means["random_mask"]
               >= means["source_only"])
    elapsed = time.time() - start
    report(7, ordered and gap >= 0.05 and elapsed < 1800.0,
           f"mean target mIoU complementary {means['complementary']:.3f} >= "
           f"random {means['random_mask']:.3f} >= source-only "
           f"{means['source_only']:.3f}, gap {100 * gap:.1f} points (>= 5), "
           f"{elapsed / 60:.1f}min (< 30min); per-seed {mious}")


def test_criterion_8_endpoint_identities():
    start = time.time()
    ok = True
    details = []

    # EMA endpoints
    pair = trainer.init_pair(3, 0)
    pair.student["k1"].value = pair.student["k1"].value + 1.0
    before = pair.teacher["k1"].value.copy()
    trainer.ema_update(pair, 1.0)
    ok &= bool(np.array_equal(pair.teacher["k1"].value, before))
    trainer.ema_update(pair, 0.0)
    ok &= bool(np.array_equal(pair.teacher["k1"].value,
                              pair.student["k1"].value))
    details.append("EMA alpha in {0,1} endpoints exact")

    # lambda_cm = 0 total-loss identity
    cfg = trainer.TrainConfig(variant="complementary", lambda_cm=0.0, seed=1)
    t = trainer.Trainer(cfg, 3)
    rng = np.random.default_rng(0)
    src = rng.normal(size=(2, 1, 16, 16))
    lbl = rng.integers(0, 3, size=(2, 16, 16))
    tgt = rng.normal(size=(2, 1, 16, 16))
    losses = t.train_step(src, lbl, tgt, 0)
    ok &= losses["total"] == losses["sup"] + losses["cl"]
    details.append("lambda_cm=0 gives total == sup + cl exactly")

    # source_only gating: permuted target leaves theta bit-identical
    finals = []
    for perm_seed in (0, 1):
        t2 = trainer.Trainer(trainer.TrainConfig(variant="source_only",
                                                 seed=2), 3)
        tgt2 = np.random.default_rng(perm_seed).permutation(tgt)
        for step in range(3):
            t2.train_step(src, lbl, tgt2, step)
        finals.append({n: p.value.copy() for n, p in t2.pair.student.items()})
    ok &= all(np.array_equal(finals[0][n], finals[1][n]) for n in finals[0])
    details.append("source_only ignores target permutation bit-for-bit")

    # mask algebra
    config = mk.MaskConfig((64, 64), 4, 0.5)
    d = mk.sample_patch_mask(config, 7)
    ok &= bool(np.array_equal(mk.complement(mk.complement(d)).bits, d.bits))
    x = np.random.default_rng(3).normal(size=(64, 64))
    recon = mk.apply_mask(x, d) + mk.apply_mask(x, mk.complement(d))
    ok &= bool(np.array_equal(recon, x))
    details.append("complement involution and reconstruction identity exact")

    elapsed = time.time() - start
    report(8, ok and elapsed < 60.0,
           "; ".join(details) + f", {elapsed:.1f}s (< 1min)")


def test_criterion_9_cli_determinism(tmp_path):
    start = time.time()
    identical = True
    checked = []
    for name, args in (
            ("theory-ip", ["theory-ip", "--seed", "5", "trials=5000",
                           "dim=64"]),
            ("recovery-sweep", ["recovery-sweep", "--seed", "5",
                                "sigma=[0.0,0.05]", "k=[3]", "trials=3"]),
            ("train", ["train", "--seed", "5", "iterations=5",
                       "variant=complementary"])):
        outputs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            code = subprocess.run(
                [sys.executable, "-m", "compmask.cli", *args,
                 "--out", str(out)], capture_output=True).returncode
            assert code == 0, f"{name} run failed"
            outputs.append((out / "results.csv").read_bytes())
        identical = identical and outputs[0] == outputs[1]
        checked.append(name)
    elapsed = time.time() - start
    report(9, identical,
           f"byte-identical results.csv across repeats for {checked}, "
           f"{elapsed:.0f}s")
