"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. The MNIST criteria (7 and 9) need the four IDX files in
``$HCSC_MNIST_DIR`` (default ``/root/data/mnist``; see
``scripts/fetch_mnist.py``) and take about an hour on one core.
"""
import os
import time

import numpy as np
import pytest

import hcsc.tensor_core as tc
from hcsc import classifier as C
from hcsc import dataio as D
from hcsc import inference as I
from hcsc import learning as L
from hcsc import model as M
from hcsc.cli import DEFAULT_INPUT_SCALE
from hcsc.errors import DataFormatError

from conftest import ACCEPTANCE
from oracles import (central_difference, ista_reference, layer_loss,
                     rel_err, soft_threshold_grid)
from synthetic import RECOVERY_FISTA, RECOVERY_LAYER, probe_error, recovery_problem

MNIST_DIR = os.environ.get("HCSC_MNIST_DIR", "/root/data/mnist")


def record(number, passed, detail):
    ACCEPTANCE.append((number, bool(passed), detail))
    assert passed, f"criterion {number}: {detail}"


# --- 1: adjoint ------------------------------------------------------------

def test_criterion_1_adjoint():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        C_, D_ = rng.integers(1, 5, size=2)
        kh, kw = rng.integers(1, 7, size=2)
        h, w = rng.integers(1, 12, size=2)
        A = rng.standard_normal((C_, D_, kh, kw))
        x = rng.standard_normal((D_, h, w))
        y = rng.standard_normal((C_, h + kh - 1, w + kw - 1))
        lhs = np.sum(tc.conv_full(A, x) * y)
        rhs = np.sum(x * tc.corr_valid(y, A))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-5 and elapsed < 10,
           f"200 draws, worst relative gap {worst:.1e}, {elapsed:.2f}s")


# --- 2: gradients ------------------------------------------------------------

def test_criterion_2_gradients():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        C_, D_, E = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
        kh, kw, h, w = (int(v) for v in rng.integers(2, 4, size=4))
        A = rng.standard_normal((C_, D_, kh, kw))
        B = rng.standard_normal((C_, E, kh, kw))
        x = rng.standard_normal((D_, h, w))
        u = rng.standard_normal((E, h, w))
        x_prev = rng.standard_normal((C_, h + kh - 1, w + kw - 1))
        ga, gb = L.filter_gradients(A, B, x_prev, x, u)
        checks = [
            (I.grad_u(x_prev, A, x, B, u), lambda v: layer_loss(x_prev, A, x, B, v), u),
            (I.grad_x(x_prev, A, x, B, u), lambda v: layer_loss(x_prev, A, v, B, u), x),
            (ga, lambda v: layer_loss(x_prev, v, x, B, u), A),
            (gb, lambda v: layer_loss(x_prev, A, x, v, u), B),
        ]
        for got, f, at in checks:
            worst = max(worst, rel_err(got, central_difference(f, at)))
    elapsed = time.perf_counter() - start
    record(2, worst <= 1e-3 and elapsed < 60,
           f"50 instances x 4 gradients, worst relative error {worst:.1e}, {elapsed:.1f}s")


# --- 3: soft threshold ---------------------------------------------------------

def test_criterion_3_soft_threshold():
    rng = np.random.default_rng(3)
    b = rng.normal(0.0, 2.0, size=1000)
    lam = rng.uniform(0.0, 2.0, size=1000)
    got = np.array([tc.soft_threshold(np.array([bi]), li)[0] for bi, li in zip(b, lam)])
    want = np.array([soft_threshold_grid(bi, li) for bi, li in zip(b, lam)])
    worst = float(np.max(np.abs(got - want)))
    record(3, worst <= 1e-3, f"1000 scalars, worst gap {worst:.1e}")


# --- 4: solver -------------------------------------------------------------------

def test_criterion_4_solver():
    rng = np.random.default_rng(4)
    worst_gap, monotone = 0.0, True
    lam, gamma = 0.2, 0.1
    for _ in range(20):
        n, k = int(rng.integers(16, 40)), int(rng.integers(2, 6))
        x_prev = rng.standard_normal((1, 1, n))
        A = rng.standard_normal((1, 1, 1, k))
        B = rng.standard_normal((1, 1, 1, k))
        step = 1.0 / I.lipschitz_constant(A, B, (1, n - k + 1), gamma=gamma, iters=300)
        _, _, fista = I.fista_layer(x_prev, A, B, lam, gamma, I.FistaSettings(step=step, iters=500))
        ref = ista_reference(x_prev[0, 0], A[0, 0, 0], B[0, 0, 0], lam, gamma, step, 10**4)
        worst_gap = max(worst_gap, abs(fista[-1] - ref) / abs(ref))
        _, _, ista = I.ista_layer(x_prev, A, B, lam, gamma,
                                  I.FistaSettings(step=step, iters=200, record_objective=True))
        monotone &= bool(np.all(np.diff(ista) <= 1e-12 * (1 + np.abs(ista[:-1]))))
    record(4, worst_gap <= 1e-4 and monotone,
           f"20 toys, worst FISTA/ISTA gap {worst_gap:.1e}, ISTA monotone={monotone}")


# --- 5: synthetic recovery -------------------------------------------------------

def test_criterion_5_synthetic_recovery():
    start = time.perf_counter()
    _, images = recovery_problem()
    model = M.init_model([RECOVERY_LAYER], seed=1)
    probe = images[:64]
    before = probe_error(model, probe)
    L.train(model, images, L.TrainSettings(epochs=12, batch_size=32, dict_lr=0.001,
                                           fista=RECOVERY_FISTA))
    after = probe_error(model, probe)
    elapsed = time.perf_counter() - start
    record(5, after < 0.1 * before and elapsed < 600,
           f"probe error {before:.4f} -> {after:.4f} (ratio {after / before:.3f}), {elapsed:.0f}s")


# --- 6: parameter count ------------------------------------------------------------

def test_criterion_6_parameter_count():
    model = M.init_model([M.LayerConfig()] * 3, tied=True)
    n = M.trainable_param_count(model)
    record(6, n == 800, f"tied 3-layer model has {n} trainable parameters")


# --- 8: sparsity vs lambda ---------------------------------------------------------

def test_criterion_8_sparsity_monotone():
    digits = D.load_mnist(MNIST_DIR, "test", limit=100).images if _have_mnist() else None
    if digits is None:
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    fractions = []
    for lam in (0.1, 0.5, 1.0):
        model = M.init_model([M.LayerConfig(lam=lam)], input_scale=DEFAULT_INPUT_SCALE)
        enc = I.encode(model, digits)
        fractions.append(float(np.mean(I.nonzero_fraction(enc.u[0]))))
    ok = fractions[0] > fractions[1] > fractions[2]
    record(8, ok, "nonzero fraction at lam 0.1/0.5/1.0: "
           + " > ".join(f"{f:.4f}" for f in fractions))


# --- 10: I/O ---------------------------------------------------------------------------

def test_criterion_10_io(tmp_path):
    model = M.init_model([M.LayerConfig(detail_channels=4)] * 2, tied=True, seed=5,
                         input_scale=DEFAULT_INPUT_SCALE)
    X = np.random.default_rng(0).standard_normal((20, 6)).astype(np.float32)
    head = C.fit(X, np.arange(20) % 2, epochs=2)
    D.save_checkpoint(tmp_path / "a.hcsc", model, head)
    D.save_checkpoint(tmp_path / "b.hcsc", *D.load_checkpoint(tmp_path / "a.hcsc"))
    identical = (tmp_path / "a.hcsc").read_bytes() == (tmp_path / "b.hcsc").read_bytes()

    pixels = (np.arange(2 * 3 * 4, dtype=np.uint8) * 11).reshape(2, 3, 4)
    fixture = tmp_path / "fixture"
    fixture.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4]) + pixels.tobytes())
    exact = np.array_equal(D.load_idx_images(fixture)[:, 0],
                           pixels.astype(np.float32) / np.float32(255.0))

    rng = np.random.default_rng(10)
    good = (tmp_path / "a.hcsc").read_bytes()
    fuzz = tmp_path / "fuzz"
    crashes = 0
    for trial in range(300):
        if trial % 2:
            blob = bytearray(good)
            for pos in rng.integers(0, len(blob), size=3):
                blob[pos] = rng.integers(0, 256)
            loaders = (D.load_checkpoint,)
        else:
            blob = bytearray(rng.integers(0, 256, size=int(rng.integers(0, 40)), dtype=np.uint8))
            if len(blob) >= 4 and trial % 4 == 0:
                blob[:4] = bytes([0, 0, 8, 3])
            loaders = (D.load_idx_images, D.load_idx_labels)
        fuzz.write_bytes(bytes(blob))
        for load in loaders:
            try:
                load(fuzz)
            except DataFormatError:
                pass
            except Exception:  # anything else counts as a crash
                crashes += 1
    record(10, identical and exact and crashes == 0,
           f"round trip identical={identical}, fixture exact={exact}, "
           f"300 fuzzed files, unexpected exceptions={crashes}")


# --- 7 and 9: MNIST ---------------------------------------------------------------------

N_TRAIN, N_TEST, N_PROBE = 10_000, 2_000, 1_000
TRAIN = dict(epochs=5, batch_size=16, dict_lr=0.05, seed=0)
HEAD = dict(lr=0.01, epochs=30, batch_size=128, seed=0, classes=10)


def _have_mnist():
    try:
        D.load_mnist(MNIST_DIR, "test", limit=1)
    except (OSError, DataFormatError):
        return False
    return True


def _probe_error(model, probe, threads):
    enc = I.encode(model, probe, threads=threads)
    return float(np.mean(I.relative_error(probe, I.reconstruct(model, enc))))


def _run(depth, train, test, probe, threads):
    start = time.perf_counter()
    model = M.init_model([M.LayerConfig()] * depth, tied=depth > 1,
                         input_scale=DEFAULT_INPUT_SCALE)
    probe_err = {}

    def on_epoch(epoch, model, history):
        if epoch in (0, TRAIN["epochs"]):
            probe_err[epoch] = _probe_error(model, probe, threads)

    L.train(model, train.images, L.TrainSettings(threads=threads, **TRAIN), callbacks=[on_epoch])
    f_train = C.encode_features(model, train.images, threads=threads)
    f_test = C.encode_features(model, test.images, threads=threads)
    head = C.fit(f_train, train.labels, **HEAD)
    return {
        "accuracy": C.accuracy(head, f_test, test.labels),
        "probe": probe_err,
        "seconds": time.perf_counter() - start,
    }


@pytest.fixture(scope="module")
def mnist_runs():
    if not _have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    pool = D.load_mnist(MNIST_DIR, "train", limit=N_TRAIN + N_PROBE)
    train = pool.subset(N_TRAIN)
    probe = pool.images[N_TRAIN:]
    test = D.load_mnist(MNIST_DIR, "test", limit=N_TEST)
    threads = I.default_threads()
    return {depth: _run(depth, train, test, probe, threads) for depth in (1, 3)}


@pytest.mark.slow
def test_criterion_7_classification(mnist_runs):
    one, three = mnist_runs[1], mnist_runs[3]
    minutes = (one["seconds"] + three["seconds"]) / 60
    ok = one["accuracy"] >= 0.94 and three["accuracy"] >= one["accuracy"] - 0.005
    record(7, ok and minutes <= 120,
           f"1 layer {100 * one['accuracy']:.2f}% (need >= 94.00), "
           f"3 layers tied {100 * three['accuracy']:.2f}% "
           f"(need >= {100 * one['accuracy'] - 0.5:.2f}), {minutes:.0f} min")


@pytest.mark.slow
def test_criterion_9_training_progress(mnist_runs):
    before, after = mnist_runs[1]["probe"][0], mnist_runs[1]["probe"][TRAIN["epochs"]]
    drop = 1.0 - after / before
    b3, a3 = mnist_runs[3]["probe"][0], mnist_runs[3]["probe"][TRAIN["epochs"]]
    record(9, drop >= 0.30,
           f"1-layer probe error {before:.4f} -> {after:.4f} ({100 * drop:.1f}% drop, need >= 30%); "
           f"3-layer {b3:.4f} -> {a3:.4f} ({100 * (1 - a3 / b3):.1f}%)")
