"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at
the end of the pytest run (see conftest.py)."""
import math
import os
import time

import numpy as np
import pytest

from lipnext.certify import certify_batch, evaluate_cra
from lipnext.layers import ActivationSpec, beta_abs, minmax, minmax_rotation
from lipnext.linalg import OrthogonalParam, matrix_exp, orthogonality_drift, random_orthogonal, svd
from lipnext.manifold import ManifoldAdamState, OptimizerMode, epoch_retraction, fast_exp, stabilized_step
from lipnext.model import LipNeXt, ModelSpec
from lipnext.oracles import Kernel2D, circular_conv_matrix, finite_diff_grad, rel_err, theorem1_enumerate
from lipnext.trainer.cli import main as cli_main
from lipnext.trainer.config import TrainConfig
from lipnext.trainer.data import Dataset, load_mnist_split, mnist_dir
from lipnext.trainer.loss import margin_loss
from lipnext.trainer.train import accuracy, fit

TABLE_EPS = [0.0, 36 / 255, 72 / 255, 108 / 255, 1.0]


def note(record_property, text):
    record_property("detail", text)
    print(text)


def rand_skew(d, norm, rng):
    g = rng.standard_normal((d, d))
    a = g - g.T
    return a * (norm / np.linalg.norm(a))


def randomise_offsets(model, rng, scale=0.3):
    for b in model.blocks:
        b.b = scale * rng.standard_normal(b.b.shape)
        b.p = scale * rng.standard_normal(b.p.shape)
    model.head_c = rng.standard_normal(model.head_c.shape)
    return model


@pytest.mark.criterion(1)
def test_criterion_01_one_hot_kernels_are_the_isometries(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for k in (1, 2, 3):
        rep = theorem1_enumerate(k, 4, 4, trials=100, seed=k)
        assert rep.one_hot_checked == 2 * k * k and rep.random_checked == 100
        assert not rep.counterexamples, rep.counterexamples[0][:2]
        assert not rep.disagreements
        for idx in range(k * k):
            for sign in (1.0, -1.0):
                K = np.zeros((k, k))
                K.flat[idx] = sign
                s = svd(circular_conv_matrix(Kernel2D(K), 4, 4))[1]
                worst = max(worst, float(np.max(np.abs(s - 1))))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-9
    assert elapsed < 30
    note(record_property, f"max |sv - 1| over one-hot kernels {worst:.1e}, {elapsed:.1f}s")


@pytest.mark.criterion(2)
def test_criterion_02_minmax_is_rotated_beta_abs(record_property):
    rng = np.random.default_rng(0)
    worst = 0.0
    # d counts channel pairs; the vectors have 2d entries
    for d in (1, 4, 16):
        R = minmax_rotation(d)
        x = rng.standard_normal((10_000, 2 * d))
        rhs = beta_abs(x @ R.T, ActivationSpec(0.5)) @ R
        worst = max(worst, float(np.max(np.abs(minmax(x) - rhs))))
    assert worst <= 1e-12
    note(record_property, f"max abs error {worst:.1e}")


@pytest.mark.criterion(3)
def test_criterion_03_fast_exp_accuracy(record_property):
    rng = np.random.default_rng(0)
    worst_ratio = 0.0
    for lo, hi, order in ((0.0, 0.05, 2), (0.05, 0.25, 3), (0.25, 1.0, 4)):
        for _ in range(1000):
            norm = rng.uniform(lo, hi)
            a = rand_skew(32, norm, rng)
            bound = norm ** (order + 1) / math.factorial(order + 1)
            err = np.linalg.norm(fast_exp(a) - matrix_exp(a))
            assert err <= bound
            worst_ratio = max(worst_ratio, err / bound)
    worst_exact = 0.0
    for _ in range(1000):
        a = rand_skew(32, rng.uniform(1.0, 4.0), rng)
        worst_exact = max(worst_exact, float(np.max(np.abs(fast_exp(a) - matrix_exp(a)))))
    assert worst_exact <= 1e-10
    note(record_property, f"worst err/bound {worst_ratio:.3f}; exact branch {worst_exact:.1e}")


@pytest.mark.criterion(4)
def test_criterion_04_drift_under_stabilized_steps(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = random_orthogonal(64, 0)
    state = ManifoldAdamState.create(x, lr=1e-3)
    worst = 0.0
    for _ in range(1000):
        x = stabilized_step(state, x, rng.standard_normal((64, 64)))
        worst = max(worst, orthogonality_drift(x.value))
    after = orthogonality_drift(epoch_retraction(state, x).value)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-3
    assert after < 1e-10
    assert elapsed < 60
    note(record_property, f"max pre-retraction drift {worst:.1e}, after {after:.1e}, {elapsed:.1f}s")


@pytest.mark.criterion(5)
def test_criterion_05_default_model_is_1_lipschitz(record_property):
    spec = ModelSpec()
    assert (spec.depth, spec.width, spec.padding) == (4, 64, "circular")
    rng = np.random.default_rng(0)
    model = randomise_offsets(LipNeXt.init(spec, 0), rng)
    worst = -np.inf
    n_pairs, batch = 10_000, 500
    for start in range(0, n_pairs, batch):
        x = rng.random((batch,) + spec.input_shape)
        if start % 1000 == 0:
            # half the batches use close pairs, where curvature is tested locally
            y = x + 1e-3 * rng.standard_normal(x.shape)
        else:
            y = rng.random(x.shape)
        out = np.linalg.norm(model.backbone(x) - model.backbone(y), axis=1)
        inp = np.linalg.norm((x - y).reshape(batch, -1), axis=1)
        assert np.all(out <= inp + 1e-7)
        worst = max(worst, float(np.max(out / inp)))
    note(record_property, f"max distance ratio {worst:.6f} over {n_pairs} pairs")


@pytest.mark.criterion(6)
def test_criterion_06_gradients_match_finite_differences(record_property):
    spec = ModelSpec(depth=2, width=8, alpha=1 / 8, beta=0.5, patch=1, n_classes=4, input_shape=(2, 2, 2))
    rng = np.random.default_rng(0)
    model = randomise_offsets(LipNeXt.init(spec, 0), rng)
    x = rng.standard_normal((3,) + spec.input_shape)
    y = np.array([0, 3, 1])
    eps = 0.25
    logits, cache = model.forward_train(x, np.float64)
    _, g_logits, g_V = margin_loss(logits, y, eps, model.head_V, v_grad=True)
    grads = model.backward(cache, g_logits, grad_V_extra=g_V)
    worst = 0.0
    for name in model.parameter_names():
        val = model.get(name)
        arr = val.value if isinstance(val, OrthogonalParam) else val
        orig = arr.copy()

        def loss(p, arr=arr):
            arr[...] = p
            return margin_loss(model.logits(x, np.float64), y, eps, model.head_V)[0]

        fd = finite_diff_grad(loss, orig)
        arr[...] = orig
        err = rel_err(fd, grads[name])
        assert err <= 1e-4, name
        worst = max(worst, err)
    note(record_property, f"worst relative error {worst:.1e} over {len(model.parameter_names())} tensors")


def intensity_classes(n, seed):
    """Four classes told apart by mean brightness, which survives L2 pooling."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 4
    x = np.clip((y[:, None, None] + 0.5) / 4 + 0.1 * rng.standard_normal((n, 8, 8)), 0, 1)
    return Dataset(x[..., None], y.astype(np.int64))


@pytest.fixture(scope="module")
def small_trained():
    cfg = TrainConfig(depth=2, width=16, patch=1, epochs=10, batch_size=32, eps_train=0.5, precision="float64")
    return fit(cfg, intensity_classes(300, 0)).model, intensity_classes(200, 5)


@pytest.mark.criterion(7)
def test_criterion_07_certificates_are_sound(record_property, small_trained):
    model, test = small_trained
    rng = np.random.default_rng(0)
    recs = certify_batch(model.logits(test.images), model.head_V, test.labels, TABLE_EPS)
    idx = [i for i, r in enumerate(recs) if r.correct and r.radius > 0][:50]
    assert len(idx) == 50
    flips = 0
    for i in idx:
        x0, r = test.images[i], recs[i].radius
        d = rng.standard_normal((1000,) + x0.shape)
        d *= 0.999 * r / np.linalg.norm(d.reshape(1000, -1), axis=1)[:, None, None, None]
        pred = np.argmax(model.logits(x0[None] + d, np.float64), axis=1)
        flips += int(np.sum(pred != recs[i].predicted))
    assert flips == 0
    rep = evaluate_cra(model, test.images, test.labels, TABLE_EPS)
    assert all(a >= b for a, b in zip(rep.cra, rep.cra[1:]))
    note(record_property, f"0 flips in 50x1000 perturbations; CRA {[round(c, 3) for c in rep.cra]}")


@pytest.mark.criterion(8)
def test_criterion_08_mnist_desk_scale_training(record_property):
    root = mnist_dir()
    if not (root / "train-images-idx3-ubyte").exists() and not (root / "train-images-idx3-ubyte.gz").exists():
        pytest.fail(f"MNIST not found under {root}; set LIPNEXT_MNIST_DIR")
    train, test = load_mnist_split(root, "train"), load_mnist_split(root, "test")
    cfg = TrainConfig(depth=4, width=64, patch=1, epochs=10, batch_size=128)
    t0 = time.perf_counter()
    res = fit(cfg, train)
    minutes = (time.perf_counter() - t0) / 60
    acc = accuracy(res.model, test)
    rep = evaluate_cra(res.model, test.images, test.labels, [36 / 255])
    drift = max(m.drift_max for m in res.history)
    note(
        record_property,
        f"clean {acc:.4f}, CRA(36/255) {rep.cra[0]:.4f}, max post-epoch drift {drift:.1e}, "
        f"train {minutes:.1f} min on {os.cpu_count()} core(s)",
    )
    assert acc >= 0.90
    assert rep.cra[0] > 0
    assert drift <= 1e-10


@pytest.mark.criterion(9)
def test_criterion_09_single_thread_runs_are_byte_identical(record_property, tmp_path, mnist_dir_factory):
    data = mnist_dir_factory(n_train=96, n_test=10)
    outs = []
    for run in range(2):
        out = tmp_path / f"run{run}.ckpt"
        args = ["train", "--threads", "1", "--seed", "3", "--out", str(out), "--set", f"train_path={data}"]
        for kv in ("depth=2", "width=16", "patch=1", "epochs=3", "batch_size=16"):
            args += ["--set", kv]
        assert cli_main(args) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    note(record_property, f"{len(outs[0])} bytes, identical")


def procrustes_drift(retraction: bool, epochs=5, steps=200, d=32):
    q = random_orthogonal(d, 1).value
    x = random_orthogonal(d, 2)
    state = ManifoldAdamState.create(x, lr=1e-2, n=steps, mode=OptimizerMode(retraction=retraction))
    for _ in range(epochs):
        for _ in range(steps):
            x = stabilized_step(state, x, 2 * (x.value - q))
        if retraction:
            x = epoch_retraction(state, x)
    return orthogonality_drift(x.value)


@pytest.mark.criterion(10)
def test_criterion_10_retraction_ablation_direction(record_property):
    full = procrustes_drift(True)
    ablated = procrustes_drift(False)
    ratio = ablated / max(full, np.finfo(float).tiny)
    assert ratio >= 10
    note(record_property, f"drift full {full:.1e}, without retraction {ablated:.1e}, ratio {ratio:.1e}")
