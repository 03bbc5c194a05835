import copy

import numpy as np
import pandas as pd
import pytest

from lmpforge import trainer
from lmpforge.data import WindowDataset
from lmpforge.models import GAN, LayerSpec, ModelConfig, Network
from lmpforge.tensor import gradients
from lmpforge.trainer import (
    TrainConfig,
    TrainingDiverged,
    converged,
    discriminator_terms,
    generator_terms,
    sample_minibatch,
    smoothed,
    train,
    train_step,
)


def tiny_config():
    return ModelConfig.case1(g_maps=(4, 6, 4), d_conv_maps=3, d_dense=(5, 4))


def toy_dataset(n=12, seed=0):
    rng = np.random.default_rng(seed)
    base = np.tanh(rng.standard_normal((n + 4, 3, 3)) * 0.5)
    g_in = np.stack([np.moveaxis(base[i : i + 4], 0, -1) for i in range(n)])
    return WindowDataset(g_in, g_in.copy(), base[4 : n + 4])


def snapshot(net):
    return {k: v.data.copy() for k, v in net.params.items()}


def test_sample_minibatch():
    rng = np.random.default_rng(0)
    idx = sample_minibatch(10218, 4, rng)
    assert idx.shape == (4,) and idx.min() >= 0 and idx.max() < 10218
    np.testing.assert_array_equal(sample_minibatch(1, 1, rng), [0])
    a = [sample_minibatch(50, 4, np.random.default_rng(3)) for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])
    with pytest.raises(ValueError):
        sample_minibatch(0, 4, rng)


def test_case_window_count():
    # a 3 x 3 x 10224 hourly tensor with n = 4 gives 10220 windows
    assert 10224 - 4 == 10220


def test_train_config_defaults_and_validation():
    c1, c2 = TrainConfig(), TrainConfig(case="case2")
    assert (c1.rho_d, c1.rho_g, c1.batch_size) == (0.0005, 0.0005, 4)
    assert (c2.rho_d, c2.rho_g) == (0.00001, 0.000005)
    assert (c1.lambda_adv, c1.lambda_lp, c1.lambda_gdl) == (0.2, 1.0, 1.0)
    assert TrainConfig.from_dict(c2.to_dict()) == c2
    for bad in ({"batch_size": 0}, {"rho_d": -1.0}, {"case": "case3"}, {"lambda_adv": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 0.9})


def test_zero_discriminator_rate_leaves_d_unchanged():
    gan = GAN.initialize(tiny_config(), 0)
    before = snapshot(gan.discriminator)
    train_step(gan, TrainConfig(rho_d=0.0), toy_dataset(), np.random.default_rng(0))
    for k, v in gan.discriminator.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_parameter_partition_and_phase_order(monkeypatch):
    gan = GAN.initialize(tiny_config(), 1)
    d_ids = {id(p) for p in gan.discriminator.parameters()}
    g_ids = {id(p) for p in gan.generator.parameters()}
    calls = []
    real_step = trainer.nn.sgd_step

    def recording_step(params, grads, lr):
        before_g, before_d = snapshot(gan.generator), snapshot(gan.discriminator)
        real_step(params, grads, lr)
        changed_g = {k for k, v in gan.generator.params.items() if not np.array_equal(v.data, before_g[k])}
        changed_d = {k for k, v in gan.discriminator.params.items() if not np.array_equal(v.data, before_d[k])}
        calls.append(({id(p) for p in params}, changed_g, changed_d))

    monkeypatch.setattr(trainer.nn, "sgd_step", recording_step)
    rng = np.random.default_rng(0)
    for it in range(3):
        train_step(gan, TrainConfig(), toy_dataset(), rng, it)
    assert len(calls) == 6
    for k, (ids, changed_g, changed_d) in enumerate(calls):
        if k % 2 == 0:  # D phase first
            assert ids == d_ids and not changed_g and changed_d
        else:
            assert ids == g_ids and not changed_d and changed_g


def test_fresh_draw_per_phase(monkeypatch):
    draws = []
    real = trainer.sample_minibatch

    def logged(n, m, rng):
        state = copy.deepcopy(rng.bit_generator.state)
        idx = real(n, m, rng)
        draws.append((state, idx))
        return idx

    monkeypatch.setattr(trainer, "sample_minibatch", logged)
    gan = GAN.initialize(tiny_config(), 2)
    rng = np.random.default_rng(0)
    records = [train_step(gan, TrainConfig(), toy_dataset(40), rng, it) for it in range(10)]
    assert len(draws) == 20
    states = [repr(s) for s, _ in draws]
    assert len(set(states)) == 20  # every draw starts from a new generator state
    for rec, (d, g) in zip(records, zip(draws[::2], draws[1::2])):
        np.testing.assert_array_equal(rec.d_indices, d[1])
        np.testing.assert_array_equal(rec.g_indices, g[1])
    assert any(not np.array_equal(r.d_indices, r.g_indices) for r in records)


def test_update_equals_rate_times_sum_of_per_sample_gradients():
    cfg = TrainConfig(rho_d=0.003, rho_g=0.002)
    dataset = toy_dataset(20)
    gan = GAN.initialize(tiny_config(), 3)
    rng = np.random.default_rng(9)
    for it in range(2):  # move away from the initial point first
        train_step(gan, cfg, dataset, rng, it)

    replay_gan, replay_rng = copy.deepcopy(gan), copy.deepcopy(rng)
    d_before, g_before = snapshot(gan.discriminator), snapshot(gan.generator)
    train_step(gan, cfg, dataset, rng, 2)

    # serial recomputation on the copy: one backward pass per sample, then sum
    d_idx = sample_minibatch(len(dataset), cfg.batch_size, replay_rng)
    terms = discriminator_terms(replay_gan, dataset, d_idx, replay_rng)
    d_params = replay_gan.discriminator.parameters()
    d_sum = [np.zeros_like(p.data) for p in d_params]
    for i in range(cfg.batch_size):
        for acc, g in zip(d_sum, gradients(terms.per_sample[i], d_params)):
            acc += g
    for (name, p), acc in zip(replay_gan.discriminator.params.items(), d_sum):
        p.data = p.data - cfg.rho_d * acc
        np.testing.assert_allclose(gan.discriminator.params[name].data, d_before[name] - cfg.rho_d * acc, rtol=0, atol=1e-10)

    g_idx = sample_minibatch(len(dataset), cfg.batch_size, replay_rng)
    parts, _ = generator_terms(replay_gan, dataset, g_idx, cfg.weights, replay_rng)
    g_params = replay_gan.generator.parameters()
    g_sum = [np.zeros_like(p.data) for p in g_params]
    for i in range(cfg.batch_size):
        for acc, g in zip(g_sum, gradients(parts.total[i], g_params)):
            acc += g
    moved = 0.0
    for name, acc in zip(replay_gan.generator.params, g_sum):
        expected = g_before[name] - cfg.rho_g * acc
        np.testing.assert_allclose(gan.generator.params[name].data, expected, rtol=0, atol=1e-10)
        moved = max(moved, float(np.abs(cfg.rho_g * acc).max()))
    assert moved > 1e-6  # the check is not vacuous


def oracle_one_layer_step(k, b, x, y, rho):
    """Plain gradient descent on sum_i |tanh(convT(x_i; k) + b) - y_i|^2 coded with explicit loops.

    convT is 3x3, 'same', stride 1: pre[i, j] = b + sum_{p+a-1=i, q+c-1=j} sum_ch x[p, q, ch] k[a, c, 0, ch].
    """
    dk, db = np.zeros_like(k), np.zeros_like(b)
    for xs, ys in zip(x, y):
        pre = np.full((3, 3), b[0])
        for p in range(3):
            for q in range(3):
                for a in range(3):
                    for c in range(3):
                        i, j = p + a - 1, q + c - 1
                        if 0 <= i < 3 and 0 <= j < 3:
                            pre[i, j] += xs[p, q] @ k[a, c, 0]
        out = np.tanh(pre)
        dpre = 2 * (out - ys) * (1 - out**2)
        db[0] += dpre.sum()
        for p in range(3):
            for q in range(3):
                for a in range(3):
                    for c in range(3):
                        i, j = p + a - 1, q + c - 1
                        if 0 <= i < 3 and 0 <= j < 3:
                            dk[a, c, 0] += dpre[i, j] * xs[p, q]
    return k - rho * dk, b - rho * db


def test_lp_only_generator_step_matches_gradient_descent_oracle():
    cfg = ModelConfig.case1(g_maps=(2, 2), d_conv_maps=2, d_dense=(3,))
    gan = GAN.initialize(cfg, 4)
    specs = [LayerSpec("conv2d_transpose", kernel=(3, 3), stride=(1, 1), padding="same", features=1), LayerSpec("tanh")]
    gan.generator = Network(specs, cfg.g_input_shape, np.random.default_rng(5))
    dataset = toy_dataset(15)
    tc = TrainConfig(rho_d=0.0, rho_g=0.01, lambda_adv=0.0, lambda_gdl=0.0)
    k0, b0 = gan.generator.params["0.kernel"].data.copy(), gan.generator.params["0.bias"].data.copy()
    rec = train_step(gan, tc, dataset, np.random.default_rng(6))
    g_in, _, target = dataset.batch(rec.g_indices)
    k1, b1 = oracle_one_layer_step(k0, b0, g_in, target, tc.rho_g)
    np.testing.assert_allclose(gan.generator.params["0.kernel"].data, k1, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gan.generator.params["0.bias"].data, b1, rtol=0, atol=1e-12)


def test_nan_aborts_with_diagnostic():
    gan = GAN.initialize(tiny_config(), 0)
    ds = toy_dataset()
    ds.targets[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_step(gan, TrainConfig(), ds, np.random.default_rng(0), 7)
    assert info.value.record.iteration == 7


def test_train_zero_iterations_keeps_initialization(tmp_path):
    gan = GAN.initialize(tiny_config(), 0)
    fresh = GAN.initialize(tiny_config(), 0)
    log = train(gan, TrainConfig(max_iterations=0), toy_dataset(), tmp_path)
    assert len(log) == 0
    fresh.save(tmp_path / "fresh.ckpt")
    assert (tmp_path / "checkpoint.ckpt").read_bytes() == (tmp_path / "fresh.ckpt").read_bytes()


def test_train_writes_log_and_periodic_checkpoints(tmp_path):
    gan = GAN.initialize(tiny_config(), 0)
    cfg = TrainConfig(max_iterations=6, checkpoint_every=3, convergence_window=0)
    log = train(gan, cfg, toy_dataset(), tmp_path)
    assert [r.iteration for r in log] == list(range(1, 7))
    frame = pd.read_csv(tmp_path / "trainlog.csv")
    assert list(frame.columns) == trainer.LOG_COLUMNS and len(frame) == 6
    assert (tmp_path / "ckpt_000003.ckpt").exists() and (tmp_path / "ckpt_000006.ckpt").exists()


def test_train_is_deterministic(tmp_path):
    for run in ("a", "b"):
        gan = GAN.initialize(tiny_config(), 5)
        train(gan, TrainConfig(max_iterations=5, seed=2), toy_dataset(), tmp_path / run)
    assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()


def test_divergence_keeps_last_good_checkpoint(tmp_path):
    gan = GAN.initialize(tiny_config(), 0)
    ds = toy_dataset()
    cfg = TrainConfig(max_iterations=4, checkpoint_every=2, convergence_window=0)
    real = trainer.train_step
    count = {"n": 0}

    def flaky(*args, **kwargs):
        count["n"] += 1
        if count["n"] == 3:
            ds.targets[:] = np.nan
        return real(*args, **kwargs)

    trainer.train_step = flaky
    try:
        with pytest.raises(TrainingDiverged):
            train(gan, cfg, ds, tmp_path)
    finally:
        trainer.train_step = real
    assert (tmp_path / "ckpt_000002.ckpt").exists()
    assert not (tmp_path / "checkpoint.ckpt").exists()


def test_convergence_rule():
    flat = np.ones(400)
    assert converged(flat, 200, 0.005)
    assert not converged(flat[:399], 200, 0.005)
    falling = np.concatenate([np.full(200, 2.0), np.full(200, 1.0)])
    assert not converged(falling, 200, 0.005)
    assert not converged(flat, 0, 0.005)


def test_smoothed_moving_average():
    np.testing.assert_allclose(smoothed(np.arange(1.0, 6.0), 2), [1.0, 1.5, 2.5, 3.5, 4.5])
