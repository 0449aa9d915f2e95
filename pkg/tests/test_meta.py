import numpy as np
import pytest

from metareg.core import ParamVector
from metareg.data import gen_phantom_pair
from metareg.losses import LossWeights, total_loss
from metareg.meta import (
    EpisodeConfig,
    MetaConfig,
    TtoConfig,
    batch_loss_and_grad,
    classical_register,
    meta_train,
    reptile_update,
    run_episode,
    test_time_optimize as run_tto,
    train_conventional,
)
from metareg.models import RegNetConfig, init_regnet
from metareg.optim import LinearDecay
from metareg.transforms import DisplacementField
from reference import ref_adam_trajectory

TINY = RegNetConfig(enc_channels=(3, 3, 4), mid_channels=4, dec_channels=(3, 2))


def tiny_pair(seed=0, extent=8, mag=0.5):
    return gen_phantom_pair(np.random.SeedSequence([123, seed]), extent=extent, deform_magnitude=mag)


def warmed_net(seed=0):
    """Tiny network with a nonzero head so losses and gradients are nontrivial."""
    net = init_regnet(TINY, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    net.params.segment("head.w")[...] = 0.05 * rng.standard_normal((3, 2, 1, 1, 1))
    return net


# --- reptile algebra -----------------------------------------------------------


def test_reptile_update_elementwise():
    rng = np.random.default_rng(0)
    layout = [("p", 0, (50,))]
    omega = ParamVector(rng.standard_normal(50).astype(np.float32), layout)
    theta = ParamVector(rng.standard_normal(50).astype(np.float32), layout)
    beta = 0.37
    out = reptile_update(omega, theta, beta)
    want = omega.values.astype(np.float64) + beta * (
        theta.values.astype(np.float64) - omega.values.astype(np.float64)
    )
    np.testing.assert_allclose(out.values, want, rtol=1e-6, atol=1e-7)


def test_reptile_update_endpoints():
    rng = np.random.default_rng(1)
    layout = [("p", 0, (20,))]
    omega = ParamVector(rng.standard_normal(20).astype(np.float32), layout)
    theta = ParamVector(rng.standard_normal(20).astype(np.float32), layout)
    np.testing.assert_array_equal(reptile_update(omega, theta, 0.0).values, omega.values)
    np.testing.assert_array_equal(reptile_update(omega, theta, 1.0).values, theta.values)


def test_run_episode_single_step_equals_one_adam_step():
    net = warmed_net(2)
    pair = tiny_pair(1)
    cfg = EpisodeConfig(k=1, inner_batch=1, inner_lr=1e-3, augment=None)
    rng = np.random.default_rng(0)
    theta_end, mean_loss = run_episode(net, pair, cfg, rng)

    # independently: one gradient evaluation, one reference Adam step
    loss, grads = batch_loss_and_grad(
        net, net.params.copy(), [(pair.moving.image.grid, pair.fixed.image.grid)],
        cfg.loss_weights,
    )
    want = ref_adam_trajectory(net.params.values, [grads.values], 1e-3)
    assert abs(mean_loss - loss) <= 1e-6 * max(abs(loss), 1e-8)
    np.testing.assert_allclose(theta_end.values, want, rtol=1e-6, atol=1e-7)
    # meta-parameters untouched by the episode
    assert theta_end.values is not net.params.values


def test_run_episode_does_not_mutate_meta_params():
    net = warmed_net(3)
    before = net.params.values.copy()
    run_episode(net, tiny_pair(2), EpisodeConfig(k=2, inner_batch=1, inner_lr=1e-3, augment=None), np.random.default_rng(0))
    np.testing.assert_array_equal(net.params.values, before)


def test_episode_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(k=-1)
    with pytest.raises(ValueError):
        EpisodeConfig(inner_batch=0)
    with pytest.raises(ValueError):
        MetaConfig(total_inner_iterations=25, episode=EpisodeConfig(k=10))


# --- meta training ----------------------------------------------------------------


def meta_cfg(iters=40):
    return MetaConfig(
        total_inner_iterations=iters,
        beta_schedule=LinearDecay(0.5, 1e-5, iters),
        episode=EpisodeConfig(k=10, inner_batch=1, inner_lr=1e-3, augment=None),
        arch=TINY,
        seed=5,
    )


def test_meta_train_deterministic_and_logs():
    pairs = [tiny_pair(i) for i in range(3)]
    net1, log1 = meta_train(pairs, meta_cfg())
    net2, log2 = meta_train(pairs, meta_cfg())
    np.testing.assert_array_equal(net1.params.values, net2.params.values)
    assert len(log1) == 4
    assert [e["episode"] for e in log1] == [0, 1, 2, 3]
    assert log1[0]["beta"] == 0.5
    assert all(np.isfinite(e["mean_episode_loss"]) for e in log1)
    assert log1 == log2


def test_meta_train_requires_pairs():
    with pytest.raises(ValueError):
        meta_train([], meta_cfg())


def test_meta_train_moves_parameters():
    pairs = [tiny_pair(i) for i in range(2)]
    cfg = meta_cfg()
    net0 = init_regnet(TINY, np.random.default_rng(cfg.seed))
    net, _ = meta_train(pairs, cfg)
    assert np.abs(net.params.values - net0.params.values).max() > 0.0


# --- conventional training -----------------------------------------------------------


def test_train_conventional_runs_and_is_deterministic():
    pairs = [tiny_pair(i) for i in range(2)]
    net1, losses1 = train_conventional(pairs, iterations=5, batch=2, lr=1e-3, arch=TINY, seed=3)
    net2, losses2 = train_conventional(pairs, iterations=5, batch=2, lr=1e-3, arch=TINY, seed=3)
    assert len(losses1) == 5
    assert all(np.isfinite(v) for v in losses1)
    np.testing.assert_array_equal(net1.params.values, net2.params.values)
    assert losses1 == losses2


# --- classical registration ----------------------------------------------------------


def test_classical_register_trace_and_descent():
    pair = tiny_pair(4)
    res = classical_register(pair, iterations=30, lr=0.01)
    assert len(res.trace) == 31
    assert res.trace[-1] < res.trace[0]
    assert res.ddf.grid_shape == pair.moving.image.shape
    # the final trace entry is the loss of the returned field
    final = total_loss(pair.moving.image, pair.fixed.image, res.ddf, LossWeights())
    assert abs(final - res.trace[-1]) <= 1e-6


def test_classical_register_zero_iterations():
    pair = tiny_pair(5)
    res = classical_register(pair, iterations=0)
    assert len(res.trace) == 1
    assert not res.ddf.vectors.any()


def test_classical_register_shape_mismatch():
    a, b = tiny_pair(6), gen_phantom_pair(np.random.SeedSequence(1), extent=12, deform_magnitude=0.5)

    class Mismatch:
        moving = a.moving
        fixed = b.fixed

    with pytest.raises(ValueError):
        classical_register(Mismatch(), iterations=1)


# --- test-time optimization -----------------------------------------------------------


def test_tto_zero_updates_is_plain_inference():
    net = warmed_net(7)
    pair = tiny_pair(7)
    res = run_tto(net, pair, TtoConfig(updates=0), seed=1)
    want = net.predict_ddf(pair.moving.image.grid, pair.fixed.image.grid)
    np.testing.assert_array_equal(res.ddf.vectors, want)
    np.testing.assert_array_equal(res.net.params.values, net.params.values)
    assert res.losses == []
    assert not res.diverged


def test_tto_updates_change_parameters_not_source_net():
    net = warmed_net(8)
    before = net.params.values.copy()
    pair = tiny_pair(8)
    res = run_tto(net, pair, TtoConfig(updates=5, lr=1e-3), seed=2)
    np.testing.assert_array_equal(net.params.values, before)
    assert len(res.losses) == 5
    assert np.abs(res.net.params.values - before).max() > 0.0


def test_tto_deterministic_in_seed():
    net = warmed_net(9)
    pair = tiny_pair(9)
    cfg = TtoConfig(updates=3, lr=1e-3, augment_enabled=True)
    r1 = run_tto(net, pair, cfg, seed=4)
    r2 = run_tto(net, pair, cfg, seed=4)
    np.testing.assert_array_equal(r1.ddf.vectors, r2.ddf.vectors)


def test_tto_config_validation():
    with pytest.raises(ValueError):
        TtoConfig(updates=-1)
