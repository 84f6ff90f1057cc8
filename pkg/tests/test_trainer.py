import csv
import logging

import numpy as np
import pytest

from pcrdiff import trainer
from pcrdiff.datasyn import DatasetSpec, generate_pairs
from pcrdiff.exceptions import ConfigError, NonFiniteLoss, ShapeMismatch
from pcrdiff.geom3d import QUAT7, RigidTransform, random_transform
from pcrdiff.hooks import TrainStepEvent
from pcrdiff.regnet import CFModelConfig, CorrespondenceFreeNet, load_model
from pcrdiff.trainer import (
    LOSS_LOG_HEADER,
    PlateauScheduler,
    StepLosses,
    TrainConfig,
    batch_losses,
    chamfer_grad,
    check_model_gradients,
    loss_chamfer,
    loss_diff,
    loss_transform,
    loss_transform_grad,
    nearest_indices,
    overfit_pair,
    train_loop,
    train_step,
)


@pytest.fixture
def pairs():
    return generate_pairs(DatasetSpec(pairs=3, points=16, seed=3))


def test_train_config_validation():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(lr=0.0)
    assert exc.value.key_path == "train.lr"
    with pytest.raises(ConfigError):
        TrainConfig(lambda_diff=0.0, lambda_cf1=0.0, lambda_cf2=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert TrainConfig().resolved_batch_size("cb") == 8
    assert TrainConfig().resolved_batch_size("cf") == 32
    assert TrainConfig(batch_size=5).resolved_batch_size("cb") == 5


def test_plateau_scheduler_decays_after_patience(caplog):
    sched = PlateauScheduler(lr=1.0, factor=0.5, patience=2, min_lr=0.2)
    assert sched.step(1.0) == 1.0
    assert sched.step(1.0) == 1.0
    assert sched.step(1.0) == 1.0
    with caplog.at_level(logging.WARNING, logger="pcrdiff.trainer"):
        assert sched.step(1.0) == 0.5
    assert "decayed" in caplog.text
    for _ in range(12):
        sched.step(2.0)
    assert sched.lr == 0.2


def test_loss_diff():
    assert loss_diff([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_diff([1.0, 0.0], [0.0, 2.0]) == pytest.approx(2.5)


def test_nearest_indices_kdtree_matches_brute_force(rng):
    for _ in range(100):
        points = rng.normal(size=(20, 3))
        queries = rng.normal(size=(15, 3))
        np.testing.assert_array_equal(
            nearest_indices(points, queries, "kdtree"), nearest_indices(points, queries, "brute")
        )


def test_chamfer_values(cloud):
    assert loss_chamfer(cloud, cloud) == 0.0
    shifted = cloud + np.array([0.0, 0.0, 1e-3])
    assert loss_chamfer(cloud, shifted) == pytest.approx(2e-6, rel=1e-6)


def test_chamfer_grad_matches_finite_differences(rng):
    moved = rng.normal(size=(12, 3))
    template = rng.normal(size=(9, 3))
    _, grad = chamfer_grad(moved, template)
    h = 1e-7
    for i, j in [(0, 0), (5, 2), (11, 1)]:
        up = moved.copy()
        up[i, j] += h
        down = moved.copy()
        down[i, j] -= h
        numeric = (loss_chamfer(up, template) - loss_chamfer(down, template)) / (2 * h)
        assert grad[i, j] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_loss_transform_zero_at_ground_truth(rng):
    g = random_transform(rng, 60.0, 1.0)
    assert loss_transform(g, g) == pytest.approx(0.0, abs=1e-7)
    shifted = RigidTransform.from_rt(np.eye(3), [3.0, 4.0, 0.0])
    assert loss_transform(RigidTransform.identity(), shifted) == 5.0


def test_loss_transform_grad_through_quaternion_decode(rng):
    g_gt = random_transform(rng, 60.0, 1.0)
    vec = QUAT7.encode(random_transform(rng, 60.0, 1.0)) + 0.1 * rng.normal(size=7)

    def loss(v):
        return loss_transform(QUAT7.decode(v), g_gt)

    _, g_rot, g_trans = loss_transform_grad(QUAT7.decode(vec), g_gt)
    grad = QUAT7.decode_grad(vec, g_rot, g_trans)
    h = 1e-6
    for k in range(7):
        e = np.zeros(7)
        e[k] = h
        numeric = (loss(vec + e) - loss(vec - e)) / (2 * h)
        assert grad[k] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_batch_losses_vanish_for_oracle_predictions(pairs):
    predictions = np.stack([QUAT7.encode(pair.g_gt) for pair in pairs])
    transforms = [pair.g_gt for pair in pairs]
    losses, grads = batch_losses(predictions, transforms, pairs, QUAT7, TrainConfig())
    assert losses.diff == 0.0
    assert losses.cf1 == pytest.approx(0.0, abs=1e-20)
    assert losses.cf2 == pytest.approx(0.0, abs=1e-7)
    np.testing.assert_array_equal(grads.vectors, 0.0)


def test_train_step_updates_parameters(tiny_cf, pairs, rng):
    model = CorrespondenceFreeNet(tiny_cf, 20, rng)
    before = {name: model.store[name].copy() for name in model.store}
    losses = train_step(model, pairs, model.schedule(), TrainConfig(T=20), rng, lr=1e-3)
    assert isinstance(losses, StepLosses)
    assert np.isfinite(losses.total)
    assert losses.total == pytest.approx(losses.diff + losses.cf1 + losses.cf2)
    assert model.store.step == 1
    assert any(not np.array_equal(before[name], model.store[name]) for name in model.store)


def test_train_step_rejects_non_finite_loss(tiny_cf, pairs, rng, monkeypatch, caplog):
    model = CorrespondenceFreeNet(tiny_cf, 20, rng)
    before = {name: model.store[name].copy() for name in model.store}
    real = trainer.batch_losses

    def poisoned(*args, **kwargs):
        losses, grads = real(*args, **kwargs)
        return StepLosses(float("nan"), losses.diff, losses.cf1, losses.cf2), grads

    monkeypatch.setattr(trainer, "batch_losses", poisoned)
    with caplog.at_level(logging.ERROR, logger="pcrdiff.trainer"):
        with pytest.raises(NonFiniteLoss):
            train_step(model, pairs, model.schedule(), TrainConfig(T=20), rng)
    assert "non-finite" in caplog.text
    for name in model.store:
        np.testing.assert_array_equal(before[name], model.store[name])


def test_full_training_loss_gradient_check(tiny_cf, pairs, rng):
    model = CorrespondenceFreeNet(tiny_cf, 20, rng)
    result = check_model_gradients(
        model, pairs[:1], model.schedule(), TrainConfig(T=20), rng, sample_size=300
    )
    assert result.checked > 0
    assert result.max_rel_error < 1e-3


def test_train_loop_writes_artifacts(tiny_cf, pairs, tmp_path):
    model = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
    events: list[TrainStepEvent] = []
    cfg = TrainConfig(epochs=2, batch_size=2, T=20, checkpoint_every=1)
    result = train_loop(
        model, pairs, model.schedule(), cfg, tmp_path, validation=pairs[:1], hooks=[events.append]
    )
    assert result.epochs == 2
    assert result.steps == 4
    assert [e.step for e in events] == [1, 2, 3, 4]
    assert {e.epoch for e in events} == {0, 1}
    for name in ("last.pcrd", "best.pcrd", "last.pcrd.json", "state.npz", "loss.csv"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "checkpoints" / "epoch_0001.pcrd").exists()
    assert (tmp_path / "checkpoints" / "epoch_0002.pcrd").exists()
    with (tmp_path / "loss.csv").open() as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == LOSS_LOG_HEADER
    assert len(rows) == 5
    assert load_model(tmp_path / "last.pcrd").config == tiny_cf


def test_train_loop_zero_epochs_leaves_parameters(tiny_cf, pairs, tmp_path):
    model = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
    before = {name: model.store[name].copy() for name in model.store}
    result = train_loop(model, pairs, model.schedule(), TrainConfig(epochs=0, T=20), tmp_path)
    assert result.steps == 0
    for name in model.store:
        np.testing.assert_array_equal(before[name], model.store[name])
    assert (tmp_path / "last.pcrd").exists()


def test_one_pair_one_epoch_is_one_step(tiny_cf, pairs, tmp_path):
    model = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
    result = train_loop(model, pairs[:1], model.schedule(), TrainConfig(epochs=1, T=20), tmp_path)
    assert result.steps == 1


def test_resumed_run_reproduces_uninterrupted_run(tiny_cf, pairs, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, T=20, seed=7)

    straight = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
    train_loop(straight, pairs, straight.schedule(), cfg, tmp_path / "straight")

    first = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
    half = TrainConfig(epochs=1, batch_size=2, T=20, seed=7)
    train_loop(first, pairs, first.schedule(), half, tmp_path / "resumed")
    second = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(99))
    result = train_loop(second, pairs, second.schedule(), cfg, tmp_path / "resumed", resume=True)

    assert result.steps == straight.store.step
    for name in straight.store:
        np.testing.assert_allclose(second.store[name], straight.store[name], atol=1e-12)


def test_train_loop_rejects_empty_dataset(tiny_cf, tmp_path, rng):
    model = CorrespondenceFreeNet(tiny_cf, 20, rng)
    with pytest.raises(ConfigError):
        train_loop(model, [], model.schedule(), TrainConfig(T=20), tmp_path)


def test_overfits_one_pair_in_200_steps():
    config = CFModelConfig(
        encoder_widths=(16, 32), transform_hidden=16, embed_dim=16, decoder_widths=(32, 16)
    )
    (pair,) = generate_pairs(
        DatasetSpec(pairs=1, points=32, seed=11, rot_max_deg=30.0, trans_max=0.5)
    )
    model = CorrespondenceFreeNet(config, 100, np.random.default_rng(0))
    history = overfit_pair(
        model, pair, model.schedule(), TrainConfig(T=100), np.random.default_rng(5), steps=200
    )
    totals = [losses.total for losses in history]
    assert len(totals) == 200
    assert model.store.step == 200
    assert all(np.isfinite(totals))
    assert totals[-1] < 0.01 * totals[0]
    assert np.mean(totals[-20:]) < np.mean(totals[:20])


def test_train_step_with_pinned_corruption_is_repeatable(tiny_cf, pairs):
    corruption = (np.tile(QUAT7.encode(RigidTransform.identity()), (2, 1)), np.array([5, 9]))
    cfg = TrainConfig(T=20)
    runs = []
    for seed in (1, 2):
        model = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
        rng = np.random.default_rng(seed)
        runs.append(train_step(model, pairs[:2], model.schedule(), cfg, rng, corruption=corruption))
    assert runs[0] == runs[1]
    with pytest.raises(ShapeMismatch):
        train_step(model, pairs, model.schedule(), cfg, rng, corruption=corruption)


def test_same_seed_training_writes_identical_bytes(tiny_cf, pairs, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, T=20, seed=4)
    for name in ("a", "b"):
        model = CorrespondenceFreeNet(tiny_cf, 20, np.random.default_rng(0))
        train_loop(model, pairs, model.schedule(), cfg, tmp_path / name)
    for name in ("last.pcrd", "best.pcrd", "last.pcrd.json", "loss.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gradient_check_catches_scaled_backward(tiny_cf, pairs, rng, monkeypatch):
    model = CorrespondenceFreeNet(tiny_cf, 20, rng)
    real = model.backward

    def scaled(*args, **kwargs):
        real(*args, **kwargs)
        model.store.scale_grads(1.1)

    monkeypatch.setattr(model, "backward", scaled)
    result = check_model_gradients(
        model, pairs[:1], model.schedule(), TrainConfig(T=20), rng, sample_size=300
    )
    assert result.checked > 0
    assert result.max_rel_error > 1e-2
