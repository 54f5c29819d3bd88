import logging

import numpy as np
import pytest

from hgvae.baseline import BaselineVAE
from hgvae.checkpoint import load_checkpoint
from hgvae.config import TrainConfig
from hgvae.constants import ASCENT_SCALE_BUFFER, FEATURE_MEANS_BUFFER
from hgvae.data import MotionDataset, compute_ascent_scale
from hgvae.errors import ConditioningError, NonFiniteError
from hgvae.model import HGVAE
from hgvae.tensor import Tensor
from hgvae.trainer import EpochRecord, TrainLog, kl_weight_at, train

from .toy import TINY, TINY_BASELINE, tiny_model, toy_dataset

FAST = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=3, kl_warmup_epochs=2, checkpoint_every=0)


def record(epoch, **changes):
    values = dict(
        epoch=epoch,
        kl_weight=1.0,
        objective=1.0,
        recon=-1.0,
        kl=[0.5, 0.5],
        grad_norm_mean=1.0,
        grad_norm_max=1.0,
        clipped_norm_max=1.0,
        clipped_steps=0,
        steps=1,
    )
    values.update(changes)
    return EpochRecord(**values)


@pytest.mark.parametrize(
    "epoch, expected",
    [(0, 0.001), (100, 0.5005), (200, 1.0), (350, 1.0)],
)
def test_kl_warmup_schedule(epoch, expected):
    assert kl_weight_at(epoch, TrainConfig()) == pytest.approx(expected)


def test_kl_warmup_can_be_disabled():
    assert kl_weight_at(0, TrainConfig(kl_warmup_epochs=0)) == 1.0


def test_kl_weight_needs_non_negative_epoch():
    with pytest.raises(ValueError, match="non-negative"):
        kl_weight_at(-1, TrainConfig())


def test_train_log_rows():
    log = TrainLog()
    log.append(record(1, wall_time=0.3))
    log.append(record(2, val_objective=2.0))
    frame = log.to_frame(include_timing=False)
    assert list(frame["epoch"]) == [1, 2]
    assert "kl_1" in frame.columns
    assert "wall_time" not in frame.columns
    assert "wall_time" in log.to_frame().columns
    with pytest.raises(ValueError, match="does not follow"):
        log.append(record(4))


def test_train_log_csv(tmp_path):
    log = TrainLog(records=[record(1), record(2, objective=3.0)])
    path = tmp_path / "log.csv"
    log.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "epoch"
    assert "wall_time" not in header
    assert log.smoothed_objective(window=2).tolist() == [1.0, 2.0]


def test_training_runs_and_logs():
    model = tiny_model()
    params, log = train(toy_dataset(), model, FAST)
    assert params is model.params
    assert len(log) == 3
    assert [r.epoch for r in log.records] == [1, 2, 3]
    assert log.records[0].kl_weight == pytest.approx(0.001)
    assert log.records[-1].kl_weight == 1.0
    assert all(len(r.kl) == 3 for r in log.records)
    assert all(r.val_objective is not None for r in log.records)
    assert log.records[0].steps == 3
    assert not model.training


def test_training_stores_feature_means():
    model = tiny_model()
    train(toy_dataset(), model, FAST.updated(epochs=1))
    assert model.buffers[FEATURE_MEANS_BUFFER].shape == (6, 8)


def test_training_stores_ascent_scale_of_the_train_split():
    dataset = toy_dataset()
    model = tiny_model()
    train(dataset, model, FAST.updated(epochs=1))
    train_set, _ = dataset.split(FAST.validation_fraction, FAST.seed)
    scale = model.buffers[ASCENT_SCALE_BUFFER]
    assert np.array_equal(scale, compute_ascent_scale(train_set.trajectories()))
    assert scale.shape == (6, 1)


def test_training_is_reproducible():
    first, _ = train(toy_dataset(), tiny_model(), FAST)
    second, _ = train(toy_dataset(), tiny_model(), FAST)
    for name in first:
        assert np.array_equal(first[name].numpy(), second[name].numpy())


def test_training_improves_the_objective():
    config = FAST.updated(epochs=40, kl_start=1.0, kl_end=1.0, kl_warmup_epochs=0, validation_fraction=0.0)
    _, log = train(toy_dataset(count=32), tiny_model(), config)
    assert log.records[-1].objective < log.records[0].objective
    assert log.records[0].val_objective is None


def test_residual_weights_and_latent_gates_move():
    model = tiny_model()
    train(toy_dataset(), model, FAST.updated(epochs=2))
    assert model.params["enc.0.gcb0.alpha"].item() != 0.0
    assert model.params["dec.2.beta"].item() != TINY.latent_gate_init


def test_zero_epochs_leaves_parameters():
    model = tiny_model()
    before = {k: v.numpy().copy() for k, v in model.params.items()}
    _, log = train(toy_dataset(), model, FAST.updated(epochs=0))
    assert len(log) == 0
    assert all(np.array_equal(before[k], model.params[k].numpy()) for k in before)


def test_conditional_training_needs_labels():
    dataset = toy_dataset()
    unlabelled = MotionDataset(positions=dataset.positions)
    with pytest.raises(ConditioningError, match="labelled"):
        train(unlabelled, tiny_model(condition_classes=2), FAST)
    _, log = train(dataset, tiny_model(condition_classes=2), FAST.updated(epochs=1))
    assert len(log) == 1


def test_baseline_training():
    model = BaselineVAE(TINY_BASELINE)
    _, log = train(toy_dataset(), model, TrainConfig.for_baseline(batch_size=8, epochs=2))
    assert len(log.records[0].kl) == 1
    assert not model.training


def test_periodic_checkpoints(tmp_path):
    path = tmp_path / "model.hgv"
    model = tiny_model()
    train(toy_dataset(), model, FAST.updated(epochs=2, checkpoint_every=2), checkpoint_path=path)
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.params["dec.obs.W"].numpy(), model.params["dec.obs.W"].numpy())


def test_empty_dataset():
    dataset = toy_dataset()
    with pytest.raises(ValueError, match="empty"):
        train(dataset.subset([]), tiny_model(), FAST)


def test_non_finite_loss_names_epoch():
    model = tiny_model()
    bias = model.params["dec.obs.b"].numpy().copy()
    bias[0, 0] = np.inf
    model.params = {**model.params, "dec.obs.b": Tensor(bias, requires_grad=True)}
    with pytest.raises(NonFiniteError, match="at epoch 1 step 0"):
        train(toy_dataset(), model, FAST)


def test_clipping_warning(caplog):
    config = FAST.updated(epochs=1, clip_norm=1e-9)
    with caplog.at_level(logging.WARNING, logger="hgvae.trainer"):
        _, log = train(toy_dataset(), HGVAE(TINY), config)
    assert log.records[0].clipped_steps == log.records[0].steps
    assert log.records[0].clipped_norm_max == pytest.approx(1e-9)
    assert "Gradient clipping engaged" in caplog.text


def test_seeded_runs_write_identical_logs(tmp_path):
    paths = [tmp_path / "first.csv", tmp_path / "second.csv"]
    for path in paths:
        _, log = train(toy_dataset(), tiny_model(), FAST)
        log.to_csv(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
