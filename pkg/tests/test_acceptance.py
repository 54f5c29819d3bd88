"""Desk-scale training runs on synthetic motion. Deselected by default; run with ``pytest -m slow``."""

import numpy as np
import pytest

from hgvae.config import ImputeConfig, ModelConfig, TrainConfig
from hgvae.constants import FEATURE_MEANS_BUFFER
from hgvae.data import synthesize_motions
from hgvae.enums import ImputeMethod
from hgvae.imputer import make_masks, map_impute, mean_impute, occlusion_results, prediction_harness
from hgvae.metrics import masked_mse, nearest_centroid_accuracy
from hgvae.model import HGVAE
from hgvae.trainer import train

pytestmark = pytest.mark.slow

DESK_TRAINING = TrainConfig.desk(checkpoint_every=0, seed=0)


@pytest.fixture(scope="session")
def trained():
    model = HGVAE(ModelConfig.desk())
    _, log = train(synthesize_motions(count=512, seed=0), model, DESK_TRAINING)
    return model, log


@pytest.fixture(scope="session")
def conditional():
    dataset = synthesize_motions(count=512, classes=3, seed=5)
    model = HGVAE(ModelConfig.desk(condition_classes=3))
    train(dataset, model, DESK_TRAINING)
    return model, dataset


@pytest.fixture(scope="session")
def held_out():
    # seed 0 keeps the motion program of the training set; the extra sequences are unseen draws
    return synthesize_motions(count=640, seed=0).subset(np.arange(512, 640)).trajectories()


def test_training_sanity(trained):
    _, log = trained
    objectives = np.array([r.objective for r in log.records])
    assert objectives[-10:].mean() < objectives[0]
    assert all(k > 0 for k in log.records[-1].kl)
    assert all(np.isfinite(r.grad_norm_max) for r in log.records)
    assert all(r.clipped_norm_max <= 100.0 for r in log.records)


def test_smoothed_objective_settles(trained):
    _, log = trained
    tail = log.smoothed_objective(window=10)[-100:]
    tolerance = 0.02 * (tail.max() - tail.min())
    assert np.all(np.diff(tail) <= tolerance)


def test_elbo_is_below_importance_weighted_estimate(trained, held_out):
    model, _ = trained
    x = model.features(held_out[:32])
    elbo = model.elbo(x, 1.0, rng=1).evidence_bound.numpy()
    iwae = model.importance_weighted_log_likelihood(x, samples=100, rng=2)
    assert elbo.mean() <= iwae.mean()


@pytest.mark.parametrize("fraction", [0.01, 0.05, 0.10])
def test_map_beats_mean_imputation(trained, held_out, fraction):
    model, _ = trained
    count = round(fraction * held_out.shape[1] * held_out.shape[2])
    masks = make_masks(count, len(held_out), seed=3, shape=held_out.shape[1:])
    degraded = mean_impute(held_out, masks, model.buffers[FEATURE_MEANS_BUFFER])
    result = map_impute(degraded, masks, model, ImputeConfig(max_steps=10))
    mean_error = masked_mse(degraded, held_out, masks).mean()
    map_error = masked_mse(result.imputed, held_out, masks).mean()
    assert map_error <= 0.7 * mean_error
    assert np.array_equal(result.imputed[~masks], held_out[~masks])


def test_anomaly_scores_are_ordered(trained, held_out):
    model, _ = trained
    counts = [0, 13, 27, 135, 270, 1350]
    results = occlusion_results(held_out, model, counts, seed=4, cfg=ImputeConfig(max_steps=10))
    means = results.groupby(["method", "count"])["score"].mean()
    truth = means[(ImputeMethod.GROUND_TRUTH.value, 0)]
    degraded = [means[(ImputeMethod.MEAN.value, c)] for c in counts]
    assert degraded[0] == truth
    assert all(a > b for a, b in zip(degraded, degraded[1:], strict=False))
    for count, mean_score in zip(counts[1:], degraded[1:], strict=True):
        assert mean_score < means[(ImputeMethod.MAP.value, count)] < truth


def test_conditional_samples_are_separable(conditional):
    model, dataset = conditional
    samples = np.concatenate([model.generate(50, temperature=0.0, class_id=c, rng=c) for c in range(3)])
    labels = np.repeat(np.arange(3), 50)
    accuracy = nearest_centroid_accuracy(dataset.trajectories(), dataset.labels, samples, labels)
    assert accuracy >= 0.8


def test_map_inputs_predict_better(trained):
    model, _ = trained
    # draws past the first 512 share the motion programs but not the training sequences
    positions = synthesize_motions(count=612, seed=0, frames=75).subset(np.arange(512, 612)).positions
    report = prediction_harness(positions, model, count=135, seed=8, cfg=ImputeConfig(max_steps=10))
    errors = report.set_index("method")["mpjpe"]
    assert errors[ImputeMethod.MAP.value] <= errors[ImputeMethod.MEAN.value]
