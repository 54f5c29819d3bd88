import numpy as np
import pytest
from pydantic import ValidationError

from hgvae.baseline import BaselineVAE
from hgvae.config import ImputeConfig
from hgvae.constants import ASCENT_SCALE_BUFFER, FEATURE_MEANS_BUFFER
from hgvae.data import compute_feature_means
from hgvae.enums import ImputeMethod, PosteriorObjective
from hgvae.errors import ShapeError
from hgvae.imputer import (
    OcclusionMask,
    anomaly_curve,
    default_impute_config,
    make_mask,
    make_masks,
    map_impute,
    mean_impute,
    occlusion_results,
    prediction_harness,
    score_trajectories,
)
from hgvae.metrics import RESULT_COLUMNS

from .toy import TINY_BASELINE, perturbed, tiny_model, toy_dataset


@pytest.fixture
def trajectories():
    return toy_dataset(count=6).trajectories()


@pytest.fixture
def model(trajectories):
    model = perturbed(tiny_model(), seed=3)
    model.buffers[FEATURE_MEANS_BUFFER] = compute_feature_means(trajectories)
    model.training = False
    return model


@pytest.mark.parametrize("count", [0, 1, 13, 48])
def test_mask_has_exact_count(count):
    mask = make_mask(count, seed=1, shape=(6, 8))
    assert mask.cells.shape == (6, 8)
    assert mask.count == count


def test_mask_is_seeded():
    assert np.array_equal(make_mask(10, seed=4).cells, make_mask(10, seed=4).cells)
    assert not np.array_equal(make_mask(10, seed=4).cells, make_mask(10, seed=5).cells)
    assert make_mask(27).cells.shape == (54, 50)


def test_mask_count_range():
    with pytest.raises(ValueError, match="cannot occlude"):
        make_mask(49, shape=(6, 8))
    with pytest.raises(ValueError, match="cannot occlude"):
        make_mask(-1)


def test_masks_per_datapoint():
    masks = make_masks(5, batch=4, seed=0, shape=(6, 8))
    assert masks.shape == (4, 6, 8)
    assert masks.sum(axis=(1, 2)).tolist() == [5, 5, 5, 5]
    assert not np.array_equal(masks[0], masks[1])
    assert np.array_equal(masks, make_masks(5, batch=4, seed=0, shape=(6, 8)))


def test_mask_rank_is_checked():
    with pytest.raises(ValidationError, match="mask"):
        OcclusionMask(cells=np.zeros(5))


def test_mean_impute_only_touches_masked_cells():
    x = np.arange(12.0).reshape(1, 3, 4)
    means = np.full((3, 4), -1.0)
    mask = np.zeros((3, 4), dtype=bool)
    mask[1, 2] = mask[0, 0] = True
    out = mean_impute(x, OcclusionMask(cells=mask), means)
    assert out[0, 1, 2] == -1.0 and out[0, 0, 0] == -1.0
    assert np.array_equal(out[0][~mask], x[0][~mask])


def test_mean_impute_shape_error():
    with pytest.raises(ShapeError, match="mean_impute"):
        mean_impute(np.zeros((2, 3, 4)), np.zeros((3, 5), dtype=bool), np.zeros((3, 4)))


def test_map_keeps_observed_cells_exactly(model, trajectories):
    masks = make_masks(10, len(trajectories), seed=0, shape=(6, 8))
    degraded = mean_impute(trajectories, masks, model.buffers[FEATURE_MEANS_BUFFER])
    result = map_impute(degraded, masks, model, ImputeConfig(max_steps=5, learning_rate=0.01))
    assert np.array_equal(result.imputed[~masks], degraded[~masks])
    assert not np.array_equal(result.imputed[masks], degraded[masks])


def test_map_never_returns_a_worse_score(model, trajectories):
    masks = make_masks(20, len(trajectories), seed=1, shape=(6, 8))
    degraded = mean_impute(trajectories, masks, model.buffers[FEATURE_MEANS_BUFFER])
    result = map_impute(degraded, masks, model, ImputeConfig(max_steps=8, learning_rate=0.5))
    assert result.trace.shape == (9, len(trajectories))
    assert np.all(result.scores >= result.trace[0])
    assert np.array_equal(result.scores, result.trace.max(axis=0))
    rescored = score_trajectories(model, result.imputed)
    assert np.allclose(rescored, result.scores, rtol=1e-10)


def test_map_with_nothing_masked_returns_input(model, trajectories):
    masks = np.zeros(trajectories.shape, dtype=bool)
    result = map_impute(trajectories, masks, model)
    assert np.array_equal(result.imputed, trajectories)
    assert len(result.trace) == 1
    assert not result.best_step.any()


def test_map_with_zero_steps_returns_start(model, trajectories):
    masks = make_masks(10, len(trajectories), seed=0, shape=(6, 8))
    result = map_impute(trajectories, masks, model, ImputeConfig(max_steps=0))
    assert np.array_equal(result.imputed, trajectories)


def test_map_is_independent_of_batching(model, trajectories):
    masks = make_masks(10, len(trajectories), seed=2, shape=(6, 8))
    whole = map_impute(trajectories, masks, model, ImputeConfig(max_steps=4, learning_rate=0.2))
    chunked = map_impute(trajectories, masks, model, ImputeConfig(max_steps=4, learning_rate=0.2, batch_size=4))
    assert np.allclose(whole.imputed, chunked.imputed, rtol=1e-9, atol=1e-12)
    assert whole.trace.shape == chunked.trace.shape


def test_map_accepts_other_objectives(model, trajectories):
    masks = make_masks(6, len(trajectories), seed=0, shape=(6, 8))
    config = ImputeConfig(max_steps=3, learning_rate=0.1, objective=PosteriorObjective.ELBO)
    result = map_impute(trajectories, masks, model, config)
    assert np.all(result.scores >= result.trace[0])


def test_map_stops_early_on_overflow(model, trajectories):
    masks = make_masks(6, len(trajectories), seed=0, shape=(6, 8))
    with pytest.warns(RuntimeWarning, match="MAP ascent stopped"):
        result = map_impute(trajectories, masks, model, ImputeConfig(max_steps=5, learning_rate=1e200))
    assert result.stopped_early
    assert np.all(np.isfinite(result.imputed))


def test_map_needs_batched_input(model):
    with pytest.raises(ShapeError, match="map_impute"):
        map_impute(np.zeros((6, 8)), np.zeros((6, 8), dtype=bool), model)


def test_occlusion_results_table(model, trajectories):
    results = occlusion_results(trajectories, model, [0, 5], seed=0, cfg=ImputeConfig(max_steps=2))
    assert list(results.columns) == RESULT_COLUMNS
    assert len(results) == len(trajectories) * 5
    truth = results[results["method"] == ImputeMethod.GROUND_TRUTH.value]
    assert truth["count"].eq(0).all() and truth["mse"].eq(0).all()
    unoccluded = results[(results["count"] == 0) & (results["method"] == "mean")]
    assert np.array_equal(unoccluded["score"].to_numpy(), truth["score"].to_numpy())
    assert unoccluded["mse"].eq(0).all()
    occluded = results[(results["count"] == 5) & (results["method"] == "mean")]
    assert occluded["mse"].gt(0).all()


def test_occlusion_results_needs_feature_means(trajectories):
    with pytest.raises(ValueError, match="feature means"):
        occlusion_results(trajectories, tiny_model(), [1])


def test_anomaly_curve(model, trajectories):
    summary = anomaly_curve(trajectories, model, [3], cfg=ImputeConfig(max_steps=2))
    assert set(summary["method"]) == {"ground-truth", "mean", "map"}
    assert summary["datapoints"].eq(len(trajectories)).all()


def test_prediction_harness(model):
    positions = toy_dataset(count=4, frames=12).positions
    report = prediction_harness(positions, model, count=0, horizon=4, cfg=ImputeConfig(max_steps=1))
    assert report["method"].tolist() == ["ground-truth", "mean", "map"]
    assert report["sequences"].eq(4).all()
    assert np.allclose(report["mpjpe"], report["mpjpe"].iloc[0])
    occluded = prediction_harness(positions, model, count=10, horizon=4, cfg=ImputeConfig(max_steps=1))
    assert occluded["mpjpe"].iloc[1] != occluded["mpjpe"].iloc[0]


def test_prediction_needs_observed_frames(model):
    with pytest.raises(ValueError, match="horizon"):
        prediction_harness(np.zeros((1, 2, 3, 4)), model, count=0, horizon=4)


def test_first_ascent_step_is_measured_in_node_scales(model, trajectories):
    scales = np.linspace(0.5, 3.0, 6)[:, None]
    model.buffers[ASCENT_SCALE_BUFFER] = scales
    masks = make_masks(12, len(trajectories), seed=3, shape=(6, 8))
    degraded = mean_impute(trajectories, masks, model.buffers[FEATURE_MEANS_BUFFER])
    result = map_impute(degraded, masks, model, ImputeConfig(max_steps=1, learning_rate=1e-5))
    assert result.best_step.tolist() == [1] * len(trajectories)
    moved = np.abs(result.imputed - degraded)
    expected = np.broadcast_to(1e-5 * scales, degraded.shape)
    assert np.allclose(moved[masks], expected[masks], rtol=1e-4)


def test_zero_ascent_scale_freezes_a_node(model, trajectories):
    scales = np.ones((6, 1))
    scales[2] = 0.0
    model.buffers[ASCENT_SCALE_BUFFER] = scales
    masks = np.zeros(trajectories.shape, dtype=bool)
    masks[:, 1:3, :4] = True
    degraded = mean_impute(trajectories, masks, model.buffers[FEATURE_MEANS_BUFFER])
    result = map_impute(degraded, masks, model, ImputeConfig(max_steps=3, learning_rate=0.01))
    assert np.array_equal(result.imputed[:, 2], degraded[:, 2])


def test_default_ascent_settings_follow_the_model_kind(model):
    assert default_impute_config(model).learning_rate == 1.0
    assert default_impute_config(BaselineVAE(TINY_BASELINE)).learning_rate == 100.0


def test_occlusion_results_default_to_the_baseline_settings(trajectories, monkeypatch):
    baseline = BaselineVAE(TINY_BASELINE)
    baseline.buffers[FEATURE_MEANS_BUFFER] = np.zeros((6, 8))
    seen = []

    def record(x_degraded, mask, model, cfg=None, labels=None):
        seen.append(cfg)
        return map_impute(x_degraded, mask, model, cfg.updated(max_steps=1), labels)

    monkeypatch.setattr("hgvae.imputer.map_impute", record)
    occlusion_results(trajectories, baseline, [3])
    assert [cfg.learning_rate for cfg in seen] == [100.0]
