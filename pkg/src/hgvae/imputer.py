"""Occlusion, mean imputation and MAP imputation by gradient ascent.

All arrays here are centered time-domain trajectories of shape
``(batch, nodes, frames)``. Only the masked cells are free during ascent; the
score is computed on their DCT coefficients, so gradients flow back through
the linear transform.
"""

import logging
import warnings
from collections.abc import Sequence

import numpy as np
import pandas as pd
from pydantic import ConfigDict, field_validator
from tqdm import tqdm

from .base import BaseHGVAEObject
from .config import BaselineConfig, ImputeConfig
from .constants import ASCENT_SCALE_BUFFER, FEATURE_MEANS_BUFFER, PREDICTION_HORIZON
from .data import center_sequences, flatten_joints, unflatten_nodes
from .enums import ImputeMethod, PosteriorObjective
from .errors import NonFiniteError, ShapeError
from .graph import RngLike
from .metrics import RESULT_COLUMNS, masked_mse, mpjpe, summarize_results, zero_velocity_predict
from .model import MotionModel
from .optim import AdamState, adam_step
from .tensor import GradientTape, Tensor, backward

logger = logging.getLogger(__name__)


class OcclusionMask(BaseHGVAEObject):
    """Missing (node, timepoint) cells; ``True`` marks an occluded entry."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    cells: np.ndarray

    @field_validator("cells", mode="before")
    @classmethod
    def _as_bool(cls, v: object) -> np.ndarray:
        cells = np.asarray(v, dtype=bool)
        if cells.ndim not in (2, 3):
            raise ValueError(f"a mask is a (nodes, frames) grid or a batch of them, got shape {cells.shape}")
        return cells

    @property
    def count(self) -> int:
        return int(self.cells.sum())


MaskLike = OcclusionMask | np.ndarray


def _cells(mask: MaskLike) -> np.ndarray:
    return mask.cells if isinstance(mask, OcclusionMask) else np.asarray(mask, dtype=bool)


def make_mask(count: int, seed: RngLike = 0, shape: tuple[int, int] = (54, 50)) -> OcclusionMask:
    """Exactly ``count`` distinct cells drawn uniformly from a ``shape`` grid."""
    total = shape[0] * shape[1]
    if not 0 <= count <= total:
        raise ValueError(f"cannot occlude {count} of {total} cells")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=count, replace=False)] = True
    return OcclusionMask(cells=flat.reshape(shape))


def make_masks(count: int, batch: int, seed: int, shape: tuple[int, int]) -> np.ndarray:
    """One independent mask per datapoint, ``(batch, *shape)``."""
    rng = np.random.default_rng((seed, count))
    return np.stack([make_mask(count, rng, shape).cells for _ in range(batch)])


def mean_impute(x: np.ndarray, mask: MaskLike, means: np.ndarray) -> np.ndarray:
    """Masked cells replaced by the training means; every other cell untouched."""
    x = np.asarray(x)
    cells = _cells(mask)
    try:
        return np.where(cells, np.broadcast_to(means, x.shape), x)
    except ValueError:
        raise ShapeError("mean_impute", x.shape, cells.shape, np.shape(means)) from None


class ImputationResult(BaseHGVAEObject):
    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    imputed: np.ndarray
    scores: np.ndarray
    """Score of the returned iterate per datapoint."""
    trace: np.ndarray
    """``(iterates, batch)`` scores, the initial point first."""
    best_step: np.ndarray
    stopped_early: bool = False


def feature_means(model: MotionModel) -> np.ndarray:
    try:
        return model.buffers[FEATURE_MEANS_BUFFER]
    except KeyError:
        raise ValueError("the model carries no training feature means; train it first") from None


def ascent_scale(model: MotionModel) -> np.ndarray | float:
    """Units of one ascent step per node; 1 for a model trained before scales were stored."""
    return model.buffers.get(ASCENT_SCALE_BUFFER, 1.0)


def default_impute_config(model: MotionModel) -> ImputeConfig:
    if isinstance(model.config, BaselineConfig):
        return ImputeConfig.for_baseline()
    return ImputeConfig()


def score_trajectories(
    model: MotionModel,
    trajectories: np.ndarray,
    objective: PosteriorObjective | str | None = None,
    labels: np.ndarray | None = None,
    batch_size: int = 800,
) -> np.ndarray:
    """Per-datapoint scores of centered trajectories, higher meaning more plausible."""
    scores = []
    for start in range(0, len(trajectories), batch_size):
        chunk = slice(start, start + batch_size)
        features = model.features(trajectories[chunk])
        chunk_labels = None if labels is None else labels[chunk]
        scores.append(model.log_joint_at_posterior_means(features, objective, chunk_labels).numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def _ascend(
    model: MotionModel,
    x0: np.ndarray,
    cells: np.ndarray,
    cfg: ImputeConfig,
    labels: np.ndarray | None,
) -> ImputationResult:
    steps = cfg.max_steps if cells.any() else 0
    scale = ascent_scale(model)
    state = AdamState()
    current = x0
    best = x0.copy()
    best_score = np.full(len(x0), -np.inf)
    best_step = np.zeros(len(x0), dtype=np.int64)
    trace: list[np.ndarray] = []
    stopped_early = False
    for step in range(steps + 1):
        try:
            with GradientTape() as tape:
                x = Tensor(current, requires_grad=True, dtype=model.dtype)
                scores = model.log_joint_at_posterior_means(
                    model.trajectory_features(x), cfg.objective, labels
                )
                loss = -scores.sum()
            values = scores.numpy().astype(np.float64)
            trace.append(values)
            improved = values > best_score
            best = np.where(improved[:, None, None], current, best)
            best_score = np.where(improved, values, best_score)
            best_step = np.where(improved, step, best_step)
            logger.debug("ascent step %d: mean score %.6g", step, float(values.mean()))
            if step == steps:
                break
            grad = np.where(cells, backward(loss, tape)[x], 0.0)
            update = adam_step({"x": x.detach()}, {"x": grad}, state, cfg.learning_rate)["x"]
            # Adam moves each cell by about learning_rate; the scale converts that into data units
            current = np.where(cells, current + scale * (update.numpy() - x.numpy()), x0)
        except NonFiniteError as exc:
            if not trace:
                raise
            stopped_early = True
            message = f"MAP ascent stopped at step {step}: {exc}"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning, stacklevel=3)
            break
    return ImputationResult(
        imputed=np.where(cells, best, x0),
        scores=best_score,
        trace=np.stack(trace),
        best_step=best_step,
        stopped_early=stopped_early,
    )


def map_impute(
    x_degraded: np.ndarray,
    mask: MaskLike,
    model: MotionModel,
    cfg: ImputeConfig | None = None,
    labels: np.ndarray | None = None,
) -> ImputationResult:
    """Adam ascent of the model score over the masked cells of mean-imputed ``x_degraded``.

    Each datapoint keeps the iterate with its own highest score, the starting point
    included. Unmasked cells of the result equal the input exactly.
    """
    cfg = cfg or default_impute_config(model)
    x_degraded = np.asarray(x_degraded, dtype=np.float64)
    if x_degraded.ndim != 3:
        raise ShapeError("map_impute", x_degraded.shape, (-1, -1, -1))
    cells = np.broadcast_to(_cells(mask), x_degraded.shape)
    model.training = False
    chunks = []
    for start in tqdm(
        range(0, len(x_degraded), cfg.batch_size), desc="impute", unit="batch", disable=not cfg.progress
    ):
        chunk = slice(start, start + cfg.batch_size)
        chunks.append(
            _ascend(model, x_degraded[chunk], cells[chunk], cfg, None if labels is None else labels[chunk])
        )
    if not chunks:
        raise ValueError("nothing to impute")
    length = max(len(c.trace) for c in chunks)
    # chunks that stopped early keep their last score in the padded trace
    trace = np.concatenate(
        [np.pad(c.trace, ((0, length - len(c.trace)), (0, 0)), mode="edge") for c in chunks], axis=1
    )
    return ImputationResult(
        imputed=np.concatenate([c.imputed for c in chunks]),
        scores=np.concatenate([c.scores for c in chunks]),
        trace=trace,
        best_step=np.concatenate([c.best_step for c in chunks]),
        stopped_early=any(c.stopped_early for c in chunks),
    )


def occlusion_results(
    trajectories: np.ndarray,
    model: MotionModel,
    counts: Sequence[int],
    seed: int = 0,
    cfg: ImputeConfig | None = None,
    labels: np.ndarray | None = None,
    methods: Sequence[ImputeMethod] = (ImputeMethod.MEAN, ImputeMethod.MAP),
) -> pd.DataFrame:
    """Score every datapoint for every occlusion count and imputation method.

    One row per (datapoint, count, method) with the score and the masked-cell MSE
    against the ground truth; ground-truth rows carry count 0.
    """
    cfg = cfg or default_impute_config(model)
    trajectories = np.asarray(trajectories, dtype=np.float64)
    means = feature_means(model)
    model.training = False
    objective = cfg.objective
    index = np.arange(len(trajectories))
    truth = score_trajectories(model, trajectories, objective, labels, cfg.batch_size)
    frames = [_rows(index, 0, ImputeMethod.GROUND_TRUTH, truth, np.zeros(len(index)))]
    for count in counts:
        masks = make_masks(count, len(trajectories), seed, trajectories.shape[1:])
        degraded = mean_impute(trajectories, masks, means)
        if ImputeMethod.MEAN in methods:
            scores = score_trajectories(model, degraded, objective, labels, cfg.batch_size)
            frames.append(_rows(index, count, ImputeMethod.MEAN, scores, masked_mse(degraded, trajectories, masks)))
        if ImputeMethod.MAP in methods:
            result = map_impute(degraded, masks, model, cfg, labels)
            mse = masked_mse(result.imputed, trajectories, masks)
            frames.append(_rows(index, count, ImputeMethod.MAP, result.scores, mse))
        logger.info("Scored %d datapoints with %d occluded cells", len(index), count)
    return pd.concat(frames, ignore_index=True)[RESULT_COLUMNS]


def _rows(index: np.ndarray, count: int, method: ImputeMethod, scores: np.ndarray, mse: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {"datapoint": index, "count": count, "method": method.value, "score": scores, "mse": mse}
    )


def anomaly_curve(
    trajectories: np.ndarray,
    model: MotionModel,
    counts: Sequence[int],
    seed: int = 0,
    cfg: ImputeConfig | None = None,
    labels: np.ndarray | None = None,
) -> pd.DataFrame:
    """Mean and spread of the score per occlusion count for ground truth, mean and MAP imputation."""
    return summarize_results(occlusion_results(trajectories, model, counts, seed, cfg, labels))


def prediction_harness(
    positions: np.ndarray,
    model: MotionModel,
    count: int,
    seed: int = 0,
    cfg: ImputeConfig | None = None,
    horizon: int = PREDICTION_HORIZON,
    labels: np.ndarray | None = None,
) -> pd.DataFrame:
    """MPJPE of zero-velocity prediction from ground-truth, mean-imputed and MAP-imputed windows.

    ``positions`` are ``(sequences, J, 3, N + horizon)``. The first ``N`` frames are
    occluded with ``count`` cells each and imputed; the predictor then extends them by
    ``horizon`` frames and the error is taken over all ``N + horizon`` frames.
    """
    cfg = cfg or default_impute_config(model)
    positions = np.asarray(positions, dtype=np.float64)
    observed_frames = positions.shape[-1] - horizon
    if observed_frames < 1:
        raise ValueError(f"sequences of {positions.shape[-1]} frames leave nothing before a {horizon}-frame horizon")
    observed = positions[..., :observed_frames]
    centered = center_sequences(observed)
    offset = observed - centered
    trajectories = flatten_joints(centered)
    masks = make_masks(count, len(trajectories), seed, trajectories.shape[1:])
    degraded = mean_impute(trajectories, masks, feature_means(model))
    windows = {
        ImputeMethod.GROUND_TRUTH: trajectories,
        ImputeMethod.MEAN: degraded,
        ImputeMethod.MAP: map_impute(degraded, masks, model, cfg, labels).imputed,
    }
    rows = []
    for method, window in windows.items():
        restored = unflatten_nodes(window) + offset
        predicted = np.concatenate([restored, zero_velocity_predict(restored, horizon)], axis=-1)
        errors = np.asarray(mpjpe(predicted, positions)).reshape(-1)
        rows.append({"method": method.value, "count": count, "mpjpe": float(errors.mean()), "sequences": len(errors)})
    return pd.DataFrame(rows)
