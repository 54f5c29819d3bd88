"""Evaluation measures, result summaries and plots.

:func:`mpjpe` follows the squared-norm form: the mean over joints and frames of
``||p_hat - p||^2``, so its unit is square meters.
"""

import logging
from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd

from .enums import ImputeMethod
from .errors import ShapeError

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["datapoint", "count", "method", "score", "mse"]
"""Per-datapoint results written by ``impute`` and ``score``."""


def mpjpe(pred: np.ndarray, truth: np.ndarray) -> float | np.ndarray:
    """Mean per-joint squared position error of ``(..., J, 3, frames)`` arrays.

    A single sequence gives a float; leading axes give one value per sequence.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim < 3 or pred.shape[-2] != 3:
        raise ShapeError("mpjpe", pred.shape, truth.shape)
    error = np.sum(np.square(pred - truth), axis=-2).mean(axis=(-2, -1))
    return float(error) if error.ndim == 0 else error


def masked_mse(estimate: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-datapoint mean squared error over the masked cells; 0 where nothing is masked."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ShapeError("masked_mse", estimate.shape, truth.shape)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), estimate.shape)
    axes = tuple(range(1, estimate.ndim))
    cells = mask.sum(axis=axes)
    squared = np.where(mask, np.square(estimate - truth), 0.0).sum(axis=axes)
    return np.divide(squared, cells, out=np.zeros_like(squared), where=cells > 0)


def percent_change(new: float, reference: float) -> float:
    """``100 * (new - reference) / |reference|``; negative means ``new`` is smaller."""
    if reference == 0:
        raise ValueError("percent change relative to zero is undefined")
    return 100.0 * (new - reference) / abs(reference)


def mse_reduction(map_mse: float, mean_mse: float) -> float:
    """Change of the MAP estimate's MSE relative to mean imputation, in percent."""
    if mean_mse <= 0:
        raise ValueError(f"mean-imputation MSE must be positive, got {mean_mse}")
    return percent_change(map_mse, mean_mse)


def zero_velocity_predict(observed: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed pose of ``(..., J, 3, N)`` for ``horizon`` frames."""
    observed = np.asarray(observed)
    if observed.ndim < 1 or observed.shape[-1] < 1:
        raise ValueError("at least one observed frame is required")
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    last = observed[..., -1:]
    return np.repeat(last, horizon, axis=-1)


def nearest_centroid_accuracy(
    reference: np.ndarray,
    reference_labels: np.ndarray,
    samples: np.ndarray,
    sample_labels: np.ndarray,
) -> float:
    """Fraction of ``samples`` whose nearest class centroid of ``reference`` has their label."""
    reference = np.asarray(reference, dtype=np.float64).reshape(len(reference), -1)
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    reference_labels = np.asarray(reference_labels)
    classes = np.unique(reference_labels)
    centroids = np.stack([reference[reference_labels == c].mean(axis=0) for c in classes])
    distances = np.square(samples[:, None, :] - centroids[None, :, :]).sum(axis=-1)
    predicted = classes[np.argmin(distances, axis=1)]
    return float(np.mean(predicted == np.asarray(sample_labels)))


def summarize_results(results: pd.DataFrame) -> pd.DataFrame:
    """Aggregate per-datapoint results by occlusion count and method.

    Adds the percent change of the mean negative score with respect to the
    ground-truth rows (``nlp_change_pct``) and, on MAP rows, the change of the
    masked-cell MSE with respect to mean imputation at the same count
    (``mse_change_pct``).
    """
    missing = set(RESULT_COLUMNS) - set(results.columns)
    if missing:
        raise ValueError(f"results are missing columns {sorted(missing)}")
    summary = (
        results.groupby(["count", "method"], sort=True)
        .agg(
            mean_score=("score", "mean"),
            std_score=("score", "std"),
            mean_mse=("mse", "mean"),
            datapoints=("score", "size"),
        )
        .reset_index()
    )
    summary["std_score"] = summary["std_score"].fillna(0.0)
    truth = summary.loc[summary["method"] == ImputeMethod.GROUND_TRUTH, "mean_score"]
    if len(truth):
        reference = -float(truth.iloc[0])
        summary["nlp_change_pct"] = [percent_change(-s, reference) for s in summary["mean_score"]]
    mean_mse = summary[summary["method"] == ImputeMethod.MEAN].set_index("count")["mean_mse"]
    change = []
    for count, method, mse in zip(summary["count"], summary["method"], summary["mean_mse"], strict=True):
        reference_mse = mean_mse.get(count, 0.0)
        if method == ImputeMethod.MAP and reference_mse > 0:
            change.append(mse_reduction(mse, reference_mse))
        else:
            change.append(np.nan)
    summary["mse_change_pct"] = change
    return summary


def read_results(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(RESULT_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return frame


def write_report(summary: pd.DataFrame, path: str | Path) -> None:
    summary.to_csv(path, index=False)
    logger.info("Wrote report with %d rows to %s", len(summary), path)


def plot_report(summary: pd.DataFrame, path: str | Path) -> None:
    """Two panels as SVG: mean negative score against occluded cells per method, and
    MAP's masked-cell MSE change against occluded cells. Both x axes are symlog."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    for method, rows in summary.groupby("method", sort=True):
        left.errorbar(rows["count"], -rows["mean_score"], yerr=rows["std_score"], marker="o", label=str(method))
    left.set_xscale("symlog", linthresh=1.0)
    left.set_xlabel("occluded cells")
    left.set_ylabel("negative log posterior")
    left.legend()
    changes = summary.dropna(subset=["mse_change_pct"])
    right.plot(changes["count"], changes["mse_change_pct"], marker="o", label="map vs mean")
    right.axhline(0.0, color="grey", linewidth=0.8)
    right.set_xscale("symlog", linthresh=1.0)
    right.set_xlabel("occluded cells")
    right.set_ylabel("% change in masked-cell MSE")
    right.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("Wrote plot to %s", path)
