import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import Field
from tqdm import tqdm

from .base import BaseHGVAEObject
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .constants import ASCENT_SCALE_BUFFER, FEATURE_MEANS_BUFFER
from .data import MotionDataset, compute_ascent_scale, compute_feature_means
from .errors import ConditioningError, NonFiniteError
from .model import MotionModel
from .optim import AdamState, adam_step, clip_global_norm, global_norm
from .tensor import GradientTape, Tensor, backward

logger = logging.getLogger(__name__)


def kl_weight_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from ``kl_start`` at epoch 0 to ``kl_end`` at ``kl_warmup_epochs``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if cfg.kl_warmup_epochs == 0:
        return cfg.kl_end
    progress = min(epoch / cfg.kl_warmup_epochs, 1.0)
    return cfg.kl_start + (cfg.kl_end - cfg.kl_start) * progress


class EpochRecord(BaseHGVAEObject):
    epoch: int = Field(ge=1)
    kl_weight: float
    objective: float
    """Batch-size weighted mean of the minimised objective."""
    recon: float
    kl: list[float]
    grad_norm_mean: float
    grad_norm_max: float
    """Largest global gradient norm before clipping."""
    clipped_norm_max: float
    clipped_steps: int
    steps: int
    val_objective: float | None = None
    wall_time: float = 0.0


class TrainLog(BaseHGVAEObject):
    """One row per completed epoch."""

    records: list[EpochRecord] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)

    def to_frame(self, include_timing: bool = True) -> pd.DataFrame:
        rows = []
        for record in self.records:
            row = record.model_dump(exclude={"kl", "wall_time"})
            row.update({f"kl_{layer}": value for layer, value in enumerate(record.kl)})
            if include_timing:
                row["wall_time"] = record.wall_time
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: str | Path, include_timing: bool = False) -> None:
        """Columns: epoch, kl_weight, objective, recon, grad norms, clipped_steps, steps,
        val_objective, kl_0 ... kl_{L-1} and, with ``include_timing``, wall_time."""
        self.to_frame(include_timing).to_csv(path, index=False)

    def smoothed_objective(self, window: int = 10) -> np.ndarray:
        frame = self.to_frame(include_timing=False)
        return frame["objective"].rolling(window, min_periods=1).mean().to_numpy()


def _labels_for(model: MotionModel, dataset: MotionDataset) -> np.ndarray | None:
    if not model.conditional:
        return None
    if dataset.labels is None:
        raise ConditioningError("a class-conditioned model needs a labelled dataset")
    return dataset.labels


def train(
    dataset: MotionDataset,
    model: MotionModel,
    cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
) -> tuple[dict[str, Tensor], TrainLog]:
    """Fit ``model`` in place with Adam on the ELBO and return its parameters and the log.

    ``validation_fraction`` of the sequences is held out and scored at full KL
    weight after every epoch. The training split's feature means are stored in
    the model's buffers. Every random draw is derived from ``cfg.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    train_set, val_set = dataset.split(cfg.validation_fraction, cfg.seed)
    trajectories = train_set.trajectories()
    model.buffers[FEATURE_MEANS_BUFFER] = compute_feature_means(trajectories)
    model.buffers[ASCENT_SCALE_BUFFER] = compute_ascent_scale(trajectories)
    features = model.features(trajectories)
    labels = _labels_for(model, train_set)
    val_features = model.features(val_set.trajectories()) if len(val_set) else None
    val_labels = _labels_for(model, val_set) if len(val_set) else None

    state = AdamState()
    log = TrainLog()
    count = len(train_set)
    logger.info(
        "Training %d parameters on %d sequences (%d held out) for %d epochs",
        model.parameter_count(),
        count,
        len(val_set),
        cfg.epochs,
    )
    for epoch in tqdm(range(cfg.epochs), desc="train", unit="epoch", disable=not cfg.progress):
        started = time.perf_counter()
        weight = kl_weight_at(epoch, cfg)
        order = np.random.default_rng((cfg.seed, epoch)).permutation(count)
        noise = np.random.default_rng((cfg.seed, epoch, 1))
        model.training = True
        sums = np.zeros(2 + model.layer_count)
        norms: list[float] = []
        clipped_norms: list[float] = []
        for step, start in enumerate(range(0, count, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            try:
                with GradientTape() as tape:
                    terms = model.elbo(
                        features[batch], weight, noise, None if labels is None else labels[batch]
                    )
                grads = backward(terms.objective, tape).named(model.params)
                clipped, norm = clip_global_norm(grads, cfg.clip_norm)
            except NonFiniteError as exc:
                raise NonFiniteError(exc.where, epoch=epoch + 1, step=step) from exc
            model.params = adam_step(model.params, clipped, state, cfg.learning_rate)
            values = [terms.objective.item(), terms.recon.item(), *(k.item() for k in terms.kl)]
            sums += len(batch) * np.asarray(values)
            norms.append(norm)
            clipped_norms.append(global_norm(clipped))
        means = sums / count
        clipped_steps = sum(n > cfg.clip_norm for n in norms)
        if clipped_steps > len(norms) / 2:
            logger.warning(
                "Gradient clipping engaged on %d of %d steps in epoch %d",
                clipped_steps,
                len(norms),
                epoch + 1,
            )
        val_objective = None
        if val_features is not None:
            model.training = False
            val_terms = model.elbo(val_features, 1.0, np.random.default_rng((cfg.seed, epoch, 2)), val_labels)
            val_objective = val_terms.objective.item()
        record = EpochRecord(
            epoch=epoch + 1,
            kl_weight=weight,
            objective=float(means[0]),
            recon=float(means[1]),
            kl=[float(k) for k in means[2:]],
            grad_norm_mean=float(np.mean(norms)),
            grad_norm_max=float(np.max(norms)),
            clipped_norm_max=float(np.max(clipped_norms)),
            clipped_steps=clipped_steps,
            steps=len(norms),
            val_objective=val_objective,
            wall_time=time.perf_counter() - started,
        )
        log.append(record)
        logger.info(
            "epoch %d: objective %.4f recon %.4f kl %s grad norm %.3g (%.2fs)",
            record.epoch,
            record.objective,
            record.recon,
            ", ".join(f"{k:.3g}" for k in record.kl),
            record.grad_norm_max,
            record.wall_time,
        )
        if checkpoint_path is not None and cfg.checkpoint_every and record.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    model.training = False
    return model.params, log
