import logging
import os
import sys
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import Field, TypeAdapter, field_validator, model_validator

from .base import BaseHGVAEObject
from .constants import SEED_ENV_VAR, SEQUENCE_LENGTH
from .enums import PosteriorObjective, Precision
from .errors import ConfigFileError

if sys.version_info[1] >= 11:
    from typing import Self
else:
    from typing_extensions import Self  # pragma: no cover

logger = logging.getLogger(__name__)

LatentShape = tuple[int, int]


def parse_latent_shapes(value: Any) -> Any:
    """Accepts ``"1x256,8x128"`` as well as a list of pairs."""
    if isinstance(value, str):
        shapes = []
        for item in value.split(","):
            nodes, _, features = item.strip().lower().partition("x")
            try:
                shapes.append((int(nodes), int(features)))
            except ValueError:
                raise ValueError(f"Invalid latent shape '{item.strip()}', expected NODESxFEATURES") from None
        return shapes
    return value


def format_latent_shapes(shapes: list[LatentShape]) -> str:
    return ",".join(f"{n}x{f}" for n, f in shapes)


class ModelConfig(BaseHGVAEObject):
    """Architecture of the hierarchical graph-convolutional VAE."""

    kind: Literal["hgvae"] = "hgvae"
    latent_shapes: list[LatentShape] = Field(
        default_factory=lambda: [(1, 256), (8, 128), (24, 128), (54, 128)]
    )
    """``(nodes, features)`` of z0 ... zL, top of the hierarchy first."""
    hidden_width: int = Field(default=256, ge=1)
    """Feature width of the encoder stages and of the decoder's deterministic route."""
    n_nodes: int = Field(default=54, ge=1)
    """Observable node trajectories, three per joint."""
    n_obs_features: int = Field(default=SEQUENCE_LENGTH, ge=1)
    """Timepoints per trajectory, equal to the DCT length."""
    gcbs_per_stage: int = Field(default=2, ge=0)
    condition_classes: int | None = Field(default=None, ge=1)
    """Size of the one-hot appended to z0; ``None`` for an unconditional model."""
    rezero_on_branch: bool = False
    latent_gate_init: float = 1.0
    """Initial value of the scalar gates that add each latent sample onto the decoder route."""
    posterior_objective: PosteriorObjective = PosteriorObjective.LOG_JOINT
    num_samples: int = Field(default=1, ge=1)
    frequency_crop: int | None = Field(default=None, ge=1)
    """Keep only the lowest DCT coefficients; ``None`` keeps all of them."""
    precision: Precision = Precision.FLOAT64
    seed: int = 0

    @field_validator("latent_shapes", mode="before")
    @classmethod
    def _parse_shapes(cls, v: Any) -> Any:
        return parse_latent_shapes(v)

    @field_validator("latent_shapes")
    @classmethod
    def _check_shapes(cls, shapes: list[LatentShape]) -> list[LatentShape]:
        if len(shapes) == 0:
            raise ValueError("At least one latent layer is required")
        if any(n < 1 or f < 1 for n, f in shapes):
            raise ValueError("Latent dimensions must be positive")
        nodes = [n for n, _ in shapes]
        if any(b <= a for a, b in zip(nodes, nodes[1:], strict=False)):
            raise ValueError(f"Latent node counts must strictly increase, got {nodes}")
        return shapes

    @model_validator(mode="after")
    def _check_crop(self) -> Self:
        if self.frequency_crop is not None and self.frequency_crop > self.n_obs_features:
            raise ValueError(
                f"frequency_crop {self.frequency_crop} exceeds sequence length {self.n_obs_features}"
            )
        return self

    @property
    def n_layers(self) -> int:
        return len(self.latent_shapes)

    @property
    def n_coefficients(self) -> int:
        """Features per node seen by the network."""
        return self.frequency_crop or self.n_obs_features

    @property
    def top_width(self) -> int:
        """Width of z0 after the class one-hot is appended."""
        return self.latent_shapes[0][1] + (self.condition_classes or 0)

    @classmethod
    def full(cls, **changes: Any) -> Self:
        return cls().updated(**changes)

    @classmethod
    def desk(cls, **changes: Any) -> Self:
        """The scaled configuration used for CPU runs."""
        return cls(
            latent_shapes=[(1, 32), (4, 16), (12, 16), (54, 16)],
            hidden_width=64,
            gcbs_per_stage=1,
        ).updated(**changes)


class BaselineConfig(BaseHGVAEObject):
    """The fully-connected VAE used for comparison."""

    kind: Literal["vae-baseline"] = "vae-baseline"
    hidden_widths: list[int] = Field(default_factory=lambda: [2000, 1000, 500, 100])
    """Encoder widths; the decoder mirrors them."""
    latent_size: int = Field(default=50, ge=1)
    n_nodes: int = Field(default=54, ge=1)
    n_obs_features: int = Field(default=SEQUENCE_LENGTH, ge=1)
    batch_norm: bool = True
    bn_momentum: float = Field(default=0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(default=1e-5, gt=0.0)
    posterior_objective: PosteriorObjective = PosteriorObjective.LOG_JOINT
    num_samples: int = Field(default=1, ge=1)
    precision: Precision = Precision.FLOAT64
    seed: int = 0

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def _parse_widths(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [int(w) for w in v.split(",")]
        return v

    @field_validator("hidden_widths")
    @classmethod
    def _check_widths(cls, widths: list[int]) -> list[int]:
        if not widths or any(w < 1 for w in widths):
            raise ValueError("Hidden widths must be a non-empty list of positive sizes")
        return widths

    @property
    def input_size(self) -> int:
        return self.n_nodes * self.n_obs_features

    def scaled(self, factor: float) -> Self:
        """Every hidden width multiplied by ``factor`` (at least 1)."""
        return self.updated(hidden_widths=[max(1, round(w * factor)) for w in self.hidden_widths])


AnyModelConfig = Annotated[ModelConfig | BaselineConfig, Field(discriminator="kind")]
model_config_adapter: TypeAdapter[ModelConfig | BaselineConfig] = TypeAdapter(AnyModelConfig)


class TrainConfig(BaseHGVAEObject):
    """Optimisation schedule: Adam, linear KL warm-up, global-norm clipping."""

    learning_rate: float = Field(default=1e-4, gt=0.0)
    batch_size: int = Field(default=800, ge=1)
    epochs: int = Field(default=500, ge=0)
    kl_start: float = Field(default=0.001, gt=0.0, le=1.0)
    kl_end: float = Field(default=1.0, gt=0.0, le=1.0)
    kl_warmup_epochs: int = Field(default=200, ge=0)
    clip_norm: float = Field(default=100.0, gt=0.0)
    seed: int = 0
    checkpoint_every: int = Field(default=50, ge=0)
    """Epochs between checkpoints; 0 disables periodic checkpoints."""
    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    progress: bool = False

    @model_validator(mode="after")
    def _check_warmup(self) -> Self:
        if self.kl_start > self.kl_end:
            raise ValueError("kl_start must not exceed kl_end")
        return self

    @classmethod
    def for_baseline(cls, **changes: Any) -> Self:
        return cls(learning_rate=1e-3, epochs=200).updated(**changes)

    @classmethod
    def desk(cls, **changes: Any) -> Self:
        """Schedule for CPU runs on a few hundred sequences.

        The KL weight reaches 1 after 50 epochs, leaving the final 150 epochs at full weight.
        """
        return cls(learning_rate=3e-4, batch_size=64, epochs=200, kl_warmup_epochs=50).updated(**changes)


class ImputeConfig(BaseHGVAEObject):
    """Gradient ascent on the occluded entries."""

    max_steps: int = Field(default=10, ge=0)
    learning_rate: float = Field(default=1.0, gt=0.0)
    objective: PosteriorObjective | None = None
    """Score to ascend; ``None`` uses the model's configured objective."""
    batch_size: int = Field(default=800, ge=1)
    progress: bool = False

    @classmethod
    def for_baseline(cls, **changes: Any) -> Self:
        return cls(learning_rate=100.0).updated(**changes)


def load_key_value_file(path: str | Path) -> tuple[dict[str, str], dict[str, str]]:
    """Read ``key=value`` lines into (train settings, ``model.``-prefixed settings)."""
    train: dict[str, str] = {}
    model: dict[str, str] = {}
    for number, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigFileError(f"{path}:{number}: expected key=value, got '{raw.strip()}'")
        if key.startswith("model."):
            model[key.removeprefix("model.")] = value
        else:
            train[key] = value
    logger.info("Loaded %d train and %d model settings from %s", len(train), len(model), path)
    return train, model


def resolve_seed(flag: int | None, default: int = 0) -> int:
    """The ``--seed`` flag, else ``HGVAE_SEED``, else ``default``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV_VAR)
    if env is None or env.strip() == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigFileError(f"{SEED_ENV_VAR} must be an integer, got '{env}'") from None
