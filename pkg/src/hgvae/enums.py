import sys
from enum import auto
from typing import Any

if sys.version_info[1] >= 11:
    from enum import StrEnum

    class LCaseStrEnum(StrEnum):
        """
        StrEnum where enum.auto() returns the lower-cased member name with underscores as dashes.
        """

        @staticmethod
        def _generate_next_value_(
            name: str, start: int, count: int, last_values: list[Any]
        ) -> str:
            return name.lower().replace("_", "-")
else:
    from strenum import StrEnum

    class LCaseStrEnum(StrEnum):  # type: ignore[no-redef]
        @staticmethod
        def _generate_next_value_(
            name: str, start: int, count: int, last_values: list[Any]
        ) -> str:
            return name.lower().replace("_", "-")


class Precision(LCaseStrEnum):
    """Floating point width of tensor buffers."""

    FLOAT64 = auto()
    FLOAT32 = auto()


class PosteriorObjective(LCaseStrEnum):
    """The score ascended during MAP imputation and reported as the anomaly score."""

    LOG_JOINT = auto()
    """log p(x, z) evaluated at the posterior means."""
    ELBO = auto()
    """Evidence lower bound with the noise suppressed."""
    POSTERIOR = auto()
    """Sum over layers of log q(z_l) at the posterior means."""


class DecodeMode(LCaseStrEnum):
    """Which distribution the top-down pass samples latents from."""

    POSTERIOR = auto()
    PRIOR = auto()


class ModelKind(LCaseStrEnum):
    HGVAE = auto()
    VAE_BASELINE = auto()


class ImputeMethod(LCaseStrEnum):
    """How the occluded cells of a row in a results table were filled."""

    GROUND_TRUTH = auto()
    MEAN = auto()
    MAP = auto()


class Command(LCaseStrEnum):
    SYNTH = auto()
    TRAIN = auto()
    GENERATE = auto()
    IMPUTE = auto()
    SCORE = auto()
    EVAL = auto()
    INSPECT = auto()
