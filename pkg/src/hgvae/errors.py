class HGVAEError(Exception):
    """Base class for errors raised by hgvae."""


class ShapeError(HGVAEError, ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...]) -> None:
        self.primitive = primitive
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class NonFiniteError(HGVAEError, FloatingPointError):
    """A NaN or infinity appeared where a finite number was required."""

    def __init__(
        self,
        where: str,
        *,
        epoch: int | None = None,
        step: int | None = None,
    ) -> None:
        self.where = where
        self.epoch = epoch
        self.step = step
        location = ""
        if epoch is not None:
            location += f" at epoch {epoch}"
        if step is not None:
            location += f" step {step}"
        super().__init__(f"non-finite value in {where}{location}")


class DatasetFormatError(HGVAEError, ValueError):
    """A motion dataset file does not follow the HGMD container layout."""


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CheckpointError(HGVAEError, ValueError):
    """A checkpoint cannot be read or does not match its model."""


class ConfigFileError(HGVAEError, ValueError):
    """A key=value configuration file is malformed."""


class ConditioningError(HGVAEError, ValueError):
    """A class id was given to an unconditional model, or is out of range."""
