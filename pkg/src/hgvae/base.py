import sys

from pydantic import BaseModel, ConfigDict

if sys.version_info[1] >= 11:
    from typing import Self
else:
    from typing_extensions import Self  # pragma: no cover


class BaseHGVAEObject(BaseModel):
    """Base for every configuration and serialisable record. Unknown fields are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    def __str__(self) -> str:
        return self.to_json()

    def dumps(self) -> str:
        return self.model_dump_json(exclude_none=True)

    def to_json(self, *, indent: int = 4) -> str:
        return self.model_dump_json(exclude_none=True, indent=indent)

    @classmethod
    def loads(cls, text: str | bytes) -> Self:
        return cls.model_validate_json(text)

    def updated(self, **changes: object) -> Self:
        """A validated copy with ``changes`` applied; ``None`` values are ignored."""
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return type(self).model_validate(data)
