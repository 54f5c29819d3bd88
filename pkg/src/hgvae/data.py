"""Motion datasets: skeletons, the HGMD container, and synthetic motion.

Positions are stored as ``(sequences, joints, 3, frames)`` in meters. The model
sees each sequence as ``K = 3J`` node trajectories in joint-major order with
x, y, z consecutive within a joint: node ``3j + d`` is coordinate ``d`` of joint ``j``.
"""

import logging
import struct
import sys
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from .base import BaseHGVAEObject
from .constants import DATASET_MAGIC, DATASET_VERSION, SEQUENCE_LENGTH
from .errors import (
    BadMagicError,
    DatasetFormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .graph import RngLike, as_rng

if sys.version_info[1] >= 11:
    from typing import Self
else:
    from typing_extensions import Self  # pragma: no cover

logger = logging.getLogger(__name__)

FeatureMeans = np.ndarray
"""Per (node, timepoint) training-set means, shape ``(nodes, frames)``."""

_HEADER = struct.Struct("<4sHIIIBH")

_DEFAULT_JOINTS: list[tuple[str, str | None, tuple[float, float, float]]] = [
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("left_hip", "pelvis", (0.1, -0.05, 0.0)),
    ("left_knee", "left_hip", (0.0, -0.42, 0.0)),
    ("left_ankle", "left_knee", (0.0, -0.40, 0.0)),
    ("left_foot", "left_ankle", (0.0, -0.05, 0.12)),
    ("right_hip", "pelvis", (-0.1, -0.05, 0.0)),
    ("right_knee", "right_hip", (0.0, -0.42, 0.0)),
    ("right_ankle", "right_knee", (0.0, -0.40, 0.0)),
    ("right_foot", "right_ankle", (0.0, -0.05, 0.12)),
    ("spine", "pelvis", (0.0, 0.25, 0.0)),
    ("neck", "spine", (0.0, 0.25, 0.0)),
    ("head", "neck", (0.0, 0.15, 0.0)),
    ("left_shoulder", "neck", (0.17, -0.02, 0.0)),
    ("left_elbow", "left_shoulder", (0.0, -0.28, 0.0)),
    ("left_wrist", "left_elbow", (0.0, -0.25, 0.0)),
    ("right_shoulder", "neck", (-0.17, -0.02, 0.0)),
    ("right_elbow", "right_shoulder", (0.0, -0.28, 0.0)),
    ("right_wrist", "right_elbow", (0.0, -0.25, 0.0)),
]


class SkeletonSpec(BaseHGVAEObject):
    """Joint tree with rest-pose bone offsets expressed in the parent's frame."""

    names: list[str]
    parents: list[int]
    """Parent index per joint, ``-1`` for the root."""
    offsets: list[tuple[float, float, float]]

    @model_validator(mode="after")
    def _check_tree(self) -> Self:
        count = len(self.names)
        if count == 0 or len(self.parents) != count or len(self.offsets) != count:
            raise ValueError("names, parents and offsets must have the same non-zero length")
        if len(set(self.names)) != count:
            raise ValueError("Joint names must be unique")
        roots = [j for j, p in enumerate(self.parents) if p == -1]
        if len(roots) != 1:
            raise ValueError(f"A skeleton needs exactly one root, found {len(roots)}")
        for j, p in enumerate(self.parents):
            if p != -1 and not 0 <= p < count:
                raise ValueError(f"Joint '{self.names[j]}' has invalid parent index {p}")
        self.order()
        return self

    @property
    def joint_count(self) -> int:
        return len(self.names)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    def order(self) -> list[int]:
        """Joints sorted so every parent precedes its children."""
        children: dict[int, list[int]] = {j: [] for j in range(self.joint_count)}
        for j, p in enumerate(self.parents):
            if p != -1:
                children[p].append(j)
        order: list[int] = []
        stack = [self.root]
        while stack:
            joint = stack.pop()
            order.append(joint)
            stack.extend(reversed(children[joint]))
        if len(order) != self.joint_count:
            raise ValueError("Parent indices contain a cycle")
        return order

    @classmethod
    def default(cls) -> Self:
        """The 18-joint body skeleton (no hands, no static joints)."""
        names = [name for name, _, _ in _DEFAULT_JOINTS]
        parents = [-1 if parent is None else names.index(parent) for _, parent, _ in _DEFAULT_JOINTS]
        return cls(names=names, parents=parents, offsets=[off for _, _, off in _DEFAULT_JOINTS])

    @classmethod
    def from_text(cls, text: str) -> Self:
        """Parse ``name parent x y z`` lines; ``-`` marks the root, ``#`` starts a comment."""
        rows = []
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 5:
                raise ValueError(f"line {number}: expected 'name parent x y z', got '{line}'")
            try:
                offset = (float(fields[2]), float(fields[3]), float(fields[4]))
            except ValueError:
                raise ValueError(f"line {number}: offsets must be numbers") from None
            rows.append((fields[0], fields[1], offset))
        names = [name for name, _, _ in rows]
        parents = []
        for name, parent, _ in rows:
            if parent == "-":
                parents.append(-1)
            elif parent in names:
                parents.append(names.index(parent))
            else:
                raise ValueError(f"Joint '{name}' refers to unknown parent '{parent}'")
        return cls(names=names, parents=parents, offsets=[off for _, _, off in rows])

    @classmethod
    def load(cls, path: str | Path) -> Self:
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = ["# name parent offset_x offset_y offset_z"]
        for name, parent, (x, y, z) in zip(self.names, self.parents, self.offsets, strict=True):
            parent_name = "-" if parent == -1 else self.names[parent]
            lines.append(f"{name} {parent_name} {x!r} {y!r} {z!r}")
        return "\n".join(lines) + "\n"


class MotionDataset(BaseHGVAEObject):
    """Uniform-length motion sequences, optionally labelled by class."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    positions: np.ndarray
    """``(sequences, joints, 3, frames)`` in meters."""
    labels: np.ndarray | None = None
    provenance: str = ""

    @field_validator("positions", mode="before")
    @classmethod
    def _as_array(cls, v: Any) -> np.ndarray:
        return np.asarray(v, dtype=np.float64)

    @field_validator("labels", mode="before")
    @classmethod
    def _as_labels(cls, v: Any) -> np.ndarray | None:
        return None if v is None else np.asarray(v, dtype=np.int64)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.positions.ndim != 4 or self.positions.shape[2] != 3:
            raise ShapeError("MotionDataset", self.positions.shape, (-1, -1, 3, -1))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("Motion positions must be finite")
        if self.labels is not None:
            if self.labels.shape != (self.positions.shape[0],):
                raise ShapeError("MotionDataset labels", self.labels.shape, (self.positions.shape[0],))
            if np.any(self.labels < 0):
                raise ValueError("Class labels must be non-negative")
        return self

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def joints(self) -> int:
        return self.positions.shape[1]

    @property
    def frames(self) -> int:
        return self.positions.shape[3]

    @property
    def class_count(self) -> int:
        return 0 if self.labels is None or len(self.labels) == 0 else int(self.labels.max()) + 1

    def subset(self, indices: np.ndarray | list[int]) -> "MotionDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MotionDataset(
            positions=self.positions[idx],
            labels=None if self.labels is None else self.labels[idx],
            provenance=self.provenance,
        )

    def split(self, fraction: float, seed: int = 0) -> tuple["MotionDataset", "MotionDataset"]:
        """Shuffle, then hold out ``fraction`` of the sequences (at least one when possible)."""
        order = np.random.default_rng(seed).permutation(len(self))
        held = int(round(fraction * len(self)))
        if fraction > 0 and held == 0 and len(self) > 1:
            held = 1
        return self.subset(np.sort(order[held:])), self.subset(np.sort(order[:held]))

    def trajectories(self, center: bool = True) -> np.ndarray:
        """Node trajectories ``(sequences, 3J, frames)``, root-centered by default."""
        positions = center_sequences(self.positions) if center else self.positions
        return flatten_joints(positions)


def flatten_joints(positions: np.ndarray) -> np.ndarray:
    """``(..., J, 3, N)`` to ``(..., 3J, N)`` in joint-major order."""
    if positions.ndim < 3 or positions.shape[-2] != 3:
        raise ShapeError("flatten_joints", positions.shape, (-1, 3, -1))
    return positions.reshape(*positions.shape[:-3], positions.shape[-3] * 3, positions.shape[-1])


def unflatten_nodes(nodes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`flatten_joints`."""
    if nodes.ndim < 2 or nodes.shape[-2] % 3:
        raise ShapeError("unflatten_nodes", nodes.shape, (-1, -1))
    return nodes.reshape(*nodes.shape[:-2], nodes.shape[-2] // 3, 3, nodes.shape[-1])


def center_sequences(positions: np.ndarray, root: int = 0) -> np.ndarray:
    """Subtract each sequence's mean root position from every joint."""
    offset = positions[..., root : root + 1, :, :].mean(axis=-1, keepdims=True)
    return positions - offset


def compute_feature_means(trajectories: np.ndarray) -> FeatureMeans:
    """Per (node, timepoint) mean over a training split of shape ``(sequences, nodes, frames)``."""
    trajectories = np.asarray(trajectories, dtype=np.float64)
    if trajectories.ndim != 3 or trajectories.shape[0] == 0:
        raise ValueError("Feature means need a non-empty (sequences, nodes, frames) split")
    return trajectories.mean(axis=0)


def compute_ascent_scale(trajectories: np.ndarray) -> np.ndarray:
    """Per-node RMS deviation from the feature means, shape ``(nodes, 1)``.

    MAP ascent measures its steps in these units, so one step moves a cell by about
    the spread the mean imputation leaves unexplained.
    """
    trajectories = np.asarray(trajectories, dtype=np.float64)
    if trajectories.ndim != 3 or trajectories.shape[0] == 0:
        raise ValueError("Ascent scales need a non-empty (sequences, nodes, frames) split")
    return np.sqrt(trajectories.var(axis=0).mean(axis=-1, keepdims=True))


def bone_lengths(positions: np.ndarray, spec: SkeletonSpec) -> np.ndarray:
    """Length of every bone over time for one ``(J, 3, N)`` sequence, shape ``(J - 1, N)``."""
    bones = [(j, p) for j, p in enumerate(spec.parents) if p != -1]
    return np.stack([np.linalg.norm(positions[j] - positions[p], axis=0) for j, p in bones])


def write_dataset(dataset: MotionDataset, path: str | Path) -> None:
    """Serialise ``dataset`` in the HGMD container."""
    provenance = dataset.provenance.encode("utf-8")
    count, joints, _, frames = dataset.positions.shape
    has_labels = dataset.labels is not None
    with open(path, "wb") as fp:
        fp.write(
            _HEADER.pack(
                DATASET_MAGIC, DATASET_VERSION, joints, frames, count, int(has_labels), len(provenance)
            )
        )
        fp.write(provenance)
        if dataset.labels is not None:
            fp.write(np.asarray(dataset.labels, dtype="<i4").tobytes())
        fp.write(np.ascontiguousarray(dataset.positions, dtype="<f8").tobytes())
    logger.info("Wrote %d sequences (%d joints, %d frames) to %s", count, joints, frames, path)


def load_dataset(path: str | Path) -> MotionDataset:
    """Read an HGMD container written by :func:`write_dataset`."""
    blob = Path(path).read_bytes()
    if len(blob) < len(DATASET_MAGIC):
        raise TruncatedFileError(f"{path}: file ends inside the header")
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not an HGMD file (magic {blob[:4]!r})")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    _, version, joints, frames, count, has_labels, name_len = _HEADER.unpack_from(blob)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"{path}: HGMD version {version} is not supported")
    offset = _HEADER.size
    labels_size = 4 * count if has_labels else 0
    positions_size = 8 * count * joints * 3 * frames
    expected = offset + name_len + labels_size + positions_size
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise DatasetFormatError(f"{path}: {len(blob) - expected} unexpected trailing bytes")
    provenance = blob[offset : offset + name_len].decode("utf-8")
    offset += name_len
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i4", count=count, offset=offset).astype(np.int64)
        offset += labels_size
    positions = np.frombuffer(blob, dtype="<f8", count=count * joints * 3 * frames, offset=offset)
    logger.info("Loaded %d sequences from %s", count, path)
    return MotionDataset(
        positions=positions.astype(np.float64).reshape(count, joints, 3, frames),
        labels=labels,
        provenance=provenance,
    )


class _ClassProgram(BaseHGVAEObject):
    """Joint-angle program shared by every sequence of one class."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    frequency: float
    bias: np.ndarray
    amplitude: np.ndarray
    velocity: float = Field(ge=0.0)


def _class_program(spec: SkeletonSpec, rng: np.random.Generator) -> _ClassProgram:
    joints = spec.joint_count
    amplitude = rng.uniform(0.0, 0.6, size=(joints, 3)) * np.array([1.0, 0.3, 0.3])
    amplitude[spec.root] *= 0.2
    return _ClassProgram(
        frequency=rng.uniform(0.5, 1.5),
        bias=rng.uniform(-0.5, 0.5, size=(joints, 3)),
        amplitude=amplitude,
        velocity=rng.uniform(0.0, 1.2),
    )


def _forward_kinematics(
    spec: SkeletonSpec, angles: np.ndarray, root_path: np.ndarray
) -> np.ndarray:
    """Global joint positions ``(J, 3, N)`` from local Euler angles ``(J, N, 3)``."""
    joints, frames, _ = angles.shape
    local = np.stack([Rotation.from_euler("xyz", angles[j]).as_matrix() for j in range(joints)])
    offsets = np.asarray(spec.offsets, dtype=np.float64)
    world_rot = np.empty((joints, frames, 3, 3))
    positions = np.empty((joints, frames, 3))
    for j in spec.order():
        parent = spec.parents[j]
        if parent == -1:
            world_rot[j] = local[j]
            positions[j] = root_path
        else:
            world_rot[j] = world_rot[parent] @ local[j]
            positions[j] = positions[parent] + world_rot[parent] @ offsets[j]
    return positions.transpose(0, 2, 1)


def synthesize_motions(
    spec: SkeletonSpec | None = None,
    count: int = 512,
    classes: int = 1,
    seed: RngLike = 0,
    frames: int = SEQUENCE_LENGTH,
    fps: float = 25.0,
    noise: float = 0.01,
) -> MotionDataset:
    """Kinematically coherent labelled motion from class-specific joint-angle programs.

    Each class has its own base frequency, pose bias, swing amplitudes and forward
    speed. Sequences draw a random phase and small Gaussian perturbations of tempo,
    amplitude and per-frame angles, then forward kinematics places the joints, so
    bone lengths are constant within every sequence.
    """
    if count < 1 or classes < 1:
        raise ValueError("count and classes must be at least 1")
    spec = spec or SkeletonSpec.default()
    rng = as_rng(seed)
    programs = [_class_program(spec, rng) for _ in range(classes)]
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    t = np.arange(frames) / fps
    joints = spec.joint_count
    positions = np.empty((count, joints, 3, frames))
    for i, label in enumerate(labels):
        program = programs[label]
        tempo = program.frequency * (1.0 + noise * rng.standard_normal())
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(joints, 3))
        amplitude = program.amplitude * (1.0 + noise * rng.standard_normal((joints, 3)))
        bias = program.bias + noise * rng.standard_normal((joints, 3))
        swing = np.sin(2.0 * np.pi * tempo * t[None, None, :] + phase[..., None])
        angles = bias[..., None] + amplitude[..., None] * swing
        angles = angles + noise * 0.5 * rng.standard_normal(angles.shape)
        root_path = np.zeros((frames, 3))
        root_path[:, 2] = program.velocity * (1.0 + noise * rng.standard_normal()) * t
        root_path[:, 1] = 0.9 + 0.02 * np.sin(4.0 * np.pi * tempo * t)
        positions[i] = _forward_kinematics(spec, angles.transpose(0, 2, 1), root_path)
    logger.info("Synthesised %d sequences in %d classes", count, classes)
    return MotionDataset(positions=positions, labels=labels, provenance=f"synthetic:{classes}")

