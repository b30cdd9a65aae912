"""3DMM motion parameter layout: 64 facial coefficients followed by 6 head-pose values.

The facial block is split into a mouth subset (13 coefficients, driven by the
lips model) and the remaining 51 expression coefficients. Which facial
indices belong to the mouth is configurable.
"""

from dataclasses import dataclass, field

import numpy as np

FACIAL_DIM = 64
POSE_DIM = 6
FULL_DIM = FACIAL_DIM + POSE_DIM
MOUTH_DIM = 13
KINDS = ("lips", "expression", "pose")
KIND_DIMS = {"lips": MOUTH_DIM, "expression": FACIAL_DIM - MOUTH_DIM, "pose": POSE_DIM}
STD_FLOOR = 1e-8
DEFAULT_FPS = 25.0


def check_kind(kind):
    if kind not in KIND_DIMS:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class ParameterLayout:
    mouth_indices: tuple = tuple(range(MOUTH_DIM))

    def __post_init__(self):
        mouth = tuple(int(i) for i in self.mouth_indices)
        object.__setattr__(self, "mouth_indices", mouth)
        if len(mouth) != MOUTH_DIM or len(set(mouth)) != MOUTH_DIM:
            raise ValueError(f"mouth_indices must be {MOUTH_DIM} distinct indices")
        if any(i < 0 or i >= FACIAL_DIM for i in mouth):
            raise ValueError(f"mouth_indices must lie in [0, {FACIAL_DIM})")

    @property
    def expression_indices(self):
        mouth = set(self.mouth_indices)
        return tuple(i for i in range(FACIAL_DIM) if i not in mouth)

    @property
    def pose_indices(self):
        return tuple(range(FACIAL_DIM, FULL_DIM))

    def indices(self, kind):
        check_kind(kind)
        if kind == "lips":
            return self.mouth_indices
        if kind == "expression":
            return self.expression_indices
        return self.pose_indices

    def to_dict(self):
        return {"mouth_indices": list(self.mouth_indices)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mouth_indices"]))


DEFAULT_LAYOUT = ParameterLayout()


@dataclass
class MotionSequence:
    """An N x d block of motion parameters plus its frame rate (metadata only)."""

    values: np.ndarray
    kind: str = "full"
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"motion must be a non-empty N x d matrix, got {self.values.shape}")
        expected = FULL_DIM if self.kind == "full" else KIND_DIMS[check_kind(self.kind)]
        if self.values.shape[1] != expected:
            raise ValueError(f"{self.kind} motion needs d={expected}, got {self.values.shape[1]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("motion contains non-finite values")

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def _values(x):
    return x.values if isinstance(x, MotionSequence) else np.asarray(x, dtype=np.float64)


def slice_motion(full, kind, layout=DEFAULT_LAYOUT):
    """Select the columns of one model kind from full 70-dim motion (any leading axes)."""
    x = _values(full)
    if x.shape[-1] != FULL_DIM:
        raise ValueError(f"slice_motion needs {FULL_DIM}-dim motion, got {x.shape[-1]}")
    return x[..., list(layout.indices(kind))]


def merge_motion(lips, expression, pose, layout=DEFAULT_LAYOUT):
    """Inverse of slice_motion: scatter the three parts back into 70 columns."""
    parts = {"lips": _values(lips), "expression": _values(expression), "pose": _values(pose)}
    lead = parts["lips"].shape[:-1]
    for kind, arr in parts.items():
        if arr.shape[:-1] != lead:
            raise ValueError(f"frame counts differ: lips {lead} vs {kind} {arr.shape[:-1]}")
        if arr.shape[-1] != KIND_DIMS[kind]:
            raise ValueError(f"{kind} part needs d={KIND_DIMS[kind]}, got {arr.shape[-1]}")
    out = np.empty(lead + (FULL_DIM,), dtype=np.float64)
    for kind, arr in parts.items():
        out[..., list(layout.indices(kind))] = arr
    return out


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones_like(self.mean) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"std entries must be >= {STD_FLOOR}")

    @classmethod
    def fit(cls, motions):
        """Per-column mean/std over a list of N x 70 training arrays."""
        stacked = np.concatenate([_values(m) for m in motions], axis=0)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), STD_FLOOR))

    def for_kind(self, kind, layout=DEFAULT_LAYOUT):
        if self.mean.shape[0] != FULL_DIM:
            raise ValueError("for_kind needs full 70-dim stats")
        idx = list(layout.indices(kind))
        return NormalizationStats(self.mean[idx], self.std[idx])


def normalize(x, stats):
    v = _values(x)
    if v.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"motion dim {v.shape[-1]} does not match stats dim {stats.mean.shape[0]}")
    return (v - stats.mean) / stats.std


def denormalize(z, stats):
    v = _values(z)
    if v.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"motion dim {v.shape[-1]} does not match stats dim {stats.mean.shape[0]}")
    return v * stats.std + stats.mean
