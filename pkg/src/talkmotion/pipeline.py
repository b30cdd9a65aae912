"""Inference: three kind models -> full 70-dim motion, chunked generation, export.

Long sequences are produced chunk by chunk without overlap. The first chunk
is conditioned on the provided identity frame; every later chunk on the last
frame generated by the chunk before it.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditionBundle
from .dataset import read_array, write_array
from .diffusion import sample_sequence
from .errors import FormatError
from .motion import (DEFAULT_FPS, DEFAULT_LAYOUT, FULL_DIM, KINDS, ParameterLayout, denormalize,
                     merge_motion, normalize, slice_motion)

EXPORT_TAG = "talkmotion-export"
EXPORT_VERSION = 1


@dataclass
class GenerationRequest:
    """``cond`` holds full-length audio/phoneme arrays, the transcript embedding,
    and the raw 70-dim identity frame as ``first_frame``."""

    cond: ConditionBundle
    chunk: int = 32
    total_frames: int = 0
    seed: int = 0
    head_pose_mode: str = "generated"

    def __post_init__(self):
        if self.total_frames == 0:
            self.total_frames = self.cond.frames
        if self.total_frames < 1:
            raise ValueError("total_frames must be >= 1")
        if self.chunk < 2:
            raise ValueError("chunk length must be >= 2")
        if self.cond.frames < self.total_frames:
            raise ValueError(f"conditions cover {self.cond.frames} frames, {self.total_frames} requested")
        if self.head_pose_mode not in ("generated", "frozen"):
            raise ValueError("head_pose_mode must be 'generated' or 'frozen'")
        if np.shape(self.cond.first_frame) != (FULL_DIM,):
            raise ValueError(f"identity frame must be {FULL_DIM}-dim")


@dataclass
class GenerationResult:
    motion: np.ndarray
    boundaries: list                 # [(start, stop), ...] 0-based half-open
    seam_jumps: list = field(default_factory=list)  # per boundary: {group: norm}
    chunk_first_frames: list = field(default_factory=list)


def chunk_bounds(total, chunk):
    return [(s, min(s + chunk, total)) for s in range(0, total, chunk)]


def _group_norms(delta, layout):
    return {kind: float(np.linalg.norm(delta[list(layout.indices(kind))])) for kind in KINDS}


def generate_talking_motion(models, request):
    """Run the lips, expression and pose models over the request and merge."""
    missing = [k for k in KINDS if k not in models]
    if missing:
        raise ValueError(f"missing models: {missing}")
    layout = models["lips"].config.layout
    for k in KINDS:
        if models[k].config.layout != layout:
            raise ValueError("all models must share one parameter layout")
    cond = request.cond
    rng = np.random.default_rng(request.seed)
    first = np.asarray(cond.first_frame, dtype=np.float64)
    chunks, firsts = [], []
    bounds = chunk_bounds(request.total_frames, request.chunk)
    for lo, hi in bounds:
        firsts.append(first.copy())
        parts = {}
        for kind in KINDS:
            model = models[kind]
            ff = normalize(slice_motion(first, kind, layout), model.stats)
            window = ConditionBundle(cond.audio_feats[lo:hi], cond.phonemes[lo:hi], cond.text_embedding, ff)
            z = sample_sequence(model, window, model.schedule, hi - lo, rng)
            parts[kind] = denormalize(z, model.stats)
        merged = merge_motion(parts["lips"], parts["expression"], parts["pose"], layout)
        chunks.append(merged)
        first = merged[-1]
    motion = np.concatenate(chunks, axis=0)
    seams = [_group_norms(motion[lo] - motion[lo - 1], layout) for lo, _ in bounds[1:]]
    if request.head_pose_mode == "frozen":
        motion = freeze_head_pose(motion, layout)
    return GenerationResult(motion, bounds, seams, firsts)


def freeze_head_pose(motion, layout=DEFAULT_LAYOUT):
    """Hold every frame's head pose at frame 1; facial columns pass through untouched."""
    m = np.array(motion, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != FULL_DIM:
        raise ValueError(f"freeze_head_pose needs (N, {FULL_DIM}) motion, got {m.shape}")
    idx = list(layout.pose_indices)
    m[:, idx] = m[0, idx]
    return m


def export_for_renderer(motion, path, fps=DEFAULT_FPS, layout=DEFAULT_LAYOUT, clip_id=None):
    """Write ``<stem>.json`` (header) and ``<stem>.bin`` (float32 N x 70, little-endian)."""
    m = np.asarray(motion, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != FULL_DIM:
        raise ValueError(f"export needs (N, {FULL_DIM}) motion, got {m.shape}")
    if m.shape[0] == 0:
        raise ValueError("refusing to export an empty sequence")
    path = Path(path).with_suffix(".json")
    array_path = path.with_suffix(".bin")
    meta = write_array(array_path, m, "<f4")
    header = {"format": EXPORT_TAG, "version": EXPORT_VERSION, "clip_id": clip_id or path.stem,
              "fps": fps, "frames": int(m.shape[0]), "dim": FULL_DIM, "layout": layout.to_dict(),
              "array": {"path": array_path.name, **meta}}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=1, sort_keys=True))
    return path


def read_export(path):
    """Return ``(motion, header)`` for an exported sequence."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"export header not found: {path}")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON") from exc
    if header.get("format") != EXPORT_TAG:
        raise FormatError(f"{path}: not a motion export")
    if header.get("version") != EXPORT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    motion = read_array(path.parent / header["array"]["path"], header["array"])
    if motion.shape != (header["frames"], header["dim"]):
        raise FormatError(f"{path}: header shape disagrees with array")
    return motion, header


def export_layout(header):
    return ParameterLayout.from_dict(header["layout"])


def find_exports(directory):
    """Map clip id -> header path for every export header in ``directory``."""
    out = {}
    for p in sorted(Path(directory).glob("*.json")):
        try:
            header = json.loads(p.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(header, dict) and header.get("format") == EXPORT_TAG:
            out[header["clip_id"]] = p
    return out
