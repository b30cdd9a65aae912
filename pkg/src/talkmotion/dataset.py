"""On-disk clip format and the synthetic talking-motion dataset.

A dataset is a directory holding ``manifest.json`` plus raw little-endian
array files (float32 for real-valued arrays, int32 for phoneme ids). The
manifest records shape and sha256 of every array so reads can be verified.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import PHONEME_VOCAB, SILENCE_TOKEN
from .errors import FormatError, IntegrityError
from .motion import DEFAULT_FPS, DEFAULT_LAYOUT, FULL_DIM, ParameterLayout, merge_motion

MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "talkmotion-dataset"
FORMAT_VERSION = 1
ARRAY_DTYPES = {"motion": "<f4", "audio_feats": "<f4", "phonemes": "<i4", "text_embedding": "<f4"}


@dataclass
class Clip:
    clip_id: str
    motion: np.ndarray          # (N, 70)
    audio_feats: np.ndarray     # (N, D_a)
    phonemes: np.ndarray        # (N,)
    text_embedding: np.ndarray  # (D_s,)
    fps: float = DEFAULT_FPS
    split: str = "train"

    @property
    def frames(self):
        return self.motion.shape[0]

    def check(self):
        n = self.motion.shape[0]
        if self.motion.ndim != 2 or self.motion.shape[1] != FULL_DIM:
            raise ValueError(f"clip {self.clip_id}: motion must be (N, {FULL_DIM})")
        if self.audio_feats.shape[0] != n or self.phonemes.shape != (n,):
            raise ValueError(f"clip {self.clip_id}: per-frame arrays disagree on N")
        if self.text_embedding.ndim != 1:
            raise ValueError(f"clip {self.clip_id}: text embedding must be a vector")


@dataclass
class Manifest:
    root: Path
    audio_dim: int
    text_dim: int
    vocab: int = PHONEME_VOCAB
    fps: float = DEFAULT_FPS
    layout: ParameterLayout = DEFAULT_LAYOUT
    clips: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def ids(self, split=None):
        return [c["id"] for c in self.clips if split is None or c["split"] == split]

    def entry(self, clip_id):
        for c in self.clips:
            if c["id"] == clip_id:
                return c
        raise KeyError(clip_id)

    def subset(self, split):
        return replace(self, clips=[c for c in self.clips if c["split"] == split])

    def to_dict(self):
        return {
            "format": FORMAT_TAG, "version": FORMAT_VERSION,
            "audio_dim": self.audio_dim, "text_dim": self.text_dim, "vocab": self.vocab,
            "fps": self.fps, "layout": self.layout.to_dict(), "extra": self.extra,
            "clips": self.clips,
        }

    @property
    def path(self):
        return Path(self.root) / MANIFEST_NAME


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_array(path, arr, dtype):
    raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    _atomic_write(path, raw)
    return {"shape": list(np.shape(arr)), "dtype": dtype, "sha256": hashlib.sha256(raw).hexdigest()}


def read_array(path, meta):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"array file not found: {path}")
    raw = path.read_bytes()
    shape = tuple(meta["shape"])
    dtype = np.dtype(meta["dtype"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise IntegrityError(f"{path}: {len(raw)} bytes on disk, manifest implies {expected}")
    if "sha256" in meta and hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise IntegrityError(f"{path}: checksum mismatch")
    out = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return out.astype(np.int64 if dtype.kind == "i" else np.float64)


def write_clip(root, clip):
    """Write one clip's arrays under ``root/clips`` and return its manifest entry."""
    clip.check()
    files = {}
    for name, dtype in ARRAY_DTYPES.items():
        rel = f"clips/{clip.clip_id}.{name}.bin"
        files[name] = {"path": rel, **write_array(Path(root) / rel, getattr(clip, name), dtype)}
    return {"id": clip.clip_id, "frames": clip.frames, "fps": clip.fps, "split": clip.split, "files": files}


def read_clip(manifest, entry):
    if isinstance(entry, str):
        entry = manifest.entry(entry)
    arrays = {}
    for name in ARRAY_DTYPES:
        meta = entry["files"][name]
        arrays[name] = read_array(Path(manifest.root) / meta["path"], meta)
    clip = Clip(entry["id"], fps=entry.get("fps", manifest.fps), split=entry["split"], **arrays)
    clip.check()
    if clip.frames != entry["frames"]:
        raise IntegrityError(f"clip {clip.clip_id}: {clip.frames} frames, manifest says {entry['frames']}")
    if clip.audio_feats.shape[1] != manifest.audio_dim or clip.text_embedding.shape[0] != manifest.text_dim:
        raise IntegrityError(f"clip {clip.clip_id}: feature dims disagree with manifest")
    return clip


def save_manifest(manifest):
    text = json.dumps(manifest.to_dict(), indent=1, sort_keys=True)
    _atomic_write(manifest.path, text.encode())
    return manifest.path


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON") from exc
    if d.get("format") != FORMAT_TAG:
        raise FormatError(f"{path}: not a {FORMAT_TAG} manifest")
    if d.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {d.get('version')}")
    return Manifest(path.parent, d["audio_dim"], d["text_dim"], d["vocab"], d["fps"],
                    ParameterLayout.from_dict(d["layout"]), d["clips"], d.get("extra", {}))


def write_dataset(root, clips, audio_dim, text_dim, vocab=PHONEME_VOCAB, fps=DEFAULT_FPS,
                  layout=DEFAULT_LAYOUT, extra=None):
    root = Path(root)
    entries = [write_clip(root, c) for c in clips]
    manifest = Manifest(root, audio_dim, text_dim, vocab, fps, layout, entries, extra or {})
    save_manifest(manifest)
    return manifest


def read_dataset(manifest, split=None):
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    return [read_clip(manifest, e) for e in manifest.clips if split is None or e["split"] == split]


def split_dataset(manifest, ratio, seed):
    """Seeded shuffle of clip ids; the first ``ratio`` fraction becomes train.

    Returns (train, test) manifests; both carry updated split tags.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    ids = sorted(c["id"] for c in manifest.clips)
    n_train = int(round(ratio * len(ids)))
    if n_train == 0 or n_train == len(ids):
        raise ValueError(f"split of {len(ids)} clips at ratio {ratio} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(len(ids))
    train_ids = {ids[i] for i in perm[:n_train]}
    tagged = [dict(c, split="train" if c["id"] in train_ids else "test") for c in manifest.clips]
    full = replace(manifest, clips=tagged)
    return full.subset("train"), full.subset("test")


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    clips: int = 200
    frames: int = 96
    seed: int = 0
    dwell_min: int = 3
    dwell_max: int = 10
    lips_stiffness: float = 2.5
    expression_scale: float = 0.5
    pose_scale: float = 0.02
    audio_dim: int = 32
    text_dim: int = 64
    vocab: int = PHONEME_VOCAB
    audio_noise: float = 0.1
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if self.clips < 1 or self.frames < 1:
            raise ValueError("need at least one clip and one frame")
        if self.dwell_min < 1 or self.dwell_max < self.dwell_min:
            raise ValueError("dwell range must satisfy 1 <= dwell_min <= dwell_max")
        if min(self.lips_stiffness, self.expression_scale, self.pose_scale, self.audio_noise) <= 0:
            raise ValueError("all scales must be positive")


class SyntheticWorld:
    """Dataset-level random structure shared by every clip of one seed.

    Phonemes drive the lips (per-phoneme mouth targets reached by a critically
    damped response); the text embedding sets expression frequencies and
    phases; pose is a smoothed random walk; speech features are a noisy linear
    image of the phoneme one-hot.
    """

    def __init__(self, spec, layout=DEFAULT_LAYOUT):
        self.spec = spec
        self.layout = layout
        rng = np.random.default_rng([spec.seed, 0])
        n_expr = len(layout.expression_indices)
        self.lip_targets = rng.standard_normal((spec.vocab, len(layout.mouth_indices)))
        self.lip_targets[0] = 0.0
        self.audio_proj = rng.standard_normal((spec.vocab, spec.audio_dim))
        self.expr_base_freq = rng.uniform(0.2, 1.0, n_expr)
        self.expr_freq_map = rng.standard_normal((spec.text_dim, n_expr)) / np.sqrt(spec.text_dim)
        self.expr_phase_map = rng.standard_normal((spec.text_dim, n_expr)) / np.sqrt(spec.text_dim)
        self.expr_amp = rng.uniform(0.3, 1.0, n_expr) * spec.expression_scale

    def phoneme_frames(self, n, rng):
        """Per-frame token ids from a random phoneme string with random dwell times."""
        spec = self.spec
        out = np.empty(n, dtype=np.int64)
        pos, prev = 0, -1
        while pos < n:
            tok = prev
            while tok == prev:
                tok = int(rng.integers(SILENCE_TOKEN, spec.vocab))
            dwell = int(rng.integers(spec.dwell_min, spec.dwell_max + 1))
            out[pos:pos + dwell] = tok
            pos += dwell
            prev = tok
        return out

    def lips(self, phonemes):
        w = self.spec.lips_stiffness
        decay = np.exp(-w)
        targets = self.lip_targets[phonemes]
        x = targets[0].copy()
        v = np.zeros_like(x)
        out = np.empty_like(targets)
        out[0] = x
        for i in range(1, len(phonemes)):
            e0 = x - targets[i]
            k = v + w * e0
            e1 = (e0 + k) * decay
            v = (v - w * k) * decay
            x = targets[i] + e1
            out[i] = x
        return out

    def expression(self, text, n):
        freq = np.abs(self.expr_base_freq + 0.3 * (text @ self.expr_freq_map))
        phase = np.pi * (text @ self.expr_phase_map)
        time = np.arange(n)[:, None] / self.spec.fps
        return self.expr_amp * np.sin(2 * np.pi * freq * time + phase)

    def pose(self, n, rng):
        p0 = rng.normal(0.0, 0.3, 6)
        eps = rng.normal(0.0, self.spec.pose_scale, (n, 6))
        vel = np.zeros(6)
        out = np.empty((n, 6))
        out[0] = p0
        for i in range(1, n):
            vel = 0.8 * vel + 0.2 * eps[i]
            out[i] = out[i - 1] + vel
        return out

    def audio(self, phonemes, rng):
        a = self.audio_proj[phonemes]
        return a + rng.normal(0.0, self.spec.audio_noise, a.shape)

    def clip(self, clip_id, rng, phonemes=None, text=None):
        n = self.spec.frames if phonemes is None else len(phonemes)
        if phonemes is None:
            phonemes = self.phoneme_frames(n, rng)
        if text is None:
            text = rng.standard_normal(self.spec.text_dim)
        motion = merge_motion(self.lips(phonemes), self.expression(text, n), self.pose(n, rng), self.layout)
        f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
        return Clip(clip_id, f32(motion), f32(self.audio(phonemes, rng)), np.asarray(phonemes, dtype=np.int64),
                    f32(text), fps=self.spec.fps)


def generate_synthetic_clips(spec, layout=DEFAULT_LAYOUT):
    world = SyntheticWorld(spec, layout)
    return [world.clip(f"clip{i:05d}", np.random.default_rng([spec.seed, 1, i])) for i in range(spec.clips)]


def generate_synthetic_dataset(spec, out_dir, layout=DEFAULT_LAYOUT, train_ratio=0.8, split_seed=None):
    """Generate, split and write a synthetic dataset. Returns the saved manifest."""
    clips = generate_synthetic_clips(spec, layout)
    manifest = write_dataset(out_dir, clips, spec.audio_dim, spec.text_dim, spec.vocab, spec.fps, layout,
                             extra={"synthetic": {k: v for k, v in vars(spec).items()}})
    if len(clips) > 1:
        train, test = split_dataset(manifest, train_ratio, spec.seed if split_seed is None else split_seed)
        manifest = replace(manifest, clips=sorted(train.clips + test.clips, key=lambda c: c["id"]))
    save_manifest(manifest)
    return manifest
