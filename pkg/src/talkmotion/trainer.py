"""Training loop for one kind-specific denoiser.

Lips and expression models minimise ``lambda * L_diff``; the head-pose model
adds an unweighted first-frame term, ``lambda * L_diff + L_first``.
"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import PHONEME_VOCAB, ConditionBundle, stack_bundles
from .denoiser import DenoiserConfig, init_model, save_model
from .diffusion import diffusion_loss, first_frame_loss, q_sample
from .motion import DEFAULT_LAYOUT, NormalizationStats, check_kind, normalize, slice_motion
from .tensor import Adam, NumericsError, backward

DEFAULT_LAMBDA = 6.0


@dataclass
class TrainConfig:
    kind: str = "lips"
    lam: float = DEFAULT_LAMBDA
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    window: int = 32
    seed: int = 0
    T: int = 50
    beta_start: float = 2e-3
    beta_end: float = 0.4
    width: int = 32
    layers: int = 2
    heads: int = 4
    enc_layers: int = 2
    max_frames: int = 256
    checkpoint_every: int = 0
    zero_conditions: bool = False

    def __post_init__(self):
        check_kind(self.kind)
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def full_scale(cls, kind, **overrides):
        """Larger preset: width 256, 8 layers, batch 32, lr 1e-4, 64-frame windows, T=1000."""
        base = dict(kind=kind, lr=1e-4, batch_size=32, window=64, width=256, layers=8, heads=4,
                    T=1000, beta_start=1e-4, beta_end=0.02)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    l_diff: list = field(default_factory=list)
    l_first: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoints: list = field(default_factory=list)

    def moving_average(self, head=False, span=100):
        xs = self.losses[:span] if head else self.losses[-span:]
        return float(np.mean(xs)) if xs else float("nan")

    @property
    def initial_loss(self):
        return self.moving_average(head=True)

    @property
    def final_loss(self):
        return self.moving_average()


def compose_loss(kind, x0, x0_pred, lam=DEFAULT_LAMBDA):
    """Return ``(L_G, terms)`` where terms holds the float value of each component."""
    check_kind(kind)
    l_diff = diffusion_loss(x0, x0_pred)
    total = l_diff * lam
    terms = {"l_diff": l_diff.item()}
    if kind == "pose":
        l_first = first_frame_loss(x0, x0_pred)
        total = total + l_first
        terms["l_first"] = l_first.item()
    return total, terms


def sample_training_window(clip, n, rng):
    """Uniform contiguous window of ``n`` frames.

    Returns the raw (n, 70) motion window and a bundle whose first_frame is
    the window's first raw 70-dim frame.
    """
    if clip.frames < n:
        raise ValueError(f"clip {clip.clip_id} has {clip.frames} frames, window needs {n}")
    start = int(rng.integers(0, clip.frames - n + 1))
    sl = slice(start, start + n)
    motion = clip.motion[sl]
    cond = ConditionBundle(clip.audio_feats[sl], clip.phonemes[sl], clip.text_embedding, motion[0])
    return motion, cond


def kind_bundle(cond, kind, stats70, layout=DEFAULT_LAYOUT):
    """Swap a raw 70-dim first frame for the normalized slice a kind model consumes."""
    ff = normalize(slice_motion(cond.first_frame, kind, layout), stats70.for_kind(kind, layout))
    return replace(cond, first_frame=ff)


def model_config_for(config, manifest_dims, layout=DEFAULT_LAYOUT):
    audio_dim, text_dim, vocab = manifest_dims
    return DenoiserConfig(
        kind=config.kind, width=config.width, layers=config.layers, heads=config.heads,
        enc_layers=config.enc_layers, max_frames=config.max_frames, vocab=vocab,
        audio_dim=audio_dim, text_dim=text_dim, T=config.T, beta_start=config.beta_start,
        beta_end=config.beta_end, mouth_indices=list(layout.mouth_indices),
        zero_conditions=config.zero_conditions,
    )


def _emit(log, record):
    if log is None:
        return
    line = json.dumps(record)
    if callable(log):
        log(line)
    else:
        log.write(line + "\n")


def train_model(clips, config, stats=None, layout=DEFAULT_LAYOUT, log=None, checkpoint_dir=None,
                vocab=PHONEME_VOCAB):
    """Train one denoiser on in-memory clips. Returns ``(model, report)``.

    ``stats`` are 70-dim normalization stats (fit on ``clips`` if omitted).
    ``log`` is a text stream or a callable receiving one JSON line per step.
    """
    if not clips:
        raise ValueError("cannot train on an empty dataset")
    kind = config.kind
    if stats is None:
        stats = NormalizationStats.fit([c.motion for c in clips])
    kstats = stats.for_kind(kind, layout)
    dims = (clips[0].audio_feats.shape[1], clips[0].text_embedding.shape[0], vocab)
    model = init_model(model_config_for(config, dims, layout), seed=config.seed, stats=kstats)
    schedule = model.schedule
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    report = TrainReport()
    t_start = time.perf_counter()

    for step in range(1, config.steps + 1):
        t_step = time.perf_counter()
        x0s, conds = [], []
        for _ in range(config.batch_size):
            clip = clips[int(rng.integers(0, len(clips)))]
            motion, cond = sample_training_window(clip, config.window, rng)
            x0s.append(normalize(slice_motion(motion, kind, layout), kstats))
            conds.append(kind_bundle(cond, kind, stats, layout))
        x0 = np.stack(x0s)
        cond = stack_bundles(conds)
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample(x0, t, eps, schedule)

        opt.zero_grad()
        pred = model.predict(x_t, t, cond)
        loss, terms = compose_loss(kind, x0, pred, config.lam)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericsError(f"non-finite loss {value} at step {step}")
        backward(loss, params)
        opt.step()

        report.losses.append(value)
        report.l_diff.append(terms["l_diff"])
        if "l_first" in terms:
            report.l_first.append(terms["l_first"])
        _emit(log, {"step": step, "loss": value, **terms,
                    "wall_ms": round((time.perf_counter() - t_step) * 1000, 3)})
        if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"{kind}_step{step:06d}.tmdm"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_model(model, path)
            report.checkpoints.append(str(path))

    report.wall_time = time.perf_counter() - t_start
    return model, report

