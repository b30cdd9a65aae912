"""Encoders for the four conditioning signals and the cross-attention memory.

Per-frame speech features and phoneme tokens go through small trainable
transformer encoders; the transcript embedding (computed elsewhere by a
pretrained text encoder) is projected; the first motion frame goes through a
two-layer MLP. The diffusion step is embedded as one extra memory token.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .layers import encoder_block, linear, norm, sinusoidal
from .tensor import Tensor, concat, embedding, reshape, tanh

PHONEME_VOCAB = 41  # 39 ARPAbet phonemes + silence + padding
PAD_TOKEN = 0
SILENCE_TOKEN = 1
SEGMENTS = ("audio", "phoneme", "text", "first_frame", "timestep")


@dataclass
class ConditionBundle:
    """Conditioning for one clip window, or a batch of windows (leading axis).

    audio_feats (..., N, D_a), phonemes (..., N) ints, text_embedding (..., D_s),
    first_frame (..., d) in the model's normalized units.
    """

    audio_feats: np.ndarray
    phonemes: np.ndarray
    text_embedding: np.ndarray
    first_frame: np.ndarray

    def __post_init__(self):
        self.audio_feats = np.asarray(self.audio_feats, dtype=np.float64)
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float64)
        self.first_frame = np.asarray(self.first_frame, dtype=np.float64)
        if self.audio_feats.shape[:-1] != self.phonemes.shape:
            raise ValueError(
                f"audio features cover {self.audio_feats.shape[:-1]} frames but phonemes {self.phonemes.shape}")

    @property
    def frames(self):
        return self.phonemes.shape[-1]

    @property
    def is_batched(self):
        return self.phonemes.ndim == 2

    def batched(self):
        if self.is_batched:
            return self
        return ConditionBundle(self.audio_feats[None], self.phonemes[None],
                               self.text_embedding[None], self.first_frame[None])

    def validate(self, vocab, audio_dim, text_dim, motion_dim):
        if self.phonemes.size and (self.phonemes.min() < 0 or self.phonemes.max() >= vocab):
            raise ValueError(f"phoneme ids must lie in [0, {vocab})")
        if self.audio_feats.shape[-1] != audio_dim:
            raise ValueError(f"audio feature dim {self.audio_feats.shape[-1]} != {audio_dim}")
        if self.text_embedding.shape[-1] != text_dim:
            raise ValueError(f"text embedding dim {self.text_embedding.shape[-1]} != {text_dim}")
        if self.first_frame.shape[-1] != motion_dim:
            raise ValueError(f"first frame dim {self.first_frame.shape[-1]} != {motion_dim}")
        if not (np.all(np.isfinite(self.audio_feats)) and np.all(np.isfinite(self.text_embedding))
                and np.all(np.isfinite(self.first_frame))):
            raise ValueError("conditioning contains non-finite values")

    def zeros_like(self):
        """Same shapes with every signal zeroed (phonemes become padding)."""
        return ConditionBundle(np.zeros_like(self.audio_feats), np.zeros_like(self.phonemes),
                               np.zeros_like(self.text_embedding), np.zeros_like(self.first_frame))


def stack_bundles(bundles):
    return ConditionBundle(
        np.stack([b.audio_feats for b in bundles]),
        np.stack([b.phonemes for b in bundles]),
        np.stack([b.text_embedding for b in bundles]),
        np.stack([b.first_frame for b in bundles]),
    )


class EncodedConditions(NamedTuple):
    audio: Tensor
    phoneme: Tensor
    text: Tensor
    first_frame: Tensor


@dataclass
class ConditionMemory:
    tokens: Tensor  # (B, M, H)
    segments: tuple  # ((label, start, stop), ...)

    @property
    def labels(self):
        out = []
        for label, lo, hi in self.segments:
            out.extend([label] * (hi - lo))
        return out


def init_condition_params(builder, width, vocab, audio_dim, text_dim, motion_dim, enc_layers):
    builder.linear("audio.proj", audio_dim, width)
    for i in range(enc_layers):
        builder.encoder_block(f"audio.blocks.{i}", width)
    builder.norm("audio.ln_out", width)
    builder.normal("phoneme.embed", (vocab, width))
    for i in range(enc_layers):
        builder.encoder_block(f"phoneme.blocks.{i}", width)
    builder.norm("phoneme.ln_out", width)
    builder.linear("text.proj", text_dim, width)
    builder.linear("first.fc1", motion_dim, width)
    builder.linear("first.fc2", width, width)
    builder.linear("step.proj", width, width)


def _encode_sequence(p, prefix, h, heads, enc_layers):
    n = h.shape[-2]
    h = h + sinusoidal(np.arange(n), h.shape[-1])
    for i in range(enc_layers):
        h = encoder_block(p, f"{prefix}.blocks.{i}", h, heads)
    return norm(p, f"{prefix}.ln_out", h)


def encode_audio_features(p, audio_feats, heads, enc_layers):
    """(B, N, D_a) speech features -> (B, N, H) tokens."""
    a = np.asarray(audio_feats, dtype=np.float64)
    if a.shape[-1] != p["audio.proj.w"].shape[0]:
        raise ValueError(f"audio feature dim {a.shape[-1]} != configured {p['audio.proj.w'].shape[0]}")
    return _encode_sequence(p, "audio", linear(p, "audio.proj", Tensor(a)), heads, enc_layers)


def encode_phonemes(p, phonemes, heads, enc_layers):
    """(B, N) token ids -> (B, N, H) tokens."""
    ids = np.asarray(phonemes, dtype=np.int64)
    vocab = p["phoneme.embed"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"phoneme id out of vocabulary [0, {vocab})")
    return _encode_sequence(p, "phoneme", embedding(p["phoneme.embed"], ids), heads, enc_layers)


def encode_text_embedding(p, text_embedding):
    """(B, D_s) precomputed transcript embedding -> (B, 1, H)."""
    s = np.asarray(text_embedding, dtype=np.float64)
    if s.shape[-1] != p["text.proj.w"].shape[0]:
        raise ValueError(f"text embedding dim {s.shape[-1]} != configured {p['text.proj.w'].shape[0]}")
    out = linear(p, "text.proj", Tensor(s))
    return reshape(out, (s.shape[0], 1, out.shape[-1]))


def encode_first_frame(p, first_frame):
    """(B, d) first motion frame -> (B, 1, H) via a tanh MLP."""
    x = np.asarray(first_frame, dtype=np.float64)
    if x.shape[-1] != p["first.fc1.w"].shape[0]:
        raise ValueError(f"first frame dim {x.shape[-1]} != configured {p['first.fc1.w'].shape[0]}")
    out = linear(p, "first.fc2", tanh(linear(p, "first.fc1", Tensor(x))))
    return reshape(out, (x.shape[0], 1, out.shape[-1]))


def encode_timestep(p, t):
    """(B,) integer steps -> (B, 1, H)."""
    t = np.atleast_1d(np.asarray(t))
    width = p["step.proj.w"].shape[0]
    out = linear(p, "step.proj", Tensor(sinusoidal(t, width)))
    return reshape(out, (t.shape[0], 1, width))


def encode_conditions(p, cond, heads, enc_layers):
    cond = cond.batched()
    return EncodedConditions(
        encode_audio_features(p, cond.audio_feats, heads, enc_layers),
        encode_phonemes(p, cond.phonemes, heads, enc_layers),
        encode_text_embedding(p, cond.text_embedding),
        encode_first_frame(p, cond.first_frame),
    )


def memory_from_encoded(p, enc, t):
    """Concatenate [audio; phoneme; text; first frame; step] along the token axis."""
    step = encode_timestep(p, t)
    if step.shape[0] != enc.audio.shape[0]:
        if step.shape[0] != 1:
            raise ValueError("need one step per batch entry")
        step = concat([step] * enc.audio.shape[0], axis=0)
    parts = [enc.audio, enc.phoneme, enc.text, enc.first_frame, step]
    segments, start = [], 0
    for label, part in zip(SEGMENTS, parts):
        segments.append((label, start, start + part.shape[1]))
        start += part.shape[1]
    return ConditionMemory(concat(parts, axis=1), tuple(segments))


def assemble_memory(p, cond, t, heads, enc_layers):
    return memory_from_encoded(p, encode_conditions(p, cond, heads, enc_layers), t)
