"""Conditional motion transformer that predicts the clean motion x0.

Noised motion frames are projected to the model width, get sinusoidal
positions, and pass through pre-norm decoder blocks of
[self-attention, cross-attention to the condition memory, feed-forward].
Every attention layer is the factorized efficient attention.
"""

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import conditioning as C
from .diffusion import make_schedule
from .errors import FormatError, IntegrityError
from .layers import ParamBuilder, decoder_block, efficient_attention, linear, norm, sinusoidal
from .motion import DEFAULT_LAYOUT, KIND_DIMS, NormalizationStats, ParameterLayout, check_kind
from .tensor import Tensor, as_tensor

MAGIC = b"TMDM"
FORMAT_VERSION = 1


@dataclass
class DenoiserConfig:
    kind: str = "lips"
    d: int = 0
    width: int = 32
    layers: int = 2
    heads: int = 4
    enc_layers: int = 2
    max_frames: int = 256
    vocab: int = C.PHONEME_VOCAB
    audio_dim: int = 32
    text_dim: int = 64
    T: int = 50
    beta_start: float = 2e-3
    beta_end: float = 0.4
    mouth_indices: list = field(default_factory=lambda: list(DEFAULT_LAYOUT.mouth_indices))
    zero_init_output: bool = True
    zero_conditions: bool = False  # unconditional baseline: every condition is replaced by zeros

    def __post_init__(self):
        check_kind(self.kind)
        if self.d == 0:
            self.d = KIND_DIMS[self.kind]
        if self.d != KIND_DIMS[self.kind]:
            raise ValueError(f"{self.kind} model needs d={KIND_DIMS[self.kind]}, got {self.d}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        self.mouth_indices = [int(i) for i in self.mouth_indices]

    @property
    def layout(self):
        return ParameterLayout(tuple(self.mouth_indices))

    @property
    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class DenoiserModel:
    def __init__(self, config, params, stats=None):
        self.config = config
        self.params = params
        if stats is None:
            stats = NormalizationStats(np.zeros(config.d), np.ones(config.d))
        self.stats = stats

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self):
        return sorted(self.params.items())

    @property
    def schedule(self):
        return self.config.schedule

    def encode(self, cond):
        cfg = self.config
        cond = cond.batched()
        cond.validate(cfg.vocab, cfg.audio_dim, cfg.text_dim, cfg.d)
        if cfg.zero_conditions:
            cond = cond.zeros_like()
        return C.encode_conditions(self.params, cond, cfg.heads, cfg.enc_layers)

    def assemble(self, encoded, t):
        return C.memory_from_encoded(self.params, encoded, t)

    def memory(self, cond, t):
        return self.assemble(self.encode(cond), t)

    def forward(self, x_t, memory):
        return denoiser_forward(self.params, self.config, x_t, memory)

    def predict(self, x_t, t, cond):
        """x0 estimate for (B, N, d) noised motion at steps ``t`` (B,)."""
        return self.forward(x_t, self.memory(cond, t))


def init_params(config, rng):
    b = ParamBuilder(rng)
    C.init_condition_params(b, config.width, config.vocab, config.audio_dim, config.text_dim,
                            config.d, config.enc_layers)
    b.linear("dec.in", config.d, config.width)
    for i in range(config.layers):
        b.decoder_block(f"dec.blocks.{i}", config.width)
    b.norm("dec.ln_out", config.width)
    b.linear("dec.out", config.width, config.d, zero=config.zero_init_output)
    return b.params


def init_model(config, seed=0, stats=None):
    return DenoiserModel(config, init_params(config, np.random.default_rng(seed)), stats)


def denoiser_forward(p, config, x_t, memory):
    x = as_tensor(x_t)
    if x.ndim != 3 or x.shape[-1] != config.d:
        raise ValueError(f"x_t must be (B, N, {config.d}), got {x.shape}")
    n = x.shape[1]
    if n > config.max_frames:
        raise ValueError(f"sequence of {n} frames exceeds max_frames={config.max_frames}")
    h = linear(p, "dec.in", x) + sinusoidal(np.arange(n), config.width)
    for i in range(config.layers):
        h = decoder_block(p, f"dec.blocks.{i}", h, memory.tokens, config.heads)
    return linear(p, "dec.out", norm(p, "dec.ln_out", h))


def efficient_attention_array(q, k, v):
    """Array-level single-head efficient attention (no autodiff graph)."""
    return efficient_attention(Tensor(q), Tensor(k), Tensor(v)).data


# ---------------------------------------------------------------- serialization

def _tensor_table(model):
    table = {f"param/{k}": v.data for k, v in model.named_parameters()}
    table["stats/mean"] = model.stats.mean
    table["stats/std"] = model.stats.std
    return table


def model_to_bytes(model):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    table = _tensor_table(model)
    buf.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_model(model, path):
    data = model_to_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def model_from_bytes(data):
    if len(data) < 8 + 32 or data[:4] != MAGIC:
        raise FormatError("not a model file (bad magic bytes)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("model file checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    try:
        config = DenoiserConfig.from_dict(json.loads(body[pos:pos + n]))
    except (ValueError, TypeError) as exc:
        raise IntegrityError(f"bad config block: {exc}") from exc
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    table = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(body):
            raise IntegrityError(f"tensor {name} truncated")
        table[name] = np.frombuffer(body[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise IntegrityError("trailing bytes after tensor table")

    template = init_params(config, np.random.default_rng(0))
    params = {}
    for name, tmpl in template.items():
        arr = table.pop(f"param/{name}", None)
        if arr is None:
            raise IntegrityError(f"missing parameter {name}")
        if arr.shape != tmpl.shape:
            raise IntegrityError(f"parameter {name} has shape {arr.shape}, config implies {tmpl.shape}")
        tmpl.data = arr
        params[name] = tmpl
    try:
        stats = NormalizationStats(table.pop("stats/mean"), table.pop("stats/std"))
    except KeyError as exc:
        raise IntegrityError("missing normalization stats") from exc
    if stats.mean.shape != (config.d,):
        raise IntegrityError(f"stats have dim {stats.mean.shape}, config implies {config.d}")
    if table:
        raise IntegrityError(f"unexpected tensors: {sorted(table)}")
    return DenoiserModel(config, params, stats)


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
