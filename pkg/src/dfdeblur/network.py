"""Shared-encoder, two-decoder network and its binary checkpoint format.

The encoder downsamples five times with stride-2 4x4 convolutions; each
stage follows its downsampler with densely connected 3x3 convolutions
(every layer sees the concatenation of all earlier features of the stage).
Two mirror-image decoders, one per task, upsample with stride-2 4x4
transposed convolutions and fuse skip connections from the encoder. The
restoration head additionally concatenates the network input right before
its final projection so fine image detail bypasses the bottleneck. Every
convolution except the two linear output projections is followed by batch
norm and relu.

Checkpoints are a flat named-tensor container: magic "2HDE", a version,
and per tensor its name, element type, shape, and raw little-endian data.
Parameters and batch-norm running statistics round-trip bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, ShapeMismatchError, Tensor

__all__ = [
    "ModelConfig",
    "Model",
    "BadCheckpointError",
    "build_model",
    "encode",
    "decode",
    "forward",
    "count_params",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"2HDE"
CHECKPOINT_VERSION = 1

_HEAD_NAMES = ("depth", "aif")


class BadCheckpointError(Exception):
    """Checkpoint bytes are malformed or do not match the model."""


@dataclass(frozen=True)
class ModelConfig:
    """Network geometry; `width_scale` shrinks every stage uniformly."""

    input_channels: int = 3
    base_channels: tuple[int, int, int, int, int] = (64, 128, 256, 512, 1024)
    width_scale: float = 1.0
    dense_block_layers: int = 2
    use_skips: bool = True

    def __post_init__(self):
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be positive, got {self.input_channels}")
        if len(self.base_channels) != 5:
            raise ValueError(
                f"base_channels must list five stages, got {self.base_channels}"
            )
        if self.width_scale <= 0:
            raise ValueError(f"width_scale must be positive, got {self.width_scale}")
        if self.dense_block_layers < 0:
            raise ValueError(
                f"dense_block_layers must be non-negative, got {self.dense_block_layers}"
            )
        if any(c < 1 for c in self.scaled_channels()):
            raise ValueError(
                f"width_scale {self.width_scale} collapses a stage below one channel"
            )

    def scaled_channels(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.width_scale)) for c in self.base_channels)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "base_channels": list(self.base_channels),
            "width_scale": self.width_scale,
            "dense_block_layers": self.dense_block_layers,
            "use_skips": self.use_skips,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_channels=int(d["input_channels"]),
            base_channels=tuple(int(c) for c in d["base_channels"]),
            width_scale=float(d["width_scale"]),
            dense_block_layers=int(d["dense_block_layers"]),
            use_skips=bool(d["use_skips"]),
        )


class _Registry:
    """Name-keyed stores for trainable tensors and batch-norm statistics."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, BatchNormStats] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def norm_stats(self, name: str, channels: int) -> BatchNormStats:
        if name in self.stats:
            raise ValueError(f"duplicate norm name {name!r}")
        s = BatchNormStats(channels, dtype=self.dtype)
        self.stats[name] = s
        return s


class _Conv:
    def __init__(self, reg, name, c_in, c_out, k, stride, padding, rng, transposed=False):
        std = math.sqrt(2.0 / (c_in * k * k))
        shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
        self.weight = reg.param(f"{name}.weight", rng.normal(0.0, std, shape))
        self.bias = reg.param(f"{name}.bias", np.zeros(c_out))
        self.stride = stride
        self.padding = padding
        self.transposed = transposed

    def __call__(self, x: Tensor) -> Tensor:
        op = ad.conv_transpose2d if self.transposed else ad.conv2d
        return op(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class _ConvBlock:
    """Convolution, batch norm, relu."""

    def __init__(self, reg, name, c_in, c_out, k, stride, padding, rng, transposed=False):
        self.conv = _Conv(reg, f"{name}.conv", c_in, c_out, k, stride, padding, rng,
                          transposed)
        self.gamma = reg.param(f"{name}.norm.gamma", np.ones(c_out))
        self.beta = reg.param(f"{name}.norm.beta", np.zeros(c_out))
        self.stats = reg.norm_stats(f"{name}.norm", c_out)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(x)
        y = ad.batch_norm2d(y, self.gamma, self.beta, training, self.stats)
        return ad.relu(y)


class _EncoderStage:
    """Stride-2 downsampler followed by densely connected 3x3 layers."""

    def __init__(self, reg, name, c_in, c_out, layers, rng):
        self.down = _ConvBlock(reg, f"{name}.down", c_in, c_out, 4, 2, 1, rng)
        self.dense = [
            _ConvBlock(reg, f"{name}.dense{j}", (j + 1) * c_out, c_out, 3, 1, 1, rng)
            for j in range(layers)
        ]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        feats = [self.down(x, training)]
        for block in self.dense:
            stacked = feats[0]
            for f in feats[1:]:
                stacked = ad.concat_channels(stacked, f)
            feats.append(block(stacked, training))
        return feats[-1]


class _DecoderHead:
    """Bottleneck conv, four skip-fused upsampling stages, output projection.

    The restoration head (`joint=True`) concatenates the network input with
    the final feature map before projecting, so its projection sees
    c1 + input_channels channels.
    """

    def __init__(self, reg, name, config: ModelConfig, rng, out_channels, joint):
        c1, c2, c3, c4, c5 = config.scaled_channels()
        skip_mul = 2 if config.use_skips else 1
        self.joint = joint
        self.bottleneck = _ConvBlock(reg, f"{name}.bottleneck", c5, c5, 3, 1, 1, rng)
        self.up = []
        self.fuse = []
        for idx, (c_prev, c_cur) in enumerate(((c5, c4), (c4, c3), (c3, c2), (c2, c1))):
            stage = 4 - idx
            self.up.append(
                _ConvBlock(reg, f"{name}.up{stage}", c_prev, c_cur, 4, 2, 1, rng,
                           transposed=True)
            )
            self.fuse.append(
                _ConvBlock(reg, f"{name}.fuse{stage}", skip_mul * c_cur, c_cur, 3, 1, 1, rng)
            )
        self.up0 = _ConvBlock(reg, f"{name}.up0", c1, c1, 4, 2, 1, rng, transposed=True)
        pred_in = c1 + (config.input_channels if joint else 0)
        self.pred = _Conv(reg, f"{name}.pred", pred_in, out_channels, 3, 1, 1, rng)

    def __call__(self, feats, x_input, training, use_skips):
        y = self.bottleneck(feats[4], training)
        for i, (up, fuse) in enumerate(zip(self.up, self.fuse)):
            y = up(y, training)
            if use_skips:
                y = ad.concat_channels(y, feats[3 - i])
            y = fuse(y, training)
        y = self.up0(y, training)
        if self.joint:
            y = ad.concat_channels(y, x_input)
        return self.pred(y)


class Model:
    """Shared encoder with one decoder head per requested task."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 heads: tuple[str, ...] = _HEAD_NAMES, dtype=np.float32):
        for h in heads:
            if h not in _HEAD_NAMES:
                raise ValueError(f"unknown head {h!r}; expected subset of {_HEAD_NAMES}")
        if not heads:
            raise ValueError("model needs at least one head")
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0x6E657477])
        reg = _Registry(dtype)
        channels = config.scaled_channels()
        ins = (config.input_channels,) + channels[:-1]
        self.encoder = [
            _EncoderStage(reg, f"encoder.stage{i + 1}", ins[i], channels[i],
                          config.dense_block_layers, rng)
            for i in range(5)
        ]
        self.heads: dict[str, _DecoderHead] = {}
        if "depth" in heads:
            self.heads["depth"] = _DecoderHead(reg, "depth", config, rng, 1, joint=False)
        if "aif" in heads:
            self.heads["aif"] = _DecoderHead(reg, "aif", config, rng, 3, joint=True)
        self.params = reg.params
        self.norm_stats = reg.stats
        self.dtype = dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, stats in self.norm_stats.items():
            out[f"{name}.running_mean"] = stats.mean
            out[f"{name}.running_var"] = stats.var
        return out


def build_model(config: ModelConfig, seed: int = 0,
                heads: tuple[str, ...] = _HEAD_NAMES) -> Model:
    return Model(config, seed, heads)


def count_params(model: Model) -> int:
    return sum(t.data.size for t in model.params.values())


def _check_input(model: Model, x: Tensor) -> None:
    if len(x.shape) != 4 or x.shape[1] != model.config.input_channels:
        raise ShapeMismatchError(
            f"expected input [N,{model.config.input_channels},H,W], got {x.shape}"
        )
    n, _, h, w = x.shape
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ShapeMismatchError(
            f"input extent {h}x{w} must be a positive multiple of 32 "
            f"(five stride-2 stages)"
        )
    if x.dtype != np.dtype(model.dtype):
        raise TypeError(f"input dtype {x.dtype} does not match model dtype {np.dtype(model.dtype)}")


def encode(model: Model, x: Tensor, training: bool) -> list[Tensor]:
    """Five feature maps at 1/2 .. 1/32 resolution, one per stage."""
    _check_input(model, x)
    feats = []
    y = x
    for stage in model.encoder:
        y = stage(y, training)
        feats.append(y)
    return feats


def decode(model: Model, head: str, feats, x: Tensor, training: bool) -> Tensor:
    if head not in model.heads:
        raise ValueError(f"model has no {head!r} head; available: {tuple(model.heads)}")
    return model.heads[head](feats, x, training, model.config.use_skips)


def forward(model: Model, x: Tensor, training: bool,
            heads: tuple[str, ...] | None = None) -> dict[str, Tensor]:
    """Encode once, decode every requested head."""
    feats = encode(model, x, training)
    selected = tuple(model.heads) if heads is None else heads
    return {h: decode(model, h, feats, x, training) for h in selected}


# ---------------------------------------------------------------------------
# checkpoint serialization

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _named_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in model.params.items()}
    out.update(model.named_buffers())
    return out


def save_checkpoint(model: Model, path) -> None:
    """Write every parameter and running statistic, sorted by name."""
    tensors = _named_tensors(model)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise BadCheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise BadCheckpointError(
                f"truncated checkpoint: wanted {n} byte(s) at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into a name -> array dict, validating the layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadCheckpointError(
            f"bad magic {magic!r}; expected {CHECKPOINT_MAGIC!r}"
        )
    version, count = struct.unpack("<II", r.take(8))
    if version != CHECKPOINT_VERSION:
        raise BadCheckpointError(
            f"unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}"
        )
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        if name in tensors:
            raise BadCheckpointError(f"duplicate tensor name {name!r}")
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag not in _TAG_DTYPES:
            raise BadCheckpointError(f"tensor {name!r} has unknown element tag {tag}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(shape)
        tensors[name] = data.copy()
    if r.pos != len(blob):
        raise BadCheckpointError(
            f"{len(blob) - r.pos} trailing byte(s) after {count} tensor(s)"
        )
    return tensors


def load_checkpoint(model: Model, path) -> None:
    """Restore a model in place; names and shapes must match exactly."""
    tensors = read_checkpoint(path)
    expected = _named_tensors(model)
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise BadCheckpointError(
            f"checkpoint does not match model: missing {missing or 'none'}, "
            f"unexpected {unexpected or 'none'}"
        )
    for name, arr in tensors.items():
        target = expected[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise BadCheckpointError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(target.shape)}"
            )
        if arr.dtype != target.dtype:
            raise BadCheckpointError(
                f"tensor {name!r} has dtype {arr.dtype}, model expects {target.dtype}"
            )
        target[...] = arr
