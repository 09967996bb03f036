"""Volumes, the strided-convolution tokenizer, and the lightweight decoder.

A volume enters the model through a single convolution with kernel size and
stride both equal to the token patch size k, producing one d-dimensional
token per non-overlapping k^3 patch.  The decoder inverts the tokenization
with log2(k) TPConv-Norm-Act stages followed by a 1x1x1 convolution to
per-voxel class scores.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .numerics import Tensor

PVL_MAGIC = b"PVL1"
PVL_VERSION = 1
_PVL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}


@dataclass
class Volume:
    """Dense 3D grid: image (float, any channel count) or labels (uint16, one channel)."""

    data: np.ndarray  # (channels, z, y, x)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"volume data must be (channels, z, y, x), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"volume dimensions must all be >= 1, got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def is_label(self) -> bool:
        return self.data.dtype.kind in "ui"


def write_volume(path, vol: Volume) -> None:
    """Serialize a volume in the PVL1 binary format."""
    dtype_code = 1 if vol.is_label else 0
    arr = np.ascontiguousarray(vol.data.astype(_PVL_DTYPES[dtype_code]))
    c, z, y, x = vol.data.shape
    with open(path, "wb") as fh:
        fh.write(PVL_MAGIC)
        fh.write(struct.pack("<6I", PVL_VERSION, c, z, y, x, dtype_code))
        fh.write(arr.tobytes(order="C"))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PVL_MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}, expected {PVL_MAGIC!r}")
        version, c, z, y, x, dtype_code = struct.unpack("<6I", fh.read(24))
        if version != PVL_VERSION:
            raise ConfigError(f"{path}: unsupported PVL version {version}")
        if dtype_code not in _PVL_DTYPES:
            raise ConfigError(f"{path}: unknown dtype code {dtype_code}")
        dt = _PVL_DTYPES[dtype_code]
        count = c * z * y * x
        raw = fh.read(count * dt.itemsize)
    data = np.frombuffer(raw, dtype=dt, count=count).reshape(c, z, y, x)
    return Volume(data=data.copy())


@dataclass
class TokenSequence:
    """Grid-ordered visual tokens with their integer grid coordinates.

    ``tokens`` is batched (b, n, d).  Spatial tokens come first in row-major
    (z, y, x) order; register tokens, when present, sit at the end and carry
    the sentinel coordinate (-1, -1, -1).
    """

    tokens: Tensor
    grid: tuple[int, int, int]
    coords: np.ndarray  # (n, 3) int

    def __post_init__(self):
        if self.tokens.data.ndim != 3:
            raise ShapeError(f"token tensor must be (batch, n, d), got {self.tokens.shape}")
        if self.coords.shape != (self.tokens.shape[1], 3):
            raise ShapeError(
                f"coords shape {self.coords.shape} does not match sequence length {self.tokens.shape[1]}"
            )

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_spatial(self) -> int:
        return int(np.prod(self.grid))

    @property
    def n_registers(self) -> int:
        return self.length - self.n_spatial

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens=tokens, grid=self.grid, coords=self.coords)

    def strip_registers(self) -> "TokenSequence":
        n = self.n_spatial
        if self.length == n:
            return self
        return TokenSequence(tokens=self.tokens[:, :n, :], grid=self.grid, coords=self.coords[:n])


def grid_coords(grid: tuple[int, int, int]) -> np.ndarray:
    """Row-major (z, then y, then x) enumeration of token grid coordinates."""
    gz, gy, gx = grid
    zz, yy, xx = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1).astype(np.int64)


@dataclass
class PatchEmbedWeights:
    w: Tensor  # (d, c, k, k, k)
    b: Tensor  # (d,)

    @property
    def patch_size(self) -> int:
        return self.w.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]


def init_patch_embed(rng: np.random.Generator, in_channels: int, embed_dim: int, k: int, dtype=np.float32):
    w = Tensor(rng.normal(0.0, 0.02, size=(embed_dim, in_channels, k, k, k)), dtype=dtype, requires_grad=True)
    b = Tensor(np.zeros(embed_dim), dtype=dtype, requires_grad=True)
    return PatchEmbedWeights(w=w, b=b)


def tokenize(x: Tensor, weights: PatchEmbedWeights) -> TokenSequence:
    """Embed a (b, c, Z, Y, X) batch into grid-ordered tokens."""
    k = weights.patch_size
    if x.data.ndim != 5:
        raise ShapeError(f"tokenize expects (batch, channels, z, y, x), got {x.shape}")
    if x.shape[1] != weights.in_channels:
        raise ShapeError(f"tokenize channel mismatch: input {x.shape} vs weights expect {weights.in_channels}")
    dims = x.shape[2:]
    if any(d % k for d in dims):
        padded = tuple(-(-d // k) * k for d in dims)
        raise ShapeError(
            f"spatial dims {tuple(dims)} not divisible by patch size {k}; pad the volume to {padded}"
        )
    grid = tuple(d // k for d in dims)
    out = nm.conv3d(x, weights.w, weights.b, stride=k)  # (b, d, gz, gy, gx)
    b, d = out.shape[:2]
    tokens = nm.transpose(nm.reshape(out, (b, d, -1)), (0, 2, 1))
    return TokenSequence(tokens=tokens, grid=grid, coords=grid_coords(grid))


def default_decoder_schedule(embed_dim: int, k: int, min_width: int = 8) -> list[int]:
    """Per-stage output widths: d/8, d/16, ... with a floor, one stage per halving of k."""
    n_stages = int(round(np.log2(k)))
    if 2**n_stages != k or n_stages < 1:
        raise ConfigError(f"patch size {k} is not a power of two >= 2; decoder cannot invert it")
    return [max(min_width, embed_dim // (8 * 2**i)) for i in range(n_stages)]


@dataclass
class DecoderStage:
    w: Tensor  # (c_in, c_out, 2, 2, 2)
    b: Tensor  # (c_out,)
    gamma: Tensor
    beta: Tensor


@dataclass
class DecoderWeights:
    stages: list[DecoderStage]
    head_w: Tensor  # (num_classes, c_last, 1, 1, 1)
    head_b: Tensor
    patch_size: int
    use_norm: bool = True

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]


def init_decoder(
    rng: np.random.Generator,
    embed_dim: int,
    k: int,
    num_classes: int,
    schedule: list[int] | None = None,
    use_norm: bool = True,
    dtype=np.float32,
) -> DecoderWeights:
    if schedule is None:
        schedule = default_decoder_schedule(embed_dim, k)
    if 2 ** len(schedule) != k:
        raise ConfigError(
            f"decoder stage strides multiply to {2 ** len(schedule)} but patch size is {k}"
        )
    stages = []
    c_in = embed_dim
    for c_out in schedule:
        stages.append(
            DecoderStage(
                w=Tensor(rng.normal(0.0, 0.02, size=(c_in, c_out, 2, 2, 2)), dtype=dtype, requires_grad=True),
                b=Tensor(np.zeros(c_out), dtype=dtype, requires_grad=True),
                gamma=Tensor(np.ones(c_out), dtype=dtype, requires_grad=True),
                beta=Tensor(np.zeros(c_out), dtype=dtype, requires_grad=True),
            )
        )
        c_in = c_out
    head_w = Tensor(rng.normal(0.0, 0.02, size=(num_classes, c_in, 1, 1, 1)), dtype=dtype, requires_grad=True)
    head_b = Tensor(np.zeros(num_classes), dtype=dtype, requires_grad=True)
    return DecoderWeights(stages=stages, head_w=head_w, head_b=head_b, patch_size=k, use_norm=use_norm)


def _channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    # layer_norm acts on the last axis; move channels there and back
    t = nm.transpose(x, (0, 2, 3, 4, 1))
    t = nm.layer_norm(t, gamma, beta)
    return nm.transpose(t, (0, 4, 1, 2, 3))


def decode(seq: TokenSequence, weights: DecoderWeights, num_classes: int | None = None) -> Tensor:
    """Project tokens back to a full-resolution (b, num_classes, Z, Y, X) score grid."""
    if seq.n_registers:
        raise ShapeError(f"decode expects register tokens stripped, sequence still has {seq.n_registers}")
    if num_classes is not None and num_classes != weights.num_classes:
        raise ConfigError(f"decoder produces {weights.num_classes} classes, caller expected {num_classes}")
    if 2 ** len(weights.stages) != weights.patch_size:
        raise ConfigError(
            f"decoder stage strides multiply to {2 ** len(weights.stages)} but patch size is {weights.patch_size}"
        )
    b = seq.tokens.shape[0]
    gz, gy, gx = seq.grid
    x = nm.reshape(nm.transpose(seq.tokens, (0, 2, 1)), (b, seq.embed_dim, gz, gy, gx))
    for stage in weights.stages:
        x = nm.conv_transpose3d(x, stage.w, stage.b, stride=2)
        if weights.use_norm:
            x = _channel_layer_norm(x, stage.gamma, stage.beta)
        x = nm.gelu(x)
    return nm.conv3d(x, weights.head_w, weights.head_b, stride=1)


def volume_batch(vols: list[Volume] | Volume, dtype=np.float32) -> Tensor:
    """Stack volumes into a (b, c, z, y, x) input tensor."""
    if isinstance(vols, Volume):
        vols = [vols]
    dims = vols[0].data.shape
    for v in vols:
        if v.data.shape != dims:
            raise ShapeError(f"volumes in a batch must share shape, got {dims} and {v.data.shape}")
    return Tensor(np.stack([v.data for v in vols]), dtype=dtype)
