"""Positional information: learnable absolute embeddings and 3D rotary embeddings.

The rotary scheme splits each head vector into three equal contiguous chunks,
one per (z, y, x) axis.  Within a chunk, consecutive pairs (x_2j, x_2j+1) are
rotated by angle (p_axis / fov) * theta_j with theta_j = base^(-2j / (head_dim/3)).
Rotations preserve norms, so attention logits depend only on relative
coordinates.  Register tokens carry the sentinel coordinate (-1, -1, -1) and
are rotated by a zero angle, i.e. left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .numerics import Tensor
from .tokenizer import TokenSequence

REGISTER_COORD = -1


@dataclass
class LearnablePE:
    """One learned d-vector per token grid position, added before block 0."""

    table: Tensor  # (gz*gy*gx, d)
    grid: tuple[int, int, int]
    register_table: Tensor | None = None

    def __post_init__(self):
        if self.table.shape[0] != int(np.prod(self.grid)):
            raise ShapeError(f"PE table length {self.table.shape[0]} does not match grid {self.grid}")


def init_learnable_pe(
    rng: np.random.Generator,
    grid: tuple[int, int, int],
    embed_dim: int,
    n_registers: int = 0,
    dtype=np.float32,
) -> LearnablePE:
    n = int(np.prod(grid))
    table = Tensor(rng.normal(0.0, 0.02, size=(n, embed_dim)), dtype=dtype, requires_grad=True)
    reg = None
    if n_registers:
        reg = Tensor(rng.normal(0.0, 0.02, size=(n_registers, embed_dim)), dtype=dtype, requires_grad=True)
    return LearnablePE(table=table, grid=grid, register_table=reg)


def add_learnable_pe(seq: TokenSequence, pe: LearnablePE) -> TokenSequence:
    if seq.grid != tuple(pe.grid):
        raise ShapeError(f"PE grid {tuple(pe.grid)} does not match sequence grid {seq.grid}")
    if seq.length == seq.n_spatial:
        table = pe.table
    else:
        if pe.register_table is None or pe.register_table.shape[0] != seq.n_registers:
            raise ShapeError(
                f"sequence has {seq.n_registers} register tokens but PE has no matching register vectors"
            )
        table = nm.concat([pe.table, pe.register_table], axis=0)
    return seq.with_tokens(nm.add(seq.tokens, table))


@dataclass
class Rope3D:
    """Per-axis rotary frequency tables for one attention head size."""

    head_dim: int
    base: float = 10000.0
    fov: float = 1.0
    freqs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.head_dim % 6:
            raise ConfigError(f"rotary head_dim must be divisible by 6 (3 axes x pairs), got {self.head_dim}")
        if self.fov <= 0:
            raise ConfigError(f"rotary field-of-view fraction must be > 0, got {self.fov}")
        m = self.head_dim // 3
        j = np.arange(m // 2, dtype=np.float64)
        self.freqs = self.base ** (-2.0 * j / m)

    def angles(self, coords: np.ndarray) -> np.ndarray:
        """(n, 3, head_dim//6) rotation angles; sentinel coordinates give zero."""
        pos = np.asarray(coords, dtype=np.float64)
        pos = np.where(pos < 0, 0.0, pos)  # register tokens: zero angle
        return (pos / self.fov)[:, :, None] * self.freqs[None, None, :]


def apply_rope3d(x: Tensor, coords: np.ndarray, cfg: Rope3D) -> Tensor:
    """Rotate per-head vectors (..., n, head_dim) by their token coordinates."""
    hd = x.shape[-1]
    n = x.shape[-2]
    if hd != cfg.head_dim:
        raise ShapeError(f"head dim {hd} does not match rotary tables built for {cfg.head_dim}")
    if coords.shape != (n, 3):
        raise ShapeError(f"coords shape {coords.shape} does not match sequence length {n}")
    ang = cfg.angles(coords)  # (n, 3, J)
    cos = Tensor(np.cos(ang), dtype=x.data.dtype)
    sin = Tensor(np.sin(ang), dtype=x.data.dtype)
    j = hd // 6
    pairs = nm.reshape(x, x.shape[:-1] + (3, j, 2))
    a = pairs[..., 0]  # (..., n, 3, J)
    b = pairs[..., 1]
    ra = nm.sub(nm.mul(a, cos), nm.mul(b, sin))
    rb = nm.add(nm.mul(a, sin), nm.mul(b, cos))
    stacked = nm.concat(
        [nm.reshape(ra, ra.shape + (1,)), nm.reshape(rb, rb.shape + (1,))], axis=-1
    )
    return nm.reshape(stacked, x.shape)
