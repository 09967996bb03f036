"""Primus blocks and model assembly.

Block wiring (pre-norm residual):

    x = x + DropPath(ls_attn * PAN(Attn(Norm(x))))
    x = x + DropPath(ls_mlp  * MLP(Norm(x)))

Attn is multi-head self-attention with 3D rotary embeddings applied to Q and
K (never V); MLP is the gated silu block with an inner normalization over the
hidden width.  Register tokens are appended after the learnable positional
embedding, skipped by the rotary rotation via their sentinel coordinate, and
stripped before decoding.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .numerics import Tensor
from .posenc import REGISTER_COORD, LearnablePE, Rope3D, add_learnable_pe, apply_rope3d, init_learnable_pe
from .tokenizer import (
    DecoderWeights,
    PatchEmbedWeights,
    TokenSequence,
    decode,
    default_decoder_schedule,
    init_decoder,
    init_patch_embed,
    tokenize,
)

PRESETS = {
    "primus-s": (12, 6, 396),
    "primus-b": (12, 12, 792),
    "primus-m": (16, 12, 864),
    "primus-l": (24, 16, 1056),
    "nano": (2, 4, 48),
}


@dataclass
class PrimusConfig:
    """Complete architecture description; the single source of truth."""

    layers: int
    heads: int
    embed_dim: int
    patch_size: int = 8
    input_patch: tuple[int, int, int] = (96, 96, 96)
    in_channels: int = 1
    num_classes: int = 2
    mlp_hidden: int | None = None  # resolved to 8d/3
    use_lpe: bool = True
    use_rope: bool = True
    rope_fov: float = 1.0
    rope_base: float = 10000.0
    layer_scale: bool = True
    layer_scale_init: float = 0.1
    post_attn_norm: bool = True
    drop_path: float = 0.2
    attn_dropout: float = 0.0
    proj_dropout: float = 0.0
    register_tokens: int = 0
    decoder_schedule: tuple[int, ...] | None = None
    decoder_norm: bool = True

    def __post_init__(self):
        self.input_patch = tuple(int(v) for v in self.input_patch)
        if self.mlp_hidden is None:
            self.mlp_hidden = (8 * self.embed_dim) // 3
        if self.decoder_schedule is None:
            self.decoder_schedule = tuple(default_decoder_schedule(self.embed_dim, self.patch_size))
        else:
            self.decoder_schedule = tuple(int(c) for c in self.decoder_schedule)
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(p // self.patch_size for p in self.input_patch)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid))

    def validate(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.embed_dim < 1:
            raise ConfigError("layers, heads and embed_dim must all be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.use_rope and self.head_dim % 6:
            raise ConfigError(
                f"head_dim {self.head_dim} must be divisible by 6 for 3D rotary embeddings"
            )
        if len(self.input_patch) != 3:
            raise ConfigError(f"input_patch must have 3 dims, got {self.input_patch}")
        if any(p % self.patch_size for p in self.input_patch):
            raise ConfigError(
                f"input_patch {self.input_patch} not divisible by patch size {self.patch_size}"
            )
        if 2 ** len(self.decoder_schedule) != self.patch_size:
            raise ConfigError(
                f"decoder stage strides multiply to {2 ** len(self.decoder_schedule)}"
                f" but patch size is {self.patch_size}"
            )
        if not 0.0 <= self.drop_path <= 1.0:
            raise ConfigError(f"drop_path rate must lie in [0, 1], got {self.drop_path}")
        for name in ("attn_dropout", "proj_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.rope_fov <= 0:
            raise ConfigError(f"rope_fov must be > 0, got {self.rope_fov}")
        if self.register_tokens < 0:
            raise ConfigError(f"register_tokens must be >= 0, got {self.register_tokens}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PrimusConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "PrimusConfig":
        key = name.lower()
        if key == "primus-nano":
            key = "nano"
        if key not in PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        layers, heads, dim = PRESETS[key]
        defaults = {"input_patch": (16, 16, 16)} if key == "nano" else {}
        defaults.update(overrides)
        return cls(layers=layers, heads=heads, embed_dim=dim, **defaults)


@dataclass
class BlockWeights:
    norm1_g: Tensor
    norm1_b: Tensor
    qkv_w: Tensor  # (d, 3d)
    qkv_b: Tensor
    proj_w: Tensor  # (d, d)
    proj_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    gate_w: Tensor  # (d, h)
    gate_b: Tensor
    val_w: Tensor  # (d, h)
    val_b: Tensor
    mlp_norm_g: Tensor
    mlp_norm_b: Tensor
    out_w: Tensor  # (h, d)
    out_b: Tensor
    pan_g: Tensor | None = None
    pan_b: Tensor | None = None
    ls_attn: Tensor | None = None
    ls_mlp: Tensor | None = None


def init_block(rng: np.random.Generator, cfg: PrimusConfig, dtype=np.float32) -> BlockWeights:
    d, h = cfg.embed_dim, cfg.mlp_hidden

    def lin(n_in, n_out):
        return Tensor(rng.normal(0.0, 0.02, size=(n_in, n_out)), dtype=dtype, requires_grad=True)

    def vec(n, value=0.0):
        return Tensor(np.full(n, value, dtype=np.float64), dtype=dtype, requires_grad=True)

    w = BlockWeights(
        norm1_g=vec(d, 1.0),
        norm1_b=vec(d),
        qkv_w=lin(d, 3 * d),
        qkv_b=vec(3 * d),
        proj_w=lin(d, d),
        proj_b=vec(d),
        norm2_g=vec(d, 1.0),
        norm2_b=vec(d),
        gate_w=lin(d, h),
        gate_b=vec(h),
        val_w=lin(d, h),
        val_b=vec(h),
        mlp_norm_g=vec(h, 1.0),
        mlp_norm_b=vec(h),
        out_w=lin(h, d),
        out_b=vec(d),
    )
    if cfg.post_attn_norm:
        w.pan_g = vec(d, 1.0)
        w.pan_b = vec(d)
    if cfg.layer_scale:
        w.ls_attn = vec(d, cfg.layer_scale_init)
        w.ls_mlp = vec(d, cfg.layer_scale_init)
    return w


def _dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> Tensor:
    keep = (rng.random(shape) >= rate).astype(np.float64) / (1.0 - rate)
    return Tensor(keep, dtype=dtype)


def drop_path(branch: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth with 1/(1-rate) rescaling of kept samples."""
    if not train or rate == 0.0:
        return branch
    if rate >= 1.0:
        # degenerate documented case: the whole branch is dropped
        return nm.mul(branch, 0.0)
    if rng is None:
        raise ConfigError("drop_path in train mode needs an rng")
    b = branch.shape[0]
    keep = (rng.random(b) >= rate).astype(np.float64) / (1.0 - rate)
    mask = Tensor(keep.reshape((b,) + (1,) * (branch.data.ndim - 1)), dtype=branch.data.dtype)
    return nm.mul(branch, mask)


def attention(
    seq: TokenSequence,
    w: BlockWeights,
    cfg: PrimusConfig,
    rope: Rope3D | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    """softmax(QK^T / sqrt(head_dim)) V with rotary embeddings on Q and K."""
    x = seq.tokens
    b, n, d = x.shape
    heads, hd = cfg.heads, cfg.head_dim
    qkv = nm.add(nm.matmul(x, w.qkv_w), w.qkv_b)
    qkv = nm.transpose(nm.reshape(qkv, (b, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # (b, heads, n, hd)
    if rope is not None:
        q = apply_rope3d(q, seq.coords, rope)
        k = apply_rope3d(k, seq.coords, rope)
    logits = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = nm.softmax(logits, axis=-1)
    if train and cfg.attn_dropout > 0.0:
        att = nm.mul(att, _dropout_mask(att.shape, cfg.attn_dropout, rng, x.data.dtype))
    out = nm.matmul(att, v)  # (b, heads, n, hd)
    out = nm.reshape(nm.transpose(out, (0, 2, 1, 3)), (b, n, d))
    out = nm.add(nm.matmul(out, w.proj_w), w.proj_b)
    if train and cfg.proj_dropout > 0.0:
        out = nm.mul(out, _dropout_mask(out.shape, cfg.proj_dropout, rng, x.data.dtype))
    return seq.with_tokens(out)


def eva02_mlp(x: Tensor, w: BlockWeights) -> Tensor:
    """Gated MLP: out = W_out . norm(silu(W_gate x) * (W_val x))."""
    gate = nm.add(nm.matmul(x, w.gate_w), w.gate_b)
    val = nm.add(nm.matmul(x, w.val_w), w.val_b)
    inner = nm.mul(nm.silu(gate), val)
    inner = nm.layer_norm(inner, w.mlp_norm_g, w.mlp_norm_b)
    return nm.add(nm.matmul(inner, w.out_w), w.out_b)


def primus_block(
    seq: TokenSequence,
    w: BlockWeights,
    cfg: PrimusConfig,
    rope: Rope3D | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    x = seq.tokens
    a = attention(seq.with_tokens(nm.layer_norm(x, w.norm1_g, w.norm1_b)), w, cfg, rope, train, rng).tokens
    if w.pan_g is not None:
        a = nm.layer_norm(a, w.pan_g, w.pan_b)
    if w.ls_attn is not None:
        a = nm.mul(a, w.ls_attn)
    x = nm.add(x, drop_path(a, cfg.drop_path, train, rng))
    m = eva02_mlp(nm.layer_norm(x, w.norm2_g, w.norm2_b), w)
    if w.ls_mlp is not None:
        m = nm.mul(m, w.ls_mlp)
    x = nm.add(x, drop_path(m, cfg.drop_path, train, rng))
    return seq.with_tokens(x)


class PrimusModel:
    """Tokenizer + positional embeddings + block stack + decoder."""

    def __init__(self, config: PrimusConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        config.validate()
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.patch = init_patch_embed(rng, config.in_channels, config.embed_dim, config.patch_size, dtype)
        self.lpe: LearnablePE | None = None
        if config.use_lpe:
            self.lpe = init_learnable_pe(rng, config.grid, config.embed_dim, dtype=dtype)
        self.registers: Tensor | None = None
        if config.register_tokens:
            self.registers = Tensor(
                rng.normal(0.0, 0.02, size=(config.register_tokens, config.embed_dim)),
                dtype=dtype,
                requires_grad=True,
            )
        self.rope: Rope3D | None = None
        if config.use_rope:
            self.rope = Rope3D(head_dim=config.head_dim, base=config.rope_base, fov=config.rope_fov)
        self.blocks = [init_block(rng, config, dtype) for _ in range(config.layers)]
        self.decoder = init_decoder(
            rng,
            config.embed_dim,
            config.patch_size,
            config.num_classes,
            schedule=list(config.decoder_schedule),
            use_norm=config.decoder_norm,
            dtype=dtype,
        )
        self.identity_blocks: frozenset[int] = frozenset()

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("patch.w", self.patch.w), ("patch.b", self.patch.b)]
        if self.lpe is not None:
            out.append(("lpe.table", self.lpe.table))
            if self.lpe.register_table is not None:
                out.append(("lpe.register_table", self.lpe.register_table))
        if self.registers is not None:
            out.append(("registers", self.registers))
        for i, blk in enumerate(self.blocks):
            for name in (
                "norm1_g", "norm1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
                "pan_g", "pan_b", "norm2_g", "norm2_b", "gate_w", "gate_b",
                "val_w", "val_b", "mlp_norm_g", "mlp_norm_b", "out_w", "out_b",
                "ls_attn", "ls_mlp",
            ):
                t = getattr(blk, name)
                if t is not None:
                    out.append((f"blocks.{i:02d}.{name}", t))
        for i, st in enumerate(self.decoder.stages):
            out.append((f"decoder.stages.{i}.w", st.w))
            out.append((f"decoder.stages.{i}.b", st.b))
            if self.decoder.use_norm:
                out.append((f"decoder.stages.{i}.gamma", st.gamma))
                out.append((f"decoder.stages.{i}.beta", st.beta))
        out.append(("decoder.head_w", self.decoder.head_w))
        out.append(("decoder.head_b", self.decoder.head_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 5:
            raise ShapeError(f"model input must be (batch, channels, z, y, x), got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"model expects {self.config.in_channels} channels, got input {x.shape}")
        if tuple(x.shape[2:]) != self.config.input_patch:
            raise ShapeError(
                f"model was built for input patch {self.config.input_patch}, got {tuple(x.shape[2:])}"
            )

    def embed(self, x) -> TokenSequence:
        """Tokenize and add the learnable positional embedding (no registers yet)."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        self._check_input(x)
        seq = tokenize(x, self.patch)
        if self.lpe is not None:
            seq = add_learnable_pe(seq, self.lpe)
        return seq

    def append_registers(self, seq: TokenSequence) -> TokenSequence:
        if self.registers is None:
            return seq
        b = seq.tokens.shape[0]
        nr, d = self.registers.shape
        ones = Tensor(np.ones((b, 1, 1)), dtype=self.registers.data.dtype)
        regs = nm.mul(ones, nm.reshape(self.registers, (1, nr, d)))
        tokens = nm.concat([seq.tokens, regs], axis=1)
        coords = np.concatenate(
            [seq.coords, np.full((nr, 3), REGISTER_COORD, dtype=seq.coords.dtype)], axis=0
        )
        return TokenSequence(tokens=tokens, grid=seq.grid, coords=coords)

    def run_blocks(self, seq: TokenSequence, train: bool = False, rng=None, capture=None) -> TokenSequence:
        for i, blk in enumerate(self.blocks):
            if i not in self.identity_blocks:
                seq = primus_block(seq, blk, self.config, self.rope, train, rng)
            if capture is not None:
                capture(f"block.{i:02d}", seq.tokens.data)
        return seq

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None, capture=None) -> Tensor:
        seq = self.embed(x)
        if capture is not None:
            capture("tokens", seq.tokens.data)
        seq = self.append_registers(seq)
        seq = self.run_blocks(seq, train, rng, capture)
        seq = seq.strip_registers()
        if capture is not None:
            capture("pre_decoder", seq.tokens.data)
        return decode(seq, self.decoder)

    def masked_forward(
        self,
        x,
        strategy: str,
        sparsity: float,
        rng: np.random.Generator,
        train: bool = False,
    ) -> tuple[Tensor, np.ndarray]:
        """Forward over a masked token subset; dropped grid positions decode from zeros.

        Returns the score grid and the kept spatial-token indices.
        """
        seq = self.embed(x)
        kept_seq, kept_idx = mask_tokens(seq, strategy, sparsity, rng)
        kept_seq = self.append_registers(kept_seq)
        out = self.run_blocks(kept_seq, train, rng).strip_registers()
        full = scatter_tokens(out.tokens, kept_idx, seq.n_spatial)
        full_seq = TokenSequence(tokens=full, grid=seq.grid, coords=seq.coords)
        return decode(full_seq, self.decoder), kept_idx

    def capture_tags(self) -> list[str]:
        return ["tokens"] + [f"block.{i:02d}" for i in range(self.config.layers)] + ["pre_decoder"]


def scatter_tokens(tokens: Tensor, kept_idx: np.ndarray, n: int) -> Tensor:
    """Place row j of (b, K, d) tokens at grid slot kept_idx[j]; other slots are zero."""
    b, k, d = tokens.shape
    zero = Tensor(np.zeros((b, 1, d)), dtype=tokens.data.dtype)
    padded = nm.concat([tokens, zero], axis=1)
    index_map = np.full(n, k, dtype=np.intp)
    index_map[np.asarray(kept_idx, dtype=np.intp)] = np.arange(k)
    return nm.index_select(padded, 1, index_map)


def mask_tokens(
    seq: TokenSequence,
    strategy: str,
    sparsity: float,
    rng: np.random.Generator,
) -> tuple[TokenSequence, np.ndarray]:
    """Keep exactly K = round((1 - sparsity) * N) spatial tokens.

    ``random`` samples K distinct tokens uniformly.  ``structured`` picks a
    random axis and keeps whole contiguous slices along it, topping up with a
    random partial subset of the adjacent slice to reach K exactly.  Register
    tokens are never masked (mask before appending them).  Coordinates are
    preserved so rotary embeddings stay correct.
    """
    if seq.n_registers:
        raise ShapeError("mask_tokens expects a sequence without register tokens")
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
    n = seq.n_spatial
    k = int(round((1.0 - sparsity) * n))
    if k < 1:
        raise ConfigError(f"sparsity {sparsity} keeps zero of {n} tokens")
    if k >= n:
        return seq, np.arange(n)
    if strategy == "random":
        kept = np.sort(rng.choice(n, size=k, replace=False))
    elif strategy == "structured":
        axis = int(rng.integers(3))
        g = seq.grid[axis]
        slice_size = n // g
        n_full = k // slice_size
        r = k - n_full * slice_size
        span = n_full + (1 if r else 0)
        start = int(rng.integers(0, g - span + 1))
        slice_ids = seq.coords[:, axis]
        kept_mask = (slice_ids >= start) & (slice_ids < start + n_full)
        kept = np.flatnonzero(kept_mask)
        if r:
            partial = np.flatnonzero(slice_ids == start + n_full)
            extra = rng.choice(partial, size=r, replace=False)
            kept = np.sort(np.concatenate([kept, extra]))
    else:
        raise ConfigError(f"unknown masking strategy {strategy!r}; use 'random' or 'structured'")
    tokens = nm.index_select(seq.tokens, 1, kept)
    return TokenSequence(tokens=tokens, grid=seq.grid, coords=seq.coords[kept]), kept


def replace_blocks_with_identity(model: PrimusModel, which) -> PrimusModel:
    """Return a model sharing weights whose selected blocks forward input unchanged."""
    if which == "all":
        indices = frozenset(range(model.config.layers))
    else:
        indices = frozenset(int(i) for i in which)
        bad = [i for i in indices if not 0 <= i < model.config.layers]
        if bad:
            raise ConfigError(f"block indices {sorted(bad)} out of range for {model.config.layers} layers")
    clone = copy.copy(model)
    clone.identity_blocks = model.identity_blocks | indices
    return clone
