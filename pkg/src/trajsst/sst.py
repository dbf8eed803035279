"""Simplified Swin Transformer for trajectory grids.

The grid is cut into P x P patches, linearly embedded, and processed by
stages of windowed self-attention blocks. Each stage ends with a 2 x 2 patch
merge, so with the default layout the token grid goes 4x4 -> 2x2 -> 1x1 and
the last stage attends globally. Windows never shift unless ``use_shift`` is
set, which exists only to compare against the classic Swin layout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .geo import TrajectoryGrid
from .nn import functional as F
from .nn.module import LayerNorm, Linear, Module, Parameter, trunc_normal
from .nn.tensor import Tensor, add, reshape, roll, sigmoid, take, transpose, gelu

MASK_VALUE = -1e9


@dataclass
class SstConfig:
    resolution: int = 40
    patch_size: int = 10
    embed_dim: int = 64
    num_heads: tuple[int, ...] = (4, 4)
    depths: tuple[int, ...] = (2, 2)
    window_sizes: tuple[int, ...] = (2, 2)
    mlp_ratio: int = 4
    use_shift: bool = False
    shift_size: int | None = None  # None: half the window
    rel_pos_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        self.num_heads = tuple(self.num_heads)
        self.depths = tuple(self.depths)
        self.window_sizes = tuple(self.window_sizes)
        self.validate()

    def validate(self):
        if self.resolution < 1 or self.patch_size < 1 or self.embed_dim < 1:
            raise ConfigError("resolution, patch_size and embed_dim must be positive")
        if self.resolution % self.patch_size:
            raise ConfigError(f"resolution {self.resolution} not divisible by patch size {self.patch_size}")
        if not (len(self.depths) == len(self.num_heads) == len(self.window_sizes)) or not self.depths:
            raise ConfigError("depths, num_heads and window_sizes need one entry per stage")
        side = self.resolution // self.patch_size
        dim = self.embed_dim
        for stage, (heads, w) in enumerate(zip(self.num_heads, self.window_sizes)):
            if w < 1 or side % w:
                raise ConfigError(f"stage {stage}: token side {side} not divisible by window {w}")
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {stage}: dim {dim} not divisible by {heads} heads")
            if side % 2:
                raise ConfigError(f"stage {stage}: odd token side {side} cannot be merged")
            side //= 2
            dim *= 2
        if side != 1:
            raise ConfigError(
                f"{len(self.depths)} stage(s) leave a {side}x{side} token grid; the head needs 1x1"
            )
        if self.shift_size is not None and self.shift_size < 0:
            raise ConfigError("shift_size must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("num_heads", "depths", "window_sizes"):
            d[k] = list(d[k])
        return d


@dataclass
class TokenGrid:
    side: int
    dim: int
    features: np.ndarray  # [side * side, dim], row-major token order


# ---------------------------------------------------------------------------
# bookkeeping on plain arrays
# ---------------------------------------------------------------------------


def patch_partition(grid: TrajectoryGrid | np.ndarray, patch_size: int) -> TokenGrid:
    values = grid.values if isinstance(grid, TrajectoryGrid) else np.asarray(grid)
    m = values.shape[0]
    if values.shape != (m, m):
        raise ShapeError(f"expected a square grid, got {values.shape}")
    if m % patch_size:
        raise ConfigError(f"grid side {m} not divisible by patch size {patch_size}")
    s = m // patch_size
    feats = values.reshape(s, patch_size, s, patch_size).transpose(0, 2, 1, 3)
    return TokenGrid(s, patch_size * patch_size, feats.reshape(s * s, patch_size * patch_size))


def patch_unpartition(tokens: TokenGrid) -> np.ndarray:
    p = int(round(np.sqrt(tokens.dim)))
    s = tokens.side
    x = tokens.features.reshape(s, s, p, p).transpose(0, 2, 1, 3)
    return x.reshape(s * p, s * p)


def _partition_batch(grids: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, M, M] -> [B, s, s, P*P]."""
    b, m, _ = grids.shape
    if m % patch_size:
        raise ConfigError(f"grid side {m} not divisible by patch size {patch_size}")
    s = m // patch_size
    x = grids.reshape(b, s, patch_size, s, patch_size).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, s, s, patch_size * patch_size))


def window_partition(x, w: int):
    """[B, S, S, d] -> [B, nW, w*w, d], windows in row-major order.

    Works on numpy arrays and Tensors alike.
    """
    b, s, _, d = x.shape
    if s % w:
        raise ConfigError(f"token side {s} not divisible by window {w}")
    n = s // w
    if isinstance(x, Tensor):
        x = reshape(x, (b, n, w, n, w, d))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        return reshape(x, (b, n * n, w * w, d))
    x = x.reshape(b, n, w, n, w, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n * n, w * w, d)


def window_reverse(windows, w: int, side: int):
    """Inverse of :func:`window_partition`."""
    b, _, _, d = windows.shape
    n = side // w
    if isinstance(windows, Tensor):
        x = reshape(windows, (b, n, n, w, w, d))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        return reshape(x, (b, side, side, d))
    x = windows.reshape(b, n, n, w, w, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, side, side, d)


def relative_position_index(w: int) -> np.ndarray:
    """[w*w, w*w] index into a (2w-1)^2 offset table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


def shifted_window_mask(side: int, w: int, shift: int) -> np.ndarray:
    """[nW, w*w, w*w] additive mask blocking token pairs that wrapped around."""
    region = np.zeros((side, side), dtype=np.int64)
    cuts = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    wins = window_partition(region[None, :, :, None], w)[0, :, :, 0]  # [nW, w*w]
    diff = wins[:, :, None] != wins[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class PatchEmbed(Module):
    def __init__(self, patch_size: int, dim: int, rng: np.random.Generator):
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size, dim, rng)

    def forward(self, grids: np.ndarray | Tensor) -> Tensor:
        """[B, M, M] -> [B, s, s, dim]."""
        if isinstance(grids, Tensor):
            b, m, _ = grids.shape
            p = self.patch_size
            if m % p:
                raise ConfigError(f"grid side {m} not divisible by patch size {p}")
            s = m // p
            x = reshape(grids, (b, s, p, s, p))
            x = reshape(transpose(x, (0, 1, 3, 2, 4)), (b, s, s, p * p))
        else:
            x = Tensor(_partition_batch(grids, self.patch_size))
        return self.proj(x)


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator, rel_pos_bias: bool = True):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, window
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        if rel_pos_bias:
            table = trunc_normal(rng, ((2 * window - 1) ** 2, heads))
            self.rel_bias_table = Parameter(table.astype(np.float32))
            self._rel_index = relative_position_index(window)
        else:
            self.rel_bias_table = None

    def relative_bias(self) -> Tensor | None:
        if self.rel_bias_table is None:
            return None
        n = self.window * self.window
        b = take(self.rel_bias_table, self._rel_index.reshape(-1))  # [n*n, h]
        return transpose(reshape(b, (n, n, self.heads)), (2, 0, 1))  # [h, n, n]

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """windows: [B, nW, n, d]; mask: [nW, n, n] or None."""
        bias = self.relative_bias()
        if mask is not None:
            m = Tensor(mask[:, None].astype(windows.dtype))  # [nW, 1, n, n]
            bias = m if bias is None else add(bias, m)
        return F.multi_head_self_attention(
            windows, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.heads, bias,
        )


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SstBlock(Module):
    """LN -> windowed MSA -> residual -> LN -> MLP -> residual.

    ``shift`` > 0 turns this into a classic shifted-window block: the token
    grid is rolled by -shift before partitioning and wrapped pairs are masked.
    """

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, shift: int = 0, rel_pos_bias: bool = True):
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)
        self._mask_cache: dict[int, np.ndarray] = {}

    def attention(self, x: Tensor) -> Tensor:
        """The windowed attention sub-layer alone, [B, S, S, d] -> same."""
        side = x.shape[1]
        w = self.window
        if side % w:
            raise ConfigError(f"token side {side} not divisible by window {w}")
        s = self.shift
        mask = None
        if s > 0:
            x = roll(x, (-s, -s), (1, 2))
            if side not in self._mask_cache:
                self._mask_cache[side] = shifted_window_mask(side, w, s)
            mask = self._mask_cache[side]
        out = window_reverse(self.attn(window_partition(x, w), mask), w, side)
        if s > 0:
            out = roll(out, (s, s), (1, 2))
        return out

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.attention(self.norm1(x)))
        return add(x, self.mlp(self.norm2(x)))


class PatchMerging(Module):
    """Concatenate each 2x2 token group (TL, TR, BL, BR), LN, then 4d -> 2d."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, s, _, d = x.shape
        if s % 2:
            raise ConfigError(f"cannot merge an odd token side {s}")
        h = s // 2
        x = reshape(x, (b, h, 2, h, 2, d))
        x = transpose(x, (0, 1, 3, 2, 4, 5))  # [b, h, h, row, col, d]
        x = reshape(x, (b, h, h, 4 * d))
        return self.reduction(self.norm(x))


class SimplifiedSwin(Module):
    input_kind = "grid"

    def __init__(self, cfg: SstConfig | None = None):
        cfg = cfg or SstConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng)
        dim = cfg.embed_dim
        side = cfg.resolution // cfg.patch_size
        blocks, merges = [], []
        for depth, heads, w in zip(cfg.depths, cfg.num_heads, cfg.window_sizes):
            shift = 0
            # a window covering the whole grid has nothing to shift across
            if cfg.use_shift and w < side:
                shift = w // 2 if cfg.shift_size is None else cfg.shift_size
            for i in range(depth):
                blocks.append(SstBlock(dim, heads, w, rng, cfg.mlp_ratio,
                                       shift=shift if i % 2 == 1 else 0,
                                       rel_pos_bias=cfg.rel_pos_bias))
            merges.append(PatchMerging(dim, rng))
            dim *= 2
            side //= 2
        self.blocks = blocks
        self.merges = merges
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, 2, rng)
        self._stage_bounds = np.cumsum((0,) + cfg.depths)

    def features(self, grids) -> Tensor:
        x = self.embed(grids)
        for stage, merge in enumerate(self.merges):
            lo, hi = self._stage_bounds[stage], self._stage_bounds[stage + 1]
            for blk in self.blocks[lo:hi]:
                x = blk(x)
            x = merge(x)
        b = x.shape[0]
        return reshape(x, (b, x.shape[-1]))

    def forward(self, grids) -> Tensor:
        """[B, M, M] grids -> [B, 2] predictions in [0, 1]^2."""
        m = self.cfg.resolution
        if grids.ndim != 3 or grids.shape[1:] != (m, m):
            raise ShapeError(f"expected grids of shape [B, {m}, {m}], got {grids.shape}")
        return sigmoid(self.head(self.norm(self.features(grids))))


def sst_forward(grid: TrajectoryGrid, model: SimplifiedSwin) -> tuple[float, float]:
    """Predict the normalized destination (u, v) for one grid."""
    from .nn.tensor import no_grad

    x = grid.values[None].astype(model.dtype)
    with no_grad():
        out = model(x).data[0]
    return float(out[0]), float(out[1])
