"""Identity descriptor: toy visual stem -> face abstractor (2D tokens), vertex tokens
(3D), fusion transformer and the residual 1D-conv head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .mesh3d import ConfigError, MeshHierarchy, VertexEncoder
from .numerics import (Conv1d, Conv2d, DimensionError, LayerNorm, Linear, avg_pool2d,
                       check_finite, scaled_dot_attention)


@dataclass(frozen=True)
class FusionConfig:
    layers: int = 6
    heads: int = 4
    c_vert: int = 32  # C', token width inside the fusion transformer
    res_blocks: int = 4
    abstractor_factor: int = 4
    c_vis: int = 32
    c_out: int = 64  # C, the denoiser hidden size
    n_tokens: int = 314  # N'
    abstractor_blocks: int = 1
    resampler_depth: int = 2

    def __post_init__(self):
        for name in ("layers", "heads", "c_vert", "res_blocks", "abstractor_factor", "c_vis", "c_out", "n_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.c_vert % self.heads:
            raise ConfigError("c_vert must be divisible by heads")


@dataclass
class IdDescriptor:
    tokens: torch.Tensor  # (N', C) or (B, N', C)
    identity: str = ""
    frame_index: int = -1


def image_to_tensor(images) -> torch.Tensor:
    """uint8 (H, W, 3) or (B, H, W, 3) -> float (B, 3, H, W) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(images))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).to(torch.float32) / 127.5 - 1.0


def grid_tokens(grid: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, h*w, C), row-major over (h, w)."""
    b, c, h, w = grid.shape
    return grid.reshape(b, c, h * w).transpose(1, 2)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_q: int, d_kv: int, width: int, heads: int, out: int | None = None):
        super().__init__()
        self.heads = heads
        self.q = Linear(d_q, width)
        self.k = Linear(d_kv, width)
        self.v = Linear(d_kv, width)
        self.o = Linear(width, d_q if out is None else out)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None) -> torch.Tensor:
        ctx = x if ctx is None else ctx
        return self.o(attend(self.q(x), self.k(ctx), self.v(ctx), self.heads))


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head wrapper over ``scaled_dot_attention`` for (B, n, heads * d) inputs."""
    b, nq, c = q.shape
    split = lambda t: t.reshape(b, t.shape[1], heads, -1).transpose(1, 2)  # noqa: E731
    out = scaled_dot_attention(split(q), split(k), split(v))
    return out.transpose(1, 2).reshape(b, nq, -1)


class ToyVisualEncoder(nn.Module):
    """Two stride-2 3x3 convs with GELU: 64x64 crop -> 16x16 grid."""

    def __init__(self, c_vis: int = 32, hidden: int = 16):
        super().__init__()
        self.conv1 = Conv2d(3, hidden, 3, stride=2)
        self.conv2 = Conv2d(hidden, c_vis, 3, stride=2)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.gelu(self.conv1(img)))


class ResBlock2d(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = Conv2d(c, c, 3)
        self.conv2 = Conv2d(c, c, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))


class FaceAbstractor(nn.Module):
    """Residual conv blocks, average pooling by ``factor``, residual conv blocks."""

    def __init__(self, c: int, factor: int = 4, blocks: int = 1):
        super().__init__()
        self.factor = factor
        self.pre = nn.Sequential(*[ResBlock2d(c) for _ in range(blocks)])
        self.post = nn.Sequential(*[ResBlock2d(c) for _ in range(blocks)])

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        h, w = grid.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ConfigError(f"grid {h}x{w} not divisible by abstractor factor {self.factor}")
        x = self.pre(grid)
        if self.factor > 1:
            x = avg_pool2d(x, self.factor)
        return self.post(x)


class QueryResampler(nn.Module):
    """Learned queries cross-attending to the flattened grid (Q-Former style ablation).

    The first block is pure attention pooling (no residual, no output projection),
    so a single query over a single cell returns that cell's value projection.
    Keys carry no positional code, so the output ignores cell order.
    """

    def __init__(self, c: int, num_queries: int, heads: int = 4, depth: int = 2):
        super().__init__()
        self.heads = heads
        self.queries = nn.Parameter(torch.empty(num_queries, c))
        self.wq = Linear(c, c)
        self.wk = Linear(c, c)
        self.wv = Linear(c, c)
        self.blocks = nn.ModuleList([TransformerLayer(c, heads, cross=True) for _ in range(depth - 1)])

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        kv = grid_tokens(grid)
        q = self.queries.unsqueeze(0).expand(kv.shape[0], -1, -1)
        x = attend(self.wq(q), self.wk(kv), self.wv(kv), self.heads)
        for blk in self.blocks:
            x = blk(x, kv)
        return x


class TransformerLayer(nn.Module):
    """Pre-norm self-attention (or cross-attention) layer with a GELU MLP."""

    def __init__(self, c: int, heads: int, mlp_ratio: int = 2, cross: bool = False):
        super().__init__()
        self.cross = cross
        self.norm1 = LayerNorm(c)
        self.attn = MultiHeadAttention(c, c, c, heads)
        self.norm2 = LayerNorm(c)
        self.fc1 = Linear(c, mlp_ratio * c)
        self.fc2 = Linear(mlp_ratio * c, c)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, ctx if self.cross else h)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class FusionTransformer(nn.Module):
    def __init__(self, c_in_2d: int, c: int, layers: int = 6, heads: int = 4):
        super().__init__()
        self.c = c
        self.align1 = Linear(c_in_2d, 2 * c)
        self.align2 = Linear(2 * c, c)
        self.layers = nn.ModuleList([TransformerLayer(c, heads) for _ in range(layers)])

    def align(self, tokens_2d: torch.Tensor) -> torch.Tensor:
        return self.align2(F.gelu(self.align1(tokens_2d)))

    def forward(self, x_v: torch.Tensor | None, x_f: torch.Tensor) -> torch.Tensor:
        """x_v: (B, N', C') vertex tokens or None; x_f: (B, n2d, C_vis) 2D tokens."""
        x = self.align(x_f)
        if x_v is not None:
            if x_v.shape[-1] != self.c:
                raise DimensionError(f"vertex tokens have {x_v.shape[-1]} channels, expected {self.c}")
            x = torch.cat([x_v, x], dim=1)
        for layer in self.layers:
            x = layer(x)
        return x


class ResConv1dBlock(nn.Module):
    def __init__(self, c: int, k: int = 3):
        super().__init__()
        self.norm = LayerNorm(c)
        self.conv1 = Conv1d(c, c, k)
        self.conv2 = Conv1d(c, c, k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, N, C)
        h = self.norm(x).transpose(1, 2)
        h = self.conv2(F.gelu(self.conv1(h)))
        return x + h.transpose(1, 2)


class ResConv1dHead(nn.Module):
    """Slice the first N' tokens, residual conv1d blocks along the token axis,
    then a linear C' -> C projection."""

    def __init__(self, c_in: int, c_out: int, n_tokens: int, blocks: int = 4):
        super().__init__()
        self.n_tokens = n_tokens
        self.blocks = nn.ModuleList([ResConv1dBlock(c_in) for _ in range(blocks)])
        self.proj = Linear(c_in, c_out)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        x = fused[:, : self.n_tokens]
        if x.shape[1] < self.n_tokens:
            pad = x.new_zeros(x.shape[0], self.n_tokens - x.shape[1], x.shape[2])
            x = torch.cat([x, pad], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.proj(x)


class IdEncoder(nn.Module):
    """Reference crop + identity mesh -> id descriptor (B, N', C)."""

    def __init__(self, cfg: FusionConfig, hierarchy: MeshHierarchy,
                 eye_idx: tuple[int, int] | None = None, drop_3d: bool = False,
                 use_query_resampler: bool = False):
        super().__init__()
        if hierarchy.meshes[-1].n_vertices != cfg.n_tokens:
            raise ConfigError(
                f"mesh hierarchy ends at {hierarchy.meshes[-1].n_vertices} vertices, config wants {cfg.n_tokens}")
        self.cfg = cfg
        self.drop_3d = drop_3d
        self.use_query_resampler = use_query_resampler
        self.visual = ToyVisualEncoder(cfg.c_vis)
        if use_query_resampler:
            self.resampler = QueryResampler(cfg.c_vis, cfg.n_tokens, heads=4, depth=cfg.resampler_depth)
        else:
            self.abstractor = FaceAbstractor(cfg.c_vis, cfg.abstractor_factor, cfg.abstractor_blocks)
        self.vertex = None if drop_3d else VertexEncoder(hierarchy, cfg.c_vert, eye_idx=eye_idx)
        self.fusion = FusionTransformer(cfg.c_vis, cfg.c_vert, cfg.layers, cfg.heads)
        self.head = ResConv1dHead(cfg.c_vert, cfg.c_out, cfg.n_tokens, cfg.res_blocks)

    def tokens_2d(self, images: torch.Tensor) -> torch.Tensor:
        grid = self.visual(images)
        if self.use_query_resampler:
            return self.resampler(grid)
        return grid_tokens(self.abstractor(grid))

    def forward(self, images: torch.Tensor, vertices: torch.Tensor | None) -> torch.Tensor:
        x_f = self.tokens_2d(images)
        x_v = None
        if self.vertex is not None:
            if vertices is None:
                raise ValueError("vertex path enabled but no mesh given")
            x_v = self.vertex(vertices.to(x_f.dtype))
            if x_v.dim() == 2:
                x_v = x_v.unsqueeze(0).expand(x_f.shape[0], -1, -1)
        fused = self.fusion(x_v, x_f)
        return check_finite(self.head(fused), "id_descriptor")


def build_id_descriptor(encoder: IdEncoder, reference: np.ndarray, mesh_vertices: np.ndarray | None,
                        identity: str = "", frame_index: int = -1) -> IdDescriptor:
    """Single-reference convenience wrapper returning an (N', C) descriptor."""
    p = next(encoder.parameters())
    img = image_to_tensor(reference).to(p.dtype)
    verts = None if mesh_vertices is None else torch.as_tensor(mesh_vertices, dtype=p.dtype).unsqueeze(0)
    out = encoder(img, verts)[0]
    return IdDescriptor(out, identity, frame_index)
