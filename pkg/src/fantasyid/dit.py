"""Miniature MM-DiT denoiser with per-layer identity injection."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import attend
from .mesh3d import ConfigError
from .numerics import Conv1d, DimensionError, LayerNorm, Linear, check_finite, layer_norm

INJECTION_MODES = ("layer_aware", "shared", "none")
PAD_ID, NULL_ID = 0, 1


@dataclass(frozen=True)
class DenoiserConfig:
    blocks: int = 4
    hidden: int = 64
    heads: int = 4
    patch: tuple[int, int, int] = (1, 4, 4)
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    n_txt: int = 8
    vocab: int = 256
    mlp_ratio: int = 4
    injection: str = "layer_aware"
    id_tokens: int = 314

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError("hidden size must be divisible by heads")
        if self.injection not in INJECTION_MODES:
            raise ConfigError(f"injection must be one of {INJECTION_MODES}")
        pf, ph, pw = self.patch
        if self.frames % pf or self.height % ph or self.width % pw:
            raise ConfigError("video extents must be divisible by the patch size")

    @property
    def patch_dim(self) -> int:
        pf, ph, pw = self.patch
        return pf * ph * pw * self.channels

    @property
    def grid(self) -> tuple[int, int, int]:
        pf, ph, pw = self.patch
        return self.frames // pf, self.height // ph, self.width // pw


# --------------------------------------------------------------------------- patches


def patchify(video: torch.Tensor, patch: tuple[int, int, int]) -> torch.Tensor:
    """(B, F, H, W, C) -> (B, n_tokens, pf*ph*pw*C); tokens ordered (frame, row, col)."""
    b, f, h, w, c = video.shape
    pf, ph, pw = patch
    if f % pf or h % ph or w % pw:
        raise DimensionError(f"video {tuple(video.shape)} not divisible by patch {patch}")
    x = video.reshape(b, f // pf, pf, h // ph, ph, w // pw, pw, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, (f // pf) * (h // ph) * (w // pw), pf * ph * pw * c)


def unpatchify(tokens: torch.Tensor, patch: tuple[int, int, int], shape: tuple[int, int, int, int]) -> torch.Tensor:
    """Inverse of :func:`patchify`; ``shape`` is (F, H, W, C)."""
    f, h, w, c = shape
    pf, ph, pw = patch
    b = tokens.shape[0]
    x = tokens.reshape(b, f // pf, h // ph, w // pw, pf, ph, pw, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, f, h, w, c)


class PatchCodec(nn.Module):
    """Linear patch embedding whose decoder is the transpose of the encoder."""

    def __init__(self, patch: tuple[int, int, int], channels: int, hidden: int):
        super().__init__()
        self.patch = patch
        p = patch[0] * patch[1] * patch[2] * channels
        self.weight = nn.Parameter(torch.empty(hidden, p))

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        return patchify(video, self.patch) @ self.weight.t()

    def decode(self, tokens: torch.Tensor, shape) -> torch.Tensor:
        return unpatchify(tokens @ self.weight, self.patch, shape)


def sinusoid(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """[sin(pos * f_i) ..., cos(pos * f_i) ...] with f_i = 10000**(-i / (dim/2))."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.to(torch.float64)[..., None] * freq
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def video_positions(grid: tuple[int, int, int], dim: int) -> torch.Tensor:
    """Fixed (frame, row, col) factorised sinusoidal code, one even-width slice per axis."""
    per = 2 * (dim // 6)
    nf, nh, nw = grid
    f, h, w = torch.meshgrid(torch.arange(nf), torch.arange(nh), torch.arange(nw), indexing="ij")
    parts = [sinusoid(a.reshape(-1), per) for a in (f, h, w)]
    pe = torch.cat(parts, dim=-1)
    return F.pad(pe, (0, dim - pe.shape[-1]))


# --------------------------------------------------------------------------- text / time


def tokenize(prompt: str, n_txt: int = 8, vocab: int = 256) -> list[int]:
    """Hash lower-cased words to ids in [2, vocab); pad with 0 / truncate to n_txt."""
    ids = []
    for word in re.findall(r"[a-z0-9']+", prompt.lower())[:n_txt]:
        h = int.from_bytes(hashlib.sha256(word.encode()).digest()[:4], "little")
        ids.append(2 + h % (vocab - 2))
    return ids + [PAD_ID] * (n_txt - len(ids))


def null_tokens(n_txt: int = 8) -> list[int]:
    return [NULL_ID] * n_txt


def timestep_sinusoid(t: torch.Tensor, dim: int) -> torch.Tensor:
    return sinusoid(torch.as_tensor(t), dim)


class TimestepEmbedder(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.c = c
        self.fc1 = Linear(c, c)
        self.fc2 = Linear(c, c)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = timestep_sinusoid(t, self.c).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(x)))


# --------------------------------------------------------------------------- blocks


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Modality(nn.Module):
    """Per-modality parameters of one MM-DiT block."""

    def __init__(self, c: int, mlp_ratio: int):
        super().__init__()
        self.ada = Linear(c, 6 * c, zero_init=True)
        self.qkv = Linear(c, 3 * c)
        self.out = Linear(c, c)
        self.fc1 = Linear(c, mlp_ratio * c)
        self.fc2 = Linear(mlp_ratio * c, c)


class InjectionAdapter(nn.Module):
    """Cross-attention from video tokens to the id descriptor, passed through
    F = token-axis conv(k=3) -> LayerNorm -> zero-initialised pointwise projection."""

    def __init__(self, c: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = Linear(c, c, bias=False)
        self.wk = Linear(c, c, bias=False)
        self.wv = Linear(c, c, bias=False)
        self.conv = Conv1d(c, c, 3)
        self.norm = LayerNorm(c)
        self.proj = Linear(c, c, zero_init=True)

    def forward(self, z: torch.Tensor, v_f: torch.Tensor) -> torch.Tensor:
        a = attend(self.wq(z), self.wk(v_f), self.wv(v_f), self.heads)
        h = self.conv(a.transpose(1, 2)).transpose(1, 2)
        return self.proj(self.norm(h))


class MMDiTBlock(nn.Module):
    def __init__(self, c: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.c = c
        self.heads = heads
        self.txt = Modality(c, mlp_ratio)
        self.vid = Modality(c, mlp_ratio)

    def forward(self, txt: torch.Tensor, vid: torch.Tensor, t_emb: torch.Tensor,
                inject=None) -> tuple[torch.Tensor, torch.Tensor]:
        """``inject`` maps the post-attention video tokens to an additive update."""
        c = F.silu(t_emb)
        mt = self.txt.ada(c).chunk(6, dim=-1)
        mv = self.vid.ada(c).chunk(6, dim=-1)
        ht = modulate(layer_norm(txt), mt[0], mt[1])
        hv = modulate(layer_norm(vid), mv[0], mv[1])
        qkv = torch.cat([self.txt.qkv(ht), self.vid.qkv(hv)], dim=1)
        q, k, v = qkv.chunk(3, dim=-1)
        a = attend(q, k, v, self.heads)
        n_t = txt.shape[1]
        txt = txt + mt[2].unsqueeze(1) * self.txt.out(a[:, :n_t])
        vid = vid + mv[2].unsqueeze(1) * self.vid.out(a[:, n_t:])
        if inject is not None:
            vid = vid + inject(vid)
        ht = modulate(layer_norm(txt), mt[3], mt[4])
        hv = modulate(layer_norm(vid), mv[3], mv[4])
        txt = txt + mt[5].unsqueeze(1) * self.txt.fc2(F.gelu(self.txt.fc1(ht)))
        vid = vid + mv[5].unsqueeze(1) * self.vid.fc2(F.gelu(self.vid.fc1(hv)))
        return txt, vid


class Denoiser(nn.Module):
    """epsilon-prediction network over (B, F, H, W, C) latents."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden
        self.embed = Linear(cfg.patch_dim, c)
        self.text = nn.Parameter(torch.empty(cfg.vocab, c))
        self.time = TimestepEmbedder(c)
        self.blocks = nn.ModuleList([MMDiTBlock(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks)])
        if cfg.injection == "layer_aware":
            self.inject = nn.ModuleList([InjectionAdapter(c, cfg.heads) for _ in range(cfg.blocks)])
        elif cfg.injection == "shared":
            self.inject = InjectionAdapter(c, cfg.heads)
        else:
            self.inject = None
        self.final_norm = LayerNorm(c)
        self.head = Linear(c, cfg.patch_dim)
        self.head.weight.init_rule = "small"
        self.register_buffer("pos", video_positions(cfg.grid, c).float(), persistent=False)

    def adapter(self, layer: int) -> InjectionAdapter | None:
        if self.inject is None:
            return None
        return self.inject[layer] if isinstance(self.inject, nn.ModuleList) else self.inject

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, text_ids: torch.Tensor,
                v_f: torch.Tensor | None, detach_layers: frozenset[int] = frozenset()) -> torch.Tensor:
        cfg = self.cfg
        shape = tuple(z_t.shape[1:])
        if shape != (cfg.frames, cfg.height, cfg.width, cfg.channels):
            raise DimensionError(f"latent shape {shape} does not match config")
        b = z_t.shape[0]
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(b)
        vid = self.embed(patchify(z_t, cfg.patch)) + self.pos.to(z_t.dtype)
        txt = self.text[torch.as_tensor(text_ids, dtype=torch.long)]
        if txt.dim() == 2:
            txt = txt.unsqueeze(0).expand(b, -1, -1)
        t_emb = self.time(t)
        if v_f is not None and self.inject is not None:
            if v_f.dim() == 2:
                v_f = v_f.unsqueeze(0).expand(b, -1, -1)
            if v_f.shape[1] != cfg.id_tokens or v_f.shape[2] != cfg.hidden:
                raise DimensionError(
                    f"descriptor shape {tuple(v_f.shape[1:])} != ({cfg.id_tokens}, {cfg.hidden})")
        for l, blk in enumerate(self.blocks):
            inject = None
            adapter = self.adapter(l)
            if adapter is not None and v_f is not None:
                if l in detach_layers:
                    inject = lambda z, a=adapter: a(z, v_f).detach()  # noqa: E731
                else:
                    inject = lambda z, a=adapter: a(z, v_f)  # noqa: E731
            txt, vid = blk(txt, vid, t_emb, inject)
        out = self.head(self.final_norm(vid))
        return check_finite(unpatchify(out, cfg.patch, shape), "denoise")


def config_dict(cfg: DenoiserConfig) -> dict:
    d = asdict(cfg)
    d["patch"] = list(cfg.patch)
    return d
