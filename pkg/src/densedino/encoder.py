"""Miniature Vision Transformer with reference tokens.

Token order inside the encoder is ``[cls, patch_0 .. patch_{N-1}, ref_0 .. ref_{R-1}]``.
Reference tokens are bicubic interpolations of the learned patch positional
grid and only ever act as queries: every row of the attention mask has its
reference columns disabled, so class and patch outputs do not depend on them.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MASK_VALUE = -1e9
CUBIC_A = -0.5


@dataclass(frozen=True)
class EncoderConfig:
    image_res: int = 64
    patch_size: int = 8
    depth: int = 3
    embed_dim: int = 64
    heads: int = 4
    out_dim: int = 256
    mlp_ratio: float = 4.0
    head_hidden: int = 0  # 0 means 4 * embed_dim
    bottleneck_dim: int = 64
    patch_only_refs: bool = False

    def __post_init__(self):
        if self.image_res % self.patch_size:
            raise ValueError(f"image_res {self.image_res} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.out_dim < 1:
            raise ValueError("depth must be >= 0 and out_dim >= 1")

    @property
    def grid(self) -> int:
        return self.image_res // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


@dataclass
class EncoderOutput:
    cls_feat: Tensor  # (B, D)
    patch_feats: Tensor  # (B, N, D)
    ref_feats: Tensor  # (B, R, D)
    cls_logits: Tensor | None = None  # (B, K)
    ref_logits: Tensor | None = None  # (B, R, K)


def cubic_kernel(x: Tensor, a: float = CUBIC_A) -> Tensor:
    x = x.abs()
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return torch.where(x <= 1, near, torch.where(x < 2, far, torch.zeros_like(x)))


def _cubic_taps(coord: Tensor, size: int) -> tuple[Tensor, Tensor]:
    """Indices and weights of the four taps around ``coord`` (grid-index units)."""
    base = torch.floor(coord)
    t = coord - base
    offsets = torch.arange(-1, 3, dtype=coord.dtype, device=coord.device)
    weights = cubic_kernel(t.unsqueeze(-1) - offsets)
    idx = (base.long().unsqueeze(-1) + offsets.long()).clamp(0, size - 1)
    return idx, weights


def interpolate_pos_embed(grid: Tensor, rel: Tensor) -> Tensor:
    """Catmull-Rom bicubic lookup of a ``(G, G, D)`` grid at relative points ``(..., 2)``.

    ``rel[..., 0]`` is the horizontal coordinate ``u`` and ``rel[..., 1]`` the
    vertical ``v``, both in [0, 1]. Node ``(i, j)`` sits at the centre of patch
    ``(i, j)``, i.e. ``u = (j + 0.5) / G``; taps beyond the border clamp to the
    edge nodes. Gradients flow into ``grid``.
    """
    if rel.numel() and (bool((rel < 0).any()) or bool((rel > 1).any())):
        raise ValueError("relative coordinates must lie in [0, 1]")
    g, g2, d = grid.shape
    if g != g2:
        raise ValueError(f"positional grid must be square, got {tuple(grid.shape)}")
    lead = rel.shape[:-1]
    flat = rel.reshape(-1, 2).to(grid.dtype)
    ix, wx = _cubic_taps(flat[:, 0] * g - 0.5, g)
    iy, wy = _cubic_taps(flat[:, 1] * g - 0.5, g)
    idx = (iy.unsqueeze(-1) * g + ix.unsqueeze(-2)).reshape(-1, 16)
    w = (wy.unsqueeze(-1) * wx.unsqueeze(-2)).reshape(-1, 16, 1)
    taps = grid.reshape(g * g, d)[idx]
    return (taps * w).sum(dim=1).reshape(*lead, d)


def build_attention_mask(n: int, r: int, patch_only_refs: bool = False) -> Tensor:
    """Boolean ``(1+N+R, 1+N+R)`` matrix; ``allowed[q, k]`` lets query ``q`` read key ``k``."""
    if n < 1 or r < 0:
        raise ValueError(f"need n >= 1 and r >= 0, got n={n}, r={r}")
    t = 1 + n + r
    allowed = torch.zeros(t, t, dtype=torch.bool)
    allowed[:, : 1 + n] = True
    if patch_only_refs and r:
        allowed[1 + n :, 0] = False
    return allowed


def mask_to_bias(allowed: Tensor, dtype: torch.dtype) -> Tensor:
    return torch.zeros(allowed.shape, dtype=dtype).masked_fill(~allowed, MASK_VALUE)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, bias: Tensor | None = None, return_attn: bool = False):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            logits = logits + bias
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor, bias: Tensor | None = None, return_attn: bool = False):
        if return_attn:
            h, attn = self.attn(self.norm1(x), bias, return_attn=True)
        else:
            h = self.attn(self.norm1(x), bias)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return (x, attn) if return_attn else x


class ProjectionHead(nn.Module):
    """3-layer GELU MLP, L2 normalisation, then a weight-normalised prototype layer."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, bottleneck: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        # Prototype directions; the effective weight is row-normalised with unit gain.
        self.prototypes_v = nn.Parameter(torch.empty(out_dim, bottleneck))

    def prototypes(self, z: Tensor) -> Tensor:
        z = F.normalize(z, dim=-1, eps=1e-12)
        w = F.normalize(self.prototypes_v, dim=-1, eps=1e-12)
        return z @ w.transpose(0, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.prototypes(self.mlp(x))


class VisionTransformer(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = c = config
        self.patch_embed = nn.Linear(3 * c.patch_size**2, c.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(c.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(c.grid, c.grid, c.embed_dim))
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = nn.LayerNorm(c.embed_dim, eps=1e-6)
        self.head = ProjectionHead(
            c.embed_dim, c.out_dim, c.head_hidden or 4 * c.embed_dim, c.bottleneck_dim
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.head.prototypes_v, std=0.02)

    def patch_positions(self, grid: int) -> Tensor:
        """Positional embeddings for a ``grid x grid`` patch layout, ``(grid*grid, D)``."""
        if grid == self.config.grid:
            return self.pos_embed.reshape(grid * grid, -1)
        centers = (torch.arange(grid, dtype=self.pos_embed.dtype) + 0.5) / grid
        vv, uu = torch.meshgrid(centers, centers, indexing="ij")
        rel = torch.stack([uu, vv], dim=-1).reshape(-1, 2)
        return interpolate_pos_embed(self.pos_embed, rel)

    def patchify(self, pixels: Tensor) -> Tensor:
        """``(B, H, W, 3)`` images to ``(B, N, D)`` patch embeddings with positions added."""
        b, h, w, ch = pixels.shape
        p = self.config.patch_size
        if h != w or h % p or ch != 3:
            raise ValueError(f"expected square (B, H, W, 3) input divisible by {p}, got {tuple(pixels.shape)}")
        g = h // p
        patches = pixels.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
        return self.patch_embed(patches) + self.patch_positions(g)

    def reference_tokens(self, rel: Tensor) -> Tensor:
        return interpolate_pos_embed(self.pos_embed, rel)

    def tokens(self, pixels: Tensor, rel: Tensor | None = None) -> Tensor:
        patches = self.patchify(pixels)
        b = patches.shape[0]
        parts = [self.cls_token.expand(b, 1, -1), patches]
        if rel is not None and rel.shape[1]:
            parts.append(self.reference_tokens(rel))
        return torch.cat(parts, dim=1)

    def encode(self, tokens: Tensor, allowed: Tensor) -> Tensor:
        """Run all blocks under ``allowed`` and the final norm. Returns ``(B, T, D)``."""
        if allowed.shape != (tokens.shape[1], tokens.shape[1]):
            raise ValueError(f"mask {tuple(allowed.shape)} does not match {tokens.shape[1]} tokens")
        bias = None if bool(allowed.all()) else mask_to_bias(allowed, tokens.dtype)
        x = tokens
        for blk in self.blocks:
            x = blk(x, bias)
        x = self.norm(x)
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite encoder activations")
        return x

    def forward(self, pixels: Tensor, rel: Tensor | None = None, with_head: bool = True) -> EncoderOutput:
        x = self.tokens(pixels, rel)
        n = (pixels.shape[1] // self.config.patch_size) ** 2
        r = x.shape[1] - 1 - n
        out = self.encode(x, build_attention_mask(n, r, self.config.patch_only_refs))
        res = EncoderOutput(cls_feat=out[:, 0], patch_feats=out[:, 1 : 1 + n], ref_feats=out[:, 1 + n :])
        if with_head:
            res.cls_logits = self.head(res.cls_feat)
            res.ref_logits = self.head(res.ref_feats)
        return res

    @torch.no_grad()
    def last_attention(self, pixels: Tensor) -> Tensor:
        """Last-block attention weights ``(B, heads, T, T)`` with no reference tokens."""
        if not self.blocks:
            raise ValueError("encoder has no attention blocks")
        x = self.tokens(pixels)
        for blk in self.blocks[:-1]:
            x = blk(x)
        _, attn = self.blocks[-1](x, return_attn=True)
        return attn


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_tensor(pixels, dtype: torch.dtype = torch.float32) -> Tensor:
    t = torch.as_tensor(pixels)
    return t.to(dtype) if t.dtype != dtype else t

