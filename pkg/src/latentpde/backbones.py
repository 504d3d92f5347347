"""Denoisers eps(z_n, n, c) over latent trajectories (B, C, T, H, W).

``DiT`` patchifies space-time, conditions every block with adaLN-Zero driven
by the timestep embedding plus the mean-pooled condition, and attends to the
full condition sequence through cross-attention after self-attention.
``Unet3D`` is the convolutional alternative with cross-attention at the
bottleneck.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import tensor_core
from .autoencoder import _groups

# ---------------------------------------------------------------------------
# flop accounting
# ---------------------------------------------------------------------------

_counter = threading.local()


def matmul_flops(m: int, n: int, k: int) -> int:
    """(m x k) @ (k x n): one multiply and one add per term."""
    return 2 * m * n * k


def _report(name: str, flops: int) -> None:
    stack = getattr(_counter, "stack", None)
    if stack:
        stack[-1][name] = stack[-1].get(name, 0) + int(flops)


@contextmanager
def count_flops():
    """Collect analytic flops of Linear/Conv layers and attention cores run inside."""
    stack = getattr(_counter, "stack", None)
    if stack is None:
        stack = _counter.stack = []
    table: dict[str, int] = {}
    stack.append(table)
    hooks = []
    try:
        yield table, hooks
    finally:
        for h in hooks:
            h.remove()
        stack.pop()


def flops_forward(model: nn.Module, *inputs, **kwargs) -> dict[str, int]:
    """Per-layer flop table (plus ``"total"``) for one forward pass on ``inputs``."""
    with count_flops() as (table, hooks):
        for name, mod in model.named_modules():
            if isinstance(mod, (nn.Linear, nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
                mod._flop_name = name
                hooks.append(mod.register_forward_hook(hook_factory()))
        with torch.no_grad():
            model(*inputs, **kwargs)
    table = dict(table)
    table["total"] = sum(table.values())
    return table


def hook_factory():
    def hook(mod, inputs, out):
        x = inputs[0]
        if isinstance(mod, nn.Linear):
            rows = x.numel() // x.shape[-1]
            _report(mod._flop_name, matmul_flops(rows, mod.out_features, mod.in_features))
        elif isinstance(mod, (nn.Conv2d, nn.Conv3d)):
            k = math.prod(mod.kernel_size)
            positions = out.numel() // out.shape[1]
            _report(mod._flop_name, 2 * k * (mod.in_channels // mod.groups) * mod.out_channels * positions)
        else:
            k = math.prod(mod.kernel_size)
            positions = x.numel() // x.shape[1]
            _report(mod._flop_name, 2 * k * mod.in_channels * (mod.out_channels // mod.groups) * positions)

    return hook


def autoregressive_flops(per_step: int, n_steps: int) -> int:
    """Training-compute parity: a one-step model is charged once per timestep."""
    return per_step * n_steps


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class Attention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is None."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None, name: str = "attn"):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_dim or dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self._core_name = name

    def forward(self, x, context=None, mask=None):
        B, L, D = x.shape
        ctx = x if context is None else context
        h = self.heads
        q = self.q(x).view(B, L, h, D // h).transpose(1, 2)
        k, v = self.kv(ctx).view(B, ctx.shape[1], 2, h, D // h).permute(2, 0, 3, 1, 4)
        if mask is not None:
            mask = mask[:, None, None, :]
        _report(self._core_name, 2 * matmul_flops(L, ctx.shape[1], D // h) * B * h)
        out = tensor_core.scaled_dot_product_attention(q, k, v, mask)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def timestep_embedding(n: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = n.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(torch.get_default_dtype())


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, n):
        emb = timestep_embedding(n, self.freq_dim)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


def sincos_3d(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed sin-cos position table for a (T, H, W) token grid; dim split over 3 axes."""
    per = [2 * (dim // 6)] * 3
    per[0] += dim - sum(per)
    tables = []
    for ax, (n, d) in enumerate(zip(grid, per)):
        pos = np.arange(n, dtype=np.float64)
        half = d // 2
        omega = 1.0 / 10000 ** (np.arange(half) / max(half, 1))
        out = np.einsum("p,f->pf", pos, omega)
        emb = np.concatenate([np.sin(out), np.cos(out)], axis=1)
        if d % 2:
            emb = np.concatenate([emb, np.zeros((n, 1))], axis=1)
        shape = [1, 1, 1, d]
        shape[ax] = n
        tables.append(np.broadcast_to(emb.reshape(shape), (*grid, d)))
    return np.concatenate(tables, axis=-1).reshape(-1, dim)


# ---------------------------------------------------------------------------
# DiT
# ---------------------------------------------------------------------------

@dataclass
class DiTConfig:
    in_channels: int = 4
    patch_t: int = 1
    patch_s: int = 2
    hidden: int = 128
    depth: int = 4
    heads: int = 4
    cond_dim: int = 64
    mlp_ratio: float = 4.0
    learn_sigma: bool = False
    cross_attn_every: int = 1
    freq_dim: int = 128

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.learn_sigma else self.in_channels

    def token_grid(self, latent_shape) -> tuple[int, int, int]:
        T, H, W = latent_shape
        if T % self.patch_t or H % self.patch_s or W % self.patch_s:
            raise ValueError(f"latent extents {tuple(latent_shape)} not divisible by patch ({self.patch_t}, {self.patch_s})")
        return T // self.patch_t, H // self.patch_s, W // self.patch_s

    def to_dict(self):
        return asdict(self)


class DiTBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, cond_dim: int, mlp_ratio: float, cross: bool):
        super().__init__()
        self.cross = cross
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads)
        if cross:
            self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
            self.cross_attn = Attention(hidden, heads, context_dim=cond_dim, name="cross_attn")
        self.norm3 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(hidden, int(hidden * mlp_ratio))
        self.n_mod = 9 if cross else 6
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, self.n_mod * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c, context, mask):
        mods = self.adaLN_modulation(c).chunk(self.n_mod, dim=-1)
        x = x + mods[2].unsqueeze(1) * self.attn(modulate(self.norm1(x), mods[0], mods[1]))
        if self.cross:
            x = x + mods[5].unsqueeze(1) * self.cross_attn(modulate(self.norm2(x), mods[3], mods[4]), context, mask)
        s, sc, g = mods[-3:]
        return x + g.unsqueeze(1) * self.mlp(modulate(self.norm3(x), s, sc))


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)
        self.linear = nn.Linear(hidden, out)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


def _null_context(null_token: torch.Tensor, batch: int):
    tokens = null_token.view(1, 1, -1).expand(batch, 1, -1)
    mask = torch.ones(batch, 1, dtype=torch.bool)
    return tokens, mask


def _unpack_cond(cond, null_token, batch):
    """(tokens, mask, pooled) from a condition (or the learned null token)."""
    if cond is None or getattr(cond, "modality", None) == "null":
        tokens, mask = _null_context(null_token, batch)
        return tokens, mask, tokens[:, 0]
    tokens, mask = cond.tokens, cond.mask
    if tokens.shape[0] != batch:
        raise ValueError(f"condition batch {tokens.shape[0]} != latent batch {batch}")
    keep = getattr(cond, "keep", None)
    if keep is None:
        return tokens, mask, cond.pooled
    # dropped rows: null token in slot 0, everything else masked out
    k = keep.view(-1, 1)
    null = torch.zeros_like(tokens)
    null[:, 0] = null_token
    tokens = torch.where(k.unsqueeze(-1), tokens, null)
    first = torch.zeros_like(mask)
    first[:, 0] = True
    mask = torch.where(k, mask, first)
    m = mask.to(tokens.dtype).unsqueeze(-1)
    return tokens, mask, (tokens * m).sum(1) / m.sum(1)


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.in_channels * cfg.patch_t * cfg.patch_s**2
        self.x_embedder = nn.Linear(p, cfg.hidden)
        self.t_embedder = TimestepEmbedder(cfg.hidden, cfg.freq_dim)
        self.c_embedder = nn.Linear(cfg.cond_dim, cfg.hidden)
        self.null_token = nn.Parameter(torch.zeros(cfg.cond_dim))
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.hidden, cfg.heads, cfg.cond_dim, cfg.mlp_ratio, cross=(i % cfg.cross_attn_every == 0))
            for i in range(cfg.depth)
        )
        self.final = FinalLayer(cfg.hidden, cfg.out_channels * cfg.patch_t * cfg.patch_s**2)
        self._pos_cache: dict = {}

    def pos_embed(self, grid, dtype):
        key = (grid, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = torch.as_tensor(sincos_3d(grid, self.cfg.hidden), dtype=dtype)
        return self._pos_cache[key]

    def patchify(self, z):
        B, C, T, H, W = z.shape
        pt, ps = self.cfg.patch_t, self.cfg.patch_s
        gt, gh, gw = self.cfg.token_grid((T, H, W))
        x = z.reshape(B, C, gt, pt, gh, ps, gw, ps).permute(0, 2, 4, 6, 3, 5, 7, 1)
        return x.reshape(B, gt * gh * gw, pt * ps * ps * C), (gt, gh, gw)

    def unpatchify(self, x, grid):
        B = x.shape[0]
        gt, gh, gw = grid
        pt, ps, C = self.cfg.patch_t, self.cfg.patch_s, self.cfg.out_channels
        x = x.reshape(B, gt, gh, gw, pt, ps, ps, C).permute(0, 7, 1, 4, 2, 5, 3, 6)
        return x.reshape(B, C, gt * pt, gh * ps, gw * ps)

    def forward(self, z, n, cond=None, skip_blocks: bool = False):
        if z.dim() != 5 or z.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, T, H, W) latent, got {tuple(z.shape)}")
        B = z.shape[0]
        n = torch.as_tensor(n).reshape(-1).expand(B) if torch.as_tensor(n).numel() == 1 else torch.as_tensor(n)
        tokens, grid = self.patchify(z)
        x = self.x_embedder(tokens) + self.pos_embed(grid, tokens.dtype)
        ctx, mask, pooled = _unpack_cond(cond, self.null_token, B)
        c = self.t_embedder(n) + self.c_embedder(pooled)
        if not skip_blocks:
            for block in self.blocks:
                x = block(x, c, ctx, mask)
        return self.unpatchify(self.final(x, c), grid)


def dit_flops(cfg: DiTConfig, latent_shape, cond_len: int, batch: int = 1) -> dict[str, int]:
    """Closed-form forward flops, layer by layer (matches ``flops_forward``)."""
    gt, gh, gw = cfg.token_grid(latent_shape)
    L, h = gt * gh * gw, cfg.hidden
    p = cfg.in_channels * cfg.patch_t * cfg.patch_s**2
    mlp_h = int(h * cfg.mlp_ratio)
    hd = h // cfg.heads
    table = {
        "x_embedder": matmul_flops(L, h, p),
        "t_embedder": matmul_flops(1, h, cfg.freq_dim) + matmul_flops(1, h, h),
        "c_embedder": matmul_flops(1, h, cfg.cond_dim),
    }
    for i in range(cfg.depth):
        cross = i % cfg.cross_attn_every == 0
        n_mod = 9 if cross else 6
        blk = {
            "adaLN": matmul_flops(1, n_mod * h, h),
            "self_attn_proj": matmul_flops(L, h, h) + matmul_flops(L, 2 * h, h) + matmul_flops(L, h, h),
            "self_attn_core": 2 * matmul_flops(L, L, hd) * cfg.heads,
            "mlp": matmul_flops(L, mlp_h, h) + matmul_flops(L, h, mlp_h),
        }
        if cross:
            blk["cross_attn_proj"] = (matmul_flops(L, h, h) + matmul_flops(cond_len, 2 * h, cfg.cond_dim)
                                      + matmul_flops(L, h, h))
            blk["cross_attn_core"] = 2 * matmul_flops(L, cond_len, hd) * cfg.heads
        for k, v in blk.items():
            table[f"blocks.{i}.{k}"] = v
    table["final"] = matmul_flops(1, 2 * h, h) + matmul_flops(L, cfg.out_channels * cfg.patch_t * cfg.patch_s**2, h)
    table = {k: v * batch for k, v in table.items()}
    table["total"] = sum(table.values())
    return table


# ---------------------------------------------------------------------------
# Unet
# ---------------------------------------------------------------------------

@dataclass
class UnetConfig:
    in_channels: int = 4
    widths: tuple[int, ...] = (64, 128)
    temporal_down: tuple[bool, ...] = (False,)
    cond_dim: int = 64
    heads: int = 4
    learn_sigma: bool = False
    freq_dim: int = 128

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.temporal_down = tuple(self.temporal_down)
        if len(self.temporal_down) != len(self.widths) - 1:
            raise ValueError("temporal_down needs one flag per downsampling stage")

    @property
    def out_channels(self):
        return 2 * self.in_channels if self.learn_sigma else self.in_channels

    def validate(self, latent_shape):
        T, H, W = latent_shape
        stages = len(self.widths) - 1
        ft = 2 ** sum(self.temporal_down)
        if T % ft or H % 2**stages or W % 2**stages:
            raise ValueError(f"latent extents {tuple(latent_shape)} not divisible by 2^{stages}")

    def to_dict(self):
        return asdict(self)


class TimeResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Unet3D(nn.Module):
    def __init__(self, cfg: UnetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        emb = w[0] * 4
        self.t_embedder = TimestepEmbedder(emb, cfg.freq_dim)
        self.null_token = nn.Parameter(torch.zeros(cfg.cond_dim))
        self.conv_in = nn.Conv3d(cfg.in_channels, w[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(len(w) - 1):
            self.down_blocks.append(TimeResBlock(w[i], w[i], emb))
            st = 2 if cfg.temporal_down[i] else 1
            self.downs.append(nn.Conv3d(w[i], w[i + 1], 3, stride=(st, 2, 2), padding=1))
        self.mid1 = TimeResBlock(w[-1], w[-1], emb)
        self.cross_norm = nn.LayerNorm(w[-1])
        self.cross_attn = Attention(w[-1], cfg.heads, context_dim=cfg.cond_dim, name="cross_attn")
        nn.init.zeros_(self.cross_attn.proj.weight)
        nn.init.zeros_(self.cross_attn.proj.bias)
        self.mid2 = TimeResBlock(w[-1], w[-1], emb)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(w) - 1)):
            st = 2 if cfg.temporal_down[i] else 1
            self.ups.append(nn.ConvTranspose3d(w[i + 1], w[i], (st, 2, 2), stride=(st, 2, 2)))
            self.up_blocks.append(TimeResBlock(2 * w[i], w[i], emb))
        self.norm_out = nn.GroupNorm(_groups(w[0]), w[0])
        self.conv_out = nn.Conv3d(w[0], cfg.out_channels, 3, padding=1)

    def forward(self, z, n, cond=None):
        self.cfg.validate(z.shape[2:])
        B = z.shape[0]
        n = torch.as_tensor(n).reshape(-1).expand(B) if torch.as_tensor(n).numel() == 1 else torch.as_tensor(n)
        emb = self.t_embedder(n)
        ctx, mask, _ = _unpack_cond(cond, self.null_token, B)
        h = self.conv_in(z)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, emb)
        shape = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        tokens = tokens + self.cross_attn(self.cross_norm(tokens), ctx, mask)
        h = tokens.transpose(1, 2).reshape(shape)
        h = self.mid2(h, emb)
        for up, block in zip(self.ups, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def build_backbone(kind: str, cfg) -> nn.Module:
    if kind == "dit":
        return DiT(cfg)
    if kind == "unet":
        return Unet3D(cfg)
    raise ValueError(f"unknown backbone {kind!r}")


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
