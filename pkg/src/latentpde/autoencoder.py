"""Variational convolutional autoencoder over the uniform latent grid.

Tensors are channel-first ``(B, C, T, H, W)``. The encoder halves the grid
per stage (time only where the config allows it) and emits a mean and a
log-variance head; the diffusion model works on ``scale * z``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .geometry import FieldSample, MeshTranscoder, build_ball_index
from .tensor_core import adam_step, generator, make_adam, np_rng, scaled_dot_product_attention

log = logging.getLogger(__name__)

LOGVAR_RANGE = (-30.0, 20.0)


class NumericalError(RuntimeError):
    pass


@dataclass
class AutoencoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    widths: tuple[int, ...] = (16, 32, 48)
    temporal_down: tuple[bool, ...] = (True, True)
    factor: int = 2
    res_blocks: tuple[int, ...] = (0, 0)
    attention: bool = True
    kl_weight: float = 2e-7
    recon_loss: str = "l1"
    kl_reduction: str = "sum"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.temporal_down = tuple(bool(t) for t in self.temporal_down)
        self.res_blocks = tuple(self.res_blocks)
        if len(self.temporal_down) != self.stages or len(self.res_blocks) != self.stages:
            raise ValueError("temporal_down and res_blocks need one entry per stage")
        if self.recon_loss not in ("l1", "l2"):
            raise ValueError("recon_loss must be 'l1' or 'l2'")
        if self.kl_reduction not in ("sum", "mean"):
            raise ValueError("kl_reduction must be 'sum' or 'mean'")

    @property
    def stages(self) -> int:
        return len(self.widths) - 1

    def factors(self) -> tuple[int, int]:
        """Total (temporal, spatial) downsampling."""
        t = self.factor ** sum(self.temporal_down)
        return t, self.factor**self.stages

    def validate(self, grid_shape: Sequence[int]) -> None:
        ft, fs = self.factors()
        T, *spatial = grid_shape
        if T % ft or any(s % fs for s in spatial):
            raise ValueError(
                f"grid {tuple(grid_shape)} not divisible by downsampling (time {ft}, space {fs}); "
                "truncate the horizon or change the stage layout"
            )

    def latent_shape(self, grid_shape: Sequence[int]) -> tuple[int, ...]:
        self.validate(grid_shape)
        ft, fs = self.factors()
        T, *spatial = grid_shape
        return (self.latent_channels, T // ft, *(s // fs for s in spatial))

    def compression_ratio(self, grid_shape: Sequence[int]) -> float:
        latent = math.prod(self.latent_shape(grid_shape))
        return self.in_channels * math.prod(grid_shape) / latent

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ResBlock3d(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in, eps=1e-6)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out, eps=1e-6)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock3d(nn.Module):
    """Single-head self-attention over all T*H*W positions."""

    def __init__(self, c: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(c), c, eps=1e-6)
        self.qkv = nn.Conv3d(c, 3 * c, 1)
        self.proj = nn.Conv3d(c, c, 1)

    def forward(self, x):
        B, C = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).flatten(2).transpose(1, 2).chunk(3, dim=-1)
        h = scaled_dot_product_attention(q, k, v)
        return x + self.proj(h.transpose(1, 2).reshape(x.shape))


class CNNEncoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig, out_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        f = cfg.factor
        self.conv_in = nn.Conv3d(cfg.in_channels, w[0], 3, padding=1)
        self.stages = nn.ModuleList()
        for i in range(cfg.stages):
            st = f if cfg.temporal_down[i] else 1
            blocks = [ResBlock3d(w[i], w[i]) for _ in range(cfg.res_blocks[i])]
            blocks.append(nn.Conv3d(w[i], w[i + 1], 3, stride=(st, f, f), padding=1))
            self.stages.append(nn.Sequential(*blocks))
        mid = [ResBlock3d(w[-1], w[-1])]
        if cfg.attention:
            mid.append(AttnBlock3d(w[-1]))
        mid.append(ResBlock3d(w[-1], w[-1]))
        self.mid = nn.Sequential(*mid)
        self.norm_out = nn.GroupNorm(_groups(w[-1]), w[-1], eps=1e-6)
        self.conv_out = nn.Conv3d(w[-1], out_channels or 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for stage in self.stages:
            h = stage(h)
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class CNNDecoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.widths
        f = cfg.factor
        self.conv_in = nn.Conv3d(cfg.latent_channels, w[-1], 3, padding=1)
        mid = [ResBlock3d(w[-1], w[-1])]
        if cfg.attention:
            mid.append(AttnBlock3d(w[-1]))
        mid.append(ResBlock3d(w[-1], w[-1]))
        self.mid = nn.Sequential(*mid)
        self.stages = nn.ModuleList()
        for i in reversed(range(cfg.stages)):
            st = f if cfg.temporal_down[i] else 1
            blocks = [nn.ConvTranspose3d(w[i + 1], w[i], (st, f, f), stride=(st, f, f))]
            blocks += [ResBlock3d(w[i], w[i]) for _ in range(cfg.res_blocks[i])]
            self.stages.append(nn.Sequential(*blocks))
        self.norm_out = nn.GroupNorm(_groups(w[0]), w[0], eps=1e-6)
        self.conv_out = nn.Conv3d(w[0], cfg.in_channels, 3, padding=1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for stage in self.stages:
            h = stage(h)
        return self.conv_out(F.silu(self.norm_out(h)))


@dataclass
class Latent:
    mean: torch.Tensor
    logvar: torch.Tensor
    scale: float = 1.0

    def __post_init__(self):
        self.logvar = self.logvar.clamp(*LOGVAR_RANGE)

    @property
    def std(self):
        return torch.exp(0.5 * self.logvar)


def reparameterize(lat: Latent, gen: torch.Generator | None = None) -> torch.Tensor:
    """z = mean + exp(logvar / 2) * xi with xi ~ N(0, I)."""
    xi = torch.randn(lat.mean.shape, generator=gen, dtype=lat.mean.dtype)
    return lat.mean + lat.std * xi


def kl_loss(lat: Latent, reduction: str = "sum") -> torch.Tensor:
    """KL(q(z|x) || N(0, I)), summed (or averaged) per sample, averaged over the batch."""
    kl = 0.5 * (lat.mean.pow(2) + lat.logvar.exp() - 1.0 - lat.logvar)
    per_sample = kl.flatten(1)
    per_sample = per_sample.sum(1) if reduction == "sum" else per_sample.mean(1)
    return per_sample.mean()


class LatentAutoencoder(nn.Module):
    """CNN encoder/decoder with an optional mesh transcoder in front/behind."""

    def __init__(self, cfg: AutoencoderConfig, transcoder: MeshTranscoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = CNNEncoder(cfg)
        self.decoder = CNNDecoder(cfg)
        self.transcoder = transcoder
        self.register_buffer("scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> Latent:
        self.cfg.validate(x.shape[2:])
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return Latent(mean, logvar, float(self.scale))

    def decode(self, z: torch.Tensor, scaled: bool = True) -> torch.Tensor:
        expected = self.cfg.latent_channels
        if z.dim() != 5 or z.shape[1] != expected:
            raise ValueError(f"latent must be (B, {expected}, T, H, W), got {tuple(z.shape)}")
        if scaled:
            z = z / self.scale
        return self.decoder(z)

    def encode_scaled(self, x: torch.Tensor) -> torch.Tensor:
        """Diffusion target: scale * posterior mean."""
        return self.encode(x).mean * self.scale

    def forward(self, x, gen=None):
        lat = self.encode(x)
        z = reparameterize(lat, gen) if self.training else lat.mean
        return self.decoder(z), lat

    # mesh path -------------------------------------------------------------
    def encode_mesh(self, sample: FieldSample, index=None) -> Latent:
        if self.transcoder is None:
            raise ValueError("autoencoder has no mesh transcoder")
        grid = self.transcoder.encode(sample, index=index)
        return self.encode(grid.permute(3, 0, 1, 2).unsqueeze(0))

    def decode_mesh(self, z: torch.Tensor, queries: np.ndarray, scaled=True, index=None) -> torch.Tensor:
        grid = self.decode(z, scaled=scaled)[0].permute(1, 2, 3, 0)
        return self.transcoder.decode(grid, queries, index=index)


def cnn_encode(model: LatentAutoencoder, grid: torch.Tensor) -> Latent:
    return model.encode(grid)


def cnn_decode(model: LatentAutoencoder, z: torch.Tensor) -> torch.Tensor:
    return model.decode(z, scaled=True)


@torch.no_grad()
def estimate_latent_scale(model: LatentAutoencoder, batch: torch.Tensor, min_samples: int = 16) -> float:
    """1 / std of the posterior means of ``batch``; stored on the model."""
    if batch.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples to estimate the latent scale, got {batch.shape[0]}")
    was_training = model.training
    model.eval()
    means = torch.cat([model.encode(batch[i:i + 8]).mean for i in range(0, batch.shape[0], 8)])
    model.train(was_training)
    std = float(means.std())
    if not math.isfinite(std) or std < 1e-12:
        raise NumericalError(f"degenerate latent statistics (std={std}); cannot scale")
    s = 1.0 / std
    model.scale.fill_(s)
    return s


def recon_loss(pred, target, kind="l1"):
    return (pred - target).abs().mean() if kind == "l1" else (pred - target).pow(2).mean()


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)


def train_autoencoder(
    data,
    cfg: AutoencoderConfig,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
    model: LatentAutoencoder | None = None,
    log_every: int = 100,
    callback: Callable[[int, dict], None] | None = None,
    cosine: bool = True,
) -> tuple[LatentAutoencoder, TrainHistory]:
    """Fit L1 (or L2) reconstruction + kl_weight * KL.

    ``data`` is either a normalised grid array (N, T, H, W, C) or a list of
    mesh :class:`FieldSample` (then ``model`` must carry a transcoder).
    """
    mesh = isinstance(data, (list, tuple)) and len(data) and isinstance(data[0], FieldSample)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if model is None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = LatentAutoencoder(cfg)
    model.train()
    opt = make_adam(model.parameters(), lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / steps))) if cosine else None
    pick = np_rng(seed, 1)
    gen = generator(seed, 2)
    hist = TrainHistory()

    if mesh:
        if model.transcoder is None:
            raise ValueError("mesh data needs an autoencoder with a transcoder")
        spec = model.transcoder.spec
        enc_idx = [build_ball_index(s.coords(), spec.coords(), spec.radius) for s in data]
        dec_idx = [build_ball_index(spec.coords(), s.coords(), spec.radius) for s in data]
        targets = [torch.as_tensor(s.flat_values(), dtype=torch.get_default_dtype()) for s in data]
    else:
        grids = torch.as_tensor(np.asarray(data), dtype=torch.get_default_dtype()).permute(0, 4, 1, 2, 3).contiguous()
        cfg.validate(grids.shape[2:])

    for step in range(steps):
        opt.zero_grad(set_to_none=True)
        ids = pick.choice(len(data), size=min(batch_size, len(data)), replace=False)
        if mesh:
            rec, kl = 0.0, 0.0
            for i in ids:
                lat = model.encode_mesh(data[i], index=enc_idx[i])
                z = reparameterize(lat, gen)
                out = model.decode_mesh(z, data[i].coords(), scaled=False, index=dec_idx[i])
                rec = rec + recon_loss(out, targets[i], cfg.recon_loss) / len(ids)
                kl = kl + kl_loss(lat, cfg.kl_reduction) / len(ids)
        else:
            x = grids[torch.as_tensor(ids)]
            lat = model.encode(x)
            out = model.decode(reparameterize(lat, gen), scaled=False)
            rec = recon_loss(out, x, cfg.recon_loss)
            kl = kl_loss(lat, cfg.kl_reduction)
        loss = rec + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite autoencoder loss at step {step}: recon={float(rec.detach())}, kl={float(kl.detach())}")
        loss.backward()
        adam_step(opt)
        if sched is not None:
            sched.step()
        hist.loss.append(float(loss.detach()))
        hist.recon.append(float(rec.detach()))
        hist.kl.append(float(kl.detach()))
        if callback is not None:
            callback(step, {"loss": hist.loss[-1], "recon": hist.recon[-1], "kl": hist.kl[-1]})
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("ae step %d loss %.5f recon %.5f kl %.1f", step, hist.loss[-1], hist.recon[-1], hist.kl[-1])
    model.eval()
    return model, hist
