"""Condition sequences for the denoiser: first-frame and text encoders, captioners.

A condition is a token sequence ``(B, N_c, d_c)`` with a boolean key mask
(True = attend). Its pooled vector is always recomputed from the tokens.
"""
from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy import ndimage

from .autoencoder import AutoencoderConfig, CNNEncoder
from .backbones import Attention, Mlp
from .geometry import FieldSample, kernel_aggregate

log = logging.getLogger(__name__)

MODALITIES = ("first-frame", "text", "vector", "null")


@dataclass
class ConditionSequence:
    tokens: torch.Tensor  # (B, N_c, d_c)
    mask: torch.Tensor  # (B, N_c) bool
    modality: str = "null"
    keep: torch.Tensor | None = None  # (B,) bool; False rows use the denoiser's learned null token

    def __post_init__(self):
        if self.tokens.dim() == 2:
            self.tokens = self.tokens.unsqueeze(0)
        if self.mask is None:
            self.mask = torch.ones(self.tokens.shape[:2], dtype=torch.bool)
        if self.mask.dim() == 1:
            self.mask = self.mask.unsqueeze(0)
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.mask.shape != self.tokens.shape[:2]:
            raise ValueError("mask shape must match the token grid")

    @property
    def pooled(self) -> torch.Tensor:
        """Arithmetic mean over attended tokens."""
        m = self.mask.to(self.tokens.dtype).unsqueeze(-1)
        return (self.tokens * m).sum(1) / m.sum(1).clamp_min(1.0)

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def index(self, idx) -> "ConditionSequence":
        keep = None if self.keep is None else self.keep[idx]
        return ConditionSequence(self.tokens[idx], self.mask[idx], self.modality, keep)

    def repeat(self, k: int) -> "ConditionSequence":
        keep = None if self.keep is None else self.keep.repeat_interleave(k, 0)
        return ConditionSequence(self.tokens.repeat_interleave(k, 0), self.mask.repeat_interleave(k, 0),
                                 self.modality, keep)

    def detach(self) -> "ConditionSequence":
        return ConditionSequence(self.tokens.detach(), self.mask, self.modality, self.keep)


def null_condition(d_c: int, batch: int = 1, dtype=None) -> ConditionSequence:
    return ConditionSequence(torch.zeros(batch, 1, d_c, dtype=dtype or torch.get_default_dtype()),
                             torch.ones(batch, 1, dtype=torch.bool), "null")


def concat_modalities(first: ConditionSequence | None, second: ConditionSequence | None, d_c: int,
                      batch: int) -> ConditionSequence:
    """Joint sequence [text ; frame]; an absent modality becomes one zero token."""
    parts = []
    for c in (first, second):
        if c is None:
            c = null_condition(d_c, batch)
        parts.append(c)
    tokens = torch.cat([p.tokens for p in parts], dim=1)
    mask = torch.cat([p.mask for p in parts], dim=1)
    present = [c.modality for c in (first, second) if c is not None]
    return ConditionSequence(tokens, mask, present[0] if present else "null")


def drop_condition(cond: ConditionSequence, p: float, gen: torch.Generator | None) -> ConditionSequence:
    """Mark whole samples (probability ``p``) for the null condition (classifier-free training)."""
    keep = torch.rand(cond.batch, generator=gen) >= p
    return ConditionSequence(cond.tokens, cond.mask, cond.modality, keep)


# ---------------------------------------------------------------------------
# first frame
# ---------------------------------------------------------------------------

class FirstFrameEncoder(nn.Module):
    """Conv stack over u(0, .) on the latent grid -> flattened tokens."""

    def __init__(self, in_channels: int = 3, d_c: int = 64, widths=(16, 32, 64)):
        super().__init__()
        stages = len(widths) - 1
        self.cfg = AutoencoderConfig(in_channels=in_channels, latent_channels=d_c, widths=tuple(widths),
                                     temporal_down=(False,) * stages, res_blocks=(0,) * stages, attention=False)
        self.net = CNNEncoder(self.cfg, out_channels=d_c)
        self.d_c = d_c

    def n_tokens(self, spatial) -> int:
        f = self.cfg.factors()[1]
        return math.prod(s // f for s in spatial)

    def forward(self, frame: torch.Tensor) -> ConditionSequence:
        """``frame`` is (B, C, H, W) in normalised units."""
        if frame.dim() != 4:
            raise ValueError(f"first frame must be (B, C, H, W), got {tuple(frame.shape)}")
        self.cfg.validate((1, *frame.shape[2:]))
        h = self.net(frame.unsqueeze(2))  # (B, d_c, 1, h, w)
        tokens = h.flatten(2).transpose(1, 2)
        return ConditionSequence(tokens, torch.ones(tokens.shape[:2], dtype=torch.bool), "first-frame")


def first_frame_encode(frame, encoder: FirstFrameEncoder, transcoder=None) -> ConditionSequence:
    """Condition from a grid frame (C, H, W) / (B, C, H, W) or a mesh sample's first time slice."""
    if isinstance(frame, FieldSample):
        if transcoder is None:
            raise ValueError("mesh frames need a transcoder")
        first = FieldSample(frame.times[:1], frame.points, frame.values[:1], frame.channels)
        spec = transcoder.spec
        grid_spec = type(spec)(1, spec.spatial, spec.radius, spec.weight_mode)
        grid = kernel_aggregate(first, grid_spec, transcoder.encoder_kernel)[0]  # (H, W, C)
        frame = grid.permute(2, 0, 1)
    if frame.dim() == 3:
        frame = frame.unsqueeze(0)
    return encoder(frame)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
PAD, UNK, BOS, EOS = range(4)
_TOKEN = re.compile(r"\d+\.\d+|\d+|\w+|[^\w\s]")
_GLUE_LEFT = set(".,:;!?)")


def tokenize(text: str) -> list[str]:
    """Word/punctuation split; decimal numbers are bucketed to two places."""
    out = []
    for tok in _TOKEN.findall(text):
        if "." in tok and tok[0].isdigit():
            tok = f"{float(tok):.2f}"
        out.append(tok)
    return out


def detokenize(tokens: list[str]) -> str:
    text = ""
    for tok in tokens:
        if not text or tok in _GLUE_LEFT:
            text += tok
        else:
            text += " " + tok
    return text


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: list(SPECIALS))

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        seen = dict.fromkeys(SPECIALS)
        for text in corpus:
            for tok in tokenize(text):
                seen.setdefault(tok)
        return cls(list(seen))

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str, max_len: int = 64) -> list[int]:
        toks = tokenize(text)
        if not toks:
            raise ValueError("empty caption")
        ids = [BOS] + [self._ids.get(t, UNK) for t in toks] + [EOS]
        if len(ids) > max_len:
            warnings.warn(f"caption of {len(ids)} tokens truncated to {max_len}", stacklevel=2)
            ids = ids[: max_len - 1] + [EOS]
        return ids

    def decode(self, ids) -> str:
        words = [self.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
        return detokenize(words)

    def batch(self, texts, max_len: int = 64, pad_to: int | None = None) -> torch.Tensor:
        seqs = [self.encode(t, max_len) for t in texts]
        L = max(pad_to or 0, max(len(s) for s in seqs))
        out = torch.full((len(seqs), L), PAD, dtype=torch.long)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.as_tensor(s)
        return out

    def to_dict(self):
        return {"tokens": list(self.tokens)}


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 4 * dim)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Small transformer from scratch: embeddings + learned positions + masked layers."""

    def __init__(self, vocab_size: int, d_c: int = 64, max_len: int = 64, layers: int = 2, heads: int = 4):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, d_c)
        self.pos = nn.Parameter(torch.randn(max_len, d_c) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(d_c, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(d_c)

    def forward(self, ids: torch.Tensor) -> ConditionSequence:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] > self.max_len:
            raise ValueError(f"token sequence longer than {self.max_len}")
        mask = ids != PAD
        if not bool(mask.any(1).all()):
            raise ValueError("empty caption")
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        for layer in self.layers:
            x = layer(x, mask)
        return ConditionSequence(self.norm(x), mask, "text")


def text_encode(captions, vocab: Vocabulary, encoder: TextEncoder) -> ConditionSequence:
    if isinstance(captions, (str, Caption)):
        captions = [captions]
    texts = [c.text if isinstance(c, Caption) else c for c in captions]
    return encoder(vocab.batch(texts, encoder.max_len))


class VectorEncoder(nn.Module):
    """Parameter vector in [-1, 1] -> a single condition token."""

    def __init__(self, n_params: int, d_c: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_params, d_c), nn.SiLU(), nn.Linear(d_c, d_c))

    def forward(self, vec: torch.Tensor) -> ConditionSequence:
        tokens = self.net(vec).unsqueeze(1)
        return ConditionSequence(tokens, torch.ones(tokens.shape[:2], dtype=torch.bool), "vector")


# ---------------------------------------------------------------------------
# captioners
# ---------------------------------------------------------------------------

@dataclass
class Caption:
    text: str
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def flow_regime(re_: float) -> str:
    if not (re_ > 0) or not math.isfinite(re_):
        raise ValueError(f"Reynolds number must be positive and finite, got {re_}")
    if re_ < 200:
        return "laminar"
    if re_ < 350:
        return "transition"
    return "turbulent"


CYLINDER_TEMPLATE = (
    "Fluid passes over a cylinder with a radius of {radius:.2f} and position: {x:.2f}, {y:.2f}. "
    "Fluid enters with a velocity of {velocity:.2f}. The Reynolds number is {reynolds}. The flow is {regime}."
)


@dataclass
class CylinderParams:
    radius: float  # metres
    x: float
    y: float
    velocity: float  # m/s
    reynolds: float

    def vector(self) -> np.ndarray:
        return np.array([self.radius, self.x, self.y, self.velocity, self.reynolds], dtype=np.float64)


def caption_cylinder(p: CylinderParams) -> Caption:
    """Radius is rendered in centimetres, position in metres."""
    vals = p.vector()
    if not np.all(np.isfinite(vals)):
        raise ValueError("cylinder parameters must be finite")
    regime = flow_regime(p.reynolds)
    text = CYLINDER_TEMPLATE.format(radius=p.radius * 100, x=p.x, y=p.y, velocity=p.velocity,
                                    reynolds=int(round(p.reynolds)), regime=regime)
    params = {"radius_cm": p.radius * 100, "position_m": [p.x, p.y], "velocity": p.velocity,
              "reynolds": p.reynolds, "regime": regime}
    return Caption(text, params)


def caption_values_only(p: CylinderParams) -> Caption:
    """Prompt with the numbers and nothing else."""
    text = f"{p.radius * 100:.2f}, {p.x:.2f}, {p.y:.2f}, {p.velocity:.2f}, {int(round(p.reynolds))}"
    return Caption(text, {"radius_cm": p.radius * 100, "position_m": [p.x, p.y], "velocity": p.velocity,
                          "reynolds": p.reynolds})


def normalize_vectors(vecs: np.ndarray, lo: np.ndarray | None = None, hi: np.ndarray | None = None):
    """Map each parameter independently onto [-1, 1] using training-set extrema."""
    vecs = np.asarray(vecs, dtype=np.float64)
    lo = vecs.min(0) if lo is None else lo
    hi = vecs.max(0) if hi is None else hi
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2 * (vecs - lo) / span - 1, lo, hi


def random_cylinder_params(rng: np.random.Generator, nu: float = 1e-4) -> CylinderParams:
    """Radius 3-7 cm inside a 1.6 x 0.4 m channel; Re = U * 2r / nu."""
    r = rng.uniform(0.03, 0.07)
    x = rng.uniform(0.15, 0.5)
    y = rng.uniform(0.12, 0.28)
    u = rng.uniform(0.2, 1.5)
    return CylinderParams(r, x, y, u, u * 2 * r / nu)


def _plume_components(density: np.ndarray, threshold: float):
    labels, n = ndimage.label(density > threshold)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum(np.ones_like(density), labels, idx)
    cents = ndimage.center_of_mass(density, labels, idx)
    return sorted(zip(areas, cents), key=lambda t: (-t[0], t[1]))


def _where(cy: float, cx: float, h: int, w: int) -> str:
    vert = "top" if cy >= (h - 1) / 2 else "bottom"  # row index grows upward
    horiz = "right" if cx >= (w - 1) / 2 else "left"
    return f"{vert} {horiz}"


def caption_smoke(frame: np.ndarray, buoyancy: float, threshold: float = 0.1) -> Caption:
    """Buoyancy prefix plus a rule-based plume description of the density channel.

    Each connected component above ``threshold * max`` is reported with a size
    class (area relative to the largest), its quadrant and its centroid (x, y).
    """
    d = np.asarray(frame)[..., 2]
    h, w = d.shape
    comps = _plume_components(d, threshold * max(float(d.max()), 1e-12))
    parts = [f"The buoyancy factor is {buoyancy:.2f}."]
    if not comps:
        parts.append("There is no visible smoke.")
    else:
        biggest = comps[0][0]
        descr = []
        for area, (cy, cx) in comps:
            rel = area / biggest
            size = "large" if rel > 0.66 else ("medium" if rel > 0.33 else "small")
            x, y = cx / max(w - 1, 1), cy / max(h - 1, 1)
            descr.append(f"a {size} plume in the {_where(cy, cx, h, w)} at {x:.2f}, {y:.2f}")
        noun = "plume" if len(comps) == 1 else "plumes"
        parts.append(f"There {'is' if len(comps) == 1 else 'are'} {len(comps)} {noun}: " + ", ".join(descr) + ".")
    params = {"buoyancy": float(buoyancy), "plumes": len(comps)}
    return Caption(" ".join(parts), params)


def velocity_derivative_norm(values: np.ndarray, dt: float = 1.0) -> np.ndarray:
    """Per-step || d(vx)/dt + d(vy)/dt ||_2 over points, values (T, M, 2)."""
    dv = np.diff(values, axis=0) / dt
    return np.sqrt(((dv[..., 0] + dv[..., 1]) ** 2).sum(axis=1))


def karman_detect(sample, cutoff: float = 0.3, dt: float | None = None) -> bool:
    """True when the late-time velocity derivative norm stays above ``cutoff`` x its early value."""
    if isinstance(sample, FieldSample):
        try:
            vel = np.stack([sample.channel("vx"), sample.channel("vy")], axis=-1)
        except ValueError as e:
            raise ValueError("karman_detect needs vx and vy channels") from e
        if dt is None:
            dt = float(sample.times[1] - sample.times[0]) if len(sample.times) > 1 else 1.0
    else:
        arr = np.asarray(sample, dtype=np.float64)
        if arr.shape[-1] < 2:
            raise ValueError("karman_detect needs vx and vy channels")
        vel = arr[..., :2].reshape(arr.shape[0], -1, 2)
        dt = dt or 1.0
    if vel.shape[0] < 3:
        raise ValueError("karman_detect needs at least 3 timesteps")
    norm = velocity_derivative_norm(vel, dt)
    k = max(1, len(norm) // 3)
    early, late = norm[:k].mean(), norm[-k:].mean()
    return bool(late > cutoff * early) if early > 0 else bool(late > 0)
