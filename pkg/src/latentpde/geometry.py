"""Mesh <-> uniform-grid transcoding with truncated learned kernel integrals.

A field given on arbitrary spatio-temporal points ``y = (t, x)`` is mapped to
a uniform latent grid by summing kernel-weighted neighbours inside a ball of
radius ``r`` around each grid node, and mapped back to arbitrary query points
by the same construction in the other direction. All coordinates live in the
unit cube.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

WEIGHT_MODES = ("equal", "density", "monte_carlo")


class CoverageError(ValueError):
    """A ball contains no source points."""


class EmptyBallWarning(UserWarning):
    pass


def ball_volume(radius: float, dim: int) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * radius**dim


@dataclass
class FieldSample:
    """Trajectory ``values[t, m, c]`` on ``points[m]`` at ``times[t]``.

    ``points`` and ``times`` are normalised to [0, 1]; the mesh is shared by
    all time levels.
    """

    times: np.ndarray
    points: np.ndarray
    values: np.ndarray
    channels: tuple[str, ...] = ()
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be (M, D)")
        if self.values.shape[:2] != (len(self.times), len(self.points)):
            raise ValueError(
                f"values shape {self.values.shape} does not match T={len(self.times)}, M={len(self.points)}"
            )
        for name, arr in (("times", self.times), ("points", self.points)):
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"{name} must be normalised to [0, 1]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        if self.channels and len(self.channels) != self.values.shape[-1]:
            raise ValueError("channel names do not match value channels")

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def spatial_dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[-1]

    def coords(self) -> np.ndarray:
        """All ``(t, x)`` pairs, time-major, shape (T*M, 1+D)."""
        t = np.repeat(self.times, self.n_points)[:, None]
        x = np.tile(self.points, (self.n_times, 1))
        return np.concatenate([t, x], axis=1)

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.n_channels)

    def channel(self, name: str) -> np.ndarray:
        return self.values[..., self.channels.index(name)]

    @classmethod
    def from_grid(cls, grid: np.ndarray, channels: Sequence[str] = ()) -> "FieldSample":
        """Wrap a (T, *spatial, C) uniform-grid trajectory."""
        spatial = grid.shape[1:-1]
        T = grid.shape[0]
        times = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
        return cls(times, grid_points(spatial), grid.reshape(T, -1, grid.shape[-1]), tuple(channels))


def grid_points(spatial: Sequence[int]) -> np.ndarray:
    """Node coordinates of a uniform grid spanning [0, 1]^D, row-major."""
    axes = [np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1) for n in spatial]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass(frozen=True)
class LatentGridSpec:
    n_times: int
    spatial: tuple[int, ...]
    radius: float = 0.0425
    weight_mode: str = "equal"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")

    @property
    def n_nodes(self) -> int:
        return self.n_times * math.prod(self.spatial)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_times, *self.spatial)

    def coords(self) -> np.ndarray:
        return grid_points(self.shape)


# ---------------------------------------------------------------------------
# neighbour search
# ---------------------------------------------------------------------------

@dataclass
class BallIndex:
    """CSR neighbour lists: sources within ``radius`` of each query, sorted by index."""

    offsets: np.ndarray
    indices: np.ndarray
    radius: float
    n_sources: int
    dim: int
    _pairs: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_queries(self) -> int:
        return len(self.offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, q: int) -> np.ndarray:
        return self.indices[self.offsets[q]:self.offsets[q + 1]]

    def query_ids(self) -> np.ndarray:
        """Query id of every stored pair."""
        return np.repeat(np.arange(self.n_queries), self.counts)

    def empty_queries(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 0)


def _expand_ranges(lo: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
    return starts + np.arange(total)


def build_ball_index(sources: np.ndarray, queries: np.ndarray, r: float, chunk: int = 8192) -> BallIndex:
    """All sources within Euclidean distance ``r`` (inclusive) of each query.

    Uses a uniform hash grid whose cells are at least ``r`` wide, so only the
    3^dim surrounding cells of a query need scanning.
    """
    sources = np.asarray(sources, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if len(sources) == 0:
        raise ValueError("no source points")
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    dim = sources.shape[1]
    if queries.shape[1] != dim:
        raise ValueError("source and query dimensions differ")

    ncell = max(1, int(math.floor(1.0 / r)))
    strides = ncell ** np.arange(dim - 1, -1, -1, dtype=np.int64)

    def cells(x):
        return np.clip(np.floor(x * ncell).astype(np.int64), 0, ncell - 1)

    src_keys = cells(sources) @ strides
    order = np.argsort(src_keys, kind="stable")
    sorted_keys = src_keys[order]
    r2 = r * r
    offsets_all = np.array(list(itertools.product((-1, 0, 1), repeat=dim)), dtype=np.int64)

    q_parts, s_parts = [], []
    for start in range(0, len(queries), chunk):
        qc = queries[start:start + chunk]
        qcell = cells(qc)
        for off in offsets_all:
            nb = qcell + off
            valid = np.all((nb >= 0) & (nb < ncell), axis=1)
            if not valid.any():
                continue
            qid = np.flatnonzero(valid)
            keys = nb[valid] @ strides
            lo = np.searchsorted(sorted_keys, keys, "left")
            hi = np.searchsorted(sorted_keys, keys, "right")
            counts = hi - lo
            pos = _expand_ranges(lo, counts)
            if len(pos) == 0:
                continue
            q = np.repeat(qid, counts)
            s = order[pos]
            d2 = ((sources[s] - qc[q]) ** 2).sum(-1)
            keep = d2 <= r2
            q_parts.append(q[keep] + start)
            s_parts.append(s[keep])

    q_all = np.concatenate(q_parts) if q_parts else np.zeros(0, dtype=np.int64)
    s_all = np.concatenate(s_parts) if s_parts else np.zeros(0, dtype=np.int64)
    srt = np.lexsort((s_all, q_all))
    q_all, s_all = q_all[srt], s_all[srt]
    counts = np.bincount(q_all, minlength=len(queries))
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    index = BallIndex(offsets, s_all.astype(np.int64), float(r), len(sources), dim)
    n_empty = int((counts == 0).sum())
    if n_empty:
        warnings.warn(f"{n_empty} of {len(queries)} queries have no source within r={r}", EmptyBallWarning, stacklevel=2)
    return index


def brute_force_ball(sources: np.ndarray, queries: np.ndarray, r: float) -> list[np.ndarray]:
    """O(M*Q) reference radius search."""
    d2 = ((queries[:, None, :] - sources[None, :, :]) ** 2).sum(-1)
    return [np.flatnonzero(row <= r * r) for row in d2]


def riemann_weights(
    index: BallIndex,
    mode: str = "equal",
    sources: np.ndarray | None = None,
    domain_volume: float = 1.0,
) -> np.ndarray:
    """Quadrature weight of every stored (query, source) pair.

    ``equal``        vol(B_r) / M_b, the ball volume shared among its points.
    ``density``      vol(B_r) / n(y_b), with n(y_b) the number of sources in
                     the ball around the source itself (inverse local density).
    ``monte_carlo``  |domain| / M, the plain uniform-sampling weight.
    """
    vol = ball_volume(index.radius, index.dim)
    if mode == "equal":
        counts = index.counts
        per_query = np.divide(vol, counts, out=np.zeros(len(counts)), where=counts > 0)
        return np.repeat(per_query, counts)
    if mode == "monte_carlo":
        return np.full(len(index.indices), domain_volume / index.n_sources)
    if mode == "density":
        if sources is None:
            raise ValueError("density weights need the source coordinates")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyBallWarning)
            self_index = build_ball_index(sources, sources, index.radius)
        return vol / self_index.counts[index.indices]
    raise ValueError(f"unknown weight mode {mode!r}")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

class KernelNet(nn.Module):
    """kappa(y_query, y_source) as a small MLP.

    The output is ``(1 + mlp) / vol(B_r)`` (diagonal gating, one value per
    channel) or ``(I + mlp) / vol(B_r)`` (full channel mixing). The last
    layer starts at zero, so a fresh kernel averages its ball.
    """

    def __init__(self, coord_dim: int, channels: int, radius: float, hidden: int = 32, depth: int = 2, full: bool = False):
        super().__init__()
        self.coord_dim = coord_dim
        self.channels = channels
        self.radius = float(radius)
        self.full = full
        self.inv_volume = 1.0 / ball_volume(radius, coord_dim)
        out = channels * channels if full else channels
        layers, width = [], 2 * coord_dim
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.GELU(approximate="tanh")]
            width = hidden
        last = nn.Linear(width, out)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        self.mlp = nn.Sequential(*layers, last)

    def forward(self, y_query: torch.Tensor, y_source: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([y_query, (y_source - y_query) / self.radius], dim=-1)
        k = self.mlp(feats)
        if self.full:
            k = k.view(*k.shape[:-1], self.channels, self.channels)
            k = k + torch.eye(self.channels, dtype=k.dtype)
        else:
            k = k + 1.0
        return k * self.inv_volume


class ConstantKernel(nn.Module):
    """kappa = value (diagonal), no parameters."""

    def __init__(self, channels: int, value: float, full: bool = False):
        super().__init__()
        self.channels, self.value, self.full = channels, float(value), full

    def forward(self, y_query, y_source):
        shape = (y_query.shape[0], self.channels)
        if self.full:
            return self.value * torch.eye(self.channels, dtype=y_query.dtype).expand(y_query.shape[0], -1, -1)
        return torch.full(shape, self.value, dtype=y_query.dtype)


def _integrate(values, src_coords, qry_coords, kernel, index, weights):
    """sum_b kappa(y_q, y_b) u(y_b) mu_b over each ball; values (..., P, C)."""
    q_idx = torch.from_numpy(index.query_ids())
    s_idx = torch.from_numpy(index.indices)
    dtype = values.dtype
    yq = torch.as_tensor(qry_coords, dtype=dtype)[q_idx]
    ys = torch.as_tensor(src_coords, dtype=dtype)[s_idx]
    k = kernel(yq, ys)
    mu = torch.as_tensor(weights, dtype=dtype)
    u = values.index_select(-2, s_idx)
    if k.dim() == 3:
        contrib = torch.einsum("pij,...pj->...pi", k, u)
    else:
        contrib = k * u
    contrib = contrib * mu[:, None]
    out = values.new_zeros(*values.shape[:-2], index.n_queries, contrib.shape[-1])
    return out.index_add(-2, q_idx, contrib)


def _as_tensor(values):
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(np.asarray(values), dtype=torch.get_default_dtype())


def kernel_aggregate(
    sample: FieldSample,
    spec: LatentGridSpec,
    kernel: nn.Module,
    *,
    values: torch.Tensor | None = None,
    index: BallIndex | None = None,
) -> torch.Tensor:
    """Map a mesh sample onto the latent grid; returns (..., T_l, *spatial, C).

    ``values`` overrides ``sample.values`` (shape (..., T*M, C)) so callers can
    differentiate with respect to the field or push a batch sharing one mesh.
    """
    src = sample.coords()
    grid = spec.coords()
    if index is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyBallWarning)
            index = build_ball_index(src, grid, spec.radius)
    empty = index.empty_queries()
    if len(empty):
        cell = np.unravel_index(int(empty[0]), spec.shape)
        raise CoverageError(
            f"latent cell {tuple(int(c) for c in cell)} at {np.round(grid[empty[0]], 4).tolist()} has no source "
            f"point within r={spec.radius} ({len(empty)} empty cells); increase the radius"
        )
    u = _as_tensor(sample.flat_values()) if values is None else values
    mu = riemann_weights(index, spec.weight_mode, sources=src)
    out = _integrate(u, src, grid, kernel, index, mu)
    return out.reshape(*out.shape[:-2], *spec.shape, out.shape[-1])


def kernel_interpolate(
    latent: torch.Tensor,
    spec: LatentGridSpec,
    queries: np.ndarray,
    kernel: nn.Module,
    *,
    index: BallIndex | None = None,
    fallback_nearest: bool = False,
) -> torch.Tensor:
    """Evaluate a latent grid (..., T_l, *spatial, C) at arbitrary (t, x) queries."""
    grid = spec.coords()
    queries = np.asarray(queries, dtype=np.float64)
    if queries.size and (queries.min() < 0 or queries.max() > 1):
        raise ValueError("query coordinates must lie in [0, 1]")
    if index is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyBallWarning)
            index = build_ball_index(grid, queries, spec.radius)
    empty = index.empty_queries()
    if len(empty):
        if not fallback_nearest:
            raise CoverageError(
                f"query {int(empty[0])} at {np.round(queries[empty[0]], 4).tolist()} has no latent node within "
                f"r={spec.radius}; increase the radius or enable the nearest-node fallback"
            )
        index = _with_nearest(index, grid, queries, empty)
    flat = latent.reshape(*latent.shape[: latent.dim() - len(spec.shape) - 1], spec.n_nodes, latent.shape[-1])
    mu = riemann_weights(index, spec.weight_mode, sources=grid)
    return _integrate(flat, grid, queries, kernel, index, mu)


def _with_nearest(index: BallIndex, grid, queries, empty) -> BallIndex:
    nearest = np.argmin(((queries[empty][:, None] - grid[None]) ** 2).sum(-1), axis=1)
    lists = [index.neighbors(q) for q in range(index.n_queries)]
    for q, s in zip(empty, nearest):
        lists[q] = np.array([s])
    counts = np.array([len(x) for x in lists])
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return BallIndex(offsets, np.concatenate(lists).astype(np.int64), index.radius, index.n_sources, index.dim)


class MeshTranscoder(nn.Module):
    """Encoder and decoder kernels around one latent grid (separate parameters)."""

    def __init__(self, spec: LatentGridSpec, channels: int, hidden: int = 32, depth: int = 2, full: bool = False):
        super().__init__()
        self.spec = spec
        dim = 1 + len(spec.spatial)
        self.encoder_kernel = KernelNet(dim, channels, spec.radius, hidden, depth, full)
        self.decoder_kernel = KernelNet(dim, channels, spec.radius, hidden, depth, full)

    def encode(self, sample: FieldSample, values=None, index=None) -> torch.Tensor:
        return kernel_aggregate(sample, self.spec, self.encoder_kernel, values=values, index=index)

    def decode(self, latent: torch.Tensor, queries: np.ndarray, index=None, fallback_nearest=False) -> torch.Tensor:
        return kernel_interpolate(latent, self.spec, queries, self.decoder_kernel, index=index,
                                  fallback_nearest=fallback_nearest)


def quadrature_error(m: int, radius: float = 0.2, dim: int = 2, trials: int = 20, seed: int = 0) -> float:
    """Mean |sum_b mu_b - vol(B_r)| for u = 1 on ``m`` uniform random sources.

    Uses the plain Monte Carlo weight |domain| / m, ball centred in the cube.
    """
    rng = np.random.default_rng(seed)
    centre = np.full((1, dim), 0.5)
    vol = ball_volume(radius, dim)
    errs = []
    for _ in range(trials):
        src = rng.random((m, dim))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyBallWarning)
            index = build_ball_index(src, centre, radius)
        errs.append(abs(riemann_weights(index, "monte_carlo").sum() - vol))
    return float(np.mean(errs))
