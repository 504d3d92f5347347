"""Buoyancy-driven smoke in a closed 2D box.

Velocity and density live at cell centres (array axes are ``[y, x]`` with y
pointing up, h = 1). A step is: semi-Lagrangian advection, buoyancy
``f = (0, factor * d)``, explicit viscosity, then a pressure projection
carried out on face velocities so that the face divergence vanishes.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .geometry import FieldSample

log = logging.getLogger(__name__)

CHANNELS = ("vx", "vy", "density")


class CFLError(RuntimeError):
    pass


@dataclass
class ProblemSpec:
    resolution: int = 32
    n_steps: int = 24
    dt: float = 1.0
    nu: float = 0.01
    buoyancy_range: tuple[float, float] = (0.1, 0.25)
    plume_count_range: tuple[int, int] = (1, 4)
    warmup: int = 8
    max_cfl: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 4 or self.n_steps < 1 or self.dt <= 0:
            raise ValueError("invalid problem spec")
        self.buoyancy_range = tuple(self.buoyancy_range)
        self.plume_count_range = tuple(self.plume_count_range)


@dataclass
class SmokeState:
    vx: np.ndarray
    vy: np.ndarray
    density: np.ndarray
    buoyancy: float
    dt: float = 1.0
    pressure: np.ndarray | None = field(default=None, repr=False)
    divergence_rms: float = 0.0

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    def frame(self) -> np.ndarray:
        return np.stack([self.vx, self.vy, self.density], axis=-1)

    @classmethod
    def from_frame(cls, frame: np.ndarray, buoyancy: float, dt: float = 1.0) -> "SmokeState":
        frame = np.asarray(frame, dtype=np.float64)
        return cls(frame[..., 0].copy(), frame[..., 1].copy(), np.clip(frame[..., 2], 0.0, None), buoyancy, dt)


@functools.lru_cache(maxsize=8)
def _poisson_factor(n: int):
    """LU of the Neumann 5-point Laplacian on n x n cells, cell 0 pinned."""
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        jn, in_ = j + dj, i + di
        ok = (jn >= 0) & (jn < n) & (in_ >= 0) & (in_ < n)
        a, b = idx[j[ok], i[ok]], idx[jn[ok], in_[ok]]
        rows += [a, a]
        cols += [b, a]
        vals += [np.ones(len(a)), -np.ones(len(a))]
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    L = L.tolil()
    L[0, :] = 0
    L[0, 0] = 1.0
    return spla.splu(L.tocsc())


def face_divergence(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (u[:, 1:] - u[:, :-1]) + (v[1:, :] - v[:-1, :])


def project(vx: np.ndarray, vy: np.ndarray, dt: float):
    """Remove the divergent part; returns centred velocity, pressure, face divergence RMS."""
    n = vx.shape[0]
    u = np.zeros((n, n + 1))
    v = np.zeros((n + 1, n))
    u[:, 1:-1] = 0.5 * (vx[:, :-1] + vx[:, 1:])
    v[1:-1, :] = 0.5 * (vy[:-1, :] + vy[1:, :])
    rhs = face_divergence(u, v).reshape(-1) / dt
    rhs[0] = 0.0
    p = _poisson_factor(n).solve(rhs).reshape(n, n)
    u[:, 1:-1] -= dt * (p[:, 1:] - p[:, :-1])
    v[1:-1, :] -= dt * (p[1:, :] - p[:-1, :])
    div = face_divergence(u, v)
    return 0.5 * (u[:, :-1] + u[:, 1:]), 0.5 * (v[:-1, :] + v[1:, :]), p, float(np.sqrt(np.mean(div**2)))


def advect(field_: np.ndarray, vx: np.ndarray, vy: np.ndarray, dt: float) -> np.ndarray:
    n = field_.shape[0]
    jj, ii = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    coords = np.stack([jj - dt * vy, ii - dt * vx])
    return ndimage.map_coordinates(field_, coords, order=1, mode="nearest")


def cfl_number(state: SmokeState) -> float:
    return float(np.sqrt(state.vx**2 + state.vy**2).max() * state.dt)


def step(state: SmokeState, nu: float = 0.0, max_cfl: float = 2.0) -> SmokeState:
    """Force, diffuse, project, advect, project.

    The density is advected by the freshly projected velocity and then
    rescaled to its pre-advection mass (linear back-tracing loses a fraction
    of a percent of the smoke per step), staying within [0, 1].
    """
    if cfl_number(state) > max_cfl:
        raise CFLError(f"CFL number {cfl_number(state):.3f} exceeds {max_cfl}; reduce dt or buoyancy")
    dt = state.dt
    d0 = state.density
    vx = state.vx
    vy = state.vy + dt * state.buoyancy * d0
    if nu:
        vx = vx + dt * nu * ndimage.laplace(vx, mode="nearest")
        vy = vy + dt * nu * ndimage.laplace(vy, mode="nearest")
    vx, vy, _, _ = project(vx, vy, dt)
    cfl = float(np.sqrt(vx**2 + vy**2).max() * dt)
    if cfl > max_cfl:
        raise CFLError(f"CFL number {cfl:.3f} exceeds {max_cfl}; reduce dt or buoyancy")
    d = np.clip(advect(d0, vx, vy, dt), 0.0, None)
    mass, new_mass = d0.sum(), d.sum()
    if new_mass > 0:
        d = np.clip(d * (mass / new_mass), 0.0, 1.0)
    vx, vy = advect(vx, vx, vy, dt), advect(vy, vx, vy, dt)
    vx, vy, p, div = project(vx, vy, dt)
    return SmokeState(vx, vy, d, state.buoyancy, dt, p, div)


def solve_smoke(spec: ProblemSpec, initial: SmokeState, n_frames: int | None = None) -> np.ndarray:
    """Trajectory (T, N, N, 3) of (vx, vy, density); frame 0 is ``initial``."""
    d0 = initial.density
    if d0.min() < 0 or d0.max() > 1 + 1e-6:
        raise ValueError("initial density must lie in [0, 1]")
    T = spec.n_steps if n_frames is None else n_frames
    frames = [initial.frame()]
    state = initial
    for _ in range(T - 1):
        state = step(state, spec.nu, spec.max_cfl)
        frames.append(state.frame())
    return np.stack(frames)


def plume_density(n: int, centers, widths, amplitudes) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    d = np.zeros((n, n))
    for (cy, cx), w, a in zip(centers, widths, amplitudes):
        d += a * np.exp(-((jj - cy) ** 2 + (ii - cx) ** 2) / (2 * w**2))
    return np.clip(d, 0.0, 1.0)


def random_initial_state(spec: ProblemSpec, rng: np.random.Generator) -> tuple[SmokeState, dict]:
    n = spec.resolution
    lo, hi = spec.plume_count_range
    k = int(rng.integers(lo, hi + 1))
    centers = np.stack([rng.uniform(0.1, 0.45, k) * n, rng.uniform(0.2, 0.8, k) * n], axis=1)
    widths = rng.uniform(1.5, 3.5, k) * n / 32
    amps = rng.uniform(0.6, 1.0, k)
    buoyancy = float(rng.uniform(*spec.buoyancy_range))
    d = plume_density(n, centers, widths, amps)
    state = SmokeState(np.zeros((n, n)), np.zeros((n, n)), d, buoyancy, spec.dt)
    params = {
        "buoyancy": buoyancy,
        "plumes": [{"center": [float(c[0] / n), float(c[1] / n)], "width": float(w / n), "amplitude": float(a)}
                   for c, w, a in zip(centers, widths, amps)],
    }
    return state, params


def simulate_sample(spec: ProblemSpec, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Warm up a random plume configuration, then record ``spec.n_steps`` frames."""
    state, params = random_initial_state(spec, rng)
    for _ in range(spec.warmup):
        state = step(state, spec.nu, spec.max_cfl)
    return solve_smoke(spec, state), params


def resolve_trajectory(frame: np.ndarray, spec: ProblemSpec, buoyancy: float, n_frames: int | None = None) -> np.ndarray:
    """Re-run the solver from a (possibly generated) first frame (N, N, 3)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[:2] != (spec.resolution, spec.resolution):
        frame = regrid(frame, spec.resolution)
    state = SmokeState.from_frame(frame, buoyancy, spec.dt)
    state.density = np.clip(state.density, 0.0, 1.0)
    return solve_smoke(spec, state, n_frames)


def regrid(frame: np.ndarray, n: int) -> np.ndarray:
    h, w = frame.shape[:2]
    jj, ii = np.meshgrid(np.linspace(0, h - 1, n), np.linspace(0, w - 1, n), indexing="ij")
    return np.stack([ndimage.map_coordinates(frame[..., c], [jj, ii], order=1) for c in range(frame.shape[-1])], -1)


def density_centroid_y(density: np.ndarray) -> float:
    jj = np.arange(density.shape[0])[:, None]
    return float((density * jj).sum() / density.sum())


# ---------------------------------------------------------------------------
# irregular meshes
# ---------------------------------------------------------------------------

def gradient_refinement(grid: np.ndarray, strength: float = 4.0) -> np.ndarray:
    """1 + strength * normalised time-mean |grad d| at every node."""
    d = grid[..., 2]
    gy, gx = np.gradient(d, axis=(1, 2))
    mag = np.sqrt(gx**2 + gy**2).mean(0)
    top = mag.max()
    return 1.0 + strength * (mag / top if top > 0 else mag)


def bilinear(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a (T, H, W, C) grid at normalised (row, col) points -> (T, M, C)."""
    T, H, W, C = grid.shape
    coords = [points[:, 0] * (H - 1), points[:, 1] * (W - 1)]
    out = np.empty((T, len(points), C))
    for t in range(T):
        for c in range(C):
            out[t, :, c] = ndimage.map_coordinates(grid[t, :, :, c], coords, order=1, mode="nearest")
    return out


def sample_to_mesh(
    grid: np.ndarray,
    n_points: int,
    rng: np.random.Generator,
    refinement: str | np.ndarray = "gradient",
    snap: bool = False,
    channels=CHANNELS,
) -> FieldSample:
    """Scatter ``n_points`` mesh nodes with density proportional to ``refinement``."""
    if n_points < 64:
        raise ValueError("need at least 64 mesh points")
    T, H, W, _ = grid.shape
    if isinstance(refinement, str):
        if refinement == "uniform":
            weights = np.ones((H, W))
        elif refinement == "gradient":
            weights = gradient_refinement(grid)
        else:
            raise ValueError(f"unknown refinement {refinement!r}")
    else:
        weights = np.asarray(refinement, dtype=np.float64)
    if weights.shape != (H, W) or weights.min() < 0 or weights.sum() <= 0:
        raise ValueError("refinement map must be a non-negative (H, W) array with positive mass")
    p = (weights / weights.sum()).reshape(-1)
    uniform_full = snap and n_points == H * W and np.allclose(p, p[0])
    if uniform_full:
        nodes = rng.permutation(H * W)
    else:
        nodes = rng.choice(H * W, size=n_points, replace=True, p=p)
    rows, cols = np.divmod(nodes, W)
    pts = np.stack([rows / (H - 1), cols / (W - 1)], axis=1)
    if not snap:
        jitter = rng.uniform(-0.5, 0.5, size=pts.shape) / np.array([H - 1, W - 1])
        pts = np.clip(pts + jitter, 0.0, 1.0)
    values = bilinear(grid, pts)
    if snap:
        values = grid[:, rows, cols, :]
    times = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    return FieldSample(times, pts, values, tuple(channels))
