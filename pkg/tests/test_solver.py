import numpy as np
import pytest
import torch

from latentpde import solver as sv
from latentpde.geometry import KernelNet, LatentGridSpec, kernel_aggregate


@pytest.fixture(scope="module")
def spec():
    return sv.ProblemSpec(resolution=32, n_steps=24)


def _plume_state(n=32, buoyancy=0.2, center=(10, 16)):
    d = sv.plume_density(n, [center], [3.0], [1.0])
    return sv.SmokeState(np.zeros((n, n)), np.zeros((n, n)), d, buoyancy)


def test_zero_state_is_fixed_point(spec):
    zero = sv.SmokeState(np.zeros((32, 32)), np.zeros((32, 32)), np.zeros((32, 32)), 0.2)
    traj = sv.solve_smoke(spec, zero)
    assert traj.shape == (24, 32, 32, 3) and not traj.any()


def test_plume_rises(spec):
    traj = sv.solve_smoke(spec, _plume_state(), n_frames=21)
    ys = [sv.density_centroid_y(f[..., 2]) for f in traj]
    assert all(b > a for a, b in zip(ys, ys[1:]))


def test_negated_buoyancy_sinks(spec):
    frame = sv.solve_smoke(spec, _plume_state(center=(20, 16)), n_frames=1)[0]
    traj = sv.resolve_trajectory(frame, spec, -0.2, n_frames=12)
    ys = [sv.density_centroid_y(f[..., 2]) for f in traj]
    assert ys[-1] < ys[0] - 0.5


def test_projection_divergence_free(spec):
    state = _plume_state()
    for _ in range(20):
        state = sv.step(state, spec.nu)
        assert state.divergence_rms < 1e-4
        assert state.density.min() >= 0


def test_mass_conserved_without_forcing():
    n = 32
    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    # a smooth divergence-free swirl, zero at the walls
    psi = np.sin(np.pi * jj / (n - 1)) ** 2 * np.sin(np.pi * ii / (n - 1)) ** 2
    vx, vy = 0.8 * np.gradient(psi, axis=0), -0.8 * np.gradient(psi, axis=1)
    vx, vy, _, _ = sv.project(vx * 4, vy * 4, 1.0)
    d = sv.plume_density(n, [(12, 14)], [3.0], [0.9])
    state = sv.SmokeState(vx, vy, d, 0.0)
    m0 = d.sum()
    spec = sv.ProblemSpec(resolution=n, nu=0.0)
    traj = sv.solve_smoke(spec, state)
    assert abs(traj[-1, ..., 2].sum() / m0 - 1) < 0.01
    assert np.abs(traj[-1, ..., :2]).max() > 0.05  # the flow did move the smoke


def test_cfl_violation_raises():
    s = _plume_state()
    s.vx[:] = 5.0
    with pytest.raises(sv.CFLError, match="CFL"):
        sv.step(s)


def test_invalid_initial_density(spec):
    s = _plume_state()
    s.density[0, 0] = 2.0
    with pytest.raises(ValueError):
        sv.solve_smoke(spec, s)


def test_generator_deterministic_and_valid(spec):
    a, pa = sv.simulate_sample(spec, np.random.default_rng(5))
    b, pb = sv.simulate_sample(spec, np.random.default_rng(5))
    assert np.array_equal(a, b) and pa == pb
    for seed in range(6):
        traj, params = sv.simulate_sample(spec, np.random.default_rng(seed))
        assert np.isfinite(traj).all() and traj[..., 2].min() >= 0
        assert spec.buoyancy_range[0] <= params["buoyancy"] <= spec.buoyancy_range[1]
        assert 1 <= len(params["plumes"]) <= 4


def test_resolve_reproduces_trajectory(spec):
    traj, params = sv.simulate_sample(spec, np.random.default_rng(2))
    again = sv.resolve_trajectory(traj[0], spec, params["buoyancy"])
    assert np.linalg.norm(again - traj) / np.linalg.norm(traj) < 1e-10


def test_mesh_snap_equals_grid(spec):
    grid = np.random.default_rng(0).random((2, 8, 8, 3))
    mesh = sv.sample_to_mesh(grid, 64, np.random.default_rng(0), "uniform", snap=True)
    rows = np.round(mesh.points[:, 0] * 7).astype(int)
    cols = np.round(mesh.points[:, 1] * 7).astype(int)
    assert np.array_equal(mesh.values, grid[:, rows, cols])
    assert len({(r, c) for r, c in zip(rows, cols)}) == 64


def test_bilinear_matches_independent_oracle():
    rng = np.random.default_rng(1)
    grid = rng.random((1, 5, 7, 2))
    pts = rng.random((50, 2))
    out = sv.bilinear(grid, pts)
    for m, (py, px) in enumerate(pts):
        y, x = py * 4, px * 6
        y0, x0 = min(int(y), 3), min(int(x), 5)
        fy, fx = y - y0, x - x0
        g = grid[0]
        ref = ((1 - fy) * (1 - fx) * g[y0, x0] + (1 - fy) * fx * g[y0, x0 + 1]
               + fy * (1 - fx) * g[y0 + 1, x0] + fy * fx * g[y0 + 1, x0 + 1])
        np.testing.assert_allclose(out[0, m], ref, atol=1e-12)


def test_refinement_concentrates_points():
    grid = np.zeros((2, 16, 16, 3))
    weights = np.ones((16, 16))
    weights[:8, :8] = 10.0
    for seed in range(10):
        mesh = sv.sample_to_mesh(grid, 500, np.random.default_rng(seed), weights)
        inside = (mesh.points[:, 0] < 0.5) & (mesh.points[:, 1] < 0.5)
        assert inside.mean() >= 0.6


def test_mesh_errors():
    grid = np.zeros((2, 8, 8, 3))
    with pytest.raises(ValueError):
        sv.sample_to_mesh(grid, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sv.sample_to_mesh(grid, 100, np.random.default_rng(0), np.zeros((8, 8)))


def test_dense_mesh_approaches_grid_restriction():
    n = 32
    t = np.linspace(0, 1, 2)[:, None, None]
    y, x = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    field = np.sin(2 * np.pi * x) * np.cos(np.pi * y) * (1 + t)
    grid = np.repeat(field[..., None], 3, axis=-1)
    spec = LatentGridSpec(2, (8, 8), radius=0.12)
    kernel = KernelNet(3, 3, spec.radius)
    coarse = sv.bilinear(grid, spec.coords()[:64, 1:]).reshape(2, 8, 8, 3)
    medians = []
    for m in (256, 1024, 4096):
        errs = []
        for seed in range(5):
            mesh = sv.sample_to_mesh(grid, m, np.random.default_rng(seed), "uniform")
            with torch.no_grad():
                u = torch.as_tensor(mesh.flat_values(), dtype=torch.float32)
                q = kernel_aggregate(mesh, spec, kernel, values=u).numpy()
            errs.append(np.linalg.norm(q - coarse) / np.linalg.norm(coarse))
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]
