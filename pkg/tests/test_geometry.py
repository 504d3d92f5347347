import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.func import functional_call

from latentpde import geometry as geo
from latentpde import tensor_core as tc


def _sets_equal(index, ref):
    return all(np.array_equal(index.neighbors(q), ref[q]) for q in range(index.n_queries))


def test_single_source_at_query():
    idx = geo.build_ball_index(np.array([[0.3, 0.4]]), np.array([[0.3, 0.4]]), 1e-3)
    assert idx.neighbors(0).tolist() == [0]


def test_grid_centre_matches_brute_force():
    g = np.linspace(0, 1, 10)
    src = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    q = np.array([[0.5, 0.5]])
    idx = geo.build_ball_index(src, q, 0.15)
    ref = geo.brute_force_ball(src, q, 0.15)
    assert _sets_equal(idx, ref) and len(ref[0]) == 4


def test_tiny_radius_warns_and_is_empty():
    src = np.array([[0.0, 0.0], [1.0, 1.0]])
    with pytest.warns(geo.EmptyBallWarning):
        idx = geo.build_ball_index(src, np.array([[0.5, 0.5], [0.25, 0.7]]), 0.01)
    assert idx.counts.tolist() == [0, 0]


def test_index_errors():
    with pytest.raises(ValueError):
        geo.build_ball_index(np.zeros((0, 2)), np.zeros((1, 2)), 0.1)
    with pytest.raises(ValueError):
        geo.build_ball_index(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    dim=st.integers(1, 3),
    m=st.integers(1, 300),
    r=st.floats(0.01, 0.6),
)
def test_index_equals_brute_force(seed, dim, m, r):
    rng = np.random.default_rng(seed)
    src, q = rng.random((m, dim)), rng.random((50, dim))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", geo.EmptyBallWarning)
        idx = geo.build_ball_index(src, q, r, chunk=17)
    assert _sets_equal(idx, geo.brute_force_ball(src, q, r))


def test_inclusive_boundary():
    idx = geo.build_ball_index(np.array([[0.25, 0.5]]), np.array([[0.5, 0.5]]), 0.25)
    assert idx.counts[0] == 1


def test_riemann_weight_examples():
    idx = geo.build_ball_index(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]), 0.1)
    np.testing.assert_allclose(geo.riemann_weights(idx), [math.pi * 0.01])
    src = np.tile([[0.4, 0.6]], (5, 1))
    idx = geo.build_ball_index(src, np.array([[0.4, 0.6]]), 0.2)
    w = geo.riemann_weights(idx)
    np.testing.assert_allclose(w, np.full(5, math.pi * 0.04 / 5))
    assert abs((3.0 * w).sum() - 3.0 * math.pi * 0.04) < 1e-12


def test_density_weights_positive():
    rng = np.random.default_rng(0)
    src = rng.random((200, 2))
    idx = geo.build_ball_index(src, rng.random((20, 2)), 0.2)
    w = geo.riemann_weights(idx, "density", sources=src)
    assert (w > 0).all() and len(w) == len(idx.indices)
    with pytest.raises(ValueError):
        geo.riemann_weights(idx, "density")


def test_quadrature_error_decreases():
    errs = [geo.quadrature_error(m, trials=10) for m in (100, 10000)]
    assert errs[1] < errs[0]


def _constant_kernel_setup(c=2.5):
    sample = geo.FieldSample.from_grid(np.full((3, 12, 12, 2), c))
    spec = geo.LatentGridSpec(2, (4, 4), radius=0.2)
    return sample, spec


def test_constant_field_reproduced():
    sample, spec = _constant_kernel_setup()
    kernel = geo.ConstantKernel(2, 1.0 / geo.ball_volume(spec.radius, 3))
    q = geo.kernel_aggregate(sample, spec, kernel)
    assert q.shape == (2, 4, 4, 2)
    assert (q - 2.5).abs().max() < 1e-6
    # a fresh learned kernel starts as the same ball average
    q2 = geo.kernel_aggregate(sample, spec, geo.KernelNet(3, 2, spec.radius))
    assert (q2 - 2.5).abs().max() < 1e-6


def test_interpolate_at_grid_nodes_recovers_values():
    spec = geo.LatentGridSpec(2, (5, 5), radius=0.1)
    latent = torch.randn(2, 5, 5, 3, dtype=torch.float64)
    kernel = geo.ConstantKernel(3, 1.0 / geo.ball_volume(spec.radius, 3))
    out = geo.kernel_interpolate(latent, spec, spec.coords(), kernel)
    assert (out - latent.reshape(-1, 3)).abs().max() < 1e-6


def test_linear_ramp_within_lipschitz_bound():
    n = 40
    x = np.linspace(0, 1, n)
    ramp = np.broadcast_to(x[None, :, None, None], (2, n, n, 1)).copy()
    sample = geo.FieldSample.from_grid(ramp)
    spec = geo.LatentGridSpec(2, (6, 6), radius=0.08)
    q = geo.kernel_aggregate(sample, spec, geo.KernelNet(3, 1, spec.radius)).detach().numpy()
    exact = spec.coords()[:, 1].reshape(2, 6, 6)
    assert np.abs(q[..., 0] - exact).max() <= spec.radius


def test_coverage_errors():
    sample = geo.FieldSample.from_grid(np.zeros((2, 3, 3, 1)))
    spec = geo.LatentGridSpec(2, (8, 8), radius=0.05)
    with pytest.raises(geo.CoverageError, match="increase the radius"):
        geo.kernel_aggregate(sample, spec, geo.KernelNet(3, 1, 0.05))
    latent = torch.zeros(2, 8, 8, 1)
    far = np.array([[0.5, 0.07, 0.07]])
    small = geo.LatentGridSpec(2, (8, 8), radius=0.01)
    with pytest.raises(geo.CoverageError):
        geo.kernel_interpolate(latent, small, far, geo.KernelNet(3, 1, 0.01))
    out = geo.kernel_interpolate(latent + 1, small, far, geo.KernelNet(3, 1, 0.01), fallback_nearest=True)
    assert out.shape == (1, 1)


def test_out_of_range_inputs_rejected():
    with pytest.raises(ValueError):
        geo.FieldSample(np.array([0.0]), np.array([[1.5, 0.2]]), np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        geo.FieldSample(np.array([0.0]), np.array([[0.5, 0.2]]), np.full((1, 1, 1), np.nan))
    with pytest.raises(ValueError):
        geo.LatentGridSpec(1, (2, 2), radius=-1)


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    pts = rng.random((300, 2))
    vals = rng.normal(size=(2, 300, 2))
    spec = geo.LatentGridSpec(2, (4, 4), radius=0.35)
    torch.manual_seed(0)
    kernel = geo.KernelNet(3, 2, spec.radius)
    for p in kernel.parameters():
        torch.nn.init.normal_(p, std=0.3)
    kernel.double()
    t = np.array([0.0, 1.0])

    def agg(p, v):
        s = geo.FieldSample(t, p, v)
        return geo.kernel_aggregate(s, spec, kernel, values=torch.as_tensor(s.flat_values()))

    a = agg(pts, vals)
    perm = rng.permutation(300)
    b = agg(pts[perm], vals[:, perm])
    assert torch.allclose(a, b, atol=1e-12)


def test_grad_check_aggregate_then_interpolate():
    old = torch.get_default_dtype()
    tc.set_default_precision(64)
    try:
        rng = np.random.default_rng(0)
        sample = geo.FieldSample(np.array([0.0, 1.0]), rng.random((60, 2)), rng.normal(size=(2, 60, 2)))
        spec = geo.LatentGridSpec(2, (3, 3), radius=0.6)
        torch.manual_seed(0)
        tr = geo.MeshTranscoder(spec, 2, hidden=8, depth=1, full=True).double()
        for p in tr.parameters():
            torch.nn.init.normal_(p, std=0.3)
        queries = rng.random((15, 3))
        w = torch.as_tensor(rng.normal(size=(15, 2)))
        u0 = torch.as_tensor(sample.flat_values())
        f = lambda u: (tr.decode(tr.encode(sample, values=u), queries) * w).sum()
        assert tc.grad_check(f, u0) < 1e-4
        name = "encoder_kernel.mlp.0.weight"
        params = dict(tr.named_parameters())

        enc = lambda x: geo.kernel_aggregate(sample, spec, _Swap(tr.encoder_kernel, "mlp.0.weight", x))
        f2 = lambda x: (tr.decode(enc(x), queries) * w).sum()
        assert tc.grad_check(f2, params[name].detach().clone()) < 1e-4
    finally:
        torch.set_default_dtype(old)


class _Swap(torch.nn.Module):
    """Calls ``module`` with one parameter replaced by ``value``."""

    def __init__(self, module, name, value):
        super().__init__()
        self.module, self.name, self.value = module, name, value

    def forward(self, *args):
        return functional_call(self.module, {self.name: self.value}, args=args, strict=False)


def test_batch_values_share_mesh():
    rng = np.random.default_rng(1)
    sample = geo.FieldSample(np.array([0.0, 1.0]), rng.random((80, 2)), rng.normal(size=(2, 80, 1)))
    spec = geo.LatentGridSpec(2, (3, 3), radius=0.5)
    k = geo.KernelNet(3, 1, spec.radius)
    u = torch.as_tensor(sample.flat_values(), dtype=torch.float32)
    single = geo.kernel_aggregate(sample, spec, k, values=u)
    batch = geo.kernel_aggregate(sample, spec, k, values=torch.stack([u, 2 * u]))
    assert torch.allclose(batch[0], single) and torch.allclose(batch[1], 2 * single)
