import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentpde import metrics as mt


def _field(seed, shape=(6, 5, 5, 3)):
    return np.random.default_rng(seed).normal(size=shape)


def test_rel_l2_examples():
    t = _field(0)
    assert mt.rel_l2(t, t) == 0.0
    assert mt.rel_l2(np.zeros_like(t), t) == pytest.approx(1.0)
    assert mt.rel_l2(1.1 * t, t) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        mt.rel_l2(t, np.zeros_like(t))
    with pytest.raises(ValueError):
        mt.rel_l2(t[:2], t)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(-50, 50).filter(lambda v: abs(v) > 1e-3))
def test_rel_l2_scale_equivariant(seed, a):
    p, t = _field(seed), _field(seed + 1)
    assert mt.rel_l2(a * p, a * t) == pytest.approx(mt.rel_l2(p, t), rel=1e-9)


def test_per_channel_mode():
    t = np.ones((4, 2, 2, 2))
    p = t.copy()
    p[..., 1] *= 1.5
    np.testing.assert_allclose(mt.per_channel_rel_l2(p, t), [0.0, 0.5])
    assert mt.rel_l2(p, t, per_channel=True) == pytest.approx(0.25)


def test_per_timestep_curves():
    t = np.ones((5, 3, 3, 2))
    curve = mt.per_timestep_loss(t + 0.2, t)
    np.testing.assert_allclose(curve, np.full(5, 0.2))
    assert mt.fitted_slope(curve) == pytest.approx(0.0, abs=1e-12)
    assert mt.fitted_slope([0.0, 1.0, 2.0, 3.0]) == pytest.approx(1.0)
    c = mt.per_timestep_loss(_field(1), _field(2))
    assert c.mean() >= c.min()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_timestep_aggregation_recovers_full_error(seed):
    p, t = _field(seed), _field(seed + 7)
    curve = mt.per_timestep_loss(p, t)
    full = mt.rel_l2(p, t)
    assert abs(mt.aggregate_timesteps(curve, t) - full) <= 0.05 * full


def test_d_tke_examples():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(20, 8, 8, 3))
    assert mt.d_tke(v, v) == 0.0
    mean = v.mean(0, keepdims=True)
    scaled = mean + (v - mean) * math.exp(0.5)
    assert mt.d_tke(scaled, v) == pytest.approx(1.0, abs=1e-6)
    steady = np.broadcast_to(v[:1], v.shape)
    assert mt.d_tke(steady, steady.copy()) == 0.0


def test_d_tke_offset_invariance_and_errors():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=(10, 4, 4, 3)), rng.normal(size=(10, 4, 4, 3))
    offset = np.zeros((1, 4, 4, 3))
    offset[..., :2] = rng.normal(size=(1, 4, 4, 2)) * 3
    assert mt.d_tke(p + offset, t + offset) == pytest.approx(mt.d_tke(p, t), rel=1e-9)
    with pytest.raises(ValueError):
        mt.d_tke(p[..., :1], t[..., :1])
    with pytest.raises(ValueError):
        mt.d_tke(p[:1], t[:1])


def test_eval_report():
    rep = mt.EvalReport(channels=("vx", "vy", "density"), label="toy")
    for i in range(3):
        rep.add(f"s{i}", _field(i) * 1.1, _field(i), with_tke=True)
    rep.exclude("s9", "CFL violation")
    rep.flops = 1234
    assert rep.mean_rel_l2 == pytest.approx(0.1)
    text = rep.to_text()
    assert "mean" in text and "excluded s9: CFL violation" in text and "flops: 1234" in text
    csv = rep.to_csv().splitlines()
    assert csv[0] == "sample,rel_l2,vx,vy,density,d_tke" and len(csv) == 4
    rep.rel_l2.append(float("nan"))
    rep.names.append("bad")
    with pytest.raises(AssertionError):
        rep.check()


def test_step_sweep_table():
    table = mt.step_sweep_table([(10, 0.1234, 0.5), (1000, 0.1201, 50.0)])
    assert table.splitlines()[1].split() == ["10", "0.1234", "0.500"]
