import math

import numpy as np
import pytest
import torch

from latentpde import autoencoder as ae
from latentpde.geometry import FieldSample, LatentGridSpec, MeshTranscoder

TINY = ae.AutoencoderConfig(widths=(8, 8, 8), res_blocks=(0, 0), latent_channels=2)


def test_latent_shape_and_compression_ratio():
    cfg = ae.AutoencoderConfig(in_channels=3, latent_channels=3, widths=(8, 8, 8, 8), temporal_down=(True,) * 3,
                               res_blocks=(0, 0, 0))
    assert cfg.latent_shape((48, 128, 128)) == (3, 6, 16, 16)
    assert cfg.compression_ratio((48, 128, 128)) == 512
    desk = ae.AutoencoderConfig()
    assert desk.latent_shape((24, 32, 32)) == (4, 6, 8, 8)
    assert desk.compression_ratio((24, 32, 32)) == 3 * 24 * 32 * 32 / (4 * 6 * 8 * 8)
    with pytest.raises(ValueError, match="not divisible"):
        desk.validate((25, 32, 32))
    with pytest.raises(ValueError):
        ae.AutoencoderConfig(widths=(8, 8), temporal_down=(True, True))


def test_zero_input_with_zero_heads():
    model = ae.LatentAutoencoder(TINY)
    torch.nn.init.zeros_(model.encoder.conv_out.weight)
    torch.nn.init.zeros_(model.encoder.conv_out.bias)
    lat = model.encode(torch.zeros(1, 3, 4, 8, 8))
    assert not lat.mean.any() and not lat.logvar.any()


def test_reparameterize():
    mean = torch.randn(2, 3, 1, 2, 2)
    lat = ae.Latent(mean, torch.full_like(mean, -1e4))
    assert lat.logvar.min() == -30.0
    assert torch.allclose(ae.reparameterize(lat), mean, atol=1e-6)
    unit = ae.Latent(torch.zeros(100000), torch.zeros(100000))
    a = ae.reparameterize(unit, torch.Generator().manual_seed(0))
    assert torch.equal(a, ae.reparameterize(unit, torch.Generator().manual_seed(0)))
    assert abs(a.var().item() - 1) < 0.02
    assert ae.Latent(mean, torch.full_like(mean, 100.0)).logvar.max() == 20.0


def test_reparameterize_is_differentiable():
    mean = torch.zeros(1, 4, requires_grad=True)
    logvar = torch.zeros(1, 4, requires_grad=True)
    ae.reparameterize(ae.Latent(mean, logvar)).sum().backward()
    assert torch.equal(mean.grad, torch.ones(1, 4)) and logvar.grad is not None


def test_kl_examples():
    assert ae.kl_loss(ae.Latent(torch.zeros(2, 5), torch.zeros(2, 5))).item() == 0.0
    assert ae.kl_loss(ae.Latent(torch.ones(1, 1), torch.zeros(1, 1))).item() == pytest.approx(0.5)
    lat = ae.Latent(torch.ones(3, 4), torch.zeros(3, 4))
    assert ae.kl_loss(lat).item() == pytest.approx(2.0)
    assert ae.kl_loss(lat, "mean").item() == pytest.approx(0.5)


def test_shape_roundtrip_and_scaling_identity():
    torch.manual_seed(0)
    model = ae.LatentAutoencoder(TINY).eval()
    x = torch.randn(2, 3, 8, 16, 8)
    lat = model.encode(x)
    assert lat.mean.shape == (2, 2, 2, 4, 2)
    assert model.decode(lat.mean, scaled=False).shape == x.shape
    model.scale.fill_(0.2)
    with torch.no_grad():
        a = model.decode(lat.mean * 0.2, scaled=True)
        b = model.decode(lat.mean, scaled=False)
    assert torch.allclose(a, b, atol=1e-6)
    with pytest.raises(ValueError):
        model.decode(torch.zeros(1, 3, 2, 4, 2))


class _ScaledIdentity(torch.nn.Module):
    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x):
        return torch.cat([self.k * x, torch.zeros_like(x)], dim=1)


def _fake_model(k):
    cfg = ae.AutoencoderConfig(in_channels=2, latent_channels=2, widths=(4, 4), temporal_down=(False,),
                               res_blocks=(0,))
    model = ae.LatentAutoencoder(cfg)
    model.encoder = _ScaledIdentity(k)
    return model


def test_latent_scale_estimates():
    g = torch.Generator().manual_seed(0)
    batch = torch.randn(16, 2, 2, 8, 8, generator=g)
    assert ae.estimate_latent_scale(_fake_model(1.0), batch) == pytest.approx(1.0, abs=0.05)
    m5 = _fake_model(5.0)
    s = ae.estimate_latent_scale(m5, batch)
    assert s == pytest.approx(0.2, abs=0.01) and float(m5.scale) == pytest.approx(s)
    fresh = torch.randn(16, 2, 2, 8, 8, generator=g)
    assert abs(float(m5.encode_scaled(fresh).std()) - 1) < 0.1
    with pytest.raises(ValueError):
        ae.estimate_latent_scale(m5, batch[:15])
    with pytest.raises(ae.NumericalError):
        ae.estimate_latent_scale(_fake_model(0.0), batch)


def _toy_data(n=4):
    rng = np.random.default_rng(0)
    t = np.linspace(0, 1, 4)[:, None, None]
    y, x = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8), indexing="ij")
    out = []
    for _ in range(n):
        a, b = rng.uniform(0.5, 2, 2)
        f = np.sin(a * np.pi * x + t) * np.cos(b * np.pi * y)
        out.append(np.stack([f, -f, f**2], -1))
    return np.stack(out).astype(np.float32)


def test_training_decreases_loss_and_is_deterministic():
    data = _toy_data()
    kw = dict(steps=100, lr=1e-3, batch_size=4, seed=1, log_every=0, cosine=False)
    m1, h1 = ae.train_autoencoder(data, TINY, **kw)
    smooth = np.convolve(h1.recon, np.ones(10) / 10, mode="valid")[::10]
    assert all(b < a for a, b in zip(smooth, smooth[1:]))
    _, h2 = ae.train_autoencoder(data, TINY, **kw)
    assert h1.loss == h2.loss


def test_training_aborts_on_nan():
    data = _toy_data(2)
    data[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ae.NumericalError, match="non-finite"):
        ae.train_autoencoder(data, TINY, steps=3, batch_size=2, log_every=0)
    with pytest.raises(ValueError):
        ae.train_autoencoder(np.zeros((0, 4, 8, 8, 3)), TINY, steps=1)


def test_mesh_path_shapes():
    rng = np.random.default_rng(0)
    spec = LatentGridSpec(4, (8, 8), radius=0.3)
    model = ae.LatentAutoencoder(TINY, MeshTranscoder(spec, 3, hidden=8, depth=1))
    sample = FieldSample(np.linspace(0, 1, 3), rng.random((200, 2)), rng.normal(size=(3, 200, 3)).astype(np.float32))
    lat = model.encode_mesh(sample)
    assert lat.mean.shape == (1, 2, 1, 2, 2)
    out = model.decode_mesh(lat.mean, rng.random((50, 3)), scaled=False)
    assert out.shape == (50, 3)
    _, hist = ae.train_autoencoder([sample], TINY, steps=2, model=model, log_every=0)
    assert len(hist.loss) == 2 and math.isfinite(hist.loss[-1])
