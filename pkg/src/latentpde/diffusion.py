"""Gaussian diffusion on scaled latents: schedules, losses, DDPM/DDIM samplers, guidance.

Step indices are 1-based: ``n`` runs over ``1..N`` and ``alpha_bar[0]`` is the
clean-data value 1. A denoiser is any callable ``model(z, n, cond)`` that
returns either an epsilon/velocity estimate with the channels of ``z`` or,
for learned variance, twice as many channels (estimate, variance fraction).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PARAMS = ("eps", "v")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    kind: str
    betas: np.ndarray  # index n-1 holds beta_n

    def __post_init__(self):
        b = self.betas
        object.__setattr__(self, "alphas", 1.0 - b)
        ab = np.cumprod(1.0 - b)
        object.__setattr__(self, "alpha_bar", np.concatenate([[1.0], ab]))  # alpha_bar[n], n = 0..N
        # posterior variance beta~_n = beta_n (1 - abar_{n-1}) / (1 - abar_n); zero at n = 1
        denom = 1.0 - self.alpha_bar[1:]
        post = np.divide(b * (1.0 - self.alpha_bar[:-1]), denom, out=np.zeros_like(b), where=denom > 0)
        object.__setattr__(self, "posterior_variance", post)

    # 1-based accessors ---------------------------------------------------
    def beta(self, n):
        return self.betas[np.asarray(n) - 1]

    def abar(self, n):
        return self.alpha_bar[np.asarray(n)]

    def check(self, n) -> None:
        n = np.asarray(n)
        if n.size and (n.min() < 1 or n.max() > self.N):
            raise ScheduleError(f"diffusion step {n.min()}..{n.max()} outside [1, {self.N}]")

    def log_posterior_variance(self) -> np.ndarray:
        """log beta~ with the n=1 entry (zero variance) replaced by beta~_2."""
        post = self.posterior_variance.copy()
        if self.N > 1:
            post[0] = post[1]
        else:
            post[0] = self.betas[0]
        return np.log(post)

    def to_dict(self) -> dict:
        return {"N": self.N, "kind": self.kind}


def make_schedule(kind: str = "linear", N: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  s: float = 0.008) -> NoiseSchedule:
    if N < 1:
        raise ScheduleError("schedule needs N >= 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, N, dtype=np.float64) if N > 1 else np.array([beta_start])
    elif kind == "cosine":
        f = lambda n: np.cos(((n / N + s) / (1 + s)) * math.pi / 2) ** 2
        ab = f(np.arange(N + 1, dtype=np.float64)) / f(0.0)
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r} (expected 'linear' or 'cosine')")
    return NoiseSchedule(N, kind, betas)


def _gather(arr: np.ndarray, n, like: torch.Tensor) -> torch.Tensor:
    """arr[n] as a tensor broadcastable against ``like`` (batch on dim 0)."""
    vals = torch.as_tensor(np.asarray(arr)[np.asarray(n)], dtype=like.dtype)
    if vals.dim() == 0:
        return vals
    return vals.reshape(-1, *([1] * (like.dim() - 1)))


def _as_steps(n, batch: int) -> np.ndarray:
    n = np.asarray(n.cpu() if isinstance(n, torch.Tensor) else n, dtype=np.int64).reshape(-1)
    return np.full(batch, n[0]) if n.size == 1 else n


# ---------------------------------------------------------------------------
# forward process and parameterizations
# ---------------------------------------------------------------------------

def q_sample(x0: torch.Tensor, n, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps."""
    sched.check(n)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    ab = _gather(sched.alpha_bar, n, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def q_step(x_prev: torch.Tensor, n, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One transition q(x_n | x_{n-1})."""
    sched.check(n)
    b = _gather(sched.betas, np.asarray(n) - 1, x_prev)
    return (1 - b).sqrt() * x_prev + b.sqrt() * eps


def v_target(z0, eps, n, sched):
    ab = _gather(sched.alpha_bar, n, z0)
    return ab.sqrt() * eps - (1 - ab).sqrt() * z0


def x0_from_v(zn, n, v, sched):
    ab = _gather(sched.alpha_bar, n, zn)
    return ab.sqrt() * zn - (1 - ab).sqrt() * v


def eps_from_v(zn, n, v, sched):
    ab = _gather(sched.alpha_bar, n, zn)
    return (1 - ab).sqrt() * zn + ab.sqrt() * v


def x0_from_eps(zn, n, eps, sched):
    ab = _gather(sched.alpha_bar, n, zn)
    return (zn - (1 - ab).sqrt() * eps) / ab.sqrt()


def eps_from_x0(zn, n, x0, sched):
    ab = _gather(sched.alpha_bar, n, zn)
    return (zn - ab.sqrt() * x0) / (1 - ab).sqrt()


def posterior_mean(z0, zn, n, sched):
    """Mean of q(z_{n-1} | z_n, z_0)."""
    b = _gather(sched.betas, np.asarray(n) - 1, zn)
    ab = _gather(sched.alpha_bar, n, zn)
    ab_prev = _gather(sched.alpha_bar, np.asarray(n) - 1, zn)
    a = 1 - b
    c0 = ab_prev.sqrt() * b / (1 - ab)
    cn = a.sqrt() * (1 - ab_prev) / (1 - ab)
    return c0 * z0 + cn * zn


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------

@dataclass
class GuidanceConfig:
    weight: float = 0.0
    rescale: float = 0.7
    p_uncond: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.rescale <= 1.0:
            raise ValueError("guidance rescale factor must lie in [0, 1]")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError("conditional dropout probability must lie in [0, 1)")

    @property
    def active(self) -> bool:
        return self.weight != 0.0


def _per_sample_std(x: torch.Tensor) -> torch.Tensor:
    if x.dim() <= 1:
        return x.std(unbiased=False) if x.numel() > 1 else x.abs()
    return x.flatten(1).std(dim=1, unbiased=False).reshape(-1, *([1] * (x.dim() - 1)))


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, g: GuidanceConfig) -> torch.Tensor:
    """(1 + w) eps_c - w eps_u, then std-rescaled toward eps_c with blend phi (w != 0 only)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional estimates differ in shape")
    if g.weight == 0:
        return eps_cond
    guided = (1 + g.weight) * eps_cond - g.weight * eps_uncond
    if g.rescale == 0:
        return guided
    std_c, std_g = _per_sample_std(eps_cond), _per_sample_std(guided)
    ratio = torch.where(std_g > 0, std_c / std_g.clamp_min(1e-30), torch.ones_like(std_g))
    return g.rescale * guided * ratio + (1 - g.rescale) * guided


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    eps: torch.Tensor
    x0: torch.Tensor
    var_frac: torch.Tensor | None = None  # v' in [0, 1], learned-variance heads only


def _split(out: torch.Tensor, channels: int):
    if out.shape[1] == channels:
        return out, None
    if out.shape[1] == 2 * channels:
        est, h = out.split(channels, dim=1)
        return est, (h + 1) / 2
    raise ValueError(f"denoiser returned {out.shape[1]} channels for a {channels}-channel latent")


def predict(model, zn, n, cond, sched: NoiseSchedule, param: str = "eps",
            guidance: GuidanceConfig | None = None, null_cond=None) -> Prediction:
    """Evaluate the denoiser (with optional guidance) and convert to (eps, x0)."""
    if param not in PARAMS:
        raise ValueError(f"unknown parameterization {param!r}")
    B, C = zn.shape[:2]
    steps = torch.as_tensor(_as_steps(n, B))
    est, frac = _split(model(zn, steps, cond), C)
    if guidance is not None and guidance.active:
        est_u, _ = _split(model(zn, steps, null_cond), C)
        est = cfg_combine(est, est_u, guidance)
    nn_ = steps.numpy()
    if param == "eps":
        eps = est
        x0 = x0_from_eps(zn, nn_, eps, sched)
    else:
        eps = eps_from_v(zn, nn_, est, sched)
        x0 = x0_from_v(zn, nn_, est, sched)
    return Prediction(eps, x0, frac)


# ---------------------------------------------------------------------------
# training losses
# ---------------------------------------------------------------------------

def _normal_kl(mean1, logvar1, mean2, logvar2):
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def learned_log_variance(frac: torch.Tensor, n, sched: NoiseSchedule, like: torch.Tensor) -> torch.Tensor:
    """log Sigma = v' log beta_n + (1 - v') log beta~_n."""
    log_b = _gather(np.log(sched.betas), np.asarray(n) - 1, like)
    log_post = _gather(sched.log_posterior_variance(), np.asarray(n) - 1, like)
    return frac * log_b + (1 - frac) * log_post


def vlb_term(pred_eps, frac, z0, zn, n, sched):
    """Variational bound term for the variance head; the mean is not trained through it."""
    mean_true = posterior_mean(z0, zn, n, sched)
    logvar_true = _gather(sched.log_posterior_variance(), np.asarray(n) - 1, zn)
    x0_hat = x0_from_eps(zn, n, pred_eps.detach(), sched)
    mean_hat = posterior_mean(x0_hat, zn, n, sched)
    logvar_hat = learned_log_variance(frac, n, sched, zn)
    kl = _normal_kl(mean_true, logvar_true, mean_hat, logvar_hat).flatten(1).mean(1) / math.log(2.0)
    # at n = 1 the term is the decoder negative log-likelihood of z0
    nll = 0.5 * (math.log(2 * math.pi) + logvar_hat + (z0 - mean_hat) ** 2 * torch.exp(-logvar_hat))
    nll = nll.flatten(1).mean(1) / math.log(2.0)
    first = torch.as_tensor(np.asarray(n) == 1)
    return torch.where(first, nll, kl).mean()


def loss_simple(model, z0: torch.Tensor, cond, sched: NoiseSchedule, param: str = "eps",
                gen: torch.Generator | None = None, n=None, eps=None, vlb_weight: float = 0.001) -> torch.Tensor:
    """Mean squared error between target (eps or v) and the model output.

    For a learned-variance model the hybrid objective ``L_simple + vlb_weight * L_vlb``
    is returned.
    """
    if param not in PARAMS:
        raise ValueError(f"unknown parameterization {param!r}")
    B, C = z0.shape[:2]
    if n is None:
        n = torch.randint(1, sched.N + 1, (B,), generator=gen)
    steps = _as_steps(n, B)
    if eps is None:
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    zn = q_sample(z0, steps, eps, sched)
    target = eps if param == "eps" else v_target(z0, eps, steps, sched)
    est, frac = _split(model(zn, torch.as_tensor(steps), cond), C)
    loss = (target - est).pow(2).mean()
    if frac is not None:
        pred_eps = est if param == "eps" else eps_from_v(zn, steps, est, sched)
        loss = loss + vlb_weight * vlb_term(pred_eps, frac, z0, zn, steps, sched)
    return loss


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def ddpm_step(model, zn, n: int, cond, sched: NoiseSchedule, variance_mode: str = "fixed",
              gen: torch.Generator | None = None, param: str = "eps",
              guidance: GuidanceConfig | None = None, null_cond=None, noise=None) -> torch.Tensor:
    """Ancestral step z_n -> z_{n-1}; no noise is added at n = 1."""
    sched.check(n)
    if variance_mode not in ("fixed", "learned"):
        raise ValueError(f"unknown variance mode {variance_mode!r}")
    pred = predict(model, zn, n, cond, sched, param, guidance, null_cond)
    if variance_mode == "learned" and pred.var_frac is None:
        raise ValueError("learned variance needs a model with a variance head (2x output channels)")
    b = float(sched.beta(n))
    ab = float(sched.abar(n))
    mean = (zn - b / math.sqrt(1 - ab) * pred.eps) / math.sqrt(1 - b)
    if n == 1:
        return mean
    if variance_mode == "fixed":
        std = math.sqrt(float(sched.posterior_variance[n - 1]))
    else:
        std = torch.exp(0.5 * learned_log_variance(pred.var_frac, np.full(zn.shape[0], n), sched, zn))
    if noise is None:
        noise = torch.randn(zn.shape, generator=gen, dtype=zn.dtype)
    return mean + std * noise


@torch.no_grad()
def ddpm_sample(model, z_N: torch.Tensor, cond, sched: NoiseSchedule, gen: torch.Generator | None = None,
                variance_mode: str = "fixed", param: str = "eps", guidance=None, null_cond=None) -> torch.Tensor:
    z = z_N
    for n in range(sched.N, 0, -1):
        z = ddpm_step(model, z, n, cond, sched, variance_mode, gen, param, guidance, null_cond)
    return z


def ddim_timesteps(N: int, S: int) -> list[int]:
    """Uniform-stride sub-schedule, ascending, ending at N."""
    if not 1 <= S <= N:
        raise ScheduleError(f"DDIM step count {S} must lie in [1, {N}]")
    return [(i + 1) * N // S for i in range(S)]


def ddim_sigma(sched: NoiseSchedule, n: int, n_prev: int, eta: float) -> float:
    ab, ab_prev = float(sched.abar(n)), float(sched.abar(n_prev))
    return eta * math.sqrt((1 - ab_prev) / (1 - ab)) * math.sqrt(1 - ab / ab_prev)


@torch.no_grad()
def ddim_sample(model, z_N: torch.Tensor, cond, sched: NoiseSchedule, S: int, eta: float = 0.0,
                gen: torch.Generator | None = None, param: str = "eps", guidance=None, null_cond=None) -> torch.Tensor:
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    steps = ddim_timesteps(sched.N, S)
    z = z_N
    for i in range(S - 1, -1, -1):
        n = steps[i]
        n_prev = steps[i - 1] if i > 0 else 0
        pred = predict(model, z, n, cond, sched, param, guidance, null_cond)
        ab_prev = float(sched.abar(n_prev))
        sigma = ddim_sigma(sched, n, n_prev, eta)
        z = math.sqrt(ab_prev) * pred.x0 + math.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * pred.eps
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return z
