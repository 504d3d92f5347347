"""End-to-end workflows: data generation, autoencoder and LDM training, sampling,
evaluation, autoregressive rollouts and the one-step baseline.

Grids inside the models are channel-first and normalised per channel; the
public functions take and return physical ``(B, T, H, W, C)`` arrays.
"""
from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import diffusion as dfn
from .autoencoder import AutoencoderConfig, LatentAutoencoder, NumericalError, estimate_latent_scale, train_autoencoder
from .backbones import DiT, DiTConfig, Unet3D, UnetConfig, autoregressive_flops, flops_forward
from .conditioning import (ConditionSequence, FirstFrameEncoder, TextEncoder, Vocabulary, caption_smoke,
                           concat_modalities, drop_condition)
from .geometry import FieldSample, KernelNet, LatentGridSpec, build_ball_index, kernel_interpolate
from .metrics import EvalReport, rel_l2, per_timestep_loss
from .persistence import Checkpoint, Dataset, RunConfig, module_tensors, load_module, read_dataset, write_dataset
from .solver import CHANNELS, CFLError, ProblemSpec, bilinear, resolve_trajectory, simulate_sample
from .tensor_core import generator, make_adam, adam_step, np_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, grids: np.ndarray) -> "Normalizer":
        axes = tuple(range(grids.ndim - 1))
        std = grids.std(axis=axes)
        return cls(grids.mean(axis=axes), np.where(std > 0, std, 1.0))

    def to_model(self, grids) -> torch.Tensor:
        """(B, T, H, W, C) physical -> (B, C, T, H, W) normalised tensor."""
        x = (np.asarray(grids, dtype=np.float64) - self.mean) / self.std
        return torch.as_tensor(x, dtype=torch.get_default_dtype()).permute(0, 4, 1, 2, 3).contiguous()

    def from_model(self, x: torch.Tensor) -> np.ndarray:
        return x.detach().permute(0, 2, 3, 4, 1).cpu().double().numpy() * self.std + self.mean

    def frame_to_model(self, frames) -> torch.Tensor:
        """(B, H, W, C) physical -> (B, C, H, W)."""
        x = (np.asarray(frames, dtype=np.float64) - self.mean) / self.std
        return torch.as_tensor(x, dtype=torch.get_default_dtype()).permute(0, 3, 1, 2).contiguous()

    def to_dict(self):
        return {"norm_mean": [float(v) for v in self.mean], "norm_std": [float(v) for v in self.std]}

    @classmethod
    def from_meta(cls, meta) -> "Normalizer":
        return cls(np.asarray(meta["norm_mean"], dtype=np.float64), np.asarray(meta["norm_std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def problem_spec(cfg: RunConfig) -> ProblemSpec:
    return ProblemSpec(resolution=cfg["resolution"], n_steps=cfg["n_steps"], dt=cfg["dt"], nu=cfg["nu"],
                       buoyancy_range=cfg["buoyancy_range"], plume_count_range=cfg["plume_count_range"],
                       warmup=cfg["warmup"], seed=cfg["seed"])


def make_smoke_data(spec: ProblemSpec, count: int, seed: int, stream: int = 0):
    """``count`` trajectories (N, T, H, W, 3) float32 with parameters and captions."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np_rng(seed, 10, stream)
    grids, params, captions = [], [], []
    for _ in range(count):
        g, p = simulate_sample(spec, rng)
        grids.append(g.astype(np.float32))
        params.append(p)
        captions.append(caption_smoke(g[0], p["buoyancy"]).text)
    return np.stack(grids), params, captions


def generate_dataset(cfg: RunConfig, out_dir) -> dict[str, Path]:
    """Write ``train.lpde`` and ``val.lpde`` (plus sidecars) under ``out_dir``."""
    spec = problem_spec(cfg)
    out_dir = Path(out_dir)
    splits = {"train": cfg["n_train"], "val": cfg["n_val"]}
    made = {name: make_smoke_data(spec, n, cfg["seed"], stream=i) for i, (name, n) in enumerate(splits.items()) if n > 0}
    norm = Normalizer.fit(made["train"][0].astype(np.float64))
    paths = {}
    for name, (grids, params, caps) in made.items():
        meta = {"channels": list(CHANNELS), "captions": caps, "params": params, "split": [name] * len(grids),
                "problem": {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()},
                "seed": cfg["seed"], **norm.to_dict()}
        if cfg["layout"] == "mesh":
            rng = np_rng(cfg["seed"], 11, len(paths))
            from .solver import sample_to_mesh
            samples = [sample_to_mesh(g.astype(np.float64), cfg["mesh_points"], rng, channels=CHANNELS) for g in grids]
            ds = Dataset("mesh", samples, meta)
        else:
            ds = Dataset("grid", list(grids), meta)
        path = out_dir / f"{name}.lpde"
        write_dataset(path, ds)
        paths[name] = path
    return paths


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def ae_config(cfg: RunConfig) -> AutoencoderConfig:
    return AutoencoderConfig(in_channels=len(CHANNELS), latent_channels=cfg["latent_channels"], widths=cfg["ae_widths"],
                             temporal_down=cfg["ae_temporal_down"], factor=cfg["factor"],
                             res_blocks=cfg["ae_res_blocks"], kl_weight=cfg["kl_weight"])


def backbone_config(cfg: RunConfig, latent_channels: int):
    if cfg["backbone"] == "dit":
        return DiTConfig(in_channels=latent_channels, patch_t=cfg["patch_t"], patch_s=cfg["patch_s"],
                         hidden=cfg["dit_hidden"], depth=cfg["dit_depth"], heads=cfg["dit_heads"],
                         cond_dim=cfg["cond_dim"], learn_sigma=cfg["learn_sigma"])
    return UnetConfig(in_channels=latent_channels, cond_dim=cfg["cond_dim"], learn_sigma=cfg["learn_sigma"])


class LatentDiffusion(nn.Module):
    """Denoiser plus condition encoders for one modality setting."""

    def __init__(self, backbone_kind: str, backbone_cfg, modality: str = "first-frame", in_channels: int = 3,
                 vocab: Vocabulary | None = None, text_max_len: int = 64, frame_widths=(16, 32, 64)):
        super().__init__()
        if modality not in ("first-frame", "text", "both"):
            raise ValueError(f"unknown modality {modality!r}")
        self.backbone_kind = backbone_kind
        self.modality = modality
        self.denoiser = DiT(backbone_cfg) if backbone_kind == "dit" else Unet3D(backbone_cfg)
        d_c = backbone_cfg.cond_dim
        self.d_c = d_c
        self.frame_encoder = FirstFrameEncoder(in_channels, d_c, frame_widths) if modality != "text" else None
        self.vocab = vocab
        if modality != "first-frame":
            if vocab is None:
                raise ValueError("text conditioning needs a vocabulary")
            self.text_encoder = TextEncoder(len(vocab), d_c, text_max_len)
        else:
            self.text_encoder = None

    def forward(self, z, n, cond=None):
        return self.denoiser(z, n, cond)

    def condition(self, frames: torch.Tensor | None = None, captions=None) -> ConditionSequence:
        """``frames`` (B, C, H, W) normalised, ``captions`` list of strings."""
        text = frame = None
        if captions is not None:
            if self.text_encoder is None:
                raise ValueError("this model has no text encoder")
            text = self.text_encoder(self.vocab.batch(list(captions), self.text_encoder.max_len))
        if frames is not None:
            if self.frame_encoder is None:
                raise ValueError("this model has no first-frame encoder")
            frame = self.frame_encoder(frames)
        if text is None and frame is None:
            raise ValueError("no condition given")
        if self.modality == "both":
            batch = (text if text is not None else frame).batch
            return concat_modalities(text, frame, self.d_c, batch)
        return text if text is not None else frame


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

def fit_autoencoder(grids_phys: np.ndarray, cfg: AutoencoderConfig, steps: int, norm: Normalizer, *, lr=1e-3,
                    batch_size=4, seed=0, scale_grids: np.ndarray | None = None, log_every=200):
    """Train on ``grids_phys`` and estimate the latent scale on ``scale_grids`` (default: the same data)."""
    x = (np.asarray(grids_phys, dtype=np.float64) - norm.mean) / norm.std
    model, hist = train_autoencoder(x, cfg, steps, lr=lr, batch_size=batch_size, seed=seed, log_every=log_every)
    ref = grids_phys if scale_grids is None else scale_grids
    estimate_latent_scale(model, norm.to_model(ref))
    return model, hist


@torch.no_grad()
def reconstruct(model: LatentAutoencoder, grids_phys: np.ndarray, norm: Normalizer) -> np.ndarray:
    x = norm.to_model(grids_phys)
    out = [model.decode(model.encode(x[i:i + 4]).mean, scaled=False) for i in range(0, len(x), 4)]
    return norm.from_model(torch.cat(out))


def reconstruction_error(model, grids_phys, norm) -> float:
    rec = reconstruct(model, grids_phys, norm)
    return float(np.mean([rel_l2(rec[i], grids_phys[i]) for i in range(len(rec))]))


def ae_checkpoint(model: LatentAutoencoder, cfg: AutoencoderConfig, norm: Normalizer, seed: int, step: int,
                  extra: dict | None = None) -> Checkpoint:
    meta = {"kind": "autoencoder", "ae_config": cfg.to_dict(), "scale": float(model.scale), "seed": seed,
            "step": step, **norm.to_dict(), **(extra or {})}
    return Checkpoint(module_tensors("ae", model), meta)


def load_autoencoder(ckpt: Checkpoint) -> LatentAutoencoder:
    ckpt.require("ae_config", "scale")
    model = LatentAutoencoder(AutoencoderConfig(**ckpt.meta["ae_config"]))
    load_module("ae", model, ckpt)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# LDM training
# ---------------------------------------------------------------------------

@dataclass
class LDMTrainConfig:
    steps: int = 3000
    lr: float = 3e-4
    batch_size: int = 8
    param: str = "eps"
    schedule: str = "linear"
    N: int = 1000
    p_uncond: float = 0.0
    modality_dropout: float = 0.25  # "both": probability of dropping each modality
    seed: int = 0
    log_every: int = 500


@dataclass
class LDMBundle:
    ldm: LatentDiffusion
    ae: LatentAutoencoder
    sched: dfn.NoiseSchedule
    norm: Normalizer
    param: str = "eps"
    latent_shape: tuple = ()
    losses: list = field(default_factory=list)

    def null_condition(self, batch: int) -> ConditionSequence:
        d = self.ldm.d_c
        return ConditionSequence(torch.zeros(batch, 1, d), torch.ones(batch, 1, dtype=torch.bool), "null")


@torch.no_grad()
def encode_latents(ae: LatentAutoencoder, x: torch.Tensor) -> torch.Tensor:
    return torch.cat([ae.encode_scaled(x[i:i + 4]) for i in range(0, len(x), 4)])


def train_ldm(ae: LatentAutoencoder, grids_phys: np.ndarray, norm: Normalizer, tcfg: LDMTrainConfig,
              backbone_kind: str = "dit", backbone_cfg=None, modality: str = "first-frame",
              captions: list[str] | None = None, vocab: Vocabulary | None = None, ldm: LatentDiffusion | None = None,
              callback=None) -> LDMBundle:
    """Frozen autoencoder; denoiser and condition encoders trained on L_simple."""
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    x = norm.to_model(grids_phys)
    z0 = encode_latents(ae, x)
    latent_shape = tuple(z0.shape[1:])
    if backbone_cfg is None:
        backbone_cfg = DiTConfig(in_channels=latent_shape[0])
    if backbone_cfg.in_channels != latent_shape[0]:
        raise ValueError(f"denoiser expects {backbone_cfg.in_channels} latent channels, autoencoder gives {latent_shape[0]}")
    if isinstance(backbone_cfg, DiTConfig):
        backbone_cfg.token_grid(latent_shape[1:])
    else:
        backbone_cfg.validate(latent_shape[1:])
    if modality != "first-frame":
        if captions is None:
            raise ValueError("text conditioning needs captions")
        vocab = vocab or Vocabulary.build(captions)
    frames = x[:, :, 0]
    if ldm is None:
        with torch.random.fork_rng():
            torch.manual_seed(tcfg.seed)
            ldm = LatentDiffusion(backbone_kind, backbone_cfg, modality, x.shape[1], vocab)
    sched = dfn.make_schedule(tcfg.schedule, tcfg.N)
    opt = make_adam(ldm.parameters(), tcfg.lr)
    warm = max(1, tcfg.steps // 20)
    lr_sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warm) * 0.5 * (1 + math.cos(math.pi * min(s, tcfg.steps) / tcfg.steps)) * 0.9 + 0.1)
    pick = np_rng(tcfg.seed, 3)
    gen = generator(tcfg.seed, 4)
    bundle = LDMBundle(ldm, ae, sched, norm, tcfg.param, latent_shape)
    ldm.train()
    for step in range(tcfg.steps):
        ids = pick.choice(len(z0), size=min(tcfg.batch_size, len(z0)), replace=False)
        idx = torch.as_tensor(ids)
        caps = [captions[i] for i in ids] if captions is not None and modality != "first-frame" else None
        fr = frames[idx] if modality != "text" else None
        if modality == "both":
            # modality dropout so either condition alone is meaningful at sampling time
            r = pick.random()
            if r < tcfg.modality_dropout:
                caps = None
            elif r < 2 * tcfg.modality_dropout:
                fr = None
        cond = ldm.condition(fr, caps)
        if tcfg.p_uncond > 0:
            cond = drop_condition(cond, tcfg.p_uncond, gen)
        loss = dfn.loss_simple(ldm, z0[idx], cond, sched, tcfg.param, gen)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite diffusion loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        adam_step(opt)
        lr_sched.step()
        bundle.losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, bundle.losses[-1])
        if tcfg.log_every and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            log.info("ldm step %d loss %.5f", step, np.mean(bundle.losses[-tcfg.log_every:]))
    ldm.eval()
    return bundle


def ldm_checkpoint(b: LDMBundle, cfg_dict: dict, seed: int, step: int) -> Checkpoint:
    tensors = OrderedDict()
    tensors.update(module_tensors("ae", b.ae))
    tensors.update(module_tensors("ldm", b.ldm))
    bcfg = b.ldm.denoiser.cfg
    meta = {"kind": "ldm", "ae_config": b.ae.cfg.to_dict(), "backbone": b.ldm.backbone_kind,
            "backbone_config": bcfg.to_dict(), "modality": b.ldm.modality, "scale": float(b.ae.scale),
            "schedule": b.sched.to_dict(), "param": b.param, "latent_shape": list(b.latent_shape),
            "vocab": b.ldm.vocab.tokens if b.ldm.vocab is not None else None,
            "text_max_len": b.ldm.text_encoder.max_len if b.ldm.text_encoder is not None else 64,
            "seed": seed, "step": step, "config": cfg_dict, **b.norm.to_dict()}
    return Checkpoint(tensors, meta)


def load_ldm(ckpt: Checkpoint) -> LDMBundle:
    ckpt.require("ae_config", "backbone", "backbone_config", "modality", "schedule", "param", "latent_shape")
    m = ckpt.meta
    ae = load_autoencoder(ckpt)
    kind = m["backbone"]
    bc = DiTConfig(**m["backbone_config"]) if kind == "dit" else UnetConfig(**m["backbone_config"])
    vocab = Vocabulary(m["vocab"]) if m.get("vocab") else None
    ldm = LatentDiffusion(kind, bc, m["modality"], ae.cfg.in_channels, vocab, m.get("text_max_len", 64))
    load_module("ldm", ldm, ckpt)
    ldm.eval()
    sched = dfn.make_schedule(m["schedule"]["kind"], m["schedule"]["N"])
    return LDMBundle(ldm, ae, sched, Normalizer.from_meta(m), m["param"], tuple(m["latent_shape"]))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleConfig:
    sampler: str = "ddpm"
    steps: int = 1000  # DDIM sub-schedule length
    eta: float = 0.0
    seed: int = 0
    guidance: dfn.GuidanceConfig | None = None


@torch.no_grad()
def sample_latents(b: LDMBundle, cond: ConditionSequence, scfg: SampleConfig) -> torch.Tensor:
    B = cond.batch
    gen = generator(scfg.seed, 5)
    zN = torch.randn((B, *b.latent_shape), generator=gen)
    null = b.null_condition(B) if scfg.guidance is not None and scfg.guidance.active else None
    if scfg.sampler == "ddpm":
        return dfn.ddpm_sample(b.ldm, zN, cond, b.sched, gen, param=b.param, guidance=scfg.guidance, null_cond=null)
    if scfg.sampler == "ddim":
        return dfn.ddim_sample(b.ldm, zN, cond, b.sched, scfg.steps, scfg.eta, gen, param=b.param,
                               guidance=scfg.guidance, null_cond=null)
    raise ValueError(f"unknown sampler {scfg.sampler!r}")


@torch.no_grad()
def decode_latents(b: LDMBundle, z: torch.Tensor) -> np.ndarray:
    out = torch.cat([b.ae.decode(z[i:i + 4], scaled=True) for i in range(0, len(z), 4)])
    return b.norm.from_model(out)


def sample(b: LDMBundle, scfg: SampleConfig, first_frames: np.ndarray | None = None,
           captions: list[str] | None = None, return_latents: bool = False):
    """Physical trajectories (B, T, H, W, C) from first frames (B, H, W, C) and/or captions."""
    frames = b.norm.frame_to_model(first_frames) if first_frames is not None else None
    with torch.no_grad():
        cond = b.ldm.condition(frames, captions)
    z = sample_latents(b, cond, scfg)
    out = decode_latents(b, z)
    return (out, z) if return_latents else out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def denoiser_flops(b: LDMBundle, cond_len: int) -> int:
    z = torch.zeros(1, *b.latent_shape)
    cond = ConditionSequence(torch.zeros(1, cond_len, b.ldm.d_c), torch.ones(1, cond_len, dtype=torch.bool),
                             "first-frame")
    return flops_forward(b.ldm.denoiser, z, torch.ones(1, dtype=torch.long), cond)["total"]


def evaluate(b: LDMBundle, grids_phys: np.ndarray, scfg: SampleConfig, mode: str = "direct",
             captions: list[str] | None = None, buoyancies=None, spec: ProblemSpec | None = None,
             names=None, batch: int = 8) -> tuple[EvalReport, np.ndarray]:
    """Sample for every reference trajectory and score it.

    ``direct`` compares with the stored trajectories. ``resolve`` re-runs the
    solver from each generated first frame and compares the generated
    trajectory with that re-solve (text conditioning).
    """
    if mode not in ("direct", "resolve"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    use_text = b.ldm.modality == "text" or (b.ldm.modality == "both" and captions is not None)
    names = names or [str(i) for i in range(len(grids_phys))]
    report = EvalReport(channels=CHANNELS, label=f"{mode} evaluation, {scfg.sampler} ({scfg.steps} steps)")
    preds = []
    t0 = time.perf_counter()
    for s in range(0, len(grids_phys), batch):
        sl = slice(s, s + batch)
        frames = None if (b.ldm.modality == "text" or (use_text and b.ldm.modality == "both")) else grids_phys[sl, 0]
        caps = captions[sl] if use_text else None
        preds.append(sample(b, replace(scfg, seed=scfg.seed + s), frames, caps))
    report.sample_seconds = time.perf_counter() - t0
    preds = np.concatenate(preds)
    if mode == "direct":
        for i, pred in enumerate(preds):
            report.add(names[i], pred, grids_phys[i])
    else:
        score_resolved(preds, buoyancies, spec, names, report)
    cond_len = 1
    with torch.no_grad():
        frames0 = b.norm.frame_to_model(grids_phys[:1, 0]) if b.ldm.frame_encoder is not None else None
        caps0 = captions[:1] if (captions is not None and b.ldm.text_encoder is not None) else None
        cond_len = b.ldm.condition(frames0, caps0).length
    n_evals = b.sched.N if scfg.sampler == "ddpm" else scfg.steps
    report.flops = denoiser_flops(b, cond_len) * n_evals
    return report, preds


def score_resolved(preds: np.ndarray, buoyancies, spec: ProblemSpec, names=None,
                   report: EvalReport | None = None) -> EvalReport:
    """Re-solve from each generated first frame and score the generated trajectory against it.

    Samples whose re-solve violates CFL or blows up are listed as excluded.
    """
    names = names or [str(i) for i in range(len(preds))]
    report = report or EvalReport(channels=CHANNELS, label="re-solve of generated initial frames")
    for i, pred in enumerate(preds):
        try:
            ref = resolve_trajectory(pred[0], spec, float(buoyancies[i]), n_frames=pred.shape[0])
        except CFLError as e:
            log.warning("sample %s excluded from aggregate: %s", names[i], e)
            report.exclude(names[i], str(e))
            continue
        if not np.all(np.isfinite(ref)):
            report.exclude(names[i], "non-finite re-solve")
            continue
        report.add(names[i], pred, ref)
    return report


def resolve_report(grids_phys: np.ndarray, buoyancies, spec: ProblemSpec) -> EvalReport:
    """Re-solve every stored trajectory from its own first frame (solver self-consistency)."""
    report = EvalReport(channels=CHANNELS, label="re-solve of reference initial frames")
    for i, g in enumerate(grids_phys):
        ref = resolve_trajectory(g[0], spec, float(buoyancies[i]), n_frames=g.shape[0])
        report.add(str(i), ref, g)
    return report


def ddim_sweep(b: LDMBundle, grids_phys, steps=(10, 50, 1000), eta=0.0, seed=0, batch=8):
    """(S, mean rel L2, seconds) per DDIM step count."""
    rows = []
    for S in steps:
        rep, _ = evaluate(b, grids_phys, SampleConfig("ddim", S, eta, seed), batch=batch)
        rows.append((S, rep.mean_rel_l2, rep.sample_seconds))
    return rows


# ---------------------------------------------------------------------------
# autoregressive use of the LDM
# ---------------------------------------------------------------------------

def rollout_windows(b: LDMBundle, scfg: SampleConfig, windows: int, first_frame: np.ndarray | None = None,
                    caption: str | None = None, on_window=None):
    """Chain ``windows`` LDM samples; window k>1 is conditioned on the last frame of window k-1.

    Returns the concatenated trajectory (overlap frames dropped) and the
    modality used by each window.
    """
    if windows < 1:
        raise ValueError("need at least one window")
    if first_frame is None and caption is None:
        raise ValueError("rollout needs a first frame or a caption")
    parts, tags = [], []
    frame = None if first_frame is None else np.asarray(first_frame)[None]
    caps = [caption] if caption is not None else None
    for k in range(windows):
        if k == 0 and caps is not None and frame is None:
            traj = sample(b, scfg, None, caps)
            tags.append("text")
        else:
            traj = sample(b, replace(scfg, seed=scfg.seed + k), frame, None)
            tags.append("first-frame")
        if not np.all(np.isfinite(traj)):
            raise NumericalError(f"non-finite rollout in window {k + 1}")
        parts.append(traj[0] if k == 0 else traj[0, 1:])
        log.info("window %d conditioned on %s", k + 1, tags[-1])
        if on_window is not None:
            on_window(k, np.concatenate(parts), tags)
        frame = traj[:, -1]
    return np.concatenate(parts), tags


# ---------------------------------------------------------------------------
# one-step autoregressive baseline
# ---------------------------------------------------------------------------

class StepPredictor(nn.Module):
    """u(t) -> u(t + 1) as a residual conv net on normalised frames."""

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 4):
        super().__init__()
        layers = [nn.Conv2d(channels, width, 3, padding=1), nn.GELU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.GELU()]
        layers.append(nn.Conv2d(width, channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, frame):
        return frame + self.net(frame)


def train_step_predictor(grids_phys: np.ndarray, norm: Normalizer, steps: int = 2000, lr: float = 1e-3,
                         batch_size: int = 32, seed: int = 0, width: int = 32, depth: int = 4):
    x = norm.to_model(grids_phys)  # (B, C, T, H, W)
    cur = x[:, :, :-1].permute(0, 2, 1, 3, 4).reshape(-1, x.shape[1], *x.shape[3:])
    nxt = x[:, :, 1:].permute(0, 2, 1, 3, 4).reshape(-1, x.shape[1], *x.shape[3:])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = StepPredictor(x.shape[1], width, depth)
    opt = make_adam(model.parameters(), lr)
    lr_sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / steps)))
    pick = np_rng(seed, 6)
    losses = []
    for _ in range(steps):
        idx = torch.as_tensor(pick.choice(len(cur), size=min(batch_size, len(cur)), replace=False))
        loss = (model(cur[idx]) - nxt[idx]).pow(2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        adam_step(opt)
        lr_sched.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


@torch.no_grad()
def rollout_step_predictor(model: StepPredictor, first_frames: np.ndarray, n_frames: int, norm: Normalizer) -> np.ndarray:
    """Feed predictions back for ``n_frames - 1`` steps; returns physical (B, T, H, W, C)."""
    f = norm.frame_to_model(first_frames)
    out = [f]
    for _ in range(n_frames - 1):
        f = model(f)
        out.append(f)
    traj = torch.stack(out, dim=2)
    return norm.from_model(traj)


def step_predictor_flops(model: StepPredictor, frame_shape, n_frames: int) -> int:
    per_step = flops_forward(model, torch.zeros(1, *frame_shape))["total"]
    return autoregressive_flops(per_step, n_frames - 1)


# ---------------------------------------------------------------------------
# decoding onto arbitrary points
# ---------------------------------------------------------------------------

def output_grid_spec(n_times: int, spatial, radius: float) -> LatentGridSpec:
    return LatentGridSpec(n_times, tuple(spatial), radius)


def decode_to_points(grid_norm: torch.Tensor, spec: LatentGridSpec, points: np.ndarray, kernel: nn.Module,
                     index=None) -> torch.Tensor:
    """Decoded grid (T, H, W, C) -> values at ``points`` (M, 2) for every frame, (T, M, C)."""
    T = spec.n_times
    times = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    queries = FieldSample(times, points, np.zeros((T, len(points), 1))).coords()
    out = kernel_interpolate(grid_norm, spec, queries, kernel, index=index)
    return out.reshape(T, len(points), -1)


def train_point_decoder(grids_norm: torch.Tensor, targets_phys: np.ndarray, norm: Normalizer, radius: float,
                        n_points: int = 1024, steps: int = 60, lr: float = 3e-3, seed: int = 0):
    """Fit the decoder kernel that maps decoded grids to random points.

    ``grids_norm`` holds decoded trajectories (B, T, H, W, C) in normalised units;
    ``targets_phys`` the true grids (B, T, H, W, C) they should reproduce.
    """
    B, T, H, W, C = grids_norm.shape
    spec = output_grid_spec(T, (H, W), radius)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        kernel = KernelNet(3, C, radius, hidden=32, depth=2)
    rng = np_rng(seed, 7)
    pts = [rng.uniform(0.0, 1.0, size=(n_points, 2)) for _ in range(4)]
    times = np.linspace(0.0, 1.0, T)
    idx = [build_ball_index(spec.coords(), FieldSample(times, p, np.zeros((T, n_points, 1))).coords(), radius)
           for p in pts]
    tgt = [[torch.as_tensor((bilinear(targets_phys[b].astype(np.float64), p) - norm.mean) / norm.std,
                            dtype=grids_norm.dtype) for p in pts] for b in range(B)]
    opt = make_adam(kernel.parameters(), lr)
    losses = []
    for s in range(steps):
        b, j = int(rng.integers(B)), s % len(pts)
        pred = decode_to_points(grids_norm[b], spec, pts[j], kernel, index=idx[j])
        loss = (pred - tgt[b][j]).pow(2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        adam_step(opt)
        losses.append(float(loss.detach()))
    kernel.eval()
    return kernel, spec, losses
