"""``latentpde`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import pipeline as pl
from .autoencoder import NumericalError
from .backbones import DiT, DiTConfig, Unet3D, UnetConfig, dit_flops, flops_forward
from .conditioning import CylinderParams, caption_cylinder, flow_regime
from .diffusion import GuidanceConfig
from .geometry import CoverageError, KernelNet
from .metrics import step_sweep_table
from .persistence import Checkpoint, ConfigError, Dataset, FormatError, RunConfig, read_dataset, write_dataset
from .render import write_strip
from .solver import CHANNELS, CFLError
from .tensor_core import set_default_precision

log = logging.getLogger("latentpde")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> RunConfig:
    flags = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        flags["seed"] = str(args.seed)
    cfg = RunConfig.resolve(args.config, flags)
    set_default_precision(cfg["precision"])
    print(f"# {args.command} seed={cfg['seed']}")
    for line in cfg.echo().splitlines():
        print(f"#   {line}")
    return cfg


def _load_data(path) -> Dataset:
    ds = read_dataset(path)
    if ds.layout != "grid":
        raise FormatError(f"{path}: training commands expect the grid layout")
    return ds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    paths = pl.generate_dataset(cfg, args.out)
    for name, path in paths.items():
        ds = read_dataset(path)
        shape = ds.samples[0].shape if ds.layout == "grid" else (ds.samples[0].n_times, ds.samples[0].n_points)
        print(f"{name}: {len(ds)} samples, layout {ds.layout}, sample shape {tuple(shape)} -> {path}")
        for cap in ds.captions[:2]:
            print(f"  caption: {cap}")
    print(f"generated in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train_ae(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    grids = ds.grids(ds.split("train") or None).astype(np.float64)
    norm = pl.Normalizer.from_meta(ds.meta)
    acfg = pl.ae_config(cfg)
    acfg.latent_shape(grids.shape[1:4])
    if len(grids) < 16:
        raise FormatError(f"{args.data}: latent scale estimation needs at least 16 training samples, found {len(grids)}")
    out = Path(args.out)
    state = {}

    def keep_last_good(step, stats):
        state["step"] = step
        if args.checkpoint_every and step and step % args.checkpoint_every == 0:
            pl.ae_checkpoint(state["model"], acfg, norm, cfg["seed"], step).save(out)

    x = (grids - norm.mean) / norm.std
    from .autoencoder import LatentAutoencoder, estimate_latent_scale, train_autoencoder
    torch.manual_seed(cfg["seed"])
    model = LatentAutoencoder(acfg)
    state["model"] = model
    try:
        model, hist = train_autoencoder(x, acfg, cfg["ae_steps"], lr=cfg["ae_lr"],
                                        batch_size=cfg["ae_batch_size"], seed=cfg["seed"], model=model,
                                        callback=keep_last_good)
    except NumericalError as e:
        kept = " (last good checkpoint kept)" if out.exists() else ""
        print(f"error: {e}{kept}", file=sys.stderr)
        return EXIT_NUMERIC
    scale = estimate_latent_scale(model, norm.to_model(grids))
    pl.ae_checkpoint(model, acfg, norm, cfg["seed"], cfg["ae_steps"], {"config": cfg.to_dict()}).save(out)
    for s in range(0, len(hist.loss), max(1, len(hist.loss) // 10)):
        print(f"step {s:6d}  loss {hist.loss[s]:.5f}  recon {hist.recon[s]:.5f}  kl {hist.kl[s]:.1f}")
    err = pl.reconstruction_error(model, grids, norm)
    print(f"latent scale {scale:.5f}; reconstruction rel L2 {err:.4f}; checkpoint -> {out}")
    return EXIT_OK


def cmd_train_ldm(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    idx = ds.split("train") or list(range(len(ds)))
    grids = ds.grids(idx).astype(np.float64)
    captions = [ds.captions[i] for i in idx] if ds.captions else None
    ae = pl.load_autoencoder(Checkpoint.load(args.ae))
    norm = pl.Normalizer.from_meta(ds.meta)
    latent_shape = ae.cfg.latent_shape(grids.shape[1:4])
    bcfg = pl.backbone_config(cfg, latent_shape[0])
    tcfg = pl.LDMTrainConfig(steps=cfg["ldm_steps"], lr=cfg["ldm_lr"], batch_size=cfg["batch_size"],
                             param=cfg["param"], schedule=cfg["schedule"], N=cfg["diffusion_steps"],
                             p_uncond=cfg["cfg_p_uncond"], seed=cfg["seed"])
    try:
        b = pl.train_ldm(ae, grids, norm, tcfg, cfg["backbone"], bcfg, cfg["modality"], captions)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpt = pl.ldm_checkpoint(b, cfg.to_dict(), cfg["seed"], tcfg.steps)
    if args.point_decoder:
        z = pl.encode_latents(ae, norm.to_model(grids))
        with torch.no_grad():
            dec = torch.cat([ae.decode(z[i:i + 4]) for i in range(0, len(z), 4)]).permute(0, 2, 3, 4, 1)
        kernel, _, _ = pl.train_point_decoder(dec, grids, norm, cfg["decoder_radius"], steps=cfg["decoder_steps"],
                                              seed=cfg["seed"])
        for k, v in kernel.state_dict().items():
            ckpt.tensors[f"point_decoder.{k}"] = v
        ckpt.meta["point_decoder_radius"] = cfg["decoder_radius"]
    ckpt.save(args.out)
    tail = b.losses[-100:]
    print(f"trained {tcfg.steps} steps; final loss {np.mean(tail):.5f}; checkpoint -> {args.out}")
    return EXIT_OK


def _sample_config(cfg) -> pl.SampleConfig:
    g = GuidanceConfig(cfg["cfg_weight"], cfg["cfg_rescale"], cfg["cfg_p_uncond"]) if cfg["cfg_weight"] else None
    return pl.SampleConfig(cfg["sampler"], cfg["sample_steps"], cfg["eta"], cfg["seed"], g)


def _first_frame(args, b: pl.LDMBundle):
    if args.frame_from is None:
        return None
    ds = read_dataset(args.frame_from)
    return np.asarray(ds.samples[args.index], dtype=np.float64)[None, 0]


def _write_trajectory(path, traj: np.ndarray, meta: dict) -> None:
    write_dataset(path, Dataset("grid", [traj.astype(np.float32)], {"channels": list(CHANNELS), **meta}))


def _render(args, traj, stem):
    if not args.render:
        return
    out = Path(args.render)
    for name in args.channels.split(","):
        if name not in CHANNELS:
            raise UsageError(f"unknown channel {name!r}; choose from {CHANNELS}")
        path = out / f"{stem}_{name}.ppm"
        write_strip(path, traj, CHANNELS.index(name))
        print(f"render -> {path}")


def _point_kernel(ckpt: Checkpoint, radius: float) -> KernelNet:
    r = ckpt.meta.get("point_decoder_radius", radius)
    kernel = KernelNet(3, len(CHANNELS), r)
    state = {k[len("point_decoder."):]: v for k, v in ckpt.tensors.items() if k.startswith("point_decoder.")}
    if state:
        kernel.load_state_dict(state)
    else:
        log.warning("checkpoint has no trained point decoder; using the ball-average kernel")
    return kernel.eval()


def cmd_sample(args) -> int:
    cfg = _config(args)
    ckpt = Checkpoint.load(args.ckpt)
    b = pl.load_ldm(ckpt)
    frame = _first_frame(args, b)
    caps = [args.text] if args.text else None
    if frame is None and caps is None:
        raise UsageError("sample needs --frame-from or --text")
    traj = pl.sample(b, _sample_config(cfg), frame, caps)[0]
    meta = {"source": "sample", "seed": cfg["seed"], "sampler": cfg["sampler"]}
    _write_trajectory(args.out, traj, meta)
    print(f"trajectory {traj.shape} -> {args.out}")
    if args.queries:
        pts = np.load(args.queries)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise FormatError(f"{args.queries}: expected an (M, 2) array of points")
        if pts.min() < 0 or pts.max() > 1:
            raise UsageError("query points must lie in [0, 1]^2")
        kernel = _point_kernel(ckpt, cfg["decoder_radius"])
        spec = pl.output_grid_spec(traj.shape[0], traj.shape[1:3], kernel.radius)
        grid = torch.as_tensor((traj - b.norm.mean) / b.norm.std, dtype=torch.get_default_dtype())
        with torch.no_grad():
            vals = pl.decode_to_points(grid, spec, pts, kernel).double().numpy() * b.norm.std + b.norm.mean
        qpath = str(args.out) + ".points.npy"
        np.save(qpath, vals)
        print(f"point values {vals.shape} -> {qpath}")
    _render(args, traj, Path(args.out).stem)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    b = pl.load_ldm(Checkpoint.load(args.ckpt))
    ds = _load_data(args.data)
    idx = ds.split("val") or list(range(len(ds)))
    if args.limit:
        idx = idx[: args.limit]
    grids = ds.grids(idx).astype(np.float64)
    caps = [ds.captions[i] for i in idx] if ds.captions else None
    buoy = [ds.meta["params"][i]["buoyancy"] for i in idx] if "params" in ds.meta else None
    spec = pl.ProblemSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in ds.meta["problem"].items()}) \
        if "problem" in ds.meta else pl.problem_spec(cfg)
    scfg = _sample_config(cfg)
    if args.mode == "resolve" and buoy is None:
        raise FormatError(f"{args.data}: resolve mode needs buoyancy parameters in the sidecar")
    report, _ = pl.evaluate(b, grids, scfg, args.mode, caps, buoy, spec, names=[str(i) for i in idx])
    print(report.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
        print(f"rows -> {args.csv}")
    if args.sweep:
        steps = tuple(int(s) for s in args.sweep.split(","))
        print(step_sweep_table(pl.ddim_sweep(b, grids, steps, cfg["eta"], cfg["seed"])), end="")
    return EXIT_OK


def cmd_rollout_ar(args) -> int:
    cfg = _config(args)
    b = pl.load_ldm(Checkpoint.load(args.ckpt))
    frame = _first_frame(args, b)
    if frame is None and not args.text:
        raise UsageError("rollout-ar needs --frame-from or --text")
    k = args.windows or cfg["windows"]
    out = Path(args.out)

    def save_partial(i, traj, tags):
        _write_trajectory(out, traj, {"source": "rollout", "windows": i + 1, "modalities": tags})

    try:
        traj, tags = pl.rollout_windows(b, _sample_config(cfg), k, None if frame is None else frame[0],
                                        args.text, on_window=save_partial)
    except NumericalError as e:
        print(f"error: {e}; partial rollout kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    for i, t in enumerate(tags):
        print(f"window {i + 1}: {t}")
    print(f"rollout {traj.shape} -> {out}")
    _render(args, traj, out.stem)
    return EXIT_OK


def cmd_caption(args) -> int:
    if args.cylinder:
        r, x, y, u, re_ = args.cylinder
        print(caption_cylinder(CylinderParams(r, x, y, u, re_)).text)
        return EXIT_OK
    if args.reynolds is not None:
        print(flow_regime(args.reynolds))
        return EXIT_OK
    if args.data:
        ds = read_dataset(args.data)
        for i, cap in enumerate(ds.captions):
            print(f"{i}: {cap}")
        return EXIT_OK
    raise UsageError("caption needs --cylinder, --reynolds or --data")


def cmd_flops(args) -> int:
    cfg = _config(args)
    if args.ckpt:
        b = pl.load_ldm(Checkpoint.load(args.ckpt))
        model, latent = b.ldm.denoiser, b.latent_shape
    else:
        acfg = pl.ae_config(cfg)
        latent = acfg.latent_shape((cfg["n_steps"], cfg["resolution"], cfg["resolution"]))
        bcfg = pl.backbone_config(cfg, latent[0])
        model = DiT(bcfg) if cfg["backbone"] == "dit" else Unet3D(bcfg)
    from .conditioning import ConditionSequence
    L = args.cond_len
    cond = ConditionSequence(torch.zeros(1, L, model.cfg.cond_dim), torch.ones(1, L, dtype=torch.bool), "text")
    table = flops_forward(model, torch.zeros(1, *latent), torch.ones(1, dtype=torch.long), cond)
    w = max(len(k) for k in table)
    for k, v in table.items():
        print(f"{k.ljust(w)}  {v:>14d}")
    evals = cfg["diffusion_steps"] if cfg["sampler"] == "ddpm" else cfg["sample_steps"]
    print(f"{'sampling'.ljust(w)}  {table['total'] * evals:>14d}  ({evals} denoiser evaluations)")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentpde", description="Latent diffusion for PDE trajectories.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen-data", help="solve smoke trajectories and write datasets"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train-ae", help="train the autoencoder"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint-every", type=int, default=500)
    sp.set_defaults(func=cmd_train_ae)

    sp = common(sub.add_parser("train-ldm", help="train the denoiser on frozen latents"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ae", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--point-decoder", action="store_true", help="also fit a kernel decoder for arbitrary points")
    sp.set_defaults(func=cmd_train_ldm)

    for name, func, helptext in (("sample", cmd_sample, "generate one trajectory"),
                                 ("rollout-ar", cmd_rollout_ar, "chain several generated windows")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--frame-from", help="dataset whose sample supplies the first frame")
        sp.add_argument("--index", type=int, default=0)
        sp.add_argument("--text", help="caption to condition on")
        sp.add_argument("--out", required=True)
        sp.add_argument("--render", help="directory for image strips")
        sp.add_argument("--channels", default="density")
        if name == "sample":
            sp.add_argument("--queries", help=".npy file of (M, 2) points in [0, 1]^2")
        else:
            sp.add_argument("--windows", type=int)
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("evaluate", help="score samples against a dataset"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=("direct", "resolve"), default="direct")
    sp.add_argument("--csv")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--sweep", help="comma-separated DDIM step counts")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("caption", help="captioner utilities")
    sp.add_argument("--cylinder", type=float, nargs=5, metavar=("RADIUS_M", "X", "Y", "VELOCITY", "RE"))
    sp.add_argument("--reynolds", type=float)
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_caption)

    sp = common(sub.add_parser("flops", help="denoiser flop table"))
    sp.add_argument("--ckpt")
    sp.add_argument("--cond-len", type=int, default=64)
    sp.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, CoverageError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, CFLError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
