"""Relative L2, per-timestep error curves, log-TKE distance and evaluation reports."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np


def _arr(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def rel_l2(pred, true, per_channel: bool = False) -> float:
    """||pred - true|| / ||true|| over the whole tensor (channels last).

    ``per_channel`` divides each channel separately and averages the ratios.
    """
    p, t = _arr(pred), _arr(true)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if per_channel:
        p2, t2 = p.reshape(-1, p.shape[-1]), t.reshape(-1, t.shape[-1])
        norms = np.linalg.norm(t2, axis=0)
        if np.any(norms == 0):
            raise ValueError("reference channel with zero norm")
        return float(np.mean(np.linalg.norm(p2 - t2, axis=0) / norms))
    norm = np.linalg.norm(t)
    if norm == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(p - t) / norm)


def per_channel_rel_l2(pred, true) -> np.ndarray:
    p, t = _arr(pred), _arr(true)
    p2, t2 = p.reshape(-1, p.shape[-1]), t.reshape(-1, t.shape[-1])
    return np.linalg.norm(p2 - t2, axis=0) / np.linalg.norm(t2, axis=0)


def per_timestep_loss(pred, true) -> np.ndarray:
    """rel_l2 of every time slice; time is the leading axis."""
    p, t = _arr(pred), _arr(true)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    T = p.shape[0]
    num = np.linalg.norm((p - t).reshape(T, -1), axis=1)
    den = np.linalg.norm(t.reshape(T, -1), axis=1)
    return np.divide(num, den, out=np.full(T, np.nan), where=den > 0)


def aggregate_timesteps(curve: np.ndarray, true) -> float:
    """Recombine a per-timestep curve into the full relative L2 using slice energies."""
    t = _arr(true)
    energy = (t.reshape(t.shape[0], -1) ** 2).sum(1)
    return float(np.sqrt(np.sum(curve**2 * energy) / energy.sum()))


def fitted_slope(curve) -> float:
    """Least-squares slope of a curve against its index."""
    y = np.asarray(curve, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])


def tke(velocity: np.ndarray) -> np.ndarray:
    """0.5 * time-mean |v - v_mean|^2 per point; velocity (T, ..., 2)."""
    v = _arr(velocity)
    fluct = v - v.mean(axis=0, keepdims=True)
    return 0.5 * (fluct**2).sum(-1).mean(0)


def d_tke(pred, true, velocity_channels=(0, 1), delta: float = 1e-8) -> float:
    """Root-mean distance between log turbulent kinetic energies."""
    p, t = _arr(pred), _arr(true)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.shape[0] < 2:
        raise ValueError("d_tke needs at least 2 timesteps")
    if p.shape[-1] <= max(velocity_channels):
        raise ValueError("velocity channels missing")
    idx = list(velocity_channels)
    lp = np.log(tke(p[..., idx]) + delta)
    lt = np.log(tke(t[..., idx]) + delta)
    return float(np.linalg.norm(lp - lt) / math.sqrt(lp.size))


@dataclass
class EvalReport:
    names: list = field(default_factory=list)
    rel_l2: list = field(default_factory=list)
    per_channel: list = field(default_factory=list)
    per_timestep: list = field(default_factory=list)
    d_tke: list = field(default_factory=list)
    channels: tuple = ()
    flops: int | None = None
    sample_seconds: float | None = None
    excluded: list = field(default_factory=list)
    label: str = ""

    def add(self, name, pred, true, with_tke: bool = False):
        self.names.append(str(name))
        self.rel_l2.append(rel_l2(pred, true))
        self.per_channel.append(per_channel_rel_l2(pred, true))
        self.per_timestep.append(per_timestep_loss(pred, true))
        if with_tke:
            self.d_tke.append(d_tke(pred, true))

    def exclude(self, name, reason: str):
        self.excluded.append((str(name), reason))

    @property
    def mean_rel_l2(self) -> float:
        return float(np.mean(self.rel_l2)) if self.rel_l2 else float("nan")

    @property
    def mean_curve(self) -> np.ndarray:
        return np.mean(np.stack(self.per_timestep), axis=0)

    def check(self) -> None:
        if self.rel_l2 and not math.isclose(self.mean_rel_l2, sum(self.rel_l2) / len(self.rel_l2), rel_tol=1e-12):
            raise AssertionError("aggregate mean out of sync with per-sample values")

    def to_text(self) -> str:
        self.check()
        chans = list(self.channels) or [f"c{i}" for i in range(len(self.per_channel[0]) if self.per_channel else 0)]
        out = io.StringIO()
        if self.label:
            out.write(f"# {self.label}\n")
        head = ["sample", "rel_l2", *chans] + (["d_tke"] if self.d_tke else [])
        rows = []
        for i, name in enumerate(self.names):
            row = [name, f"{self.rel_l2[i]:.4f}", *(f"{v:.4f}" for v in self.per_channel[i])]
            if self.d_tke:
                row.append(f"{self.d_tke[i]:.4f}")
            rows.append(row)
        mean_row = ["mean", f"{self.mean_rel_l2:.4f}"]
        if self.per_channel:
            mean_row += [f"{v:.4f}" for v in np.mean(self.per_channel, axis=0)]
        if self.d_tke:
            mean_row.append(f"{np.mean(self.d_tke):.4f}")
        rows.append(mean_row)
        widths = [max(len(str(r[j])) for r in [head, *rows]) for j in range(len(head))]
        for r in [head, *rows]:
            out.write("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) + "\n")
        if self.per_timestep:
            out.write("per-timestep: " + " ".join(f"{v:.4f}" for v in self.mean_curve) + "\n")
        if self.flops is not None:
            out.write(f"flops: {self.flops}\n")
        if self.sample_seconds is not None:
            out.write(f"sampling seconds: {self.sample_seconds:.3f}\n")
        for name, reason in self.excluded:
            out.write(f"excluded {name}: {reason}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        chans = list(self.channels) or [f"c{i}" for i in range(len(self.per_channel[0]) if self.per_channel else 0)]
        lines = [",".join(["sample", "rel_l2", *chans, "d_tke"])]
        for i, name in enumerate(self.names):
            tk = f"{self.d_tke[i]:.8g}" if self.d_tke else ""
            lines.append(",".join([name, f"{self.rel_l2[i]:.8g}", *(f"{v:.8g}" for v in self.per_channel[i]), tk]))
        return "\n".join(lines) + "\n"


def step_sweep_table(rows: list[tuple[int, float, float]]) -> str:
    """Sampling-step sweep: (steps, rel_l2, seconds) per row."""
    out = [f"{'steps':>6}  {'rel_l2':>8}  {'seconds':>9}"]
    for s, l2, sec in rows:
        out.append(f"{s:>6}  {l2:>8.4f}  {sec:>9.3f}")
    return "\n".join(out) + "\n"
