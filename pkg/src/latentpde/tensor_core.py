"""Differentiable tensor primitives.

Every trainable component in the package is built from torch tensors; this
module is the narrow waist over torch autograd:

* ``forward_op`` dispatches a named op kind with validated attributes.
* ``backward`` runs reverse mode once per forward graph and returns the
  leaves that received gradients.
* ``grad_check`` compares analytic gradients with central finite
  differences (run it in float64).
* ``make_adam`` / ``adam_step`` wrap the adaptive-moment optimizer.
* ``generator`` / ``np_rng`` hand out independent, reproducible RNG streams.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "OP_KINDS",
    "ShapeError",
    "GraphError",
    "UnknownOpError",
    "MissingGradError",
    "forward_op",
    "backward",
    "grad_check",
    "make_adam",
    "adam_step",
    "generator",
    "np_rng",
    "set_default_precision",
]


class UnknownOpError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class MissingGradError(RuntimeError):
    pass


def set_default_precision(bits: int) -> None:
    """Switch the default floating dtype (32 for training, 64 for grad checks)."""
    if bits == 32:
        torch.set_default_dtype(torch.float32)
    elif bits == 64:
        torch.set_default_dtype(torch.float64)
    else:
        raise ValueError(f"unsupported precision {bits}")


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

def _nonneg_int(attrs, key, default):
    value = attrs.get(key, default)
    vals = value if isinstance(value, (tuple, list)) else (value,)
    for v in vals:
        if int(v) != v or v < 0:
            raise ValueError(f"attribute {key!r} must be a non-negative integer, got {value!r}")
    return value


def _positive_int(attrs, key, default):
    value = _nonneg_int(attrs, key, default)
    vals = value if isinstance(value, (tuple, list)) else (value,)
    if any(v == 0 for v in vals):
        raise ValueError(f"attribute {key!r} must be positive, got {value!r}")
    return value


def _conv(nd):
    fn = {2: F.conv2d, 3: F.conv3d}[nd]

    def op(inputs, attrs):
        x, w = inputs[0], inputs[1]
        b = inputs[2] if len(inputs) > 2 else None
        if x.dim() != nd + 2 or w.dim() != nd + 2:
            raise ShapeError(f"conv{nd}d expects {nd + 2}-d input and weight, got {tuple(x.shape)}, {tuple(w.shape)}")
        if x.shape[1] != w.shape[1] * attrs.get("groups", 1):
            raise ShapeError(f"conv{nd}d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
        stride = _positive_int(attrs, "stride", 1)
        padding = _nonneg_int(attrs, "padding", 0)
        return fn(x, w, b, stride=stride, padding=padding, groups=attrs.get("groups", 1))

    return op


def _conv_transpose(inputs, attrs):
    x, w = inputs[0], inputs[1]
    b = inputs[2] if len(inputs) > 2 else None
    stride = _positive_int(attrs, "stride", 2)
    padding = _nonneg_int(attrs, "padding", 0)
    fn = {4: F.conv_transpose2d, 5: F.conv_transpose3d}.get(x.dim())
    if fn is None or w.dim() != x.dim() or x.shape[1] != w.shape[0]:
        raise ShapeError(f"transposed conv shape mismatch: {tuple(x.shape)} vs {tuple(w.shape)}")
    return fn(x, w, b, stride=stride, padding=padding)


def _binary(fn):
    def op(inputs, attrs):
        a, b = inputs
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError as exc:
            raise ShapeError(str(exc)) from None
        return fn(a, b)

    return op


def _matmul(inputs, attrs):
    a, b = inputs
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _reduce(fn):
    def op(inputs, attrs):
        dim = attrs.get("dim")
        if dim is None:
            return fn(inputs[0])
        return fn(inputs[0], dim=dim, keepdim=attrs.get("keepdim", False))

    return op


def _layer_norm(inputs, attrs):
    x = inputs[0]
    shape = attrs.get("normalized_shape", (x.shape[-1],))
    w = inputs[1] if len(inputs) > 1 else None
    b = inputs[2] if len(inputs) > 2 else None
    return F.layer_norm(x, tuple(shape), w, b, eps=attrs.get("eps", 1e-6))


def _group_norm(inputs, attrs):
    x = inputs[0]
    groups = _positive_int(attrs, "groups", 1)
    if x.shape[1] % groups:
        raise ShapeError(f"{x.shape[1]} channels not divisible into {groups} groups")
    w = inputs[1] if len(inputs) > 1 else None
    b = inputs[2] if len(inputs) > 2 else None
    return F.group_norm(x, groups, w, b, eps=attrs.get("eps", 1e-6))


def _embedding(inputs, attrs):
    ids, table = inputs
    if ids.dtype not in (torch.int64, torch.int32):
        raise ShapeError("embedding ids must be integer")
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise ShapeError("embedding id out of range")
    return F.embedding(ids, table)


def _reshape(inputs, attrs):
    x = inputs[0]
    shape = tuple(attrs["shape"])
    known = math.prod(s for s in shape if s != -1)
    if -1 not in shape and known != x.numel():
        raise ShapeError(f"cannot reshape {tuple(x.shape)} to {shape}")
    return x.reshape(shape)


def _transpose(inputs, attrs):
    return inputs[0].transpose(attrs.get("dim0", -2), attrs.get("dim1", -1))


def _concat(inputs, attrs):
    dim = attrs.get("dim", 0)
    ref = list(inputs[0].shape)
    for t in inputs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != dim % len(ref)):
            raise ShapeError(f"concat shape mismatch along non-concat dims: {ref} vs {other}")
    return torch.cat(list(inputs), dim=dim)


def _slice(inputs, attrs):
    x = inputs[0]
    dim = attrs.get("dim", 0)
    start, stop = attrs.get("start", 0), attrs.get("stop", x.shape[dim])
    step = _positive_int(attrs, "step", 1)
    index = [slice(None)] * x.dim()
    index[dim] = slice(start, stop, step)
    return x[tuple(index)]


def _attention(inputs, attrs):
    q, k, v = inputs[:3]
    mask = attrs.get("mask")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    return scaled_dot_product_attention(q, k, v, mask)


def scaled_dot_product_attention(q, k, v, mask=None):
    """softmax(q kᵀ/√d) v with an optional boolean key mask (True = attend)."""
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


OP_KINDS: dict[str, Callable] = {
    "add": _binary(torch.add),
    "mul": _binary(torch.mul),
    "matmul": _matmul,
    "conv2d": _conv(2),
    "conv3d": _conv(3),
    "conv_transpose": _conv_transpose,
    "sum": _reduce(torch.sum),
    "mean": _reduce(torch.mean),
    "softmax": lambda inputs, attrs: torch.softmax(inputs[0], dim=attrs.get("dim", -1)),
    "layer_norm": _layer_norm,
    "group_norm": _group_norm,
    "silu": lambda inputs, attrs: F.silu(inputs[0]),
    "gelu": lambda inputs, attrs: F.gelu(inputs[0], approximate=attrs.get("approximate", "tanh")),
    "embedding": _embedding,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "slice": _slice,
    "attention": _attention,
}


def forward_op(kind: str, inputs: Sequence[torch.Tensor], attrs: dict | None = None) -> torch.Tensor:
    """Apply op ``kind`` to ``inputs``; the result joins the autograd graph."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {kind!r}; known: {sorted(OP_KINDS)}") from None
    return fn(list(inputs), dict(attrs or {}))


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

_DONE = "_latentpde_backward_done"


def _leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    seen, leaves, stack = set(), [], [loss.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        var = getattr(fn, "variable", None)
        if var is not None:
            leaves.append(var)
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return leaves


def backward(loss: torch.Tensor) -> list[torch.Tensor]:
    """Populate ``.grad`` of every leaf reachable from scalar ``loss``.

    A graph may be differentiated once; call the forward pass again before a
    second backward.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, _DONE, False):
        raise GraphError("backward already ran on this graph; re-run the forward pass first")
    if loss.grad_fn is None and not loss.requires_grad:
        raise GraphError("loss is not connected to any differentiable input")
    leaves = _leaves(loss) if loss.grad_fn is not None else [loss]
    loss.backward()
    setattr(loss, _DONE, True)
    return leaves


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    Error per entry is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    else:
        analytic = None
    analytic = torch.zeros_like(x) if analytic is None else analytic.detach()

    numeric = torch.zeros_like(x)
    flat_x = x.detach().clone().reshape(-1)
    flat_n = numeric.view(-1)
    with torch.no_grad():
        for i in range(flat_x.numel()):
            orig = flat_x[i].item()
            flat_x[i] = orig + eps
            fp = f(flat_x.view_as(x)).item()
            flat_x[i] = orig - eps
            fm = f(flat_x.view_as(x)).item()
            flat_x[i] = orig
            flat_n[i] = (fp - fm) / (2 * eps)
    err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
    return float(err.max()) if err.numel() else 0.0


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def make_adam(params: Iterable[torch.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(opt: torch.optim.Optimizer, strict: bool = False) -> None:
    """One bias-corrected Adam update; moments live in ``opt.state``.

    With ``strict`` every parameter must carry a gradient, otherwise at
    least one must.
    """
    params = [p for group in opt.param_groups for p in group["params"]]
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing and (strict or len(missing) == len(params)):
        raise MissingGradError(f"{len(missing)} of {len(params)} parameters have no gradient; run backward first")
    opt.step()


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _seed_words(seed: int, stream: tuple[int, ...]) -> np.ndarray:
    return np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream)).generate_state(2, dtype=np.uint32)


def np_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) numpy generator for stream ``stream`` of ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


def generator(seed: int, *stream: int) -> torch.Generator:
    """torch CPU generator deterministically derived from ``(seed, *stream)``."""
    words = _seed_words(seed, stream)
    g = torch.Generator()
    g.manual_seed(int(words[0]) << 32 | int(words[1]))
    return g
