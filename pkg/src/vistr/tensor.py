"""Array primitives, attention, and a finite-difference gradient checker.

Autograd and the dense kernels come from torch; everything here is the thin
layer the rest of the package is written against, so shapes are validated
once and the determinism switch lives in one place.
"""
from __future__ import annotations

import math
import random
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

_DETERMINISTIC = False


def set_deterministic(enabled: bool, seed: int | None = None) -> None:
    """Toggle bitwise-reproducible execution and optionally reseed every RNG."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(enabled)
    torch.use_deterministic_algorithms(_DETERMINISTIC)
    if seed is not None:
        seed_everything(seed)


def is_deterministic() -> bool:
    return _DETERMINISTIC


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.dim()}")
    return axis % x.dim()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """exp(x - max) / sum along ``axis``; the fused kernel subtracts the max internally."""
    return torch.softmax(x, dim=_check_axis(x, axis))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=_check_axis(x, axis))


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv3d(input: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D convolution over [B, Cin, T, H, W] with a [Cout, Cin, kt, kh, kw] kernel."""
    if input.dim() != 5 or kernel.dim() != 5:
        raise ValueError("conv3d expects 5-d input and kernel")
    if input.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {input.shape[1]} channels, kernel expects {kernel.shape[1]}"
        )
    return F.conv3d(input, kernel, bias, stride=_triple(stride), padding=_triple(padding))


def conv3d_output_shape(in_shape: Sequence[int], kernel_shape: Sequence[int], stride=1, padding=0) -> tuple:
    b, _, *extent = in_shape
    s, p = _triple(stride), _triple(padding)
    out = [(e + 2 * pp - k) // ss + 1 for e, k, ss, pp in zip(extent, kernel_shape[2:], s, p)]
    return (b, kernel_shape[0], *out)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(dk)) v over the last two axes; also returns the weights."""
    scores = (q / math.sqrt(q.shape[-1])) @ k.transpose(-2, -1)
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention built from matmul and softmax.

    Inputs are [L, d] (unbatched) or [B, L, d]. Positional terms are added by
    the caller to query/key only; values never see them.
    """

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.last_weights: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.d_model // self.heads).transpose(-3, -2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, keep_weights: bool = False) -> Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        out, weights = scaled_dot_product_attention(q, k, self.dropout(v) if self.training else v)
        self.last_weights = weights.detach() if keep_weights else None
        *lead, _, length, _ = out.shape
        out = out.transpose(-3, -2).reshape(*lead, length, self.d_model)
        return self.out_proj(out)


def gradient_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` may be one tensor or a list; ``f`` receives them positionally. With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    probed, which keeps whole-model checks affordable.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [t.detach().clone().requires_grad_(True) for t in xs]
    out = f(*leaves)
    if not isinstance(out, Tensor) or out.numel() != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for pos, leaf in enumerate(leaves):
            analytic = grads[pos]
            analytic = torch.zeros_like(leaf) if analytic is None else analytic
            flat = leaf.view(-1)
            coords: Iterable[int] = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = rng.choice(flat.numel(), size=max_coords, replace=False).tolist()
            args = list(leaves)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                plus = f(*args).item()
                flat[c] = orig - eps
                minus = f(*args).item()
                flat[c] = orig
                numeric = (plus - minus) / (2 * eps)
                a = analytic.view(-1)[c].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def parameter_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = 4,
    seed: int = 0,
) -> dict[int, float]:
    """gradient_check applied in place to module parameters; returns error per parameter index."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for i, p in enumerate(params):
            analytic = torch.zeros_like(p) if grads[i] is None else grads[i]
            flat = p.data.view(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = rng.choice(flat.numel(), size=max_coords, replace=False).tolist()
            worst = 0.0
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                plus = loss_fn().item()
                flat[c] = orig - eps
                minus = loss_fn().item()
                flat[c] = orig
                a = analytic.view(-1)[c].item()
                worst = max(worst, abs(a - (plus - minus) / (2 * eps)) / max(1.0, abs(a)))
            errors[i] = worst
    return errors
