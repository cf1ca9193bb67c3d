"""Fixed 3D sine/cosine positional encoding over (temporal, horizontal, vertical)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


class PositionalConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PositionalEncodingConfig:
    d: int
    T: int
    H: int
    W: int
    base: float = 10000.0
    enabled: bool = True

    def validate(self) -> None:
        if self.d % 3:
            raise PositionalConfigError(f"d={self.d} must be divisible by 3")
        if (self.d // 3) % 2:
            raise PositionalConfigError(f"d/3={self.d // 3} must be even to hold sin/cos pairs")
        if min(self.T, self.H, self.W) < 1:
            raise PositionalConfigError("T, H and W must be positive")


def raster_index(t: int, h: int, w: int, H: int, W: int) -> int:
    """Flat index of (t, h, w); time is the slowest axis, width the fastest."""
    return (t * H + h) * W + w


def flatten_thw(x: Tensor) -> Tensor:
    """[..., C, T, H, W] -> [..., C, T*H*W] in raster order."""
    return x.flatten(-3)


def unflatten_thw(x: Tensor, T: int, H: int, W: int) -> Tensor:
    return x.unflatten(-1, (T, H, W))


def axis_encoding(positions: Tensor, channels: int, base: float) -> Tensor:
    """[P] positions -> [channels, P]; row 2k is sin(pos w_k), row 2k+1 is cos(pos w_k)."""
    k = torch.arange(channels // 2, dtype=torch.float64)
    omega = 1.0 / base ** (2 * k / channels)
    angles = omega[:, None] * positions.to(torch.float64)[None, :]
    out = torch.empty(channels, positions.numel(), dtype=torch.float64)
    out[0::2] = torch.sin(angles)
    out[1::2] = torch.cos(angles)
    return out


def positional_encoding_3d(cfg: PositionalEncodingConfig, dtype=torch.float32) -> Tensor:
    cfg.validate()
    c = cfg.d // 3
    temporal = axis_encoding(torch.arange(cfg.T), c, cfg.base)
    horizontal = axis_encoding(torch.arange(cfg.W), c, cfg.base)
    vertical = axis_encoding(torch.arange(cfg.H), c, cfg.base)
    pe = torch.cat(
        [
            temporal[:, :, None, None].expand(c, cfg.T, cfg.H, cfg.W),
            horizontal[:, None, None, :].expand(c, cfg.T, cfg.H, cfg.W),
            vertical[:, None, :, None].expand(c, cfg.T, cfg.H, cfg.W),
        ]
    )
    return pe.to(dtype)


def add_positional(features: Tensor, cfg: PositionalEncodingConfig) -> Tensor:
    expected = (cfg.d, cfg.T * cfg.H * cfg.W)
    if tuple(features.shape[-2:]) != expected:
        raise ValueError(f"features shape {tuple(features.shape)} does not end in {expected}")
    if not cfg.enabled:
        return features
    pe = flatten_thw(positional_encoding_3d(cfg, dtype=features.dtype)).to(features.device)
    return features + pe
