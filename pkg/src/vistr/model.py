"""The clip-level segmentation transformer.

Frames go through a small CNN, get flattened into one (t, h, w) token
sequence, pass an encoder/decoder transformer, and come out as N = n*T
instance predictions grouped into n sequences. A per-frame attention head
builds mask features, and a 3D convolution stack segments each instance's
whole sequence at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .posenc import PositionalEncodingConfig, flatten_thw, positional_encoding_3d
from .structures import PredictionSet
from .tensor import MultiHeadAttention, softmax

BACKBONE_CHANNELS = (16, 32, 64, 128)
BACKBONE_STRIDES = (2, 2, 2, 1)
BACKBONE_STRIDE = 8
MASK_STRIDE = 4


@dataclass
class FeaturePyramid:
    f0: Tensor  # [T, C, H, W]
    f1: Tensor  # [T, d, H, W]
    B: list[Tensor]  # per-stage backbone outputs, strides 2, 4, 8, 8
    E: Tensor  # [d, T*H*W]
    pos: Tensor | None  # [T*H*W, d]


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels // 4) if channels >= 8 else 1, channels)


class Backbone(nn.Module):
    """Four conv stages, 16 -> 32 -> 64 -> 128 channels, overall stride 8. Frames are independent."""

    def __init__(self):
        super().__init__()
        stages = []
        c_in = 3
        for c_out, stride in zip(BACKBONE_CHANNELS, BACKBONE_STRIDES):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False),
                    _gn(c_out),
                    nn.ReLU(),
                    nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False),
                    _gn(c_out),
                    nn.ReLU(),
                )
            )
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.out_channels = c_in

    def forward(self, frames: Tensor) -> list[Tensor]:
        feats = []
        x = frames
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FFN(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.lin1 = nn.Linear(d, hidden)
        self.lin2 = nn.Linear(hidden, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(self.dropout(F.relu(self.lin1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout)
        self.ffn = FFN(cfg.d, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, src: Tensor, pos: Tensor | None, keep_weights: bool = False) -> Tensor:
        qk = src if pos is None else src + pos
        src = self.norm1(src + self.dropout(self.attn(qk, qk, src, keep_weights)))
        return self.norm2(src + self.dropout(self.ffn(src)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout)
        self.ffn = FFN(cfg.d, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.norm3 = nn.LayerNorm(cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, tgt: Tensor, memory: Tensor, key_pos: Tensor | None, keep_weights: bool = False) -> Tensor:
        tgt = self.norm1(tgt + self.dropout(self.self_attn(tgt, tgt, tgt, keep_weights)))
        key = memory if key_pos is None else memory + key_pos
        tgt = self.norm2(tgt + self.dropout(self.cross_attn(tgt, key, memory, keep_weights)))
        return self.norm3(tgt + self.dropout(self.ffn(tgt)))


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, layers: int):
        super().__init__()
        dims = [d_in] + [hidden] * (layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class AttentionMaps(nn.Module):
    """Per-head softmax similarity between instance features and one frame's feature map."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)

    def forward(self, inst: Tensor, pixels: Tensor) -> Tensor:
        """inst [T, n, d], pixels [T, HW, d] -> [T, n, heads, HW], summing to 1 over HW."""
        T, n, d = inst.shape
        hd = d // self.heads
        q = self.q(inst).reshape(T, n, self.heads, hd).permute(0, 2, 1, 3)
        k = self.k(pixels).reshape(T, -1, self.heads, hd).permute(0, 2, 1, 3)
        scores = q @ k.transpose(-1, -2) / hd**0.5  # [T, heads, n, HW]
        return softmax(scores, axis=-1).permute(0, 2, 1, 3)


class MaskFusion(nn.Module):
    """Attention maps + projected feature map at stride 8, merged with backbone features up to stride 4."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.fusion_channels
        self.proj = nn.Conv2d(cfg.d, 2 * c, 1)
        self.lay1 = nn.Sequential(nn.Conv2d(2 * c + cfg.heads, c, 3, padding=1), _gn(c), nn.ReLU())
        self.adapter8 = nn.Conv2d(BACKBONE_CHANNELS[2], c, 1)
        self.lay2 = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), _gn(c), nn.ReLU())
        self.adapter4 = nn.Conv2d(BACKBONE_CHANNELS[1], c, 1)
        self.lay3 = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), _gn(c), nn.ReLU())
        # plain 3x3 in place of a deformable convolution
        self.out = nn.Conv2d(c, cfg.mask_channels, 3, padding=1)

    def forward(self, source: Tensor, attn: Tensor, b8: Tensor, b4: Tensor) -> Tensor:
        """source [T, d, H, W], attn [T, n, heads, H, W], b8/b4 backbone maps -> [T, n, a, 2H, 2W]."""
        T, n, heads, H, W = attn.shape
        x = self.proj(source)
        x = torch.cat([x[:, None].expand(T, n, *x.shape[1:]), attn], dim=2).flatten(0, 1)
        x = self.lay1(x)
        x = x + self.adapter8(b8).repeat_interleave(n, dim=0)
        x = self.lay2(x)
        x = F.interpolate(x, size=b4.shape[-2:], mode="nearest")
        x = x + self.adapter4(b4).repeat_interleave(n, dim=0)
        x = self.lay3(x)
        x = self.out(x)
        return x.reshape(T, n, *x.shape[1:])


class SequenceSegmenter(nn.Module):
    """Three conv3d + GroupNorm + ReLU blocks and a final one-channel conv3d."""

    def __init__(self, a: int):
        super().__init__()
        blocks = []
        for _ in range(3):
            blocks += [nn.Conv3d(a, a, 3, padding=1), _gn(a), nn.ReLU()]
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv3d(a, 1, 3, padding=1)

    def forward(self, G: Tensor) -> Tensor:
        """G [n, a, T, h, w] -> logits [n, 1, T, h, w]."""
        return self.out(self.blocks(G))


class FrameSegmenter(nn.Module):
    """Ablation stand-in: one 2D conv per frame, no temporal mixing."""

    def __init__(self, a: int):
        super().__init__()
        self.out = nn.Conv2d(a, 1, 3, padding=1)

    def forward(self, G: Tensor) -> Tensor:
        n, a, T, h, w = G.shape
        x = G.permute(0, 2, 1, 3, 4).reshape(n * T, a, h, w)
        return self.out(x).reshape(n, T, 1, h, w).permute(0, 2, 1, 3, 4)


def query_rows(mode: str, n: int, T: int) -> tuple[int, Tensor]:
    """Number of distinct embeddings and the embedding index for each of the N = n*T queries."""
    j = torch.arange(n * T)
    if mode == "prediction":
        return n * T, j
    if mode == "instance":
        return n, j % n
    if mode == "frame":
        return T, j // n
    if mode == "video":
        return 1, torch.zeros_like(j)
    raise ValueError(f"unknown query mode {mode!r}")


class VisTR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone()
        self.input_proj = nn.Conv2d(self.backbone.out_channels, cfg.d, 1)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        count, index = query_rows(cfg.query_mode, cfg.n, cfg.T)
        self.query_embed = nn.Embedding(count, cfg.d)
        self.register_buffer("query_index", index, persistent=False)
        self.class_head = nn.Linear(cfg.d, cfg.K + 1)
        self.box_head = MLP(cfg.d, cfg.d, 4, 3)
        self.attention_maps = AttentionMaps(cfg.d, cfg.heads)
        self.fusion = MaskFusion(cfg)
        self.segmenter = SequenceSegmenter(cfg.mask_channels) if cfg.use_3d_head else FrameSegmenter(cfg.mask_channels)

    # -- stages -----------------------------------------------------------

    def backbone_forward(self, frames: Tensor) -> list[Tensor]:
        return self.backbone(frames)

    def positional(self, T: int, H: int, W: int, dtype) -> Tensor | None:
        if not self.cfg.use_positional:
            return None
        pe = positional_encoding_3d(PositionalEncodingConfig(self.cfg.d, T, H, W), dtype=dtype)
        return flatten_thw(pe).transpose(0, 1).to(self.query_embed.weight.device)

    def encoder_forward(self, f1: Tensor, pos: Tensor | None) -> Tensor:
        """f1 [T, d, H, W] -> memory [T*H*W, d] (token-major)."""
        src = flatten_thw(f1.transpose(0, 1)).transpose(0, 1)
        for layer in self.encoder:
            src = layer(src, pos)
        return src

    def build_queries(self) -> Tensor:
        return self.query_embed.weight[self.query_index]

    def decoder_forward(self, memory: Tensor, queries: Tensor, pos: Tensor | None) -> Tensor:
        key_pos = pos if self.cfg.pos_on_cross_keys else None
        out = queries
        for layer in self.decoder:
            out = layer(out, memory, key_pos)
        return out

    def predict_heads(self, O: Tensor) -> tuple[Tensor, Tensor]:
        return self.class_head(O), torch.sigmoid(self.box_head(O))

    def mask_head(self, O: Tensor, memory: Tensor, f1: Tensor, feats: list[Tensor]) -> Tensor:
        """Mask features G: [n, a, T, H0/4, W0/4]. Each prediction only sees its own frame."""
        T, d, H, W = f1.shape
        n = self.cfg.n
        inst = O.reshape(T, n, d)
        pixels = memory.reshape(T, H * W, d)
        attn = self.attention_maps(inst, pixels).reshape(T, n, -1, H, W)
        if self.cfg.mask_feature_source == "encoder":
            source = pixels.transpose(1, 2).reshape(T, d, H, W)
        else:
            source = f1
        g = self.fusion(source, attn, feats[2], feats[1])  # [T, n, a, h, w]
        return g.permute(1, 2, 0, 3, 4)

    def segment_sequence(self, G: Tensor) -> Tensor:
        return self.segmenter(G)

    # -- full pass ----------------------------------------------------------

    def features(self, frames: Tensor) -> FeaturePyramid:
        feats = self.backbone_forward(frames)
        f0 = feats[-1]
        f1 = self.input_proj(f0)
        T, _, H, W = f1.shape
        pos = self.positional(T, H, W, f1.dtype)
        memory = self.encoder_forward(f1, pos)
        return FeaturePyramid(f0, f1, feats, memory.transpose(0, 1), pos)

    def forward(self, frames: Tensor) -> tuple[PredictionSet, Tensor]:
        """frames [T, 3, H0, W0] -> (PredictionSet, mask logits [n, T, H0/4, W0/4])."""
        T = frames.shape[0]
        if T != self.cfg.T:
            raise ValueError(f"model was built for T={self.cfg.T} frames, got {T}")
        fp = self.features(frames)
        memory = fp.E.transpose(0, 1)
        O = self.decoder_forward(memory, self.build_queries(), fp.pos)
        class_logits, boxes = self.predict_heads(O)
        G = self.mask_head(O, memory, fp.f1, fp.B)
        masks = self.segment_sequence(G)[:, 0]
        return PredictionSet(class_logits, boxes, self.cfg.n, T, O), masks
