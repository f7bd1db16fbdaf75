"""Descriptor-conditioned encoder-decoder restorer.

Ten transformer blocks (descriptor cross-attention -> channel self-attention
-> gated feed-forward) arranged around three maxpool downsampling and three
bilinear upsampling stages, with skip additions and a global residual.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .modules import Conv2d, LayerNormChannels, Linear, Module, Parameter
from .tensor import DimensionError, Tensor

__all__ = [
    "SdtbConfig",
    "NetConfig",
    "DescriptorCrossAttention",
    "ChannelSelfAttention",
    "GatedFeedForward",
    "Sdtb",
    "RestoreNet",
]

DESCRIPTOR_DIM = 324


@dataclass
class SdtbConfig:
    channels: int
    heads: int = 8
    descriptor_dim: int = DESCRIPTOR_DIM
    query_tokens: int = 64       # perfect square: K comes from a resized grid
    ffn_expansion: float = 2.66

    def __post_init__(self):
        if self.channels % self.heads:
            raise DimensionError("channels must be divisible by heads")
        grid = int(round(self.query_tokens ** 0.5))
        if grid * grid != self.query_tokens:
            raise DimensionError("query_tokens must be a perfect square")


class DescriptorCrossAttention(Module):
    """Cross-attention whose query comes from the scene descriptor.

    K and V derive from image features through matching 1x1 conv + 3x3
    depthwise conv stacks; K's source is resized to the fixed query-token
    grid so token counts agree. The query linear maps the descriptor to one
    value per channel, broadcast across the token axis before the head split.
    """

    def __init__(self, cfg: SdtbConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.norm = LayerNormChannels(c)
        self.v_point = Conv2d(c, c, 1, rng)
        self.v_depth = Conv2d(c, c, 3, rng, pad=1, groups=c)
        self.k_point = Conv2d(c, c, 1, rng)
        self.k_depth = Conv2d(c, c, 3, rng, pad=1, groups=c)
        # wider init keeps the descriptor query live relative to the small
        # feature logits, so conditioning has signal from step one
        self.q_linear = Linear(cfg.descriptor_dim, c, rng, std=0.2)
        self.out_proj = Conv2d(c, c, 1, rng)
        self.temperature = Parameter(
            np.full(cfg.heads, np.sqrt(cfg.query_tokens)))

    def forward(self, x: Tensor, descriptor: Tensor) -> Tensor:
        """x: (N, C, H, W); descriptor: (N, 324)."""
        if descriptor.shape[-1] != self.cfg.descriptor_dim:
            raise DimensionError(
                f"descriptor length must be {self.cfg.descriptor_dim}")
        n, c, h, w = x.shape
        heads = self.cfg.heads
        ch = c // heads
        grid = int(round(self.cfg.query_tokens ** 0.5))

        y = self.norm(x)
        v = self.v_depth(self.v_point(y))
        k_src = ops.bilinear_resize(y, grid, grid)
        k = self.k_depth(self.k_point(k_src))

        q = self.q_linear(descriptor)                      # (N, C)
        q = q.reshape(n, heads, ch, 1)                     # broadcast over tokens
        k = k.reshape(n, heads, ch, self.cfg.query_tokens)
        v = v.reshape(n, heads, ch, h * w)

        # Q_t has identical columns, so Q_t @ K^T reduces to the outer
        # product of the channel query with K summed over tokens.
        ksum = k.sum(axis=-1, keepdims=True)               # (N, heads, ch, 1)
        logits = q.matmul(ksum.transpose(0, 1, 3, 2))      # (N, heads, ch, ch)
        lam = self.temperature.reshape(1, heads, 1, 1)
        attn = ops.softmax(logits / lam, axis=-1)
        out = attn.matmul(v).reshape(n, c, h, w)
        return x + self.out_proj(out)

    def attention_weights(self, x: Tensor, descriptor: Tensor) -> np.ndarray:
        """Attention matrix only, for verification."""
        n, c, h, w = x.shape
        heads = self.cfg.heads
        ch = c // heads
        grid = int(round(self.cfg.query_tokens ** 0.5))
        y = self.norm(x)
        k_src = ops.bilinear_resize(y, grid, grid)
        k = self.k_depth(self.k_point(k_src)).reshape(
            n, heads, ch, self.cfg.query_tokens)
        q = self.q_linear(descriptor).reshape(n, heads, ch, 1)
        ksum = k.sum(axis=-1, keepdims=True)
        logits = q.matmul(ksum.transpose(0, 1, 3, 2))
        lam = self.temperature.reshape(1, heads, 1, 1)
        return ops.softmax(logits / lam, axis=-1).data


class ChannelSelfAttention(Module):
    """Transposed (channel-wise) multi-head self-attention."""

    def __init__(self, cfg: SdtbConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.norm = LayerNormChannels(c)
        self.qkv_point = Conv2d(c, 3 * c, 1, rng)
        self.qkv_depth = Conv2d(3 * c, 3 * c, 3, rng, pad=1, groups=3 * c)
        self.out_proj = Conv2d(c, c, 1, rng)
        self.temperature = Parameter(np.ones(cfg.heads))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        heads = self.cfg.heads
        ch = c // heads
        y = self.norm(x)
        qkv = self.qkv_depth(self.qkv_point(y))
        q = qkv[:, :c].reshape(n, heads, ch, h * w)
        k = qkv[:, c:2 * c].reshape(n, heads, ch, h * w)
        v = qkv[:, 2 * c:].reshape(n, heads, ch, h * w)
        # L2-normalize token rows so logits stay size-independent
        q = q / ((q * q).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        k = k / ((k * k).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        logits = q.matmul(k.transpose(0, 1, 3, 2))         # (N, heads, ch, ch)
        lam = self.temperature.reshape(1, heads, 1, 1)
        attn = ops.softmax(logits / lam, axis=-1)
        out = attn.matmul(v).reshape(n, c, h, w)
        return x + self.out_proj(out)

    def attention_weights(self, x: Tensor) -> np.ndarray:
        n, c, h, w = x.shape
        heads = self.cfg.heads
        ch = c // heads
        qkv = self.qkv_depth(self.qkv_point(self.norm(x)))
        q = qkv[:, :c].reshape(n, heads, ch, h * w)
        k = qkv[:, c:2 * c].reshape(n, heads, ch, h * w)
        q = q / ((q * q).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        k = k / ((k * k).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        logits = q.matmul(k.transpose(0, 1, 3, 2))
        lam = self.temperature.reshape(1, heads, 1, 1)
        return ops.softmax(logits / lam, axis=-1).data


class GatedFeedForward(Module):
    """Pre-norm gated feed-forward: 1x1 expand, 3x3 depthwise, GELU gate,
    1x1 project, residual."""

    def __init__(self, cfg: SdtbConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.channels
        hidden = int(c * cfg.ffn_expansion)
        self.hidden = hidden
        self.norm = LayerNormChannels(c)
        self.expand = Conv2d(c, 2 * hidden, 1, rng)
        self.depth = Conv2d(2 * hidden, 2 * hidden, 3, rng, pad=1,
                            groups=2 * hidden)
        self.project = Conv2d(hidden, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.depth(self.expand(self.norm(x)))
        gate = y[:, :self.hidden]
        value = y[:, self.hidden:]
        return x + self.project(gate.gelu() * value)


class Sdtb(Module):
    """Descriptor cross-attention -> self-attention -> feed-forward."""

    def __init__(self, cfg: SdtbConfig, rng: np.random.Generator):
        super().__init__()
        self.sdca = DescriptorCrossAttention(cfg, rng)
        self.sa = ChannelSelfAttention(cfg, rng)
        self.ffn = GatedFeedForward(cfg, rng)

    def forward(self, x: Tensor, descriptor: Tensor) -> Tensor:
        x = self.sdca(x, descriptor)
        x = self.sa(x)
        return self.ffn(x)


@dataclass
class NetConfig:
    widths: tuple = (32, 64, 128, 256)
    heads: int = 8
    query_tokens: int = 64
    descriptor_dim: int = DESCRIPTOR_DIM
    ffn_expansion: float = 2.66

    @staticmethod
    def desk() -> "NetConfig":
        return NetConfig(widths=(8, 16, 32, 64), heads=4, query_tokens=16)

    def block(self, channels: int) -> SdtbConfig:
        return SdtbConfig(channels=channels, heads=self.heads,
                          descriptor_dim=self.descriptor_dim,
                          query_tokens=self.query_tokens,
                          ffn_expansion=self.ffn_expansion)


class RestoreNet(Module):
    """Full restorer; output spatial size equals input spatial size.

    The tail conv is zero-initialized, so an untrained model is exactly the
    identity through the global residual.
    """

    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = cfg.widths
        self.stem = Conv2d(3, c1, 1, rng)
        self.sdtb1 = Sdtb(cfg.block(c1), rng)
        self.down1 = Conv2d(c1, c2, 1, rng)
        self.sdtb2 = Sdtb(cfg.block(c2), rng)
        self.down2 = Conv2d(c2, c3, 1, rng)
        self.sdtb3 = Sdtb(cfg.block(c3), rng)
        self.down3 = Conv2d(c3, c4, 1, rng)
        self.sdtb4 = Sdtb(cfg.block(c4), rng)
        self.sdtb5 = Sdtb(cfg.block(c4), rng)
        self.sdtb6 = Sdtb(cfg.block(c4), rng)
        self.sdtb7 = Sdtb(cfg.block(c4), rng)
        self.up1 = Conv2d(c4, c3, 1, rng)
        self.sdtb8 = Sdtb(cfg.block(c3), rng)
        self.up2 = Conv2d(c3, c2, 1, rng)
        self.sdtb9 = Sdtb(cfg.block(c2), rng)
        self.up3 = Conv2d(c2, c1, 1, rng)
        self.sdtb10 = Sdtb(cfg.block(c1), rng)
        self.tail = Conv2d(c1, 3, 1, rng, zero_init=True)

    def forward(self, images: Tensor, descriptor: Tensor) -> Tensor:
        """images: (N, 3, H, W) with H, W divisible by 8; descriptor (N, 324)."""
        n, c, h, w = images.shape
        if h % 8 or w % 8:
            raise DimensionError(
                "spatial dims must be divisible by 8; pad reflectively and crop back")
        f1 = self.sdtb1(self.stem(images), descriptor)
        f2 = self.sdtb2(self.down1(ops.maxpool2d(f1, 3, 2)), descriptor)
        f3 = self.sdtb3(self.down2(ops.maxpool2d(f2, 3, 2)), descriptor)
        d3 = self.down3(ops.maxpool2d(f3, 3, 2))
        b = self.sdtb6(self.sdtb5(self.sdtb4(d3, descriptor), descriptor),
                       descriptor)
        b = self.sdtb7(d3 + b, descriptor)
        u1 = self.up1(ops.bilinear_resize(b, h // 4, w // 4))
        f8 = self.sdtb8(u1 + f3, descriptor)
        u2 = self.up2(ops.bilinear_resize(f8, h // 2, w // 2))
        f9 = self.sdtb9(u2 + f2, descriptor)
        u3 = self.up3(ops.bilinear_resize(f9, h, w))
        f10 = self.sdtb10(u3 + f1, descriptor)
        return self.tail(f10) + images

    def parameter_breakdown(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, p in self.named_parameters():
            top = name.split(".")[0]
            counts[top] = counts.get(top, 0) + p.size
        return counts
