"""Channel, coordinate, delta and gate attention, and the DDA skip module."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Module, PReLU
from .tensor import Tensor


def _check_channels(x: Tensor, expected: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise ValueError(f"{who}: expected {expected} channels in NCHW input, got shape {x.shape}")


class SEModule(Module):
    """Squeeze-and-excitation gate: F * sigmoid(W2 relu(W1 GAP(F)))."""

    def __init__(self, channels: int, *, rng: np.random.Generator, reduction: int = 8, min_hidden: int = 8):
        super().__init__()
        self.channels = channels
        self.hidden = max(channels // reduction, min_hidden)
        self.fc1 = Conv2d(channels, self.hidden, 1, rng=rng)
        self.fc2 = Conv2d(self.hidden, channels, 1, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        z = ops.global_avg_pool2d(x)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(z))))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "SEModule")
        return x * self.gate(x)


class CoordAttModule(Module):
    """Coordinate attention.

    Row- and column-averaged descriptors are stacked along the spatial axis,
    squeezed through a shared 1x1 conv + BN + ReLU6, split again and expanded
    into a height gate (N, C, H, 1) and a width gate (N, C, 1, W).
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, reduction: int = 8, min_hidden: int = 8):
        super().__init__()
        self.channels = channels
        self.hidden = max(channels // reduction, min_hidden)
        self.compress = Conv2d(channels, self.hidden, 1, rng=rng)
        self.bn = BatchNorm2d(self.hidden)
        self.expand_h = Conv2d(self.hidden, channels, 1, rng=rng)
        self.expand_w = Conv2d(self.hidden, channels, 1, rng=rng)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _check_channels(x, self.channels, "CoordAttModule")
        h, w = x.shape[2], x.shape[3]
        z_h = ops.mean(x, axis=3, keepdims=True)                                  # N,C,H,1
        z_w = ops.transpose(ops.mean(x, axis=2, keepdims=True), (0, 1, 3, 2))      # N,C,W,1
        joint = ops.relu6(self.bn(self.compress(ops.concat([z_h, z_w], axis=2))))  # N,m,H+W,1
        f_h = joint[:, :, :h, :]
        f_w = ops.transpose(joint[:, :, h:h + w, :], (0, 1, 3, 2))
        a_h = ops.sigmoid(self.expand_h(f_h))
        a_w = ops.sigmoid(self.expand_w(f_w))
        return a_h, a_w

    def forward(self, x: Tensor) -> Tensor:
        a_h, a_w = self.gates(x)
        return x * a_h * a_w


def delta_apply(f: Tensor, k: Tensor, beta: Tensor) -> Tensor:
    """f - beta * (f . k) k at every pixel; k is (N, C, 1, 1), beta is (N, 1, 1, 1)."""
    proj = ops.sum(f * k, axis=1, keepdims=True)
    return f - beta * proj * k


class DeltaOperator(Module):
    """Learned rank-one suppression of one channel-space direction.

    A direction MLP and a strength MLP read the global-average descriptor;
    the direction is normalized to unit length and the strength squashed to
    [0, 2]. A zero-length raw direction falls back to the first basis vector.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, hidden_ratio: int = 4, min_hidden: int = 8):
        super().__init__()
        self.channels = channels
        self.hidden = max(channels // hidden_ratio, min_hidden)
        self.k_fc1 = Conv2d(channels, self.hidden, 1, rng=rng)
        self.k_fc2 = Conv2d(self.hidden, channels, 1, rng=rng)
        self.beta_fc1 = Conv2d(channels, self.hidden, 1, rng=rng)
        self.beta_fc2 = Conv2d(self.hidden, 1, 1, rng=rng)

    def direction_and_strength(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = ops.global_avg_pool2d(x)
        k = ops.unit_direction(self.k_fc2(ops.relu(self.k_fc1(z))))
        beta = 2.0 * ops.sigmoid(self.beta_fc2(ops.relu(self.beta_fc1(z))))
        return k, beta

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "DeltaOperator")
        k, beta = self.direction_and_strength(x)
        return delta_apply(x, k, beta)


def _bilinear_up_kernel() -> np.ndarray:
    # A 2x2 stride-2 kernel has one tap per output pixel, so interpolation reduces to replication.
    return np.ones((1, 1, 2, 2), dtype=np.float32)


class AttentionGate(Module):
    """Decoder-conditioned spatial gate over encoder features.

    ``scale`` is the encoder/decoder resolution ratio (1 or 2). At ratio 2 the
    encoder projection is strided and the attention map is brought back to
    encoder resolution with a learnable 2x2 transposed convolution.
    """

    def __init__(self, enc_channels: int, dec_channels: int, *, rng: np.random.Generator, scale: int = 1,
                 inter_channels: Optional[int] = None):
        super().__init__()
        if scale not in (1, 2):
            raise ValueError(f"gate resolution ratio must be 1 or 2, got {scale}")
        inter = inter_channels or enc_channels
        self.enc_channels, self.dec_channels, self.scale = enc_channels, dec_channels, scale
        self.enc_proj = Conv2d(enc_channels, inter, 3, rng=rng, stride=scale, padding=1)
        self.dec_proj = Conv2d(dec_channels, inter, 3, rng=rng, padding=1)
        self.act = PReLU()
        self.psi = Conv2d(inter, 1, 1, rng=rng)
        if scale == 2:
            self.up = Conv2d(1, 1, 2, rng=rng, stride=2, transposed=True)
            self.up.weight.data = _bilinear_up_kernel()
        else:
            self.up = None

    def forward(self, fused: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
        _check_channels(fused, self.enc_channels, "AttentionGate (encoder side)")
        _check_channels(g, self.dec_channels, "AttentionGate (decoder side)")
        he, we = fused.shape[2:]
        hd, wd = g.shape[2:]
        if (he, we) == (hd, wd):
            ratio = 1
        elif (he, we) == (2 * hd, 2 * wd):
            ratio = 2
        else:
            raise ValueError(f"encoder/decoder resolution ratio must be 1 or 2, got {he}x{we} vs {hd}x{wd}")
        if ratio != self.scale:
            raise ValueError(f"gate built for ratio {self.scale} but inputs have ratio {ratio}")
        alpha = ops.sigmoid(self.psi(self.act(self.dec_proj(g) + self.enc_proj(fused))))
        up = self.up(alpha) if self.up is not None else alpha
        return fused * up, alpha


class DDAModule(Module):
    """Deep delta attention skip refinement.

    Optional fusion with the adjacent higher-resolution encoder feature, then
    a delta-operator path and an attention-gate path in parallel, combined by
    a 1x1 conv + BN + ReLU6.
    """

    def __init__(self, channels: int, dec_channels: int, *, rng: np.random.Generator,
                 adj_channels: Optional[int] = None, gate_scale: int = 1, delta_hidden_ratio: int = 4):
        super().__init__()
        self.channels = channels
        self.has_multiscale = adj_channels is not None
        if self.has_multiscale:
            self.fuse = Conv2d(channels + adj_channels, channels, 1, rng=rng)
            self.fuse_bn = BatchNorm2d(channels)
        else:
            self.fuse = self.fuse_bn = None
        self.delta = DeltaOperator(channels, rng=rng, hidden_ratio=delta_hidden_ratio)
        self.gate = AttentionGate(channels, dec_channels, rng=rng, scale=gate_scale)
        self.combine = Conv2d(2 * channels, channels, 1, rng=rng)
        self.combine_bn = BatchNorm2d(channels)

    def fuse_inputs(self, enc: Tensor, adj: Optional[Tensor]) -> Tensor:
        if adj is None or self.fuse is None:
            return enc
        h, w = enc.shape[2:]
        ah, aw = adj.shape[2:]
        if (ah, aw) == (2 * h, 2 * w):
            adj = ops.max_pool2d(adj, 2)
        elif (ah, aw) != (h, w):
            raise ValueError(f"adjacent encoder feature {ah}x{aw} must be 1x or 2x the skip resolution {h}x{w}")
        return ops.relu6(self.fuse_bn(self.fuse(ops.concat([enc, adj], axis=1))))

    def forward(self, enc: Tensor, adj: Optional[Tensor], dec: Optional[Tensor], return_parts: bool = False):
        if dec is None:
            raise ValueError("DDAModule needs the decoder gating signal")
        _check_channels(enc, self.channels, "DDAModule")
        fused = self.fuse_inputs(enc, adj)
        delta = self.delta(fused)
        gated, alpha = self.gate(fused, dec)
        out = ops.relu6(self.combine_bn(self.combine(ops.concat([delta, gated], axis=1))))
        if return_parts:
            return out, {"fused": fused, "delta": delta, "gate": gated, "alpha": alpha}
        return out
