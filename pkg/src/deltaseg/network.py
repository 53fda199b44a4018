"""DeltaSeg graph: encoder, ASPP bottleneck, skip refinement, decoder and heads."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .attention import CoordAttModule, DDAModule, DeltaOperator, SEModule
from .nn import BatchNorm2d, Conv2d, DoubleConv, Dropout, Module
from .tensor import Tensor

VARIANTS = ("v1", "v2", "full")
HEAD_LAMBDAS = (1.0, 0.8, 0.6, 0.4)


@dataclass
class ModelConfig:
    num_classes: int = 7
    input_size: tuple[int, int] = (256, 256)
    encoder_widths: tuple[int, ...] = (64, 128, 256, 256, 256)
    encoder_dilations: tuple[int, ...] = (1, 1, 1, 2, 4)
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    aspp_dropout: float = 0.5
    variant: str = "full"
    width_multiplier: float = 1.0
    seed: int = 0
    se_reduction: int = 8
    ca_reduction: int = 1
    delta_hidden_ratio: int = 4

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.encoder_widths = tuple(int(v) for v in self.encoder_widths)
        self.encoder_dilations = tuple(int(v) for v in self.encoder_dilations)
        self.aspp_rates = tuple(int(v) for v in self.aspp_rates)
        self.variant = str(self.variant).lower()
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if len(self.encoder_widths) != 5 or len(self.encoder_dilations) != 5:
            raise ValueError("encoder_widths and encoder_dilations need exactly 5 entries")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        h, w = self.input_size
        if h % 4 or w % 4 or h <= 0 or w <= 0:
            raise ValueError(f"input size {h}x{w} must be positive and divisible by 4")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if not 0.0 <= self.aspp_dropout < 1.0:
            raise ValueError("aspp_dropout must lie in [0, 1)")

    def width(self, c: int) -> int:
        return max(8, int(round(c * self.width_multiplier)))

    @property
    def widths(self) -> list[int]:
        return [self.width(c) for c in self.encoder_widths]

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_size", "encoder_widths", "encoder_dilations", "aspp_rates"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ModelOutputs:
    primary_logits: Tensor
    aux_logits: list[Tensor] = field(default_factory=list)

    @property
    def heads(self) -> list[Tensor]:
        """All logits ordered dec1 (primary) to dec4."""
        return [self.primary_logits, *self.aux_logits]


class ASPP(Module):
    """Five parallel branches (1x1, three dilated separable 3x3, pooled) -> 1x1 projection."""

    def __init__(self, channels: int, rates, *, rng, dropout: float, attention: Optional[Module] = None):
        super().__init__()
        self.rates = tuple(rates)
        self.branch0 = Conv2d(channels, channels, 1, rng=rng)
        self.branch0_bn = BatchNorm2d(channels)
        self.atrous = []
        for i, rate in enumerate(self.rates):
            dw = Conv2d(channels, channels, 3, rng=rng, padding=rate, dilation=rate, groups=channels)
            pw = Conv2d(channels, channels, 1, rng=rng)
            bn = BatchNorm2d(channels)
            setattr(self, f"atrous{i + 1}_depthwise", dw)
            setattr(self, f"atrous{i + 1}_pointwise", pw)
            setattr(self, f"atrous{i + 1}_bn", bn)
            self.atrous.append((dw, pw, bn))
        self.pool_proj = Conv2d(channels, channels, 1, rng=rng)
        n_branches = 2 + len(self.rates)
        self.project = Conv2d(n_branches * channels, channels, 1, rng=rng)
        self.project_bn = BatchNorm2d(channels)
        self.dropout = Dropout(dropout, rng)
        self.attention = attention

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        branches = [ops.relu(self.branch0_bn(self.branch0(x)))]
        for dw, pw, bn in self.atrous:
            branches.append(ops.relu(bn(pw(dw(x)))))
        pooled = ops.relu(self.pool_proj(ops.global_avg_pool2d(x)))
        branches.append(ops.resize_bilinear(pooled, h, w))
        y = ops.relu(self.project_bn(self.project(ops.concat(branches, axis=1))))
        y = self.dropout(y)
        if self.attention is not None:
            y = self.attention(y)
        return y


class DeltaSeg(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w1, w2, w3, w4, w5 = cfg.widths
        d = cfg.encoder_dilations
        se = lambda c: SEModule(c, rng=rng, reduction=cfg.se_reduction)  # noqa: E731
        ca = lambda c: CoordAttModule(c, rng=rng, reduction=cfg.ca_reduction)  # noqa: E731
        dec_att = ca if cfg.variant == "full" else se

        self.enc1 = DoubleConv(3, w1, rng=rng, dilation=d[0], attention=se)
        self.enc2 = DoubleConv(w1, w2, rng=rng, dilation=d[1], attention=se)
        self.enc3 = DoubleConv(w2, w3, rng=rng, dilation=d[2], attention=se)
        self.enc4 = DoubleConv(w3, w4, rng=rng, dilation=d[3], attention=se)
        self.enc5 = DoubleConv(w4, w5, rng=rng, dilation=d[4], attention=se)

        self.aspp = ASPP(w5, cfg.aspp_rates, rng=rng, dropout=cfg.aspp_dropout,
                         attention=ca(w5) if cfg.variant == "full" else None)

        if cfg.variant == "v1":
            self.skip4 = DeltaOperator(w4, rng=rng, hidden_ratio=cfg.delta_hidden_ratio)
            self.skip3 = DeltaOperator(w3, rng=rng, hidden_ratio=cfg.delta_hidden_ratio)
            self.skip2 = DeltaOperator(w2, rng=rng, hidden_ratio=cfg.delta_hidden_ratio)
            self.skip1 = DeltaOperator(w1, rng=rng, hidden_ratio=cfg.delta_hidden_ratio)
        else:
            kw = dict(rng=rng, delta_hidden_ratio=cfg.delta_hidden_ratio)
            self.skip4 = DDAModule(w4, w5, adj_channels=w3, gate_scale=1, **kw)
            self.skip3 = DDAModule(w3, w4, adj_channels=w2, gate_scale=1, **kw)
            self.skip2 = DDAModule(w2, w3, adj_channels=w1, gate_scale=2, **kw)
            self.skip1 = DDAModule(w1, w2, adj_channels=None, gate_scale=2, **kw)

        self.dec4 = DoubleConv(w4 + w5, w4, rng=rng, attention=dec_att)
        self.dec3 = DoubleConv(w3 + w4, w3, rng=rng, attention=dec_att)
        self.up2 = Conv2d(w3, w2, 2, rng=rng, stride=2, transposed=True)
        self.dec2 = DoubleConv(2 * w2, w2, rng=rng, attention=dec_att)
        self.up1 = Conv2d(w2, w1, 2, rng=rng, stride=2, transposed=True)
        self.dec1 = DoubleConv(2 * w1, w1, rng=rng, attention=dec_att)

        self.head1 = Conv2d(w1, cfg.num_classes, 1, rng=rng)
        self.head2 = Conv2d(w2, cfg.num_classes, 1, rng=rng)
        self.head3 = Conv2d(w3, cfg.num_classes, 1, rng=rng)
        self.head4 = Conv2d(w4, cfg.num_classes, 1, rng=rng)

    # -- stages -----------------------------------------------------------------

    def encoder_forward(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {x.shape}")
        if tuple(x.shape[2:]) != tuple(self.cfg.input_size):
            raise ValueError(f"input spatial size {tuple(x.shape[2:])} != configured {tuple(self.cfg.input_size)}")
        f1 = self.enc1(x)
        f2 = self.enc2(ops.max_pool2d(f1, 2))
        f3 = self.enc3(ops.max_pool2d(f2, 2))
        f4 = self.enc4(f3)
        f5 = self.enc5(f4)
        return [f1, f2, f3, f4, f5]

    def aspp_forward(self, f5: Tensor) -> Tensor:
        return self.aspp(f5)

    def _refine(self, skip: Module, enc: Tensor, adj: Optional[Tensor], dec: Tensor) -> Tensor:
        if isinstance(skip, DeltaOperator):
            return skip(enc)
        return skip(enc, adj, dec)

    def decoder_forward(self, bottleneck: Tensor, skips: list[Tensor]) -> ModelOutputs:
        if len(skips) < 4 or any(s is None for s in skips[:4]):
            raise ValueError("decoder needs the four encoder skips (stages 1-4)")
        f1, f2, f3, f4 = skips[:4]
        d4 = self.dec4(ops.concat([self._refine(self.skip4, f4, f3, bottleneck), bottleneck], axis=1))
        d3 = self.dec3(ops.concat([self._refine(self.skip3, f3, f2, d4), d4], axis=1))
        d2 = self.dec2(ops.concat([self._refine(self.skip2, f2, f1, d3), self.up2(d3)], axis=1))
        d1 = self.dec1(ops.concat([self._refine(self.skip1, f1, None, d2), self.up1(d2)], axis=1))
        primary = self.head1(d1)
        if not self.training:
            return ModelOutputs(primary)
        return ModelOutputs(primary, [self.head2(d2), self.head3(d3), self.head4(d4)])

    def forward(self, x: Tensor) -> ModelOutputs:
        feats = self.encoder_forward(x)
        return self.decoder_forward(self.aspp_forward(feats[4]), feats[:4])


def build_model(cfg: ModelConfig) -> DeltaSeg:
    cfg.validate()
    return DeltaSeg(cfg)


def count_params(model: Module) -> tuple[int, "OrderedDict[str, int]"]:
    """Total learnable scalars and a breakdown by top-level submodule."""
    breakdown: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        breakdown[top] = breakdown.get(top, 0) + p.size
    return sum(breakdown.values()), breakdown
