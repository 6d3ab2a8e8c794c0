"""Encoder-decoder yield regressor composed from the encoder, decoder and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .decoder import DecoderConfig, UperNetDecoder
from .encoder import AttentionRecord, EncoderConfig, ViTEncoder
from .head import AuxHead, HeadConfig, RegressionHead

PARAM_GROUPS = ("encoder", "decoder", "head", "aux_head")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        self.head.out_size = self.encoder.img_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["mode"] = self.encoder.mode.value
        d["encoder"]["tap_layers"] = list(self.encoder.tap_layers)
        d["decoder"]["psp_pool_sizes"] = list(self.decoder.psp_pool_sizes)
        d["decoder"]["scales"] = list(self.decoder.scales)
        if d["head"]["channels"] is not None:
            d["head"]["channels"] = list(d["head"]["channels"])
        return d


class ModelOutput(NamedTuple):
    main: torch.Tensor  # [B, 1, H, W]
    aux: torch.Tensor  # [B, 1, H, W]
    attention: list[AttentionRecord]


class YieldModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg.encoder)
        self.decoder = UperNetDecoder(cfg.encoder.embed_dim, cfg.encoder.grid, cfg.decoder)
        ch = cfg.decoder.fpn_channels
        self.head = RegressionHead(ch, cfg.head)
        self.aux_head = AuxHead(ch, cfg.head, cfg.decoder.psp_pool_sizes)

    def forward(self, x: torch.Tensor, latlon: torch.Tensor | None = None,
                capture: bool = False) -> ModelOutput:
        enc = self.encoder(x, latlon, capture=capture)
        main_feat, aux_feat = self.decoder(enc.features)
        return ModelOutput(self.head(main_feat), self.aux_head(aux_feat), enc.attention)

    def param_group(self, name: str) -> str:
        return name.split(".", 1)[0]
