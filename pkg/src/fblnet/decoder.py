"""Upsampling decoder with paired CNN/transformer skips and the sigmoid
attention head."""

import torch
import torch.nn as nn

from .blocks import ConvBlock, init_conv, upsample
from .core import ModelConfig, ShapePlan, check_shape
from .errors import ShapeError

DECODER_KEYS = ("d0", "d1", "d2", "d3", "d4")
# (cnn skip, transformer skip) feeding each decoder block
SKIPS = {"d1": ("C4", "T3"), "d2": ("C3", "T2"), "d3": ("C2", "T1")}


class DecoderBlock(nn.Module):
    """out = up(ConvBlock(concat(skip_c, skip_t))) + up(ConvBlock(d_prev)),
    the skip branch only present when `skip_channels` is given. Spatial
    side doubles unless `upscale` is False."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        skip_channels: int | None = None,
        upscale: bool = True,
    ):
        super().__init__()
        self.upscale = upscale
        self.main = ConvBlock(in_channels, out_channels)
        self.skip = (
            ConvBlock(2 * skip_channels, out_channels)
            if skip_channels is not None
            else None
        )

    def _up(self, x: torch.Tensor) -> torch.Tensor:
        if not self.upscale:
            return x
        return upsample(x, (2 * x.shape[-2], 2 * x.shape[-1]))

    def forward(
        self,
        d_prev: torch.Tensor,
        skip_c: torch.Tensor | None = None,
        skip_t: torch.Tensor | None = None,
    ) -> torch.Tensor:
        out = self._up(self.main(d_prev))
        if self.skip is None:
            return out
        if skip_c is None or skip_t is None:
            raise ShapeError("decoder block expects both skip features")
        if skip_c.shape != skip_t.shape:
            raise ShapeError(
                "skip features disagree: %s vs %s"
                % (tuple(skip_c.shape), tuple(skip_t.shape))
            )
        if skip_c.shape[-2:] != d_prev.shape[-2:]:
            raise ShapeError(
                "skip side %s does not match decoder side %s"
                % (tuple(skip_c.shape[-2:]), tuple(d_prev.shape[-2:]))
            )
        return out + self._up(self.skip(torch.cat([skip_c, skip_t], dim=1)))


def decoder_block(
    d_prev: torch.Tensor,
    skip_c: torch.Tensor | None,
    skip_t: torch.Tensor | None,
    block: DecoderBlock,
) -> torch.Tensor:
    """functional form of one decoder step"""
    return block(d_prev, skip_c, skip_t)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, plan: ShapePlan):
        super().__init__()
        self.plan = plan
        fused = plan.K_fusion_shape[0]
        self.blocks = nn.ModuleDict(
            {"d0": DecoderBlock(fused, plan.d0[0], upscale=False)}
        )
        for prev, key in zip(DECODER_KEYS, DECODER_KEYS[1:]):
            skip = SKIPS.get(key)
            self.blocks[key] = DecoderBlock(
                plan[prev][0],
                plan[key][0],
                plan[skip[0]][0] if skip else None,
            )
        self.head = nn.Conv2d(plan.d4[0], 1, 1)
        init_conv(self.head)

    def decode(
        self, F: torch.Tensor, feats: dict[str, torch.Tensor]
    ) -> dict[str, torch.Tensor]:
        """runs D0..D4 from the fused feature.

        Parameters
        ----------
        F : torch.Tensor
            fused feature (batch, 4w, S/16, S/16)
        feats : dict[str, torch.Tensor]
            encoder features, C2..C4 and T1..T3 are used as skips

        Returns
        -------
        dict[str, torch.Tensor]
            d0..d4 at sides S/16 .. S
        """
        check_shape(F, self.plan.K_fusion_shape, "F")
        out = {}
        x = F
        for key in DECODER_KEYS:
            skip = SKIPS.get(key)
            if skip:
                x = self.blocks[key](x, feats[skip[0]], feats[skip[1]])
            else:
                x = self.blocks[key](x)
            check_shape(x, self.plan[key], key)
            out[key] = x
        return out

    def predict_map(self, d4: torch.Tensor) -> torch.Tensor:
        """A = sigmoid(Conv1x1(d4)), (batch, 1, S, S) in (0, 1)"""
        check_shape(d4, self.plan.d4, "d4")
        return torch.sigmoid(self.head(d4))

    def forward(self, F, feats):
        decoded = self.decode(F, feats)
        return self.predict_map(decoded["d4"]), decoded
