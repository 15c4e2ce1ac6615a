import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvBlock(nn.Sequential):
    """ReLU(BN(Conv(x))), the small CNN block used by fusion and decoder"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size=3):
        super().__init__(
            nn.Conv2d(
                in_channels,
                out_channels,
                kernel_size,
                padding=kernel_size // 2,
                bias=False,
            ),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=False),
        )
        init_conv(self[0])


def init_conv(conv: nn.Conv2d):
    """fan-in scaled initialization for a convolution feeding a ReLU"""
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def upsample(x: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """bilinear resampling of the two spatial axes of `x` to `size`"""
    if isinstance(size, int):
        size = (size, size)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
