"""Dual-pathway feature extraction.

`CNNEncoder` is a ResNet-18 topology (stride-2 stem, four residual stages of
two basic blocks) producing C1..C5. `TransformerEncoder` is a plain windowed
self-attention pyramid (patch embedding of size 4, four stages, patch merging
between stages) producing T1..T4. Both are randomly initialized and their
widths follow `ModelConfig.base_width`.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig, ShapePlan, check_shape
from .errors import ShapeError, WindowError

CNN_KEYS = ("C1", "C2", "C3", "C4", "C5")
TRANS_KEYS = ("T1", "T2", "T3", "T4")


def _check_images(images: torch.Tensor, side: int):
    if images.dim() != 4 or tuple(images.shape[1:]) != (3, side, side):
        raise ShapeError(
            "images expected shape (batch, 3, %d, %d) but got %s"
            % (side, side, tuple(images.shape))
        )


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(
            in_channels, out_channels, 3, stride, padding=1, bias=False
        )
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(
            out_channels, out_channels, 3, 1, padding=1, bias=False
        )
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CNNEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, plan: ShapePlan):
        super().__init__()
        self.plan = plan
        self.side = cfg.input_side
        width = cfg.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 7, 2, padding=3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=False),
        )
        self.pool = nn.MaxPool2d(3, 2, padding=1)
        widths = [width, width, 2 * width, 4 * width, 8 * width]
        self.stages = nn.ModuleList(
            [
                nn.Sequential(
                    BasicBlock(widths[i], widths[i + 1], 1 if i == 0 else 2),
                    BasicBlock(widths[i + 1], widths[i + 1]),
                )
                for i in range(4)
            ]
        )
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(
                    module.weight, mode="fan_in", nonlinearity="relu"
                )

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """extracts the five CNN features C1..C5.

        Parameters
        ----------
        images : torch.Tensor
            (batch, 3, S, S) images in [0, 1]

        Returns
        -------
        dict[str, torch.Tensor]
            C1..C5 shaped per the ShapePlan
        """
        _check_images(images, self.side)
        x = self.stem(images)
        feats = {"C1": x}
        x = self.pool(x)
        for key, stage in zip(CNN_KEYS[1:], self.stages):
            x = stage(x)
            feats[key] = x
        for key in CNN_KEYS:
            check_shape(feats[key], self.plan[key], key)
        return feats


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, window * window, C)"""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return (
        x.permute(0, 1, 3, 2, 4, 5).contiguous().view(-1, window * window, C)
    )


def window_reverse(
    windows: torch.Tensor, window: int, H: int, W: int
) -> torch.Tensor:
    """(B * num_windows, window * window, C) -> (B, H, W, C)"""
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(-1, H, W, C)


def num_heads_for(dim: int) -> int:
    """about one head per 32 channels, always dividing `dim`"""
    heads = max(1, dim // 32)
    while dim % heads:
        heads -= 1
    return heads


class WindowAttention(nn.Module):
    """multi-head self attention inside non-overlapping windows, without
    relative position bias and without window shifting"""

    def __init__(self, dim: int, num_heads: int, total_depth: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        for linear in (self.qkv, self.proj):
            nn.init.normal_(linear.weight, std=dim**-0.5)
            nn.init.zeros_(linear.bias)
        with torch.no_grad():
            self.proj.weight.mul_(1.0 / math.sqrt(total_depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        N_w, N, C = x.shape
        qkv = self.qkv(x).view(N_w, N, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(N_w, N, C)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(
        self,
        dim: int,
        num_heads: int,
        window: int,
        total_depth: int,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, total_depth)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if H % self.window or W % self.window:
            raise WindowError(
                "stage side %dx%d is not divisible by window size %d"
                % (H, W, self.window)
            )
        windows = window_partition(self.norm1(x), self.window)
        x = x + window_reverse(self.attn(windows), self.window, H, W)
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concatenation followed by a linear reduction,
    halving the resolution and doubling the channels"""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5)
        return self.reduction(self.norm(x.flatten(3)))


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, plan: ShapePlan):
        super().__init__()
        self.plan = plan
        self.side = cfg.input_side
        width = cfg.base_width
        total_depth = sum(cfg.trans_depths)
        self.patch_embed = nn.Conv2d(3, width, kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(width)
        self.merges = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i, depth in enumerate(cfg.trans_depths):
            dim = width * 2**i
            self.merges.append(
                PatchMerging(dim // 2) if i > 0 else nn.Identity()
            )
            self.stages.append(
                nn.Sequential(
                    *[
                        TransformerBlock(
                            dim,
                            num_heads_for(dim),
                            plan.windows[i],
                            total_depth,
                        )
                        for _ in range(depth)
                    ]
                )
            )
            self.norms.append(nn.LayerNorm(dim))
        nn.init.kaiming_normal_(self.patch_embed.weight, mode="fan_in")
        nn.init.zeros_(self.patch_embed.bias)

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """extracts the four transformer features T1..T4, each stage
        applying windowed self-attention, with patch merging between stages.

        Parameters
        ----------
        images : torch.Tensor
            (batch, 3, S, S) images in [0, 1]

        Returns
        -------
        dict[str, torch.Tensor]
            T1..T4 shaped per the ShapePlan

        Raises
        ------
        WindowError
            if a stage side is not divisible by its window size
        """
        _check_images(images, self.side)
        x = self.patch_embed(images).permute(0, 2, 3, 1)
        x = self.embed_norm(x)
        feats = {}
        for key, merge, stage, norm in zip(
            TRANS_KEYS, self.merges, self.stages, self.norms
        ):
            x = stage(merge(x))
            feats[key] = norm(x).permute(0, 3, 1, 2).contiguous()
            check_shape(feats[key], self.plan[key], key)
        return feats


class DualEncoder(nn.Module):
    """runs the pathways selected by `encoder_mode`; the unused pathway is
    not evaluated and its features are zeros of the planned shape"""

    def __init__(self, cfg: ModelConfig, plan: ShapePlan):
        super().__init__()
        self.plan = plan
        self.mode = cfg.encoder_mode
        self.cnn = CNNEncoder(cfg, plan)
        self.trans = TransformerEncoder(cfg, plan)

    def _zeros(self, images: torch.Tensor, keys) -> dict[str, torch.Tensor]:
        return {
            key: images.new_zeros((images.shape[0],) + self.plan[key])
            for key in keys
        }

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = {}
        if self.mode in ("cnn", "both"):
            feats.update(self.cnn(images))
        else:
            _check_images(images, self.cnn.side)
            feats.update(self._zeros(images, CNN_KEYS))
        if self.mode in ("trans", "both"):
            feats.update(self.trans(images))
        else:
            feats.update(self._zeros(images, TRANS_KEYS))
        return feats
