"""Knowledge-guided cross-attention fusion of C5 and T4, and the addition /
concatenation baselines it is compared against.

Token layout is (batch, N_t, D) with N_t = (S/16)^2 tokens on the fusion
grid and D = 4w channels.
"""

import math

import torch
import torch.nn as nn

from .blocks import ConvBlock, init_conv, upsample
from .core import ModelConfig, ShapePlan, check_shape
from .errors import ModeError, ShapeError


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, D, h, w) -> (B, h*w, D)"""
    return x.flatten(2).transpose(1, 2)


def from_tokens(tokens: torch.Tensor, side: int) -> torch.Tensor:
    """(B, h*w, D) -> (B, D, h, w)"""
    B, N, D = tokens.shape
    return tokens.transpose(1, 2).reshape(B, D, side, side)


def knowledge_attention(K_fusion: torch.Tensor) -> torch.Tensor:
    """softmax of K over the flattened spatial axis, independently per
    channel.

    Parameters
    ----------
    K_fusion : torch.Tensor
        (D, h, w) knowledge on the fusion grid

    Returns
    -------
    torch.Tensor
        K_a in token layout (h*w, D); every channel (column) sums to 1
    """
    return K_fusion.flatten(1).softmax(dim=-1).transpose(0, 1)


def uniform_attention(plan: ShapePlan, like: torch.Tensor) -> torch.Tensor:
    """the K_a of an all-constant knowledge map, 1/N_t everywhere"""
    D = plan.K_fusion_shape[0]
    N_t = plan.fusion_tokens
    return like.new_full((N_t, D), 1.0 / N_t)


def cross_attention_fuse(
    C5_g: torch.Tensor,
    T4_g: torch.Tensor,
    W_q: nn.Linear,
    W_k: nn.Linear,
    return_weights: bool = False,
):
    """single-head cross attention with C5_g as query and value and T4_g
    as key: W = softmax(q k^T / sqrt(D)), F = W C5_g.

    Parameters
    ----------
    C5_g, T4_g : torch.Tensor
        guided token grids (batch, N_t, D)
    W_q, W_k : nn.Linear
        bias-free D x D query and key projections
    return_weights : bool, optional
        also return the attention weights, by default False

    Returns
    -------
    torch.Tensor | tuple[torch.Tensor, torch.Tensor]
        F (batch, N_t, D), and W (batch, N_t, N_t) when requested

    Raises
    ------
    ShapeError
        if the two grids differ in shape or are not rank 3
    """
    if C5_g.dim() != 3 or C5_g.shape != T4_g.shape:
        raise ShapeError(
            "cross attention needs two equal (batch, N_t, D) grids, got %s and %s"
            % (tuple(C5_g.shape), tuple(T4_g.shape))
        )
    D = C5_g.shape[-1]
    logits = W_q(C5_g) @ W_k(T4_g).transpose(1, 2) / math.sqrt(D)
    weights = logits.softmax(dim=-1)
    F = weights @ C5_g
    if return_weights:
        return F, weights
    return F


class SideBlock(nn.Sequential):
    """1x1 channel squeeze, bilinear upsampling to the fusion grid, then a
    ConvBlock; carries an original encoder feature into the enrichment"""

    def __init__(self, in_channels: int, out_channels: int, side: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.Upsample(size=(side, side), mode="bilinear", align_corners=False),
            ConvBlock(out_channels, out_channels),
        )
        init_conv(self[0])


class KnowledgeGuidedFusion(nn.Module):
    def __init__(self, cfg: ModelConfig, plan: ShapePlan):
        super().__init__()
        self.plan = plan
        self.mode = cfg.fusion_mode
        in_channels = plan.C5[0]
        D, side, _ = plan.K_fusion_shape
        self.D = D
        self.side = side
        self.squeeze_c = nn.Conv2d(in_channels, D, 1, bias=False)
        self.squeeze_t = nn.Conv2d(in_channels, D, 1, bias=False)
        self.norm_c = nn.LayerNorm(D)
        self.norm_t = nn.LayerNorm(D)
        self.W_q = nn.Linear(D, D, bias=False)
        self.W_k = nn.Linear(D, D, bias=False)
        self.enrich_c = SideBlock(in_channels, D, side)
        self.enrich_t = SideBlock(in_channels, D, side)
        self.out_block = ConvBlock(D, D)
        self.cat_proj = nn.Conv2d(2 * D, D, 1)
        for conv in (self.squeeze_c, self.squeeze_t, self.cat_proj):
            init_conv(conv)
        for linear in (self.W_q, self.W_k):
            nn.init.normal_(linear.weight, std=D**-0.5)

    def _squeeze_up(self, x: torch.Tensor, squeeze: nn.Conv2d):
        return upsample(squeeze(x), self.side)

    def guide_features(
        self, C5: torch.Tensor, T4: torch.Tensor, K_a: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """squeezes, upsamples, flattens and layer-normalizes C5 and T4, then
        gates every token by K_a scaled by N_t (so a uniform K_a is an exact
        identity).

        Returns
        -------
        tuple[torch.Tensor, torch.Tensor]
            C5_g, T4_g token grids (batch, N_t, D)
        """
        check_shape(C5, self.plan.C5, "C5")
        check_shape(T4, self.plan.T4, "T4")
        N_t = self.plan.fusion_tokens
        if tuple(K_a.shape) != (N_t, self.D):
            raise ShapeError(
                "K_a expected shape (%d, %d) but got %s"
                % (N_t, self.D, tuple(K_a.shape))
            )
        gate = K_a * N_t
        C5_g = self.norm_c(to_tokens(self._squeeze_up(C5, self.squeeze_c)))
        T4_g = self.norm_t(to_tokens(self._squeeze_up(T4, self.squeeze_t)))
        return gate * C5_g, gate * T4_g

    def residual_enrich(
        self, F: torch.Tensor, C5: torch.Tensor, T4: torch.Tensor
    ) -> torch.Tensor:
        """F_out = ConvBlock(F + Side(C5) + Side(T4)) on the fusion grid.

        Returns
        -------
        torch.Tensor
            (batch, D, S/16, S/16)
        """
        if F.dim() != 3 or tuple(F.shape[1:]) != (
            self.plan.fusion_tokens,
            self.D,
        ):
            raise ShapeError(
                "fused tokens expected shape (batch, %d, %d) but got %s"
                % (self.plan.fusion_tokens, self.D, tuple(F.shape))
            )
        F = from_tokens(F, self.side)
        return self.out_block(F + self.enrich_c(C5) + self.enrich_t(T4))

    def fuse_guided(
        self, C5: torch.Tensor, T4: torch.Tensor, K_a: torch.Tensor
    ) -> torch.Tensor:
        """the full guided pipeline: guidance, cross attention and
        enrichment"""
        C5_g, T4_g = self.guide_features(C5, T4, K_a)
        F = cross_attention_fuse(C5_g, T4_g, self.W_q, self.W_k)
        return self.residual_enrich(F, C5, T4)

    def fuse_baseline(
        self, C5: torch.Tensor, T4: torch.Tensor, mode: str
    ) -> torch.Tensor:
        """fusion without knowledge: "add" sums the squeezed/upsampled
        features, "cat" concatenates and projects them back to D channels,
        both followed by the output ConvBlock; "no_fbl" runs the guided
        pipeline with a uniform K_a.

        Raises
        ------
        ModeError
            for any other mode, including "fbl"
        """
        if mode == "no_fbl":
            return self.fuse_guided(C5, T4, uniform_attention(self.plan, C5))
        if mode not in ("add", "cat"):
            raise ModeError(
                "fuse_baseline accepts add, cat or no_fbl, got %s" % mode
            )
        check_shape(C5, self.plan.C5, "C5")
        check_shape(T4, self.plan.T4, "T4")
        c = self._squeeze_up(C5, self.squeeze_c)
        t = self._squeeze_up(T4, self.squeeze_t)
        if mode == "add":
            return self.out_block(c + t)
        return self.out_block(self.cat_proj(torch.cat([c, t], dim=1)))

    def forward(
        self,
        C5: torch.Tensor,
        T4: torch.Tensor,
        K_fusion: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if self.mode == "fbl":
            if K_fusion is None:
                raise ModeError("fusion_mode fbl requires the knowledge map")
            check_shape(
                K_fusion.unsqueeze(0), self.plan.K_fusion_shape, "K_fusion"
            )
            return self.fuse_guided(C5, T4, knowledge_attention(K_fusion))
        return self.fuse_baseline(C5, T4, self.mode)
