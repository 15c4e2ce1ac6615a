"""The feedback loop: a persistent incremental-knowledge buffer K fed by a
detached decoder feature once per training step.

K starts as all ones and evolves by the iteration rule

    K' = mean_batch(ReLU(BN(Conv(K (+) B))) + K)

where (+) concatenates channels after broadcasting K over the batch. The
Conv/BN of the rule receive no gradient (B is detached and fusion consumes
the K of the previous step), so they stay frozen at initialization. The BN
always normalizes with its running statistics, which never advance. K is
only mutated in training mode.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import init_conv, upsample
from .core import ModelConfig, ShapePlan, check_shape
from .errors import EvalModeError, NodeError, ShapeError


@dataclass
class FeedbackFeature:
    """detached copy of a decoder feature, tagged with the node it came
    from"""

    B: torch.Tensor
    source_node: str


def select_feedback(
    decoder_feats: dict[str, torch.Tensor], node: str
) -> FeedbackFeature:
    """fetches the feedback feature from decoder node `node`.

    Parameters
    ----------
    decoder_feats : dict[str, torch.Tensor]
        decoder outputs d0..d4 of the current forward pass
    node : str
        one of "d0".."d4"

    Returns
    -------
    FeedbackFeature
        detached copy of `decoder_feats[node]`, so mutating it leaves the
        decoder features untouched

    Raises
    ------
    NodeError
        if `node` is not among `decoder_feats`
    """
    if node not in decoder_feats:
        raise NodeError(
            "feedback node %s not found among decoder features %s"
            % (node, sorted(decoder_feats))
        )
    return FeedbackFeature(
        B=decoder_feats[node].detach().clone(), source_node=node
    )


class FeedbackLoop(nn.Module):
    """holds the KnowledgeState: buffer `K`, the `iteration` counter and
    the frozen Conv/BN of the iteration rule, plus the learned 1x1
    projection that carries K onto the fusion grid."""

    def __init__(self, cfg: ModelConfig, plan: ShapePlan):
        super().__init__()
        self.plan = plan
        self.node = cfg.feedback_node
        channels = plan.K_shape[0]
        self.register_buffer("K", torch.ones(plan.K_shape))
        self.register_buffer("iteration", torch.zeros((), dtype=torch.long))
        self.update_conv = nn.Conv2d(2 * channels, channels, 3, 1, padding=1)
        self.update_bn = nn.BatchNorm2d(channels)
        init_conv(self.update_conv)
        for param in list(self.update_conv.parameters()) + list(
            self.update_bn.parameters()
        ):
            param.requires_grad_(False)
        self.project = nn.Conv2d(channels, plan.K_fusion_shape[0], 1)
        init_conv(self.project)

    def init_knowledge(self):
        """resets K to all ones and the iteration counter to zero"""
        with torch.no_grad():
            self.K.fill_(1.0)
            self.iteration.zero_()

    @torch.no_grad()
    def update_knowledge(self, feedback: FeedbackFeature) -> torch.Tensor:
        """applies the iteration rule once, in place, and advances the
        iteration counter.

        Parameters
        ----------
        feedback : FeedbackFeature
            batched feedback feature whose per-sample shape equals K

        Returns
        -------
        torch.Tensor
            the new K, without batch dimension

        Raises
        ------
        EvalModeError
            if called while the module is in evaluation mode
        ShapeError
            if the feedback feature does not match K
        """
        if not self.training:
            raise EvalModeError(
                "knowledge may only be updated in training mode"
            )
        if feedback.source_node != self.node:
            raise ShapeError(
                "feedback came from %s but knowledge is shaped for %s"
                % (feedback.source_node, self.node)
            )
        B = feedback.B
        check_shape(B, self.plan.K_shape, "feedback feature")
        K = self.K.unsqueeze(0).expand(B.shape[0], -1, -1, -1)
        joined = torch.cat([K, B.to(K.dtype)], dim=1)
        bn = self.update_bn
        normed = F.batch_norm(
            self.update_conv(joined),
            bn.running_mean,
            bn.running_var,
            bn.weight,
            bn.bias,
            training=False,
            eps=bn.eps,
        )
        new_K = torch.relu(normed) + K
        new_K = new_K.mean(dim=0)
        assert new_K.dim() == self.K.dim()
        self.K.copy_(new_K)
        self.iteration += 1
        return self.K

    def resize_knowledge(self) -> torch.Tensor:
        """bilinear resampling of K onto the fusion grid followed by the
        learned 1x1 channel projection.

        Returns
        -------
        torch.Tensor
            K_fusion, shaped ShapePlan.K_fusion_shape (no batch dimension)
        """
        side = self.plan.K_fusion_shape[1]
        # K is a buffer; the projection is the only trainable part here
        resized = upsample(self.K.detach().unsqueeze(0), side)
        return self.project(resized).squeeze(0)
