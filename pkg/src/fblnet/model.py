"""FBLNet: dual encoder, knowledge-guided fusion, skip decoder and sigmoid
head, with the training-time feedback loop that accumulates knowledge."""

import torch
import torch.nn as nn

from .core import ModelConfig, ShapePlan, TrainConfig, shape_plan
from .decoder import Decoder
from .encoder import DualEncoder
from .fbl import FeedbackLoop, select_feedback
from .fusion import KnowledgeGuidedFusion


class FBLNet(nn.Module):
    def __init__(self, cfg: ModelConfig, plan: ShapePlan | None = None):
        super().__init__()
        self.cfg = cfg
        self.plan = plan if plan is not None else shape_plan(cfg)
        self.encoder = DualEncoder(cfg, self.plan)
        self.knowledge = FeedbackLoop(cfg, self.plan)
        self.fusion = KnowledgeGuidedFusion(cfg, self.plan)
        self.decoder = Decoder(cfg, self.plan)

    @property
    def uses_knowledge(self) -> bool:
        return self.cfg.fusion_mode == "fbl"

    def forward(
        self, images: torch.Tensor
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """predicts the attention map of a batch of frames.

        Parameters
        ----------
        images : torch.Tensor
            (batch, 3, S, S) frames in [0, 1]

        Returns
        -------
        tuple[torch.Tensor, dict[str, torch.Tensor]]
            A of shape (batch, 1, S, S) in (0, 1), and the decoder features
            d0..d4 of this pass
        """
        feats = self.encoder(images)
        K_fusion = (
            self.knowledge.resize_knowledge() if self.uses_knowledge else None
        )
        F = self.fusion(feats["C5"], feats["T4"], K_fusion)
        return self.decoder(F, feats)

    def feedback(self, decoded: dict[str, torch.Tensor]) -> bool:
        """feeds the configured decoder node back into the knowledge. Only
        the fbl fusion mode schedules an update.

        Returns
        -------
        bool
            whether K was updated
        """
        if not self.uses_knowledge:
            return False
        self.knowledge.update_knowledge(
            select_feedback(decoded, self.cfg.feedback_node)
        )
        return True


def build_optimizer(model: nn.Module, train_cfg: TrainConfig):
    """Adam with L2 weight decay over the trainable
    parameters; the frozen update rule of the knowledge loop is excluded"""
    return torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad],
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        weight_decay=train_cfg.weight_decay,
    )
