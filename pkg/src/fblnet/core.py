"""Configuration, shape arithmetic and the shape contracts every other
module consumes.

All intermediate tensors are plain `torch.Tensor`s shaped
(batch, channels, height, width); their expected per-sample shapes are
tabulated once in a `ShapePlan` and checked at module boundaries with
`check_shape`.
"""

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ShapeError

FEEDBACK_NODES = ("d0", "d1", "d2", "d3", "d4")
FUSION_MODES = ("fbl", "no_fbl", "add", "cat")
ENCODER_MODES = ("cnn", "trans", "both")
# window size of the transformer pathway at the full 224 input
DEFAULT_WINDOW = 7


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 224
    base_width: int = 64
    feedback_node: str = "d2"
    fusion_mode: str = "fbl"
    encoder_mode: str = "both"
    mu: float = 1.0
    eta: float = 0.1
    xi: float = 0.1
    epsilon_kl: float = 1e-7
    fixation_threshold: float = 0.75
    seed: int = 0
    # None derives the window from input_side, see `window_size_for`
    window_size: int | None = None
    trans_depths: tuple[int, int, int, int] = (2, 2, 6, 2)


@dataclass(frozen=True)
class TrainConfig:
    n_steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    val_every: int = 200
    # 0 disables early stopping, otherwise validations without CC gain
    patience: int = 0
    n_splits: int = 100
    shuffle: bool = True
    device: str = "cpu"

    def __post_init__(self):
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0, got %s" % self.n_steps)
        if self.batch_size < 1:
            raise ConfigError(
                "batch_size must be >= 1, got %s" % self.batch_size
            )
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigError(
                "learning_rate must be > 0 and weight_decay >= 0, got %s and %s"
                % (self.learning_rate, self.weight_decay)
            )
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(
                "Adam betas must lie in [0, 1), got %s and %s"
                % (self.beta1, self.beta2)
            )
        if self.val_every < 0 or self.patience < 0 or self.n_splits < 1:
            raise ConfigError(
                "val_every and patience must be >= 0 and n_splits >= 1"
            )


Shape = tuple[int, int, int]


@dataclass(frozen=True)
class ShapePlan:
    """exact per-sample (channels, height, width) of every intermediate
    tensor for one `ModelConfig`."""

    C1: Shape
    C2: Shape
    C3: Shape
    C4: Shape
    C5: Shape
    T1: Shape
    T2: Shape
    T3: Shape
    T4: Shape
    d0: Shape
    d1: Shape
    d2: Shape
    d3: Shape
    d4: Shape
    K_shape: Shape
    K_fusion_shape: Shape
    A_shape: Shape
    windows: tuple[int, int, int, int] = field(default=(1, 1, 1, 1))

    def __getitem__(self, tag: str) -> Shape:
        if tag in ("K", "K_fusion", "A"):
            tag = tag + "_shape"
        if tag == "F":
            tag = "K_fusion_shape"
        try:
            return getattr(self, tag)
        except AttributeError:
            raise KeyError("ShapePlan has no stage named %s" % tag)

    @property
    def fusion_tokens(self) -> int:
        """N_t, number of tokens on the fusion grid"""
        _, height, width = self.K_fusion_shape
        return height * width


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """checks every invariant of `cfg`, returning it unchanged.

    Parameters
    ----------
    cfg : ModelConfig
        configuration to validate

    Returns
    -------
    ModelConfig
        `cfg` itself

    Raises
    ------
    ConfigError
        input side not a positive multiple of 32, width not a positive
        multiple of 4, unknown enum values, negative loss weights, non
        positive epsilon, fixation threshold outside (0, 1], or a bad
        transformer depth/window override.
    """
    side, width = cfg.input_side, cfg.base_width
    if not isinstance(side, int) or side < 32 or side % 32:
        raise ConfigError(
            "input_side must be a positive multiple of 32, got %s" % side
        )
    if not isinstance(width, int) or width < 4 or width % 4:
        raise ConfigError(
            "base_width must be a positive multiple of 4, got %s" % width
        )
    if cfg.feedback_node not in FEEDBACK_NODES:
        raise ConfigError(
            "feedback_node must be one of %s, got %s"
            % (FEEDBACK_NODES, cfg.feedback_node)
        )
    if cfg.fusion_mode not in FUSION_MODES:
        raise ConfigError(
            "fusion_mode must be one of %s, got %s"
            % (FUSION_MODES, cfg.fusion_mode)
        )
    if cfg.encoder_mode not in ENCODER_MODES:
        raise ConfigError(
            "encoder_mode must be one of %s, got %s"
            % (ENCODER_MODES, cfg.encoder_mode)
        )
    for name in ("mu", "eta", "xi"):
        if getattr(cfg, name) < 0:
            raise ConfigError(
                "loss weight %s must be >= 0, got %s"
                % (name, getattr(cfg, name))
            )
    if not cfg.epsilon_kl > 0:
        raise ConfigError("epsilon_kl must be > 0, got %s" % cfg.epsilon_kl)
    if not 0 < cfg.fixation_threshold <= 1:
        raise ConfigError(
            "fixation_threshold must lie in (0, 1], got %s"
            % cfg.fixation_threshold
        )
    if len(cfg.trans_depths) != 4 or any(d < 1 for d in cfg.trans_depths):
        raise ConfigError(
            "trans_depths needs four positive stage depths, got %s"
            % (cfg.trans_depths,)
        )
    if cfg.window_size is not None and cfg.window_size < 1:
        raise ConfigError(
            "window_size must be a positive integer, got %s" % cfg.window_size
        )
    return cfg


def window_size_for(cfg: ModelConfig) -> int:
    """window side of the transformer pathway. An explicit override wins;
    otherwise the last stage side S/32 is used up to the default of 7, and
    for larger inputs the biggest divisor of S/32 not above 7, so the window
    divides every stage side. At input_side 32 this gives 1, so every token
    attends only to itself and the transformer stages act per position."""
    if cfg.window_size is not None:
        return cfg.window_size
    last_side = cfg.input_side // 32
    if last_side <= DEFAULT_WINDOW:
        return last_side
    return max(
        d for d in range(1, DEFAULT_WINDOW + 1) if last_side % d == 0
    )


def shape_plan(cfg: ModelConfig) -> ShapePlan:
    """derives the exact shape of every intermediate tensor from `cfg`.
    Pure: equal configs give equal plans.

    Parameters
    ----------
    cfg : ModelConfig
        a configuration, validated here

    Returns
    -------
    ShapePlan
        CNN stages C1..C5, transformer stages T1..T4, decoder stages d0..d4,
        knowledge, fusion grid and output shapes.
    """
    validate_config(cfg)
    side, width = cfg.input_side, cfg.base_width
    cnn = {
        "C%d" % i: (width * 2 ** max(0, i - 2), side // 2**i, side // 2**i)
        for i in range(1, 6)
    }
    trans = {
        "T%d" % i: (
            width * 2 ** (i - 1),
            side // 2 ** (i + 1),
            side // 2 ** (i + 1),
        )
        for i in range(1, 5)
    }
    # decoder halves channels from 4w while doubling resolution from S/16
    decoder = {
        "d%d" % j: (
            4 * width // 2**j,
            side // 2 ** (4 - j),
            side // 2 ** (4 - j),
        )
        for j in range(5)
    }
    window = window_size_for(cfg)
    windows = tuple(min(window, trans["T%d" % i][1]) for i in range(1, 5))
    return ShapePlan(
        **cnn,
        **trans,
        **decoder,
        K_shape=decoder[cfg.feedback_node],
        K_fusion_shape=(4 * width, side // 16, side // 16),
        A_shape=(1, side, side),
        windows=windows,
    )


def check_shape(tensor: torch.Tensor, expected: Shape, tag: str):
    """raises ShapeError unless `tensor` is batched with per-sample shape
    `expected`.

    Parameters
    ----------
    tensor : torch.Tensor
        batched tensor, (batch, channels, height, width)
    expected : tuple[int, int, int]
        per-sample shape from the ShapePlan
    tag : str
        name of the stage, used in the error message
    """
    if tensor.dim() != 4 or tuple(tensor.shape[1:]) != tuple(expected):
        raise ShapeError(
            "%s expected shape (batch, %s) but got %s"
            % (tag, ", ".join(str(s) for s in expected), tuple(tensor.shape))
        )

