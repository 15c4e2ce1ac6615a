import os

# GLOBALS, DONT CHANGE UNLESS YOU KNOW WHAT YOU ARE DOING
# these are defined before the submodule imports below, which read them
# directory inside a run holding the checkpoints
CHECKPOINT_DIR_NAME = "checkpoints"
# checkpoint names inside CHECKPOINT_DIR_NAME
BEST_CKPT_NAME = "best"
LAST_CKPT_NAME = "last"
# per-step training loss and periodic validation tables of a run
LOSS_TRACE_NAME = "loss_trace.csv"
VAL_HISTORY_NAME = "val_history.csv"
LOSS_PLOT_NAME = "loss.png"
# written next to the traces when a step produces a non finite loss
DIAGNOSTICS_NAME = "diagnostics.json"
# path to this package on users machine
PACKAGE_PATH, _ = os.path.split(os.path.realpath(__file__))

# keep imports relative to avoid circular importing
from . import harness, metrics  # noqa: E402
from .core import ModelConfig, TrainConfig, shape_plan  # noqa: E402
from .data import DatasetSpec, load_dataset  # noqa: E402
from .model import FBLNet  # noqa: E402

# Defines all the different modules able to be imported
__all__ = [
    "harness",
    "metrics",
    "FBLNet",
    "ModelConfig",
    "TrainConfig",
    "DatasetSpec",
    "load_dataset",
    "shape_plan",
    "CHECKPOINT_DIR_NAME",
    "BEST_CKPT_NAME",
    "LAST_CKPT_NAME",
    "LOSS_TRACE_NAME",
    "VAL_HISTORY_NAME",
    "LOSS_PLOT_NAME",
    "DIAGNOSTICS_NAME",
    "PACKAGE_PATH",
]
