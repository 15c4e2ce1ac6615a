"""Static figures written during training and prediction."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402


def plot_loss_trace(
    trace: pd.DataFrame, out_path: str, val_history: pd.DataFrame | None = None
) -> str:
    """plots the training loss and its three components per step, with the
    validation CC on a second panel when available.

    Parameters
    ----------
    trace : pd.DataFrame
        columns step, loss, kldiv, nss, cc
    out_path : str
        png path to write
    val_history : pd.DataFrame, optional
        columns step and CC at least

    Returns
    -------
    str
        `out_path`
    """
    n_panels = 2 if val_history is not None and len(val_history) else 1
    fig, axes = plt.subplots(
        1, n_panels, figsize=(6 * n_panels, 4), squeeze=False
    )
    ax = axes[0, 0]
    for column in ("loss", "kldiv", "nss", "cc"):
        if column in trace:
            ax.plot(trace["step"], trace[column], label=column, linewidth=1)
    ax.set_xlabel("step")
    ax.set_title("training loss")
    ax.legend()
    if n_panels == 2:
        ax = axes[0, 1]
        ax.plot(val_history["step"], val_history["CC"], marker="o")
        ax.set_xlabel("step")
        ax.set_title("validation CC")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_prediction(
    image: np.ndarray,
    prediction: np.ndarray,
    out_path: str,
    ground_truth: np.ndarray | None = None,
) -> str:
    """image, prediction overlaid on the image and (optionally) the ground
    truth side by side. `image` is H x W x 3 in [0, 1]."""
    panels = [("frame", image, None), ("prediction", image, prediction)]
    if ground_truth is not None:
        panels.append(("ground truth", image, ground_truth))
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4))
    for ax, (title, base, heat) in zip(np.atleast_1d(axes), panels):
        ax.imshow(base)
        if heat is not None:
            ax.imshow(heat, cmap="jet", alpha=0.5, vmin=0, vmax=heat.max())
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return out_path
