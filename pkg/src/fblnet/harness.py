"""Training, evaluation, prediction and ablation runs.

One training step runs the forward pass on the knowledge of the previous
step, backpropagates the loss, steps Adam and only then feeds the detached
decoder feature back into the knowledge, so the step counter and the
knowledge iteration counter advance together.
"""

import dataclasses
import itertools
import json
import math
import os

import numpy as np
import pandas as pd
import torch
from PIL import Image
from tqdm import tqdm

from . import (
    BEST_CKPT_NAME,
    CHECKPOINT_DIR_NAME,
    DIAGNOSTICS_NAME,
    LAST_CKPT_NAME,
    LOSS_PLOT_NAME,
    LOSS_TRACE_NAME,
    PACKAGE_PATH,
    VAL_HISTORY_NAME,
)
from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .core import (
    ENCODER_MODES,
    FEEDBACK_NODES,
    ModelConfig,
    TrainConfig,
    validate_config,
)
from .data import (
    DatasetSpec,
    batch_bounds,
    batch_iter,
    center_bias_map,
    load_frame,
    synth_generate,
)
from .errors import (
    ArtifactIOError,
    ConfigError,
    EmptyDatasetError,
    EvalModeError,
    NanLossError,
)
from .metrics import (
    LossWeights,
    auc_borji,
    auc_judd,
    batch_loss,
    cc,
    kldiv,
    nss,
    normalize_dist,
    sim,
)
from .model import FBLNet, build_optimizer
from .utils import bcolors, create_run_framework, seed_everything, warn
from .visualize import plot_loss_trace, plot_prediction

REPORT_COLUMNS = ["frame_id", "AUC_J", "AUC_B", "SIM", "CC", "Kldiv", "NSS"]
METRIC_COLUMNS = REPORT_COLUMNS[1:]
SUMMARY_ID = "mean"
TRACE_COLUMNS = ["step", "loss", "kldiv", "nss", "cc"]
GOLDEN_TRACE_PATH = os.path.join(
    PACKAGE_PATH, "..", "..", "tests", "golden", "loss_trace_tiny.json"
)
# ablation axes in table row order
ABLATION_PRESETS = {
    "fusion": ("fusion_mode", ("cat", "add", "no_fbl", "fbl")),
    "node": ("feedback_node", FEEDBACK_NODES),
    "encoder": ("encoder_mode", ("cnn", "trans", "both")),
}
ROW_LABELS = {
    ("fusion_mode", "cat"): "Cat.",
    ("fusion_mode", "add"): "Add.",
    ("fusion_mode", "no_fbl"): "w/o FBL",
    ("fusion_mode", "fbl"): "w/ FBL",
    ("encoder_mode", "cnn"): "CNN",
    ("encoder_mode", "trans"): "Trans.",
    ("encoder_mode", "both"): "CNN + Trans.",
    **{("feedback_node", node): "B = %s" % node for node in FEEDBACK_NODES},
}
ABLATION_METRICS = ("SIM", "CC", "NSS")


# evaluation


def score_frame(
    P: np.ndarray,
    Q: np.ndarray,
    fix,
    epsilon: float = 1e-7,
    n_splits: int = 100,
    rng_seed: int = 0,
) -> dict[str, float]:
    """the six report metrics of one frame.

    Parameters
    ----------
    P : np.ndarray
        prediction, H x W
    Q : np.ndarray
        ground truth map, H x W, max-normalized
    fix : FixationSet
        fixations of the frame
    epsilon : float, optional
        kldiv regularizer, by default 1e-7
    n_splits : int, optional
        AUC-Borji splits, by default 100
    rng_seed : int, optional
        AUC-Borji sampling seed, by default 0

    Returns
    -------
    dict[str, float]
        keyed by METRIC_COLUMNS
    """
    P_dist, Q_dist = normalize_dist(P), normalize_dist(Q)
    return {
        "AUC_J": auc_judd(P, fix),
        "AUC_B": auc_borji(P, fix, n_splits, rng_seed),
        "SIM": sim(P_dist, Q_dist),
        "CC": cc(P, Q),
        "Kldiv": kldiv(P_dist, Q_dist, epsilon),
        "NSS": nss(P, fix),
    }


def summarize(rows: list[dict]) -> pd.DataFrame:
    """per-frame rows followed by a row of their means"""
    report = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    means = {"frame_id": SUMMARY_ID, **report[METRIC_COLUMNS].mean().to_dict()}
    return pd.concat([report, pd.DataFrame([means])], ignore_index=True)


def report_summary(report: pd.DataFrame) -> dict[str, float]:
    row = report.loc[report["frame_id"] == SUMMARY_ID, METRIC_COLUMNS]
    return {k: float(v) for k, v in row.iloc[0].items()}


def evaluate_predictions(
    predictions,
    ds,
    epsilon: float = 1e-7,
    n_splits: int = 100,
    rng_seed: int = 0,
) -> pd.DataFrame:
    """scores a sequence of prediction maps, one per sample of `ds` in
    dataset order.

    Raises
    ------
    EmptyDatasetError
        if `ds` is empty
    """
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    rows = []
    for i, P in enumerate(
        tqdm(predictions, total=len(ds), desc="scoring", leave=False)
    ):
        sample = ds[i]
        rows.append(
            {
                "frame_id": sample.id,
                **score_frame(
                    np.asarray(P, dtype=np.float64),
                    sample.gt_map,
                    sample.fixations,
                    epsilon,
                    n_splits,
                    rng_seed,
                ),
            }
        )
    if len(rows) != len(ds):
        raise ValueError(
            "got %d predictions for %d samples" % (len(rows), len(ds))
        )
    return summarize(rows)


def predict_maps(model: FBLNet, ds, batch_size: int = 8, device="cpu"):
    """yields the float64 prediction of every sample in dataset order, with
    the model in evaluation mode"""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for batch in batch_iter(ds, batch_size, shuffle=False):
                A, _ = model(batch.images.to(device))
                for heat in A[:, 0].cpu().double().numpy():
                    yield heat
    finally:
        model.train(was_training)


def evaluate_model(
    model: FBLNet,
    ds,
    n_splits: int = 100,
    batch_size: int = 8,
    device: str = "cpu",
) -> pd.DataFrame:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    return evaluate_predictions(
        predict_maps(model, ds, batch_size, device),
        ds,
        epsilon=model.cfg.epsilon_kl,
        n_splits=n_splits,
        rng_seed=model.cfg.seed,
    )


def evaluate(
    ckpt,
    ds,
    n_splits: int = 100,
    batch_size: int = 8,
    device: str = "cpu",
) -> pd.DataFrame:
    """evaluates a checkpoint (path or TrainState) on `ds`. The knowledge is
    read, never updated.

    Returns
    -------
    pd.DataFrame
        one row per frame with REPORT_COLUMNS, plus a final "mean" row
    """
    state = load_checkpoint(ckpt, device) if isinstance(ckpt, str) else ckpt
    return evaluate_model(state.model, ds, n_splits, batch_size, device)


def evaluate_baseline(
    ds, sigma_frac: float = 0.2, epsilon: float = 1e-7, n_splits: int = 100
) -> pd.DataFrame:
    """report of the fixed center-Gaussian prediction on every frame"""
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    side = ds[0].gt_map.shape[0]
    center = center_bias_map(side, sigma_frac)
    return evaluate_predictions(
        (center for _ in range(len(ds))), ds, epsilon, n_splits
    )


def write_report(report: pd.DataFrame, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    report.to_csv(path, index=False)
    print(f"{bcolors.OKGREEN}wrote report to {path}{bcolors.ENDC}")
    return path


# training


def dump_diagnostics(
    run_dir: str | None,
    state: TrainState,
    losses: dict,
    A: torch.Tensor,
    decoded: dict[str, torch.Tensor],
) -> dict:
    """collects the state of a failing step, writing it to the run directory
    when there is one"""
    K = state.model.knowledge.K
    diagnostics = {
        "step": state.step,
        "losses": {k: repr(float(v)) for k, v in losses.items()},
        "knowledge": {
            "iteration": int(state.model.knowledge.iteration),
            "finite": bool(torch.isfinite(K).all()),
            "min": repr(float(K.min())),
            "max": repr(float(K.max())),
            "mean": repr(float(K.mean())),
        },
        "finite_outputs": {
            "A": bool(torch.isfinite(A).all()),
            **{k: bool(torch.isfinite(v).all()) for k, v in decoded.items()},
        },
    }
    if run_dir is not None:
        with open(os.path.join(run_dir, DIAGNOSTICS_NAME), "w") as f:
            json.dump(diagnostics, f, indent=2, sort_keys=True)
    return diagnostics


def train_step(
    state: TrainState,
    batch,
    weights: LossWeights,
    epsilon: float = 1e-7,
    run_dir: str | None = None,
) -> tuple[TrainState, dict[str, float]]:
    """one optimizer step followed by one knowledge update.

    Parameters
    ----------
    state : TrainState
        model in training mode and its optimizer, updated in place
    batch : Batch
        images, maps and fixation masks on the model's device
    weights : LossWeights
        loss term factors
    epsilon : float, optional
        kldiv regularizer, by default 1e-7
    run_dir : str, optional
        where a diagnostics dump is written on a non finite loss

    Returns
    -------
    tuple[TrainState, dict[str, float]]
        the advanced state and the step's loss with its kldiv / nss / cc
        components

    Raises
    ------
    EvalModeError
        if the model is in evaluation mode
    NanLossError
        if the loss is not finite; parameters and knowledge are untouched
    """
    model, optimizer = state.model, state.optimizer
    if not model.training:
        raise EvalModeError("train_step needs the model in training mode")
    A, decoded = model(batch.images)
    total, parts = batch_loss(A, batch.maps, batch.masks, weights, epsilon)
    losses = {"loss": total.item(), **parts}
    if not math.isfinite(losses["loss"]):
        dump_diagnostics(run_dir, state, losses, A, decoded)
        print(
            f"{bcolors.FAIL}non finite loss at step {state.step}{bcolors.ENDC}"
        )
        raise NanLossError(
            "loss became %s at step %d, see %s"
            % (losses["loss"], state.step, DIAGNOSTICS_NAME)
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    model.feedback(decoded)
    state.step += 1
    return state, losses


def _read_table(path: str, columns: list[str], up_to: int) -> list[dict]:
    if not os.path.exists(path):
        return []
    table = pd.read_csv(path)
    return table.loc[table["step"] <= up_to, columns].to_dict("records")


def _write_tables(run_dir: str, trace: list[dict], val_rows: list[dict]):
    trace_df = pd.DataFrame(trace, columns=TRACE_COLUMNS)
    trace_df.to_csv(os.path.join(run_dir, LOSS_TRACE_NAME), index=False)
    val_df = pd.DataFrame(val_rows, columns=["step"] + METRIC_COLUMNS)
    val_df.to_csv(os.path.join(run_dir, VAL_HISTORY_NAME), index=False)
    if len(trace_df):
        plot_loss_trace(trace_df, os.path.join(run_dir, LOSS_PLOT_NAME), val_df)


def _checkpoint_path(run_dir: str, name: str) -> str:
    return os.path.join(run_dir, CHECKPOINT_DIR_NAME, name)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_ds,
    val_ds=None,
    run_dir: str | None = None,
    resume: str | None = None,
) -> TrainState:
    """trains FBLNet for `train_cfg.n_steps` steps in total.

    Parameters
    ----------
    model_cfg : ModelConfig
        model configuration; ignored when resuming, the checkpoint's wins
    train_cfg : TrainConfig
        training knobs
    train_ds : dataset
        training samples
    val_ds : dataset, optional
        validated every `train_cfg.val_every` steps, best checkpoint kept by
        mean CC
    run_dir : str, optional
        receives checkpoints/best, checkpoints/last, the loss trace, the
        validation history and the loss figure
    resume : str, optional
        checkpoint directory to continue from; step, knowledge, optimizer
        moments, rng and data order continue where they stopped

    Returns
    -------
    TrainState
        state after the last step, its `trace` holding the loss rows
    """
    if resume is not None:
        state = load_checkpoint(resume, train_cfg.device)
        model_cfg = state.model.cfg
        seed_everything(model_cfg.seed)
        if state.rng_state is not None:
            torch.set_rng_state(state.rng_state)
        state.rng_state = None
        state.train_cfg = train_cfg
        print(
            f"{bcolors.OKCYAN}resuming from {resume} at step {state.step}{bcolors.ENDC}"
        )
    else:
        validate_config(model_cfg)
        seed_everything(model_cfg.seed)
        model = FBLNet(model_cfg).to(train_cfg.device)
        state = TrainState(
            model=model,
            optimizer=build_optimizer(model, train_cfg),
            train_cfg=train_cfg,
        )
    if len(train_ds) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    trace, val_rows = [], []
    if run_dir is not None:
        create_run_framework(run_dir, [CHECKPOINT_DIR_NAME])
        if resume is not None:
            trace = _read_table(
                os.path.join(run_dir, LOSS_TRACE_NAME), TRACE_COLUMNS, state.step
            )
            val_rows = _read_table(
                os.path.join(run_dir, VAL_HISTORY_NAME),
                ["step"] + METRIC_COLUMNS,
                state.step,
            )
    weights = LossWeights.from_config(model_cfg)
    smallest = min(train_cfg.batch_size, len(train_ds))
    if state.model.plan.C5[1] == 1 and smallest < 2:
        raise ConfigError(
            "training at input_side %d needs at least two samples per batch, "
            "got batch_size %d over %d samples"
            % (model_cfg.input_side, train_cfg.batch_size, len(train_ds))
        )
    per_epoch = len(
        batch_bounds(len(train_ds), train_cfg.batch_size, merge_singleton=True)
    )
    epoch, offset = divmod(state.step, per_epoch)

    def epoch_batches(epoch, start=0):
        return batch_iter(
            train_ds,
            train_cfg.batch_size,
            seed=model_cfg.seed,
            shuffle=train_cfg.shuffle,
            epoch=epoch,
            start=start,
            merge_singleton=True,
        )

    batches = epoch_batches(epoch, offset)
    best_cc = state.metrics.get("best_CC", -math.inf)
    stale = 0
    validated = False
    state.model.train()
    progress = tqdm(
        range(state.step, train_cfg.n_steps), desc="training", leave=False
    )
    for _ in progress:
        batch = next(batches, None)
        if batch is None:
            epoch += 1
            batches = epoch_batches(epoch)
            batch = next(batches)
        state, losses = train_step(
            state,
            batch.to(train_cfg.device),
            weights,
            model_cfg.epsilon_kl,
            run_dir,
        )
        trace.append({"step": state.step, **losses})
        state.trace = trace
        progress.set_postfix(loss="%.4f" % losses["loss"])
        if (
            val_ds is not None
            and train_cfg.val_every
            and state.step % train_cfg.val_every == 0
        ):
            summary = report_summary(
                evaluate_model(
                    state.model,
                    val_ds,
                    train_cfg.n_splits,
                    train_cfg.batch_size,
                    train_cfg.device,
                )
            )
            val_rows.append({"step": state.step, **summary})
            validated = True
            if summary["CC"] > best_cc:
                best_cc, stale = summary["CC"], 0
                state.metrics = {**summary, "best_CC": best_cc}
                if run_dir is not None:
                    save_checkpoint(
                        state, _checkpoint_path(run_dir, BEST_CKPT_NAME)
                    )
            else:
                stale += 1
                state.metrics = {**summary, "best_CC": best_cc}
            if train_cfg.patience and stale >= train_cfg.patience:
                warn(
                    "stopping early at step %d, CC did not improve for %d "
                    "validations" % (state.step, stale)
                )
                break
    state.trace = trace
    if run_dir is not None:
        save_checkpoint(state, _checkpoint_path(run_dir, LAST_CKPT_NAME))
        if not validated and not os.path.exists(
            _checkpoint_path(run_dir, BEST_CKPT_NAME)
        ):
            save_checkpoint(state, _checkpoint_path(run_dir, BEST_CKPT_NAME))
        _write_tables(run_dir, trace, val_rows)
        print(
            f"{bcolors.OKGREEN}finished training at step {state.step}, outputs in {run_dir}{bcolors.ENDC}"
        )
    return state


# prediction


def predict(
    ckpt,
    image_path: str,
    out_path: str,
    native_size: bool = False,
    figure: str | None = None,
    device: str = "cpu",
) -> str:
    """writes the predicted attention map of one image as an 8 bit grayscale
    PNG, S x S or (with `native_size`) resized back to the source size.

    Raises
    ------
    ArtifactIOError
        if the image cannot be read or the output cannot be written
    """
    state = load_checkpoint(ckpt, device) if isinstance(ckpt, str) else ckpt
    model = state.model
    side = model.cfg.input_side
    try:
        image = load_frame(image_path, side)
        with Image.open(image_path) as source:
            source_size = source.size
    except OSError as e:
        raise ArtifactIOError(
            "unable to read image %s: %s" % (image_path, e)
        ) from e
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            A, _ = model(image.unsqueeze(0).to(device))
    finally:
        model.train(was_training)
    heat = A[0, 0].cpu().numpy()
    heatmap = Image.fromarray(
        np.round(np.clip(heat, 0, 1) * 255).astype(np.uint8), "L"
    )
    if native_size:
        heatmap = heatmap.resize(source_size, Image.BILINEAR)
    try:
        directory = os.path.dirname(out_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        heatmap.save(out_path)
        if figure is not None:
            plot_prediction(image.permute(1, 2, 0).numpy(), heat, figure)
    except OSError as e:
        raise ArtifactIOError(
            "unable to write prediction %s: %s" % (out_path, e)
        ) from e
    return out_path


# ablation


def parse_grid(spec: str) -> list[tuple[str, tuple[str, ...]]]:
    """parses an ablation grid: ";"-separated axes, each either a preset
    name (fusion, node, encoder) or `field=value,value,...` with field one
    of fusion_mode, feedback_node, encoder_mode.

    Raises
    ------
    ConfigError
        on unknown presets, fields or values
    """
    allowed = {
        "fusion_mode": ABLATION_PRESETS["fusion"][1],
        "feedback_node": FEEDBACK_NODES,
        "encoder_mode": ENCODER_MODES,
    }
    axes = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            if part not in ABLATION_PRESETS:
                raise ConfigError(
                    "unknown ablation preset %s, choose from %s"
                    % (part, sorted(ABLATION_PRESETS))
                )
            axes.append(ABLATION_PRESETS[part])
            continue
        field, values = (s.strip() for s in part.split("=", 1))
        values = tuple(v.strip() for v in values.split(",") if v.strip())
        if field not in allowed:
            raise ConfigError(
                "cannot ablate %s, choose from %s" % (field, sorted(allowed))
            )
        bad = [v for v in values if v not in allowed[field]]
        if bad or not values:
            raise ConfigError(
                "invalid values %s for %s, choose from %s"
                % (bad, field, allowed[field])
            )
        axes.append((field, values))
    if not axes:
        raise ConfigError("ablation grid %r names no axis" % spec)
    return axes


def run_ablation(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    grid,
    train_ds,
    eval_sets: dict,
    out_dir: str,
) -> pd.DataFrame:
    """trains and evaluates every cell of `grid` with the same seed, data
    order and step budget.

    Parameters
    ----------
    model_cfg : ModelConfig
        base configuration every cell overrides
    train_cfg : TrainConfig
        shared training budget
    grid : str | list
        grid spec for `parse_grid`, or its parsed form
    train_ds : dataset
        shared training data
    eval_sets : dict
        evaluation datasets by name
    out_dir : str
        receives one run directory per cell and ablation.csv

    Returns
    -------
    pd.DataFrame
        one row per cell labeled like the published ablation tables, with
        "<dataset> SIM/CC/NSS" columns and "avg", their mean
    """
    axes = parse_grid(grid) if isinstance(grid, str) else grid
    fields = [field for field, _ in axes]
    cells = list(itertools.product(*(values for _, values in axes)))
    create_run_framework(out_dir, [])
    rows = []
    for cell in tqdm(cells, desc="ablation"):
        overrides = dict(zip(fields, cell))
        cfg = dataclasses.replace(model_cfg, **overrides)
        label = " / ".join(ROW_LABELS[item] for item in overrides.items())
        cell_dir = os.path.join(
            out_dir, "_".join("%s-%s" % item for item in overrides.items())
        )
        state = train(cfg, train_cfg, train_ds, run_dir=cell_dir)
        row = {"setting": label}
        for name, ds in eval_sets.items():
            summary = report_summary(
                evaluate_model(
                    state.model,
                    ds,
                    train_cfg.n_splits,
                    train_cfg.batch_size,
                    train_cfg.device,
                )
            )
            for metric in ABLATION_METRICS:
                row["%s %s" % (name, metric)] = summary[metric]
        values = [v for k, v in row.items() if k != "setting"]
        row["avg"] = float(np.mean(values))
        rows.append(row)
    table = pd.DataFrame(rows).set_index("setting")
    table.to_csv(os.path.join(out_dir, "ablation.csv"))
    print(
        f"{bcolors.OKGREEN}wrote ablation table to {os.path.join(out_dir, 'ablation.csv')}{bcolors.ENDC}"
    )
    return table


# regression trace


def tiny_run_configs() -> tuple[ModelConfig, TrainConfig, DatasetSpec]:
    return (
        ModelConfig(input_side=32, base_width=8, seed=0),
        TrainConfig(n_steps=3, batch_size=4, val_every=0),
        DatasetSpec(input_side=32, n_samples=8, clip_length=4, seed=0),
    )


def tiny_loss_trace(n_steps: int = 3) -> list[float]:
    """loss of the first `n_steps` steps of the tiny seeded run"""
    model_cfg, train_cfg, spec = tiny_run_configs()
    train_cfg = dataclasses.replace(train_cfg, n_steps=n_steps)
    state = train(model_cfg, train_cfg, synth_generate(spec))
    return [row["loss"] for row in state.trace]


def record_golden_trace(path: str = GOLDEN_TRACE_PATH, n_steps: int = 3) -> str:
    """writes the tiny-run loss trace the regression test compares with"""
    model_cfg, train_cfg, spec = tiny_run_configs()
    record = {
        "model_config": dataclasses.asdict(model_cfg),
        "n_steps": n_steps,
        "losses": tiny_loss_trace(n_steps),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
    print(f"{bcolors.OKGREEN}recorded golden trace to {path}{bcolors.ENDC}")
    return path
