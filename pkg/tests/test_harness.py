import dataclasses
import json
import os

import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from fblnet import (
    BEST_CKPT_NAME,
    CHECKPOINT_DIR_NAME,
    DIAGNOSTICS_NAME,
    LAST_CKPT_NAME,
    LOSS_PLOT_NAME,
    LOSS_TRACE_NAME,
    VAL_HISTORY_NAME,
)
from fblnet.checkpoint import TrainState, load_checkpoint, save_checkpoint
from fblnet.core import ModelConfig, TrainConfig
from fblnet.data import DatasetSpec, collate, load_frame, synth_generate
from fblnet.errors import ConfigError, EvalModeError, NanLossError
from fblnet.harness import (
    GOLDEN_TRACE_PATH,
    REPORT_COLUMNS,
    SUMMARY_ID,
    evaluate,
    evaluate_baseline,
    evaluate_model,
    evaluate_predictions,
    parse_grid,
    predict,
    record_golden_trace,
    report_summary,
    run_ablation,
    tiny_loss_trace,
    tiny_run_configs,
    train,
    train_step,
)
from fblnet.metrics import LossWeights
from fblnet.model import FBLNet, build_optimizer


def _state(cfg, train_cfg=None):
    train_cfg = train_cfg or TrainConfig()
    model = FBLNet(cfg)
    return TrainState(model, build_optimizer(model, train_cfg), train_cfg)


def test_knowledge_changes_every_step(tiny_cfg, tiny_ds):
    state = _state(tiny_cfg)
    batch = collate(tiny_ds.samples[:4])
    state, _ = train_step(state, batch, LossWeights())
    K_1 = state.model.knowledge.K.clone()
    state, losses = train_step(state, batch, LossWeights())
    K_2 = state.model.knowledge.K.clone()
    assert torch.linalg.norm(K_1 - K_2) > 0
    assert set(losses) == {"loss", "kldiv", "nss", "cc"}
    assert int(state.model.knowledge.iteration) == state.step == 2


def test_add_mode_leaves_knowledge(tiny_cfg, tiny_ds):
    state = _state(dataclasses.replace(tiny_cfg, fusion_mode="add"))
    batch = collate(tiny_ds.samples[:4])
    for _ in range(2):
        state, _ = train_step(state, batch, LossWeights())
    assert torch.all(state.model.knowledge.K == 1.0)
    assert int(state.model.knowledge.iteration) == 0
    assert state.step == 2


def test_train_step_needs_training_mode(tiny_cfg, tiny_ds):
    state = _state(tiny_cfg)
    state.model.eval()
    with pytest.raises(EvalModeError):
        train_step(state, collate(tiny_ds.samples[:4]), LossWeights())


def test_non_finite_loss_dumps_diagnostics(tiny_cfg, tiny_ds, tmp_path):
    state = _state(tiny_cfg)
    with torch.no_grad():
        state.model.decoder.head.bias.fill_(float("nan"))
    before = state.model.encoder.cnn.stem[0].weight.clone()
    with pytest.raises(NanLossError):
        train_step(
            state,
            collate(tiny_ds.samples[:4]),
            LossWeights(),
            run_dir=str(tmp_path),
        )
    with open(tmp_path / DIAGNOSTICS_NAME) as f:
        diagnostics = json.load(f)
    assert diagnostics["step"] == 0
    assert diagnostics["finite_outputs"]["A"] is False
    assert diagnostics["knowledge"]["iteration"] == 0
    assert state.step == 0
    assert torch.all(state.model.knowledge.K == 1.0)
    assert torch.equal(state.model.encoder.cnn.stem[0].weight, before)


def test_train_writes_run_outputs(tiny_cfg, tiny_train_cfg, tiny_ds, tmp_path):
    run_dir = str(tmp_path / "run")
    state = train(tiny_cfg, tiny_train_cfg, tiny_ds, run_dir=run_dir)
    assert state.step == 2
    assert int(state.model.knowledge.iteration) == 2
    for name in (LAST_CKPT_NAME, BEST_CKPT_NAME):
        assert os.path.isdir(os.path.join(run_dir, CHECKPOINT_DIR_NAME, name))
    trace = pd.read_csv(os.path.join(run_dir, LOSS_TRACE_NAME))
    assert list(trace["step"]) == [1, 2]
    assert np.isfinite(trace["loss"]).all()
    assert os.path.exists(os.path.join(run_dir, VAL_HISTORY_NAME))
    assert os.path.exists(os.path.join(run_dir, LOSS_PLOT_NAME))


def test_train_folds_a_single_trailing_sample(tiny_cfg):
    ds = synth_generate(DatasetSpec(input_side=32, n_samples=5))
    train_cfg = TrainConfig(n_steps=3, batch_size=4, val_every=0)
    state = train(tiny_cfg, train_cfg, ds)
    assert state.step == 3
    assert all(np.isfinite(row["loss"]) for row in state.trace)


def test_train_rejects_single_sample_batches_at_tiny_size(tiny_cfg, tiny_ds):
    with pytest.raises(ConfigError, match="two samples"):
        train(tiny_cfg, TrainConfig(n_steps=1, batch_size=1), tiny_ds)


def test_zero_steps_saves_initial_knowledge(tiny_cfg, tmp_path):
    run_dir = str(tmp_path / "run")
    ds = synth_generate(DatasetSpec(input_side=32, n_samples=4))
    train(tiny_cfg, TrainConfig(n_steps=0, val_every=0), ds, run_dir=run_dir)
    state = load_checkpoint(
        os.path.join(run_dir, CHECKPOINT_DIR_NAME, LAST_CKPT_NAME)
    )
    assert state.step == 0
    assert int(state.model.knowledge.iteration) == 0
    assert torch.all(state.model.knowledge.K == 1.0)


def test_validation_keeps_the_best_checkpoint(
    tiny_cfg, tiny_ds, tiny_val_ds, tmp_path
):
    run_dir = str(tmp_path / "run")
    train_cfg = TrainConfig(n_steps=2, batch_size=4, val_every=1, n_splits=3)
    state = train(tiny_cfg, train_cfg, tiny_ds, tiny_val_ds, run_dir=run_dir)
    history = pd.read_csv(os.path.join(run_dir, VAL_HISTORY_NAME))
    assert list(history["step"]) == [1, 2]
    assert state.metrics["best_CC"] == pytest.approx(history["CC"].max())
    best = load_checkpoint(
        os.path.join(run_dir, CHECKPOINT_DIR_NAME, BEST_CKPT_NAME)
    )
    assert best.step == int(history.loc[history["CC"].idxmax(), "step"])


def test_resume_continues_the_run(tiny_cfg, tiny_ds, tmp_path):
    full = train(
        tiny_cfg, TrainConfig(n_steps=4, batch_size=4, val_every=0), tiny_ds
    )
    run_dir = str(tmp_path / "run")
    train(
        tiny_cfg,
        TrainConfig(n_steps=2, batch_size=4, val_every=0),
        tiny_ds,
        run_dir=run_dir,
    )
    resumed = train(
        tiny_cfg,
        TrainConfig(n_steps=4, batch_size=4, val_every=0),
        tiny_ds,
        run_dir=run_dir,
        resume=os.path.join(run_dir, CHECKPOINT_DIR_NAME, LAST_CKPT_NAME),
    )
    assert resumed.step == 4
    assert int(resumed.model.knowledge.iteration) == 4
    assert [row["step"] for row in resumed.trace] == [1, 2, 3, 4]
    np.testing.assert_allclose(
        [row["loss"] for row in resumed.trace],
        [row["loss"] for row in full.trace],
        rtol=1e-12,
    )
    torch.testing.assert_close(
        resumed.model.knowledge.K, full.model.knowledge.K, atol=0, rtol=0
    )


def test_evaluation_is_pure(tiny_cfg, tiny_val_ds):
    state = _state(tiny_cfg)
    K_before = state.model.knowledge.K.clone()
    first = evaluate(state, tiny_val_ds, n_splits=3)
    second = evaluate(state, tiny_val_ds, n_splits=3)
    pd.testing.assert_frame_equal(first, second)
    assert torch.equal(state.model.knowledge.K, K_before)
    assert int(state.model.knowledge.iteration) == 0
    assert state.model.training


def test_report_layout(tiny_cfg, tiny_val_ds, tmp_path):
    state = _state(tiny_cfg)
    path = save_checkpoint(state, str(tmp_path / "ckpt"))
    report = evaluate(path, tiny_val_ds, n_splits=3)
    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == len(tiny_val_ds) + 1
    assert report["frame_id"].iloc[-1] == SUMMARY_ID
    summary = report_summary(report)
    assert summary["CC"] == pytest.approx(report["CC"].iloc[:-1].mean())
    assert 0 <= summary["AUC_J"] <= 1


def test_perfect_prediction_report(tiny_val_ds):
    report = evaluate_predictions(
        [s.gt_map for s in tiny_val_ds.samples], tiny_val_ds, n_splits=3
    )
    summary = report_summary(report)
    assert summary["CC"] == pytest.approx(1.0)
    assert summary["SIM"] == pytest.approx(1.0)
    assert abs(summary["Kldiv"]) < 1e-5


def test_baseline_report(tiny_val_ds):
    summary = report_summary(evaluate_baseline(tiny_val_ds, n_splits=3))
    assert -1 <= summary["CC"] <= 1


def test_parse_grid():
    assert parse_grid("fusion") == [
        ("fusion_mode", ("cat", "add", "no_fbl", "fbl"))
    ]
    assert parse_grid("node; encoder_mode=cnn,both") == [
        ("feedback_node", ("d0", "d1", "d2", "d3", "d4")),
        ("encoder_mode", ("cnn", "both")),
    ]
    bad_grids = ("", "depth", "window_size=3", "fusion_mode=sum", "fusion_mode=")
    for bad in bad_grids:
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_ablation_table(tiny_cfg, tiny_ds, tiny_val_ds, tmp_path):
    train_cfg = TrainConfig(n_steps=1, batch_size=4, val_every=0, n_splits=3)
    table = run_ablation(
        tiny_cfg,
        train_cfg,
        "fusion_mode=add,fbl",
        tiny_ds,
        {"synthetic": tiny_val_ds},
        str(tmp_path / "ablation"),
    )
    assert list(table.index) == ["Add.", "w/ FBL"]
    assert list(table.columns) == [
        "synthetic SIM",
        "synthetic CC",
        "synthetic NSS",
        "avg",
    ]
    row = table.loc["w/ FBL"]
    metrics = [row["synthetic %s" % m] for m in ("SIM", "CC", "NSS")]
    assert row["avg"] == pytest.approx(np.mean(metrics))
    saved = pd.read_csv(tmp_path / "ablation" / "ablation.csv", index_col=0)
    assert list(saved.index) == ["Add.", "w/ FBL"]


def test_ablation_feedback_node_rows(tiny_cfg, tiny_ds, tiny_val_ds, tmp_path):
    train_cfg = TrainConfig(n_steps=1, batch_size=4, val_every=0, n_splits=3)
    table = run_ablation(
        tiny_cfg,
        train_cfg,
        "node",
        tiny_ds,
        {"synthetic": tiny_val_ds},
        str(tmp_path / "node"),
    )
    assert list(table.index) == ["B = d0", "B = d1", "B = d2", "B = d3", "B = d4"]
    assert np.isfinite(table.to_numpy()).all()


def test_ablation_encoder_rows(tiny_cfg, tiny_ds, tiny_val_ds, tmp_path):
    train_cfg = TrainConfig(n_steps=1, batch_size=4, val_every=0, n_splits=3)
    table = run_ablation(
        tiny_cfg,
        train_cfg,
        "encoder",
        tiny_ds,
        {"synthetic": tiny_val_ds},
        str(tmp_path / "encoder"),
    )
    assert list(table.index) == ["CNN", "Trans.", "CNN + Trans."]
    assert list(table.columns)[-1] == "avg"


def test_tiny_run_is_deterministic():
    assert tiny_loss_trace(3) == tiny_loss_trace(3)


def test_tiny_run_matches_golden_trace(capsys):
    if not os.path.exists(GOLDEN_TRACE_PATH):
        # first run on a fresh checkout writes the file to be committed
        record_golden_trace()
        assert "recorded golden trace" in capsys.readouterr().out
    with open(GOLDEN_TRACE_PATH) as f:
        golden = json.load(f)
    model_cfg, _, _ = tiny_run_configs()
    assert golden["model_config"] == json.loads(
        json.dumps(dataclasses.asdict(model_cfg))
    )
    assert golden["n_steps"] == len(golden["losses"]) == 3
    np.testing.assert_allclose(
        tiny_loss_trace(golden["n_steps"]), golden["losses"], atol=1e-5
    )


def _image(path, size=(48, 40)):
    rng = np.random.default_rng(3)
    pixels = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(path)
    return str(path)


def test_predict_writes_a_heatmap(tiny_cfg, tmp_path):
    state = _state(tiny_cfg)
    image_path = _image(tmp_path / "frame.png")
    first = predict(state, image_path, str(tmp_path / "a.png"))
    second = predict(
        state,
        image_path,
        str(tmp_path / "b.png"),
        figure=str(tmp_path / "f.png"),
    )
    with Image.open(first) as a, Image.open(second) as b:
        heat_a, heat_b = np.asarray(a), np.asarray(b)
    assert heat_a.shape == (32, 32)
    assert heat_a.dtype == np.uint8
    assert np.array_equal(heat_a, heat_b)
    assert os.path.exists(tmp_path / "f.png")
    assert state.model.training

    state.model.eval()
    with torch.no_grad():
        A, _ = state.model(load_frame(image_path, 32).unsqueeze(0))
    expected = np.round(A[0, 0].numpy() * 255)
    assert np.abs(heat_a.astype(np.float64) - expected).max() <= 1


def test_predict_native_size(tiny_cfg, tmp_path):
    state = _state(tiny_cfg)
    image_path = _image(tmp_path / "frame.png")
    out = predict(state, image_path, str(tmp_path / "a.png"), native_size=True)
    with Image.open(out) as heat:
        assert heat.size == (48, 40)


@pytest.mark.slow
def test_synthetic_run_beats_the_center_baseline(tmp_path):
    model_cfg = ModelConfig(input_side=64, base_width=16, seed=0)
    train_cfg = TrainConfig(n_steps=2000, batch_size=8, val_every=500)
    train_ds = synth_generate(DatasetSpec(input_side=64, n_samples=500))
    val_ds = synth_generate(
        DatasetSpec(input_side=64, split="val", n_val_samples=100)
    )
    state = train(
        model_cfg, train_cfg, train_ds, val_ds, run_dir=str(tmp_path / "run")
    )
    model_summary = report_summary(evaluate_model(state.model, val_ds))
    baseline_summary = report_summary(evaluate_baseline(val_ds))
    assert model_summary["Kldiv"] < baseline_summary["Kldiv"]
    assert model_summary["CC"] - baseline_summary["CC"] >= 0.05
