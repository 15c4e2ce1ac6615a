import json
import os

import numpy as np
import pandas as pd
import pytest
import torch

from fblnet.checkpoint import (
    BLOB_NAME,
    INDEX_COLUMNS,
    INDEX_NAME,
    MANIFEST_NAME,
    RNG_KEY,
    TrainState,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from fblnet.data import collate
from fblnet.errors import ArtifactIOError, IntegrityError, VersionError
from fblnet.harness import evaluate, train_step
from fblnet.metrics import LossWeights
from fblnet.model import FBLNet, build_optimizer


def _trained_state(cfg, train_cfg, ds, steps=2):
    model = FBLNet(cfg)
    state = TrainState(
        model=model,
        optimizer=build_optimizer(model, train_cfg),
        train_cfg=train_cfg,
    )
    batch = collate(ds.samples[:4])
    for _ in range(steps):
        state, _ = train_step(state, batch, LossWeights())
    state.metrics = {"CC": 0.25}
    return state


def test_round_trip_is_bit_exact(tiny_cfg, tiny_train_cfg, tiny_ds, tmp_path):
    state = _trained_state(tiny_cfg, tiny_train_cfg, tiny_ds)
    rng_state = torch.get_rng_state()
    path = save_checkpoint(state, str(tmp_path / "ckpt"))
    loaded = load_checkpoint(path)
    assert loaded.step == 2
    assert loaded.metrics == {"CC": 0.25}
    assert loaded.model.cfg == tiny_cfg
    assert loaded.train_cfg == tiny_train_cfg
    assert loaded.model.training
    original = state.model.state_dict()
    restored = loaded.model.state_dict()
    assert set(original) == set(restored)
    for key, value in original.items():
        assert value.dtype == restored[key].dtype
        assert torch.equal(value, restored[key]), key
    assert int(loaded.model.knowledge.iteration) == 2
    assert not torch.all(loaded.model.knowledge.K == 1.0)
    assert torch.equal(loaded.rng_state, rng_state)


def test_save_load_save_is_byte_identical(
    tiny_cfg, tiny_train_cfg, tiny_ds, tmp_path
):
    state = _trained_state(tiny_cfg, tiny_train_cfg, tiny_ds)
    first = save_checkpoint(state, str(tmp_path / "first"))
    second = save_checkpoint(load_checkpoint(first), str(tmp_path / "second"))
    for name in (MANIFEST_NAME, INDEX_NAME, BLOB_NAME):
        with open(os.path.join(first, name), "rb") as f:
            expected = f.read()
        with open(os.path.join(second, name), "rb") as f:
            assert f.read() == expected, name


def test_reloaded_checkpoint_scores_the_same(
    tiny_cfg, tiny_train_cfg, tiny_ds, tiny_val_ds, tmp_path
):
    state = _trained_state(tiny_cfg, tiny_train_cfg, tiny_ds)
    before = evaluate(state, tiny_val_ds, n_splits=5)
    loaded = load_checkpoint(save_checkpoint(state, str(tmp_path / "ckpt")))
    after = evaluate(loaded, tiny_val_ds, n_splits=5)
    assert list(after["frame_id"]) == list(before["frame_id"])
    metrics = [c for c in before.columns if c != "frame_id"]
    np.testing.assert_allclose(
        after[metrics].to_numpy(float),
        before[metrics].to_numpy(float),
        atol=1e-6,
        rtol=0,
    )


def test_optimizer_moments_survive(
    tiny_cfg, tiny_train_cfg, tiny_ds, tmp_path
):
    state = _trained_state(tiny_cfg, tiny_train_cfg, tiny_ds)
    loaded = load_checkpoint(save_checkpoint(state, str(tmp_path / "ckpt")))
    params = dict(state.model.named_parameters())
    for name, param in loaded.model.named_parameters():
        saved = state.optimizer.state.get(params[name], {})
        restored = loaded.optimizer.state.get(param, {})
        assert set(saved) == set(restored), name
        for key in saved:
            assert torch.equal(
                torch.as_tensor(saved[key]).float(),
                torch.as_tensor(restored[key]).float(),
            )


def test_resumed_step_matches_uninterrupted(
    tiny_cfg, tiny_train_cfg, tiny_ds, tmp_path
):
    state = _trained_state(tiny_cfg, tiny_train_cfg, tiny_ds)
    loaded = load_checkpoint(save_checkpoint(state, str(tmp_path / "ckpt")))
    batch = collate(tiny_ds.samples[4:8])
    state, losses = train_step(state, batch, LossWeights())
    loaded, loaded_losses = train_step(loaded, batch, LossWeights())
    assert losses == loaded_losses
    assert loaded.step == state.step == 3
    for (name, a), (_, b) in zip(
        state.model.state_dict().items(), loaded.model.state_dict().items()
    ):
        assert torch.equal(a, b), name


def test_layout(tiny_cfg, tiny_train_cfg, tmp_path):
    model = FBLNet(tiny_cfg)
    state = TrainState(model, build_optimizer(model, tiny_train_cfg))
    path = save_checkpoint(state, str(tmp_path / "ckpt"))
    assert sorted(os.listdir(path)) == sorted(
        [MANIFEST_NAME, INDEX_NAME, BLOB_NAME]
    )
    manifest = read_manifest(path)
    assert manifest["step"] == 0
    assert manifest["model_config"]["input_side"] == 32
    with open(os.path.join(path, MANIFEST_NAME)) as f:
        text = f.read()
    assert list(json.loads(text)) == sorted(json.loads(text))
    index = pd.read_csv(os.path.join(path, INDEX_NAME))
    assert list(index.columns) == INDEX_COLUMNS
    assert "knowledge.K" in set(index["name"])
    assert RNG_KEY in set(index["name"])
    assert index["nbytes"].sum() == os.path.getsize(
        os.path.join(path, BLOB_NAME)
    )
    ends = (index["offset"] + index["nbytes"]).to_numpy()
    assert index["offset"].iloc[0] == 0
    assert (index["offset"].to_numpy()[1:] == ends[:-1]).all()
    k_row = index.loc[index["name"] == "knowledge.K"].iloc[0]
    assert k_row["dtype"] == "<f4"


def test_fresh_checkpoint_has_initial_knowledge(
    tiny_cfg, tiny_train_cfg, tmp_path
):
    model = FBLNet(tiny_cfg)
    state = TrainState(model, build_optimizer(model, tiny_train_cfg))
    loaded = load_checkpoint(save_checkpoint(state, str(tmp_path / "ckpt")))
    assert int(loaded.model.knowledge.iteration) == 0
    assert torch.all(loaded.model.knowledge.K == 1.0)


def _saved(tiny_cfg, tiny_train_cfg, tmp_path):
    model = FBLNet(tiny_cfg)
    state = TrainState(model, build_optimizer(model, tiny_train_cfg))
    return save_checkpoint(state, str(tmp_path / "ckpt"))


def test_corrupted_blob(tiny_cfg, tiny_train_cfg, tmp_path):
    path = _saved(tiny_cfg, tiny_train_cfg, tmp_path)
    blob_path = os.path.join(path, BLOB_NAME)
    with open(blob_path, "r+b") as f:
        f.seek(100)
        byte = f.read(1)
        f.seek(100)
        f.write(bytes([byte[0] ^ 0xFF]))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_truncated_blob(tiny_cfg, tiny_train_cfg, tmp_path):
    path = _saved(tiny_cfg, tiny_train_cfg, tmp_path)
    blob_path = os.path.join(path, BLOB_NAME)
    size = os.path.getsize(blob_path)
    with open(blob_path, "r+b") as f:
        f.truncate(size - 8)
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_version_mismatch(tiny_cfg, tiny_train_cfg, tmp_path):
    path = _saved(tiny_cfg, tiny_train_cfg, tmp_path)
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path) as f:
        manifest = json.load(f)
    manifest["format_version"] = 99
    with open(manifest_path, "w") as f:
        json.dump(manifest, f)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_index_schema_mismatch(tiny_cfg, tiny_train_cfg, tmp_path):
    path = _saved(tiny_cfg, tiny_train_cfg, tmp_path)
    index_path = os.path.join(path, INDEX_NAME)
    index = pd.read_csv(index_path).rename(columns={"nbytes": "size"})
    index.to_csv(index_path, index=False)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_integrity_error_is_a_version_error():
    assert issubclass(IntegrityError, VersionError)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_checkpoint(str(tmp_path / "nowhere"))
    with pytest.raises(OSError):
        load_checkpoint(str(tmp_path / "nowhere"))
