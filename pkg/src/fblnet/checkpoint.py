"""Checkpoint directories.

A checkpoint is a directory holding

- `manifest.json`: human readable, sorted keys; format version, the model
  and training configs, the step, a metric snapshot and the size and
  sha256 of the tensor blob
- `index.csv`: one row per tensor with its name, dtype, shape and byte
  offset / length inside the blob
- `tensors.bin`: every tensor's raw little-endian bytes, back to back

Tensors are the model state dict (including `knowledge.K` and
`knowledge.iteration`), the Adam moments keyed by parameter name, and the
torch rng state.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from .core import ModelConfig, TrainConfig
from .errors import ArtifactIOError, IntegrityError, VersionError
from .model import FBLNet, build_optimizer
from .utils import dataclass_from_dict

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
INDEX_NAME = "index.csv"
BLOB_NAME = "tensors.bin"
INDEX_COLUMNS = ["name", "dtype", "shape", "offset", "nbytes"]
OPTIM_PREFIX = "optim."
RNG_KEY = "rng.torch"
ADAM_KEYS = ("step", "exp_avg", "exp_avg_sq", "max_exp_avg_sq")
DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
TORCH_DTYPES = {str(np.dtype(v)): k for k, v in DTYPES.items()}


@dataclass
class TrainState:
    """everything a checkpoint captures: parameters and knowledge live in
    the model, Adam moments in the optimizer"""

    model: FBLNet
    optimizer: torch.optim.Optimizer
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0
    metrics: dict = field(default_factory=dict)
    rng_state: torch.Tensor | None = None
    # per-step loss rows of the current run, not persisted
    trace: list = field(default_factory=list)


def _optimizer_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {}
    opt_state = state.optimizer.state
    for name, param in state.model.named_parameters():
        for key, value in sorted(opt_state.get(param, {}).items()):
            if torch.is_tensor(value):
                tensors["%s%s.%s" % (OPTIM_PREFIX, key, name)] = value
            else:
                tensors["%s%s.%s" % (OPTIM_PREFIX, key, name)] = (
                    torch.tensor(value, dtype=torch.float32)
                )
    return tensors


def _to_bytes(name: str, tensor: torch.Tensor) -> tuple[str, bytes]:
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in DTYPES:
        raise ArtifactIOError(
            "tensor %s has unsupported dtype %s" % (name, tensor.dtype)
        )
    array = tensor.numpy().astype(DTYPES[tensor.dtype], copy=False)
    return array.dtype.str, array.tobytes()


def save_checkpoint(state: TrainState, path: str) -> str:
    """writes `state` into the checkpoint directory `path`.

    Parameters
    ----------
    state : TrainState
        model, optimizer, step and metric snapshot to persist
    path : str
        checkpoint directory, created if needed and overwritten

    Returns
    -------
    str
        `path`

    Raises
    ------
    ArtifactIOError
        if the directory or its files cannot be written
    """
    tensors = dict(state.model.state_dict())
    tensors.update(_optimizer_tensors(state))
    rng_state = (
        state.rng_state if state.rng_state is not None else torch.get_rng_state()
    )
    tensors[RNG_KEY] = rng_state
    rows, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        dtype, raw = _to_bytes(name, tensor)
        rows.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": "x".join(str(s) for s in tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(state.model.cfg),
        "train_config": dataclasses.asdict(state.train_cfg),
        "step": int(state.step),
        "metrics": {k: float(v) for k, v in state.metrics.items()},
        "tensors_nbytes": len(blob),
        "tensors_sha256": hashlib.sha256(blob).hexdigest(),
    }
    try:
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, MANIFEST_NAME), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        pd.DataFrame(rows, columns=INDEX_COLUMNS).to_csv(
            os.path.join(path, INDEX_NAME), index=False
        )
        with open(os.path.join(path, BLOB_NAME), "wb") as f:
            f.write(blob)
    except OSError as e:
        raise ArtifactIOError(
            "unable to write checkpoint to %s: %s" % (path, e)
        ) from e
    return path


def read_manifest(path: str) -> dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ArtifactIOError(
            "unable to read checkpoint manifest %s: %s" % (manifest_path, e)
        ) from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(
            "checkpoint %s has format version %s, expected %s"
            % (path, version, FORMAT_VERSION)
        )
    return manifest


def read_tensors(path: str, manifest: dict) -> dict[str, torch.Tensor]:
    """reads and verifies the tensor blob against the manifest and index.

    Raises
    ------
    IntegrityError
        if the blob size, hash or any index entry disagree
    """
    try:
        with open(os.path.join(path, BLOB_NAME), "rb") as f:
            blob = f.read()
        index = pd.read_csv(
            os.path.join(path, INDEX_NAME),
            dtype={"name": str, "dtype": str, "shape": str},
            keep_default_na=False,
        )
    except OSError as e:
        raise ArtifactIOError(
            "unable to read checkpoint tensors in %s: %s" % (path, e)
        ) from e
    if len(blob) != manifest["tensors_nbytes"]:
        raise IntegrityError(
            "tensor blob of %s holds %d bytes, manifest records %d"
            % (path, len(blob), manifest["tensors_nbytes"])
        )
    if hashlib.sha256(blob).hexdigest() != manifest["tensors_sha256"]:
        raise IntegrityError("tensor blob of %s fails its sha256 check" % path)
    if list(index.columns) != INDEX_COLUMNS:
        raise VersionError(
            "checkpoint index of %s has columns %s, expected %s"
            % (path, list(index.columns), INDEX_COLUMNS)
        )
    tensors = {}
    for row in index.itertuples(index=False):
        shape = tuple(int(s) for s in row.shape.split("x")) if row.shape else ()
        dtype = np.dtype(row.dtype)
        count = int(np.prod(shape, dtype=np.int64))
        if row.nbytes != count * dtype.itemsize or (
            row.offset + row.nbytes > len(blob)
        ):
            raise IntegrityError(
                "index entry %s does not fit the tensor blob of %s"
                % (row.name, path)
            )
        array = np.frombuffer(
            blob, dtype=dtype, count=count, offset=int(row.offset)
        ).reshape(shape)
        tensors[row.name] = torch.from_numpy(
            array.astype(dtype.newbyteorder("="), copy=True)
        ).to(TORCH_DTYPES[str(dtype)])
    return tensors


def _load_optimizer(state: TrainState, tensors: dict[str, torch.Tensor]):
    opt_state = state.optimizer.state
    for name, param in state.model.named_parameters():
        entries = {}
        for key in ADAM_KEYS:
            value = tensors.get("%s%s.%s" % (OPTIM_PREFIX, key, name))
            if value is not None:
                # Adam keeps its step counter on the cpu
                entries[key] = value if key == "step" else value.to(param.device)
        if entries:
            opt_state[param] = entries


def load_checkpoint(path: str, device: str = "cpu") -> TrainState:
    """rebuilds the model and optimizer stored at `path`.

    Parameters
    ----------
    path : str
        checkpoint directory
    device : str, optional
        device for the restored model, by default "cpu"

    Returns
    -------
    TrainState
        bit-exact copy of the saved state; the model is left in training
        mode and the torch rng state is returned, not applied

    Raises
    ------
    ArtifactIOError
        if files are missing or unreadable
    VersionError
        on a format version or index schema mismatch
    IntegrityError
        on a corrupted or truncated blob
    """
    manifest = read_manifest(path)
    tensors = read_tensors(path, manifest)
    cfg = dataclass_from_dict(ModelConfig, manifest["model_config"])
    train_cfg = dataclass_from_dict(TrainConfig, manifest["train_config"])
    model = FBLNet(cfg).to(device)
    model_keys = set(model.state_dict())
    missing = model_keys - set(tensors)
    if missing:
        raise IntegrityError(
            "checkpoint %s lacks tensors %s" % (path, sorted(missing)[:5])
        )
    model.load_state_dict({k: tensors[k] for k in model_keys})
    state = TrainState(
        model=model,
        optimizer=build_optimizer(model, train_cfg),
        train_cfg=train_cfg,
        step=manifest["step"],
        metrics=dict(manifest["metrics"]),
        rng_state=tensors.get(RNG_KEY),
    )
    _load_optimizer(state, tensors)
    return state
