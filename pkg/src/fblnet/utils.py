import dataclasses
import json
import os
import random

import numpy as np
import torch

from .errors import ConfigError, MissingPathError


class bcolors:
    HEADER = "\033[95m"
    OKBLUE = "\033[94m"
    OKCYAN = "\033[96m"
    OKGREEN = "\033[92m"
    WARNING = "\033[93m"
    FAIL = "\033[91m"
    ENDC = "\033[0m"
    BOLD = "\033[1m"
    UNDERLINE = "\033[4m"


def warn(message: str):
    """prints `message` in the warning color, used for recoverable
    conditions that the user should still see."""
    print(f"{bcolors.WARNING}{message}{bcolors.ENDC}")


def seed_everything(seed: int):
    """seeds python, numpy and torch global generators so that model
    initialization and training are reproducible on the same backend.

    Parameters
    ----------
    seed : int
        seed applied to every generator
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def identify_data_dir(data_name: str, working_dir: str, split: str = ""):
    """Identifies a dataset directory given the current working directory
    and the name (or path) of the dataset. Checks `data_name` as given, then
    `working_dir/data_name` and `working_dir/data/data_name`, and descends into
    `split` when such a subdirectory exists.

    Parameters
    ----------
    data_name : str
        name of or path to the dataset directory
    working_dir : str
        path to the users working area
    split : str, optional
        optional split subdirectory such as "train" or "val", by default ""

    Raises
    ------
    MissingPathError
        if unable to find the directory

    Returns
    ------
    str
        directory of the dataset (split)
    """
    candidates = [
        data_name,
        os.path.join(working_dir, data_name),
        os.path.join(working_dir, "data", data_name),
    ]
    for data_dir in candidates:
        if os.path.isdir(data_dir):
            if split and os.path.isdir(os.path.join(data_dir, split)):
                return os.path.join(data_dir, split)
            return data_dir
    raise MissingPathError(
        "Unable to find your dataset directory %s within %s, "
        "ensure it exists at the top level or within a data/ folder"
        % (data_name, working_dir)
    )


def validate_dataset_structure(
    data_dir: str, necessary_components: list[str]
):
    """validates `data_dir` to ensure it holds every component of the
    frame/map directory layout.

    Parameters
    ----------
    data_dir : str
        path to the dataset directory
    necessary_components : list[str]
        all necessary subdirectories of a dataset, checked in order.

    Raises
    ------
    MissingPathError
        data_dir does not exist, or os.path.join(data_dir, component) does
        not exist for any component in necessary_components
    """
    if not os.path.exists(data_dir):
        raise MissingPathError("unable to find %s to validate" % data_dir)
    for component in necessary_components:
        if not os.path.exists(os.path.join(data_dir, component)):
            raise MissingPathError(
                "unable to find %s within %s" % (component, data_dir)
            )


def create_run_framework(
    run_dir: str,
    necessary_dirs: list[str] = ["checkpoints"],
):
    """creates the framework for a training run, creates intermediate dirs
    if `run_dir` is multiple directories long.

    Parameters
    ----------
    run_dir : str
        path to where you want the run outputs to be
    necessary_dirs : list[str], optional
        directories created inside every run, by default ["checkpoints"]
    """
    for component in [""] + necessary_dirs:
        path = os.path.join(run_dir, component)
        if not os.path.exists(path):
            print(
                f"{bcolors.WARNING}creating {path} as it is needed but does not exist{bcolors.ENDC}"
            )
            os.makedirs(path, exist_ok=True)


def read_json_config(config_path: str) -> dict:
    """reads a flat key-value JSON config file.

    Raises
    ------
    MissingPathError
        if `config_path` does not exist
    ConfigError
        if the file is not a flat JSON object
    """
    if not os.path.exists(config_path):
        raise MissingPathError(
            "Unable to locate config file at %s" % config_path
        )
    with open(config_path) as f:
        config = json.load(f)
    if not isinstance(config, dict) or any(
        isinstance(val, dict) for val in config.values()
    ):
        raise ConfigError(
            "config %s must be a flat JSON object of key/value pairs"
            % config_path
        )
    return config


def dataclass_from_dict(cls, values: dict, base=None):
    """builds the dataclass `cls` from the subset of `values` naming its
    fields, starting from `base` (or the class defaults). Lists are turned
    into tuples to match tuple-typed fields.

    Parameters
    ----------
    cls : type
        a dataclass type
    values : dict
        flat key-value mapping, keys that are not fields of `cls` are ignored
    base : cls, optional
        instance whose values are used for any field missing from `values`

    Returns
    -------
    cls
        new instance of `cls`
    """
    names = {field.name for field in dataclasses.fields(cls)}
    picked = {
        key: tuple(val) if isinstance(val, list) else val
        for key, val in values.items()
        if key in names
    }
    if base is not None:
        return dataclasses.replace(base, **picked)
    return cls(**picked)
