import argparse
import dataclasses
import os
import sys

from . import BEST_CKPT_NAME, CHECKPOINT_DIR_NAME, harness
from .checkpoint import load_checkpoint
from .core import (
    ENCODER_MODES,
    FEEDBACK_NODES,
    FUSION_MODES,
    ModelConfig,
    TrainConfig,
)
from .data import DatasetSpec, load_dataset
from .errors import FBLNetError
from .utils import (
    bcolors,
    dataclass_from_dict,
    identify_data_dir,
    read_json_config,
    warn,
)

description_str = """train, evaluate and run FBLNet driver attention models.
Datasets are either a directory holding frames/ and maps/ (looked up as given,
in the current directory or within data/) or the keyword `synthetic`, which
generates moving-blob clips configured by the --config file."""
epilog_str = """Note: --config points to a flat JSON file whose keys are the
fields of the model, training and synthetic dataset configs (input_side,
base_width, fusion_mode, n_steps, batch_size, n_blobs, ...). Values passed
explicitly on the command line always win over the config file."""
SYNTHETIC = "synthetic"


class ArgumentParserConfig(argparse.ArgumentParser):
    """A custom override of the argparser functionality to insert
    parameters from a `--config` json before validation of required/default
    parameters occurs.
    """

    def _subcommand_actions(self, args: list[str]):
        actions = list(self._actions)
        for action in self._actions:
            if isinstance(action, argparse._SubParsersAction):
                for arg in args:
                    if arg in action.choices:
                        actions.extend(action.choices[arg]._actions)
                        break
        return actions

    def parse_args(self, args=None, namespace=None):
        """
        An overriden version of argparse.ArgumentParser's parse_args().

        `--config` lets users provide a path to a JSON file whose keys name
        flag destinations (`fusion_mode`, `n_steps`, ...). Any flag of the
        chosen subcommand that the user did not pass is filled from the
        config; flags passed on the command line take priority. Keys that
        are not flags are left for the config dataclasses to pick up.
        """
        args = list(sys.argv[1:] if args is None else args)
        if "--config" in args:
            config_path = args[args.index("--config") + 1]
            config = read_json_config(config_path)
            actions = self._subcommand_actions(args)
            for key, val in config.items():
                action = next(
                    (a for a in actions if a.dest == key and a.option_strings),
                    None,
                )
                # dont override any args passed by the user
                if action is None or any(
                    flag in args for flag in action.option_strings
                ):
                    continue
                # flags with a constant take no values, only add them if set
                if action.nargs == 0:
                    if val == action.const:
                        args.append(action.option_strings[-1])
                    continue
                args.append(action.option_strings[-1])
                # some params pass lists to argv, mock that here
                # all argv params are str, argparse converts types for us
                val = val if isinstance(val, list) else [val]
                [args.append(str(v)) for v in val]

        args, argv = self.parse_known_args(args, namespace)
        if argv:
            msg = "unrecognized arguments: %s"
            self.error(msg % " ".join(argv))
        return args


parser = ArgumentParserConfig(
    prog="fblnet",
    description=description_str,
    epilog=epilog_str,
)
subparsers = parser.add_subparsers(dest="command", required=True)


def _add_config(sub):
    sub.add_argument(
        "--config",
        type=str,
        required=False,
        metavar="",
        help="path to a flat JSON config of model, training and dataset fields",
    )


def _add_device(sub):
    sub.add_argument(
        "--device",
        type=str,
        required=False,
        metavar="",
        help="torch device to run on, defaults to cpu",
    )


train_parser = subparsers.add_parser("train", help="train a model")
_add_config(train_parser)
train_parser.add_argument(
    "--data",
    type=str,
    required=True,
    metavar="",
    help="training dataset directory, or `%s`" % SYNTHETIC,
)
train_parser.add_argument(
    "--val-data",
    dest="val_data",
    type=str,
    required=False,
    metavar="",
    help="validation dataset directory, or `%s`" % SYNTHETIC,
)
train_parser.add_argument(
    "--out",
    type=str,
    required=True,
    metavar="",
    help="run directory receiving checkpoints, traces and figures",
)
train_parser.add_argument("--seed", type=int, required=False, metavar="")
train_parser.add_argument(
    "--fusion",
    dest="fusion_mode",
    choices=FUSION_MODES,
    required=False,
    help="fusion of the two encoder pathways, defaults to fbl",
)
train_parser.add_argument(
    "--feedback-node",
    dest="feedback_node",
    choices=FEEDBACK_NODES,
    required=False,
    help="decoder node fed back into the knowledge, defaults to d2",
)
train_parser.add_argument(
    "--encoder",
    dest="encoder_mode",
    choices=ENCODER_MODES,
    required=False,
    help="encoder pathways to run, defaults to both",
)
train_parser.add_argument(
    "--steps", dest="n_steps", type=int, required=False, metavar=""
)
train_parser.add_argument(
    "--batch-size", dest="batch_size", type=int, required=False, metavar=""
)
train_parser.add_argument(
    "--resume",
    type=str,
    required=False,
    metavar="",
    help="checkpoint directory to continue training from",
)
train_parser.add_argument(
    "--no-shuffle",
    dest="shuffle",
    action="store_const",
    const=False,
    help="iterate the training data in dataset order",
)
_add_device(train_parser)

eval_parser = subparsers.add_parser("eval", help="evaluate a checkpoint")
_add_config(eval_parser)
eval_parser.add_argument("--ckpt", type=str, required=True, metavar="")
eval_parser.add_argument("--data", type=str, required=True, metavar="")
eval_parser.add_argument(
    "--report",
    type=str,
    required=True,
    metavar="",
    help="csv path for the per-frame metrics and their means",
)
eval_parser.add_argument(
    "--n-splits", dest="n_splits", type=int, required=False, metavar=""
)
eval_parser.add_argument(
    "--batch-size", dest="batch_size", type=int, required=False, metavar=""
)
_add_device(eval_parser)

predict_parser = subparsers.add_parser(
    "predict", help="write the attention map of one image"
)
predict_parser.add_argument("--ckpt", type=str, required=True, metavar="")
predict_parser.add_argument("--image", type=str, required=True, metavar="")
predict_parser.add_argument("--out", type=str, required=True, metavar="")
predict_parser.add_argument(
    "--native-size",
    dest="native_size",
    action="store_true",
    help="resize the map back to the source image size",
)
predict_parser.add_argument(
    "--figure",
    type=str,
    required=False,
    metavar="",
    help="optional png of the frame with the prediction overlaid",
)
_add_device(predict_parser)

ablate_parser = subparsers.add_parser(
    "ablate", help="train and evaluate an ablation grid"
)
_add_config(ablate_parser)
ablate_parser.add_argument(
    "--grid",
    type=str,
    required=True,
    metavar="",
    help="`fusion`, `node`, `encoder` or field=v1,v2; axes joined by `;`",
)
ablate_parser.add_argument("--out", type=str, required=True, metavar="")
ablate_parser.add_argument(
    "--data", type=str, required=False, default=SYNTHETIC, metavar=""
)
ablate_parser.add_argument(
    "--eval-data",
    dest="eval_data",
    type=str,
    nargs="*",
    required=False,
    help="evaluation datasets, defaults to the synthetic validation split",
)
ablate_parser.add_argument(
    "--steps", dest="n_steps", type=int, required=False, metavar=""
)
ablate_parser.add_argument("--seed", type=int, required=False, metavar="")
_add_device(ablate_parser)


def _collect_values(args) -> dict:
    """config file values overridden by every flag the user passed"""
    config_path = getattr(args, "config", None)
    values = read_json_config(config_path) if config_path else {}
    known = set(vars(args)) | {
        f.name
        for cls in (ModelConfig, TrainConfig, DatasetSpec)
        for f in dataclasses.fields(cls)
    }
    for key in values:
        if key not in known:
            warn("ignoring unknown config key %s" % key)
    values.update({k: v for k, v in vars(args).items() if v is not None})
    return values


def _dataset(name: str, values: dict, split: str, input_side: int):
    spec = dataclass_from_dict(
        DatasetSpec, {**values, "input_side": input_side}
    )
    if name == SYNTHETIC:
        spec = dataclasses.replace(spec, kind="synthetic", split=split)
    else:
        root = identify_data_dir(name, os.getcwd(), split)
        spec = dataclasses.replace(
            spec, kind="directory", root=root, split=split
        )
    return load_dataset(spec)


def run_train(args):
    values = _collect_values(args)
    model_cfg = dataclass_from_dict(ModelConfig, values)
    train_cfg = dataclass_from_dict(TrainConfig, values)
    side = model_cfg.input_side
    if args.resume:
        side = load_checkpoint(args.resume).model.cfg.input_side
    train_ds = _dataset(args.data, values, "train", side)
    val_ds = (
        _dataset(args.val_data, values, "val", side) if args.val_data else None
    )
    harness.train(
        model_cfg,
        train_cfg,
        train_ds,
        val_ds,
        run_dir=args.out,
        resume=args.resume,
    )


def run_eval(args):
    values = _collect_values(args)
    train_cfg = dataclass_from_dict(TrainConfig, values)
    ckpt = args.ckpt
    # a run directory evaluates its best checkpoint
    if os.path.isdir(os.path.join(ckpt, CHECKPOINT_DIR_NAME)):
        ckpt = os.path.join(ckpt, CHECKPOINT_DIR_NAME, BEST_CKPT_NAME)
    state = load_checkpoint(ckpt, train_cfg.device)
    ds = _dataset(args.data, values, "test", state.model.cfg.input_side)
    report = harness.evaluate(
        state, ds, train_cfg.n_splits, train_cfg.batch_size, train_cfg.device
    )
    harness.write_report(report, args.report)
    summary = harness.report_summary(report)
    print("  ".join("%s %.4f" % (k, v) for k, v in summary.items()))


def run_predict(args):
    device = args.device or "cpu"
    harness.predict(
        args.ckpt,
        args.image,
        args.out,
        native_size=args.native_size,
        figure=args.figure,
        device=device,
    )
    print(f"{bcolors.OKGREEN}wrote attention map to {args.out}{bcolors.ENDC}")


def run_ablate(args):
    values = _collect_values(args)
    model_cfg = dataclass_from_dict(ModelConfig, values)
    train_cfg = dataclass_from_dict(TrainConfig, values)
    side = model_cfg.input_side
    train_ds = _dataset(args.data, values, "train", side)
    eval_names = args.eval_data or [SYNTHETIC]
    eval_sets = {
        name: _dataset(name, values, "val", side) for name in eval_names
    }
    table = harness.run_ablation(
        model_cfg,
        train_cfg,
        harness.parse_grid(args.grid),
        train_ds,
        eval_sets,
        args.out,
    )
    print(table.to_string())


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "predict": run_predict,
    "ablate": run_ablate,
}


def main(argv: list[str] | None = None):
    """Entry point to the fblnet command line."""
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except FBLNetError as e:
        print(f"{bcolors.FAIL}{e.code}: {e}{bcolors.ENDC}")
        raise SystemExit(1)
