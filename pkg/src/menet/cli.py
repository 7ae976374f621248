"""Command-line surface tying the pipeline together.

Subcommands: phantom, preprocess, train, predict, evaluate, gradcheck.
Exit codes: 0 success, 1 validation error, 2 runtime numerical error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .autodiff import grad_check
from .errors import MENetError, NumericalError
from .model import MENetConfig, build_menet, loss_program, modality_inputs
from .nifti import write_nifti
from .train import (
    TrainConfig,
    parse_config_text,
    run_evaluation,
    run_prediction,
    run_training,
)

_PHANTOM_SUFFIXES = (("FLAIR", "flair"), ("T1", "t1"), ("T1CE", "t1ce"), ("T2", "t2"))


def _parse_extent(text: str) -> tuple[int, int, int]:
    parts = tuple(int(x) for x in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("extent must be three comma-separated ints")
    return parts


def _cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case = data_mod.make_phantom(args.seed, args.extent)
    row = []
    for key, suffix in _PHANTOM_SUFFIXES:
        name = f"{case.case_id}_{suffix}.nii.gz"
        write_nifti(case.modalities[key], out / name)
        row.append(name)
    seg_name = f"{case.case_id}_seg.nii.gz"
    write_nifti(case.labels, out / seg_name, dtype=np.uint8)
    row.append(seg_name)
    manifest = out / "manifest.tsv"
    with open(manifest, "a") as f:
        f.write("\t".join(row) + "\n")
    print(f"wrote case {case.case_id} ({args.extent[0]}x{args.extent[1]}x{args.extent[2]}) "
          f"to {out}, manifest {manifest}")
    return 0


def _cmd_preprocess(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for files in data_mod.read_manifest(args.manifest):
        case = data_mod.normalize_case(data_mod.load_case(files))
        row = []
        for key, suffix in _PHANTOM_SUFFIXES:
            name = f"{case.case_id}_{suffix}.nii.gz"
            write_nifti(case.modalities[key], out / name)
            row.append(name)
        if case.labels is not None:
            name = f"{case.case_id}_seg.nii.gz"
            write_nifti(case.labels, out / name, dtype=np.uint8)
            row.append(name)
        rows.append("\t".join(row))
        print(f"normalized {case.case_id}")
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n")
    return 0


def _load_configs(path) -> tuple[MENetConfig, TrainConfig]:
    if path is None:
        return MENetConfig(), TrainConfig()
    return parse_config_text(Path(path).read_text())


def _cmd_train(args) -> int:
    model_config, train_config = _load_configs(args.config)
    result = run_training(args.manifest, model_config, train_config, args.out)
    print(f"trained {result.steps} steps, final loss {result.last_loss:.6f}, "
          f"first-patch soft Dice {result.final_train_dice:.4f}")
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"loss log:   {result.loss_log}")
    return 0


def _cmd_predict(args) -> int:
    written = run_prediction(args.checkpoint, args.manifest, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_evaluate(args) -> int:
    _, text = run_evaluation(args.pred, args.truth, args.csv)
    print(text, end="")
    if args.csv:
        print(f"csv: {args.csv}")
    return 0


def _cmd_gradcheck(args) -> int:
    model_config, _ = _load_configs(args.config)
    if args.config is None:
        # desk-scale default: gradient checking the full-size network is
        # finite-difference torture, not a smoke test
        model_config = MENetConfig(num_stages=2, base_channels=4, dropout_rate=0.2)
    rng = np.random.default_rng(args.seed)
    params = build_menet(model_config, rng)
    side = 2 ** (model_config.num_stages + 1)
    extent = (side // 2, side, side)
    patch = rng.normal(size=(1, *extent, 4))
    labels = rng.integers(0, 4, size=(1, *extent))
    target = np.eye(4)[labels]
    program = loss_program(model_config, target)
    err = grad_check(program, modality_inputs(patch), params, epsilon=args.epsilon)
    print(f"max relative gradient error: {err:.3e} (tolerance {args.tolerance:.1e})")
    if err > args.tolerance:
        raise NumericalError(f"gradient check failed: {err:.3e} > {args.tolerance:.1e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="menet",
        description="multi-encoder volumetric segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic labelled case")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--extent", type=_parse_extent, default=(32, 32, 16))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_phantom)

    p = sub.add_parser("preprocess", help="z-score normalize manifest cases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("train", help="train on manifest cases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="segment manifest cases with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of *_pred volumes")
    p.add_argument("--truth", required=True, help="manifest with label paths")
    p.add_argument("--csv", help="also write the means as CSV")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except MENetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
