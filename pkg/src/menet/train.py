"""Training loop, learning-rate schedule and the end-to-end runs
(train / predict / evaluate) behind the CLI.

The optimizer is Adam; every source of randomness (weight init, epoch
shuffling, dropout, patch subsampling) flows from the single seeded
generator stored in TrainState, so a (seed, data, config) triple yields
a bit-identical loss log, and a state checkpoint resumes exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .autodiff import backward
from .checkpoint import load_checkpoint, parse_kv, save_checkpoint
from .errors import MissingCase, NonFiniteLoss, ValidationError
from .losses import DEFAULT_CLASS_WEIGHTS, soft_dice
from .metrics import evaluate_case, report_table
from .model import (
    MENetConfig,
    ModelParams,
    build_menet,
    predict_patch,
    record_loss_forward,
)
from .nifti import Volume, write_nifti

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

DEFAULT_LR_MILESTONES = ((200_000, 3e-5), (400_000, 1e-5))


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_milestones: tuple[tuple[int, float], ...] = DEFAULT_LR_MILESTONES
    total_steps: int = 450_000
    dropout: float = 0.5
    batch_size: int = 1
    seed: int = 0
    epochs_shuffle: bool = True
    patch_extent: tuple[int, int, int] = data_mod.DEFAULT_PATCH_EXTENT
    patch_strides: tuple[int, int, int] = data_mod.DEFAULT_PATCH_STRIDES
    patch_fraction: float = 1.0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 < self.patch_fraction <= 1.0:
            raise ValidationError("patch_fraction must lie in (0, 1]")
        lrs = [self.initial_lr] + [lr for _, lr in self.lr_milestones]
        if any(lr <= 0 for lr in lrs):
            raise ValidationError("learning rates must be positive")
        if any(b < a for a, b in zip(lrs, lrs[1:])):
            raise ValidationError("milestone learning rates must be non-increasing")
        steps = [s for s, _ in self.lr_milestones]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValidationError("milestone steps must be strictly increasing")


def lr_at(step: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule; each milestone applies at its step."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    lr = config.initial_lr
    for milestone, value in config.lr_milestones:
        if step >= milestone:
            lr = value
    return lr


@dataclass
class TrainState:
    step: int
    params: ModelParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng: np.random.Generator
    last_loss: float = math.nan


def init_train_state(model_config: MENetConfig, train_config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(train_config.seed)
    params = build_menet(model_config, rng)
    zeros = {n: np.zeros_like(params[n]) for n in params.learnable_names()}
    return TrainState(0, params,
                      {n: z.copy() for n, z in zeros.items()},
                      {n: z.copy() for n, z in zeros.items()},
                      rng)


def _param_norm_dump(params: ModelParams, limit: int = 8) -> str:
    norms = sorted(
        ((float(np.linalg.norm(params[n])), n) for n in params.learnable_names()),
        reverse=True,
    )
    return ", ".join(f"{n}={v:.3e}" for v, n in norms[:limit])


def train_step(state: TrainState, batch, config: TrainConfig) -> tuple[TrainState, float]:
    """One forward/backward/Adam update. Mutates and returns the state."""
    patch, target = batch
    loss_value, tape, bn_updates = record_loss_forward(
        state.params, patch, target, mode="train", rng=state.rng,
        weights=config.class_weights,
    )
    loss = float(loss_value)
    if not math.isfinite(loss):
        raise NonFiniteLoss(
            f"loss {loss} at step {state.step}; largest parameter norms: "
            + _param_norm_dump(state.params)
        )
    grads = backward(tape, np.ones(()))
    lr = lr_at(state.step, config)
    t = state.step + 1
    correction = math.sqrt(1.0 - ADAM_BETA2 ** t) / (1.0 - ADAM_BETA1 ** t)
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        state.params.tensors[name] = state.params.tensors[name] - (
            lr * correction * m / (np.sqrt(v) + ADAM_EPSILON)
        )
    state.params.apply_bn_updates(bn_updates)
    state.step = t
    state.last_loss = loss
    return state, loss


# -- state serialization ----------------------------------------------

def save_train_state(path, state: TrainState, config: TrainConfig) -> None:
    tensors = dict(state.params.tensors)
    for name, m in state.adam_m.items():
        tensors["adam.m." + name] = m
    for name, v in state.adam_v.items():
        tensors["adam.v." + name] = v
    meta = {
        "kind": "train",
        "step": str(state.step),
        "rng_state": json.dumps(state.rng.bit_generator.state),
        "patch_extent": ",".join(map(str, config.patch_extent)),
        "patch_strides": ",".join(map(str, config.patch_strides)),
    }
    save_checkpoint(path, state.params.config, tensors, meta)


def load_train_state(path) -> tuple[TrainState, dict[str, str]]:
    config, tensors, meta = load_checkpoint(path)
    params = {}
    adam_m = {}
    adam_v = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            params[name] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    state = TrainState(int(meta["step"]), ModelParams(config, params),
                       adam_m, adam_v, rng)
    return state, meta


# -- config files -------------------------------------------------------

def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = tuple(int(x) for x in text.split(","))
    if len(parts) != 3:
        raise ValidationError(f"expected three comma-separated extents, got {text!r}")
    return parts


def parse_config_text(text: str) -> tuple[MENetConfig, TrainConfig]:
    """Line-oriented ``key = value`` config covering model and trainer keys."""
    kv = parse_kv(text)
    model_kwargs = {}
    for key in ("num_stages", "base_channels"):
        if key in kv:
            model_kwargs[key] = int(kv[key])
    for key in ("convs_per_encoder_stage", "convs_per_decoder_stage"):
        if key in kv and kv[key]:
            model_kwargs[key] = tuple(int(x) for x in kv[key].split(","))
    train_kwargs = {}
    if "initial_lr" in kv:
        train_kwargs["initial_lr"] = float(kv["initial_lr"])
    if "lr_milestones" in kv:
        milestones = []
        if kv["lr_milestones"]:
            for part in kv["lr_milestones"].split(","):
                step_s, lr_s = part.split(":")
                milestones.append((int(step_s), float(lr_s)))
        train_kwargs["lr_milestones"] = tuple(milestones)
    for key in ("total_steps", "batch_size", "seed", "checkpoint_every"):
        if key in kv:
            train_kwargs[key] = int(kv[key])
    if "dropout" in kv:
        train_kwargs["dropout"] = float(kv["dropout"])
    if "patch_fraction" in kv:
        train_kwargs["patch_fraction"] = float(kv["patch_fraction"])
    if "epochs_shuffle" in kv:
        train_kwargs["epochs_shuffle"] = kv["epochs_shuffle"].lower() in ("1", "true", "yes", "on")
    for key in ("patch_extent", "patch_strides"):
        if key in kv:
            train_kwargs[key] = _parse_triple(kv[key])
    if "class_weights" in kv:
        train_kwargs["class_weights"] = tuple(float(x) for x in kv["class_weights"].split(","))
    train_config = TrainConfig(**train_kwargs)
    model_kwargs["dropout_rate"] = train_config.dropout
    return MENetConfig(**model_kwargs), train_config


# -- end-to-end runs ----------------------------------------------------

@dataclass
class TrainResult:
    final_checkpoint: Path
    loss_log: Path
    steps: int
    last_loss: float
    final_train_dice: float = math.nan


def _training_patches(case: data_mod.MultiModalCase, config: TrainConfig):
    grid = data_mod.make_patch_grid(case.extent, config.patch_extent,
                                    config.patch_strides)
    return data_mod.extract_patches(case, grid, require_labels=True)


def run_training(manifest_path, model_config: MENetConfig, config: TrainConfig,
                 out_dir) -> TrainResult:
    """Train over all manifest cases; writes loss.log and checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = data_mod.read_manifest(manifest_path)
    if not files:
        raise ValidationError(f"manifest {manifest_path} lists no cases")
    cases = [data_mod.normalize_case(data_mod.load_case(f)) for f in files]
    patches_per_case = [_training_patches(c, config) for c in cases]

    state = init_train_state(model_config, config)
    log_path = out_dir / "loss.log"
    final_path = out_dir / "checkpoint_final.ckpt"
    loss = math.nan
    with open(log_path, "w") as log:
        while state.step < config.total_steps:
            order = (state.rng.permutation(len(cases)) if config.epochs_shuffle
                     else np.arange(len(cases)))
            for case_idx in order:
                patches = patches_per_case[case_idx]
                take = len(patches)
                if config.patch_fraction < 1.0:
                    take = max(1, math.ceil(config.patch_fraction * len(patches)))
                    chosen = state.rng.choice(len(patches), size=take, replace=False)
                    patches = [patches[i] for i in chosen]
                for start in range(0, len(patches), config.batch_size):
                    group = patches[start:start + config.batch_size]
                    batch = (
                        np.concatenate([p for p, _ in group], axis=0),
                        np.concatenate([t for _, t in group], axis=0),
                    )
                    lr = lr_at(state.step, config)
                    state, loss = train_step(state, batch, config)
                    log.write(f"{state.step}\t{lr:.10g}\t{loss:.17g}\n")
                    if (config.checkpoint_every
                            and state.step % config.checkpoint_every == 0):
                        save_train_state(
                            out_dir / f"checkpoint_step{state.step:08d}.ckpt",
                            state, config)
                    if state.step >= config.total_steps:
                        break
                if state.step >= config.total_steps:
                    break
    save_train_state(final_path, state, config)

    # soft Dice of the final model on the first training patch, for monitoring
    first_patch, first_target = patches_per_case[0][0]
    probs = predict_patch(state.params, first_patch[:1])
    dice = soft_dice(probs, first_target[:1])
    return TrainResult(final_path, log_path, state.step, loss, dice)


def predict_case(params: ModelParams, case: data_mod.MultiModalCase,
                 patch_extent, patch_strides) -> np.ndarray:
    """Normalize, tile, predict and stitch one case; returns {0,1,2,4} codes."""
    case = data_mod.normalize_case(case)
    extent = case.extent
    patch_extent = tuple(min(p, e) for p, e in zip(patch_extent, extent))
    grid = data_mod.make_patch_grid(extent, patch_extent, patch_strides)
    patches = data_mod.extract_patches(case, grid, require_labels=False)
    probs = [predict_patch(params, inp) for inp, _ in patches]
    _, channel_map = data_mod.stitch_patches(grid, probs)
    return data_mod.channels_to_codes(channel_map)


def run_prediction(checkpoint_path, manifest_path, out_dir) -> list[Path]:
    """Write one predicted label volume per manifest case."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config, tensors, meta = load_checkpoint(checkpoint_path)
    params = ModelParams(config, {
        n: a for n, a in tensors.items() if not n.startswith("adam.")
    })
    patch_extent = (_parse_triple(meta["patch_extent"])
                    if "patch_extent" in meta else data_mod.DEFAULT_PATCH_EXTENT)
    patch_strides = (_parse_triple(meta["patch_strides"])
                     if "patch_strides" in meta else data_mod.DEFAULT_PATCH_STRIDES)
    written = []
    for files in data_mod.read_manifest(manifest_path):
        case = data_mod.load_case(files)
        codes = predict_case(params, case, patch_extent, patch_strides)
        out_path = out_dir / f"{case.case_id}_pred.nii.gz"
        write_nifti(Volume(codes.astype(np.uint8), case.voxel_spacing),
                    out_path, dtype=np.uint8)
        written.append(out_path)
    return written


def run_evaluation(pred_dir, truth_manifest, csv_path=None):
    """Evaluate predicted label volumes against manifest ground truth.

    Returns (per-case reports, text table)."""
    pred_dir = Path(pred_dir)
    reports = []
    for files in data_mod.read_manifest(truth_manifest):
        if files.label_path is None:
            raise ValidationError(f"case {files.case_id} has no ground-truth labels")
        candidates = [pred_dir / f"{files.case_id}_pred.nii.gz",
                      pred_dir / f"{files.case_id}_pred.nii"]
        pred_path = next((p for p in candidates if p.exists()), None)
        if pred_path is None:
            raise MissingCase(f"no prediction for {files.case_id} in {pred_dir}")
        case = data_mod.load_case(files)
        pred = np.rint(np.asarray(
            data_mod.read_nifti(pred_path).data)).astype(np.int64)
        report = evaluate_case(pred, case.labels.data.astype(np.int64),
                               case.voxel_spacing, case_id=files.case_id)
        reports.append(report)
    text = report_table(reports, "text")
    if csv_path is not None:
        Path(csv_path).write_text(report_table(reports, "csv"))
    return reports, text
