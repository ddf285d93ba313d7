"""Experiment orchestration: stage planning, progressive training, evaluation.

Each stage checkpoint is keyed by a digest of everything its result depends
on (data, noise, architecture, schedule, seed and the keys of the stages it
consumes). Runs that share a prefix therefore share checkpoint files: a
three-block run after a one-block run retrains nothing it already has, and
the gt-condition ablation reuses the first segmenter of the main run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from . import tensor as T
from .cascade import CascadeParams, cascade_forward
from .config import ExperimentConfig
from .data import DatasetManifest, generate_dataset, load_arrays, save_color_labels, save_image, split_dataset
from .errors import CheckpointMismatchError, UsageError
from .models import SegNetTiny, build_block
from .noise import NoiseSpec, corrupt, derive_seed
from .tensor import Tensor
from .training import (
    Checkpoint,
    TrainingData,
    stable_digest,
    train_clean_segmentation,
    train_denoising_stage,
    train_joint,
    train_segmentation_stage,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# data


def prepare_dataset(config: ExperimentConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """Render the dataset and write ``manifest.txt``, ``train.txt`` and ``test.txt``."""
    ds, root = config.dataset, config.dataset_root
    full = generate_dataset(ds["count"], ds["size"], ds["classes"], ds["seed"], root)
    train, test = split_dataset(full, ds["train_fraction"], ds["seed"])
    train.write(root / "train.txt")
    test.write(root / "test.txt")
    return train, test


def dataset_manifests(root: Path) -> tuple[DatasetManifest, DatasetManifest]:
    train_p, test_p = root / "train.txt", root / "test.txt"
    if not train_p.exists() or not test_p.exists():
        raise UsageError(f"no generated dataset under {root}; run `sdabn generate` first")
    return DatasetManifest.read(train_p), DatasetManifest.read(test_p)


def load_training_data(config: ExperimentConfig, noise: NoiseSpec | None = None) -> TrainingData:
    train_m, _ = dataset_manifests(config.dataset_root)
    frac = config.dataset["validation_fraction"]
    fit_m, val_m = split_dataset(train_m, 1.0 - frac, derive_seed(config.dataset["seed"], 0xFA1))
    tx, tl, ti = load_arrays(fit_m)
    vx, vl, vi = load_arrays(val_m)
    dt = config.dtype
    return TrainingData(tx.astype(dt), tl, ti, vx.astype(dt), vl, vi, noise or config.noise, dt)


def load_split(config: ExperimentConfig, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    train_m, test_m = dataset_manifests(config.dataset_root)
    if split == "test":
        return load_arrays(test_m)
    if split == "train":
        return load_arrays(train_m)
    raise UsageError(f"unknown split {split!r}")


# --------------------------------------------------------------------------
# plan


@dataclass(frozen=True)
class Stage:
    kind: str  # "S", "D" or "J"
    unit: int  # 0 for the clean pretrain, n + 1 for a trailing segmenter
    key: str
    init_key: str | None = None

    @property
    def label(self) -> str:
        return f"{self.kind}{self.unit}"

    def filename(self) -> str:
        return f"{self.label}-{self.key[:16]}.ckpt"


def plan_stages(config: ExperimentConfig) -> list[Stage]:
    model, ds = config.model, dict(config.dataset)
    ds.pop("root")
    base = {"dataset": ds, "precision": config.raw["precision"], "seed": config.seed,
            "seg_widths": model["seg_widths"]}
    noise = config.noise.to_dict()
    den_arch = {k: model[k] for k in ("den_width", "sft_width", "dilations", "residual")}
    tr = config.raw["training"]
    n, variant = config.blocks, config.variant

    if variant == "joint":
        key = stable_digest("J", base, noise, den_arch, tr["joint"], n)
        return [Stage("J", n + 1, key)]

    s0 = Stage("S", 0, stable_digest("S0", base, tr["bootstrap"]))
    stages = [s0]
    last_seg, prev_den = s0, None
    for i in range(1, n + 1):
        if variant != "plain":
            s = Stage("S", i, stable_digest("S", i, base, noise, tr["segmentation"], last_seg.key,
                                            prev_den.key if prev_den else None), last_seg.key)
            stages.append(s)
            last_seg = s
            upstream = s.key
        else:
            upstream = prev_den.key if prev_den else None
        d = Stage("D", i, stable_digest("D", i, variant, base, noise, den_arch, tr["denoising"], upstream,
                                        prev_den.key if prev_den else None))
        stages.append(d)
        prev_den = d
    if model["tail_segmentation"]:
        stages.append(Stage("S", n + 1, stable_digest("S", n + 1, base, noise, tr["segmentation"], last_seg.key,
                                                      prev_den.key), last_seg.key))
    return stages


def build_cascade(config: ExperimentConfig) -> CascadeParams:
    m, dt = config.model, config.dtype
    n_classes = config.dataset["classes"]
    block_variant = "conditioned" if config.variant == "joint" else config.variant
    blocks = [
        build_block(i, block_variant, n_classes, np.random.default_rng(derive_seed(config.seed, 1000 + i)),
                    seg_widths=m["seg_widths"], den_width=m["den_width"], sft_width=m["sft_width"],
                    dilations=m["dilations"], residual=m["residual"], dtype=dt)
        for i in range(1, config.blocks + 1)
    ]
    tail = None
    if m["tail_segmentation"] or config.variant == "joint":
        tail = SegNetTiny(n_classes, np.random.default_rng(derive_seed(config.seed, 2000)), m["seg_widths"], dtype=dt)
    return CascadeParams(blocks, tail)


def _stage_module(cascade: CascadeParams, stage: Stage, boot: SegNetTiny):
    if stage.kind == "J":
        return cascade
    if stage.unit == 0:
        return boot
    if stage.kind == "S":
        return cascade.tail_seg if stage.unit == cascade.n + 1 else cascade.blocks[stage.unit - 1].seg
    return cascade.blocks[stage.unit - 1].den


def _stage_seed(config: ExperimentConfig, stage: Stage) -> int:
    return derive_seed(config.seed, int(stage.key[:15], 16))


def checkpoint_dir(config: ExperimentConfig) -> Path:
    return config.output_dir / "checkpoints"


def _load_stage(path: Path, stage: Stage, module) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    if ckpt.config_digest != stage.key:
        raise CheckpointMismatchError(f"{path}: digest {ckpt.config_digest[:16]} does not match stage key")
    ckpt.load_into(module)
    return ckpt


def train_progressive(config: ExperimentConfig, retrain: bool = False) -> tuple[CascadeParams, list[Checkpoint]]:
    """Run (or resume) every planned stage in order; returns the trained cascade.

    Existing checkpoints whose key matches are loaded instead of retrained
    unless ``retrain`` is set. Each finished stage is on disk before the next
    one starts.
    """
    stages = plan_stages(config)
    cascade = build_cascade(config)
    boot = SegNetTiny(config.dataset["classes"], np.random.default_rng(derive_seed(config.seed, 999)),
                      config.model["seg_widths"], dtype=config.dtype)
    ckdir = checkpoint_dir(config)
    data = load_training_data(config)
    trained: dict[str, SegNetTiny] = {}
    out: list[Checkpoint] = []
    for stage in stages:
        module = _stage_module(cascade, stage, boot)
        path = ckdir / stage.filename()
        if path.exists() and not retrain:
            log.info("reusing %s from %s", stage.label, path.name)
            ckpt = _load_stage(path, stage, module)
        else:
            log.info("training %s", stage.label)
            seed = _stage_seed(config, stage)
            if stage.kind == "J":
                ckpt = train_joint(cascade, data, config.schedule("joint"), seed)
            elif stage.unit == 0:
                ckpt = train_clean_segmentation(boot, data, config.schedule("bootstrap"), seed)
            elif stage.kind == "S":
                init = trained[stage.init_key].state_dict()
                ckpt = train_segmentation_stage(stage.unit, cascade, data, config.schedule("segmentation"), seed, init)
            else:
                ckpt = train_denoising_stage(stage.unit, cascade, data, config.schedule("denoising"), seed)
            ckpt.config_digest = stage.key
            ckpt.save(path)
        if stage.kind == "S":
            trained[stage.key] = module
        out.append(ckpt)
    cascade.set_trainable(False)
    return cascade, out


def load_trained_cascade(config: ExperimentConfig) -> CascadeParams:
    cascade = build_cascade(config)
    boot = SegNetTiny(config.dataset["classes"], np.random.default_rng(0), config.model["seg_widths"], dtype=config.dtype)
    ckdir = checkpoint_dir(config)
    for stage in plan_stages(config):
        if stage.unit == 0:
            continue
        path = ckdir / stage.filename()
        if not path.exists():
            raise UsageError(f"missing checkpoint for stage {stage.label}: {path}")
        _load_stage(path, stage, _stage_module(cascade, stage, boot))
    cascade.set_trainable(False)
    return cascade


# --------------------------------------------------------------------------
# evaluation


def noisy_inputs(images: np.ndarray, indices: np.ndarray, noise: NoiseSpec, dtype) -> np.ndarray:
    return np.stack([corrupt(img, noise, int(i)) for img, i in zip(images, indices)]).astype(dtype)


def evaluate(cascade: CascadeParams, images: np.ndarray, labels: np.ndarray, indices: np.ndarray,
             noise: NoiseSpec, batch_size: int = 8, dtype=np.float64, dump_dir: Path | None = None,
             denoised_units: bool = True) -> list[M.MetricsRecord]:
    """Per-unit metrics over one split.

    Unit ``i`` pairs denoised image ``i`` with segmentation map ``i``; a
    trailing segmenter reports as unit ``n + 1`` with segmentation metrics
    only. ``denoised_units=False`` suppresses PSNR/SSIM (jointly trained
    cascades whose intermediates are unsupervised).
    """
    n_units = cascade.n + (1 if cascade.tail_seg is not None else 0)
    classes = [b.n_classes for b in cascade.blocks if b.n_classes] + (
        [cascade.tail_seg.n_classes] if cascade.tail_seg is not None else [])
    n_classes = classes[0] if classes else 2
    cms = [M.ConfusionMatrix(n_classes) for _ in range(n_units)]
    has_seg = [False] * n_units
    psnrs = [[] for _ in range(cascade.n)]
    ssims = [[] for _ in range(cascade.n)]
    y_all = noisy_inputs(images, indices, noise, dtype)
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            lab = labels[sl]
            probs, den = cascade_forward(cascade, Tensor(y_all[sl]), labels=lab)
            for u, p in enumerate(probs):
                if p is None:
                    continue
                has_seg[u] = True
                pred = M.argmax_labels(p.data)
                M.accumulate_confusion(cms[u], pred, lab)
                if dump_dir is not None:
                    for k, idx in enumerate(indices[sl]):
                        save_color_labels(pred[k], dump_dir / f"{int(idx):05d}_u{u + 1}_seg.png")
            for u, d in enumerate(den):
                out = np.asarray(d.data, dtype=np.float64)
                for k in range(out.shape[0]):
                    ref = images[start + k].transpose(1, 2, 0)
                    est = out[k].transpose(1, 2, 0)
                    psnrs[u].append(M.psnr(ref, est))
                    ssims[u].append(M.ssim(ref, est))
                    if dump_dir is not None:
                        save_image(est, dump_dir / f"{int(indices[start + k]):05d}_u{u + 1}_denoised.png")
    records = []
    for u in range(n_units):
        rec = M.MetricsRecord(unit_index=u + 1, sample_count=len(images))
        if denoised_units and u < cascade.n:
            rec.psnr = float(np.mean(psnrs[u]))
            rec.ssim = float(np.mean(ssims[u]))
        if has_seg[u]:
            rec.miou = M.miou(cms[u])
            rec.pixel_accuracy = M.pixel_accuracy(cms[u])
            rec.mean_accuracy = M.mean_accuracy(cms[u])
        if rec.values():
            records.append(rec)
    return records


def run_id(config: ExperimentConfig) -> str:
    tail = "+S" if config.model["tail_segmentation"] and config.variant != "joint" else ""
    return f"{config.name}-{config.variant}-x{config.blocks}{tail}-{config.noise.label}"


def evaluate_config(config: ExperimentConfig, cascade: CascadeParams, split: str = "test",
                    noise: NoiseSpec | None = None, dump_dir: Path | None = None) -> list[M.MetricsRecord]:
    images, labels, indices = load_split(config, split)
    return evaluate(cascade, images.astype(config.dtype), labels, indices, noise or config.noise,
                    config.eval_batch_size, config.dtype, dump_dir, denoised_units=config.variant != "joint")
