"""Training loop: poly LR schedule, augmentation, staged (progressive) learning.

Everything is reproducible from the seed: shuffling and augmentation draw
from per-epoch generators, so two runs with identical configs produce
identical loss curves (bit-identical in float64 mode).
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as precision_config
from .autodiff import Tensor, backward, no_grad
from .checkpoint import load_arrays, save_arrays
from .data import DatasetManifest, load_manifest, read_image_array, read_mask
from .edges import edge_scales_array, stack_edges
from .metrics import ConfusionMatrix, mean_iou, pixel_accuracy, predict_mask
from .model import ModelConfig, SegModel, build_model
from .nn import sgd_step
from .ops import bilinear_resize, cross_entropy, nearest_resize

AUGMENT_MODES = ("none", "mirror", "full")


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 100
    batch_size: int = 8
    crop_size: int = 32
    scale_range: tuple = (0.5, 2.0)
    seed: int = 0
    augment: str = "full"
    ignore_index: int = 255
    eval_every: int = 1   # 0: evaluate only after the last epoch
    eval_limit: int = 0   # 0: evaluate on the whole eval set

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.power <= 0:
            raise ValueError(f"power must be positive, got {self.power}")
        lo, hi = self.scale_range
        if not lo < hi:
            raise ValueError(f"scale_range min must be < max, got {self.scale_range}")
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")


@dataclass
class StageSpec:
    dataset: str
    epochs: int = 0            # 0: use TrainConfig.epochs
    init: str = "carry"        # random | carry | <checkpoint path>
    reset_classifier: bool = False
    eval_dataset: str = ""


def poly_lr(base: float, iteration: int, max_iter: int, power: float) -> float:
    """base * (1 - iteration / max_iter) ** power."""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    with no_grad():
        out = bilinear_resize(Tensor(image[None, None].astype(precision_config.dtype())), out_h, out_w)
    return out.data[0, 0]


def augment(image: np.ndarray, mask: np.ndarray, rng, crop_size: int,
            scale_range: tuple = (0.5, 2.0), mode: str = "full",
            ignore_index: int = 255) -> tuple[np.ndarray, np.ndarray]:
    """Mirror / rescale / crop one (image, mask) pair with shared geometry.

    The mask travels by nearest neighbor so no new labels appear; padding
    fills the image with 0 and the mask with `ignore_index`. Edge maps are
    not transformed here: they are recomputed from the augmented image.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    if mode == "none":
        return image, mask
    if rng.random() < 0.5:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    if mode == "full":
        scale = rng.uniform(*scale_range)
        h, w = image.shape
        nh, nw = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
        if (nh, nw) != (h, w):
            image = _resize_image(image, nh, nw)
            mask = nearest_resize(mask, nh, nw)
        h, w = image.shape
        if h < crop_size or w < crop_size:
            ph, pw = max(crop_size - h, 0), max(crop_size - w, 0)
            image = np.pad(image, ((0, ph), (0, pw)))
            padded = np.full((h + ph, w + pw), ignore_index, dtype=mask.dtype)
            padded[:h, :w] = mask
            mask = padded
            h, w = image.shape
        oy = int(rng.integers(0, h - crop_size + 1))
        ox = int(rng.integers(0, w - crop_size + 1))
        image = image[oy:oy + crop_size, ox:ox + crop_size]
        mask = mask[oy:oy + crop_size, ox:ox + crop_size]
    return image, mask


@dataclass
class LoadedDataset:
    images: list
    masks: list
    class_names: list
    manifest: DatasetManifest

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.images)


def load_dataset(manifest: DatasetManifest | str | Path) -> LoadedDataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    images, masks = [], []
    for e in manifest.entries:
        images.append(read_image_array(e.image))
        masks.append(read_mask(e.mask, manifest.num_classes))
    return LoadedDataset(images, masks, manifest.class_names, manifest)


def _eval_samples(model: SegModel, dataset: LoadedDataset, limit: int, seed: int):
    """Pre-built (image tensor, mask, edges) triples for repeated evaluation."""
    indices = np.arange(len(dataset))
    if limit and len(dataset) > limit:
        indices = np.random.default_rng([seed, 977]).choice(len(dataset), size=limit, replace=False)
        indices.sort()
    samples = []
    for i in indices:
        img = dataset.images[i]
        tensor = Tensor(img[None, None].astype(precision_config.dtype()))
        edges = stack_edges([edge_scales_array(img)]) if model.uses_edges else None
        samples.append((tensor, dataset.masks[i], edges))
    return samples


@dataclass
class TrainResult:
    history: list
    best_miou: float
    best_path: Path | None
    final_path: Path | None
    model: SegModel


def train_stage(model: SegModel, stage: StageSpec, config: TrainConfig,
                out_dir: str | Path | None = None, tag: str = "stage") -> TrainResult:
    """Train `model` on one stage's dataset; returns history and checkpoints."""
    dataset = load_dataset(stage.dataset)
    if len(dataset) == 0:
        raise ValueError(f"stage dataset {stage.dataset} is empty")
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes but the model head has "
                         f"{model.config.num_classes}; use reset_classifier in a staged plan")
    eval_set = load_dataset(stage.eval_dataset) if stage.eval_dataset else dataset
    epochs = stage.epochs or config.epochs
    params = model.parameters()
    n = len(dataset)
    batches_per_epoch = math.ceil(n / config.batch_size)
    max_iter = epochs * batches_per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    eval_samples = None
    history = []
    best_miou = -1.0
    best_path = out_dir / f"{tag}_best.eccn" if out_dir else None
    iteration = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([config.seed & 0xFFFFFFFF, epoch])
        order = rng.permutation(n)
        losses = []
        for b in range(batches_per_epoch):
            chosen = order[b * config.batch_size:(b + 1) * config.batch_size]
            imgs, labels = [], []
            for i in chosen:
                img, msk = augment(dataset.images[i], dataset.masks[i], rng, config.crop_size,
                                   config.scale_range, config.augment, config.ignore_index)
                imgs.append(img)
                labels.append(msk)
            x = Tensor(np.stack(imgs)[:, None].astype(precision_config.dtype()))
            y = np.stack(labels)
            edges = stack_edges([edge_scales_array(im) for im in imgs]) if model.uses_edges else None
            lr = poly_lr(config.base_lr, iteration, max_iter, config.power)
            loss = cross_entropy(model.forward(x, edges, train=True), y, config.ignore_index)
            backward(loss)
            sgd_step(params, lr, config.momentum, config.weight_decay)
            losses.append(loss.item())
            iteration += 1

        row = {"epoch": epoch, "loss": float(np.mean(losses)), "pixacc": float("nan"), "miou": float("nan")}
        due = (config.eval_every and (epoch + 1) % config.eval_every == 0) or epoch == epochs - 1
        if due:
            if eval_samples is None:
                eval_samples = _eval_samples(model, eval_set, config.eval_limit, config.seed)
            cm = ConfusionMatrix(model.config.num_classes)
            for tensor, mask, edges in eval_samples:
                cm.update(predict_mask(model, tensor, edges), mask[None], config.ignore_index)
            row["pixacc"] = pixel_accuracy(cm)
            row["miou"] = mean_iou(cm)
            if row["miou"] > best_miou:
                best_miou = row["miou"]
                if best_path is not None:
                    save_arrays(model.state_dict(), best_path)
        history.append(row)

    final_path = None
    if out_dir is not None:
        final_path = out_dir / f"{tag}_final.eccn"
        save_arrays(model.state_dict(), final_path)
        with open(out_dir / f"{tag}_history.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "pixacc", "miou"])
            writer.writeheader()
            writer.writerows(history)
    return TrainResult(history, best_miou, best_path, final_path, model)


def progressive_train(plan: list[StageSpec], model_config: ModelConfig, config: TrainConfig,
                      out_dir: str | Path | None = None) -> TrainResult:
    """Run stages in order, carrying weights and resetting the classifier
    where flagged; returns the last stage's result."""
    if not plan:
        raise ValueError("progressive plan needs at least one stage")
    carried_state = None
    carried_classes = None
    result = None
    for si, stage in enumerate(plan):
        manifest = load_manifest(stage.dataset, validate_labels=False)
        k = manifest.num_classes
        model = build_model(replace(model_config, num_classes=k))
        if stage.init not in ("random", "carry"):
            model.load_state_dict(load_arrays(stage.init),
                                  skip_prefixes=("classifier",) if stage.reset_classifier else ())
        elif stage.init == "carry" and si > 0:
            if carried_classes != k and not stage.reset_classifier:
                raise ValueError(f"stage {si}: class count changes {carried_classes} -> {k} "
                                 f"but reset_classifier is off")
            model.load_state_dict(carried_state,
                                  skip_prefixes=("classifier",) if stage.reset_classifier or carried_classes != k else ())
        stage_dir = Path(out_dir) / f"stage{si}" if out_dir is not None else None
        result = train_stage(model, stage, config, stage_dir, tag=f"stage{si}")
        carried_state = model.state_dict()
        carried_classes = k
    return result


def load_stage_plan(path) -> list[StageSpec]:
    """Stage plan file: one INI section per stage, in file order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"stage plan not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    plan = []
    for section in parser.sections():
        sec = parser[section]
        if "dataset" not in sec:
            raise ValueError(f"stage plan section [{section}] is missing 'dataset'")
        plan.append(StageSpec(
            dataset=str((path.parent / sec["dataset"]).resolve()),
            epochs=sec.getint("epochs", 0),
            init=sec.get("init", "carry"),
            reset_classifier=sec.getboolean("reset_classifier", False),
            eval_dataset=str((path.parent / sec["eval_dataset"]).resolve()) if sec.get("eval_dataset") else "",
        ))
    if not plan:
        raise ValueError(f"stage plan {path} has no stages")
    return plan
