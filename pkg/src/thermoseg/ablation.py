"""Ablation harness: conditioning kind, GFT stage placement, initialization.

Each table row trains the same miniature network under one configuration
change and reports test pixAcc/mIoU averaged over seeds. Dataset generation
is pinned to fixed generator seeds so every row sees identical data.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import chain, combinations
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from . import config as precision_config
from .data import SynthSceneSpec, load_manifest, read_image_array, read_mask, thermogen
from .edges import edge_scales_array, stack_edges
from .metrics import ConfusionMatrix, mean_iou, pixel_accuracy, predict_mask
from .model import GFT_CANDIDATE_STAGES, ModelConfig, build_model
from .train import StageSpec, TrainConfig, progressive_train, train_stage

# generator seeds for the shared ablation datasets (model seeds vary per run)
GEN_SEED_TRAIN = 1001
GEN_SEED_TEST = 1002
GEN_SEED_VARIANT = 1003

ABLATION_SCENE = dict(size=32, num_objects=(3, 6), blur_sigma=0.7,
                      noise_sigma=0.03, crossover_rate=0.6)
VARIANT_SCENE = dict(size=32, num_objects=(2, 5), blur_sigma=0.9,
                     noise_sigma=0.02, crossover_rate=0.4)

ABLATION_MODEL = dict(stage_channels=(8, 16, 24, 32), blocks_per_stage=(1, 1, 1, 1),
                      aspp_channels=24, atrous_rates=(1, 2), num_classes=6)

ABLATION_TRAIN = dict(base_lr=0.05, power=0.9, momentum=0.9, weight_decay=0.0001,
                      epochs=8, batch_size=8, crop_size=32, scale_range=(0.75, 1.25),
                      augment="mirror", eval_every=0, eval_limit=24)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def ensure_datasets(data_dir, train_count: int = 200, test_count: int = 100) -> dict:
    """Generate (once) the train/test/variant datasets used by every ablation."""
    data_dir = Path(data_dir)
    out = {}
    jobs = [
        ("train", SynthSceneSpec(**ABLATION_SCENE), train_count, GEN_SEED_TRAIN),
        ("test", SynthSceneSpec(**ABLATION_SCENE), test_count, GEN_SEED_TEST),
        ("variant", SynthSceneSpec(**VARIANT_SCENE), train_count, GEN_SEED_VARIANT),
    ]
    for name, spec, count, seed in jobs:
        manifest_path = data_dir / name / "manifest.txt"
        if not manifest_path.exists():
            thermogen(spec, count, seed=seed, out_dir=data_dir / name,
                      split="train" if name != "test" else "test")
        out[name] = manifest_path
    return out


def test_samples(manifest_path, uses_edges: bool) -> list:
    """(image tensor, mask, edges) triples for the evaluation loop."""
    manifest = load_manifest(manifest_path, validate_labels=False)
    samples = []
    for e in manifest.entries:
        img = read_image_array(e.image)
        tensor = Tensor(img[None, None].astype(precision_config.dtype()))
        edges = stack_edges([edge_scales_array(img)]) if uses_edges else None
        samples.append((tensor, read_mask(e.mask), edges))
    return samples


def evaluate_on(model, samples, num_classes: int) -> tuple[float, float]:
    cm = ConfusionMatrix(num_classes)
    for tensor, mask, edges in samples:
        cm.update(predict_mask(model, tensor, edges), mask[None])
    return pixel_accuracy(cm), mean_iou(cm)


@dataclass
class AblationRow:
    label: str
    per_seed_miou: list
    per_seed_pixacc: list

    @property
    def mean_miou(self) -> float:
        return float(np.mean(self.per_seed_miou))

    @property
    def mean_pixacc(self) -> float:
        return float(np.mean(self.per_seed_pixacc))


def _train_cfg(seed: int, overrides: dict | None = None) -> TrainConfig:
    kw = dict(ABLATION_TRAIN)
    if overrides:
        kw.update(overrides)
    return TrainConfig(seed=seed, **kw)


def run_row(label: str, model_kwargs: dict, train_manifest, test_manifest,
            seeds=DEFAULT_SEEDS, train_overrides: dict | None = None,
            log=None) -> AblationRow:
    """Train/evaluate one configuration across seeds."""
    mious, pixaccs = [], []
    samples = None
    for seed in seeds:
        cfg = ModelConfig(seed=seed, **{**ABLATION_MODEL, **model_kwargs})
        model = build_model(cfg)
        train_stage(model, StageSpec(dataset=str(train_manifest)), _train_cfg(seed, train_overrides))
        if samples is None or (model.uses_edges and samples[0][2] is None):
            samples = test_samples(test_manifest, model.uses_edges)
        pixacc, miou = evaluate_on(model, samples, cfg.num_classes)
        mious.append(miou)
        pixaccs.append(pixacc)
        if log:
            log(f"  {label} seed {seed}: pixacc {pixacc:.4f} miou {miou:.4f}")
    return AblationRow(label, mious, pixaccs)


def conditioning_table(datasets: dict, seeds=DEFAULT_SEEDS, log=None) -> list[AblationRow]:
    """Baseline vs SFT vs GFT, conditioning inserted at conv2_x."""
    rows = [
        ("baseline", dict(gft_stages=())),
        ("sft", dict(gft_stages=("conv2_x",), conditioning="sft")),
        ("gft", dict(gft_stages=("conv2_x",), conditioning="gft")),
    ]
    return [run_row(label, kw, datasets["train"], datasets["test"], seeds, log=log)
            for label, kw in rows]


def stage_subsets() -> list[tuple]:
    names = GFT_CANDIDATE_STAGES
    return list(chain.from_iterable(combinations(names, r) for r in range(len(names) + 1)))


def stage_table(datasets: dict, seeds=DEFAULT_SEEDS, subsets=None, log=None) -> list[AblationRow]:
    """GFT placement sweep over stage subsets (empty subset = baseline)."""
    subsets = stage_subsets() if subsets is None else subsets
    out = []
    for subset in subsets:
        label = "+".join(subset) if subset else "baseline"
        out.append(run_row(label, dict(gft_stages=tuple(subset)),
                           datasets["train"], datasets["test"], seeds, log=log))
    return out


INIT_PRETRAIN_EPOCHS = 8
INIT_FINETUNE_EPOCHS = 4


def init_table(datasets: dict, seeds=DEFAULT_SEEDS, log=None) -> list[AblationRow]:
    """Initialization ablation: random vs pretrain-on-variant (head reset or carried)."""
    plans = {
        "random": [StageSpec(dataset=str(datasets["train"]), epochs=INIT_FINETUNE_EPOCHS)],
        "synthetic": [StageSpec(dataset=str(datasets["variant"]), epochs=INIT_PRETRAIN_EPOCHS),
                      StageSpec(dataset=str(datasets["train"]), epochs=INIT_FINETUNE_EPOCHS,
                                reset_classifier=True)],
        "carry": [StageSpec(dataset=str(datasets["variant"]), epochs=INIT_PRETRAIN_EPOCHS),
                  StageSpec(dataset=str(datasets["train"]), epochs=INIT_FINETUNE_EPOCHS)],
    }
    model_kwargs = {**ABLATION_MODEL, "gft_stages": ("conv2_x",)}
    rows = []
    samples = None
    for label, plan in plans.items():
        mious, pixaccs = [], []
        for seed in seeds:
            cfg = ModelConfig(seed=seed, **model_kwargs)
            result = progressive_train(plan, cfg, _train_cfg(seed))
            if samples is None:
                samples = test_samples(datasets["test"], result.model.uses_edges)
            pixacc, miou = evaluate_on(result.model, samples, cfg.num_classes)
            mious.append(miou)
            pixaccs.append(pixacc)
            if log:
                log(f"  {label} seed {seed}: pixacc {pixacc:.4f} miou {miou:.4f}")
        rows.append(AblationRow(label, mious, pixaccs))
    return rows


def bench_configs() -> list[tuple[str, dict]]:
    rows = [("baseline", dict(gft_stages=()))]
    rows += [(stage, dict(gft_stages=(stage,))) for stage in GFT_CANDIDATE_STAGES]
    return rows


def bench_table(image_hw=(64, 64), warmup: int = 2, reps: int = 7, seed: int = 0,
                n_images: int = 4) -> list[dict]:
    """Eval-mode per-image timing for the baseline and each single-stage GFT."""
    from .metrics import benchmark_inference

    rng = np.random.default_rng(seed)
    images = [rng.random(image_hw) for _ in range(n_images)]
    rows = []
    for label, kw in bench_configs():
        cfg = ModelConfig(seed=seed, **{**ABLATION_MODEL, **kw})
        model = build_model(cfg)
        batch = Tensor(np.stack(images)[:, None].astype(precision_config.dtype()))
        batch_edges = stack_edges([edge_scales_array(im) for im in images]) if model.uses_edges else None
        model.forward(batch, batch_edges, train=True)  # initialize BN running stats
        samples = []
        for im in images:
            tensor = Tensor(im[None, None].astype(precision_config.dtype()))
            edges = stack_edges([edge_scales_array(im)]) if model.uses_edges else None
            samples.append((tensor, None, edges))
        timing = benchmark_inference(model, samples, warmup=warmup, reps=reps)
        rows.append({"config": label, **timing})
    return rows
