"""Toy-scale ablation study: source-only, pre-training, contrast, contrast plus expansion."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .augment import AugmentParams
from .metrics import evaluate_split, iou, prototype_distance_diagnostic
from .network import ModelParams
from .synthgen import DomainPairDataset, config_for_manifest, default_config, generate_dataset
from .trainer import SelfTrainLog, TrainConfig, pretrain_all, pretrain_source, selftrain

# condition name -> (alpha on, expansion on); None means no self-training
CONDITIONS = {
    "source_only": None,
    "pretrain": (False, False),
    "contrast": (True, False),
    "full": (True, True),
}

N_IMAGES = 96


def ablation_config(seed: int) -> TrainConfig:
    """Shortened schedule that keeps every condition within a few minutes on one CPU core."""
    # class identity on the toy benchmark is mostly colour, so photometric jitter is kept mild
    aug = AugmentParams(brightness=0.1, contrast=0.1, saturation=0.1, hue=0.0, grayscale_p=0.0)
    return TrainConfig(pretrain_iters=300, contrast_pretrain_iters=100, selftrain_iters=400, crop_size=32,
                       lr_contrast_pretrain=1e-4, head_finetune_epochs=30, seed=seed, aug=aug)


def ablation_dataset(seed: int, n_images: int = N_IMAGES) -> DomainPairDataset:
    return generate_dataset(default_config(), seed, n_images, n_images)


@dataclass
class ConditionResult:
    name: str
    miou: float
    per_class: np.ndarray
    rare_iou: float
    distance: float
    seconds: float
    params: ModelParams
    log: SelfTrainLog | None = None
    label_reads: int = 0  # target ground-truth reads during training


def run_ablation(dataset: DomainPairDataset, cfg: TrainConfig, conditions=tuple(CONDITIONS),
                 on_pseudo: Callable | None = None) -> dict[str, ConditionResult]:
    """Train and evaluate each requested condition on one dataset.

    Self-training conditions share one pre-trained model. Its training time is
    charged to every condition that uses it.
    """
    view = dataset.adaptation_view()
    rare = list(config_for_manifest(dataset.manifest).rare_classes)
    out = {}
    shared, shared_secs = None, 0.0
    for name in conditions:
        mode = CONDITIONS[name]
        reads = dataset.eval_label_reads
        t0 = time.perf_counter()
        log = None
        if mode is None:
            params = pretrain_source(view, replace(cfg, transfer=False))
            secs = time.perf_counter() - t0
        else:
            if shared is None:
                shared = pretrain_all(view, cfg)
                shared_secs = time.perf_counter() - t0
                t0 = time.perf_counter()
            contrast, expand = mode
            run_cfg = replace(cfg, alpha=cfg.alpha if contrast else 0.0, max_dist=cfg.max_dist if expand else -1.0)
            params, log = selftrain(shared.clone(), view, run_cfg, on_pseudo=on_pseudo)
            secs = shared_secs + time.perf_counter() - t0
        reads = dataset.eval_label_reads - reads
        per_class, miou = iou(evaluate_split(params, dataset, "target"))
        rare_iou = float(np.nanmean(per_class[rare])) if rare else float("nan")
        _, dist = prototype_distance_diagnostic(params, dataset)
        out[name] = ConditionResult(name, miou, per_class, rare_iou, dist, secs, params, log, reads)
    return out
