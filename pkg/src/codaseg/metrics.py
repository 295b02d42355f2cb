"""Evaluation: confusion matrices, IoU, cross-domain prototype distances, embedding export.

This is the only module that reads target evaluation labels.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .network import ModelParams, forward
from .pseudolabel import compute_class_thresholds
from .synthgen import IGNORE, DomainPairDataset

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """Rows are ground truth, columns prediction; IGNORE pixels are skipped."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        ok = gt != IGNORE
        c = self.num_classes
        self.counts += np.bincount(gt[ok] * c + pred[ok], minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou(conf: ConfusionMatrix):
    """Per-class IoU (nan where the class is absent from both) and their mean."""
    tp = np.diag(conf.counts).astype(np.float64)
    fp = conf.counts.sum(axis=0) - tp
    fn = conf.counts.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    included = union > 0
    miou = float(np.mean(per_class[included])) if included.any() else float("nan")
    return per_class, miou


def _workers():
    return max(1, int(os.environ.get("CODASEG_THREADS", "1")))


def predict(params: ModelParams, images: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            logits = forward(params, images[i:i + batch], with_embeddings=False).logits.data
            out.append(logits.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_split(params: ModelParams, dataset: DomainPairDataset, split: str = "target",
                   shards: int = 1) -> ConfusionMatrix:
    if split == "target":
        images, labels = dataset.target_images, dataset.target_eval_labels
    elif split == "source":
        images, labels = dataset.source_images, dataset.source_labels
    else:
        raise ValueError(f"unknown split {split!r}")
    c = dataset.num_classes
    parts = np.array_split(np.arange(len(images)), max(1, shards))

    def one(idx):
        cm = ConfusionMatrix(c)
        if len(idx):
            cm.add(predict(params, images[idx]), labels[idx])
        return cm

    if _workers() > 1 and len(parts) > 1:
        with ThreadPoolExecutor(_workers()) as ex:
            cms = list(ex.map(one, parts))
    else:
        cms = [one(p) for p in parts]
    out = cms[0]
    for cm in cms[1:]:
        out = out.merge(cm)
    return out


def miou_on(params, dataset, split="target") -> float:
    return iou(evaluate_split(params, dataset, split))[1]


def write_iou_csv(conf: ConfusionMatrix, path) -> None:
    per_class, miou = iou(conf)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou", "included"])
        for k, v in enumerate(per_class):
            w.writerow([k, "" if np.isnan(v) else f"{v:.6f}", int(not np.isnan(v))])
        w.writerow(["mean", f"{miou:.6f}", int(np.sum(~np.isnan(per_class)))])


# ---------------------------------------------------------------------------
# prototype alignment


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 1e-12, n, 1.0)


def _split_features(params, images, space, batch=16):
    feats, probs = [], []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            out = forward(params, images[i:i + batch], with_embeddings=(space == "embedding"))
            f = out.embeddings.data if space == "embedding" else out.penultimate.data
            feats.append(f.astype(np.float64))
            lg = out.logits.data.astype(np.float64)
            e = np.exp(lg - lg.max(axis=1, keepdims=True))
            probs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(feats), np.concatenate(probs)


def class_prototypes(feats: np.ndarray, labels: np.ndarray, num_classes: int, weights=None) -> np.ndarray:
    """Weighted per-class mean of [N,D,H,W] features, unit-normalised; nan rows when undefined."""
    d = feats.shape[1]
    f = feats.transpose(0, 2, 3, 1).reshape(-1, d)
    lab = np.asarray(labels).ravel()
    w = np.ones(lab.size) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    out = np.full((num_classes, d), np.nan)
    for c in range(num_classes):
        m = lab == c
        if m.any() and w[m].sum() > 0:
            out[c] = _unit((w[m, None] * f[m]).sum(axis=0) / w[m].sum())
    return out


def prototype_distances(protos_a: np.ndarray, protos_b: np.ndarray):
    """Per-class L2 distance between unit prototypes (nan if missing) and the mean over defined ones."""
    d = np.linalg.norm(protos_a - protos_b, axis=1)
    ok = ~np.isnan(d)
    return d, float(d[ok].mean()) if ok.any() else float("nan")


def prototype_distance_diagnostic(params: ModelParams, dataset: DomainPairDataset, space: str = "penultimate",
                                  tau0: float = 0.9):
    """Cross-domain prototype distances for a model.

    Source prototypes use ground truth with unit weights. Target prototypes use
    the model's own confident predictions weighted by their probability, with
    the same adaptive per-class thresholds as pseudo labelling.
    """
    c = dataset.num_classes
    fs, _ = _split_features(params, dataset.source_images, space)
    ft, pt = _split_features(params, dataset.target_images, space)
    src = class_prototypes(fs, dataset.source_labels, c)
    thr = compute_class_thresholds(list(pt), tau0)
    arg = pt.argmax(axis=1)
    conf = pt.max(axis=1)
    keep = conf > thr.tau[arg]
    tgt = class_prototypes(ft, np.where(keep, arg, IGNORE), c, np.where(keep, conf, 0.0))
    return prototype_distances(src, tgt)


def write_distance_csv(dist: np.ndarray, mean: float, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "distance"])
        for k, v in enumerate(dist):
            w.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["mean", f"{mean:.6f}"])


def export_embeddings(params: ModelParams, dataset: DomainPairDataset, samples_per_class: int, path,
                      seed: int = 0) -> int:
    """Write sampled projection embeddings as CSV rows ``domain,class,e0..eD-1``; returns row count."""
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "class"] + [f"e{i}" for i in range(params.arch.embed_dim)])
        for domain, images, labels in (
            ("source", dataset.source_images, dataset.source_labels),
            ("target", dataset.target_images, dataset.target_eval_labels),
        ):
            emb, _ = _split_features(params, images, "embedding")
            flat = emb.transpose(0, 2, 3, 1).reshape(-1, emb.shape[1])
            lab = labels.ravel()
            for c in range(dataset.num_classes):
                idx = np.flatnonzero(lab == c)
                if idx.size > samples_per_class:
                    idx = np.sort(rng.choice(idx, samples_per_class, replace=False))
                for i in idx:
                    w.writerow([domain, c] + [f"{v:.7g}" for v in flat[i]])
                    rows += 1
    return rows
