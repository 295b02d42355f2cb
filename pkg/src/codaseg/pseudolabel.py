"""Teacher-side pseudo labels: multi-scale prediction, adaptive thresholds,
and nearest-prototype label expansion."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import resize_bilinear
from .network import MIN_SIZE, ModelParams, forward
from .synthgen import IGNORE

log = logging.getLogger(__name__)

IGNORED, THRESHOLD_KEPT, EXPANSION_ASSIGNED = 0, 1, 2
DEFAULT_SCALES = (0.5, 1.0, 1.5)
FULL_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass
class PseudoLabelMap:
    label: np.ndarray  # uint8 [h,w], IGNORE where unlabeled
    confidence: np.ndarray  # float32 [h,w]
    provenance: np.ndarray  # uint8 [h,w]

    def copy(self) -> "PseudoLabelMap":
        return PseudoLabelMap(self.label.copy(), self.confidence.copy(), self.provenance.copy())

    def kept_labels(self) -> np.ndarray:
        """Labels restricted to threshold-kept pixels (expansion removed)."""
        return np.where(self.provenance == THRESHOLD_KEPT, self.label, IGNORE).astype(np.uint8)

    @property
    def coverage(self) -> float:
        return float(np.mean(self.label != IGNORE))


@dataclass
class ClassThresholds:
    tau: np.ndarray  # per class
    tau0: float
    tau_p: np.ndarray  # per class quantile (nan when class absent)


class ScaleError(RuntimeError):
    pass


def _softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def multiscale_predict(teacher: ModelParams, crop: np.ndarray, scales=DEFAULT_SCALES) -> np.ndarray:
    """Average teacher class probabilities over rescaled copies of ``crop``.

    Returns a [C,h,w] map whose per-pixel distributions sum to 1.
    """
    _, h, w = crop.shape
    acc, used = None, 0
    for s in scales:
        sh, sw = round(h * s), round(w * s)
        if min(sh, sw) < MIN_SIZE:
            log.info("skipping scale %.2f: %dx%d below minimum size", s, sh, sw)
            continue
        x = resize_bilinear(crop, (sh, sw))
        with ad.no_grad():
            logits = forward(teacher, x[None], with_embeddings=False).logits.data[0]
        prob = resize_bilinear(_softmax(logits.astype(np.float64), axis=0), (h, w))
        acc = prob if acc is None else acc + prob
        used += 1
    if used == 0:
        raise ScaleError(f"no usable scale for a {h}x{w} crop")
    acc = acc / used
    return (acc / acc.sum(axis=0, keepdims=True)).astype(np.float32)


def compute_class_thresholds(prob_maps, tau0: float = 0.9, top_fraction: float = 0.1) -> ClassThresholds:
    """Per-class tau_c = min(tau0, tau_p).

    tau_p is the confidence of the ceil(top_fraction * n_c)-th most confident
    pixel predicted as class c over the whole batch; absent classes get tau0.
    """
    maps = [np.asarray(p) for p in prob_maps]
    if not maps:
        raise ValueError("empty batch")
    c = maps[0].shape[0]
    conf = np.concatenate([m.max(axis=0).ravel() for m in maps])
    arg = np.concatenate([m.argmax(axis=0).ravel() for m in maps])
    tau = np.full(c, tau0, dtype=np.float64)
    tau_p = np.full(c, np.nan)
    for k in range(c):
        vals = conf[arg == k]
        if vals.size == 0:
            continue
        rank = math.ceil(top_fraction * vals.size)
        # rank-th highest == element at index n-rank of an ascending partition
        tau_p[k] = np.partition(vals, vals.size - rank)[vals.size - rank]
        tau[k] = min(tau0, tau_p[k])
    return ClassThresholds(tau, tau0, tau_p)


def generate_pseudo_labels(prob_map: np.ndarray, thresholds: ClassThresholds) -> PseudoLabelMap:
    arg = prob_map.argmax(axis=0)
    conf = prob_map.max(axis=0).astype(np.float32)
    keep = conf >= thresholds.tau[arg]
    label = np.where(keep, arg, IGNORE).astype(np.uint8)
    prov = np.where(keep, THRESHOLD_KEPT, IGNORED).astype(np.uint8)
    return PseudoLabelMap(label, conf, prov)


@dataclass
class ExpansionPrototypeBank:
    num_classes: int
    dim: int
    sums: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self.sums = np.zeros((self.num_classes, self.dim), dtype=np.float64)
        self.weights = np.zeros(self.num_classes, dtype=np.float64)
        self.counts = np.zeros(self.num_classes, dtype=np.int64)

    @property
    def defined(self) -> np.ndarray:
        return self.weights > 0

    def prototypes(self) -> np.ndarray:
        w = np.where(self.defined, self.weights, 1.0)
        return self.sums / w[:, None]

    def merge(self, other: "ExpansionPrototypeBank") -> None:
        self.sums += other.sums
        self.weights += other.weights
        self.counts += other.counts


def accumulate_expansion_prototypes(bank: ExpansionPrototypeBank, penultimate: np.ndarray,
                                    pseudo: PseudoLabelMap) -> ExpansionPrototypeBank:
    """Add confidence-weighted features of threshold-kept pixels to ``bank`` (in place)."""
    feats = np.asarray(penultimate, dtype=np.float64).reshape(bank.dim, -1).T
    kept = (pseudo.provenance == THRESHOLD_KEPT).ravel()
    cls = pseudo.label.ravel()[kept].astype(np.int64)
    w = pseudo.confidence.ravel()[kept].astype(np.float64)
    np.add.at(bank.sums, cls, feats[kept] * w[:, None])
    np.add.at(bank.weights, cls, w)
    np.add.at(bank.counts, cls, 1)
    return bank


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 1e-12, x / np.where(n > 1e-12, n, 1.0), 0.0)


def expand_labels(pseudo: PseudoLabelMap, penultimate: np.ndarray, bank: ExpansionPrototypeBank,
                  max_dist: float) -> PseudoLabelMap:
    """Give ignored pixels the class of the nearest prototype if it is close enough.

    Distance is cosine distance (1 - cos) between unit-normalised features and
    prototypes. Threshold-kept pixels are never touched.
    """
    out = pseudo.copy()
    defined = np.flatnonzero(bank.defined)
    if defined.size == 0:
        log.warning("expansion bank is empty; pseudo labels left unchanged")
        return out
    cand = (pseudo.provenance == IGNORED).ravel()
    if max_dist < 0 or not cand.any():
        return out
    feats = np.asarray(penultimate, dtype=np.float64).reshape(bank.dim, -1).T[cand]
    protos = _unit(bank.prototypes()[defined])
    dist = 1.0 - _unit(feats) @ protos.T
    best = dist.argmin(axis=1)
    ok = dist[np.arange(len(best)), best] <= max_dist
    idx = np.flatnonzero(cand)[ok]
    out.label.ravel()[idx] = defined[best[ok]]
    out.provenance.ravel()[idx] = EXPANSION_ASSIGNED
    return out
