"""Pre-training and self-training schedules."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import contrastive as ctr
from .augment import AugmentParams, augment_pair
from .autodiff import Tensor
from .network import (
    BACKBONE_PREFIX, CLASSIFIER_PREFIX, PROJECTION_PREFIX, ArchConfig, ModelParams,
    copy_student_to_teacher, forward, init_params, make_teacher,
)
from .pseudolabel import (
    DEFAULT_SCALES, THRESHOLD_KEPT, ExpansionPrototypeBank, accumulate_expansion_prototypes,
    compute_class_thresholds, expand_labels, generate_pseudo_labels, multiscale_predict,
)
from .synthgen import IGNORE, AdaptationData, channel_stats, statistics_transfer

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss", "ce_src", "ce_tgt", "l_in", "l_cross", "miou_tgt", "pseudo_coverage", "expanded_px"]


class NumericError(RuntimeError):
    def __init__(self, message, last_good: ModelParams | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    lam: float = 0.1
    alpha: float = 0.1
    tau: float = 0.07
    tau0: float = 0.9
    period: int = 200
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_pretrain: float = 0.01
    lr_contrast_pretrain: float = 1e-4
    lr_selftrain: float = 1e-3
    lr_head_finetune: float = 1e-3
    lr_schedule: str = "constant"  # or "poly"
    head_finetune_epochs: int = 5
    pretrain_iters: int = 600
    contrast_pretrain_iters: int = 200
    selftrain_iters: int = 2000
    batch_size: int = 8
    crop_size: int = 48
    scales: tuple[float, ...] = DEFAULT_SCALES
    bank_capacity: int = 256
    k_batch: int = 64
    max_dist: float = 0.3
    transfer: bool = True
    contrast_pretrain: bool = True
    source_positives: str = "bank"
    log_every: int = 100
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    aug: AugmentParams = field(default_factory=AugmentParams)

    def validate(self):
        rates = (self.lr_pretrain, self.lr_contrast_pretrain, self.lr_selftrain, self.lr_head_finetune)
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.period <= 0 or self.log_every <= 0 or self.batch_size < 2:
            raise ValueError("period, log_every must be positive and batch_size >= 2")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        self.aug.validate()


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self):
        for p, b in zip(self.params, self.buf):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + self.weight_decay * p.data
            b *= self.momentum
            b += g
            p.data = (p.data - self.lr * b).astype(p.data.dtype)
        self.steps += 1

    def zero_grad(self):
        ad.zero_grad(self.params)


def _lr(cfg: TrainConfig, base: float, it: int, total: int) -> float:
    if cfg.lr_schedule == "poly":
        return base * (1 - it / max(total, 1)) ** 0.9
    return base


def total_loss(ce_source, ce_target, l_in, l_cross, lam: float, alpha: float):
    """L = (ce_source + lam * ce_target) + alpha * (l_in + l_cross); Tensors or floats."""
    if isinstance(ce_source, Tensor):
        cls = ad.add(ce_source, ad.scale(ce_target, lam))
        if alpha == 0:
            return cls
        return ad.add(cls, ad.scale(ad.add(l_in, l_cross), alpha))
    cls = ce_source + lam * ce_target
    return cls if alpha == 0 else cls + alpha * (l_in + l_cross)


# ---------------------------------------------------------------------------
# data helpers


def _crop(arr, y, x, size):
    return arr[..., y:y + size, x:x + size]


def _random_crop_origin(rng, shape, size):
    h, w = shape
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def translate_source(data: AdaptationData) -> np.ndarray:
    """Map source images onto the target split's per-channel statistics.

    One affine map per channel, fitted on whole-split statistics, so every
    source image gets the same colour correction.
    """
    mu_s, sd_s = channel_stats(data.source_images)
    mu_t, sd_t = channel_stats(data.target_images)
    out = np.empty_like(data.source_images)
    for i, img in enumerate(data.source_images):
        out[i] = statistics_transfer(img, mu_t, np.maximum(sd_t, 1e-3), source_mean=mu_s, source_std=sd_s)
    return out


def _source_batch(images, labels, idx, rng, crop, flip=True):
    xs, ys = [], []
    for i in idx:
        y0, x0 = _random_crop_origin(rng, labels.shape[1:], crop)
        img, lab = _crop(images[i], y0, x0, crop), _crop(labels[i], y0, x0, crop)
        if flip and rng.random() < 0.5:
            img, lab = img[..., ::-1], lab[..., ::-1]
        xs.append(img)
        ys.append(lab)
    return np.ascontiguousarray(np.stack(xs)), np.ascontiguousarray(np.stack(ys))


def _check_finite(value, what, params):
    if not np.isfinite(value):
        raise NumericError(f"{what} became {value}", params)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PhaseLog:
    losses: list = field(default_factory=list)
    skipped: int = 0
    steps: int = 0


def pretrain_source(data: AdaptationData, cfg: TrainConfig, params: ModelParams | None = None,
                    log_out: PhaseLog | None = None) -> ModelParams:
    """Supervised cross-entropy on (optionally statistics-transferred) source crops."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
    if params is None:
        params = init_params(replace(cfg.arch, num_classes=data.num_classes), cfg.seed)
    images = translate_source(data) if cfg.transfer else data.source_images
    trainable = params.group(BACKBONE_PREFIX) + params.group(CLASSIFIER_PREFIX)
    opt = SGD(trainable, cfg.lr_pretrain, cfg.momentum, cfg.weight_decay)
    plog = log_out if log_out is not None else PhaseLog()
    for it in range(cfg.pretrain_iters):
        idx = rng.integers(0, data.n_source, cfg.batch_size)
        x, y = _source_batch(images, data.source_labels, idx, rng, cfg.crop_size)
        opt.zero_grad()
        out = forward(params, x, with_embeddings=False)
        loss = ad.masked_cross_entropy(out.logits, y, IGNORE)
        _check_finite(loss.item(), "source cross-entropy", params)
        ad.backward(loss, trainable)
        opt.lr = _lr(cfg, cfg.lr_pretrain, it, cfg.pretrain_iters)
        opt.step()
        plog.losses.append(loss.item())
    plog.steps = opt.steps
    return params


def _teacher_pseudo_labels(teacher, crops, cfg, bank=None):
    probs = [multiscale_predict(teacher, c, cfg.scales) for c in crops]
    thr = compute_class_thresholds(probs, cfg.tau0)
    maps = [generate_pseudo_labels(p, thr) for p in probs]
    feats = None
    if bank is not None:
        with ad.no_grad():
            feats = forward(teacher, np.stack(crops), with_embeddings=False).penultimate.data
    return probs, thr, maps, feats


def _augment_target(crops, maps, cfg, rng):
    xs, labs, confs, provs = [], [], [], []
    for crop, pl in zip(crops, maps):
        img, lab, (conf, prov) = augment_pair(crop, pl.label, cfg.aug, rng,
                                              extra_maps=(pl.confidence, pl.provenance), extra_fills=(0.0, 0))
        xs.append(img)
        labs.append(lab)
        confs.append(conf)
        provs.append(prov)
    return np.stack(xs), np.stack(labs), np.stack(confs), np.stack(provs)


def _augment_source(images, labels, cfg, rng):
    xs, ys = [], []
    for img, lab in zip(images, labels):
        a, b = augment_pair(img, lab, cfg.aug, rng)
        xs.append(a)
        ys.append(b)
    return np.stack(xs), np.stack(ys)


def pretrain_contrastive_target(params: ModelParams, data: AdaptationData, cfg: TrainConfig,
                                log_out: PhaseLog | None = None) -> ModelParams:
    """Contrastive-only training on target crops.

    Classes come from pseudo labels of the frozen incoming model; only the
    backbone and projection head are updated, the classifier is untouched.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 2]))
    frozen = make_teacher(params)
    c = params.arch.num_classes
    bank = ctr.MemoryBank(c, params.arch.embed_dim, cfg.bank_capacity)
    trainable = params.group(BACKBONE_PREFIX) + params.group(PROJECTION_PREFIX)
    opt = SGD(trainable, cfg.lr_contrast_pretrain, cfg.momentum, cfg.weight_decay)
    plog = log_out if log_out is not None else PhaseLog()
    for it in range(cfg.contrast_pretrain_iters):
        idx = rng.integers(0, data.n_target, cfg.batch_size)
        crops = []
        for i in idx:
            y0, x0 = _random_crop_origin(rng, data.target_images.shape[2:], cfg.crop_size)
            crops.append(_crop(data.target_images[i], y0, x0, cfg.crop_size))
        _, thr, maps, _ = _teacher_pseudo_labels(frozen, crops, cfg)
        x, lab, conf, prov = _augment_target(crops, maps, cfg, rng)
        kept = np.where(prov == THRESHOLD_KEPT, lab, IGNORE)
        if not np.any(kept != IGNORE):
            plog.skipped += 1
            continue
        opt.zero_grad()
        out = forward(params, x)
        flat = ctr.flatten_embeddings(out.embeddings)
        protos = ctr.compute_contrastive_prototypes(flat, kept, c, conf, thr, "target")
        anchors = ctr.gather_anchors(flat, ctr.sample_anchors(kept, cfg.k_batch, rng, c), "target")
        pairs = ctr.prototype_pairs(anchors, protos, bank, cfg.tau)
        loss, _ = ctr.contrastive_loss(pairs)
        if not loss.requires_grad:
            plog.skipped += 1
            ctr.bank_push_from_batch(bank, anchors, protos)
            continue
        _check_finite(loss.item(), "contrastive loss", params)
        ad.backward(loss, trainable)
        opt.lr = _lr(cfg, cfg.lr_contrast_pretrain, it, cfg.contrast_pretrain_iters)
        opt.step()
        ctr.bank_push_from_batch(bank, anchors, protos)
        plog.losses.append(loss.item())
    plog.steps = opt.steps
    return params


def finetune_head(params: ModelParams, data: AdaptationData, cfg: TrainConfig,
                  log_out: PhaseLog | None = None) -> ModelParams:
    """Retrain only the classifier on translated source crops, backbone frozen."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 3]))
    images = translate_source(data) if cfg.transfer else data.source_images
    head = params.group(CLASSIFIER_PREFIX)
    opt = SGD(head, cfg.lr_head_finetune, cfg.momentum, cfg.weight_decay)
    plog = log_out if log_out is not None else PhaseLog()
    steps_per_epoch = math.ceil(data.n_source / cfg.batch_size)
    frozen = ModelParams(params.arch, {n: Tensor(t.data) for n, t in params.items()})
    for n in params:
        if n.startswith(CLASSIFIER_PREFIX):
            frozen[n] = params[n]
    for _ in range(cfg.head_finetune_epochs):
        order = rng.permutation(data.n_source)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            x, y = _source_batch(images, data.source_labels, idx, rng, cfg.crop_size)
            opt.zero_grad()
            out = forward(frozen, x, with_embeddings=False)
            loss = ad.masked_cross_entropy(out.logits, y, IGNORE)
            _check_finite(loss.item(), "head fine-tune loss", params)
            ad.backward(loss, head)
            opt.step()
            plog.losses.append(loss.item())
    plog.steps = opt.steps
    return params


def pretrain_all(data: AdaptationData, cfg: TrainConfig) -> ModelParams:
    """The full pre-training stage: source supervision, target contrast, head fine-tune."""
    params = pretrain_source(data, cfg)
    if cfg.contrast_pretrain:
        params = pretrain_contrastive_target(params, data, cfg)
        params = finetune_head(params, data, cfg)
    return params


# ---------------------------------------------------------------------------
# self-training


@dataclass
class SelfTrainLog:
    history: list = field(default_factory=list)  # one dict per iteration
    rows: list = field(default_factory=list)  # CSV rows, every log_every iterations
    teacher_copies: list = field(default_factory=list)
    expansion_overwrites: int = 0
    dropped_anchors: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow([r[k] for k in METRICS_HEADER])


def selftrain(params: ModelParams, data: AdaptationData, cfg: TrainConfig,
              evaluate: Callable[[ModelParams], float] | None = None,
              on_pseudo: Callable | None = None) -> tuple[ModelParams, SelfTrainLog]:
    """Teacher/student self-training with contrastive alignment and label expansion.

    ``evaluate`` (optional) maps the student to a target mIoU for the metric
    rows; it is the only route by which evaluation labels may be consulted.
    ``on_pseudo(before, after)`` is called for every crop's pseudo-label map
    before and after expansion.
    """
    cfg.validate()
    if not isinstance(data, AdaptationData):
        raise TypeError("selftrain takes the label-free adaptation view of a dataset")
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 4]))
    c = params.arch.num_classes
    teacher = make_teacher(params)
    ebank = ExpansionPrototypeBank(c, params.arch.feat_dim)
    bank_src = ctr.MemoryBank(c, params.arch.embed_dim, cfg.bank_capacity)
    bank_tgt = ctr.MemoryBank(c, params.arch.embed_dim, cfg.bank_capacity)
    trainable = list(params.values())
    for t in trainable:
        t.requires_grad = True
    opt = SGD(trainable, cfg.lr_selftrain, cfg.momentum, cfg.weight_decay)
    slog = SelfTrainLog()
    nb = cfg.batch_size // 2
    last_good = params.clone()

    for it in range(cfg.selftrain_iters):
        if it % cfg.period == 0:
            copy_student_to_teacher(params, teacher)
            ebank.reset()
            slog.teacher_copies.append(it)

        s_idx = rng.integers(0, data.n_source, nb)
        t_idx = rng.integers(0, data.n_target, nb)
        s_img, s_lab = [], []
        for i in s_idx:
            y0, x0 = _random_crop_origin(rng, data.source_labels.shape[1:], cfg.crop_size)
            s_img.append(_crop(data.source_images[i], y0, x0, cfg.crop_size))
            s_lab.append(_crop(data.source_labels[i], y0, x0, cfg.crop_size))
        t_crops = []
        for i in t_idx:
            y0, x0 = _random_crop_origin(rng, data.target_images.shape[2:], cfg.crop_size)
            t_crops.append(_crop(data.target_images[i], y0, x0, cfg.crop_size))

        # teacher on unaugmented target crops
        _, thr, maps, feats = _teacher_pseudo_labels(teacher, t_crops, cfg, bank=ebank)
        for pl, f in zip(maps, feats):
            accumulate_expansion_prototypes(ebank, f, pl)
        expanded_px = 0
        if cfg.max_dist >= 0:
            new_maps = []
            for pl, f in zip(maps, feats):
                ex = expand_labels(pl, f, ebank, cfg.max_dist)
                kept = pl.provenance == THRESHOLD_KEPT
                if not (np.array_equal(ex.label[kept], pl.label[kept])
                        and np.array_equal(ex.confidence[kept], pl.confidence[kept])):
                    slog.expansion_overwrites += 1
                if on_pseudo is not None:
                    on_pseudo(pl, ex)
                expanded_px += int(np.sum(ex.provenance != pl.provenance))
                new_maps.append(ex)
            maps = new_maps
        coverage = float(np.mean([m.coverage for m in maps]))

        # student inputs
        xs, ys = _augment_source(s_img, s_lab, cfg, rng)
        xt, yt, conf_t, prov_t = _augment_target(t_crops, maps, cfg, rng)
        x = np.concatenate([xs, xt]).astype(np.float32)

        opt.zero_grad()
        out = forward(params, x, with_embeddings=cfg.alpha > 0)
        logits_s = ad.take_range(out.logits, 0, nb)
        logits_t = ad.take_range(out.logits, nb, 2 * nb)
        ce_s = ad.masked_cross_entropy(logits_s, ys, IGNORE)
        ce_t = ad.masked_cross_entropy(logits_t, yt, IGNORE)
        l_in = l_cross = Tensor(np.zeros((), dtype=np.float32))
        if cfg.alpha > 0:
            flat = ctr.flatten_embeddings(out.embeddings)
            hw = cfg.crop_size * cfg.crop_size
            flat_s = ad.take_range(flat, 0, nb * hw)
            flat_t = ad.take_range(flat, nb * hw, 2 * nb * hw)
            kept_t = np.where(prov_t == THRESHOLD_KEPT, yt, IGNORE)
            protos_s = ctr.compute_contrastive_prototypes(flat_s, ys, c, domain="source")
            protos_t = ctr.compute_contrastive_prototypes(flat_t, kept_t, c, conf_t, thr, "target")
            anc_s = ctr.gather_anchors(flat_s, ctr.sample_anchors(ys, cfg.k_batch, rng, c), "source")
            anc_t = ctr.gather_anchors(flat_t, ctr.sample_anchors(kept_t, cfg.k_batch, rng, c), "target")
            p_in_s, p_in_t, p_cross = ctr.build_pairs(anc_s, anc_t, protos_s, protos_t, bank_src, bank_tgt,
                                                      rng, cfg.tau, cfg.source_positives)
            l_in_s, d1 = ctr.contrastive_loss(p_in_s)
            l_in_t, d2 = ctr.contrastive_loss(p_in_t)
            l_cross, d3 = ctr.contrastive_loss(p_cross)
            l_in = ad.add(l_in_s, l_in_t)
            slog.dropped_anchors += d1 + d2 + d3
        loss = total_loss(ce_s, ce_t, l_in, l_cross, cfg.lam, cfg.alpha)
        if not np.isfinite(loss.item()):
            raise NumericError(f"loss became {loss.item()} at iteration {it}", last_good)
        ad.backward(loss, trainable)
        opt.lr = _lr(cfg, cfg.lr_selftrain, it, cfg.selftrain_iters)
        if (it + 1) % cfg.period == 0:
            last_good = params.clone()
        opt.step()
        if cfg.alpha > 0:
            ctr.bank_push_from_batch(bank_src, anc_s, protos_s)
            ctr.bank_push_from_batch(bank_tgt, anc_t, protos_t)

        rec = {
            "iter": it, "loss": loss.item(), "ce_src": ce_s.item(), "ce_tgt": ce_t.item(),
            "l_in": l_in.item(), "l_cross": l_cross.item(), "pseudo_coverage": coverage,
            "expanded_px": expanded_px,
        }
        slog.history.append(rec)
        if it % cfg.log_every == 0 or it == cfg.selftrain_iters - 1:
            row = dict(rec, miou_tgt=float(evaluate(params)) if evaluate else float("nan"))
            slog.rows.append(row)
            log.info("iter %d loss %.4f cov %.3f exp %d", it, rec["loss"], coverage, expanded_px)
    return params, slog

