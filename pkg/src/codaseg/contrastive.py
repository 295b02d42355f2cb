"""Pixel/prototype contrastive pairs across and within domains.

Vectors live in the projection-head space and are unit length. Batch
prototypes and anchors stay on the autodiff tape; everything read from the
memory bank enters as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .synthgen import IGNORE

DEFAULT_TAU = 0.07


def flatten_embeddings(emb: Tensor) -> Tensor:
    """[N,D,H,W] (or [D,H,W]) -> [N*H*W, D], pixel order matching labels.ravel()."""
    if emb.ndim == 3:
        emb = ad.reshape(emb, (1,) + emb.shape)
    n, d, h, w = emb.shape
    return ad.reshape(ad.transpose(emb, (0, 2, 3, 1)), (n * h * w, d))


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class ContrastivePrototypes:
    vectors: Tensor  # [C,D], zero rows where undefined
    defined: np.ndarray  # bool [C]
    domain: str

    def defined_ids(self) -> np.ndarray:
        return np.flatnonzero(self.defined)


def admissible_mask(labels, num_classes, weights=None, thresholds=None) -> np.ndarray:
    """Boolean [C,P]: pixel p is in F_c."""
    labels = np.asarray(labels).ravel()
    member = labels[None, :] == np.arange(num_classes)[:, None]
    if thresholds is not None:
        w = np.asarray(weights, dtype=np.float64).ravel()
        tau = np.asarray(thresholds.tau if hasattr(thresholds, "tau") else thresholds, dtype=np.float64)
        member &= w[None, :] > tau[:, None]
    return member


def compute_contrastive_prototypes(embeddings: Tensor, labels, num_classes: int, weights=None,
                                   thresholds=None, domain: str = "source") -> ContrastivePrototypes:
    """Confidence-weighted class means of embeddings, renormalised to unit length.

    ``embeddings`` is [P,D] (or a [D,h,w] map), ``labels`` the per-pixel class
    (IGNORE excluded). On the target pass the teacher confidences as
    ``weights`` and the class thresholds; pixels join F_c only if their weight
    exceeds tau_c. Without weights every labelled pixel counts with weight 1.
    """
    if embeddings.ndim == 3:
        embeddings = flatten_embeddings(embeddings)
    labels = np.asarray(labels).ravel()
    if labels.size != embeddings.shape[0]:
        raise ad.ShapeError("labels and embeddings disagree on pixel count")
    member = admissible_mask(labels, num_classes, weights, thresholds)
    w = np.ones(labels.size) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    wmat = np.where(member, w[None, :], 0.0)
    totals = wmat.sum(axis=1)
    defined = totals > 0
    dt = embeddings.data.dtype
    inv = np.where(defined, 1.0 / np.where(defined, totals, 1.0), 0.0)
    summed = ad.matmul(Tensor(wmat.astype(dt)), embeddings)
    mean = ad.mul(summed, Tensor(np.broadcast_to(inv[:, None], summed.shape).astype(dt)))
    return ContrastivePrototypes(ad.l2_normalize(mean, axis=1), defined, domain)


# ---------------------------------------------------------------------------
# anchors


@dataclass
class Anchors:
    domain: str
    vectors: Tensor  # [A,D]
    classes: np.ndarray  # [A]
    pixels: np.ndarray  # [A] indices into the flattened batch


def sample_anchors(labels, k_batch: int, rng, num_classes: int, eligible=None) -> dict[int, np.ndarray]:
    """Up to ``k_batch`` pixel indices per class, uniformly without replacement."""
    if k_batch < 1:
        raise ValueError("k_batch must be >= 1")
    labels = np.asarray(labels).ravel()
    ok = labels != IGNORE
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool).ravel()
    out = {}
    for c in range(num_classes):
        idx = np.flatnonzero(ok & (labels == c))
        if idx.size == 0:
            continue
        if idx.size > k_batch:
            idx = np.sort(rng.choice(idx, size=k_batch, replace=False))
        out[c] = idx
    return out


def gather_anchors(flat_emb: Tensor, per_class: dict[int, np.ndarray], domain: str) -> Anchors:
    if per_class:
        pix = np.concatenate([per_class[c] for c in sorted(per_class)])
        cls = np.concatenate([np.full(len(per_class[c]), c) for c in sorted(per_class)])
    else:
        pix = np.zeros(0, dtype=np.int64)
        cls = np.zeros(0, dtype=np.int64)
    return Anchors(domain, ad.gather_rows(flat_emb, pix), cls, pix)


# ---------------------------------------------------------------------------
# memory bank


class MemoryBank:
    """Per-class FIFO ring buffers of unit vectors at pixel and prototype level."""

    LEVELS = ("pixel", "prototype")

    def __init__(self, num_classes: int, dim: int, capacity: int):
        self.num_classes = num_classes
        self.dim = dim
        self.capacity = capacity
        self.buffers = {lv: np.zeros((num_classes, capacity, dim), dtype=np.float32) for lv in self.LEVELS}
        self.cursor = {lv: np.zeros(num_classes, dtype=np.int64) for lv in self.LEVELS}
        self.fill = {lv: np.zeros(num_classes, dtype=np.int64) for lv in self.LEVELS}

    def push(self, level: str, cls: int, vectors) -> None:
        vecs = np.asarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        if len(vecs) > self.capacity:
            vecs = vecs[-self.capacity:]
        k = self.capacity
        cur = int(self.cursor[level][cls])
        slots = (cur + np.arange(len(vecs))) % k
        self.buffers[level][cls, slots] = vecs
        self.cursor[level][cls] = (cur + len(vecs)) % k
        self.fill[level][cls] = min(k, int(self.fill[level][cls]) + len(vecs))

    def entries(self, level: str, cls: int) -> np.ndarray:
        """Stored vectors of one class, oldest first."""
        n = int(self.fill[level][cls])
        buf = self.buffers[level][cls]
        if n < self.capacity:
            return buf[:n].copy()
        return np.roll(buf, -int(self.cursor[level][cls]), axis=0).copy()

    def pool(self, level: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All entries of a level: (vectors [M,D], class [M], slot-in-class [M])."""
        vecs, cls, slot = [], [], []
        for c in range(self.num_classes):
            e = self.entries(level, c)
            vecs.append(e)
            cls.append(np.full(len(e), c))
            slot.append(np.arange(len(e)))
        return (np.concatenate(vecs).reshape(-1, self.dim), np.concatenate(cls).astype(np.int64),
                np.concatenate(slot).astype(np.int64))


def memory_bank_update(bank: MemoryBank, pixels: dict | None = None, prototypes: dict | None = None) -> MemoryBank:
    for c, v in sorted((pixels or {}).items()):
        bank.push("pixel", c, v)
    for c, v in sorted((prototypes or {}).items()):
        bank.push("prototype", c, v)
    return bank


# ---------------------------------------------------------------------------
# pairs


@dataclass
class PairSet:
    anchors: Tensor  # [A,D]
    positives: Tensor  # [A,D]
    pool: Tensor  # [M,D] candidate negatives
    neg_mask: np.ndarray  # bool [A,M]
    tau: float = DEFAULT_TAU
    # bookkeeping for inspection: one tuple per anchor / positive / pool row
    anchor_ref: list = field(default_factory=list)
    pos_ref: list = field(default_factory=list)
    pool_ref: list = field(default_factory=list)
    dropped: int = 0

    def __len__(self):
        return self.anchors.shape[0]

    def triples(self):
        """(anchor, positive, frozenset(negatives)) per anchor, by reference."""
        return [(a, p, frozenset(self.pool_ref[j] for j in np.flatnonzero(row)))
                for a, p, row in zip(self.anchor_ref, self.pos_ref, self.neg_mask)]


def _empty_pairs(dim, dtype, tau) -> PairSet:
    z = Tensor(np.zeros((0, dim), dtype=dtype))
    return PairSet(z, z, z, np.zeros((0, 0), dtype=bool), tau)


def merge_pairsets(sets: list[PairSet]) -> PairSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return None
    if len(sets) == 1:
        return sets[0]
    m_sizes = [s.pool.shape[0] for s in sets]
    mask = np.zeros((sum(len(s) for s in sets), sum(m_sizes)), dtype=bool)
    r = c = 0
    for s in sets:
        mask[r:r + len(s), c:c + s.pool.shape[0]] = s.neg_mask
        r += len(s)
        c += s.pool.shape[0]
    return PairSet(
        ad.concat([s.anchors for s in sets]), ad.concat([s.positives for s in sets]),
        ad.concat([s.pool for s in sets]), mask, sets[0].tau,
        sum((s.anchor_ref for s in sets), []), sum((s.pos_ref for s in sets), []),
        sum((s.pool_ref for s in sets), []), sum(s.dropped for s in sets),
    )


def _finish(anchors: Anchors, keep, pos: Tensor, pos_ref, pool: Tensor, pool_cls, pool_ref, tau) -> PairSet:
    keep = np.asarray(keep, dtype=np.int64)
    a_cls = anchors.classes[keep]
    mask = a_cls[:, None] != np.asarray(pool_cls)[None, :]
    no_neg = ~mask.any(axis=1) if mask.shape[1] else np.ones(len(keep), dtype=bool)
    good = ~no_neg
    sel = keep[good]
    return PairSet(
        ad.gather_rows(anchors.vectors, sel),
        ad.gather_rows(pos, np.flatnonzero(good)),
        pool,
        mask[good],
        tau,
        [(anchors.domain, int(anchors.pixels[i])) for i in sel],
        [pos_ref[i] for i in np.flatnonzero(good)],
        list(pool_ref),
        int(no_neg.sum()),
    )


def _proto_pool(protos: ContrastivePrototypes, bank: MemoryBank | None, dtype):
    ids = protos.defined_ids()
    parts = [ad.gather_rows(protos.vectors, ids)]
    cls = [ids]
    refs = [("proto", protos.domain, int(c)) for c in ids]
    if bank is not None:
        vecs, bcls, slot = bank.pool("prototype")
        parts.append(Tensor(vecs.astype(dtype)))
        cls.append(bcls)
        refs += [("bank_proto", protos.domain, int(c), int(s)) for c, s in zip(bcls, slot)]
    return ad.concat(parts), np.concatenate(cls), refs


def prototype_pairs(anchors: Anchors, protos: ContrastivePrototypes, bank: MemoryBank | None,
                    tau: float = DEFAULT_TAU) -> PairSet:
    """Anchor vs. own-class prototype (positive) and other-class prototypes (negatives)."""
    dt = anchors.vectors.data.dtype
    keep = np.flatnonzero(protos.defined[anchors.classes]) if len(anchors.classes) else np.zeros(0, np.int64)
    if keep.size == 0:
        return _empty_pairs(anchors.vectors.shape[1], dt, tau)
    pos = ad.gather_rows(protos.vectors, anchors.classes[keep])
    pos_ref = [("proto", protos.domain, int(c)) for c in anchors.classes[keep]]
    pool, pool_cls, pool_ref = _proto_pool(protos, bank, dt)
    return _finish(anchors, keep, pos, pos_ref, pool, pool_cls, pool_ref, tau)


def supervised_pixel_pairs(anchors: Anchors, bank: MemoryBank | None, rng, tau: float = DEFAULT_TAU,
                           positives_from: str = "bank") -> PairSet:
    """Same-class pixel positives; other-class pixels as negatives.

    ``positives_from="bank"`` draws the positive and negatives from the bank's
    pixel level; ``"batch"`` uses other anchors of the current batch.
    """
    dt = anchors.vectors.data.dtype
    d = anchors.vectors.shape[1]
    cls = anchors.classes
    if positives_from == "batch":
        keep, pos_rows = [], []
        for i, c in enumerate(cls):
            same = np.flatnonzero((cls == c) & (np.arange(len(cls)) != i))
            if same.size:
                keep.append(i)
                pos_rows.append(int(rng.choice(same)))
        if not keep:
            return _empty_pairs(d, dt, tau)
        pos = ad.gather_rows(anchors.vectors, pos_rows)
        pos_ref = [(anchors.domain, int(anchors.pixels[j])) for j in pos_rows]
        pool_ref = [(anchors.domain, int(p)) for p in anchors.pixels]
        return _finish(anchors, keep, pos, pos_ref, anchors.vectors, cls, pool_ref, tau)
    if positives_from != "bank":
        raise ValueError(f"unknown positive source {positives_from!r}")
    if bank is None:
        return _empty_pairs(d, dt, tau)
    vecs, bcls, slot = bank.pool("pixel")
    keep, pos_rows = [], []
    for i, c in enumerate(cls):
        same = np.flatnonzero(bcls == c)
        if same.size:
            keep.append(i)
            pos_rows.append(int(rng.choice(same)))
    if not keep:
        return _empty_pairs(d, dt, tau)
    pos = Tensor(vecs[pos_rows].astype(dt))
    pos_ref = [("bank_pix", anchors.domain, int(bcls[j]), int(slot[j])) for j in pos_rows]
    pool_ref = [("bank_pix", anchors.domain, int(c), int(s)) for c, s in zip(bcls, slot)]
    return _finish(anchors, keep, pos, pos_ref, Tensor(vecs.astype(dt)), bcls, pool_ref, tau)


def build_pairs(src_anchors: Anchors, tgt_anchors: Anchors | None, protos_src: ContrastivePrototypes,
                protos_tgt: ContrastivePrototypes | None, bank_src: MemoryBank | None,
                bank_tgt: MemoryBank | None, rng, tau: float = DEFAULT_TAU, positives_from: str = "bank"):
    """Return (in-domain source, in-domain target, cross-domain) pair sets; any may be None."""
    in_src = merge_pairsets([
        supervised_pixel_pairs(src_anchors, bank_src, rng, tau, positives_from),
        prototype_pairs(src_anchors, protos_src, bank_src, tau),
    ])
    in_tgt = cross = None
    if protos_tgt is not None:
        if tgt_anchors is not None:
            in_tgt = merge_pairsets([prototype_pairs(tgt_anchors, protos_tgt, bank_tgt, tau)])
        cross = merge_pairsets([prototype_pairs(src_anchors, protos_tgt, bank_tgt, tau)])
    return in_src, in_tgt, cross


def contrastive_loss(pairs: PairSet | None) -> tuple[Tensor, int]:
    """Mean InfoNCE over anchors; returns (loss, anchors dropped for lack of negatives)."""
    if pairs is None or len(pairs) == 0:
        return Tensor(np.zeros((), dtype=np.float32)), 0
    # similarities and the loss are formed in float64: at small temperatures float32
    # logits lose too much precision once the loss gets close to zero
    dt = pairs.anchors.data.dtype
    anchors, positives, pool = (ad.cast(t, np.float64) for t in (pairs.anchors, pairs.positives, pairs.pool))
    inv_tau = 1.0 / pairs.tau
    pos = ad.scale(ad.rowwise_dot(anchors, positives), inv_tau)
    if pool.shape[0] == 0:
        neg = Tensor(np.zeros((len(pairs), 0)))
    else:
        neg = ad.scale(ad.matmul(anchors, ad.transpose(pool, (1, 0))), inv_tau)
    loss, dropped = ad.info_nce(pos, neg, pairs.neg_mask)
    return ad.cast(loss, dt), dropped + pairs.dropped


def bank_push_from_batch(bank: MemoryBank, anchors: Anchors, protos: ContrastivePrototypes) -> None:
    pixels = {int(c): anchors.vectors.data[anchors.classes == c] for c in np.unique(anchors.classes)}
    prot = {int(c): protos.vectors.data[c] for c in protos.defined_ids()}
    memory_bank_update(bank, pixels, prot)
