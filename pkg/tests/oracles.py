"""Slow, obviously-correct reference implementations used by the tests.

Everything here is written with plain Python loops or scalar math so that it
shares no code path with the vectorised package implementation.
"""
from __future__ import annotations

import math

import numpy as np

IGNORE = 255


def conv2d_loops(x, w, b=None):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    p = (k - 1) // 2
    out = np.zeros((n, co, h, wd), dtype=np.float64)
    for i in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                yy, xq = y + ky - p, xx + kx - p
                                if 0 <= yy < h and 0 <= xq < wd:
                                    acc += float(x[i, ci, yy, xq]) * float(w[o, ci, ky, kx])
                    out[i, o, y, xx] = acc
    return out


def softmax_scalar(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def masked_ce_loops(logits, labels, ignore=IGNORE):
    n, c, h, w = logits.shape
    total, count = 0.0, 0
    for i in range(n):
        for y in range(h):
            for x in range(w):
                lab = int(labels[i, y, x])
                if lab == ignore:
                    continue
                p = softmax_scalar([float(logits[i, k, y, x]) for k in range(c)])
                total -= math.log(p[lab])
                count += 1
    return 0.0 if count == 0 else total / count


def info_nce_loops(anchors, positives, negatives_per_anchor, tau):
    """Mean of -log(exp(a.p/t) / (exp(a.p/t) + sum exp(a.n/t))) over anchors with negatives, in float64."""
    losses = []
    for a, p, negs in zip(anchors, positives, negatives_per_anchor):
        if len(negs) == 0:
            continue
        a, p = np.asarray(a, np.float64), np.asarray(p, np.float64)
        sp = float(np.dot(a, p)) / tau
        sn = [float(np.dot(a, np.asarray(n, np.float64))) / tau for n in negs]
        # -log(e^sp / (e^sp + sum e^sn)) = log(1 + sum e^(sn - sp)); log1p keeps tiny losses exact
        losses.append(math.log1p(math.fsum(math.exp(v - sp) for v in sn)))
    return sum(losses) / len(losses) if losses else 0.0


def prototypes_loops(feats, labels, weights, num_classes, thresholds=None):
    """Weighted mean per class over admissible pixels, then unit-normalised; None if undefined."""
    out = []
    for c in range(num_classes):
        acc = [0.0] * feats.shape[1]
        wsum = 0.0
        for f, lab, wt in zip(feats, labels, weights):
            if int(lab) != c:
                continue
            if thresholds is not None and not float(wt) > float(thresholds[c]):
                continue
            wsum += float(wt)
            for d in range(len(acc)):
                acc[d] += float(wt) * float(f[d])
        if wsum <= 0:
            out.append(None)
            continue
        mean = [v / wsum for v in acc]
        norm = math.sqrt(sum(v * v for v in mean))
        out.append([v / norm for v in mean] if norm > 1e-12 else [0.0] * len(mean))
    return out


def thresholds_sorting(prob_maps, tau0, top_fraction=0.1):
    """Per-class threshold via a full sort of each class's confidences."""
    c = prob_maps[0].shape[0]
    per_class = {k: [] for k in range(c)}
    for m in prob_maps:
        for y in range(m.shape[1]):
            for x in range(m.shape[2]):
                col = [float(m[k, y, x]) for k in range(c)]
                best = max(range(c), key=lambda k: (col[k], -k))
                per_class[best].append(col[best])
    out = []
    for k in range(c):
        vals = sorted(per_class[k], reverse=True)
        if not vals:
            out.append(tau0)
            continue
        rank = math.ceil(top_fraction * len(vals))
        out.append(min(tau0, vals[rank - 1]))
    return out


def pseudo_labels_loops(prob_map, tau):
    c, h, w = prob_map.shape
    lab = np.full((h, w), IGNORE, dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            col = [float(prob_map[k, y, x]) for k in range(c)]
            best = max(range(c), key=lambda k: (col[k], -k))
            if col[best] >= tau[best]:
                lab[y, x] = best
    return lab


def expansion_loops(labels, provenance, feats, protos, defined, max_dist):
    """Nearest-prototype (cosine distance) assignment for unlabelled pixels."""
    out = labels.copy()
    d, h, w = feats.shape
    for y in range(h):
        for x in range(w):
            if provenance[y, x] != 0:
                continue
            f = [float(feats[k, y, x]) for k in range(d)]
            nf = math.sqrt(sum(v * v for v in f))
            best, best_d = None, None
            for c in range(len(protos)):
                if not defined[c]:
                    continue
                p = [float(v) for v in protos[c]]
                np_ = math.sqrt(sum(v * v for v in p))
                cos = 0.0 if nf <= 1e-12 or np_ <= 1e-12 else sum(a * b for a, b in zip(f, p)) / (nf * np_)
                dist = 1.0 - cos
                if best_d is None or dist < best_d:
                    best, best_d = c, dist
            if best is not None and best_d <= max_dist:
                out[y, x] = best
    return out


def iou_sets(pred, gt, num_classes, ignore=IGNORE):
    """IoU per class from explicit pixel-index sets."""
    pred, gt = np.ravel(pred), np.ravel(gt)
    valid = {i for i in range(len(gt)) if gt[i] != ignore}
    ious = []
    for c in range(num_classes):
        g = {i for i in valid if gt[i] == c}
        p = {i for i in valid if pred[i] == c}
        union = g | p
        ious.append(float("nan") if not union else len(g & p) / len(union))
    present = [v for v in ious if v == v]
    return ious, (sum(present) / len(present) if present else float("nan"))


def resize_loops(img, size):
    """Half-pixel-centre bilinear resize with edge clamping, one output pixel at a time."""
    c, h, w = img.shape
    oh, ow = size
    out = np.zeros((c, oh, ow), dtype=np.float64)
    for y in range(oh):
        sy = min(max((y + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(ow):
            sx = min(max((x + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for k in range(c):
                top = img[k, y0, x0] * (1 - fx) + img[k, y0, x1] * fx
                bot = img[k, y1, x0] * (1 - fx) + img[k, y1, x1] * fx
                out[k, y, x] = top * (1 - fy) + bot * fy
    return out


def prototype_pair_oracle(anchor_domain, anchor_pixels, anchor_classes, proto_domain, proto_defined,
                          bank_classes=()):
    """Exhaustively enumerate (anchor, positive, negatives) for prototype pairing.

    Candidates are batch prototypes of ``proto_domain`` plus bank prototype
    entries given as (class, slot) tuples. Anchors whose class prototype is
    undefined are skipped; anchors without negatives are dropped.
    """
    cands = [(("proto", proto_domain, c), c) for c, ok in enumerate(proto_defined) if ok]
    cands += [(("bank_proto", proto_domain, c, s), c) for c, s in bank_classes]
    out, dropped = [], 0
    for pix, c in zip(anchor_pixels, anchor_classes):
        if not proto_defined[c]:
            continue
        negs = frozenset(ref for ref, k in cands if k != c)
        if not negs:
            dropped += 1
            continue
        out.append(((anchor_domain, int(pix)), ("proto", proto_domain, int(c)), negs))
    return out, dropped
