"""Paired image / label-map augmentation.

Geometry is done by inverse mapping: every output pixel centre is pulled back
through flip, rotation and scaling into the input image, which is sampled
bilinearly while label maps are sampled nearest-neighbour. Pixels that land
outside the input get the fill colour (image) or IGNORE (labels).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthgen import IGNORE


@dataclass
class AugmentParams:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    cutout: tuple[int, int] = (0, 12)
    scale: tuple[float, float] = (0.4, 2.5)
    rotation: tuple[float, float] = (-45.0, 45.0)
    crop_size: int | None = None  # None: same as the input
    flip_p: float = 0.5
    max_scale_retries: int = 10

    def validate(self):
        for lo, hi in (self.cutout, self.scale, self.rotation):
            if lo > hi:
                raise ValueError(f"range ({lo}, {hi}) is not ordered")
        for p in (self.grayscale_p, self.flip_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0,1]")
        if self.scale[0] <= 0:
            raise ValueError("scale must be positive")

    @classmethod
    def disabled(cls, crop_size=None):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (0, 0), (1.0, 1.0), (0.0, 0.0), crop_size, 0.0)


@dataclass
class GeometricTransform:
    scale: float
    angle: float  # degrees, counter-clockwise
    flip: bool
    offset: tuple[int, int]  # crop origin in the scaled canvas (may be negative: padding)
    canvas: tuple[int, int]
    out_size: tuple[int, int]


# ---------------------------------------------------------------------------
# sampling helpers


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at fractional pixel-index coordinates (edge clamped)."""
    _, h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)
    wx = (xs - x0).astype(img.dtype)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a [C,H,W] array."""
    _, h, w = img.shape
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, yy, xx)


def source_coords(tf: GeometricTransform):
    """Input-image coordinates (continuous, pixel centres at k+0.5) of each output pixel."""
    oh, ow = tf.out_size
    ch, cw = tf.canvas
    yy, xx = np.meshgrid(np.arange(oh) + 0.5 + tf.offset[0], np.arange(ow) + 0.5 + tf.offset[1], indexing="ij")
    if tf.flip:
        xx = cw - xx
    if tf.angle:
        t = np.deg2rad(tf.angle)
        cy, cx = ch / 2.0, cw / 2.0
        dy, dx = yy - cy, xx - cx
        # inverse of a counter-clockwise rotation (image y axis points down)
        xx = cx + np.cos(t) * dx - np.sin(t) * dy
        yy = cy + np.sin(t) * dx + np.cos(t) * dy
    inside_canvas = (yy >= 0) & (yy < ch) & (xx >= 0) & (xx < cw)
    return yy / tf.scale, xx / tf.scale, inside_canvas


def warp(image: np.ndarray, maps, tf: GeometricTransform, fill_color, map_fills):
    """Apply ``tf`` to an image (bilinear) and any number of label-like maps (nearest)."""
    _, h, w = image.shape
    ys, xs, inside = source_coords(tf)
    inside &= (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    out = bilinear_sample(image, ys - 0.5, xs - 0.5)
    fill = np.asarray(fill_color, dtype=image.dtype).reshape(-1, 1, 1)
    out = np.where(inside[None], out, fill).astype(image.dtype)
    yi = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    warped = []
    for m, f in zip(maps, map_fills):
        warped.append(np.where(inside, m[yi, xi], f).astype(m.dtype))
    return out, warped


def sample_geometry(params: AugmentParams, shape: tuple[int, int], rng) -> GeometricTransform:
    h, w = shape
    ch_, cw_ = (params.crop_size, params.crop_size) if params.crop_size else (h, w)
    s = float(rng.uniform(*params.scale))
    for _ in range(params.max_scale_retries):
        if round(s * h) >= ch_ and round(s * w) >= cw_:
            break
        s = float(rng.uniform(*params.scale))
    canvas = (max(1, round(s * h)), max(1, round(s * w)))
    angle = float(rng.uniform(*params.rotation))
    flip = bool(rng.random() < params.flip_p)
    # a canvas smaller than the crop is centred and padded with IGNORE
    oy = int(rng.integers(0, canvas[0] - ch_ + 1)) if canvas[0] >= ch_ else -((ch_ - canvas[0]) // 2)
    ox = int(rng.integers(0, canvas[1] - cw_ + 1)) if canvas[1] >= cw_ else -((cw_ - canvas[1]) // 2)
    return GeometricTransform(s, angle, flip, (oy, ox), canvas, (ch_, cw_))


# ---------------------------------------------------------------------------
# photometric


def _gray(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def rgb_to_hsv(img):
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) / 6.0
    h = np.where(d > 0, h, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape, dtype=hsv.dtype)
    for k, (a, b, c) in enumerate(choices):
        m = i == k
        out[0][m], out[1][m], out[2][m] = a[m], b[m], c[m]
    return out


def photometric(image: np.ndarray, params: AugmentParams, rng, fill_color) -> np.ndarray:
    img = image.astype(np.float64)
    if params.brightness > 0:
        img = img * rng.uniform(1 - params.brightness, 1 + params.brightness)
    if params.contrast > 0:
        m = _gray(img).mean()
        img = m + (img - m) * rng.uniform(1 - params.contrast, 1 + params.contrast)
    img = np.clip(img, 0, 1)
    if params.saturation > 0:
        g = _gray(img)[None]
        img = np.clip(g + (img - g) * rng.uniform(1 - params.saturation, 1 + params.saturation), 0, 1)
    if params.hue > 0:
        hsv = rgb_to_hsv(img)
        hsv[0] = (hsv[0] + rng.uniform(-params.hue, params.hue)) % 1.0
        img = hsv_to_rgb(hsv)
    if params.grayscale_p > 0 and rng.random() < params.grayscale_p:
        img = np.repeat(_gray(img)[None], 3, axis=0)
    lo, hi = params.cutout
    if hi > 0:
        size = int(rng.integers(lo, hi + 1))
        if size > 0:
            _, h, w = img.shape
            cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
            y0, x0 = max(0, cy - size // 2), max(0, cx - size // 2)
            img[:, y0:y0 + size, x0:x0 + size] = np.asarray(fill_color, dtype=np.float64).reshape(3, 1, 1)
    return img.astype(image.dtype)


def augment_pair(image: np.ndarray, labels: np.ndarray, params: AugmentParams, rng,
                 fill_color=None, extra_maps=(), extra_fills=()):
    """Augment an image and its label map consistently.

    Photometric changes (colour jitter, grayscale, CutOut) touch the image
    only; scale, rotation, flip and crop move image and labels together.
    ``extra_maps`` (e.g. confidences) are transported like ``labels`` and
    returned as a third element when given.
    """
    if image.shape[1:] != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ spatially")
    if fill_color is None:
        fill_color = image.reshape(image.shape[0], -1).mean(axis=1)
    tf = sample_geometry(params, labels.shape, rng)
    img = photometric(image, params, rng, fill_color)
    img, maps = warp(img, [labels, *extra_maps], tf, fill_color, [IGNORE, *extra_fills])
    if extra_maps:
        return img, maps[0], maps[1:]
    return img, maps[0]
