"""Procedural paired-domain segmentation benchmark.

Scenes are a sky/road style band pair (classes 0 and 1) overlaid with a few
large regions and some small objects. Each class has a mean colour, a noise
level and a stripe texture. The texture is shared by both domains while the
colours are shifted in the target, so colour is a domain-specific cue and
texture a domain-invariant one.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence([seed,
domain, index])``; every image has its own stream, so serial and parallel
generation give the same bytes on every platform.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import read_tensor, write_tensor

IGNORE = 255
DOMAINS = ("source", "target")


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 8
    # per domain, per class sampling probability for regions and objects
    class_frequency: dict = field(default_factory=dict)
    # per domain: [C,3] mean colours in [0,1]; [C] noise std
    palette: dict = field(default_factory=dict)
    noise_std: dict = field(default_factory=dict)
    # [C,2] stripe (period in px, orientation in radians); shared by domains
    texture: np.ndarray | None = None
    texture_amplitude: float = 0.08
    rare_classes: tuple[int, ...] = ()
    # rare classes are confined to small objects only in these domains
    small_only_domains: tuple[str, ...] = ("source",)
    palette_divergence: float = 0.0
    illumination_jitter: float = 0.1
    n_large: tuple[int, int] = (1, 3)
    large_extent: tuple[int, int] = (32, 64)
    n_small: tuple[int, int] = (0, 5)
    small_extent: tuple[int, int] = (4, 12)

    def validate(self) -> None:
        c = self.num_classes
        h, w = self.image_size
        if min(h, w) < 8:
            raise ConfigError("image_size must be at least 8x8")
        for d in DOMAINS:
            f = np.asarray(self.class_frequency.get(d, ()), dtype=float)
            if f.shape != (c,):
                raise ConfigError(f"class_frequency[{d}] needs {c} entries")
            if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-6:
                raise ConfigError(f"class_frequency[{d}] must be non-negative and sum to 1")
            if np.asarray(self.palette.get(d)).shape != (c, 3):
                raise ConfigError(f"palette[{d}] must be [{c},3]")
            if np.asarray(self.noise_std.get(d)).shape != (c,):
                raise ConfigError(f"noise_std[{d}] must have {c} entries")
        src = np.asarray(self.class_frequency["source"])
        tgt = np.asarray(self.class_frequency["target"])
        both = np.flatnonzero((src == 0) & (tgt == 0) & (np.arange(c) > 1))
        if both.size:
            raise ConfigError(f"classes {both.tolist()} have zero frequency in both domains")
        if np.any(tgt[2:] == 0):
            raise ConfigError("every class needs nonzero target frequency")
        if any(r < 2 or r >= c for r in self.rare_classes):
            raise ConfigError("rare classes must be region classes (ids 2..C-1)")


# Fixed colour directions for the default palette shift: a common tint plus a
# class-specific component. Rows cover up to 12 classes.
_SOURCE_COLOURS = np.array([
    [0.55, 0.70, 0.90],  # 0 sky
    [0.35, 0.35, 0.38],  # 1 road
    [0.70, 0.30, 0.25],  # 2 building
    [0.25, 0.60, 0.25],  # 3 vegetation
    [0.80, 0.75, 0.30],  # 4 sign
    [0.55, 0.30, 0.65],  # 5 vehicle
    [0.90, 0.50, 0.70],  # 6 rare: rider
    [0.20, 0.70, 0.75],  # 7 rare: bicycle
    [0.60, 0.55, 0.45],
    [0.30, 0.30, 0.70],
    [0.75, 0.55, 0.20],
    [0.45, 0.80, 0.55],
])
_TINT = np.array([-0.10, -0.06, 0.06])
_CLASS_SHIFT = np.array([
    [0.00, -0.05, -0.10],
    [0.06, 0.04, 0.00],
    [-0.10, 0.12, 0.06],
    [0.12, -0.08, 0.10],
    [-0.12, 0.06, 0.14],
    [0.10, 0.14, -0.12],
    [-0.09, 0.05, 0.06],  # the default rare classes get a milder shift so
    [0.09, -0.07, -0.04],  # some target pixels stay recognisable
    [0.08, 0.08, -0.10],
    [0.10, -0.10, 0.08],
    [-0.08, 0.10, 0.10],
    [0.10, -0.12, 0.06],
])


def default_config(
    num_classes: int = 8,
    image_size: tuple[int, int] = (64, 64),
    palette_divergence: float = 1.0,
    rare_classes: tuple[int, ...] = (6, 7),
    rare_source_frequency: float = 0.01,
    rare_target_frequency: float | None = None,
) -> SceneConfig:
    """Toy benchmark config: divergence 0 gives identical domains."""
    if not 3 <= num_classes <= len(_SOURCE_COLOURS):
        raise ConfigError(f"default palette supports 3..{len(_SOURCE_COLOURS)} classes")
    c = num_classes
    rare = tuple(r for r in rare_classes if 2 <= r < c)
    region = np.arange(2, c)
    common = [k for k in region if k not in rare]

    def freqs(rare_f):
        f = np.zeros(c)
        f[list(rare)] = rare_f
        f[common] = (1.0 - rare_f * len(rare)) / len(common)
        return f

    uniform = 1.0 / len(region)
    src_pal = _SOURCE_COLOURS[:c].copy()
    tgt_pal = np.clip(src_pal + palette_divergence * (_TINT + _CLASS_SHIFT[:c]), 0.0, 1.0)
    noise = np.full(c, 0.05)
    periods = np.linspace(3.0, 7.0, c)
    angles = np.linspace(0.0, np.pi, c, endpoint=False)
    return SceneConfig(
        image_size=image_size,
        num_classes=c,
        class_frequency={
            "source": freqs(rare_source_frequency),
            "target": freqs(uniform if rare_target_frequency is None else rare_target_frequency),
        },
        palette={"source": src_pal, "target": tgt_pal},
        noise_std={"source": noise.copy(), "target": noise.copy()},
        texture=np.stack([periods, angles], axis=1),
        rare_classes=rare,
        palette_divergence=palette_divergence,
    )


# ---------------------------------------------------------------------------
# rendering


def _sub_rng(seed: int, domain: str, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, DOMAINS.index(domain), index])))


def _pick(rng, freq) -> int:
    p = np.asarray(freq, dtype=float)
    return int(rng.choice(len(p), p=p / p.sum()))


def _draw_shape(labels, cls, cy, cx, hh, hw, ellipse):
    h, w = labels.shape
    yy, xx = np.ogrid[:h, :w]
    if ellipse:
        m = ((yy - cy) / max(hh, 0.5)) ** 2 + ((xx - cx) / max(hw, 0.5)) ** 2 <= 1.0
    else:
        m = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    labels[m] = cls


def _mean_small_area(lo: int, hi: int) -> float:
    # sizes uniform in [lo, hi]; half squares (s*s), half ellipses (~pi/4 s*s)
    sizes = np.arange(lo, hi + 1, dtype=float)
    return float(np.mean(sizes ** 2) * (1 + np.pi / 4) / 2)


def render_layout(cfg: SceneConfig, domain: str, rng) -> np.ndarray:
    """Band pair, large regions, then small objects.

    In ``small_only_domains`` the rare classes never form large regions;
    instead each rare class gets a Poisson number of extra small objects
    sized so its expected pixel share equals its class frequency.
    """
    h, w = cfg.image_size
    labels = np.ones((h, w), dtype=np.uint8)
    horizon = int(rng.integers(int(0.3 * h), int(0.6 * h) + 1))
    labels[:horizon] = 0
    freq = np.asarray(cfg.class_frequency[domain], dtype=float).copy()
    freq[:2] = 0.0
    small_only = domain in cfg.small_only_domains and len(cfg.rare_classes) > 0
    common_freq = freq.copy()
    if small_only:
        common_freq[list(cfg.rare_classes)] = 0.0
        if common_freq.sum() <= 0:
            common_freq = freq
    lo, hi = cfg.large_extent
    for _ in range(int(rng.integers(cfg.n_large[0], cfg.n_large[1] + 1))):
        cls = _pick(rng, common_freq)
        eh, ew = rng.integers(lo, min(hi, h) + 1), rng.integers(lo, min(hi, w) + 1)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        _draw_shape(labels, cls, cy, cx, eh / 2, ew / 2, bool(rng.integers(2)))
    lo, hi = cfg.small_extent
    classes = [_pick(rng, common_freq) for _ in range(int(rng.integers(cfg.n_small[0], cfg.n_small[1] + 1)))]
    if small_only:
        area = _mean_small_area(lo, hi)
        for r in cfg.rare_classes:
            classes += [int(r)] * int(rng.poisson(freq[r] * h * w / area))
    for cls in classes:
        s = int(rng.integers(lo, hi + 1))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        _draw_shape(labels, cls, cy, cx, (s - 1) / 2, (s - 1) / 2, bool(rng.integers(2)))
    return labels


def render_image(cfg: SceneConfig, domain: str, labels: np.ndarray, rng) -> np.ndarray:
    h, w = labels.shape
    pal = np.asarray(cfg.palette[domain], dtype=np.float64)
    std = np.asarray(cfg.noise_std[domain], dtype=np.float64)
    img = pal[labels].transpose(2, 0, 1).copy()  # 3,H,W
    if cfg.texture is not None and cfg.texture_amplitude > 0:
        yy, xx = np.mgrid[:h, :w].astype(np.float64)
        period = cfg.texture[labels, 0]
        angle = cfg.texture[labels, 1]
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        img += cfg.texture_amplitude * np.sin(2 * np.pi * proj / period + phase)[None]
    img *= 1.0 + rng.uniform(-cfg.illumination_jitter, cfg.illumination_jitter)
    img += rng.standard_normal((3, h, w)) * std[labels][None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_scene(cfg: SceneConfig, seed: int, domain: str, index: int):
    rng = _sub_rng(seed, domain, index)
    labels = render_layout(cfg, domain, rng)
    return render_image(cfg, domain, labels, rng), labels


# ---------------------------------------------------------------------------
# dataset


class EvalLabelAccess(RuntimeError):
    pass


@dataclass
class AdaptationData:
    """What the training code is allowed to see: no target labels."""

    source_images: np.ndarray
    source_labels: np.ndarray
    target_images: np.ndarray
    num_classes: int

    @property
    def n_source(self):
        return len(self.source_images)

    @property
    def n_target(self):
        return len(self.target_images)


class DomainPairDataset:
    def __init__(self, source_images, source_labels, target_images, target_eval_labels, manifest):
        self.source_images = source_images
        self.source_labels = source_labels
        self.target_images = target_images
        self._target_eval_labels = target_eval_labels
        self.manifest = dict(manifest)
        self.eval_label_reads = 0

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])

    @property
    def target_eval_labels(self) -> np.ndarray:
        # every read is counted so tests can audit that training never looks
        self.eval_label_reads += 1
        return self._target_eval_labels

    def adaptation_view(self) -> AdaptationData:
        return AdaptationData(self.source_images, self.source_labels, self.target_images, self.num_classes)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(self.source_images, out / "source_images.cdat")
        write_tensor(self.source_labels, out / "source_labels.cdat")
        write_tensor(self.target_images, out / "target_images.cdat")
        write_tensor(self._target_eval_labels, out / "target_eval_labels.cdat")
        (out / "manifest.txt").write_text(format_manifest(self.manifest), encoding="utf-8")

    @classmethod
    def load(cls, data_dir) -> "DomainPairDataset":
        d = Path(data_dir)
        return cls(
            read_tensor(d / "source_images.cdat"),
            read_tensor(d / "source_labels.cdat"),
            read_tensor(d / "target_images.cdat"),
            read_tensor(d / "target_eval_labels.cdat"),
            parse_manifest((d / "manifest.txt").read_text(encoding="utf-8")),
        )


def _fmt_list(xs) -> str:
    return ",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in np.ravel(xs))


def build_manifest(cfg: SceneConfig, seed: int, n_source: int, n_target: int) -> dict:
    h, w = cfg.image_size
    return {
        "seed": str(seed),
        "image_size": f"{h},{w}",
        "num_classes": str(cfg.num_classes),
        "n_source": str(n_source),
        "n_target": str(n_target),
        "palette_divergence": repr(float(cfg.palette_divergence)),
        "class_frequencies": ";".join(
            f"{d}:{_fmt_list(np.asarray(cfg.class_frequency[d], dtype=float))}" for d in DOMAINS
        ),
        "rare_classes": _fmt_list(cfg.rare_classes),
        "palette_source": _fmt_list(np.asarray(cfg.palette["source"], dtype=float)),
        "palette_target": _fmt_list(np.asarray(cfg.palette["target"], dtype=float)),
    }


def format_manifest(m: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in m.items())


def parse_manifest(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"manifest line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def _ensure_coverage(cfg, seed, images, labels):
    """Paint a small patch of each class missing from the target split."""
    c = cfg.num_classes
    present = np.zeros(c, dtype=bool)
    present[np.unique(labels[labels != IGNORE])] = True
    for cls in np.flatnonzero(~present):
        rng = _sub_rng(seed, "target", 1_000_000 + int(cls))
        i = int(cls) % len(images)
        h, w = cfg.image_size
        s = cfg.small_extent[1]
        y, x = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
        labels[i, y:y + s, x:x + s] = cls
        images[i] = render_image(cfg, "target", labels[i], rng)


def generate_dataset(cfg: SceneConfig, seed: int, n_source: int, n_target: int,
                     workers: int | None = None) -> DomainPairDataset:
    if n_source < 1 or n_target < 1:
        raise ConfigError("n_source and n_target must be >= 1")
    cfg.validate()
    workers = workers or int(os.environ.get("CODASEG_THREADS", "1"))

    def split(domain, n):
        jobs = [(cfg, seed, domain, i) for i in range(n)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                pairs = list(ex.map(lambda a: render_scene(*a), jobs))
        else:
            pairs = [render_scene(*a) for a in jobs]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    si, sl = split("source", n_source)
    ti, tl = split("target", n_target)
    _ensure_coverage(cfg, seed, ti, tl)
    return DomainPairDataset(si, sl, ti, tl, build_manifest(cfg, seed, n_source, n_target))


def config_for_manifest(m: dict) -> SceneConfig:
    """Rebuild the default-family config a manifest was generated from."""
    h, w = (int(v) for v in m["image_size"].split(","))
    rare = tuple(int(v) for v in m.get("rare_classes", "").split(",") if v)
    freqs = dict(part.split(":") for part in m["class_frequencies"].split(";"))
    src = np.array([float(v) for v in freqs["source"].split(",")])
    tgt = np.array([float(v) for v in freqs["target"].split(",")])
    cfg = default_config(int(m["num_classes"]), (h, w), float(m["palette_divergence"]), rare)
    return replace(cfg, class_frequency={"source": src, "target": tgt})


# ---------------------------------------------------------------------------
# low-level appearance alignment


def channel_stats(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of a [C,H,W] image or an [N,C,H,W] stack."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 4:
        x = x.transpose(1, 0, 2, 3)
    x = x.reshape(x.shape[0], -1)
    return x.mean(axis=1), x.std(axis=1)


def statistics_transfer(image: np.ndarray, target_mean, target_std, clamp: bool = True,
                        source_mean=None, source_std=None) -> np.ndarray:
    """Affinely map each channel so its mean/std equal the targets.

    The reference statistics default to the image's own; pass split-level
    ``source_mean``/``source_std`` to apply one global map to many images.
    Channels with zero spread can only be shifted. Values are clamped to
    [0,1] afterwards unless ``clamp`` is False.
    """
    target_mean = np.asarray(target_mean, dtype=np.float64)
    target_std = np.asarray(target_std, dtype=np.float64)
    if not (np.all(np.isfinite(target_mean)) and np.all(np.isfinite(target_std)) and np.all(target_std > 0)):
        raise ValueError("target statistics must be finite with positive std")
    x = np.asarray(image, dtype=np.float64)
    mu, sd = channel_stats(x)
    if source_mean is not None:
        mu = np.asarray(source_mean, dtype=np.float64)
    if source_std is not None:
        sd = np.asarray(source_std, dtype=np.float64)
    flat = sd <= 0
    gain = np.where(flat, 1.0, target_std / np.where(flat, 1.0, sd))
    out = (x - mu[:, None, None]) * gain[:, None, None] + target_mean[:, None, None]
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(image.dtype if np.issubdtype(np.asarray(image).dtype, np.floating) else np.float32)
