"""Small fully-convolutional segmentation net with classifier and projection heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .container import read_tensor, write_tensor

MIN_SIZE = 8


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 32)
    num_classes: int = 8
    proj_hidden: int = 64
    embed_dim: int = 32
    kernel: int = 3

    @property
    def feat_dim(self) -> int:
        return self.widths[-1]


BACKBONE_PREFIX = "backbone."
CLASSIFIER_PREFIX = "classifier."
PROJECTION_PREFIX = "projection."


class ModelParams(dict):
    """Ordered name -> Tensor mapping plus the architecture it belongs to."""

    def __init__(self, arch: ArchConfig, tensors=()):
        super().__init__(tensors)
        self.arch = arch

    def group(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self.items() if n.startswith(prefix)]

    def clone(self, dtype=None) -> "ModelParams":
        out = ModelParams(self.arch)
        for n, t in self.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out[n] = Tensor(data, requires_grad=t.requires_grad)
        return out

    def set_trainable(self, flag: bool, prefix: str = "") -> None:
        for n, t in self.items():
            if n.startswith(prefix):
                t.requires_grad = flag


class ForwardOutput(NamedTuple):
    logits: Tensor
    penultimate: Tensor
    embeddings: Tensor


def _layer_shapes(arch: ArchConfig):
    k = arch.kernel
    chans = (arch.in_channels,) + tuple(arch.widths)
    for i in range(len(arch.widths)):
        yield f"{BACKBONE_PREFIX}conv{i}", (chans[i + 1], chans[i], k, k)
    yield f"{CLASSIFIER_PREFIX}conv", (arch.num_classes, arch.feat_dim, 1, 1)
    yield f"{PROJECTION_PREFIX}fc1", (arch.proj_hidden, arch.feat_dim, 1, 1)
    yield f"{PROJECTION_PREFIX}fc2", (arch.embed_dim, arch.proj_hidden, 1, 1)


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases; a pure function of (arch, seed)."""
    if arch.kernel % 2 == 0 or min(arch.widths + (arch.num_classes, arch.embed_dim)) < 1:
        raise ContractError(f"invalid architecture {arch}")
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ModelParams(arch)
    for name, shape in _layer_shapes(arch):
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[name + ".w"] = Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)
    return params


def features(params: ModelParams, images: Tensor) -> Tensor:
    x = images
    for i in range(len(params.arch.widths)):
        p = f"{BACKBONE_PREFIX}conv{i}"
        x = ad.relu(ad.conv2d(x, params[p + ".w"], params[p + ".b"]))
    return x


def classify(params: ModelParams, feats: Tensor) -> Tensor:
    p = f"{CLASSIFIER_PREFIX}conv"
    return ad.conv2d(feats, params[p + ".w"], params[p + ".b"])


def project(params: ModelParams, feats: Tensor) -> Tensor:
    h = ad.relu(ad.conv2d(feats, params["projection.fc1.w"], params["projection.fc1.b"]))
    z = ad.conv2d(h, params["projection.fc2.w"], params["projection.fc2.b"])
    return ad.l2_normalize(z, axis=1)


def forward(params: ModelParams, images, with_embeddings: bool = True) -> ForwardOutput:
    """Run the network on [N,3,H,W] images in [0,1]."""
    x = ad.as_tensor(images)
    if x.ndim != 4 or x.shape[1] != params.arch.in_channels:
        raise ContractError(f"expected [N,{params.arch.in_channels},H,W] images, got {x.shape}")
    if min(x.shape[2:]) < MIN_SIZE:
        raise ContractError(f"spatial size {x.shape[2:]} below the {MIN_SIZE}px minimum")
    feats = features(params, x)
    logits = classify(params, feats)
    emb = project(params, feats) if with_embeddings else None
    return ForwardOutput(logits, feats, emb)


def copy_student_to_teacher(student: ModelParams, teacher: ModelParams) -> None:
    if student.arch != teacher.arch or list(student) != list(teacher):
        raise ContractError("student and teacher architectures differ")
    for name, t in student.items():
        if teacher[name].shape != t.shape:
            raise ContractError(f"shape mismatch for {name}")
        teacher[name].data = t.data.copy()
        teacher[name].requires_grad = False
        teacher[name].grad = None


def make_teacher(student: ModelParams) -> ModelParams:
    teacher = student.clone()
    teacher.set_trainable(False)
    return teacher


# ---------------------------------------------------------------------------
# checkpoints


def _fmt(v):
    return ",".join(map(str, v)) if isinstance(v, tuple) else str(v)


def save_checkpoint(params: ModelParams, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"arch.{k} = {_fmt(v)}" for k, v in asdict(params.arch).items()]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k} = {v}")
    for name, t in params.items():
        fname = name.replace(".", "_") + ".cdat"
        write_tensor(t.data, out / fname)
        lines.append(f"param.{name} = {fname}")
    (out / "checkpoint.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(ckpt_dir) -> ModelParams:
    d = Path(ckpt_dir)
    arch_kw, files = {}, {}
    for line in (d / "checkpoint.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key.startswith("arch."):
            k = key[5:]
            arch_kw[k] = tuple(int(x) for x in value.split(",")) if k == "widths" else int(value)
        elif key.startswith("param."):
            files[key[6:]] = value
    params = ModelParams(ArchConfig(**arch_kw))
    for name, fname in files.items():
        params[name] = Tensor(read_tensor(d / fname), requires_grad=True)
    return params


def checkpoint_meta(ckpt_dir) -> dict:
    out = {}
    for line in (Path(ckpt_dir) / "checkpoint.txt").read_text(encoding="utf-8").splitlines():
        key, _, value = (s.strip() for s in line.partition("="))
        if key.startswith("meta."):
            out[key[5:]] = value
    return out
