"""Dataset ingestion: synthetic shapes, MNIST (IDX files) and AFHQ folders.

All loaders emit the same in-memory form: a :class:`DatasetSplit` of
:class:`LabeledImage` items with float pixels in ``[0, 1]``. Grayscale
datasets are served at 32x32 (MNIST is bilinearly upscaled from 28x28),
AFHQ at 128x128 RGB. Item order is deterministic for a fixed seed/root.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from vdk.errors import ConfigurationError, ContractError

DATASET_NAMES = ("shape", "mnist", "afhq")
SHAPE_NAMES = ("circle", "square", "triangle", "star", "pentagon")

# Default synthetic-shape inventory; four classes so two-class debates have
# off-topic classes available.
DEFAULT_SHAPE_CLASSES = ("circle", "square", "triangle", "star")

_SPLIT_SEED_OFFSET = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class LabeledImage:
    """One image with its class label and a stable identifier."""

    pixels: torch.Tensor  # (c, s, s) float32 in [0, 1]
    label: int
    id: str


@dataclass
class DatasetSplit:
    """An ordered, immutable-after-construction collection of labeled images."""

    name: str
    items: list[LabeledImage]
    class_count: int
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.items)

    def validate(self) -> None:
        ids = [item.id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate image ids in split {self.name!r}")
        for item in self.items:
            if not (0 <= item.label < self.class_count):
                raise ContractError(
                    f"label {item.label} out of range for {self.class_count} classes"
                )
        if self.name == "train":
            present = {item.label for item in self.items}
            missing = set(range(self.class_count)) - present
            if missing:
                raise ContractError(f"train split missing classes {sorted(missing)}")

    def stack(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack into (pixels, labels) tensors of shape (B,c,s,s) and (B,)."""
        x = torch.stack([item.pixels for item in self.items])
        y = torch.tensor([item.label for item in self.items], dtype=torch.long)
        return x, y


@dataclass(frozen=True)
class ShapeConfig:
    """Configuration for the synthetic shape generator."""

    classes: tuple[str, ...] = DEFAULT_SHAPE_CLASSES
    per_class: int = 200
    image_size: int = 32

    def __post_init__(self):
        if len(self.classes) < 1:
            raise ConfigurationError("shape config needs at least one class")
        for name in self.classes:
            if name not in SHAPE_NAMES:
                raise ConfigurationError(
                    f"unknown shape {name!r}; choose from {SHAPE_NAMES}"
                )
        if self.per_class <= 0:
            raise ConfigurationError("per_class must be > 0")


def _polygon_points(shape: str, cx: float, cy: float, radius: float, angle: float):
    if shape == "square":
        k, offsets = 4, None
    elif shape == "triangle":
        k, offsets = 3, None
    elif shape == "pentagon":
        k, offsets = 5, None
    elif shape == "star":
        # 5-point star: alternate outer and inner vertices.
        pts = []
        inner = radius * 0.45
        for i in range(10):
            r = radius if i % 2 == 0 else inner
            a = angle + i * np.pi / 5.0 - np.pi / 2.0
            pts.append((cx + r * np.cos(a), cy + r * np.sin(a)))
        return pts
    else:  # pragma: no cover - guarded by ShapeConfig
        raise ConfigurationError(f"unknown shape {shape!r}")
    pts = []
    for i in range(k):
        a = angle + 2.0 * np.pi * i / k - np.pi / 2.0
        pts.append((cx + radius * np.cos(a), cy + radius * np.sin(a)))
    return pts


def _draw_shape(shape: str, size: int, scale: float, angle: float) -> np.ndarray:
    """Rasterize one white shape on black at 4x resolution, then downsample."""
    hi = size * 4
    img = Image.new("L", (hi, hi), 0)
    draw = ImageDraw.Draw(img)
    c = hi / 2.0
    radius = scale * hi
    if shape == "circle":
        draw.ellipse([c - radius, c - radius, c + radius, c + radius], fill=255)
    else:
        draw.polygon(_polygon_points(shape, c, c, radius, angle), fill=255)
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8).copy()


def generate_shapes(config: ShapeConfig, seed: int) -> DatasetSplit:
    """Generate a synthetic shape split.

    Each image holds one centered shape with random scale and rotation.
    The output is a pure function of (config, seed): the same arguments
    always produce bit-identical pixels and ids.
    """
    rng = np.random.default_rng(seed)
    items: list[LabeledImage] = []
    for label, shape in enumerate(config.classes):
        for i in range(config.per_class):
            scale = float(rng.uniform(0.22, 0.42))
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            arr = _draw_shape(shape, config.image_size, scale, angle)
            pixels = torch.from_numpy(arr).float().div_(255.0).unsqueeze(0)
            items.append(
                LabeledImage(pixels=pixels, label=label, id=f"{shape}-{seed}-{i:05d}")
            )
    split = DatasetSplit(
        name="generated",
        items=items,
        class_count=len(config.classes),
        class_names=tuple(config.classes),
    )
    split.validate()
    return split


def save_shape_split(split: DatasetSplit, out_dir: str | Path, seed: int) -> Path:
    """Write a generated split as PNG files plus a CSV manifest (id,label,seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "seed"])
        for item in split.items:
            arr = (item.pixels.squeeze(0).numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out / f"{item.id}.png")
            writer.writerow([item.id, item.label, seed])
    return manifest


def _load_shape_manifest(split_dir: Path, split: str, class_count: int | None) -> DatasetSplit:
    items = []
    max_label = 0
    with open(split_dir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            arr = np.asarray(Image.open(split_dir / f"{row['id']}.png"), dtype=np.uint8)
            pixels = torch.from_numpy(arr).float().div_(255.0).unsqueeze(0)
            label = int(row["label"])
            max_label = max(max_label, label)
            items.append(LabeledImage(pixels=pixels, label=label, id=row["id"]))
    split_out = DatasetSplit(
        name=split, items=items, class_count=class_count or max_label + 1
    )
    split_out.validate()
    return split_out


def _read_idx(path: Path) -> np.ndarray:
    """Read one IDX-format file (optionally gzip-compressed)."""
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        magic = struct.unpack(">I", fh.read(4))[0]
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(dims)


def _find_idx(base: Path, stem: str) -> Path:
    for candidate in (base / stem, base / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing IDX file {stem}(.gz) under {base}")


def _load_mnist(root: Path, split: str) -> DatasetSplit:
    """Load MNIST from its standard IDX files under <root>/mnist.

    Files are looked up in <root>/mnist/<split>/ first, then flat in
    <root>/mnist/. ``val`` is served from the tail 5000 examples of the
    train files since the canonical distribution ships no validation set.
    """
    source = "t10k" if split == "test" else "train"
    base = root / "mnist"
    search = base / split if (base / split).is_dir() else base
    images = _read_idx(_find_idx(search, f"{source}-images-idx3-ubyte"))
    labels = _read_idx(_find_idx(search, f"{source}-labels-idx1-ubyte"))
    if split == "val":
        images, labels = images[-5000:], labels[-5000:]
    x = torch.from_numpy(images.copy()).float().div_(255.0).unsqueeze(1)
    x = F.interpolate(x, size=(32, 32), mode="bilinear", align_corners=False)
    items = [
        LabeledImage(pixels=x[i], label=int(labels[i]), id=f"mnist-{split}-{i:05d}")
        for i in range(x.shape[0])
    ]
    out = DatasetSplit(name=split, items=items, class_count=10)
    out.validate()
    return out


def _load_afhq(root: Path, split: str) -> DatasetSplit:
    """Load AFHQ from class-named image folders under <root>/afhq/<split>/."""
    base = root / "afhq" / split
    if not base.is_dir():
        raise FileNotFoundError(f"missing AFHQ split directory {base}")
    class_names = sorted(p.name for p in base.iterdir() if p.is_dir())
    if not class_names:
        raise FileNotFoundError(f"no class folders under {base}")
    items = []
    for label, cls in enumerate(class_names):
        for path in sorted((base / cls).iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            img = Image.open(path).convert("RGB").resize((128, 128), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8).transpose(2, 0, 1)
            pixels = torch.from_numpy(arr.copy()).float().div_(255.0)
            items.append(
                LabeledImage(pixels=pixels, label=label, id=f"afhq-{split}-{cls}-{path.stem}")
            )
    out = DatasetSplit(
        name=split, items=items, class_count=len(class_names),
        class_names=tuple(class_names),
    )
    out.validate()
    return out


def load_dataset(
    name: str,
    split: str,
    root: str | Path,
    shape_config: ShapeConfig | None = None,
    shape_seed: int = 0,
) -> DatasetSplit:
    """Load one split of a named dataset from ``root``.

    ``shape`` splits are read from ``<root>/shape/<split>/`` when that
    directory has been materialized with :func:`save_shape_split`, and are
    otherwise generated on the fly from ``shape_config`` with a per-split
    seed derived from ``shape_seed``.
    """
    if name not in DATASET_NAMES:
        raise ConfigurationError(f"unknown dataset {name!r}; choose from {DATASET_NAMES}")
    if split not in _SPLIT_SEED_OFFSET:
        raise ConfigurationError(f"unknown split {split!r}; choose train, val or test")
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"data root {root} does not exist")

    if name == "shape":
        split_dir = root / "shape" / split
        if (split_dir / "manifest.csv").exists():
            cfg = shape_config or ShapeConfig()
            return _load_shape_manifest(split_dir, split, len(cfg.classes))
        cfg = shape_config or ShapeConfig()
        generated = generate_shapes(cfg, seed=shape_seed * 3 + _SPLIT_SEED_OFFSET[split])
        generated.name = split
        return generated
    if name == "mnist":
        return _load_mnist(root, split)
    return _load_afhq(root, split)
