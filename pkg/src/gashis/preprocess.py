"""Image normalization, augmentation, resizing, tiling, dataset splitting and
synthetic data generation.

Images are ``[C, H, W]`` float arrays.  Pixel values on disk are 8-bit; the
model consumes them scaled to ``[0, 1]``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .tensor import ContractError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
SPLITS = ("train", "val", "test")
AUGMENTATIONS = ("original", "hflip", "vflip", "rot90", "rot180", "rot270")


class DegenerateImageError(ValueError):
    """A channel has zero variance and cannot be standardized."""


class DataError(ValueError):
    """A dataset on disk is missing, empty or unreadable."""


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    source_id: str
    provenance: tuple[str, ...] = ()

    @property
    def is_original(self) -> bool:
        return not self.provenance

    @property
    def provenance_str(self) -> str:
        return "/".join(self.provenance) if self.provenance else "original"

    def derive(self, pixels: np.ndarray, step: str | None) -> "ImageSample":
        steps = self.provenance + ((step,) if step and step != "original" else ())
        return replace(self, pixels=pixels, provenance=steps)


@dataclass
class Dataset:
    samples: list[ImageSample]
    class_names: list[str]

    def __post_init__(self) -> None:
        k = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise ContractError(f"{s.source_id}: label {s.label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def images(self, dtype=np.float32, scale: float = 1.0 / 255.0) -> np.ndarray:
        """Stack pixels into ``[N, C, H, W]``, scaled (by default from 8-bit to ``[0, 1]``)."""
        return np.stack([s.pixels for s in self.samples]).astype(dtype) * dtype(scale)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def source_ids(self) -> set[str]:
        return {s.source_id for s in self.samples}

    def class_counts(self) -> dict[str, int]:
        c = Counter(s.label for s in self.samples)
        return {name: c.get(i, 0) for i, name in enumerate(self.class_names)}

    def map(self, fn) -> "Dataset":
        out: list[ImageSample] = []
        for s in self.samples:
            r = fn(s)
            out.extend(r if isinstance(r, list) else [r])
        return Dataset(out, list(self.class_names))


# ---------------------------------------------------------------------------------
# per-image operations
# ---------------------------------------------------------------------------------

def normalize_image(img: ImageSample) -> ImageSample:
    """Shift and scale every channel to mean 0 and (population) standard deviation 1."""
    x = np.asarray(img.pixels, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot normalize an empty image")
    mu = x.mean(axis=(1, 2), keepdims=True)
    sd = np.sqrt(((x - mu) ** 2).mean(axis=(1, 2), keepdims=True))
    flat = np.flatnonzero(sd.reshape(-1) == 0)
    if flat.size:
        raise DegenerateImageError(f"{img.source_id}: channel(s) {flat.tolist()} are constant")
    return img.derive((x - mu) / sd, None)


def _flip_rotate(x: np.ndarray, op: str) -> np.ndarray:
    if op == "original":
        return x.copy()
    if op == "hflip":
        return x[:, :, ::-1].copy()
    if op == "vflip":
        return x[:, ::-1, :].copy()
    turns = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
    return np.rot90(x, k=turns, axes=(1, 2)).copy()


def augment_six(img: ImageSample) -> list[ImageSample]:
    """Original, horizontal and vertical flips, and 90/180/270 degree rotations."""
    _, h, w = img.pixels.shape
    if h != w:
        raise ContractError(f"{img.source_id}: augmentation needs a square image, got {h}x{w}")
    return [img.derive(_flip_rotate(img.pixels, op), op) for op in AUGMENTATIONS]


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres (align_corners=False), clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def resize_array(x: np.ndarray, out: tuple[int, int]) -> np.ndarray:
    h, w = out
    if h < 1 or w < 1:
        raise ContractError(f"target size must be positive, got {out}")
    if x.shape[1:] == (h, w):
        return np.array(x, dtype=np.float64)
    wh = _bilinear_weights(x.shape[1], h)
    ww = _bilinear_weights(x.shape[2], w)
    return np.einsum("hi,cij,wj->chw", wh, np.asarray(x, dtype=np.float64), ww, optimize=True)


def resize_bilinear(img: ImageSample, out: tuple[int, int]) -> ImageSample:
    return img.derive(resize_array(img.pixels, out), None)


def tile_patches(img: ImageSample, patch: int) -> list[ImageSample]:
    """Non-overlapping ``patch x patch`` tiles anchored at the top-left; leftovers are dropped."""
    _, h, w = img.pixels.shape
    if patch < 1 or patch > h or patch > w:
        raise ContractError(f"{img.source_id}: patch {patch} does not fit a {h}x{w} image")
    tiles = []
    for r in range(h // patch):
        for c in range(w // patch):
            block = img.pixels[:, r * patch : (r + 1) * patch, c * patch : (c + 1) * patch].copy()
            tiles.append(img.derive(block, f"patch:{r},{c}"))
    return tiles


# ---------------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------------

@dataclass
class SplitPlan:
    ratios: tuple[float, float, float]
    seed: int
    balance: bool
    assignment: dict[str, str] = field(default_factory=dict)
    counts_before: dict[str, int] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def augmented_counts(self, factor: int = len(AUGMENTATIONS)) -> dict[str, dict[str, int]]:
        return {s: {c: n * factor for c, n in per.items()} for s, per in self.counts.items()}

    def to_manifest(self) -> str:
        lines = [
            "# split manifest",
            f"# ratios {':'.join(f'{r:g}' for r in self.ratios)}",
            f"# seed {self.seed}",
            f"# balance {str(self.balance).lower()}",
        ]
        lines += [f"{sid}\t{split}" for sid, split in sorted(self.assignment.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "SplitPlan":
        ratios, seed, balance, assignment = (1.0, 1.0, 2.0), 0, True, {}
        for line in text.splitlines():
            if line.startswith("# ratios"):
                ratios = tuple(float(r) for r in line.split()[2].split(":"))
            elif line.startswith("# seed"):
                seed = int(line.split()[2])
            elif line.startswith("# balance"):
                balance = line.split()[2] == "true"
            elif line and not line.startswith("#"):
                sid, split = line.rsplit("\t", 1)
                assignment[sid] = split
        return cls(ratios, seed, balance, assignment)


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(
    data: Dataset,
    ratios: Sequence[float] = (1, 1, 2),
    seed: int = 0,
    balance: bool = True,
) -> tuple[SplitPlan, Dataset, Dataset, Dataset]:
    """Partition source images into train/val/test.

    Samples sharing a ``source_id`` (augmented variants, patches) always land
    in the same split.  With ``balance`` every class is first subsampled to
    the size of the smallest class.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ContractError(f"ratios must be three non-negative numbers with a positive sum, got {ratios}")
    by_class: dict[int, list[str]] = {i: [] for i in range(data.num_classes)}
    seen: set[str] = set()
    for s in data:
        if s.source_id not in seen:
            seen.add(s.source_id)
            by_class[s.label].append(s.source_id)
    empty = [data.class_names[i] for i, ids in by_class.items() if not ids]
    if empty:
        raise ContractError(f"classes without samples: {empty}")

    rng = np.random.default_rng(seed)
    plan = SplitPlan(ratios, seed, balance)
    plan.counts_before = {data.class_names[i]: len(ids) for i, ids in by_class.items()}
    plan.counts = {s: {} for s in SPLITS}
    keep = min(len(ids) for ids in by_class.values())
    for label, ids in by_class.items():
        ids = sorted(ids)
        if balance and len(ids) > keep:
            ids = sorted(rng.choice(ids, size=keep, replace=False).tolist())
        order = rng.permutation(len(ids))
        start = 0
        for split, n in zip(SPLITS, _allocate(len(ids), ratios)):
            for idx in order[start : start + n]:
                plan.assignment[ids[idx]] = split
            plan.counts[split][data.class_names[label]] = n
            start += n

    parts = {s: [] for s in SPLITS}
    for s in data:
        split = plan.assignment.get(s.source_id)
        if split is not None:
            parts[split].append(s)
    train, val, test = (Dataset(parts[s], list(data.class_names)) for s in SPLITS)
    return plan, train, val, test


def apply_plan(data: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset, Dataset]:
    """Recreate the three splits of ``data`` from a stored plan."""
    parts = {s: [] for s in SPLITS}
    for s in data:
        split = plan.assignment.get(s.source_id)
        if split is not None:
            parts[split].append(s)
    return tuple(Dataset(parts[s], list(data.class_names)) for s in SPLITS)  # type: ignore[return-value]


def prepare(data: Dataset, size: int, augment: bool = True) -> Dataset:
    """Resize to ``size x size`` and (optionally) expand each image to its six variants."""
    out = data.map(lambda s: resize_bilinear(s, (size, size)))
    return out.map(augment_six) if augment else out


# ---------------------------------------------------------------------------------
# synthetic data and disk I/O
# ---------------------------------------------------------------------------------

_BACKGROUND = np.array([232.0, 190.0, 214.0])  # eosin-pink
_NUCLEUS = np.array([86.0, 58.0, 140.0])       # haematoxylin-purple


def synth_dataset(classes: int = 2, n_per_class: int = 32, size=(80, 80), seed: int = 0) -> Dataset:
    """Procedural stain-like textures whose statistics depend on the class.

    Class ``k`` scatters more, smaller nuclei-like ellipses than class
    ``k - 1`` and orients them at ``k * pi / classes``.  The growing
    nucleus coverage also darkens the image, so mean intensity alone
    separates neighbouring classes reasonably well.
    """
    if classes < 2:
        raise ContractError(f"classes must be >= 2, got {classes}")
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    samples = []
    for label in range(classes):
        frac = label / (classes - 1)
        count = int(round((6 + 18 * frac) * h * w / 6400))
        radius = 5.0 - 1.0 * frac
        theta = label * np.pi / classes
        for i in range(n_per_class):
            cover = np.zeros((h, w))
            n = max(1, count + int(rng.integers(-2, 3)))
            for _ in range(n):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                r = radius * rng.uniform(0.8, 1.2)
                t = theta + rng.normal(0.0, 0.15)
                dy, dx = yy - cy, xx - cx
                u = dx * np.cos(t) + dy * np.sin(t)
                v = -dx * np.sin(t) + dy * np.cos(t)
                cover = np.maximum(cover, np.exp(-((u / (1.8 * r)) ** 2 + (v / (0.6 * r)) ** 2) * 2.0))
            noise = rng.normal(0.0, 6.0, (3, h, w))
            img = _BACKGROUND[:, None, None] * (1 - cover) + _NUCLEUS[:, None, None] * cover + noise
            pixels = np.clip(np.round(img), 0, 255)
            samples.append(ImageSample(pixels, label, f"synth-c{label}-{i:04d}"))
    names = [f"class{k}" for k in range(classes)]
    return Dataset(samples, names)


def load_image_folder(root: str | Path, class_names: Iterable[str] | None = None) -> Dataset:
    """Read ``root/<class-name>/<image>`` trees as 8-bit RGB; classes sorted by name."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir()) if class_names is None else list(class_names)
    if len(names) < 2:
        raise DataError(f"{root}: need at least two class directories, found {names}")
    samples = []
    for label, name in enumerate(names):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"{root / name}: no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            except OSError as exc:
                raise DataError(f"{f}: {exc}") from exc
            samples.append(ImageSample(arr.transpose(2, 0, 1), label, f"{name}/{f.stem}"))
    return Dataset(samples, names)


def save_image_folder(data: Dataset, root: str | Path) -> list[Path]:
    """Write every sample as an 8-bit PNG under ``root/<class-name>/``."""
    from PIL import Image

    root = Path(root)
    written = []
    for s in data:
        name = data.class_names[s.label]
        path = root / name / f"{Path(s.source_id).name}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.round(s.pixels), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(path)
        written.append(path)
    return written
