"""Dataset handling: PPM decoding, bilinear resize, class maps with the
fine-to-coarse surface remap, a procedural texture generator, and seeded
batching.

Images are stored as float64 arrays shaped (3, H, W) with values in [0, 1];
per-channel mean/std normalization is applied only when batches are
assembled, so stored pixels always satisfy the [0, 1] invariant.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, DecodeError, RemapError
from .tensor import Tensor

log = logging.getLogger(__name__)

SIMPLE_CLASSES = ("dry", "ice", "snow", "water", "wet")

# friction token -> coarse class; two-word tokens listed hyphenated
_FRICTION_COARSE = {
    "dry": "dry",
    "wet": "wet",
    "water": "water",
    "ice": "ice",
    "fresh-snow": "snow",
    "melted-snow": "snow",
}


def remap_to_simple(name: str) -> str:
    """Collapse a fine surface-class name to its coarse friction class.

    The friction token may sit anywhere in the hyphen-separated name;
    underscores are accepted as hyphen aliases.  Both snow variants
    collapse to "snow".
    """
    tokens = name.strip().lower().replace("_", "-").split("-")
    tokens = [t for t in tokens if t]
    for i, tok in enumerate(tokens):
        if tok in ("fresh", "melted") and i + 1 < len(tokens) \
                and tokens[i + 1] == "snow":
            return "snow"
        if tok == "snow":
            return "snow"
        if tok in ("dry", "wet", "water", "ice"):
            return _FRICTION_COARSE[tok]
    raise RemapError(
        f"class name {name!r} contains no friction token "
        f"(expected one of {sorted(set(_FRICTION_COARSE))})"
    )


def load_fine_class_doc() -> dict:
    """The packaged canonical fine-class document {classes, remap}."""
    text = resources.files("roadsurface").joinpath("_rscd_classes.json") \
        .read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ClassMap:
    """Ordered class names with optional fine-to-coarse remap table."""

    names: tuple[str, ...]
    remap: dict[str, str] | None = None

    def __post_init__(self):
        if not self.names:
            raise ConfigError(["class map needs at least one class"])
        if len(set(self.names)) != len(self.names):
            raise ConfigError(["class names must be unique"])
        if self.remap is not None:
            missing = [n for n in self.names if n not in self.remap]
            if missing:
                raise ConfigError(
                    [f"remap table is missing entries for {missing}"]
                )

    def __len__(self):
        return len(self.names)

    def index_for(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(
                f"unknown class {name!r}; known classes: {list(self.names)}"
            ) from None

    def name_for(self, index: int) -> str:
        return self.names[index]

    def coarse_map(self) -> "ClassMap":
        """Class map over the distinct remap targets, sorted."""
        if self.remap is None:
            raise ConfigError(["class map has no remap table"])
        return ClassMap(tuple(sorted(set(self.remap.values()))))

    @classmethod
    def fine(cls) -> "ClassMap":
        doc = load_fine_class_doc()
        return cls(tuple(doc["classes"]), dict(doc["remap"]))

    @classmethod
    def simple(cls) -> "ClassMap":
        return cls(SIMPLE_CLASSES)

    @classmethod
    def from_json(cls, text: str) -> "ClassMap":
        doc = json.loads(text)
        return cls(tuple(doc["classes"]), doc.get("remap"))

    def to_json(self) -> str:
        doc = {"classes": list(self.names)}
        if self.remap is not None:
            doc["remap"] = dict(self.remap)
        return json.dumps(doc, indent=2)


@dataclass
class LabeledImage:
    """One sample: pixels (3, H, W) in [0, 1], integer label, provenance id."""

    pixels: np.ndarray
    label: int
    source_id: str


@dataclass
class Dataset:
    """Sample list plus the normalization applied at batch time."""

    images: list[LabeledImage]
    class_map: ClassMap
    mean: float = 0.5
    std: float = 0.5
    skipped: int = 0

    def __len__(self):
        return len(self.images)

    @property
    def labels(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)


# -- PPM codec --------------------------------------------------------------


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 PPM with maxval 255 -> float64 (3, H, W) scaled to [0, 1]."""
    if not data.startswith(b"P6"):
        raise DecodeError("not a binary P6 stream")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DecodeError("truncated header")
        byte = data[pos:pos + 1]
        if byte.isspace():
            pos += 1
        elif byte == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif byte.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise DecodeError(
                f"unexpected byte {byte!r} in header at offset {pos}"
            )
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval}, need 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DecodeError("missing whitespace before pixel payload")
    pos += 1
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise DecodeError(
            f"truncated payload: need {need} bytes, have {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Inverse of decode_ppm for [0, 1] float (3, H, W) input."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise DecodeError(f"expected (3, H, W) pixels, got {pixels.shape}")
    quantized = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    _, height, width = pixels.shape
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + quantized.transpose(1, 2, 0).tobytes()


# -- resize -----------------------------------------------------------------


def _axis_coords(src_extent: int, dst_extent: int):
    scale = src_extent / dst_extent
    src = (np.arange(dst_extent) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, src_extent - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, src_extent - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(x: np.ndarray, out_size: int) -> np.ndarray:
    """Separable bilinear resize to (3, out_size, out_size).

    Sample centers follow the half-pixel convention: source position of
    destination pixel d is (d + 0.5) * scale - 0.5, clamped to the image.
    """
    if x.ndim != 3:
        raise DataError(f"expected (C, H, W) input, got shape {x.shape}")
    _, h, w = x.shape
    if h < 1 or w < 1:
        raise DataError("cannot resize an empty image")
    if h == out_size and w == out_size:
        return x.copy()
    r0, r1, rf = _axis_coords(h, out_size)
    rows = x[:, r0, :] * (1.0 - rf)[None, :, None] \
        + x[:, r1, :] * rf[None, :, None]
    c0, c1, cf = _axis_coords(w, out_size)
    return rows[:, :, c0] * (1.0 - cf)[None, None, :] \
        + rows[:, :, c1] * cf[None, None, :]


# -- directory ingestion ----------------------------------------------------


def load_dataset(root, class_map: ClassMap, resolution: int,
                 mean: float = 0.5, std: float = 0.5) -> Dataset:
    """Read root/<class_name>/<file> into a Dataset.

    Every subdirectory must be a known class; undecodable files are
    skipped, logged, and counted.  Ordering is stable by path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    unknown = sorted(
        p.name for p in root.iterdir()
        if p.is_dir() and p.name not in class_map.names
    )
    if unknown:
        raise DataError(
            f"unknown class directories under {root}: {unknown}; "
            f"known classes: {list(class_map.names)}"
        )
    images: list[LabeledImage] = []
    skipped = 0
    for name in class_map.names:
        class_dir = root / name
        if not class_dir.is_dir():
            continue
        label = class_map.index_for(name)
        for path in sorted(class_dir.iterdir()):
            if not path.is_file():
                continue
            try:
                pixels = decode_ppm(path.read_bytes())
            except DecodeError as exc:
                log.warning("skipping %s: %s", path, exc)
                skipped += 1
                continue
            pixels = resize_bilinear(pixels, resolution)
            images.append(LabeledImage(pixels=pixels, label=label,
                                       source_id=str(path)))
    return Dataset(images=images, class_map=class_map, mean=mean, std=std,
                   skipped=skipped)


def remap_dataset(dataset: Dataset) -> Dataset:
    """Relabel a fine-class dataset onto its coarse classes."""
    if dataset.class_map.remap is None:
        raise ConfigError(["dataset class map has no remap table"])
    coarse = dataset.class_map.coarse_map()
    images = [
        LabeledImage(
            pixels=im.pixels,
            label=coarse.index_for(
                dataset.class_map.remap[dataset.class_map.name_for(im.label)]
            ),
            source_id=im.source_id,
        )
        for im in dataset.images
    ]
    return Dataset(images=images, class_map=coarse, mean=dataset.mean,
                   std=dataset.std, skipped=dataset.skipped)


# -- synthetic textures -----------------------------------------------------


def synth_generate(num_classes: int, per_class: int, resolution: int,
                   seed: int) -> Dataset:
    """Deterministic oriented-grating textures, one family per class.

    Class c uses orientation pi*c/num_classes and spatial frequency 3+c
    with a random phase and additive pixel noise, clipped to [0, 1].  The
    families are far apart in mean spectrum, so a small model can overfit.
    """
    if not 2 <= num_classes <= 8:
        raise ConfigError(
            [f"synthetic classes must be in [2, 8], got {num_classes}"]
        )
    if per_class < 1 or resolution < 4:
        raise ConfigError(["per_class must be >= 1 and resolution >= 4"])
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:resolution, 0:resolution] / resolution
    images = []
    for c in range(num_classes):
        theta = np.pi * c / num_classes
        freq = 3.0 + c
        direction = xs * np.cos(theta) + ys * np.sin(theta)
        for i in range(per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            base = 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * direction + phase)
            noise = rng.normal(0.0, 0.06, size=(3, resolution, resolution))
            pixels = np.clip(base[None, :, :] + noise, 0.0, 1.0)
            images.append(LabeledImage(pixels=pixels, label=c,
                                       source_id=f"synth/{c}/{i}"))
    class_map = ClassMap(tuple(f"class{c}" for c in range(num_classes)))
    return Dataset(images=images, class_map=class_map)


# -- batching and splitting -------------------------------------------------


def _fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def batch_iterator(dataset: Dataset, batch: int, shuffle_seed: int):
    """One seeded-shuffle epoch of (images Tensor, labels array) batches.

    Pixel batches are normalized by the dataset's mean/std; the final
    partial batch is kept.
    """
    if batch < 1:
        raise ContractError(f"batch size must be >= 1, got {batch}")
    n = len(dataset.images)
    order = _fisher_yates(n, np.random.default_rng(shuffle_seed))
    for start in range(0, n, batch):
        chunk = order[start:start + batch]
        pixels = np.stack([dataset.images[i].pixels for i in chunk])
        labels = np.array([dataset.images[i].label for i in chunk],
                          dtype=np.int64)
        yield Tensor((pixels - dataset.mean) / dataset.std), labels


def stratified_split(dataset: Dataset, train_fraction: float,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Per-class seeded split preserving label balance."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(
            f"train_fraction must be in (0, 1), got {train_fraction}"
        )
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, im in enumerate(dataset.images):
        by_class.setdefault(im.label, []).append(i)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in sorted(by_class):
        members = np.array(by_class[label])
        members = members[_fisher_yates(len(members), rng)]
        n_train = max(1, int(round(len(members) * train_fraction)))
        n_train = min(n_train, len(members))
        train_idx.extend(members[:n_train].tolist())
        val_idx.extend(members[n_train:].tolist())
    make = lambda idx: Dataset(
        images=[dataset.images[i] for i in sorted(idx)],
        class_map=dataset.class_map,
        mean=dataset.mean,
        std=dataset.std,
        skipped=dataset.skipped,
    )
    return make(train_idx), make(val_idx)
