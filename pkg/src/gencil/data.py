"""Synthetic attribute-grammar datasets and the on-disk dataset container.

Classes are (tone, texture, shape) combinations named "tone texture shape",
e.g. "dark dotted cross".  Images are parametric patterns plus seeded noise;
all per-example randomness is counter-based, keyed by
(seed, split, class, index), so any example is reproducible in isolation.

The file container is little-endian throughout: magic "GCIL", version u32,
example count u32, H/W/C u32, class count u32, a class-name table of
u16-length-prefixed UTF-8 strings, then per record a u32 label and raw
pixel bytes.  Every malformed input maps to DatasetFormatError.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import rng_for

SHAPES = ("square", "circle", "cross", "stripes", "ring", "checker")
TONES = ("dark", "light")
TEXTURES = ("plain", "dotted")
GRAMMAR_CAPACITY = len(SHAPES) * len(TONES) * len(TEXTURES)

SPLIT_PRETRAIN, SPLIT_TRAIN, SPLIT_TEST = 0, 1, 2

MAGIC = b"GCIL"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Typed reader error; `kind` distinguishes the failure mode."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


@dataclass
class SyntheticSpec:
    """Generation knobs.  classes + pretrain_classes must fit the grammar."""

    classes: int = 20
    pretrain_classes: int = 4
    train_per_class: int = 30
    test_per_class: int = 10
    pretrain_per_class: int = 40
    image_size: int = 32
    noise: float = 0.08
    seed: int = 7

    def __post_init__(self):
        if self.classes < 1 or self.pretrain_classes < 1:
            raise ValueError("class counts must be positive")
        if self.classes + self.pretrain_classes > GRAMMAR_CAPACITY:
            raise ValueError(
                f"class count exceeds grammar capacity: "
                f"{self.classes}+{self.pretrain_classes} > {GRAMMAR_CAPACITY}")
        if min(self.train_per_class, self.test_per_class, self.pretrain_per_class) < 1:
            raise ValueError("per-class example counts must be positive")
        if self.image_size < 16:
            raise ValueError("image_size too small to render patterns")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class Dataset:
    """In-memory split: uint8 pixels (N, H, W, C), labels, class names."""

    pixels: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8 with shape (N, H, W, C)")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ValueError("labels must be 1-d, one per example")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label out of range of the class-name table")

    def __len__(self) -> int:
        return self.pixels.shape[0]


def all_combos() -> list[tuple[str, str, str]]:
    """Canonical (shape, tone, texture) enumeration."""
    return list(itertools.product(SHAPES, TONES, TEXTURES))


def combo_name(combo: tuple[str, str, str]) -> str:
    shape, tone, texture = combo
    return f"{tone} {texture} {shape}"


def split_combos(spec: SyntheticSpec) -> tuple[list[tuple[str, str, str]], list[tuple[str, str, str]]]:
    """Seeded benchmark/pretrain split with disjoint combinations.

    Pretrain combos are picked from the post-shuffle remainder greedily by
    attribute coverage, so even a 4-class pretrain split spans tones,
    textures and several shapes.
    """
    combos = all_combos()
    order = rng_for(spec.seed, "class-split").permutation(GRAMMAR_CAPACITY)
    benchmark = [combos[i] for i in order[:spec.classes]]
    rest = [combos[i] for i in order[spec.classes:]]
    covered: set[str] = set()
    pretrain: list[tuple[str, str, str]] = []
    for _ in range(spec.pretrain_classes):
        best = max(rest, key=lambda c: len(set(c) - covered) - rest.index(c) * 1e-9)
        rest.remove(best)
        covered.update(best)
        pretrain.append(best)
    return benchmark, pretrain


def _shape_mask(shape: str, xx: np.ndarray, yy: np.ndarray, s: float) -> np.ndarray:
    ax, ay = np.abs(xx), np.abs(yy)
    r2 = xx * xx + yy * yy
    if shape == "square":
        return np.maximum(ax, ay) <= 8 * s
    if shape == "circle":
        return r2 <= (9 * s) ** 2
    if shape == "cross":
        return ((ax <= 3 * s) & (ay <= 10 * s)) | ((ay <= 3 * s) & (ax <= 10 * s))
    if shape == "stripes":
        return (ax <= 10 * s) & (ay <= 10 * s) & (np.mod(yy, 6 * s) < 3 * s)
    if shape == "ring":
        return ((6 * s) ** 2 <= r2) & (r2 <= (10 * s) ** 2)
    if shape == "checker":
        cell = max(int(round(4 * s)), 1)
        return (ax <= 10 * s) & (ay <= 10 * s) & ((xx // cell + yy // cell) % 2 == 0)
    raise ValueError(f"unknown shape {shape!r}")


def render_example(combo: tuple[str, str, str], size: int, noise: float,
                   rng: np.random.Generator) -> np.ndarray:
    """One uint8 (size, size, 1) image.  All randomness comes from `rng`;
    jitter amplitude is tied to the noise knob so noise=0 is fully static."""
    shape, tone, texture = combo
    jitter = min(int(round(25 * noise)), 3)
    dx, dy = (rng.integers(-jitter, jitter + 1, size=2) if jitter > 0 else (0, 0))
    s = size / 32.0
    grid = np.arange(size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    xx = xx - (size // 2 + dx)
    yy = yy - (size // 2 + dy)

    bg, fg = (0.06, 0.45) if tone == "dark" else (0.50, 0.92)
    img = np.full((size, size), bg)
    mask = _shape_mask(shape, xx, yy, s)
    img[mask] = fg
    if texture == "dotted":
        period = max(int(round(5 * s)), 2)
        dots = (np.mod(xx, period) < 2 * s) & (np.mod(yy, period) < 2 * s)
        img[mask & dots] = bg
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)[:, :, None]


def _render_split(combos: list[tuple[str, str, str]], per_class: int, split_id: int,
                  spec: SyntheticSpec) -> Dataset:
    pixels = np.empty((len(combos) * per_class, spec.image_size, spec.image_size, 1),
                      dtype=np.uint8)
    labels = np.empty(len(combos) * per_class, dtype=np.int64)
    row = 0
    for class_id, combo in enumerate(combos):
        for index in range(per_class):
            rng = rng_for(spec.seed, "pixels", split_id, class_id, index)
            pixels[row] = render_example(combo, spec.image_size, spec.noise, rng)
            labels[row] = class_id
            row += 1
    return Dataset(pixels, labels, tuple(combo_name(c) for c in combos))


def gen_synthetic(spec: SyntheticSpec) -> dict[str, Dataset]:
    """Three splits: pretrain (reserved combos), train and test (benchmark)."""
    benchmark, pretrain = split_combos(spec)
    return {
        "pretrain": _render_split(pretrain, spec.pretrain_per_class, SPLIT_PRETRAIN, spec),
        "train": _render_split(benchmark, spec.train_per_class, SPLIT_TRAIN, spec),
        "test": _render_split(benchmark, spec.test_per_class, SPLIT_TEST, spec),
    }


# ---------------------------------------------------------------------------
# file container


def write_dataset(ds: Dataset, path: str | Path) -> None:
    n, h, w, c = ds.pixels.shape
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, n)
    buf += struct.pack("<III", h, w, c)
    buf += struct.pack("<I", len(ds.class_names))
    for name in ds.class_names:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw))
        buf += raw
    for i in range(n):
        buf += struct.pack("<I", int(ds.labels[i]))
        buf += ds.pixels[i].tobytes()
    Path(path).write_bytes(bytes(buf))


def read_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    off = 0

    def take(count: int, what: str) -> bytes:
        nonlocal off
        if off + count > len(data):
            raise DatasetFormatError(
                "truncated", f"truncated {what} at byte {off}: need {count} bytes, "
                             f"have {len(data) - off}")
        chunk = data[off:off + count]
        off += count
        return chunk

    if take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad_magic", f"bad magic in {path}: not a GCIL file")
    version, count = struct.unpack("<II", take(8, "version/count"))
    if version != FORMAT_VERSION:
        raise DatasetFormatError("bad_version", f"unsupported format version {version}")
    h, w, c = struct.unpack("<III", take(12, "image dims"))
    if not (0 < h <= 4096 and 0 < w <= 4096 and 0 < c <= 16):
        raise DatasetFormatError("bad_header", f"implausible image dims {h}x{w}x{c}")
    (n_classes,) = struct.unpack("<I", take(4, "class count"))
    if n_classes == 0 or n_classes > 1_000_000:
        raise DatasetFormatError("bad_header", f"implausible class count {n_classes}")
    names = []
    for i in range(n_classes):
        (ln,) = struct.unpack("<H", take(2, f"class name {i} length"))
        raw = take(ln, f"class name {i}")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise DatasetFormatError("bad_name", f"class name {i} is not valid UTF-8") from e
    rec = h * w * c
    expected = count * (4 + rec)
    if len(data) - off < expected:
        raise DatasetFormatError(
            "truncated", f"truncated records at byte {off}: need {expected} bytes "
                         f"for {count} records, have {len(data) - off}")
    pixels = np.empty((count, h, w, c), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        (label,) = struct.unpack("<I", take(4, f"record {i} label"))
        if label >= n_classes:
            raise DatasetFormatError(
                "bad_label", f"record {i}: label {label} >= class count {n_classes}")
        labels[i] = label
        pixels[i] = np.frombuffer(take(rec, f"record {i} pixels"), dtype=np.uint8).reshape(h, w, c)
    if off != len(data):
        raise DatasetFormatError("trailing_data", f"{len(data) - off} trailing bytes after records")
    return Dataset(pixels, labels, tuple(names))
