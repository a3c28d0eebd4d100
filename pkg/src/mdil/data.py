"""Synthetic multi-domain segmentation scenes and portable dataset files.

A scene is a textured background (class 0) with a few filled geometric
shapes painted on top. Each domain has its own palette, background texture
and noise level, and a subset of the global class universe. Sample ``i`` of a
split is rendered from its own random substream, so samples can be produced
in any order.

On disk a domain lives under ``root/domain_<name>/``::

    labels.txt                  one class name per line (line number = id)
    {train,val}/img_%05d.ppm    binary P6, maxval 255
    {train,val}/lbl_%05d.pgm    binary P5, maxval 255
"""
from __future__ import annotations

import colorsys
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IGNORE_ID = 255
MAX_CLASSES = 254
CLASS_UNIVERSE = ("background", "rectangle", "disk", "triangle", "ring",
                  "cross", "stripe", "diamond")
SHARED_CLASSES = CLASS_UNIVERSE[:5]
SPLITS = {"train": 0, "val": 1}

MIN_VISIBLE_FRACTION = 0.4
MIN_VISIBLE_PIXELS = 8
MIN_BACKGROUND_FRACTION = 0.1
PLACEMENT_ATTEMPTS = 40


class DataFormatError(ValueError):
    """Malformed dataset files."""


@dataclass(frozen=True)
class LabelSpace:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("empty label space")
        if len(self.names) > MAX_CLASSES:
            raise ValueError(f"at most {MAX_CLASSES} classes allowed")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    def __len__(self):
        return len(self.names)

    def id(self, name: str) -> int:
        return self.names.index(name)


def make_palette(classes: Sequence[str], hue: float, background=(0.25, 0.25, 0.3),
                 saturation: float = 0.75, value: float = 0.9) -> tuple:
    """Background color followed by one color per shape class.

    Shape colors are spaced around the hue circle by universe position and
    rotated by ``hue``, so the same class gets a different color per domain.
    """
    colors = [tuple(float(c) for c in background)]
    for name in classes[1:]:
        k = CLASS_UNIVERSE.index(name)
        colors.append(colorsys.hsv_to_rgb((k / 8 + hue) % 1.0, saturation, value))
    return tuple(tuple(round(c, 6) for c in rgb) for rgb in colors)


@dataclass(frozen=True)
class DomainGenSpec:
    name: str
    seed: int
    classes: tuple = CLASS_UNIVERSE[:6]
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    hue: float = 0.0
    background: tuple = (0.25, 0.25, 0.3)
    palette: Optional[tuple] = None
    color_jitter: float = 0.05
    texture_freq: float = 3.0
    texture_amp: float = 0.08
    noise: float = 0.03
    density: tuple = (1, 3)
    shape_scale: tuple = (0.2, 0.35)    # radius range as a fraction of the image side

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "density", tuple(int(v) for v in self.density))
        LabelSpace(self.classes)
        if self.classes[0] != "background":
            raise ValueError(f"domain {self.name!r}: class 0 must be 'background'")
        if len(self.classes) < 2:
            raise ValueError(f"domain {self.name!r}: needs at least one shape class")
        unknown = [c for c in self.classes[1:] if c not in SHAPES]
        if unknown:
            raise ValueError(f"domain {self.name!r}: no renderer for classes {unknown}")
        object.__setattr__(self, "shape_scale", tuple(float(v) for v in self.shape_scale))
        r0, r1 = self.shape_scale
        if not 0 < r0 <= r1 <= 0.5:
            raise ValueError(f"domain {self.name!r}: bad shape_scale {self.shape_scale}")
        lo, hi = self.density
        if lo < 1 or hi < lo:
            raise ValueError(f"domain {self.name!r}: bad density {self.density}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.palette is None:
            object.__setattr__(self, "palette", make_palette(self.classes, self.hue, self.background))
        elif len(self.palette) != len(self.classes):
            raise ValueError(f"domain {self.name!r}: palette needs one color per class")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace(self.classes)

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val}[split]


def validate_domain_specs(specs: Sequence[DomainGenSpec]) -> None:
    """Check names are unique and domain-exclusive classes occur in one domain only."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate domain names")
    for cls in set(CLASS_UNIVERSE) - set(SHARED_CLASSES):
        owners = [s.name for s in specs if cls in s.classes]
        if len(owners) > 1:
            raise ValueError(f"exclusive class {cls!r} appears in domains {owners}")


def label_overlap(a: DomainGenSpec, b: DomainGenSpec) -> set:
    return set(a.classes) & set(b.classes)


@dataclass
class Dataset:
    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    classes: tuple = ()

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([self.images[i] for i in idx]).astype(np.float32, copy=False)
        y = np.stack([self.labels[i] for i in idx]).astype(np.int64)
        return x, y


# geometry ---------------------------------------------------------------

@dataclass(frozen=True)
class ShapeInstance:
    kind: str
    cy: float
    cx: float
    radius: float
    angle: float = 0.0
    aspect: float = 1.0


def _frame(shape: ShapeInstance, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - shape.cy, xx - shape.cx
    c, s = np.cos(shape.angle), np.sin(shape.angle)
    return c * dx + s * dy, -s * dx + c * dy


def _rectangle(u, v, r, a):
    return (np.abs(u) <= r) & (np.abs(v) <= r * a)


def _disk(u, v, r, a):
    return u * u + v * v <= r * r


def _triangle(u, v, r, a):
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        th = 2 * np.pi * k / 3 + np.pi / 2
        inside &= u * np.cos(th) + v * np.sin(th) <= r / 2
    return inside


def _ring(u, v, r, a):
    d2 = u * u + v * v
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def _cross(u, v, r, a):
    arm = 0.3 * r
    return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))


def _stripe(u, v, r, a):
    box = (np.abs(u) <= r) & (np.abs(v) <= r)
    return box & (np.floor((u + r) / (0.4 * r)).astype(np.int64) % 2 == 0)


def _diamond(u, v, r, a):
    return np.abs(u) + np.abs(v) <= r


SHAPES = {"rectangle": _rectangle, "disk": _disk, "triangle": _triangle, "ring": _ring,
          "cross": _cross, "stripe": _stripe, "diamond": _diamond}


def shape_mask(shape: ShapeInstance, size: int) -> np.ndarray:
    u, v = _frame(shape, size)
    return SHAPES[shape.kind](u, v, shape.radius, shape.aspect)


def paint_labels(size: int, shapes: Sequence[ShapeInstance], class_ids: Sequence[int]) -> np.ndarray:
    """Label map of shapes painted in order over background 0."""
    labels = np.zeros((size, size), dtype=np.int64)
    for shape, cid in zip(shapes, class_ids):
        labels[shape_mask(shape, size)] = cid
    return labels


# rendering --------------------------------------------------------------

def _substream(spec: DomainGenSpec, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([spec.seed & (2**64 - 1), SPLITS[split], index])
    return np.random.Generator(np.random.PCG64(ss))


def _random_shape(rng, kind: str, size: int, scale=(0.2, 0.35)) -> ShapeInstance:
    r = size * rng.uniform(*scale)
    margin = 0.6 * r
    return ShapeInstance(kind, cy=rng.uniform(margin, size - margin), cx=rng.uniform(margin, size - margin),
                         radius=r, angle=rng.uniform(0, np.pi), aspect=rng.uniform(0.5, 1.0))


def _visible_ok(owner: np.ndarray, areas: list, size: int) -> bool:
    if (owner < 0).sum() < MIN_BACKGROUND_FRACTION * size * size:
        return False
    counts = np.bincount(owner[owner >= 0].ravel(), minlength=len(areas))
    for k, area in enumerate(areas):
        if counts[k] < max(MIN_VISIBLE_PIXELS, MIN_VISIBLE_FRACTION * area):
            return False
    return True


def render_sample(spec: DomainGenSpec, index: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Image ``[3,H,W]`` in [0,1] (float32) and label map ``[H,W]`` (int64)."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if not 0 <= index < spec.count(split):
        raise IndexError(f"sample {index} out of range for {split} split of {spec.name!r}")
    rng = _substream(spec, split, index)
    size = spec.image_size
    palette = np.asarray(spec.palette, dtype=np.float64)

    k = int(rng.integers(spec.density[0], spec.density[1] + 1))
    owner = np.full((size, size), -1, dtype=np.int64)
    shapes, class_ids, areas = [], [], []
    for _ in range(k):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cid = int(rng.integers(1, len(spec.classes)))
            shape = _random_shape(rng, spec.classes[cid], size, spec.shape_scale)
            mask = shape_mask(shape, size)
            area = int(mask.sum())
            if area < MIN_VISIBLE_PIXELS:
                continue
            trial = owner.copy()
            trial[mask] = len(shapes)
            if _visible_ok(trial, areas + [area], size):
                owner = trial
                shapes.append(shape)
                class_ids.append(cid)
                areas.append(area)
                break
        else:
            raise ValueError(f"domain {spec.name!r}: cannot place {k} shapes "
                             f"in a {size}x{size} image (density too high)")

    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * spec.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    image = palette[0][:, None, None] + spec.texture_amp * wave[None]
    labels = np.zeros((size, size), dtype=np.int64)
    for n, (cid, shape) in enumerate(zip(class_ids, shapes)):
        color = palette[cid] + rng.normal(0.0, spec.color_jitter, 3)
        sel = owner == n
        image[:, sel] = color[:, None]
        labels[sel] = cid
    image = image + rng.normal(0.0, spec.noise, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate_domain(spec: DomainGenSpec, split: str = "train") -> Dataset:
    n = spec.count(split)
    ds = Dataset(classes=spec.classes)
    for i in range(n):
        img, lbl = render_sample(spec, i, split)
        ds.images.append(img)
        ds.labels.append(lbl)
    return ds


def default_domain_specs(n_train: int = 200, n_val: int = 50, image_size: int = 64,
                         seed: int = 0) -> list[DomainGenSpec]:
    """Three domains over an 8-class universe: 5 shared classes + 1 exclusive each."""
    exclusive = ("cross", "stripe", "diamond")
    looks = (
        dict(hue=0.0, background=(0.22, 0.24, 0.30), texture_freq=3.0, texture_amp=0.08, noise=0.03),
        dict(hue=0.33, background=(0.62, 0.58, 0.45), texture_freq=6.0, texture_amp=0.12, noise=0.05),
        dict(hue=0.66, background=(0.30, 0.45, 0.30), texture_freq=1.5, texture_amp=0.05, noise=0.04),
    )
    specs = []
    for i, (name, exc, look) in enumerate(zip("ABC", exclusive, looks)):
        specs.append(DomainGenSpec(name=name, seed=seed * 1000 + 11 * (i + 1),
                                   classes=SHARED_CLASSES + (exc,), image_size=image_size,
                                   n_train=n_train, n_val=n_val, **look))
    return specs


# PPM / PGM --------------------------------------------------------------

def _encode_pnm(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, np.uint8).tobytes()


_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _decode_pnm(data: bytes, magic: bytes, path) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None or m.group(1) != magic:
        raise DataFormatError(f"{path}: malformed {magic.decode()} header")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    channels = 3 if magic == b"P6" else 1
    body = data[m.end():]
    if len(body) != w * h * channels:
        raise DataFormatError(f"{path}: payload has {len(body)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3,H,W]`` float image in [0,1] as 8-bit binary P6."""
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(_encode_pnm(b"P6", q.transpose(1, 2, 0)))


def read_ppm(path) -> np.ndarray:
    arr = _decode_pnm(Path(path).read_bytes(), b"P6", path)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_pgm(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label values must fit in 0..255")
    Path(path).write_bytes(_encode_pnm(b"P5", labels.astype(np.uint8)))


def read_pgm(path) -> np.ndarray:
    return _decode_pnm(Path(path).read_bytes(), b"P5", path).astype(np.int64)


def domain_dir(root, name: str) -> Path:
    return Path(root) / f"domain_{name}"


def write_dataset(datasets: dict, root, domain_name: str, classes: Sequence[str]) -> Path:
    """Write ``{split: Dataset}`` for one domain; returns the domain directory."""
    base = domain_dir(root, domain_name)
    base.mkdir(parents=True, exist_ok=True)
    (base / "labels.txt").write_text("".join(f"{c}\n" for c in classes), encoding="utf-8")
    for split, ds in datasets.items():
        d = base / split
        d.mkdir(exist_ok=True)
        for old in list(d.glob("img_*.ppm")) + list(d.glob("lbl_*.pgm")):
            old.unlink()
        for i, (img, lbl) in enumerate(zip(ds.images, ds.labels)):
            write_ppm(d / f"img_{i:05d}.ppm", img)
            write_pgm(d / f"lbl_{i:05d}.pgm", lbl)
    return base


def read_label_names(root, domain_name: str) -> tuple:
    path = domain_dir(root, domain_name) / "labels.txt"
    if not path.is_file():
        raise DataFormatError(f"missing {path}")
    names = tuple(line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
    LabelSpace(names)
    return names


def load_dataset(root, domain_name: str, split: str = "train") -> Dataset:
    classes = read_label_names(root, domain_name)
    d = domain_dir(root, domain_name) / split
    if not d.is_dir():
        raise DataFormatError(f"missing split directory {d}")
    ds = Dataset(classes=classes)
    images = sorted(d.glob("img_*.ppm"))
    for img_path in images:
        lbl_path = d / img_path.name.replace("img_", "lbl_").replace(".ppm", ".pgm")
        if not lbl_path.is_file():
            raise DataFormatError(f"missing label file {lbl_path}")
        img = read_ppm(img_path)
        lbl = read_pgm(lbl_path)
        if img.shape[1:] != lbl.shape:
            raise DataFormatError(f"{img_path.name}: image {img.shape[1:]} vs labels {lbl.shape}")
        bad = (lbl >= len(classes)) & (lbl != IGNORE_ID)
        if bad.any():
            raise DataFormatError(f"{lbl_path}: label {int(lbl[bad][0])} not in labels.txt")
        ds.images.append(img)
        ds.labels.append(lbl)
    return ds
