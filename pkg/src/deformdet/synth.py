"""Procedural stand-in dataset: paper-textured pages with six painted defect types.

Layout written by :func:`generate_dataset`::

    images/NNNNNN.ppm    binary P6
    labels/NNNNNN.txt    one "class_id cx cy w h" line per defect (normalised)
    manifest.txt         "NNNNNN split" per image
    genspec.txt          generator settings, key = value

Every image draws from its own generator seeded by ``(seed, index)``, so the
output does not depend on generation order.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_kv
from .head import BBox

CLASS_NAMES = ("Inkiness", "Vitium", "Crease", "Defaced", "Patch", "Signature")
NUM_CLASSES = len(CLASS_NAMES)
SPLITS = ("train", "val", "test")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class DefectClass:
    id: int
    name: str
    renderer: str


DEFECT_CLASSES = tuple(
    DefectClass(i, n, r) for i, (n, r) in enumerate(zip(
        CLASS_NAMES, ("strokes", "edge-notch", "crease-line", "stain-blob", "tape-patch",
                      "stamp"))))


@dataclass(frozen=True)
class GenSpec:
    image_size: int = 64
    min_defects: int = 1
    max_defects: int = 3
    class_weights: tuple[float, ...] = (0.2, 0.15, 0.15, 0.15, 0.15, 0.2)
    min_frac: float = 0.12
    max_frac: float = 0.45
    seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.15

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if not 0 <= self.min_defects <= self.max_defects:
            raise ConfigError("need 0 <= min_defects <= max_defects")
        w = self.class_weights
        if len(w) != NUM_CLASSES or any(x < 0 for x in w) or not math.isclose(sum(w), 1.0,
                                                                                abs_tol=1e-6):
            raise ConfigError(f"class_weights must be {NUM_CLASSES} non-negative values "
                              f"summing to 1, got {w}")
        if not 0 < self.min_frac <= self.max_frac <= 1:
            raise ConfigError("need 0 < min_frac <= max_frac <= 1")
        if self.min_frac * self.image_size < 3:
            raise ConfigError("min_frac too small: defects must span at least 3 pixels")
        if not (0 <= self.train_frac and 0 <= self.val_frac and self.train_frac + self.val_frac <= 1):
            raise ConfigError("split fractions must be non-negative and sum to <= 1")

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {','.join(map(repr, v)) if isinstance(v, tuple) else v}")
        return "\n".join(out) + "\n"


def genspec_from_text(text: str) -> GenSpec:
    values = parse_kv(text)
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(GenSpec)}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown genspec key {key!r}")
        try:
            if key == "class_weights":
                kwargs[key] = tuple(float(t) for t in raw.split(","))
            elif key in ("min_frac", "max_frac", "train_frac", "val_frac"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return GenSpec(**kwargs)


def load_genspec(path) -> GenSpec:
    return genspec_from_text(Path(path).read_text())


# rendering

@dataclass
class Rendered:
    image: np.ndarray  # (H, W, 3) uint8
    background: np.ndarray
    boxes: list[BBox]
    masks: list[np.ndarray] = field(default_factory=list)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([232.0, 222.0, 198.0]) + rng.uniform(-12, 12, 3)
    coarse = rng.normal(0, 5, (size // 8 + 1, size // 8 + 1))
    coarse = np.kron(coarse, np.ones((8, 8)))[:size, :size]
    fine = rng.normal(0, 2.5, (size, size))
    img = base[None, None, :] + (coarse + fine)[..., None]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _line_mask(shape, y0, x0, y1, x1, thick: int = 1) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    n = int(max(abs(y1 - y0), abs(x1 - x0))) * 2 + 1
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    r = thick // 2
    for dy in range(-r, thick - r):
        for dx in range(-r, thick - r):
            yy, xx = ys + dy, xs + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            mask[yy[ok], xx[ok]] = True
    return mask


def _paint(img, mask, color):
    img[mask] = np.clip(np.asarray(color, dtype=float), 0, 255).astype(np.uint8)


def _render_defect(rng, img, cls: int, y0: int, x0: int, bh: int, bw: int, size: int):
    """Paint one defect inside rows y0..y0+bh-1, cols x0..x0+bw-1; returns its mask."""
    y1, x1 = y0 + bh - 1, x0 + bw - 1
    shape = img.shape[:2]
    yy, xx = np.mgrid[:size, :size]
    inside = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    if cls == 0:  # ink strokes
        mask = _line_mask(shape, rng.uniform(y0, y1), x0, rng.uniform(y0, y1), x1, 2)
        mask |= _line_mask(shape, y0, rng.uniform(x0, x1), y1, rng.uniform(x0, x1), 2)
        mask |= _line_mask(shape, rng.uniform(y0, y1), rng.uniform(x0, x1),
                           rng.uniform(y0, y1), rng.uniform(x0, x1), 1)
        color = np.array([30, 35, 90]) + rng.integers(-15, 15, 3)
        mask &= inside
        _paint(img, mask, color)
    elif cls == 1:  # missing corner/edge: dark triangle cut into the page
        cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
        # whichever box side lies on the image border carries the triangle's base
        if x0 == 0:
            mask = (xx - x0) / max(bw - 1, 1) <= 1 - np.abs(yy - cy) / max(bh / 2, 0.5)
        elif x1 == size - 1:
            mask = (x1 - xx) / max(bw - 1, 1) <= 1 - np.abs(yy - cy) / max(bh / 2, 0.5)
        elif y0 == 0:
            mask = (yy - y0) / max(bh - 1, 1) <= 1 - np.abs(xx - cx) / max(bw / 2, 0.5)
        else:
            mask = (y1 - yy) / max(bh - 1, 1) <= 1 - np.abs(xx - cx) / max(bw / 2, 0.5)
        mask &= inside
        _paint(img, mask, np.array([45, 42, 40]) + rng.integers(-8, 8, 3))
    elif cls == 2:  # crease: diagonal dark line with a bright edge
        if rng.random() < 0.5:
            a, b = (y0, x0), (y1, x1)
        else:
            a, b = (y0, x1), (y1, x0)
        dark = _line_mask(shape, *a, *b, 1) & inside
        bright = _line_mask(shape, a[0], a[1] + 1, b[0], b[1] + 1, 1) & inside & ~dark
        _paint(img, bright, [252, 250, 245])
        _paint(img, dark, [70, 60, 50])
        mask = dark | bright
    elif cls == 3:  # stain: low-contrast ellipse
        cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
        ry, rx = bh / 2, bw / 2
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        mask &= inside
        shift = np.array([-28.0, -34.0, -44.0]) + rng.uniform(-4, 4, 3)
        stained = img[mask].astype(float) + shift
        img[mask] = np.clip(stained, 0, 255).astype(np.uint8)
    elif cls == 4:  # tape patch: bright rectangle, grey border
        mask = inside.copy()
        _paint(img, mask, [250, 250, 248])
        border = inside & ~((yy > y0) & (yy < y1) & (xx > x0) & (xx < x1))
        _paint(img, border, [150, 150, 150])
    else:  # stamp: dark square frame with inner marks
        mask = inside.copy()
        ink = np.array([110, 20, 30]) + rng.integers(-15, 15, 3)
        frame = inside & ~((yy > y0 + 1) & (yy < y1 - 1) & (xx > x0 + 1) & (xx < x1 - 1))
        inner = inside & ~frame
        _paint(img, inner, np.array([200, 150, 150]) + rng.integers(-10, 10, 3))
        marks = (_line_mask(shape, y0, x0, y1, x1, 1) | _line_mask(shape, y0, x1, y1, x0, 1))
        _paint(img, marks & inner, ink)
        _paint(img, frame, ink)
    return mask


def _box_from_mask(mask: np.ndarray, cls: int, size: int) -> BBox:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
    return BBox((c0 + c1 + 1) / 2 / size, (r0 + r1 + 1) / 2 / size,
                (c1 - c0 + 1) / size, (r1 - r0 + 1) / size, cls)


def render_image(spec: GenSpec, index: int) -> Rendered:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    bg = _background(rng, size)
    img = bg.copy()
    n = int(rng.integers(spec.min_defects, spec.max_defects + 1))
    boxes, masks = [], []
    lo, hi = math.log(spec.min_frac * size), math.log(spec.max_frac * size)
    for _ in range(n):
        cls = int(rng.choice(NUM_CLASSES, p=spec.class_weights))
        bw = int(np.clip(round(math.exp(rng.uniform(lo, hi))), 3, size))
        bh = bw if cls == 5 else int(np.clip(round(math.exp(rng.uniform(lo, hi))), 3, size))
        y0 = int(rng.integers(0, size - bh + 1))
        x0 = int(rng.integers(0, size - bw + 1))
        if cls == 1:
            edge = int(rng.integers(4))
            if edge == 0:
                x0 = 0
            elif edge == 1:
                x0 = size - bw
            elif edge == 2:
                y0 = 0
            else:
                y0 = size - bh
        mask = _render_defect(rng, img, cls, y0, x0, bh, bw, size)
        boxes.append(_box_from_mask(mask, cls, size))
        masks.append(mask)
    return Rendered(img, bg, boxes, masks)


# file formats

def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = map(int, tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1, count=w * h * 3)
    return data.reshape(h, w, 3).copy()


def image_to_tensor(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0, 1]."""
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def format_box(b: BBox) -> str:
    return f"{b.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}"


def save_annotations(path, boxes: list[BBox]) -> None:
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


def parse_annotations(text: str, num_classes: int = NUM_CLASSES, source: str = "<text>"):
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationError(f"{source}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = map(float, parts[1:])
        except ValueError:
            raise AnnotationError(f"{source}:{lineno}: non-numeric field in {line!r}") from None
        if not 0 <= cls < num_classes:
            raise AnnotationError(f"{source}:{lineno}: class id {cls} out of range "
                                  f"0..{num_classes - 1}")
        if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
            raise AnnotationError(f"{source}:{lineno}: box values outside [0, 1]")
        boxes.append(BBox(cx, cy, w, h, cls))
    return boxes


def load_annotations(path, num_classes: int = NUM_CLASSES) -> list[BBox]:
    raw = Path(path).read_bytes().decode()
    return parse_annotations(raw, num_classes, str(path))


# dataset

def assign_splits(spec: GenSpec, count: int) -> list[str]:
    order = np.random.default_rng([spec.seed, 0x5A17]).permutation(count)
    n_train = int(round(spec.train_frac * count))
    n_val = min(int(round(spec.val_frac * count)), count - n_train)
    split = [""] * count
    for rank, idx in enumerate(order):
        split[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return split


def generate_dataset(spec: GenSpec, out_dir, count: int) -> dict[str, int]:
    """Write ``count`` images and labels; returns per-class defect counts."""
    if count < 0:
        raise ConfigError("count must be non-negative")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    splits = assign_splits(spec, count)
    counts = {name: 0 for name in CLASS_NAMES}
    for i in range(count):
        r = render_image(spec, i)
        stem = f"{i:06d}"
        write_ppm(root / "images" / f"{stem}.ppm", r.image)
        save_annotations(root / "labels" / f"{stem}.txt", r.boxes)
        for b in r.boxes:
            counts[CLASS_NAMES[b.class_id]] += 1
    (root / "manifest.txt").write_text("".join(f"{i:06d} {s}\n" for i, s in enumerate(splits)))
    (root / "genspec.txt").write_text(spec.to_text())
    return counts


@dataclass
class Dataset:
    root: Path
    ids: list[str]
    images: np.ndarray  # (N, 3, H, W) float64
    boxes: list[list[BBox]]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def gt_map(self) -> dict[str, list[BBox]]:
        return dict(zip(self.ids, self.boxes))


def read_manifest(root) -> list[tuple[str, str]]:
    path = Path(root) / "manifest.txt"
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: expected 'id split', got {line!r}")
        out.append((parts[0], parts[1]))
    return out


def load_dataset(root, split: str | None = "train") -> Dataset:
    """Load a split (or everything with ``split=None``) into memory."""
    root = Path(root)
    entries = [i for i, s in read_manifest(root) if split is None or s == split]
    images = [image_to_tensor(read_ppm(root / "images" / f"{i}.ppm")) for i in entries]
    boxes = [load_annotations(root / "labels" / f"{i}.txt") for i in entries]
    arr = np.stack(images) if images else np.zeros((0, 3, 32, 32))
    return Dataset(root, entries, arr, boxes)
