"""Dataset ingestion, splitting and the synthetic food-scene generator.

Manifests are UTF-8 CSV files with the header::

    image_path,calories,mass,class_label,annotation_path

``mass``, ``class_label`` and ``annotation_path`` may be empty. Relative paths
are resolved against the manifest's directory. Annotation files are JSON
documents ``{"boxes": [{"x": .., "y": .., "w": .., "h": ..}, ...]}``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    DanglingImagePath,
    EmptyDataset,
    EmptyManifest,
    EmptyTrainWarning,
    MalformedRow,
    MissingFile,
    NegativeCalories,
    TaskMismatch,
    UnsupportedFormat,
    UnwritableOutputDir,
)
from .heatmap import Annotation, Box, HeatmapConfig, build_hsm

MANIFEST_COLUMNS = ("image_path", "calories", "mass", "class_label", "annotation_path")
TASKS = ("calories", "mass", "classification")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    calories: float
    mass: float | None = None
    class_label: str | None = None
    annotation_path: str | None = None


@dataclass
class Manifest:
    records: list
    root: str = "."

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def resolve(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def subset(self, indices):
        return Manifest([self.records[i] for i in indices], self.root)

    def class_labels(self):
        return sorted({r.class_label for r in self.records if r.class_label})


def _parse_float(text, line, name, optional=False):
    text = text.strip()
    if text == "":
        if optional:
            return None
        raise MalformedRow(line, f"missing {name}")
    try:
        value = float(text)
    except ValueError:
        raise MalformedRow(line, f"{name} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise MalformedRow(line, f"{name} is not finite: {text!r}")
    return value


def load_manifest(path, check_images=True):
    if not os.path.isfile(path):
        raise MissingFile(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRow(1, "empty file, expected a header row") from None
        missing = [c for c in ("image_path", "calories") if c not in header]
        if missing:
            raise MalformedRow(1, f"header lacks column(s) {missing}")
        col = {name: header.index(name) for name in MANIFEST_COLUMNS if name in header}
        records = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, found {len(row)}")

            def cell(name):
                return row[col[name]].strip() if name in col else ""

            image_path = cell("image_path")
            if not image_path:
                raise MalformedRow(line, "empty image_path")
            calories = _parse_float(cell("calories"), line, "calories")
            if calories < 0:
                raise NegativeCalories(line, f"calories must be >= 0, got {calories}")
            mass = _parse_float(cell("mass"), line, "mass", optional=True)
            if mass is not None and mass < 0:
                raise MalformedRow(line, f"mass must be >= 0, got {mass}")
            rec = ManifestRecord(
                image_path,
                calories,
                mass,
                cell("class_label") or None,
                cell("annotation_path") or None,
            )
            if check_images:
                full = rec.image_path if os.path.isabs(rec.image_path) else os.path.join(root, rec.image_path)
                if not (os.path.isfile(full) and os.access(full, os.R_OK)):
                    raise DanglingImagePath(line, f"image not found: {rec.image_path}")
            records.append(rec)
    return Manifest(records, root)


def _fmt(value):
    return "" if value is None else repr(float(value))


def manifest_to_csv(manifest):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow(
            [r.image_path, _fmt(r.calories), _fmt(r.mass), r.class_label or "", r.annotation_path or ""]
        )
    return buf.getvalue()


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_to_csv(manifest))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def split_indices(n, spec):
    """Deterministic (train, val) index partition, each in ascending order.

    The shuffle is ``numpy.random.default_rng(seed).permutation(n)`` (PCG64),
    and the train size is ``floor(train_fraction * n)`` evaluated on the
    decimal value of ``train_fraction``.
    """
    if n < 1:
        raise EmptyManifest("cannot split an empty dataset")
    n_train = math.floor(Fraction(repr(spec.train_fraction)) * n)
    perm = np.random.default_rng(spec.seed).permutation(n)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:])
    if n_train == 0:
        warnings.warn(f"split of {n} sample(s) leaves the training set empty", EmptyTrainWarning, stacklevel=3)
    return train, val


def split_dataset(manifest, spec=None):
    spec = spec or SplitSpec()
    train, val = split_indices(len(manifest), spec)
    return manifest.subset(train), manifest.subset(val)


# -- images -----------------------------------------------------------------

def load_image(path):
    """Decode an 8-bit RGB or grayscale PNG to floats in [0, 1], shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedFormat(f"{path}: expected PNG, found {im.format}")
            if im.mode not in ("RGB", "L"):
                raise UnsupportedFormat(f"{path}: expected 8-bit RGB or grayscale, found mode {im.mode}")
            im.load()
            pixels = np.asarray(im, dtype=np.float32)
    except FileNotFoundError:
        raise MissingFile(f"image not found: {path}") from None
    except (UnidentifiedImageError, SyntaxError, OSError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    return pixels / np.float32(255.0)


def save_image(image, path):
    """Write an (H, W, 3) float image in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.dtype != np.uint8:
        arr = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5)
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def load_annotation(path, image_dims):
    if not os.path.isfile(path):
        raise MissingFile(f"annotation not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
            boxes = [Box(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"])) for b in doc["boxes"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedRow(1, f"{path}: bad annotation document ({exc})") from exc
    return Annotation(tuple(image_dims), tuple(boxes))


def annotation_json(annotation):
    return json.dumps({"boxes": [b.to_dict() for b in annotation.boxes]}) + "\n"


# -- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class FoodType:
    name: str
    kind: str
    color: tuple
    calorie_density: float  # kcal per pixel; quarter multiples keep sums exact
    mass_density: float  # grams per pixel


FOODS = (
    FoodType("bread", "rectangle", (205, 150, 70), 1.0, 0.5),
    FoodType("salad", "ellipse", (50, 180, 60), 0.25, 0.75),
    FoodType("steak", "rectangle", (160, 40, 35), 2.0, 1.0),
    FoodType("berries", "ellipse", (70, 60, 200), 0.5, 1.0),
    FoodType("cheese", "ellipse", (245, 210, 20), 1.5, 0.75),
)
CLUTTER_COLOR = (230, 230, 230)  # napkin-white squares; bright enough to pull an unguided model
CLUTTER_MAX = 12
CLUTTER_KCAL = 0.015  # kcal per canvas pixel represented by one clutter square in "cue" scenes
BACKGROUND_MODES = ("plain", "cue", "shifted")


@dataclass(frozen=True)
class SceneShape:
    kind: str
    food: str
    color: tuple
    area_px: int
    calorie_density: float
    mass_density: float
    bbox: Box
    position: tuple  # (row, col) of the bounding-box centre

    @property
    def calories(self):
        return self.area_px * self.calorie_density


@dataclass
class SyntheticScene:
    canvas_dims: tuple
    shapes: list
    background: tuple
    clutter: list = field(default_factory=list)
    pixels: np.ndarray | None = field(default=None, repr=False)

    @property
    def total_calories(self):
        return float(sum(s.area_px * s.calorie_density for s in self.shapes))

    @property
    def total_mass(self):
        return float(sum(s.area_px * s.mass_density for s in self.shapes))

    @property
    def dominant(self):
        """Index of the highest-calorie shape (first one on ties)."""
        cal = [s.calories for s in self.shapes]
        return int(np.argmax(cal))

    def annotation(self):
        return Annotation(self.canvas_dims, (self.shapes[self.dominant].bbox,))


def _shape_mask(kind, h, w):
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    yy = (np.arange(h) + 0.5 - h / 2.0) / (h / 2.0)
    xx = (np.arange(w) + 0.5 - w / 2.0) / (w / 2.0)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def _free(occupied, y, x, h, w, gap):
    H, W = occupied.shape
    return not occupied[max(y - gap, 0):min(y + h + gap, H), max(x - gap, 0):min(x + w + gap, W)].any()


def _background(rng, mode):
    if mode == "shifted":
        # brighter tones than the plain/cue palette ever uses
        g = int(rng.integers(85, 125))
        return (g, g, max(g - int(rng.integers(0, 10)), 0))
    g = int(rng.integers(25, 80))
    return (g, g, min(g + int(rng.integers(0, 10)), 255))


def make_scene(canvas_dims, rng, background="plain", n_shapes=(1, 3)):
    """Draw one scene; ``rng`` is a numpy Generator owned by this scene."""
    if background not in BACKGROUND_MODES:
        raise ValueError(f"background must be one of {BACKGROUND_MODES}")
    H, W = canvas_dims
    side = min(H, W)
    bg = _background(rng, background)
    pixels = np.empty((H, W, 3), dtype=np.uint8)
    pixels[:] = bg
    occupied = np.zeros((H, W), dtype=bool)
    gap = max(1, side // 32)
    shapes = []
    for _ in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
        food = FOODS[int(rng.integers(len(FOODS)))]
        if food.kind == "rectangle":
            lo, hi = max(2, round(0.1 * side)), max(3, round(0.34 * side))
            h, w = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        else:
            lo, hi = max(3, round(0.14 * side)), max(4, round(0.36 * side))
            h, w = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        h, w = min(h, H), min(w, W)
        for _attempt in range(100):
            y, x = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
            if _free(occupied, y, x, h, w, gap):
                break
        else:
            continue
        mask = _shape_mask(food.kind, h, w)
        ys, xs = np.nonzero(mask)
        bbox = Box(int(x + xs.min()), int(y + ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        occupied[y:y + h, x:x + w] |= mask
        pixels[y:y + h, x:x + w][mask] = food.color
        shapes.append(
            SceneShape(food.kind, food.name, food.color, int(mask.sum()), food.calorie_density,
                       food.mass_density, bbox, (y + h / 2.0, x + w / 2.0))
        )
    clutter = []
    if background != "plain":
        total = sum(s.calories for s in shapes)
        if background == "cue":
            n_clutter = int(min(CLUTTER_MAX, round(total / (CLUTTER_KCAL * H * W))))
        else:
            n_clutter = int(rng.integers(0, CLUTTER_MAX + 1))
        c = max(2, side // 8)
        for _ in range(n_clutter):
            for _attempt in range(50):
                y, x = int(rng.integers(0, H - c + 1)), int(rng.integers(0, W - c + 1))
                if _free(occupied, y, x, c, c, gap):
                    occupied[y:y + c, x:x + c] = True
                    pixels[y:y + c, x:x + c] = CLUTTER_COLOR
                    clutter.append(Box(x, y, c, c))
                    break
    return SyntheticScene(tuple(canvas_dims), shapes, bg, clutter, pixels)


def scene_rng(seed, index):
    """Per-scene generator so results do not depend on generation order."""
    return np.random.default_rng([int(seed), int(index)])


def generate_synthetic(count, canvas_dims, seed, out_dir, background="plain", prefix="scene", n_shapes=(1, 3)):
    """Write ``count`` scenes (PNG + annotation JSON) and ``manifest.csv``.

    Returns ``(manifest, annotations, scenes)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    H, W = (int(d) for d in canvas_dims)
    if H < 16 or W < 16:
        raise ValueError("canvas must be at least 16x16")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise UnwritableOutputDir(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise UnwritableOutputDir(f"output directory not writable: {out_dir}")
    records, annotations, scenes = [], [], []
    width = max(5, len(str(count - 1)))
    for i in range(count):
        scene = make_scene((H, W), scene_rng(seed, i), background, n_shapes)
        name = f"{prefix}_{i:0{width}d}"
        ann = scene.annotation()
        try:
            Image.fromarray(scene.pixels).save(os.path.join(out_dir, name + ".png"), format="PNG")
            with open(os.path.join(out_dir, name + ".json"), "w", encoding="utf-8") as fh:
                fh.write(annotation_json(ann))
        except OSError as exc:
            raise UnwritableOutputDir(f"cannot write into {out_dir}: {exc}") from exc
        records.append(
            ManifestRecord(name + ".png", scene.total_calories, scene.total_mass,
                           scene.shapes[scene.dominant].food, name + ".json")
        )
        annotations.append(ann)
        scenes.append(scene)
    manifest = Manifest(records, os.path.abspath(out_dir))
    try:
        save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    except OSError as exc:
        raise UnwritableOutputDir(f"cannot write manifest into {out_dir}: {exc}") from exc
    return manifest, annotations, scenes


# -- in-memory datasets -----------------------------------------------------

@dataclass
class Dataset:
    """Decoded images and labels ready for training.

    ``targets`` holds kcal / grams for regression tasks and class indices for
    classification. ``hsms`` rows are only meaningful where ``has_hsm`` is set.
    """

    images: np.ndarray
    targets: np.ndarray
    task: str = "calories"
    hsms: np.ndarray | None = None
    has_hsm: np.ndarray | None = None
    ids: list = field(default_factory=list)
    classes: tuple = ()

    def __len__(self):
        return len(self.images)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]
        if self.hsms is not None and self.has_hsm is None:
            self.has_hsm = np.ones(len(self.images), dtype=bool)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return replace(
            self,
            images=self.images[idx],
            targets=self.targets[idx],
            hsms=None if self.hsms is None else self.hsms[idx],
            has_hsm=None if self.has_hsm is None else self.has_hsm[idx],
            ids=[self.ids[i] for i in idx],
        )

    def missing_hsm(self):
        """Id of the first sample without an HSM, or None."""
        if self.hsms is None:
            return self.ids[0] if len(self) else None
        bad = np.flatnonzero(~self.has_hsm)
        return self.ids[bad[0]] if bad.size else None


def load_dataset(manifest, task="calories", cam_dims=None, heatmap_config=None, classes=None):
    """Decode every record of ``manifest`` into a :class:`Dataset`.

    When ``cam_dims`` is given, HSMs are compiled at that resolution for
    records with an annotation.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if len(manifest) == 0:
        raise EmptyDataset("manifest has no records")
    images = np.stack([load_image(manifest.resolve(r.image_path)) for r in manifest.records])
    if task == "calories":
        targets = np.array([r.calories for r in manifest.records], dtype=np.float64)
    elif task == "mass":
        if any(r.mass is None for r in manifest.records):
            raise TaskMismatch("mass task needs a mass value on every record")
        targets = np.array([r.mass for r in manifest.records], dtype=np.float64)
    else:
        if any(not r.class_label for r in manifest.records):
            raise TaskMismatch("classification task needs a class_label on every record")
        classes = tuple(classes) if classes else tuple(manifest.class_labels())
        if len(classes) < 2:
            raise TaskMismatch("classification needs at least two classes")
        lookup = {c: i for i, c in enumerate(classes)}
        try:
            targets = np.array([lookup[r.class_label] for r in manifest.records], dtype=np.int64)
        except KeyError as exc:
            raise TaskMismatch(f"label {exc.args[0]!r} not in the class set") from None
    hsms = has = None
    if cam_dims is not None:
        cfg = replace(heatmap_config or HeatmapConfig(), cam_dims=tuple(cam_dims))
        hsms = np.zeros((len(manifest),) + tuple(cam_dims), dtype=np.float64)
        has = np.zeros(len(manifest), dtype=bool)
        for i, r in enumerate(manifest.records):
            if r.annotation_path:
                ann = load_annotation(manifest.resolve(r.annotation_path), images.shape[1:3])
                hsms[i] = build_hsm(ann, cfg).values
                has[i] = True
    ids = [r.image_path for r in manifest.records]
    return Dataset(images, targets, task, hsms, has, ids, tuple(classes or ()))


def synthetic_dataset(count, canvas_dims, seed, background="plain", task="calories", cam_dims=None,
                      heatmap_config=None, classes=None, n_shapes=(1, 3)):
    """In-memory equivalent of ``generate_synthetic`` + ``load_dataset``.

    PNG is lossless for 8-bit pixels, so the arrays match what a round trip
    through disk would give.
    """
    scenes = [make_scene(tuple(canvas_dims), scene_rng(seed, i), background, n_shapes) for i in range(count)]
    images = np.stack([s.pixels for s in scenes]).astype(np.float32) / np.float32(255.0)
    if task == "calories":
        targets = np.array([s.total_calories for s in scenes])
    elif task == "mass":
        targets = np.array([s.total_mass for s in scenes])
    else:
        classes = tuple(classes or (f.name for f in FOODS))
        targets = np.array([classes.index(s.shapes[s.dominant].food) for s in scenes], dtype=np.int64)
    hsms = has = None
    if cam_dims is not None:
        cfg = replace(heatmap_config or HeatmapConfig(), cam_dims=tuple(cam_dims))
        hsms = np.stack([build_hsm(s.annotation(), cfg).values for s in scenes])
        has = np.ones(count, dtype=bool)
    ids = [f"scene_{i}" for i in range(count)]
    return Dataset(images, targets, task, hsms, has, ids, tuple(classes or ()))
