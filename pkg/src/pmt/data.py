"""Synthetic multi-domain detection data and its on-disk format.

Each domain renders the same shape families (one per class) on a styled
background; domains differ only in colors, noise, blur and brightness.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import Annotation, Box, DomainId, ValidationError, iou, make_rng

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

ANNOTATIONS_FILE = "annotations.json"


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    """A dataset directory does not follow the documented layout/schema."""


RGB = tuple[float, float, float]


@dataclass(frozen=True)
class DomainStyle:
    background: tuple[RGB, RGB, RGB]
    objects: tuple[RGB, ...]  # one color per class
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    brightness_shift: float = 0.0
    color_jitter: float = 0.04  # per-object uniform color perturbation

    def __post_init__(self) -> None:
        if len(self.background) != 3:
            raise ValidationError("background palette needs exactly three RGB triples")
        if self.noise_sigma < 0 or self.blur_radius < 0 or self.color_jitter < 0:
            raise ValidationError("noise_sigma, blur_radius and color_jitter must be >= 0")

    def palette_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.background), np.ravel(self.objects)]).astype(np.float64)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "DomainStyle":
        return cls(
            background=tuple(tuple(float(c) for c in rgb) for rgb in raw["background"]),
            objects=tuple(tuple(float(c) for c in rgb) for rgb in raw["objects"]),
            noise_sigma=float(raw.get("noise_sigma", 0.0)),
            blur_radius=float(raw.get("blur_radius", 0.0)),
            brightness_shift=float(raw.get("brightness_shift", 0.0)),
            color_jitter=float(raw.get("color_jitter", 0.04)),
        )


@dataclass(frozen=True)
class DomainSpec:
    domain_id: DomainId
    style: DomainStyle
    num_images: int
    image_size: int = 64
    objects_per_image: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (12, 24)
    labeled: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValidationError(f"objects_per_image {self.objects_per_image} must satisfy 1 <= lo <= hi")
        if self.image_size < 32:
            raise ValidationError("image_size must be >= 32")
        if self.num_images < 0:
            raise ValidationError("num_images must be >= 0")
        smin, smax = self.object_size
        if smin < 4 or smax < smin or smax > self.image_size:
            raise ValidationError(f"object_size {self.object_size} invalid for image_size {self.image_size}")

    @property
    def num_classes(self) -> int:
        return len(self.style.objects)


@dataclass
class DomainDataset:
    domain_id: DomainId
    images: list[np.ndarray] = field(default_factory=list)  # H x W x 3, float32 in [0, 1]
    annotations: list[list[Annotation]] = field(default_factory=list)
    labeled: bool = True

    def __post_init__(self) -> None:
        if len(self.images) != len(self.annotations):
            raise ValidationError("images and annotations must have equal length")
        if not self.labeled and any(self.annotations):
            raise ValidationError("unlabeled dataset carries annotations")
        for img, anns in zip(self.images, self.annotations):
            h, w = img.shape[:2]
            for a in anns:
                if not a.box.inside(w, h):
                    raise ValidationError(f"box {a.box.as_list()} outside {w}x{h} image")

    def __len__(self) -> int:
        return len(self.images)

    def unlabeled(self) -> "DomainDataset":
        """Copy with annotations stripped (the training view of a target domain)."""
        return DomainDataset(self.domain_id, list(self.images), [[] for _ in self.images], labeled=False)


# ---------------------------------------------------------------- rendering

def shape_mask(shape: str, size: int, canvas: int, x0: int, y0: int) -> np.ndarray:
    """Boolean mask of one shape with ``size``-pixel extent whose top-left corner is (x0, y0)."""
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    u = (xx - x0) / size  # unit square coordinates
    v = (yy - y0) / size
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    du, dv = u - 0.5, v - 0.5
    if shape == "circle":
        m = du ** 2 + dv ** 2 <= 0.25
    elif shape == "square":
        m = inside
    elif shape == "triangle":
        m = inside & (np.abs(du) <= 0.5 * v)
    elif shape == "diamond":
        m = np.abs(du) + np.abs(dv) <= 0.5
    elif shape == "cross":
        m = inside & ((np.abs(du) <= 0.17) | (np.abs(dv) <= 0.17))
    elif shape == "ring":
        r2 = du ** 2 + dv ** 2
        m = (r2 <= 0.25) & (r2 >= 0.09)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m & inside


def mask_box(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _background(style: DomainStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    c0, c1, c2 = (np.asarray(c, dtype=np.float64) for c in style.background)
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)), 0, 1)[..., None]
    img = (1 - t) * c0 + t * c1
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tex = 0.25 * (1 + np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1]))
    return (1 - tex[..., None]) * img + tex[..., None] * c2


def _place(spec: DomainSpec, placed: list[Box], rng: np.random.Generator) -> tuple[int, int, int]:
    smin, smax = spec.object_size
    for max_overlap, attempts in ((0.1, 100), (0.9, 100)):
        for _ in range(attempts):
            s = int(rng.integers(smin, smax + 1))
            x0 = int(rng.integers(0, spec.image_size - s + 1))
            y0 = int(rng.integers(0, spec.image_size - s + 1))
            cand = Box(x0, y0, x0 + s, y0 + s)
            if all(iou(cand, b) <= max_overlap for b in placed):
                return s, x0, y0
    raise GenerationError(
        f"cannot place {len(placed) + 1} objects in a {spec.image_size}px image "
        f"without overlap > 0.9 IoU (domain {spec.domain_id.index})")


def render_clean(spec: DomainSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[Annotation], list[np.ndarray]]:
    """Render one uncorrupted image; also returns each object's visible mask."""
    size = spec.image_size
    img = _background(spec.style, size, rng)
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    owner = np.full((size, size), -1, dtype=np.int64)
    placed: list[Box] = []
    classes: list[int] = []
    for i in range(count):
        k = int(rng.integers(0, spec.num_classes))
        s, x0, y0 = _place(spec, placed, rng)
        mask = shape_mask(SHAPES[k], s, size, x0, y0)
        color = np.clip(np.asarray(spec.style.objects[k]) + rng.uniform(-1, 1, 3) * spec.style.color_jitter, 0, 1)
        img[mask] = color
        owner[mask] = i
        placed.append(mask_box(mask))
        classes.append(k)
    anns = [Annotation(b, k) for b, k in zip(placed, classes)]
    masks = [owner == i for i in range(count)]
    return img, anns, masks


def corrupt(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    out = img
    if style.blur_radius > 0:
        out = gaussian_filter(out, sigma=(style.blur_radius, style.blur_radius, 0))
    out = out + style.brightness_shift
    if style.noise_sigma > 0:
        out = out + rng.normal(0.0, style.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _render_one(spec: DomainSpec, seed: np.random.SeedSequence) -> tuple[np.ndarray, list[Annotation]]:
    rng = make_rng(seed)
    img, anns, _ = render_clean(spec, rng)
    return corrupt(img, spec.style, rng).astype(np.float32), anns


def generate_domain(spec: DomainSpec, rng: np.random.Generator) -> DomainDataset:
    """Render ``spec.num_images`` images; a pure function of (spec, rng state).

    Every image gets its own seed derived from one draw of ``rng`` so the
    output does not depend on how rendering is scheduled.
    """
    base = int(rng.integers(0, 2 ** 63 - 1))
    seeds = np.random.SeedSequence(base).spawn(spec.num_images)
    images, annotations = [], []
    for s in seeds:
        img, anns = _render_one(spec, s)
        images.append(img)
        annotations.append(anns if spec.labeled else [])
    return DomainDataset(spec.domain_id, images, annotations, labeled=spec.labeled)


def style_distance(a: DomainStyle, b: DomainStyle) -> float:
    """L2 distance between palettes plus absolute differences of the corruption settings."""
    pa, pb = a.palette_vector(), b.palette_vector()
    if pa.shape != pb.shape:
        raise ValueError("styles have different class counts")
    return float(np.linalg.norm(pa - pb) + abs(a.noise_sigma - b.noise_sigma)
                 + abs(a.blur_radius - b.blur_radius) + abs(a.brightness_shift - b.brightness_shift))


# ---------------------------------------------------------------- disk format

def write_dataset(ds: DomainDataset, directory: str | os.PathLike) -> None:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for i, (img, anns) in enumerate(zip(ds.images, ds.annotations)):
            name = f"img_{i:06d}.png"
            pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(pixels, mode="RGB").save(out / name, format="PNG")
            records.append({
                "file": name,
                "width": int(img.shape[1]),
                "height": int(img.shape[0]),
                "objects": [{"bbox": [float(v) for v in a.box.as_list()], "class_id": int(a.class_id)}
                            for a in anns],
            })
        payload = {"domain_id": ds.domain_id.index, "labeled": ds.labeled, "images": records}
        (out / ANNOTATIONS_FILE).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc


def _expect_keys(obj: Any, required: Sequence[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(required))
    if unknown:
        raise FormatError(f"{where}: unknown key {unknown[0]!r}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise FormatError(f"{where}: missing key {missing[0]!r}")


def load_dataset(directory: str | os.PathLike) -> DomainDataset:
    root = Path(directory)
    meta_path = root / ANNOTATIONS_FILE
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    _expect_keys(meta, ("domain_id", "labeled", "images"), str(meta_path))
    if not isinstance(meta["domain_id"], int) or isinstance(meta["domain_id"], bool) or meta["domain_id"] < 0:
        raise FormatError(f"{meta_path}: field 'domain_id' must be a nonnegative integer")
    if not isinstance(meta["labeled"], bool):
        raise FormatError(f"{meta_path}: field 'labeled' must be a boolean")
    if not isinstance(meta["images"], list):
        raise FormatError(f"{meta_path}: field 'images' must be a list")
    images, annotations = [], []
    for i, rec in enumerate(meta["images"]):
        where = f"{meta_path}: images[{i}]"
        _expect_keys(rec, ("file", "width", "height", "objects"), where)
        path = root / rec["file"]
        if not path.is_file():
            raise FileNotFoundError(f"{where}: missing image file {path}")
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        h, w = pixels.shape[:2]
        if (w, h) != (rec["width"], rec["height"]):
            raise FormatError(f"{where}: field 'width'/'height' disagrees with {path.name} ({w}x{h})")
        anns = []
        for j, obj in enumerate(rec["objects"]):
            owhere = f"{where}.objects[{j}]"
            _expect_keys(obj, ("bbox", "class_id"), owhere)
            bbox = obj["bbox"]
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise FormatError(f"{owhere}: field 'bbox' must be [x_min, y_min, x_max, y_max]")
            try:
                box = Box(*(float(v) for v in bbox))
            except ValidationError as exc:
                raise FormatError(f"{owhere}: field 'bbox' {exc}") from exc
            if not box.inside(w, h):
                raise FormatError(f"{owhere}: field 'bbox' {bbox} lies outside the {w}x{h} image")
            if not isinstance(obj["class_id"], int) or obj["class_id"] < 0:
                raise FormatError(f"{owhere}: field 'class_id' must be a nonnegative integer")
            anns.append(Annotation(box, obj["class_id"]))
        if anns and not meta["labeled"]:
            raise FormatError(f"{where}: field 'objects' must be empty for an unlabeled domain")
        images.append(pixels)
        annotations.append(anns)
    return DomainDataset(DomainId(meta["domain_id"]), images, annotations, labeled=meta["labeled"])
