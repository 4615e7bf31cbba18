"""Dataset schema, annotation I/O, preprocessing, and synthetic data generation.

Annotation files are a single JSON document per split:

    {"images": [{"id": str, "file": str,
                 "points": [[x, y], ...],
                 "exemplars": [[x1, y1, x2, y2], ...],
                 "class": str}]}

Coordinates are pixels in the original image; `preprocess` rescales them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


class ValidationError(ValueError):
    """An annotation or sample violates a schema invariant."""


class GenerationError(RuntimeError):
    """Synthetic sample could not be generated (e.g. infeasible packing)."""


@dataclass(frozen=True)
class ExemplarBox:
    """Axis-aligned exemplar bounding box in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(
                f"degenerate exemplar box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def scaled(self, factor: float) -> "ExemplarBox":
        return ExemplarBox(self.x1 * factor, self.y1 * factor,
                           self.x2 * factor, self.y2 * factor)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class AnnotatedImage:
    """One sample: image tensor, ground-truth points, and exemplar boxes.

    `image` is H×W×3 float32 in [0, 1]. `points` and `exemplars` are in the
    same pixel frame as `image`. `scale` records the cumulative resize factor
    applied by `preprocess` so predictions can be mapped back to the original
    image frame.
    """

    image_id: str
    image: np.ndarray
    points: list[tuple[float, float]]
    exemplars: list[ExemplarBox]
    class_name: str = ""
    scale: float = 1.0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def validate(self, require_points: bool = True) -> None:
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"sample {self.image_id}: image must be H×W×3")
        if min(h, w) < 2:
            raise ValidationError(f"sample {self.image_id}: degenerate image {h}×{w}")
        if require_points and not self.points:
            raise ValidationError(f"sample {self.image_id}: no ground-truth points")
        if not self.exemplars:
            raise ValidationError(f"sample {self.image_id}: no exemplar boxes")
        for (x, y) in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise ValidationError(
                    f"sample {self.image_id}: point ({x}, {y}) outside {h}×{w} image"
                )
        for box in self.exemplars:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
                raise ValidationError(
                    f"sample {self.image_id}: exemplar {box.as_list()} outside image"
                )


@dataclass
class DatasetSplit:
    samples: list[AnnotatedImage]
    name: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass
class SyntheticConfig:
    """Configuration for the synthetic blob-counting generator.

    Target blobs define the class to count; distractor blobs use a disjoint
    shape/color palette so they are visually distinct.
    """

    image_size: tuple[int, int] = (256, 256)  # (H, W)
    target_count_range: tuple[int, int] = (5, 20)
    distractor_count_range: tuple[int, int] = (2, 6)
    blob_size_range: tuple[int, int] = (10, 24)
    target_colors: Sequence[tuple[float, float, float]] = ((0.9, 0.15, 0.1),)
    distractor_colors: Sequence[tuple[float, float, float]] = ((0.1, 0.3, 0.9),)
    target_shape: str = "disc"
    distractor_shape: str = "square"
    rng_seed: int = 0

    def __post_init__(self):
        if self.target_count_range[0] > self.target_count_range[1]:
            raise ValidationError("empty target_count_range")
        if self.distractor_count_range[0] > self.distractor_count_range[1]:
            raise ValidationError("empty distractor_count_range")
        if self.blob_size_range[0] > self.blob_size_range[1]:
            raise ValidationError("empty blob_size_range")
        if self.blob_size_range[0] < 3:
            raise ValidationError("blob sizes must be at least 3 px")


def _parse_sample(entry: dict, root: Path) -> AnnotatedImage:
    try:
        image_id = str(entry["id"])
    except KeyError:
        raise ValidationError("annotation entry missing 'id'") from None
    for key in ("points", "exemplars"):
        if key not in entry:
            raise ValidationError(f"sample {image_id}: missing '{key}'")
    img_path = root / entry.get("file", "")
    if entry.get("file") and img_path.is_file():
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    elif "height" in entry and "width" in entry:
        # Annotation-only entry (no pixels on disk); used by tests and dumps.
        image = np.zeros((int(entry["height"]), int(entry["width"]), 3), np.float32)
    else:
        raise ValidationError(f"sample {image_id}: image file {img_path} not found")
    try:
        exemplars = [ExemplarBox(*map(float, b)) for b in entry["exemplars"]]
    except ValidationError as exc:
        raise ValidationError(f"sample {image_id}: {exc}") from None
    sample = AnnotatedImage(
        image_id=image_id,
        image=image,
        points=[(float(x), float(y)) for x, y in entry["points"]],
        exemplars=exemplars,
        class_name=str(entry.get("class", "")),
    )
    sample.validate()
    return sample


def load_annotations(path: str | Path, name: str = "train") -> DatasetSplit:
    """Load a split from an annotation JSON file.

    Samples are returned sorted by image id so iteration order is
    deterministic regardless of file order.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "images" not in doc:
        raise ValidationError(f"{path}: expected top-level object with 'images'")
    samples = [_parse_sample(entry, path.parent) for entry in doc["images"]]
    samples.sort(key=lambda s: s.image_id)
    return DatasetSplit(samples=samples, name=name)


def serialize_annotations(split: DatasetSplit, image_dir: str | Path | None = None,
                          out_path: str | Path | None = None) -> dict:
    """Serialize a split back to the annotation JSON schema.

    If `image_dir` is given, image pixels are written there as PNGs and the
    entries reference them; otherwise entries carry height/width only.
    """
    entries = []
    for s in split.samples:
        entry = {
            "id": s.image_id,
            "file": f"{s.image_id}.png" if image_dir is not None else "",
            "points": [[float(x), float(y)] for x, y in s.points],
            "exemplars": [b.as_list() for b in s.exemplars],
            "class": s.class_name,
        }
        if image_dir is None:
            entry["height"] = s.height
            entry["width"] = s.width
        else:
            arr = np.clip(s.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(Path(image_dir) / f"{s.image_id}.png")
        entries.append(entry)
    doc = {"images": entries}
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(doc, fh, indent=1)
    return doc


def preprocess(sample: AnnotatedImage, target_height: int, stride: int = 16) -> AnnotatedImage:
    """Resize to `target_height` (aspect preserved) and zero-pad to `stride`.

    Points and boxes scale with the image; the pad region carries no
    annotations and its anchor proposals train as negatives.
    """
    if target_height <= 0:
        raise ValidationError("target_height must be positive")
    import torch
    import torch.nn.functional as F

    h, w = sample.image.shape[:2]
    factor = target_height / h
    new_w = max(1, int(round(w * factor)))
    if factor == 1.0 and new_w == w:
        image = sample.image
    else:
        t = torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=(target_height, new_w), mode="bilinear",
                          align_corners=False)
        image = t[0].permute(1, 2, 0).numpy()
    pad_h = (-target_height) % stride
    pad_w = (-new_w) % stride
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
    eps = 1e-6
    points = [(min(x * factor, new_w - eps), min(y * factor, target_height - eps))
              for x, y in sample.points]
    exemplars = [
        ExemplarBox(b.x1 * factor, b.y1 * factor,
                    min(b.x2 * factor, float(new_w)), min(b.y2 * factor, float(target_height)))
        for b in sample.exemplars
    ]
    return replace(sample, image=np.ascontiguousarray(image), points=points,
                   exemplars=exemplars, scale=sample.scale * factor)


_SHAPES = ("disc", "square", "triangle")


def _render_blob(canvas: np.ndarray, cx: float, cy: float, size: float,
                 shape: str, color: tuple[float, float, float]) -> None:
    h, w = canvas.shape[:2]
    r = size / 2.0
    x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
    y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    if shape == "disc":
        mask = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(xs + 0.5 - cx) <= r) & (np.abs(ys + 0.5 - cy) <= r)
    elif shape == "triangle":
        # Upright triangle inscribed in the blob's bounding square.
        fy = (ys + 0.5 - (cy - r)) / size
        mask = (np.abs(xs + 0.5 - cx) <= r * fy) & (fy >= 0) & (fy <= 1)
    else:
        raise ValidationError(f"unknown blob shape {shape!r}")
    canvas[y0:y1, x0:x1][mask] = color


def _place_blobs(rng: np.random.Generator, n: int, sizes: np.ndarray,
                 h: int, w: int, occupied: list[tuple[float, float, float]],
                 max_tries: int = 2000) -> list[tuple[float, float]]:
    centers = []
    for i in range(n):
        r = sizes[i] / 2.0
        for attempt in range(max_tries):
            cx = rng.uniform(r + 1, w - r - 1)
            cy = rng.uniform(r + 1, h - r - 1)
            if all((cx - ox) ** 2 + (cy - oy) ** 2 > (r + orad + 2) ** 2
                   for ox, oy, orad in occupied):
                break
        else:
            raise GenerationError(
                f"could not place blob {i + 1}/{n} of size {sizes[i]:.0f} "
                f"in a {h}×{w} image"
            )
        occupied.append((cx, cy, r))
        centers.append((cx, cy))
    return centers


def generate_synthetic(config: SyntheticConfig, n_samples: int,
                       name: str = "train") -> DatasetSplit:
    """Generate a reproducible split of blob-counting samples.

    Each sample has k target blobs (recorded centers = ground-truth points)
    plus distractors of a distinct class; up to 3 targets get tight exemplar
    boxes. Bitwise deterministic for a given config.
    """
    rng = np.random.default_rng(config.rng_seed)
    h, w = config.image_size
    samples = []
    for idx in range(n_samples):
        k = int(rng.integers(config.target_count_range[0],
                             config.target_count_range[1] + 1))
        n_distract = int(rng.integers(config.distractor_count_range[0],
                                      config.distractor_count_range[1] + 1))
        tgt_sizes = rng.uniform(*config.blob_size_range, size=k)
        dis_sizes = rng.uniform(*config.blob_size_range, size=n_distract)
        occupied: list[tuple[float, float, float]] = []
        tgt_centers = _place_blobs(rng, k, tgt_sizes, h, w, occupied)
        dis_centers = _place_blobs(rng, n_distract, dis_sizes, h, w, occupied)
        canvas = np.full((h, w, 3), 0.45, np.float32)
        canvas += rng.normal(0.0, 0.02, size=canvas.shape).astype(np.float32)
        for (cx, cy), size in zip(dis_centers, dis_sizes):
            color = config.distractor_colors[int(rng.integers(len(config.distractor_colors)))]
            _render_blob(canvas, cx, cy, size, config.distractor_shape, color)
        for (cx, cy), size in zip(tgt_centers, tgt_sizes):
            color = config.target_colors[int(rng.integers(len(config.target_colors)))]
            _render_blob(canvas, cx, cy, size, config.target_shape, color)
        np.clip(canvas, 0.0, 1.0, out=canvas)
        # Tight (zero-margin) boxes around the first few targets.
        exemplars = [
            ExemplarBox(cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2)
            for (cx, cy), s in list(zip(tgt_centers, tgt_sizes))[:3]
        ]
        sample = AnnotatedImage(
            image_id=f"{name}_{idx:04d}",
            image=canvas,
            points=[(float(x), float(y)) for x, y in tgt_centers],
            exemplars=exemplars,
            class_name="target",
        )
        sample.validate()
        samples.append(sample)
    return DatasetSplit(samples=samples, name=name)
