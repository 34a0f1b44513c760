"""Dataset plumbing: JSONL and VOC-XML annotation ingestion, restriction
filtering, deterministic 90/10 splitting, image preprocessing and a
synthetic shapes dataset generator for desk-scale end-to-end runs.

Annotation JSONL, one object per line:
    {"image": "images/img_00000.png",
     "boxes": [{"class": 0, "cx": 0.5, "cy": 0.5, "w": 0.2, "h": 0.2}]}

Class-table files map names to ids, one "name id" pair per line.
"""

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .head import Box, iou

log = logging.getLogger(__name__)

INPUT_SIZE = 88


class DataError(ValueError):
    """Annotation or image input rejected, with file/line context."""


@dataclass
class SampleRef:
    """One annotated image: path (or id) plus normalized boxes."""
    image: str
    boxes: list
    source_id: str = ""


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list = field(default_factory=list)
    seed: int = 0


def _check_box_fields(d, where):
    try:
        box = Box(cx=float(d["cx"]), cy=float(d["cy"]),
                  w=float(d["w"]), h=float(d["h"]), class_id=int(d["class"]))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{where}: malformed box {d!r} ({e})") from None
    try:
        box.validate()
    except ValueError as e:
        raise DataError(f"{where}: {e}") from None
    return box


def load_jsonl(path):
    """Load annotation descriptors from a JSONL file."""
    path = Path(path)
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: invalid JSON ({e.msg})") from None
            if "image" not in rec or "boxes" not in rec:
                raise DataError(f"{where}: record needs 'image' and 'boxes'")
            boxes = [_check_box_fields(b, where) for b in rec["boxes"]]
            samples.append(SampleRef(image=str(rec["image"]), boxes=boxes,
                                     source_id=str(rec.get("id", lineno))))
    return samples


def load_class_table(path):
    """Read a 'name id' class-table file into a dict."""
    table = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{Path(path).name}:{lineno}: expected 'name id'")
            table[parts[0]] = int(parts[1])
    return table


def parse_voc_xml(xml_text, class_table):
    """Parse one VOC annotation document into a SampleRef.

    Pixel boxes are converted to normalized center-size coordinates; object
    names missing from class_table are skipped with a warning.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise DataError(f"invalid annotation XML: {e}") from None
    size = root.find("size")
    if size is None or size.find("width") is None or size.find("height") is None:
        raise DataError("annotation missing size/width/height")
    img_w = float(size.find("width").text)
    img_h = float(size.find("height").text)
    if img_w <= 0 or img_h <= 0:
        raise DataError(f"bad image size {img_w}x{img_h}")
    filename = root.findtext("filename", default="")
    boxes = []
    for obj in root.findall("object"):
        name = obj.findtext("name", default="")
        if name not in class_table:
            log.warning("skipping object with unknown class %r", name)
            continue
        bb = obj.find("bndbox")
        if bb is None:
            raise DataError(f"object {name!r} missing bndbox")
        xmin = float(bb.findtext("xmin"))
        ymin = float(bb.findtext("ymin"))
        xmax = float(bb.findtext("xmax"))
        ymax = float(bb.findtext("ymax"))
        if xmax <= xmin or ymax <= ymin:
            raise DataError(
                f"degenerate bndbox ({xmin},{ymin})-({xmax},{ymax})")
        boxes.append(Box(cx=(xmin + xmax) / 2 / img_w,
                         cy=(ymin + ymax) / 2 / img_h,
                         w=(xmax - xmin) / img_w,
                         h=(ymax - ymin) / img_h,
                         class_id=class_table[name]).validate())
    return SampleRef(image=filename, boxes=boxes, source_id=filename)


def filter_max_objects(samples, n):
    """Keep samples with at most n boxes; n = inf is the identity."""
    if not n >= 1:
        raise ValueError(f"max-objects filter needs n >= 1, got {n}")
    return [s for s in samples if len(s.boxes) <= n]


def split_90_10(samples, seed):
    """Deterministic shuffle then 90/10 partition, rounding toward train."""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = math.ceil(0.9 * len(samples))
    shuffled = [samples[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train], validation=shuffled[n_train:],
                        seed=seed)


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample with half-pixel centers and clamped borders.

    img is (H,W,C) float; same-size calls reproduce the input exactly.
    """
    h, w = img.shape[:2]
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :, None]
    img = np.asarray(img, np.float64)
    row0, row1 = img[y0], img[y1]
    top = row0[:, x0] * (1 - fx) + row0[:, x1] * fx
    bot = row1[:, x0] * (1 - fx) + row1[:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def preprocess(img):
    """RGB image (H,W,3) -> normalized (3,88,88) float32 network input.

    Squash-resizes (aspect ratio not preserved) and maps pixel value p to
    (p - 128) / 128, i.e. into [-1, 0.9922).
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an RGB (H,W,3) image, got shape {img.shape}")
    resized = bilinear_resize(img.astype(np.float32), INPUT_SIZE, INPUT_SIZE)
    normalized = (resized - 128.0) / 128.0
    return np.ascontiguousarray(normalized.transpose(2, 0, 1)).astype(np.float32)


def load_image(path):
    """Decode an image file to an (H,W,3) uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


SHAPE_NAMES = ("circle", "square", "triangle")
_SHAPE_COLORS = ((230, 60, 50), (60, 210, 80), (70, 110, 235))


def _render_shape(img, shape_id, cx, cy, w, h, color, size):
    """Rasterize one filled shape whose exact extent is the given box."""
    ys = (np.arange(size) + 0.5) / size
    xs = (np.arange(size) + 0.5) / size
    yy = ys[:, None]
    xx = xs[None, :]
    if shape_id == 0:       # ellipse inscribed in the box
        mask = (((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2) <= 1.0
    elif shape_id == 1:     # axis-aligned rectangle
        mask = ((np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2))
    else:                   # upward triangle: apex top-center, base at bottom
        top = cy - h / 2
        inside_y = (yy >= top) & (yy <= cy + h / 2)
        half_width = (yy - top) / h * (w / 2)
        mask = inside_y & (np.abs(xx - cx) <= half_width)
    img[mask] = color


def synth_generate(out_dir, n, classes, seed, max_objects, image_size=INPUT_SIZE):
    """Write a deterministic synthetic shapes dataset to out_dir.

    Produces images/ PNGs, an annotations.jsonl file and a classes.txt class
    table. Shapes (circle/square/triangle, one per class) are drawn on a
    noisy background and each annotation is the exact rendered extent.
    Object centers are placed in distinct 4x4 grid cells so every object is
    representable by the grid head.
    """
    if not 1 <= classes <= 3:
        raise ValueError(f"classes must be 1..3, got {classes}")
    if not 1 <= max_objects <= 10:
        raise ValueError(f"max_objects must be 1..10, got {max_objects}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        base = rng.integers(20, 50)
        noise = rng.integers(0, 25, size=(image_size, image_size, 3))
        img = np.clip(base + noise, 0, 255).astype(np.uint8)
        n_obj = int(rng.integers(1, max_objects + 1))
        boxes = []
        used_cells = set()
        for _ in range(n_obj):
            for _attempt in range(40):
                w = float(rng.uniform(0.26, 0.5))
                h = float(rng.uniform(0.26, 0.5))
                cx = float(rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01))
                cy = float(rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01))
                cell = (_cell4(cy), _cell4(cx))
                cand = Box(cx=cx, cy=cy, w=w, h=h)
                if cell in used_cells:
                    continue
                if any(iou(cand, bx) > 0.15 for bx in boxes):
                    continue
                used_cells.add(cell)
                cls = int(rng.integers(0, classes))
                cand.class_id = cls
                jitter = rng.integers(-25, 25, size=3)
                color = np.clip(np.array(_SHAPE_COLORS[cls]) + jitter, 110, 255)
                _render_shape(img, cls, cx, cy, w, h, color.astype(np.uint8),
                              image_size)
                boxes.append(cand)
                break
        name = f"images/img_{i:05d}.png"
        Image.fromarray(img).save(out_dir / name)
        records.append({"image": name, "boxes": [
            {"class": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
            for b in boxes]})
    with open(out_dir / "annotations.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    with open(out_dir / "classes.txt", "w", encoding="utf-8") as f:
        for cls in range(classes):
            f.write(f"{SHAPE_NAMES[cls]} {cls}\n")
    return out_dir / "annotations.jsonl"


def _cell4(v):
    return min(int(v * 4), 3)


def load_dataset(dataset_dir):
    """Load (SampleRef, preprocessed image) pairs from a generated dataset."""
    dataset_dir = Path(dataset_dir)
    ann = dataset_dir / "annotations.jsonl"
    if not ann.exists():
        raise DataError(f"no annotations.jsonl under {dataset_dir}")
    samples = load_jsonl(ann)
    images = []
    for s in samples:
        images.append(preprocess(load_image(dataset_dir / s.image)))
    return samples, images
