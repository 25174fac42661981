"""Procedural layered-shape scenes with instance masks and attribute labels.

Four shape classes (ellipse, rectangle, triangle, ring) are painted back to
front. Each instance carries nine binary attributes that are visible in the
pixels: fill pattern (solid / striped / dotted), border (present / absent)
and one of four hue buckets.

Dataset container layout (all integers little-endian)::

    b"LQDS" | u32 index_length | index JSON (utf-8) | payload

Each scene's blob starts at ``payload + offset`` and holds the image as
float32 C x H x W row-major, followed by one packed bitmap per instance
(row-major, most significant bit first, each bitmap padded to a whole byte).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

K_CLS = 4
K_ATTR = 9
CLASS_NAMES = ("ellipse", "rectangle", "triangle", "ring")
ATTR_NAMES = (
    "solid", "striped", "dotted",
    "border", "no_border",
    "hue_red", "hue_green", "hue_blue", "hue_yellow",
)
PATTERNS = ("solid", "striped", "dotted")
HUES = np.array(
    [[0.85, 0.18, 0.16], [0.18, 0.72, 0.24], [0.20, 0.34, 0.90], [0.92, 0.80, 0.18]]
)
SMALL_AREA = 0.10
MAX_ATTEMPTS = 100
MIN_VISIBLE_FRACTION = 0.3
FORMAT_VERSION = 1
MAGIC = b"LQDS"


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    num_instances: int = 3
    scale_mix: float = 0.5
    seed: int = 0


@dataclass
class Shape:
    kind: int
    cx: float
    cy: float
    rx: float
    ry: float
    orientation: int = 0  # triangles only: apex up/right/down/left
    pattern: int = 0
    border: bool = False
    hue: int = 0
    color_jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pattern_phase: int = 0

    def attributes(self) -> np.ndarray:
        a = np.zeros(K_ATTR, dtype=np.uint8)
        a[self.pattern] = 1
        a[3 if self.border else 4] = 1
        a[5 + self.hue] = 1
        return a


@dataclass
class SceneAnnotation:
    class_ids: np.ndarray  # (n,) int64
    masks: np.ndarray  # (n, H, W) bool, visible regions
    attributes: np.ndarray  # (n, K_ATTR) uint8
    layer_order: np.ndarray  # (n,) int64, higher occludes lower

    def __len__(self) -> int:
        return len(self.class_ids)

    def subset(self, keep) -> SceneAnnotation:
        keep = np.asarray(keep)
        return SceneAnnotation(self.class_ids[keep], self.masks[keep],
                               self.attributes[keep], self.layer_order[keep])


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    annotation: SceneAnnotation
    id: int = 0
    meta: dict = field(default_factory=dict)


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_nearest(masks: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (pixel-centre sampling)."""
    h, w = masks.shape[-2:]
    if (h, w) == (height, width):
        return masks
    return masks[..., nearest_index(h, height)[:, None], nearest_index(w, width)[None, :]]


def rasterize(shape: Shape, size: int) -> np.ndarray:
    """Hard binary raster of a shape, sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (xx - shape.cx) / shape.rx
    v = (yy - shape.cy) / shape.ry
    if shape.kind == 0:
        return u * u + v * v <= 1.0
    if shape.kind == 1:
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape.kind == 2:
        # rotate so the apex points along the chosen orientation
        for _ in range(shape.orientation % 4):
            u, v = -v, u
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape.kind == 3:
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    raise ValueError(f"unknown shape kind {shape.kind}")


def background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.3, size=(3, 1, 1))
    return np.clip(base + rng.uniform(-0.04, 0.04, size=(3, height, width)), 0.0, 1.0)


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        p = np.pad(out, 1)
        out = out & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return out


def _paint(image: np.ndarray, shape: Shape, raster: np.ndarray) -> None:
    color = np.clip(HUES[shape.hue] + np.asarray(shape.color_jitter), 0.0, 1.0)
    dark = color * 0.4
    size = raster.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    fill = np.broadcast_to(color[:, None, None], image.shape).copy()
    if shape.pattern == 1:
        stripe = ((xx + yy + shape.pattern_phase) // 4) % 2 == 0
        fill[:, stripe] = dark[:, None]
    elif shape.pattern == 2:
        dots = ((xx + shape.pattern_phase) % 6 < 2) & ((yy + shape.pattern_phase) % 6 < 2)
        fill[:, dots] = dark[:, None]
    if shape.border:
        rim = raster & ~_erode(raster, 2)
        fill[:, rim] = (0.3 * color + 0.7)[:, None]
    image[:, raster] = fill[:, raster]


def render(shapes: list[Shape], size: int, rng: np.random.Generator,
           min_visible: float = 0.0) -> tuple[np.ndarray, SceneAnnotation]:
    """Paint shapes in list order (later = higher layer) over a noisy background.

    Raises GenerationError if any instance keeps fewer than one visible pixel
    or less than ``min_visible`` of its raster.
    """
    image = background(rng, size, size)
    rasters = [rasterize(s, size) for s in shapes]
    for s, r in zip(shapes, rasters):
        _paint(image, s, r)
    visible = []
    above = np.zeros((size, size), dtype=bool)
    for r in reversed(rasters):
        visible.append(r & ~above)
        above |= r
    visible.reverse()
    for r, v in zip(rasters, visible):
        nv = int(v.sum())
        if nv < 1 or nv < min_visible * r.sum():
            raise GenerationError("instance occluded")
    n = len(shapes)
    ann = SceneAnnotation(
        class_ids=np.array([s.kind for s in shapes], dtype=np.int64),
        masks=np.array(visible, dtype=bool).reshape(n, size, size),
        attributes=np.array([s.attributes() for s in shapes], dtype=np.uint8).reshape(n, K_ATTR),
        layer_order=np.arange(n, dtype=np.int64),
    )
    # float32 storage so that serialisation is lossless
    return image.astype(np.float32), ann


def _raster_area_factor(kind: int) -> float:
    return {0: math.pi, 1: 4.0, 2: 2.0, 3: math.pi * (1 - 0.55**2)}[kind]


def _sample_shape(rng: np.random.Generator, size: int, small: bool) -> Shape:
    kind = int(rng.integers(K_CLS))
    frac = rng.uniform(0.025, 0.08) if small else rng.uniform(0.12, 0.3)
    aspect = rng.uniform(0.7, 1.4)
    prod = frac * size * size / _raster_area_factor(kind)
    rx, ry = math.sqrt(prod * aspect), math.sqrt(prod / aspect)
    cx = rng.uniform(rx * 0.8, size - rx * 0.8)
    cy = rng.uniform(ry * 0.8, size - ry * 0.8)
    return Shape(
        kind=kind, cx=cx, cy=cy, rx=rx, ry=ry,
        orientation=int(rng.integers(4)),
        pattern=int(rng.integers(3)),
        border=bool(rng.integers(2)),
        hue=int(rng.integers(4)),
        color_jitter=tuple(rng.uniform(-0.06, 0.06, size=3)),
        pattern_phase=int(rng.integers(8)),
    )


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, SceneAnnotation]:
    """Deterministic scene from ``spec``; retries placement up to 100 times."""
    if spec.image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {spec.image_size}")
    if not 1 <= spec.num_instances <= 8:
        raise ValueError(f"num_instances must be in [1, 8], got {spec.num_instances}")
    if not 0.0 <= spec.scale_mix <= 1.0:
        raise ValueError(f"scale_mix must be in [0, 1], got {spec.scale_mix}")
    rng = np.random.default_rng(spec.seed)
    size, n = spec.image_size, spec.num_instances
    n_small = math.ceil(spec.scale_mix * n - 1e-9)
    limit = SMALL_AREA * size * size
    for _ in range(MAX_ATTEMPTS):
        small_flags = np.zeros(n, dtype=bool)
        small_flags[rng.permutation(n)[:n_small]] = True
        shapes = [_sample_shape(rng, size, bool(f)) for f in small_flags]
        areas = [int(rasterize(s, size).sum()) for s in shapes]
        if any(a < 1 or (f and a >= limit) for a, f in zip(areas, small_flags)):
            continue
        # big shapes underneath, small ones on top
        order = np.argsort(-np.asarray(areas), kind="stable")
        shapes = [shapes[i] for i in order]
        try:
            return render(shapes, size, rng, MIN_VISIBLE_FRACTION)
        except GenerationError:
            continue
    raise GenerationError(f"could not place {n} instances after {MAX_ATTEMPTS} attempts")


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def generate_dataset(n_scenes: int, image_size: int = 128, seed: int = 0,
                     scale_mix: float = 0.5, min_instances: int = 1,
                     max_instances: int = 4) -> list[Scene]:
    scenes = []
    for i in range(n_scenes):
        s = scene_seed(seed, i)
        count = min_instances + s % (max_instances - min_instances + 1)
        image, ann = generate_scene(SceneSpec(image_size, int(count), scale_mix, s))
        scenes.append(Scene(image=image, annotation=ann, id=i))
    return scenes


# ------------------------------------------------------------------ container


def serialize_dataset(scenes: list[Scene], path, k_cls: int = K_CLS, k_attr: int = K_ATTR) -> None:
    if not scenes:
        size = 0
    else:
        size = scenes[0].image.shape[-1]
    blobs, index, offset = [], [], 0
    for sc in scenes:
        if sc.image.shape != (3, size, size):
            raise ValueError(f"scene {sc.id}: image shape {sc.image.shape} != (3, {size}, {size})")
        img = sc.image.astype("<f4").tobytes()
        masks = b"".join(np.packbits(m.reshape(-1)).tobytes() for m in sc.annotation.masks)
        blob = img + masks
        ann = sc.annotation
        index.append({
            "id": int(sc.id),
            "class_ids": [int(c) for c in ann.class_ids],
            "attributes": [[int(v) for v in row] for row in ann.attributes],
            "layer_order": [int(v) for v in ann.layer_order],
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "version": FORMAT_VERSION, "image_size": size, "K_cls": k_cls,
        "K_attr": k_attr, "scenes": index,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_dataset(path, k_cls: int | None = K_CLS, k_attr: int | None = K_ATTR) -> list[Scene]:
    """Read a container written by :func:`serialize_dataset`.

    Pass ``k_cls``/``k_attr`` as None to skip the schema check.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic at byte offset 0")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if 8 + hlen > len(raw):
        raise DatasetFormatError(
            f"{path}: index of {hlen} bytes overruns file of {len(raw)} bytes at byte offset 8")
    try:
        index = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        where = getattr(exc, "pos", getattr(exc, "start", 0))
        line = getattr(exc, "lineno", 1)
        raise DatasetFormatError(
            f"{path}: malformed index (line {line}) at byte offset {8 + where}: {exc}") from exc
    for key in ("version", "image_size", "K_cls", "K_attr", "scenes"):
        if key not in index:
            raise DatasetFormatError(f"{path}: index missing key {key!r}")
    if index["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {index['version']}")
    if k_cls is not None and index["K_cls"] != k_cls:
        raise DatasetFormatError(f"{path}: schema mismatch: K_cls={index['K_cls']}, expected {k_cls}")
    if k_attr is not None and index["K_attr"] != k_attr:
        raise DatasetFormatError(f"{path}: schema mismatch: K_attr={index['K_attr']}, expected {k_attr}")
    size = int(index["image_size"])
    img_bytes = 3 * size * size * 4
    mask_bytes = (size * size + 7) // 8
    base = 8 + hlen
    scenes = []
    for entry in index["scenes"]:
        n = len(entry["class_ids"])
        start = base + int(entry["offset"])
        need = img_bytes + n * mask_bytes
        if int(entry["length"]) != need:
            raise DatasetFormatError(
                f"{path}: scene {entry['id']} declares {entry['length']} bytes, expected {need}")
        if start + need > len(raw):
            raise DatasetFormatError(
                f"{path}: scene {entry['id']} truncated at byte offset {len(raw)} "
                f"(needs up to {start + need})")
        image = np.frombuffer(raw, dtype="<f4", count=3 * size * size, offset=start)
        image = image.reshape(3, size, size).astype(np.float32)
        masks = np.zeros((n, size, size), dtype=bool)
        for k in range(n):
            o = start + img_bytes + k * mask_bytes
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=mask_bytes, offset=o))
            masks[k] = bits[: size * size].reshape(size, size).astype(bool)
        attrs = np.array(entry["attributes"], dtype=np.uint8).reshape(n, index["K_attr"])
        if np.any(attrs > 1):
            raise DatasetFormatError(f"{path}: scene {entry['id']} has non-binary attributes")
        ann = SceneAnnotation(
            class_ids=np.array(entry["class_ids"], dtype=np.int64),
            masks=masks,
            attributes=attrs,
            layer_order=np.array(entry["layer_order"], dtype=np.int64),
        )
        scenes.append(Scene(image=image, annotation=ann, id=int(entry["id"])))
    if base + sum(int(e["length"]) for e in index["scenes"]) != len(raw):
        raise DatasetFormatError(f"{path}: trailing or missing payload bytes")
    return scenes
