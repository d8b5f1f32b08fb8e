"""Point annotations, their on-disk formats, and a synthetic perspective scene generator.

Coordinates follow the image convention: ``x`` is the column (from the left
edge), ``y`` is the row (from the top edge), both continuous.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateProjection, MalformedFile, OutOfBoundsPoint

IMAGE_MAGIC = b"IMG1"


class PointAnnotation(NamedTuple):
    x: float
    y: float


@dataclass(eq=False)
class AnnotatedImage:
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    image: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if self.image is not None and self.image.shape != (self.height, self.width):
            raise ValueError(
                f"image shape {self.image.shape} does not match ({self.height}, {self.width})"
            )

    @property
    def count(self) -> int:
        return len(self.points)

    def point(self, i: int) -> PointAnnotation:
        return PointAnnotation(float(self.points[i, 0]), float(self.points[i, 1]))

    def validate(self) -> None:
        for i, (x, y) in enumerate(self.points):
            if not (0.0 <= x < self.width and 0.0 <= y < self.height):
                raise OutOfBoundsPoint(i, float(x), float(y), self.width, self.height)

    def __eq__(self, other):
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        if (self.width, self.height) != (other.width, other.height):
            return False
        if not np.array_equal(self.points, other.points):
            return False
        if (self.image is None) != (other.image is None):
            return False
        return self.image is None or np.array_equal(self.image, other.image)


def load_annotations(path) -> AnnotatedImage:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise MalformedFile(f"{path}: expected a JSON object")
    try:
        width, height, points = raw["width"], raw["height"], raw["points"]
    except KeyError as exc:
        raise MalformedFile(f"{path}: missing field {exc}") from exc
    if not (isinstance(width, int) and isinstance(height, int)) or width <= 0 or height <= 0:
        raise MalformedFile(f"{path}: width/height must be positive integers")
    if not isinstance(points, list) or any(
        not isinstance(p, list) or len(p) != 2 or not all(isinstance(v, (int, float)) for v in p)
        for p in points
    ):
        raise MalformedFile(f"{path}: points must be a list of [x, y] pairs")
    ann = AnnotatedImage(width, height, np.array(points, dtype=np.float64).reshape(-1, 2))
    ann.validate()
    return ann


def save_annotations(ann: AnnotatedImage, path) -> None:
    # json emits the shortest repr that round-trips a float64 exactly
    doc = {
        "width": int(ann.width),
        "height": int(ann.height),
        "points": [[float(x), float(y)] for x, y in ann.points],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def save_image(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack("<II", h, w))
        f.write(image.astype("<f4").tobytes())


def load_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMAGE_MAGIC or len(data) < 12:
        raise MalformedFile(f"{path}: not an IMG1 file")
    h, w = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * h * w:
        raise MalformedFile(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


# --------------------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SynthSceneConfig:
    """Pinhole camera looking along the ground plane.

    A person at ground depth ``z`` appears on row
    ``horizon + focal * camera_height / z`` and at column
    ``width / 2 + focal * x_world / z``.
    """

    width: int = 96
    height: int = 64
    camera_height: float = 4.0
    focal: float = 82.0
    ground_depth_range: tuple[float, float] = (4.0, 16.0)
    person_count_range: tuple[int, int] = (20, 150)
    cluster_count: int = 0
    dot_sigma_at_near: float = 2.0
    horizon: float = -20.0
    cluster_spread: float = 1.0
    max_retries: int = 100

    def __post_init__(self):
        z_near, z_far = self.ground_depth_range
        lo, hi = self.person_count_range
        if not 0 < z_near < z_far:
            raise ValueError(f"need 0 < z_near < z_far, got {self.ground_depth_range}")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad person_count_range {self.person_count_range}")
        if self.width <= 0 or self.height <= 0 or self.width % 16 or self.height % 16:
            raise ValueError("width and height must be positive multiples of 16")
        if self.camera_height <= 0 or self.focal <= 0 or self.dot_sigma_at_near <= 0:
            raise ValueError("camera_height, focal and dot_sigma_at_near must be positive")
        if self.cluster_count < 0 or self.cluster_spread <= 0 or self.max_retries < 1:
            raise ValueError("bad clustering parameters")

    def project(self, xw, z):
        xw = np.asarray(xw, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        return (self.width / 2.0 + self.focal * xw / z, self.horizon + self.focal * self.camera_height / z)

    def half_width_at(self, z):
        return self.width / 2.0 * z / self.focal


def _in_frame(cfg: SynthSceneConfig, x: float, y: float) -> bool:
    return 0.0 <= x < cfg.width and 0.0 <= y < cfg.height


def _sample_uniform(cfg: SynthSceneConfig, rng: np.random.Generator) -> tuple[float, float]:
    z_near, z_far = cfg.ground_depth_range
    for _ in range(cfg.max_retries):
        z = rng.uniform(z_near, z_far)
        half = cfg.half_width_at(z)
        xw = rng.uniform(-half, half)
        x, y = cfg.project(xw, z)
        if _in_frame(cfg, x, y):
            return xw, z
    raise DegenerateProjection(
        f"no in-frame position after {cfg.max_retries} draws; check horizon/focal/depth range"
    )


def _sample_member(
    cfg: SynthSceneConfig, rng: np.random.Generator, center: tuple[float, float]
) -> tuple[float, float]:
    cx, cz = center
    z_near = cfg.ground_depth_range[0]
    for _ in range(cfg.max_retries):
        xw = cx + rng.normal(0.0, cfg.cluster_spread)
        z = cz + rng.normal(0.0, cfg.cluster_spread)
        if z < z_near:
            continue
        x, y = cfg.project(xw, z)
        if _in_frame(cfg, x, y):
            return xw, z
    raise DegenerateProjection(
        f"cluster at {center} produced no in-frame member after {cfg.max_retries} draws"
    )


def render_dots(cfg: SynthSceneConfig, points: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Unit-peak Gaussian blob per person, shrinking with depth, clamped to [0, 1]."""
    img = np.zeros((cfg.height, cfg.width))
    z_near = cfg.ground_depth_range[0]
    rows = np.arange(cfg.height, dtype=np.float64)
    cols = np.arange(cfg.width, dtype=np.float64)
    for (x, y), z in zip(points, depths):
        s = cfg.dot_sigma_at_near * z_near / z
        r = max(1, math.ceil(3 * s))
        r0, r1 = max(0, int(math.floor(y)) - r), min(cfg.height, int(math.floor(y)) + r + 2)
        c0, c1 = max(0, int(math.floor(x)) - r), min(cfg.width, int(math.floor(x)) + r + 2)
        gy = np.exp(-((rows[r0:r1] - y) ** 2) / (2 * s * s))
        gx = np.exp(-((cols[c0:c1] - x) ** 2) / (2 * s * s))
        img[r0:r1, c0:c1] += np.outer(gy, gx)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_scene(cfg: SynthSceneConfig, seed: int) -> AnnotatedImage:
    rng = np.random.default_rng(seed)
    lo, hi = cfg.person_count_range
    n = int(rng.integers(lo, hi + 1))
    centers = [_sample_uniform(cfg, rng) for _ in range(cfg.cluster_count)]
    world = np.zeros((n, 2))
    for i in range(n):
        if centers:
            world[i] = _sample_member(cfg, rng, centers[int(rng.integers(len(centers)))])
        else:
            world[i] = _sample_uniform(cfg, rng)
    x, y = cfg.project(world[:, 0], world[:, 1])
    points = np.stack([x, y], axis=1) if n else np.zeros((0, 2))
    image = render_dots(cfg, points, world[:, 1])
    return AnnotatedImage(cfg.width, cfg.height, points, image)


# --------------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class ManifestEntry:
    annotation: Path
    image: Path
    count: int

    @property
    def image_id(self) -> str:
        name = self.annotation.name
        return name[: -len(".json")] if name.endswith(".json") else self.annotation.stem


def synth_dataset(cfg: SynthSceneConfig, seed: int, n: int, out_dir) -> Path:
    if n < 1:
        raise ValueError("n must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        scene = synth_scene(cfg, seed + i)
        stem = f"scene_{i:05d}"
        save_annotations(scene, out_dir / f"{stem}.json")
        save_image(scene.image, out_dir / f"{stem}.img")
        entries.append({"annotation": f"{stem}.json", "image": f"{stem}.img", "count": scene.count})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    """Entries with paths resolved against the manifest's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise MalformedFile(f"{path}: manifest must be a JSON array")
    base = path.parent
    out = []
    for i, e in enumerate(raw):
        try:
            out.append(ManifestEntry(base / e["annotation"], base / e["image"], int(e["count"])))
        except (KeyError, TypeError) as exc:
            raise MalformedFile(f"{path}: entry {i} malformed ({exc})") from exc
    return out


def load_entry(entry: ManifestEntry) -> AnnotatedImage:
    ann = load_annotations(entry.annotation)
    image = load_image(entry.image)
    return AnnotatedImage(ann.width, ann.height, ann.points, image)


def center_crop16(ann: AnnotatedImage) -> AnnotatedImage:
    """Crop to the largest centred multiple-of-16 window, dropping points outside it."""
    h16, w16 = ann.height // 16 * 16, ann.width // 16 * 16
    if (h16, w16) == (ann.height, ann.width):
        return ann
    if h16 == 0 or w16 == 0:
        raise ValueError(f"image {ann.width}x{ann.height} is smaller than 16 pixels")
    top, left = (ann.height - h16) // 2, (ann.width - w16) // 2
    pts = ann.points - np.array([left, top], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < w16) & (pts[:, 1] >= 0) & (pts[:, 1] < h16)
    image = None if ann.image is None else ann.image[top : top + h16, left : left + w16].copy()
    return AnnotatedImage(w16, h16, pts[keep], image)
