"""
Seeded synthetic scenes: axis-aligned rectangular buildings on a noisy
background, with their exact outline polygons as ground truth.
"""
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from app.config import DEFAULT_CORE_SIZE, MAX_PLACEMENT_ATTEMPTS
from app.errors import InvalidArgument, PlacementError
from app.file_utils import read_geojson, read_json, read_png, write_geojson, write_json, write_png
from app.log import LOG
from app.nepagg import Raster, crosses_tile_boundary
from app.rastergeo import Polygon

Rect = Tuple[int, int, int, int]  # top, left, bottom, right; bottom/right exclusive

LAYOUTS = ("scatter", "packed")
SUITE_KINDS = ("sparse", "dense", "straddle")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    # None fills the scene (packed layout only)
    count: Optional[int] = 6
    min_size: int = 8
    max_size: int = 16
    min_gap: int = 8
    # packed layout draws every gap from [min_gap, max_gap]
    max_gap: int = 8
    layout: str = "scatter"
    background: int = 60
    building: int = 180
    building_jitter: int = 20
    noise: int = 25
    straddle_fraction: float = 0.0
    core_w: int = DEFAULT_CORE_SIZE
    core_h: int = DEFAULT_CORE_SIZE
    seed: int = 0

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise InvalidArgument(f"scene extents must be positive, got {self.height}x{self.width}")
        if self.layout not in LAYOUTS:
            raise InvalidArgument(f"layout must be one of {LAYOUTS}, got {self.layout}")
        if self.count is None and self.layout != "packed":
            raise InvalidArgument("only the packed layout can fill a scene")
        if self.count is not None and self.count < 0:
            raise InvalidArgument(f"building count must be >= 0, got {self.count}")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise InvalidArgument(f"bad size range [{self.min_size}, {self.max_size}]")
        if not 1 <= self.min_gap <= self.max_gap:
            raise InvalidArgument(f"bad gap range [{self.min_gap}, {self.max_gap}], min gap must be >= 1")
        if not 0 <= self.straddle_fraction <= 1:
            raise InvalidArgument(f"straddle_fraction must be in [0, 1], got {self.straddle_fraction}")
        if self.noise < 0 or self.building_jitter < 0:
            raise InvalidArgument("noise and jitter amplitudes must be >= 0")
        if self.core_w < 1 or self.core_h < 1:
            raise InvalidArgument("core extents must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown scene spec keys {sorted(unknown)}")
        return cls(**d)


def rect_gap(a: Rect, b: Rect) -> int:
    """background pixels separating two rectangles along the chessboard
    metric; negative when they overlap"""
    rows = max(b[0] - a[2], a[0] - b[2])
    cols = max(b[1] - a[3], a[1] - b[3])
    return max(rows, cols)


def _fits(rect: Rect, placed: List[Rect], min_gap: int) -> bool:
    return all(rect_gap(rect, other) >= min_gap for other in placed)


def _random_rect(rng: np.random.Generator, spec: SceneSpec) -> Rect:
    h = int(rng.integers(spec.min_size, spec.max_size + 1))
    w = int(rng.integers(spec.min_size, spec.max_size + 1))
    top = int(rng.integers(0, spec.height - h + 1))
    left = int(rng.integers(0, spec.width - w + 1))
    return top, left, top + h, left + w


def _straddling_rect(rng: np.random.Generator, spec: SceneSpec) -> Optional[Rect]:
    """a rectangle spanning an interior core-tile boundary line"""
    h = int(rng.integers(spec.min_size, spec.max_size + 1))
    w = int(rng.integers(spec.min_size, spec.max_size + 1))
    col_lines = [x for x in range(spec.core_w, spec.width, spec.core_w) if w >= 2]
    row_lines = [y for y in range(spec.core_h, spec.height, spec.core_h) if h >= 2]
    lines = [("col", x) for x in col_lines] + [("row", y) for y in row_lines]
    if not lines:
        return None

    axis, at = lines[int(rng.integers(len(lines)))]
    if axis == "col":
        left = at - int(rng.integers(1, w))
        top = int(rng.integers(0, spec.height - h + 1))
    else:
        top = at - int(rng.integers(1, h))
        left = int(rng.integers(0, spec.width - w + 1))
    rect = top, left, top + h, left + w
    if rect[0] < 0 or rect[1] < 0 or rect[2] > spec.height or rect[3] > spec.width:
        return None
    return rect


def _scatter(rng: np.random.Generator, spec: SceneSpec) -> List[Rect]:
    forced = math.ceil(spec.straddle_fraction * spec.count)
    placed: List[Rect] = []
    for i in range(spec.count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            rect = _straddling_rect(rng, spec) if i < forced else _random_rect(rng, spec)
            if rect is not None and _fits(rect, placed, spec.min_gap):
                placed.append(rect)
                break
        else:
            raise PlacementError(
                f"placed {len(placed)} of {spec.count} buildings after {MAX_PLACEMENT_ATTEMPTS} "
                "attempts, lower the count or the gap"
            )
    return placed


def _packed(rng: np.random.Generator, spec: SceneSpec) -> List[Rect]:
    """rows of buildings separated by gaps drawn from [min_gap, max_gap]"""
    placed: List[Rect] = []

    def gap():
        return int(rng.integers(spec.min_gap, spec.max_gap + 1))

    top = gap()
    while True:
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        if top + h > spec.height:
            break
        left = gap()
        while True:
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            if left + w > spec.width:
                break
            placed.append((top, left, top + h, left + w))
            left += w + gap()
        top += h + gap()

    if spec.count is not None:
        if len(placed) < spec.count:
            raise PlacementError(
                f"only {len(placed)} of {spec.count} buildings fit a packed {spec.height}x{spec.width} scene"
            )
        placed = placed[: spec.count]
    return placed


def generate(spec: SceneSpec) -> Tuple[Raster, List[Polygon]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rects = _packed(rng, spec) if spec.layout == "packed" else _scatter(rng, spec)

    image = np.full((spec.height, spec.width), float(spec.background))
    for top, left, bottom, right in rects:
        jitter = rng.integers(-spec.building_jitter, spec.building_jitter + 1)
        image[top:bottom, left:right] = spec.building + jitter

    noise = rng.uniform(-spec.noise, spec.noise, size=(spec.height, spec.width, 3))
    pixels = np.clip(np.round(image[:, :, None] + noise), 0, 255).astype(np.uint8)
    polygons = [Polygon.rectangle(*rect) for rect in rects]

    LOG.d("generated %s buildings in a %sx%s %s scene", len(rects), spec.height, spec.width, spec.layout)
    return Raster(pixels), polygons


def suite_spec(kind: str, core_w: int = DEFAULT_CORE_SIZE, core_h: int = DEFAULT_CORE_SIZE) -> SceneSpec:
    """desk-scale scene template of one suite kind"""
    if kind == "sparse":
        return SceneSpec(count=6, min_size=8, max_size=16, min_gap=8, max_gap=8, core_w=core_w, core_h=core_h)
    if kind == "dense":
        return SceneSpec(
            count=None, min_size=6, max_size=12, min_gap=1, max_gap=2, layout="packed",
            core_w=core_w, core_h=core_h,
        )
    if kind == "straddle":
        return SceneSpec(
            count=6, min_size=10, max_size=20, min_gap=4, max_gap=4, straddle_fraction=0.67,
            core_w=core_w, core_h=core_h,
        )
    raise InvalidArgument(f"suite kind must be one of {SUITE_KINDS}, got {kind}")


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_suite(
    kind: str,
    seed: int,
    out_dir: str,
    scenes: int = 4,
    core_w: int = DEFAULT_CORE_SIZE,
    core_h: int = DEFAULT_CORE_SIZE,
    template: Optional[SceneSpec] = None,
) -> dict:
    """Writes images/<id>.png, labels/<id>.geojson and manifest.json;
    returns the manifest"""
    if scenes < 1:
        raise InvalidArgument(f"a suite needs at least one scene, got {scenes}")
    template = template or suite_spec(kind, core_w, core_h)

    entries = []
    boundary, total = 0, 0
    for i in range(scenes):
        spec = replace(template, seed=scene_seed(seed, i))
        raster, polygons = generate(spec)
        scene_id = f"{kind}_{i:03d}"
        image = os.path.join("images", scene_id + ".png")
        labels = os.path.join("labels", scene_id + ".geojson")
        write_png(raster.pixels, os.path.join(out_dir, image))
        write_geojson([p.rings() for p in polygons], os.path.join(out_dir, labels))
        entries.append({"id": scene_id, "image": image, "labels": labels, "spec": spec.to_dict()})

        total += len(polygons)
        boundary += sum(
            crosses_tile_boundary(_int_bbox(p), spec.core_w, spec.core_h) for p in polygons
        )

    manifest = {
        "kind": kind,
        "seed": seed,
        "core_w": core_w,
        "core_h": core_h,
        "scenes": entries,
        "buildings": total,
        "boundary_buildings": boundary,
    }
    write_json(manifest, os.path.join(out_dir, "manifest.json"))
    LOG.i("wrote %s %s scenes with %s buildings to %s", scenes, kind, total, out_dir)
    return manifest


def _int_bbox(polygon: Polygon) -> Rect:
    top, left, bottom, right = polygon.bbox()
    return int(top), int(left), int(bottom), int(right)


def load_suite(data_dir: str) -> Tuple[dict, List[Tuple[str, Raster, List[Polygon]]]]:
    """manifest plus (scene id, image, ground-truth polygons) per scene"""
    manifest = read_json(os.path.join(data_dir, "manifest.json"))
    scenes = []
    for entry in manifest["scenes"]:
        raster = Raster(read_png(os.path.join(data_dir, entry["image"])))
        polygons = [
            Polygon(rings[0], rings[1:]) for rings in read_geojson(os.path.join(data_dir, entry["labels"]))
        ]
        scenes.append((entry["id"], raster, polygons))
    return manifest, scenes
