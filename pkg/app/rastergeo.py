"""
Polygon <-> raster conversions.

Coordinates are (row, col) in pixel units: pixel (r, c) covers
[r, r + 1) x [c, c + 1), so its center is (r + 0.5, c + 0.5) and polygon
vertices traced from masks land on integer pixel corners.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.config import EDGE_WIDTH
from app.errors import InvalidArgument
from app.nepagg import Raster

Point = Tuple[float, float]
BBox = Tuple[int, int, int, int]

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _normalize_ring(ring: Sequence[Sequence[float]]) -> List[Point]:
    pts = [(float(r), float(c)) for r, c in ring]
    if not pts:
        raise InvalidArgument("empty polygon ring")
    if pts[0] != pts[-1]:
        pts.append(pts[0])
    if len(set(pts)) < 3:
        raise InvalidArgument(f"polygon ring needs 3 distinct vertices, got {pts}")
    return pts


@dataclass
class Polygon:
    exterior: List[Point]
    holes: List[List[Point]] = field(default_factory=list)

    def __post_init__(self):
        self.exterior = _normalize_ring(self.exterior)
        self.holes = [_normalize_ring(h) for h in self.holes]

    @classmethod
    def rectangle(cls, top: float, left: float, bottom: float, right: float) -> "Polygon":
        """axis-aligned box, bottom/right exclusive, counter-clockwise"""
        return cls([(top, left), (bottom, left), (bottom, right), (top, right)])

    def rings(self) -> List[List[Point]]:
        return [self.exterior] + self.holes

    def bbox(self) -> Tuple[float, float, float, float]:
        rows = [r for r, _ in self.exterior]
        cols = [c for _, c in self.exterior]
        return min(rows), min(cols), max(rows), max(cols)

    def translate(self, dr: float, dc: float) -> "Polygon":
        return Polygon(
            [(r + dr, c + dc) for r, c in self.exterior],
            [[(r + dr, c + dc) for r, c in h] for h in self.holes],
        )

    def distinct_vertices(self) -> int:
        return len(self.exterior) - 1


@dataclass(eq=False)
class PixelRegion:
    """One connected set of foreground pixels, (n, 2) int array of (row, col)
    kept in row-major order"""

    pixels: np.ndarray
    check_connected: bool = True

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(pixels) == 0:
            raise InvalidArgument("a pixel region cannot be empty")
        pixels = np.unique(pixels, axis=0)
        self.pixels = pixels[np.lexsort((pixels[:, 1], pixels[:, 0]))]

        rows, cols = self.pixels[:, 0], self.pixels[:, 1]
        self.bbox: BBox = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
        self.area = len(self.pixels)

        if self.check_connected:
            _, n = ndimage.label(self.mask(), structure=EIGHT_CONNECTED)
            if n != 1:
                raise InvalidArgument(f"pixel region has {n} 8-connected parts")

    @classmethod
    def from_mask(cls, mask: np.ndarray, offset: Tuple[int, int] = (0, 0), check_connected=True):
        rows, cols = np.nonzero(mask)
        pixels = np.stack([rows + offset[0], cols + offset[1]], axis=1)
        return cls(pixels, check_connected)

    @classmethod
    def rectangle(cls, top: int, left: int, bottom: int, right: int) -> "PixelRegion":
        rows, cols = np.mgrid[top:bottom, left:right]
        return cls(np.stack([rows.ravel(), cols.ravel()], axis=1), check_connected=False)

    @property
    def key(self) -> Tuple[int, int]:
        """top-most, then left-most pixel"""
        return int(self.pixels[0, 0]), int(self.pixels[0, 1])

    def mask(self) -> np.ndarray:
        """boolean mask over the bounding box"""
        r0, c0, r1, c1 = self.bbox
        m = np.zeros((r1 - r0, c1 - c0), dtype=bool)
        m[self.pixels[:, 0] - r0, self.pixels[:, 1] - c0] = True
        return m

    def paint(self, out: np.ndarray, value=1):
        """write value at the region's pixels that fall inside out"""
        h, w = out.shape[:2]
        rows, cols = self.pixels[:, 0], self.pixels[:, 1]
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        out[rows[inside], cols[inside]] = value

    def translate(self, dr: int, dc: int) -> "PixelRegion":
        return PixelRegion(self.pixels + np.array([dr, dc]), check_connected=False)

    def __eq__(self, other):
        return isinstance(other, PixelRegion) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"<PixelRegion key={self.key} area={self.area} bbox={self.bbox}>"


def _even_odd(rings: Sequence[Sequence[Point]], centers_r: np.ndarray, centers_c: np.ndarray):
    """Crossing-number test of every (row, col) center pair against all rings.
    Half-open: a center on the min-row or min-col boundary is inside."""
    inside = np.zeros((len(centers_r), len(centers_c)), dtype=bool)
    for ring in rings:
        for (ra, ca), (rb, cb) in zip(ring[:-1], ring[1:]):
            if ra == rb:
                continue
            spans = (ra <= centers_r) != (rb <= centers_r)
            if not spans.any():
                continue
            rows = centers_r[spans]
            cross_c = ca + (rows - ra) * (cb - ca) / (rb - ra)
            inside[spans] ^= cross_c[:, None] > centers_c[None, :]
    return inside


def _polygon_window(polygon: Polygon, height: int = None, width: int = None):
    """rows/cols (inclusive-exclusive) of the pixels whose centers can be inside"""
    rmin, cmin, rmax, cmax = polygon.bbox()
    r0, c0 = int(np.ceil(rmin - 0.5)), int(np.ceil(cmin - 0.5))
    r1, c1 = int(np.floor(rmax - 0.5)) + 1, int(np.floor(cmax - 0.5)) + 1
    if height is not None:
        r0, r1 = max(r0, 0), min(r1, height)
    if width is not None:
        c0, c1 = max(c0, 0), min(c1, width)
    return r0, c0, r1, c1


def _polygon_mask(polygon: Polygon, r0: int, c0: int, r1: int, c1: int) -> np.ndarray:
    return _even_odd(polygon.rings(), np.arange(r0, r1) + 0.5, np.arange(c0, c1) + 0.5)


def rasterize(polygons: Sequence[Polygon], height: int, width: int) -> Raster:
    """1 where a pixel center lies inside any polygon (even-odd), parts
    outside the raster are clipped"""
    if height < 1 or width < 1:
        raise InvalidArgument(f"raster extents must be positive, got {height}x{width}")

    mask = np.zeros((height, width), dtype=np.uint8)
    for polygon in polygons:
        r0, c0, r1, c1 = _polygon_window(polygon, height, width)
        if r0 >= r1 or c0 >= c1:
            continue
        mask[r0:r1, c0:c1] |= _polygon_mask(polygon, r0, c0, r1, c1).astype(np.uint8)

    return Raster(mask)


def polygon_region(polygon: Polygon) -> Optional[PixelRegion]:
    """Pixels of one polygon, unclipped; None when no center is inside"""
    r0, c0, r1, c1 = _polygon_window(polygon)
    if r0 >= r1 or c0 >= c1:
        return None
    inside = _polygon_mask(polygon, r0, c0, r1, c1)
    if not inside.any():
        return None
    return PixelRegion.from_mask(inside, offset=(r0, c0), check_connected=False)


def edge_mask(
    polygons: Sequence[Polygon], height: int, width: int, edge_width: int = EDGE_WIDTH
) -> Raster:
    """Pixels of each rasterized polygon within chessboard distance
    edge_width of that polygon's complement (outside the raster counts as
    complement)"""
    if edge_width < 1:
        raise InvalidArgument(f"edge_width must be >= 1, got {edge_width}")

    out = np.zeros((height, width), dtype=np.uint8)
    for polygon in polygons:
        r0, c0, r1, c1 = _polygon_window(polygon, height, width)
        if r0 >= r1 or c0 >= c1:
            continue
        inside = _polygon_mask(polygon, r0, c0, r1, c1)
        # one ring of complement around the window
        padded = np.pad(inside, 1)
        dist = ndimage.distance_transform_cdt(padded, metric="chessboard")[1:-1, 1:-1]
        out[r0:r1, c0:c1] |= (inside & (dist <= edge_width)).astype(np.uint8)

    return Raster(out)


def bboxes_disjoint(a: BBox, b: BBox) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def region_iou(a: PixelRegion, b: PixelRegion) -> float:
    """|a & b| / |a | b| over exact pixel sets"""
    if bboxes_disjoint(a.bbox, b.bbox):
        return 0.0

    r0, c0 = min(a.bbox[0], b.bbox[0]), min(a.bbox[1], b.bbox[1])
    r1, c1 = max(a.bbox[2], b.bbox[2]), max(a.bbox[3], b.bbox[3])
    ma = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    mb = np.zeros_like(ma)
    ma[a.pixels[:, 0] - r0, a.pixels[:, 1] - c0] = True
    mb[b.pixels[:, 0] - r0, b.pixels[:, 1] - c0] = True

    intersection = int(np.count_nonzero(ma & mb))
    return intersection / (a.area + b.area - intersection)
