"""
Probability map -> ordered set of (pixel region, traced polygon) pairs:
binarize, label 8-connected components, trace each outer boundary along
pixel corners.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.config import BINARIZE_THRESHOLD, EDGE_SPLIT_THRESHOLD
from app.errors import InvalidArgument
from app.log import LOG
from app.nepagg import Raster
from app.rastergeo import EIGHT_CONNECTED, PixelRegion, Polygon, polygon_region

# boundary edge directions as (d_row, d_col)
_DOWN, _RIGHT, _UP, _LEFT = (1, 0), (0, 1), (-1, 0), (0, -1)


@dataclass
class PolygonSet:
    """(region, polygon) pairs in canonical order, keys strictly increasing.

    Regions coming out of extract are pixel-disjoint components. Ground truth
    and hand-built sets may overlap, they only need distinct keys."""

    items: List[Tuple[PixelRegion, Polygon]] = field(default_factory=list)

    def __post_init__(self):
        self.items.sort(key=lambda item: item[0].key)
        keys = [region.key for region, _ in self.items]
        for a, b in zip(keys, keys[1:]):
            if a == b:
                raise InvalidArgument(f"two regions share the canonical key {a}")

    def __len__(self):
        return len(self.items)

    def __iter__(self) -> Iterator[Tuple[PixelRegion, Polygon]]:
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def regions(self) -> List[PixelRegion]:
        return [region for region, _ in self.items]

    @property
    def polygons(self) -> List[Polygon]:
        return [polygon for _, polygon in self.items]

    @classmethod
    def from_polygons(cls, polygons: Sequence[Polygon]) -> "PolygonSet":
        """Ground truth from vector polygons: each polygon rasterized on its own"""
        items = []
        for polygon in polygons:
            region = polygon_region(polygon)
            if region is None:
                LOG.w("polygon %s covers no pixel center, skip", polygon.exterior[:4])
                continue
            items.append((region, polygon))
        return cls(items)

    @classmethod
    def from_regions(cls, regions: Sequence[PixelRegion]) -> "PolygonSet":
        return cls([(region, trace_boundary(region)) for region in regions])


def binarize(prob: Raster, threshold: float = BINARIZE_THRESHOLD) -> Raster:
    if not 0 <= threshold <= 1:
        raise InvalidArgument(f"threshold must be in [0, 1], got {threshold}")
    return Raster((prob.pixels >= threshold).astype(np.uint8), prob.geotransform)


def connected_components(mask: Raster) -> List[PixelRegion]:
    """maximal 8-connected foreground regions in canonical order"""
    plane = mask.plane()
    if not np.all((plane == 0) | (plane == 1)):
        raise InvalidArgument("connected_components needs a binary mask")

    labels, n = ndimage.label(plane, structure=EIGHT_CONNECTED)
    regions = []
    for i, window in enumerate(ndimage.find_objects(labels), start=1):
        if window is None:
            continue
        local = labels[window] == i
        regions.append(
            PixelRegion.from_mask(
                local, offset=(window[0].start, window[1].start), check_connected=False
            )
        )

    regions.sort(key=lambda region: region.key)
    return regions


def _boundary_edges(filled: np.ndarray, r0: int, c0: int) -> Dict[Tuple[int, int], List[tuple]]:
    """vertex -> outgoing (direction, next vertex) for every foreground side
    facing background, oriented with the region on the travel's right-hand
    side in (row, col) axes (counter-clockwise as displayed)"""
    padded = np.pad(filled, 1)
    out: Dict[Tuple[int, int], List[tuple]] = {}

    def link(a, direction, b):
        out.setdefault(a, []).append((direction, b))

    rows, cols = np.nonzero(filled)
    for lr, lc in zip(rows.tolist(), cols.tolist()):
        pr, pc = lr + 1, lc + 1
        r, c = lr + r0, lc + c0
        if not padded[pr, pc - 1]:
            link((r, c), _DOWN, (r + 1, c))
        if not padded[pr + 1, pc]:
            link((r + 1, c), _RIGHT, (r + 1, c + 1))
        if not padded[pr, pc + 1]:
            link((r + 1, c + 1), _UP, (r, c + 1))
        if not padded[pr - 1, pc]:
            link((r, c + 1), _LEFT, (r, c))
    return out


def _merge_collinear(ring: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    """drop vertices where the direction does not change; ring is open"""
    n = len(ring)
    kept = []
    for i in range(n):
        prev, cur, nxt = ring[i - 1], ring[i], ring[(i + 1) % n]
        d1 = (cur[0] - prev[0], cur[1] - prev[1])
        d2 = (nxt[0] - cur[0], nxt[1] - cur[1])
        if d1[0] * d2[1] - d1[1] * d2[0] != 0 or d1[0] * d2[0] + d1[1] * d2[1] < 0:
            kept.append(cur)
    return kept


def trace_boundary(region: PixelRegion) -> Polygon:
    """Closed ring of pixel-corner vertices around the region's outer
    boundary. Interior holes are filled first. At a corner shared by two
    diagonal pixels the walk crosses to the other pixel (8-connectivity)."""
    filled = ndimage.binary_fill_holes(region.mask())
    r0, c0 = region.bbox[0], region.bbox[1]
    outgoing = _boundary_edges(filled, r0, c0)

    # top-left corner of the canonical first pixel; never a saddle
    start = region.key
    ring = [start]
    direction, vertex = outgoing[start][0]
    used = {(start, direction)}
    while vertex != start:
        ring.append(vertex)
        options = outgoing[vertex]
        if len(options) == 1:
            direction, nxt = options[0]
        else:
            # saddle: leave toward the side opposite the one the region was on
            preferred = (direction[1], -direction[0])
            direction, nxt = next(o for o in options if o[0] == preferred)
        if (vertex, direction) in used:
            raise RuntimeError(f"boundary walk of {region} revisited an edge")
        used.add((vertex, direction))
        vertex = nxt

    ring = _merge_collinear(ring)
    return Polygon([(float(r), float(c)) for r, c in ring])


def extract(
    prob: Raster,
    threshold: float = BINARIZE_THRESHOLD,
    min_area: int = 0,
    edge_prob: Optional[Raster] = None,
    edge_split: bool = False,
    edge_threshold: float = EDGE_SPLIT_THRESHOLD,
) -> PolygonSet:
    """binarize -> connected_components -> trace_boundary. With edge_split,
    building pixels where the edge head exceeds edge_threshold are cleared
    before labeling."""
    mask = binarize(prob, threshold)
    if edge_split:
        if edge_prob is None:
            raise InvalidArgument("edge_split needs the edge probability map")
        if edge_prob.pixels.shape != prob.pixels.shape:
            raise InvalidArgument("edge and building probability maps differ in shape")
        mask = Raster(mask.pixels * (edge_prob.pixels <= edge_threshold), mask.geotransform)

    regions = [r for r in connected_components(mask) if r.area >= min_area]
    LOG.d("extracted %s regions at threshold %s", len(regions), threshold)
    return PolygonSet.from_regions(regions)
