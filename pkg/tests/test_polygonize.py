import numpy as np
import pytest

from app.errors import InvalidArgument
from app.nepagg import Raster
from app.polygonize import PolygonSet, binarize, connected_components, extract, trace_boundary
from app.rastergeo import PixelRegion, Polygon, rasterize
from tests.utils import random_region_mask


def _round_trips(region: PixelRegion) -> bool:
    polygon = trace_boundary(region)
    r0, c0, r1, c1 = region.bbox
    mask = rasterize([polygon.translate(-r0, -c0)], r1 - r0, c1 - c0).plane().astype(bool)
    return np.array_equal(mask, region.mask())


def test_binarize():
    prob = Raster(np.array([[0.0, 0.49], [0.5, 1.0]]))
    np.testing.assert_array_equal(binarize(prob, 0.5).plane(), [[0, 0], [1, 1]])
    assert binarize(prob, 0.0).plane().all()
    assert binarize(Raster(np.zeros((3, 3))), 0.5).plane().sum() == 0

    with pytest.raises(InvalidArgument):
        binarize(prob, 1.5)
    with pytest.raises(InvalidArgument):
        binarize(prob, -0.1)


def test_connected_components_uses_8_connectivity():
    mask = np.zeros((5, 5), dtype=np.uint8)
    mask[0, 0] = mask[1, 1] = 1
    mask[3:5, 3:5] = 1

    regions = connected_components(Raster(mask))

    assert [r.area for r in regions] == [2, 4]
    assert [r.key for r in regions] == [(0, 0), (3, 3)]


def test_connected_components_checkerboard():
    regions = connected_components(Raster(np.array([[1, 0], [0, 1]], dtype=np.uint8)))
    assert len(regions) == 1
    assert regions[0].area == 2


def test_connected_components_canonical_order():
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[4, 0] = 1
    mask[0, 5] = 1
    mask[0, 2] = 1
    keys = [r.key for r in connected_components(Raster(mask))]
    assert keys == [(0, 2), (0, 5), (4, 0)]

    assert connected_components(Raster(np.zeros((3, 3), dtype=np.uint8))) == []
    with pytest.raises(InvalidArgument):
        connected_components(Raster(np.full((2, 2), 2)))


def test_trace_single_pixel():
    polygon = trace_boundary(PixelRegion(np.array([[3, 4]])))
    assert polygon.distinct_vertices() == 4
    assert set(polygon.exterior) == {(3.0, 4.0), (4.0, 4.0), (4.0, 5.0), (3.0, 5.0)}
    assert polygon.exterior[0] == (3.0, 4.0)


def test_trace_rectangle_merges_collinear_vertices():
    polygon = trace_boundary(PixelRegion.rectangle(1, 2, 4, 4))
    assert polygon.distinct_vertices() == 4
    assert set(polygon.exterior) == {(1.0, 2.0), (4.0, 2.0), (4.0, 4.0), (1.0, 4.0)}


def test_trace_l_shape():
    mask = np.array([[1, 0], [1, 0], [1, 1]], dtype=bool)
    region = PixelRegion.from_mask(mask)
    polygon = trace_boundary(region)
    assert polygon.distinct_vertices() == 6
    assert _round_trips(region)


def test_trace_orientation_is_consistent():
    polygon = trace_boundary(PixelRegion.rectangle(0, 0, 2, 3))
    ring = polygon.exterior
    # shoelace over (row, col)
    area = sum(r0 * c1 - r1 * c0 for (r0, c0), (r1, c1) in zip(ring[:-1], ring[1:])) / 2
    assert area == 6


def test_trace_diagonal_touch_is_one_ring():
    region = PixelRegion(np.array([[0, 0], [1, 1], [2, 2]]))
    polygon = trace_boundary(region)
    # the two pinch points are visited twice
    assert len(polygon.exterior) - 1 == 12
    assert _round_trips(region)


def test_trace_fills_holes():
    mask = np.ones((4, 4), dtype=bool)
    mask[1:3, 1:3] = False
    polygon = trace_boundary(PixelRegion.from_mask(mask))
    assert polygon.distinct_vertices() == 4
    assert polygon.holes == []


def test_trace_round_trip_random_regions(rng):
    for _ in range(500):
        region = PixelRegion.from_mask(random_region_mask(rng), offset=(3, 5))
        assert _round_trips(region)


def test_extract():
    prob = np.zeros((12, 12))
    prob[1:4, 1:4] = 0.9
    prob[6:10, 2:8] = 0.7

    result = extract(Raster(prob), 0.5)

    assert len(result) == 2
    assert [r.key for r in result.regions] == [(1, 1), (6, 2)]
    assert [r.area for r in result.regions] == [9, 24]
    assert len(extract(Raster(np.zeros((5, 5))))) == 0


def test_extract_min_area():
    prob = np.zeros((8, 8))
    prob[0, 0] = 1.0
    prob[4:7, 4:7] = 1.0
    assert len(extract(Raster(prob), min_area=2)) == 1


def test_extract_is_idempotent(rng):
    prob = np.zeros((30, 30))
    for r, c in [(0, 0), (0, 15), (15, 0), (15, 15)]:
        prob[r : r + 10, c : c + 10] = random_region_mask(rng, 10, 10)

    first = extract(Raster(prob))
    again = extract(Raster(rasterize(first.polygons, 30, 30).pixels.astype(np.float64)))

    assert again.regions == first.regions


def test_extract_edge_split_separates_touching_buildings():
    prob = np.zeros((6, 12))
    prob[1:5, 1:11] = 1.0
    edge = np.zeros((6, 12))
    edge[:, 6] = 1.0

    assert len(extract(Raster(prob))) == 1
    split = extract(Raster(prob), edge_prob=Raster(edge), edge_split=True)
    assert len(split) == 2

    with pytest.raises(InvalidArgument):
        extract(Raster(prob), edge_split=True)


def test_polygon_set_from_polygons():
    polygons = [
        Polygon.rectangle(5, 5, 8, 8),
        Polygon.rectangle(0, 0, 2, 2),
        Polygon.rectangle(0.1, 0.1, 0.2, 0.2),
    ]
    result = PolygonSet.from_polygons(polygons)
    # canonical order, the sliver covering no pixel center is dropped
    assert [r.key for r in result.regions] == [(0, 0), (5, 5)]
    assert result.polygons[0] == polygons[1]


def test_polygon_set_keys_must_be_distinct():
    with pytest.raises(InvalidArgument, match=r"canonical key \(0, 0\)"):
        PolygonSet.from_regions([PixelRegion.rectangle(0, 0, 2, 2), PixelRegion.rectangle(0, 0, 3, 1)])

    # overlapping regions with distinct keys are a valid prediction set
    overlapping = PolygonSet.from_regions([PixelRegion.rectangle(1, 0, 4, 4), PixelRegion.rectangle(0, 2, 3, 6)])
    assert [r.key for r in overlapping.regions] == [(0, 2), (1, 0)]


def test_extract_regions_are_pixel_disjoint(rng):
    prob = np.zeros((24, 24))
    for r, c in [(0, 0), (0, 12), (12, 0), (12, 12)]:
        prob[r : r + 12, c : c + 12] = random_region_mask(rng, 12, 12)

    regions = extract(Raster(prob)).regions

    pixels = [tuple(p) for region in regions for p in region.pixels.tolist()]
    assert len(pixels) == len(set(pixels))
    assert len(pixels) == int(prob.sum())
