import csv
import json
import os
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image

from app.errors import DataError
from app.log import LOG

Ring = List[Tuple[float, float]]


def read_png(path: str) -> np.ndarray:
    """(H, W, C) uint8 array"""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (FileNotFoundError, OSError) as e:
        raise DataError(f"cannot read image {path}: {e}")

    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_png(pixels: np.ndarray, path: str):
    """uint8 (H, W), (H, W, 1) or (H, W, 3) array to PNG"""
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path)


def mask_to_png_values(mask: np.ndarray) -> np.ndarray:
    """{0, 1} -> {0, 255}"""
    return (mask > 0).astype(np.uint8) * 255


def prob_to_png_values(prob: np.ndarray) -> np.ndarray:
    return np.round(np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8)


def png_values_to_prob(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def write_json(d: dict, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(d, f, indent=2, sort_keys=True)


def read_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"{path} not found")
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid json: {e}")


def write_geojson(rings: Sequence[Sequence[Ring]], path: str, properties: Sequence[dict] = None):
    """Each polygon is [exterior, *holes] with (row, col) vertices; written as
    GeoJSON (col, row) positions"""
    features = []
    for i, polygon in enumerate(rings):
        features.append(
            {
                "type": "Feature",
                "properties": dict(properties[i]) if properties else {"id": i},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[c, r] for r, c in ring] for ring in polygon],
                },
            }
        )

    write_json({"type": "FeatureCollection", "features": features}, path)


def read_geojson(path: str) -> List[List[Ring]]:
    """Inverse of write_geojson: list of [exterior, *holes] in (row, col)"""
    d = read_json(path)
    if d.get("type") != "FeatureCollection":
        raise DataError(f"{path} is not a GeoJSON FeatureCollection")

    polygons = []
    for feature in d["features"]:
        geometry = feature.get("geometry") or {}
        if geometry.get("type") != "Polygon":
            LOG.w("skip %s geometry in %s", geometry.get("type"), path)
            continue
        polygons.append([[(r, c) for c, r in ring] for ring in geometry["coordinates"]])

    return polygons


def write_csv(header: Sequence[str], rows: Iterable[Sequence], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
