"""Overlay of matched predictions on the input image for human inspection"""
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from app.errors import InvalidArgument
from app.evaluator import MatchLabel, MatchReport
from app.nepagg import Raster
from app.polygonize import PolygonSet

TP_COLOR = (0, 200, 0)
FP_COLOR = (220, 0, 0)
FN_COLOR = (0, 80, 255)
OUTLINE_COLOR = (255, 255, 255)

# weight of the class color over the image
_ALPHA = 0.5


def _base(image: Optional[Raster], height: int, width: int) -> np.ndarray:
    if image is None:
        return np.zeros((height, width, 3), dtype=np.float64)
    pixels = image.pixels.astype(np.float64)
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels[:, :, :3]


def _tint(out: np.ndarray, regions: Sequence, color):
    for region in regions:
        mask = np.zeros(out.shape[:2], dtype=bool)
        region.paint(mask, True)
        out[mask] = (1 - _ALPHA) * out[mask] + _ALPHA * np.array(color, dtype=np.float64)


def overlay(
    preds: PolygonSet,
    gts: PolygonSet,
    report: MatchReport,
    height: int,
    width: int,
    image: Optional[Raster] = None,
) -> np.ndarray:
    """(H, W, 3) uint8: TP predictions green, FP predictions red, missed
    ground truths blue, ground-truth outlines white"""
    if len(report.labels) != len(preds) or report.n_gts != len(gts):
        raise InvalidArgument("match report does not belong to these polygon sets")

    out = _base(image, height, width)
    pred_regions = preds.regions
    _tint(out, [r for r, label in zip(pred_regions, report.labels) if label is MatchLabel.TP], TP_COLOR)
    _tint(out, [r for r, label in zip(pred_regions, report.labels) if label is MatchLabel.FP], FP_COLOR)
    _tint(out, [gts.regions[k] for k in report.unmatched_gts], FN_COLOR)

    im = Image.fromarray(np.clip(np.round(out), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(im)
    for polygon in gts.polygons:
        # pixel corners, (x, y) = (col, row)
        draw.line([(c, r) for r, c in polygon.exterior], fill=OUTLINE_COLOR, width=1)

    return np.array(im)
