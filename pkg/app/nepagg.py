"""
Neighborhood pixel aggregation: split a parent raster into W x H core tiles,
give each core a k-pixel margin read from the parent (zeros outside it), and
crop outputs back to the core before loss or stitching.
"""
import os
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app import tensor_core as tc
from app.errors import DataError, InvalidArgument
from app.file_utils import read_json, write_json, write_png
from app.log import LOG
from app.tensor_core import Tensor

TileId = Tuple[int, int]


@dataclass
class Raster:
    """(H, W, C) pixel grid. The geotransform is opaque and passed through."""

    pixels: np.ndarray
    geotransform: Optional[tuple] = None

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise InvalidArgument(f"raster pixels must be (H, W[, C]), got {self.pixels.shape}")
        if min(self.pixels.shape) < 1:
            raise InvalidArgument(f"raster extents must be positive, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def plane(self) -> np.ndarray:
        """the single channel of a mask or probability raster"""
        return self.pixels[:, :, 0]

    def is_mask(self) -> bool:
        return bool(np.all((self.pixels == 0) | (self.pixels == 1)))

    def __eq__(self, other):
        return (
            isinstance(other, Raster)
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )


@dataclass(frozen=True)
class TileRecord:
    tile_id: TileId
    origin_row: int
    origin_col: int
    core_h: int
    core_w: int
    margin: int
    parent_h: int
    parent_w: int

    @property
    def augmented_h(self) -> int:
        return self.core_h + 2 * self.margin

    @property
    def augmented_w(self) -> int:
        return self.core_w + 2 * self.margin

    @property
    def valid_h(self) -> int:
        """core rows that lie inside the parent"""
        return min(self.core_h, self.parent_h - self.origin_row)

    @property
    def valid_w(self) -> int:
        return min(self.core_w, self.parent_w - self.origin_col)

    @property
    def is_ragged(self) -> bool:
        """zero-padded to full core size"""
        return self.valid_h < self.core_h or self.valid_w < self.core_w

    @property
    def name(self) -> str:
        return f"tile_{self.tile_id[0]}_{self.tile_id[1]}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tile_id"] = list(self.tile_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TileRecord":
        d = dict(d)
        d["tile_id"] = tuple(d["tile_id"])
        return cls(**d)


def split_raster(parent: Raster, core_w: int, core_h: int, margin: int = 0) -> List[TileRecord]:
    """Row-major grid of non-overlapping cores covering the parent"""
    if core_w < 1 or core_h < 1:
        raise InvalidArgument(f"core extents must be positive, got {core_w}x{core_h}")
    if margin < 0:
        raise InvalidArgument(f"margin must be >= 0, got {margin}")

    n_rows = -(-parent.height // core_h)
    n_cols = -(-parent.width // core_w)
    records = []
    for i in range(n_rows):
        for j in range(n_cols):
            records.append(
                TileRecord(
                    tile_id=(i, j),
                    origin_row=i * core_h,
                    origin_col=j * core_w,
                    core_h=core_h,
                    core_w=core_w,
                    margin=margin,
                    parent_h=parent.height,
                    parent_w=parent.width,
                )
            )

    LOG.d(
        "split %sx%s raster into %s tiles of %sx%s",
        parent.height,
        parent.width,
        len(records),
        core_h,
        core_w,
    )
    return records


def _window(parent_pixels: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """height x width window at (top, left), zero where it leaves the parent.
    Only indices inside the parent are ever read."""
    ph, pw = parent_pixels.shape[:2]
    out = np.zeros((height, width) + parent_pixels.shape[2:], dtype=parent_pixels.dtype)
    r0, r1 = max(top, 0), min(top + height, ph)
    c0, c1 = max(left, 0), min(left + width, pw)
    if r0 < r1 and c0 < c1:
        out[r0 - top : r1 - top, c0 - left : c1 - left] = parent_pixels[r0:r1, c0:c1]
    return out


def augment_tile(parent: Raster, rec: TileRecord, k: Optional[int] = None) -> Raster:
    """(H + 2k) x (W + 2k) window offset by (-k, -k) from the core origin"""
    k = rec.margin if k is None else k
    if k < 0:
        raise InvalidArgument(f"margin must be >= 0, got {k}")

    pixels = _window(
        parent.pixels, rec.origin_row - k, rec.origin_col - k, rec.core_h + 2 * k, rec.core_w + 2 * k
    )
    return Raster(pixels, parent.geotransform)


def core_window(parent: Raster, rec: TileRecord) -> Raster:
    return augment_tile(parent, rec, 0)


def crop_core(augmented: Union[Raster, Tensor, np.ndarray], k: int):
    """Remove k pixels from every side. Tensors are (B, C, H, W) and the crop
    is differentiable; arrays and rasters are (H, W, ...)."""
    if k < 0:
        raise InvalidArgument(f"margin must be >= 0, got {k}")

    if isinstance(augmented, Tensor):
        h, w = augmented.shape[2:]
        _check_croppable(h, w, k)
        return tc.crop(augmented, k, k, h - 2 * k, w - 2 * k)

    pixels = augmented.pixels if isinstance(augmented, Raster) else augmented
    h, w = pixels.shape[:2]
    _check_croppable(h, w, k)
    cropped = pixels[k : h - k, k : w - k].copy()
    if isinstance(augmented, Raster):
        return Raster(cropped, augmented.geotransform)
    return cropped


def _check_croppable(h: int, w: int, k: int):
    if h < 2 * k + 1 or w < 2 * k + 1:
        raise InvalidArgument(f"cannot crop {k} pixels from every side of {h}x{w}")


def stitch(tiles: Sequence[Tuple[TileRecord, Raster]]) -> Raster:
    """Parent-sized raster with every core written at its origin; the
    zero padding of ragged tiles is dropped"""
    if not tiles:
        raise InvalidArgument("nothing to stitch")

    first = tiles[0][0]
    n_rows = -(-first.parent_h // first.core_h)
    n_cols = -(-first.parent_w // first.core_w)
    expected = {(i, j) for i in range(n_rows) for j in range(n_cols)}
    seen = set()
    for rec, _ in tiles:
        if rec.tile_id in seen:
            raise InvalidArgument(f"duplicate tile {rec.tile_id}")
        seen.add(rec.tile_id)
    if seen != expected:
        raise InvalidArgument(f"missing tiles {sorted(expected - seen)}, extra {sorted(seen - expected)}")

    _, core = tiles[0]
    out = np.zeros((first.parent_h, first.parent_w) + core.pixels.shape[2:], dtype=core.pixels.dtype)
    for rec, core in tiles:
        if core.pixels.shape[:2] != (rec.core_h, rec.core_w):
            raise InvalidArgument(
                f"tile {rec.tile_id} is {core.pixels.shape[:2]}, core is {rec.core_h}x{rec.core_w}"
            )
        out[
            rec.origin_row : rec.origin_row + rec.valid_h,
            rec.origin_col : rec.origin_col + rec.valid_w,
        ] = core.pixels[: rec.valid_h, : rec.valid_w]

    return Raster(out, core.geotransform)


def padding_to_multiple(size: int, multiple: int) -> int:
    """rows or cols of zeros that make size divisible by multiple"""
    return (-size) % multiple


def crosses_tile_boundary(
    bbox: Tuple[int, int, int, int], core_w: int, core_h: int
) -> bool:
    """bbox = (min_row, min_col, max_row, max_col), max exclusive. True when the
    box has pixels on both sides of a core-tile boundary line."""
    min_row, min_col, max_row, max_col = bbox
    return (min_row // core_h != (max_row - 1) // core_h) or (
        min_col // core_w != (max_col - 1) // core_w
    )


def write_tiles(
    parent: Raster, core_w: int, core_h: int, k: int, out_dir: str
) -> List[TileRecord]:
    """Writes every augmented tile as <tile name>.png plus tiles.json"""
    records = split_raster(parent, core_w, core_h, margin=k)
    os.makedirs(out_dir, exist_ok=True)
    for rec in records:
        write_png(augment_tile(parent, rec).pixels, os.path.join(out_dir, rec.name + ".png"))

    write_json(
        {
            "parent_h": parent.height,
            "parent_w": parent.width,
            "core_w": core_w,
            "core_h": core_h,
            "margin": k,
            "geotransform": list(parent.geotransform) if parent.geotransform else None,
            "tiles": [rec.to_dict() for rec in records],
        },
        os.path.join(out_dir, "tiles.json"),
    )
    LOG.i("wrote %s tiles to %s", len(records), out_dir)
    return records


def read_manifest(tile_dir: str) -> Tuple[dict, List[TileRecord]]:
    path = os.path.join(tile_dir, "tiles.json")
    if not os.path.exists(path):
        raise DataError(f"no tile manifest in {tile_dir}")
    manifest = read_json(path)
    return manifest, [TileRecord.from_dict(d) for d in manifest["tiles"]]

