"""Independent oracles and generators shared by the tests"""
import json
import math
from typing import List, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage

Rect = Tuple[int, int, int, int]


def pretty(d):
    """pretty print as json"""
    print(json.dumps(d, indent=2))


def pixel_set(rect: Rect) -> Set[Tuple[int, int]]:
    top, left, bottom, right = rect
    return {(r, c) for r in range(top, bottom) for c in range(left, right)}


def set_iou(a: Set, b: Set) -> float:
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def spacenet_oracle(preds: Sequence[Set], gts: Sequence[Set], threshold: float = 0.5):
    """Line-by-line greedy matching over plain pixel sets.
    Returns (TP, FP, FN, labels) with labels "TP"/"FP" per prediction."""
    remaining = list(range(len(gts)))
    tp, fp = 0, 0
    labels = []
    for p in preds:
        scores = [set_iou(p, gts[j]) for j in remaining]
        s = max(scores) if scores else 0.0
        if scores and s >= threshold:
            k = remaining[scores.index(s)]
            tp += 1
            labels.append("TP")
            remaining.remove(k)
        else:
            fp += 1
            labels.append("FP")
    fn = len(remaining)
    return tp, fp, fn, labels


def random_rects(rng: np.random.Generator, n: int, extent: int = 40, max_size: int = 12) -> List[Rect]:
    rects = []
    for _ in range(n):
        h, w = rng.integers(1, max_size + 1, size=2)
        top = int(rng.integers(0, extent - h + 1))
        left = int(rng.integers(0, extent - w + 1))
        rects.append((top, left, top + int(h), left + int(w)))
    return rects


def bilinear_oracle(plane: np.ndarray, factor: int) -> np.ndarray:
    """scalar align-corners-false bilinear upsampling of one 2-D plane"""
    h, w = plane.shape

    def taps(dst, n):
        src = max((dst + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        return i0, i1, src - i0

    out = np.zeros((h * factor, w * factor))
    for y in range(h * factor):
        r0, r1, ly = taps(y, h)
        for x in range(w * factor):
            c0, c1, lx = taps(x, w)
            top = (1 - lx) * plane[r0, c0] + lx * plane[r0, c1]
            bottom = (1 - lx) * plane[r1, c0] + lx * plane[r1, c1]
            out[y, x] = (1 - ly) * top + ly * bottom
    return out


def focal_oracle(logits: np.ndarray, target: np.ndarray, alpha: float, gamma: float) -> float:
    """textbook focal loss, fine for moderate logits"""
    p = 1.0 / (1.0 + np.exp(-logits))
    p_t = np.where(target == 1, p, 1 - p)
    alpha_t = np.where(target == 1, alpha, 1 - alpha)
    return float(np.mean(-alpha_t * (1 - p_t) ** gamma * np.log(p_t)))


def random_region_mask(rng: np.random.Generator, height: int = 14, width: int = 14, steps: int = 25):
    """8-connected blob without holes, grown by a random walk over the 8-neighbourhood"""
    mask = np.zeros((height, width), dtype=bool)
    r, c = int(rng.integers(height)), int(rng.integers(width))
    mask[r, c] = True
    for _ in range(steps):
        dr, dc = rng.integers(-1, 2, size=2)
        r = int(np.clip(r + dr, 0, height - 1))
        c = int(np.clip(c + dc, 0, width - 1))
        mask[r, c] = True
    return ndimage.binary_fill_holes(mask)


def chessboard_gap_ok(masks: Sequence[np.ndarray], min_gap: int) -> bool:
    """no two masks come within min_gap background pixels of each other"""
    for i, a in enumerate(masks):
        grown = ndimage.binary_dilation(a, structure=np.ones((3, 3)), iterations=min_gap)
        for b in masks[i + 1 :]:
            if np.any(grown & b):
                return False
    return True
