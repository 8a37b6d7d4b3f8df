"""
Polygon-level scoring: greedy IoU matching of predictions against ground
truth, then precision / recall / F1, micro-averaged over parent rasters.
"""
import enum
import glob
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from app.config import BINARIZE_THRESHOLD, IOU_THRESHOLD, JOBS
from app.errors import DataError, InvalidArgument
from app.file_utils import png_values_to_prob, read_geojson, read_png
from app.log import LOG
from app.nepagg import Raster, crosses_tile_boundary
from app.polygonize import PolygonSet, extract
from app.rastergeo import Polygon, region_iou
from app.utils import parallel_map


class MatchLabel(enum.Enum):
    TP = "TP"
    FP = "FP"


@dataclass
class MatchReport:
    scores: List[float] = field(default_factory=list)
    matched: List[Optional[int]] = field(default_factory=list)
    labels: List[MatchLabel] = field(default_factory=list)
    unmatched_gts: List[int] = field(default_factory=list)
    n_gts: int = 0

    @property
    def tp(self) -> int:
        return sum(1 for label in self.labels if label is MatchLabel.TP)

    @property
    def fp(self) -> int:
        return sum(1 for label in self.labels if label is MatchLabel.FP)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gts)

    @property
    def n_preds(self) -> int:
        return len(self.labels)

    def counts(self) -> "Counts":
        return Counts(self.tp, self.fp, self.fn)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"TP": self.tp, "FP": self.fp, "FN": self.fn}


@dataclass
class Metrics:
    precision: float
    recall: float
    f1_standard: float
    f1_paper_literal: float

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1_standard": self.f1_standard,
            "f1_paper_literal": self.f1_paper_literal,
        }


def _check_threshold(iou_threshold: float):
    if not 0 < iou_threshold <= 1:
        raise InvalidArgument(f"iou threshold must be in (0, 1], got {iou_threshold}")


def match(preds: PolygonSet, gts: PolygonSet, iou_threshold: float = IOU_THRESHOLD) -> MatchReport:
    """Predictions in canonical order each take the best remaining ground
    truth; a score >= iou_threshold is a TP and consumes that ground truth.
    Ties go to the lowest remaining ground-truth index."""
    _check_threshold(iou_threshold)

    gt_regions = gts.regions
    remaining = list(range(len(gt_regions)))
    report = MatchReport(n_gts=len(gt_regions))

    for region in preds.regions:
        best_score, best_k = 0.0, None
        for k in remaining:
            score = region_iou(region, gt_regions[k])
            if best_k is None or score > best_score:
                best_score, best_k = score, k

        report.scores.append(best_score)
        if best_k is not None and best_score >= iou_threshold:
            report.labels.append(MatchLabel.TP)
            report.matched.append(best_k)
            remaining.remove(best_k)
        else:
            report.labels.append(MatchLabel.FP)
            report.matched.append(None)

    report.unmatched_gts = remaining
    return report


def _f1(precision: float, recall: float) -> Tuple[float, float]:
    denom = precision + recall
    standard = 2 * precision * recall / denom if denom > 0 else 0.0
    literal_denom = precision + recall - precision * recall
    literal = 2 * precision * recall / literal_denom if literal_denom > 0 else 0.0
    return standard, literal


def metrics_from_counts(counts: Counts) -> Metrics:
    m = counts.tp + counts.fp
    n = counts.tp + counts.fn
    if m == 0 and n == 0:
        return Metrics(1.0, 1.0, 1.0, 1.0)

    precision = counts.tp / m if m else 0.0
    recall = counts.tp / n if n else 0.0
    return Metrics(precision, recall, *_f1(precision, recall))


def metrics(report: MatchReport) -> Metrics:
    return metrics_from_counts(report.counts())


def restrict_to_boundary(
    preds: PolygonSet, gts: PolygonSet, core_w: int, core_h: int
) -> Tuple[PolygonSet, PolygonSet]:
    """Keep the ground truths whose pixels cross a core-tile boundary line,
    and the predictions that either cross one or overlap a kept ground truth"""
    kept_gts = [item for item in gts if crosses_tile_boundary(item[0].bbox, core_w, core_h)]
    kept_preds = [
        item
        for item in preds
        if crosses_tile_boundary(item[0].bbox, core_w, core_h)
        or any(region_iou(item[0], gt) > 0 for gt, _ in kept_gts)
    ]
    return PolygonSet(kept_preds), PolygonSet(kept_gts)


@dataclass
class RasterResult:
    raster_id: str
    report: MatchReport
    metrics: Metrics

    def to_dict(self) -> dict:
        return {**self.report.counts().to_dict(), **self.metrics.to_dict()}


@dataclass
class DatasetReport:
    per_raster: Dict[str, RasterResult]
    aggregate_counts: Counts
    aggregate: Metrics
    skipped: List[str] = field(default_factory=list)
    groups: Dict[str, Tuple[Counts, Metrics]] = field(default_factory=dict)
    iou_threshold: float = IOU_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "aggregate": {**self.aggregate_counts.to_dict(), **self.aggregate.to_dict()},
            "per_raster": {rid: r.to_dict() for rid, r in sorted(self.per_raster.items())},
            "groups": {
                name: {**counts.to_dict(), **m.to_dict()}
                for name, (counts, m) in sorted(self.groups.items())
            },
            "skipped": sorted(self.skipped),
        }


def evaluate_sets(
    pairs: Mapping[str, Tuple[PolygonSet, Optional[PolygonSet]]],
    iou_threshold: float = IOU_THRESHOLD,
    groups: Optional[Mapping[str, str]] = None,
    jobs: int = JOBS,
) -> DatasetReport:
    """raster id -> (predictions, ground truth). Rasters without ground
    truth are skipped and reported. Counts are summed over rasters in id
    order before computing the aggregate metrics."""
    _check_threshold(iou_threshold)

    skipped = sorted(rid for rid, (_, gts) in pairs.items() if gts is None)
    for rid in skipped:
        LOG.w("no ground truth for raster %s, skip", rid)

    ids = sorted(rid for rid, (_, gts) in pairs.items() if gts is not None)
    reports = parallel_map(lambda rid: match(pairs[rid][0], pairs[rid][1], iou_threshold), ids, jobs)

    per_raster = {}
    total = Counts()
    by_group: Dict[str, Counts] = {}
    for rid, report in zip(ids, reports):
        per_raster[rid] = RasterResult(rid, report, metrics(report))
        total = total + report.counts()
        if groups is not None:
            name = groups.get(rid, "")
            by_group[name] = by_group.get(name, Counts()) + report.counts()

    return DatasetReport(
        per_raster=per_raster,
        aggregate_counts=total,
        aggregate=metrics_from_counts(total),
        skipped=skipped,
        groups={name: (c, metrics_from_counts(c)) for name, c in by_group.items()},
        iou_threshold=iou_threshold,
    )


def load_polygon_set(path: str) -> PolygonSet:
    return PolygonSet.from_polygons([Polygon(rings[0], rings[1:]) for rings in read_geojson(path)])


def load_predictions(pred_dir: str, threshold: float) -> Dict[str, PolygonSet]:
    """<id>.geojson polygons, or <id>_building.png probability maps that get
    polygonized at threshold"""
    preds = {}
    for path in sorted(glob.glob(os.path.join(pred_dir, "*.geojson"))):
        preds[os.path.splitext(os.path.basename(path))[0]] = load_polygon_set(path)

    for path in sorted(glob.glob(os.path.join(pred_dir, "*_building.png"))):
        rid = os.path.basename(path)[: -len("_building.png")]
        if rid not in preds:
            prob = png_values_to_prob(read_png(path))
            preds[rid] = extract(Raster(prob), threshold)

    if not preds:
        raise DataError(f"no predictions found in {pred_dir}")
    return preds


def evaluate_dataset(
    pred_dir: str,
    gt_dir: str,
    iou_threshold: float = IOU_THRESHOLD,
    threshold: float = BINARIZE_THRESHOLD,
    groups: Optional[Mapping[str, str]] = None,
    boundary_tile: Optional[Tuple[int, int]] = None,
    jobs: int = JOBS,
) -> DatasetReport:
    """Directory-level evaluation. boundary_tile=(core_w, core_h) restricts
    scoring to buildings that cross core-tile boundaries."""
    preds = load_predictions(pred_dir, threshold)

    pairs = {}
    for rid, pred_set in preds.items():
        gt_path = os.path.join(gt_dir, rid + ".geojson")
        gt_set = load_polygon_set(gt_path) if os.path.exists(gt_path) else None
        if gt_set is not None and boundary_tile is not None:
            pred_set, gt_set = restrict_to_boundary(pred_set, gt_set, *boundary_tile)
        pairs[rid] = (pred_set, gt_set)

    report = evaluate_sets(pairs, iou_threshold, groups, jobs)
    LOG.i(
        "evaluated %s rasters: precision %.4f recall %.4f f1 %.4f",
        len(report.per_raster),
        report.aggregate.precision,
        report.aggregate.recall,
        report.aggregate.f1_standard,
    )
    return report

