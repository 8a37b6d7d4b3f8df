"""
Training loop: augmented tiles in, building and edge logits out, cropped to
the core, one focal loss per head, summed, backpropagated, one SGD step.
"""
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app import tensor_core as tc
from app.config import (
    BINARIZE_THRESHOLD,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CORE_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MARGIN,
    EDGE_SPLIT_THRESHOLD,
    EDGE_WIDTH,
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    IOU_THRESHOLD,
    JOBS,
    SEED,
)
from app.errors import DataError, InvalidArgument, NonFiniteLossError
from app.evaluator import DatasetReport, evaluate_sets, restrict_to_boundary
from app.file_utils import write_csv
from app.log import LOG
from app.nepagg import (
    Raster,
    TileRecord,
    augment_tile,
    core_window,
    crop_core,
    padding_to_multiple,
    split_raster,
    stitch,
)
from app.polygonize import PolygonSet, extract
from app.rastergeo import Polygon, edge_mask, rasterize
from app.synthgen import load_suite
from app.tensor_core import Tape, Tensor
from app.tfnet import TFNetParams, load_model, save_model, tfnet_forward
from app.utils import parallel_map

# (scene id, parent image, ground-truth polygons)
Scene = Tuple[str, Raster, Optional[List[Polygon]]]

HISTORY_HEADER = ["step", "epoch", "loss_building", "loss_edge", "total"]


@dataclass(frozen=True)
class TrainConfig:
    core_w: int = DEFAULT_CORE_SIZE
    core_h: int = DEFAULT_CORE_SIZE
    margin: int = DEFAULT_MARGIN
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    learning_rate: float = DEFAULT_LEARNING_RATE
    focal_alpha: float = FOCAL_ALPHA
    focal_gamma: float = FOCAL_GAMMA
    edge_width: int = EDGE_WIDTH
    seed: int = SEED
    # epochs between checkpoints, 0 disables them
    checkpoint_every: int = 0
    # (building, edge) weights of the summed loss
    loss_weights: Tuple[float, float] = (1.0, 1.0)
    # stop after this many steps even mid-epoch
    max_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        self.validate()

    def validate(self):
        positives = {
            "core_w": self.core_w,
            "core_h": self.core_h,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "edge_width": self.edge_width,
        }
        for name, value in positives.items():
            if value <= 0:
                raise InvalidArgument(f"{name} must be positive, got {value}")
        if self.margin < 0 or self.epochs < 0 or self.checkpoint_every < 0:
            raise InvalidArgument("margin, epochs and checkpoint_every must be >= 0")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise InvalidArgument(f"loss_weights must be two non-negative numbers, got {self.loss_weights}")
        if self.max_steps is not None and self.max_steps < 0:
            raise InvalidArgument(f"max_steps must be >= 0, got {self.max_steps}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """650 px SpaceNet tiles with an 83 px margin, 150 epochs of SGD at 1e-4, batch 8"""
        values = dict(core_w=650, core_h=650, margin=83, batch_size=8, epochs=150, learning_rate=1e-4)
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainSample:
    image: np.ndarray  # (C, core_h + 2k, core_w + 2k) in [0, 1]
    building_mask: np.ndarray  # (core_h, core_w)
    edge_mask: np.ndarray  # (core_h, core_w)
    record: TileRecord
    scene_id: str = ""

    def __post_init__(self):
        rec = self.record
        if self.image.shape[1:] != (rec.augmented_h, rec.augmented_w):
            raise InvalidArgument(f"image {self.image.shape} does not match tile {rec.tile_id}")
        for mask in (self.building_mask, self.edge_mask):
            if mask.shape != (rec.core_h, rec.core_w):
                raise InvalidArgument(f"mask {mask.shape} does not match core {rec.core_h}x{rec.core_w}")


@dataclass
class StepLosses:
    building: float
    edge: float
    total: float

    def as_dict(self) -> dict:
        return {"loss_building": self.building, "loss_edge": self.edge, "total": self.total}


@dataclass
class FitResult:
    params: TFNetParams
    history: List[list] = field(default_factory=list)
    epoch: int = 0
    step: int = 0
    # batches already done in the current epoch
    batch: int = 0


def image_array(raster: Raster) -> np.ndarray:
    """(H, W, C) uint8 pixels -> (C, H, W) float in [0, 1]"""
    return np.transpose(raster.pixels.astype(np.float64) / 255.0, (2, 0, 1))


def _scene_samples(scene: Scene, config: TrainConfig) -> List[TrainSample]:
    scene_id, raster, polygons = scene
    if polygons is None:
        raise DataError(f"no ground-truth polygons for raster {scene_id}")

    # masks cover the whole parent so a building cut by a core keeps its true outline
    buildings = rasterize(polygons, raster.height, raster.width)
    edges = edge_mask(polygons, raster.height, raster.width, config.edge_width)

    samples = []
    for rec in split_raster(raster, config.core_w, config.core_h, config.margin):
        samples.append(
            TrainSample(
                image=image_array(augment_tile(raster, rec)),
                building_mask=core_window(buildings, rec).plane().astype(np.float64),
                edge_mask=core_window(edges, rec).plane().astype(np.float64),
                record=rec,
                scene_id=scene_id,
            )
        )
    return samples


def make_samples(scenes: Sequence[Scene], config: TrainConfig, jobs: int = JOBS) -> List[TrainSample]:
    """One sample per tile, scenes in the given order, tiles row-major"""
    per_scene = parallel_map(lambda scene: _scene_samples(scene, config), scenes, jobs)
    samples = [s for group in per_scene for s in group]
    LOG.d("made %s samples from %s scenes", len(samples), len(scenes))
    return samples


def load_dataset(data_dir: str) -> List[Scene]:
    _, scenes = load_suite(data_dir)
    if not scenes:
        raise DataError(f"dataset {data_dir} has no scenes")
    return scenes


def split_dataset(items: Sequence, val_fraction: float = 0.2, seed: int = SEED) -> Tuple[list, list]:
    """Seeded (train, validation) split; at least one item stays in train"""
    if not 0 <= val_fraction < 1:
        raise InvalidArgument(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(items))
    n_val = min(int(round(len(items) * val_fraction)), max(len(items) - 1, 0))
    val_idx = set(order[:n_val].tolist())
    train = [item for i, item in enumerate(items) if i not in val_idx]
    val = [item for i, item in enumerate(items) if i in val_idx]
    return train, val


def _forward_core(params: TFNetParams, images: np.ndarray, margin: int) -> Tuple[Tensor, Optional[Tensor]]:
    """Pad to the output stride, forward, strip the pad, crop to the core"""
    _, _, h, w = images.shape
    stride = params.config.output_stride
    x = tc.pad_bottom_right(Tensor(images), padding_to_multiple(h, stride), padding_to_multiple(w, stride))
    building, edge = tfnet_forward(params, x)

    def to_core(logits):
        if logits is None:
            return None
        return crop_core(tc.crop(logits, 0, 0, h, w), margin)

    return to_core(building), to_core(edge)


def compute_losses(
    params: TFNetParams, batch: Sequence[TrainSample], config: TrainConfig
) -> Tuple[Tensor, Optional[Tensor], Tensor]:
    """(building loss, edge loss, weighted total); the edge loss is None for
    the single-decoder model"""
    if not batch:
        raise InvalidArgument("empty batch")
    shapes = {s.image.shape for s in batch}
    if len(shapes) != 1:
        raise InvalidArgument(f"batch mixes image shapes {sorted(shapes)}")

    images = np.stack([s.image for s in batch])
    building_logits, edge_logits = _forward_core(params, images, config.margin)

    targets = np.stack([s.building_mask for s in batch])[:, None]
    if building_logits.shape != targets.shape:
        raise InvalidArgument(f"logits {building_logits.shape} do not match masks {targets.shape}")

    w_building, w_edge = config.loss_weights
    loss_building = tc.focal_loss(building_logits, targets, config.focal_alpha, config.focal_gamma)
    total = tc.scale(loss_building, w_building)

    loss_edge = None
    if edge_logits is not None:
        edges = np.stack([s.edge_mask for s in batch])[:, None]
        loss_edge = tc.focal_loss(edge_logits, edges, config.focal_alpha, config.focal_gamma)
        total = tc.add(total, tc.scale(loss_edge, w_edge))

    return loss_building, loss_edge, total


def train_step(
    params: TFNetParams, batch: Sequence[TrainSample], config: TrainConfig, step: int = 0
) -> StepLosses:
    with Tape() as tape:
        loss_building, loss_edge, total = compute_losses(params, batch, config)

    losses = StepLosses(
        building=loss_building.item(),
        edge=loss_edge.item() if loss_edge is not None else 0.0,
        total=total.item(),
    )
    if not np.all(np.isfinite([losses.building, losses.edge, losses.total])):
        raise NonFiniteLossError(step, losses.as_dict())

    tape.backward(total)
    tc.sgd_step(params.parameters(), config.learning_rate)
    return losses


def _batches(n: int, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def _checkpoint_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"epoch_{epoch:04d}")


def fit(
    params: TFNetParams,
    samples: Sequence[TrainSample],
    config: TrainConfig,
    out_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
) -> FitResult:
    """Epochs of seeded-shuffled minibatch SGD. With out_dir, writes
    history.csv, checkpoints at the configured cadence and the final model.
    resume_from continues from a checkpoint written by an earlier fit."""
    if not samples:
        raise InvalidArgument("cannot fit on an empty dataset")

    result = FitResult(params)
    if resume_from is not None:
        result = _resume(resume_from, params)
        params = result.params
        LOG.i("resumed at epoch %s step %s from %s", result.epoch, result.step, resume_from)

    for epoch in range(result.epoch, config.epochs):
        batches = _batches(len(samples), config, epoch)
        epoch_total = []
        for idx in batches[result.batch :]:
            if config.max_steps is not None and result.step >= config.max_steps:
                break
            losses = train_step(params, [samples[i] for i in idx], config, result.step)
            result.history.append([result.step, epoch, losses.building, losses.edge, losses.total])
            epoch_total.append(losses.total)
            LOG.d("step %s epoch %s losses %s", result.step, epoch, losses.as_dict())
            result.step += 1
            result.batch += 1

        if result.batch < len(batches):
            # stopped by max_steps, the checkpoint keeps the batch offset
            break
        result.epoch = epoch + 1
        result.batch = 0
        LOG.i("epoch %s mean total loss %.6f", epoch, float(np.mean(epoch_total)) if epoch_total else 0.0)

        if out_dir and config.checkpoint_every and result.epoch % config.checkpoint_every == 0:
            save_model(params, _checkpoint_path(out_dir, result.epoch), _checkpoint_extra(result, config))

    if out_dir:
        write_csv(HISTORY_HEADER, result.history, os.path.join(out_dir, "history.csv"))
        save_model(params, os.path.join(out_dir, "model"), _checkpoint_extra(result, config))

    return result


def _checkpoint_extra(result: FitResult, config: TrainConfig) -> dict:
    return {
        "epoch": result.epoch,
        "step": result.step,
        "batch": result.batch,
        "history": result.history,
        "train_config": config.to_dict(),
    }


def _resume(path: str, params: TFNetParams) -> FitResult:
    loaded, extra = load_model(path, params.config)
    return FitResult(
        loaded,
        history=[list(row) for row in extra.get("history", [])],
        epoch=int(extra.get("epoch", 0)),
        step=int(extra.get("step", 0)),
        batch=int(extra.get("batch", 0)),
    )


def _predict_tile(params: TFNetParams, parent: Raster, rec: TileRecord) -> Tuple[Raster, Optional[Raster]]:
    images = image_array(augment_tile(parent, rec))[None]
    building, edge = _forward_core(params, images, rec.margin)

    def to_raster(logits):
        if logits is None:
            return None
        return Raster(tc.sigmoid(logits).data[0, 0], parent.geotransform)

    return to_raster(building), to_raster(edge)


def predict(
    params: TFNetParams, parent: Raster, config: TrainConfig, jobs: int = JOBS
) -> Tuple[Raster, Optional[Raster]]:
    """Parent-sized building and edge probability rasters; the edge raster
    is None for the single-decoder model"""
    records = split_raster(parent, config.core_w, config.core_h, config.margin)
    cores = parallel_map(lambda rec: _predict_tile(params, parent, rec), records, jobs)

    building = stitch([(rec, b) for rec, (b, _) in zip(records, cores)])
    edge = None
    if cores[0][1] is not None:
        edge = stitch([(rec, e) for rec, (_, e) in zip(records, cores)])
    return building, edge


def evaluate_scenes(
    params: TFNetParams,
    scenes: Sequence[Scene],
    config: TrainConfig,
    threshold: float = BINARIZE_THRESHOLD,
    iou_threshold: float = IOU_THRESHOLD,
    edge_split: bool = False,
    edge_threshold: float = EDGE_SPLIT_THRESHOLD,
    boundary_only: bool = False,
    jobs: int = JOBS,
) -> DatasetReport:
    """predict -> polygonize -> match for every scene"""
    pairs = {}
    for scene_id, raster, polygons in scenes:
        building, edge = predict(params, raster, config, jobs)
        preds = extract(
            building,
            threshold,
            edge_prob=edge,
            edge_split=edge_split and edge is not None,
            edge_threshold=edge_threshold,
        )
        gts = PolygonSet.from_polygons(polygons) if polygons is not None else None
        if gts is not None and boundary_only:
            preds, gts = restrict_to_boundary(preds, gts, config.core_w, config.core_h)
        pairs[scene_id] = (preds, gts)

    return evaluate_sets(pairs, iou_threshold, jobs=jobs)
