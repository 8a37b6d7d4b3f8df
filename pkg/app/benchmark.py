"""
Comparison grid on synthetic suites: dual-decoder TFNet against the
single-decoder baseline, with and without the tile margin, median polygon F1
per variant across seeds.
"""
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import DEFAULT_MARGIN, JOBS
from app.errors import InvalidArgument
from app.file_utils import write_csv, write_json
from app.log import LOG
from app.synthgen import SUITE_KINDS, generate, scene_seed, suite_spec
from app.tfnet import TFNetConfig, build
from app.trainer import Scene, TrainConfig, evaluate_scenes, fit, make_samples
from app.utils import debug_info

# seeds of test scenes are offset so they never repeat a training scene
_TEST_SEED_OFFSET = 10_000

MODEL_PRESETS = ("tiny", "desk")


@dataclass(frozen=True)
class Variant:
    name: str
    heads: int
    margin: int
    # clear building pixels the edge head marks before labeling
    edge_split: bool = False


VARIANTS = {
    "tfnet": Variant("tfnet", heads=2, margin=DEFAULT_MARGIN, edge_split=True),
    "tfnet_k0": Variant("tfnet_k0", heads=2, margin=0, edge_split=True),
    "baseline": Variant("baseline", heads=1, margin=DEFAULT_MARGIN),
    "baseline_k0": Variant("baseline_k0", heads=1, margin=0),
}

# the pair each suite kind is meant to separate
DEFAULT_VARIANTS = {
    "sparse": ("tfnet", "baseline"),
    "dense": ("tfnet", "baseline"),
    "straddle": ("tfnet", "tfnet_k0"),
}


@dataclass
class BenchmarkConfig:
    kind: str = "dense"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: Optional[Tuple[str, ...]] = None
    train_scenes: int = 4
    test_scenes: int = 2
    model: str = "desk"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    # score only buildings crossing core-tile boundaries, default for the straddle suite
    boundary_only: Optional[bool] = None
    jobs: int = JOBS

    def __post_init__(self):
        if self.kind not in SUITE_KINDS:
            raise InvalidArgument(f"suite kind must be one of {SUITE_KINDS}, got {self.kind}")
        if self.variants is None:
            self.variants = DEFAULT_VARIANTS[self.kind]
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise InvalidArgument(f"unknown variants {sorted(unknown)}, known: {sorted(VARIANTS)}")
        if self.model not in MODEL_PRESETS:
            raise InvalidArgument(f"model must be one of {MODEL_PRESETS}, got {self.model}")
        if not self.seeds:
            raise InvalidArgument("at least one seed is needed")
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise InvalidArgument("train and test scene counts must be positive")
        if self.boundary_only is None:
            self.boundary_only = self.kind == "straddle"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d


@dataclass
class ComparisonResult:
    kind: str
    # variant -> f1 per seed, in seed order
    f1: Dict[str, List[float]]
    seeds: List[int]
    boundary_only: bool

    def median(self, variant: str) -> float:
        return float(np.median(self.f1[variant]))

    def medians(self) -> Dict[str, float]:
        return {name: self.median(name) for name in self.f1}

    def gap(self, a: str, b: str) -> float:
        """median F1 of a minus median F1 of b"""
        return self.median(a) - self.median(b)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seeds": self.seeds,
            "boundary_only": self.boundary_only,
            "f1": self.f1,
            "median_f1": self.medians(),
        }


def suite_scenes(kind: str, seed: int, n: int, core_w: int, core_h: int) -> List[Scene]:
    """In-memory counterpart of synthgen.generate_suite"""
    template = suite_spec(kind, core_w, core_h)
    scenes = []
    for i in range(n):
        raster, polygons = generate(replace(template, seed=scene_seed(seed, i)))
        scenes.append((f"{kind}_{seed}_{i:03d}", raster, polygons))
    return scenes


def _model_config(preset: str, heads: int) -> TFNetConfig:
    return getattr(TFNetConfig, preset)(heads=heads)


def run_variant(
    variant: Variant, seed: int, config: BenchmarkConfig, train: Sequence[Scene], test: Sequence[Scene]
) -> float:
    train_config = replace(config.train, margin=variant.margin, seed=seed)
    params = build(_model_config(config.model, variant.heads), seed)
    samples = make_samples(train, train_config, config.jobs)
    result = fit(params, samples, train_config)

    report = evaluate_scenes(
        result.params,
        test,
        train_config,
        edge_split=variant.edge_split,
        boundary_only=config.boundary_only,
        jobs=config.jobs,
    )
    f1 = report.aggregate.f1_standard
    LOG.i("variant %s seed %s: f1 %.4f after %s steps", variant.name, seed, f1, result.step)
    return f1


@debug_info
def compare(config: BenchmarkConfig, out_dir: Optional[str] = None) -> ComparisonResult:
    """Every variant trains on the same scenes with the same budget per seed"""
    f1: Dict[str, List[float]] = {name: [] for name in config.variants}
    core_w, core_h = config.train.core_w, config.train.core_h
    for seed in config.seeds:
        train = suite_scenes(config.kind, seed, config.train_scenes, core_w, core_h)
        test = suite_scenes(config.kind, seed + _TEST_SEED_OFFSET, config.test_scenes, core_w, core_h)
        for name in config.variants:
            f1[name].append(run_variant(VARIANTS[name], seed, config, train, test))

    result = ComparisonResult(config.kind, f1, list(config.seeds), bool(config.boundary_only))
    LOG.i("median f1 on %s suite: %s", config.kind, result.medians())

    if out_dir:
        rows = [
            [name, seed, score] for name in config.variants for seed, score in zip(config.seeds, f1[name])
        ]
        write_csv(["variant", "seed", "f1"], rows, os.path.join(out_dir, "comparison.csv"))
        write_json({**result.to_dict(), "config": config.to_dict()}, os.path.join(out_dir, "comparison.json"))

    return result
