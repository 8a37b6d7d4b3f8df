import os

import pytest

from app.benchmark import (
    VARIANTS,
    BenchmarkConfig,
    ComparisonResult,
    compare,
    suite_scenes,
)
from app.errors import InvalidArgument
from app.file_utils import read_json
from app.trainer import TrainConfig


def test_default_variants_per_kind():
    assert BenchmarkConfig(kind="dense").variants == ("tfnet", "baseline")
    straddle = BenchmarkConfig(kind="straddle")
    assert straddle.variants == ("tfnet", "tfnet_k0")
    assert straddle.boundary_only
    assert not BenchmarkConfig(kind="sparse").boundary_only
    assert VARIANTS["tfnet_k0"].margin == 0
    assert VARIANTS["baseline"].heads == 1


def test_config_validation():
    with pytest.raises(InvalidArgument):
        BenchmarkConfig(kind="urban")
    with pytest.raises(InvalidArgument):
        BenchmarkConfig(variants=("tfnet", "unet"))
    with pytest.raises(InvalidArgument):
        BenchmarkConfig(model="huge")
    with pytest.raises(InvalidArgument):
        BenchmarkConfig(seeds=())


def test_suite_scenes_are_seeded():
    a = suite_scenes("sparse", 1, 2, 64, 64)
    b = suite_scenes("sparse", 1, 2, 64, 64)
    assert [s[0] for s in a] == ["sparse_1_000", "sparse_1_001"]
    assert all(ra == rb and pa == pb for (_, ra, pa), (_, rb, pb) in zip(a, b))
    assert not a[0][1] == suite_scenes("sparse", 2, 1, 64, 64)[0][1]


def test_comparison_result():
    result = ComparisonResult("dense", {"tfnet": [0.5, 0.9, 0.7], "baseline": [0.4, 0.6, 0.2]}, [0, 1, 2], False)
    assert result.medians() == {"tfnet": 0.7, "baseline": 0.4}
    assert result.gap("tfnet", "baseline") == pytest.approx(0.3)
    assert result.to_dict()["median_f1"]["tfnet"] == 0.7


def test_compare_smoke(tmp_path):
    config = BenchmarkConfig(
        kind="sparse",
        seeds=(0,),
        train_scenes=1,
        test_scenes=1,
        model="tiny",
        train=TrainConfig(epochs=1, max_steps=1),
    )

    result = compare(config, str(tmp_path))

    assert set(result.f1) == {"tfnet", "baseline"}
    assert all(len(scores) == 1 and 0.0 <= scores[0] <= 1.0 for scores in result.f1.values())
    saved = read_json(os.path.join(tmp_path, "comparison.json"))
    assert saved["config"]["model"] == "tiny"
    assert saved["seeds"] == [0]
    assert os.path.exists(os.path.join(tmp_path, "comparison.csv"))
