import os
from dataclasses import replace

import numpy as np
import pytest

from app import tensor_core as tc
from app.errors import DataError, InvalidArgument, NonFiniteLossError
from app.nepagg import Raster, crop_core
from app.rastergeo import Polygon, rasterize
from app.synthgen import SceneSpec, generate
from app.tensor_core import Tensor, grad_check
from app.tfnet import TFNetConfig, build, load_model, tfnet_forward
from app.trainer import (
    TrainConfig,
    TrainSample,
    compute_losses,
    evaluate_scenes,
    fit,
    make_samples,
    predict,
    split_dataset,
    train_step,
)


def _scene(height=40, width=36, seed=0):
    spec = SceneSpec(
        height=height, width=width, count=2, min_size=6, max_size=10, min_gap=2, max_gap=2, seed=seed
    )
    raster, polygons = generate(spec)
    return f"scene{seed}", raster, polygons


def _config(**kwargs):
    values = dict(core_w=16, core_h=16, margin=4, batch_size=2, epochs=1, learning_rate=0.01, seed=0)
    values.update(kwargs)
    return TrainConfig(**values)


def _same_params(a, b) -> bool:
    pairs = zip(a.named_parameters(), b.named_parameters())
    return all(np.array_equal(ta.data, tb.data) for (_, ta), (_, tb) in pairs)


def test_make_samples_cover_the_parent():
    scene = _scene()
    config = _config()

    samples = make_samples([scene], config)

    # 40x36 parent, 16x16 cores -> 3x3 tiles
    assert len(samples) == 9
    for s in samples:
        assert s.image.shape == (3, 24, 24)
        assert s.building_mask.shape == (16, 16)
        assert s.edge_mask.shape == (16, 16)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert np.all(s.edge_mask <= s.building_mask)
        assert s.scene_id == "scene0"

    _, raster, polygons = scene
    total = rasterize(polygons, raster.height, raster.width).plane().sum()
    assert sum(s.building_mask.sum() for s in samples) == total


def test_make_samples_needs_ground_truth():
    scene_id, raster, _ = _scene()
    with pytest.raises(DataError):
        make_samples([(scene_id, raster, None)], _config())


def test_sample_shapes_are_checked():
    sample = make_samples([_scene()], _config())[0]
    with pytest.raises(InvalidArgument):
        TrainSample(sample.image, np.zeros((15, 16)), sample.edge_mask, sample.record)
    with pytest.raises(InvalidArgument):
        TrainSample(sample.image[:, :20], sample.building_mask, sample.edge_mask, sample.record)


def test_losses_without_margin_are_plain_focal_losses(tiny_params):
    config = _config(margin=0)
    sample = make_samples([_scene()], config)[0]

    loss_building, loss_edge, total = compute_losses(tiny_params, [sample], config)

    building, edge = tfnet_forward(tiny_params, Tensor(sample.image[None]))
    expected_b = tc.focal_loss(building, sample.building_mask[None, None]).item()
    expected_e = tc.focal_loss(edge, sample.edge_mask[None, None]).item()
    assert loss_building.item() == pytest.approx(expected_b, rel=1e-12)
    assert loss_edge.item() == pytest.approx(expected_e, rel=1e-12)
    assert total.item() == pytest.approx(expected_b + expected_e, rel=1e-12)


def test_loss_weights(tiny_params):
    samples = make_samples([_scene()], _config())[:2]
    lb, le, _ = compute_losses(tiny_params, samples, _config())
    _, _, total = compute_losses(tiny_params, samples, _config(loss_weights=(2.0, 0.5)))
    assert total.item() == pytest.approx(2 * lb.item() + 0.5 * le.item(), rel=1e-12)


def test_loss_sees_only_core_pixels(tiny_params):
    config = _config()
    k = config.margin
    sample = make_samples([_scene()], config)[4]
    # masks grown to the augmented extent, margin filled with poison
    poisoned_b = np.pad(sample.building_mask, k, constant_values=7.0)
    poisoned_e = np.pad(sample.edge_mask, k, constant_values=7.0)

    with pytest.raises(InvalidArgument):
        TrainSample(sample.image, poisoned_b, poisoned_e, sample.record)
    with pytest.raises(InvalidArgument):
        tc.focal_loss(Tensor(np.zeros((1, 1) + poisoned_b.shape)), poisoned_b[None, None])

    loss_building, loss_edge, _ = compute_losses(tiny_params, [sample], config)

    building, edge = tfnet_forward(tiny_params, Tensor(sample.image[None]))
    expected_b = tc.focal_loss(crop_core(building, k), crop_core(poisoned_b, k)[None, None])
    expected_e = tc.focal_loss(crop_core(edge, k), crop_core(poisoned_e, k)[None, None])
    assert loss_building.item() == pytest.approx(expected_b.item(), rel=1e-12)
    assert loss_edge.item() == pytest.approx(expected_e.item(), rel=1e-12)


def _with_biases(params, seed=1):
    # no pre-activation lands exactly on a relu kink
    rng = np.random.default_rng(seed)
    for name, tensor in params.named_parameters():
        if name.endswith(".bias"):
            tensor.data[...] = rng.uniform(0.05, 0.2, size=tensor.shape)
    return params


def test_full_pipeline_gradient():
    params = _with_biases(build(TFNetConfig.tiny(), 0))
    config = _config(margin=2)
    batch = make_samples([_scene()], config)[4:5]
    named = params.named_parameters()

    names = [name for name, _ in named]
    for group in ("encoder.stem.", "encoder.stage3.", "decoder0.aspp1.", "decoder1.pool.", "decoder1.refine."):
        assert any(name.startswith(group) for name in names)

    for i, (name, tensor) in enumerate(named):
        err = grad_check(lambda _: compute_losses(params, batch, config)[2], tensor, max_checks=3, seed=i)
        assert err < 1e-4, name


def test_train_step_is_deterministic():
    config = _config()
    samples = make_samples([_scene()], config)
    a, b = build(TFNetConfig.tiny(), 0), build(TFNetConfig.tiny(), 0)

    la = train_step(a, samples[:2], config)
    lb = train_step(b, samples[:2], config)

    assert la == lb
    assert la.total == pytest.approx(la.building + la.edge)
    assert _same_params(a, b)
    assert not _same_params(a, build(TFNetConfig.tiny(), 0))


def test_non_finite_loss_stops_before_the_update(tiny_params):
    config = _config()
    samples = make_samples([_scene()], config)
    tiny_params.encoder.stem.weight.data[...] = np.nan
    before = tiny_params.decoders[0].classifier.weight.data.copy()

    with pytest.raises(NonFiniteLossError) as e:
        train_step(tiny_params, samples[:1], config, step=7)

    assert e.value.step == 7
    np.testing.assert_array_equal(tiny_params.decoders[0].classifier.weight.data, before)


def test_zero_epochs_leave_params_unchanged(tiny_params):
    config = _config(epochs=0)
    result = fit(tiny_params, make_samples([_scene()], config), config)
    assert result.history == []
    assert _same_params(result.params, build(TFNetConfig.tiny(), 0))


def test_fit_overfits_a_centred_square():
    pixels = np.full((64, 64, 3), 40, dtype=np.uint8)
    pixels[24:40, 24:40] = 200
    scene = ("square", Raster(pixels), [Polygon.rectangle(24, 24, 40, 40)])
    config = TrainConfig(core_w=64, core_h=64, margin=8, batch_size=1, epochs=200, seed=0)
    samples = make_samples([scene], config)
    assert len(samples) == 1

    result = fit(build(TFNetConfig.desk(), 0), samples, config)

    totals = [row[4] for row in result.history]
    assert len(totals) == 200
    assert totals[-1] < 0.1 * totals[0]


def test_max_steps():
    config = _config(epochs=5, max_steps=3)
    result = fit(build(TFNetConfig.tiny(), 0), make_samples([_scene()], config), config)
    assert result.step == 3
    assert [row[0] for row in result.history] == [0, 1, 2]


def test_fit_writes_history_checkpoints_and_model(tmp_path):
    config = _config(epochs=2, checkpoint_every=1, max_steps=None)
    samples = make_samples([_scene()], config)[:4]
    out_dir = str(tmp_path / "run")

    result = fit(build(TFNetConfig.tiny(), 0), samples, config, out_dir=out_dir)

    assert result.epoch == 2
    assert result.step == 4
    assert os.path.exists(os.path.join(out_dir, "history.csv"))
    assert os.path.exists(os.path.join(out_dir, "checkpoints", "epoch_0001.json"))
    assert os.path.exists(os.path.join(out_dir, "checkpoints", "epoch_0002.bin"))

    loaded, extra = load_model(os.path.join(out_dir, "model"), TFNetConfig.tiny())
    assert _same_params(loaded, result.params)
    assert extra["step"] == 4
    assert TrainConfig.from_dict(extra["train_config"]) == config


def test_resume_is_bitwise_identical(tmp_path):
    config = _config(epochs=2, checkpoint_every=1)
    samples = make_samples([_scene()], config)[:4]

    straight = fit(build(TFNetConfig.tiny(), 0), samples, config)

    first_dir = str(tmp_path / "first")
    fit(build(TFNetConfig.tiny(), 0), samples, replace(config, epochs=1), out_dir=first_dir)
    resumed = fit(
        build(TFNetConfig.tiny(), 0),
        samples,
        config,
        resume_from=os.path.join(first_dir, "checkpoints", "epoch_0001"),
    )

    assert resumed.epoch == straight.epoch
    assert resumed.history == straight.history
    assert _same_params(resumed.params, straight.params)


def test_resume_after_max_steps_mid_epoch(tmp_path):
    # 4 samples in batches of 2: 2 steps per epoch, 6 in total
    config = _config(epochs=3)
    samples = make_samples([_scene()], config)[:4]

    straight = fit(build(TFNetConfig.tiny(), 0), samples, config)
    assert straight.step == 6

    first_dir = str(tmp_path / "first")
    stopped = fit(build(TFNetConfig.tiny(), 0), samples, replace(config, max_steps=3), out_dir=first_dir)
    assert (stopped.epoch, stopped.step, stopped.batch) == (1, 3, 1)

    _, extra = load_model(os.path.join(first_dir, "model"), TFNetConfig.tiny())
    assert (extra["epoch"], extra["step"], extra["batch"]) == (1, 3, 1)

    resumed = fit(build(TFNetConfig.tiny(), 0), samples, config, resume_from=os.path.join(first_dir, "model"))

    assert [row[:2] for row in resumed.history] == [[0, 0], [1, 0], [2, 1], [3, 1], [4, 2], [5, 2]]
    assert resumed.history == straight.history
    assert _same_params(resumed.params, straight.params)


def test_fit_rejects_empty_dataset(tiny_params):
    with pytest.raises(InvalidArgument):
        fit(tiny_params, [], _config())


def test_predict_extents_and_determinism(tiny_params):
    _, raster, _ = _scene()
    config = _config()

    building, edge = predict(tiny_params, raster, config)
    again, _ = predict(tiny_params, raster, config, jobs=3)

    assert building.pixels.shape == (40, 36, 1)
    assert edge.pixels.shape == (40, 36, 1)
    assert np.all((building.pixels > 0) & (building.pixels < 1))
    assert building == again


def test_margin_covers_the_neighbourhood(rng, tiny_params):
    # one 16x16 core with a 4 px margin sees exactly the zero-padded parent
    parent = Raster(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
    padded = Raster(np.pad(parent.pixels, ((4, 4), (4, 4), (0, 0))))

    tiled, _ = predict(tiny_params, parent, _config(core_w=16, core_h=16, margin=4))
    whole, _ = predict(tiny_params, padded, _config(core_w=24, core_h=24, margin=0))

    np.testing.assert_allclose(tiled.plane(), whole.plane()[4:20, 4:20], rtol=0, atol=1e-12)


def test_single_decoder_model():
    params = build(TFNetConfig.tiny(heads=1), 0)
    config = _config()
    samples = make_samples([_scene()], config)[:2]

    loss_building, loss_edge, total = compute_losses(params, samples, config)
    assert loss_edge is None
    assert total.item() == loss_building.item()

    losses = train_step(params, samples, config)
    assert losses.edge == 0.0

    _, raster, _ = _scene()
    _, edge = predict(params, raster, config)
    assert edge is None


def test_evaluate_scenes(tiny_params):
    scenes = [_scene(seed=1), _scene(seed=2)]
    report = evaluate_scenes(tiny_params, scenes, _config(), edge_split=True)

    assert list(report.per_raster) == ["scene1", "scene2"]
    counts = report.aggregate_counts
    assert counts.tp + counts.fn == sum(len(p) for _, _, p in scenes)


def test_split_dataset():
    items = list(range(10))
    train, val = split_dataset(items, 0.2, seed=3)

    assert len(train) == 8 and len(val) == 2
    assert sorted(train + val) == items
    assert split_dataset(items, 0.2, seed=3) == (train, val)
    assert split_dataset([1], 0.5) == ([1], [])
    assert split_dataset(items, 0.0) == (items, [])

    with pytest.raises(InvalidArgument):
        split_dataset(items, 1.0)


def test_train_config():
    config = _config(loss_weights=[1, 2])
    assert config.loss_weights == (1.0, 2.0)
    assert TrainConfig.from_dict(config.to_dict()) == config

    full = TrainConfig.full_scale()
    assert (full.core_w, full.margin, full.batch_size, full.epochs) == (650, 83, 8, 150)
    assert full.learning_rate == 1e-4

    for bad in (dict(core_w=0), dict(margin=-1), dict(learning_rate=0), dict(loss_weights=(1.0,))):
        with pytest.raises(InvalidArgument):
            _config(**bad)
    with pytest.raises(InvalidArgument):
        TrainConfig.from_dict({"epochs": 1, "optimizer": "adam"})
