"""
Pipeline stages as subcommands:

    python cli.py synth --kind dense --seed 7 --out data/dense/
    python cli.py train --data data/dense/ --out runs/dense/
    python cli.py --from-manifest runs/dense/run_manifest.json

Exit codes: 0 success, 1 invalid arguments, 2 missing or malformed data.
"""
import argparse
import glob
import logging
import os
import sys
from typing import List, Optional

from app import benchmark, evaluator, nepagg, polygonize, synthgen, trainer
from app.config import (
    BINARIZE_THRESHOLD,
    DEFAULT_CORE_SIZE,
    DEFAULT_MARGIN,
    EDGE_SPLIT_THRESHOLD,
    IOU_THRESHOLD,
    JOBS,
    SEED,
)
from app.errors import DataError, InvalidArgument
from app.file_utils import (
    mask_to_png_values,
    png_values_to_prob,
    prob_to_png_values,
    read_json,
    read_png,
    write_geojson,
    write_json,
    write_png,
)
from app.log import LOG, set_level, set_run_id
from app.nepagg import Raster
from app.render import overlay
from app.run_manifest import RunManifest
from app.tfnet import TFNetConfig, build, load_model
from app.utils import random_string

EXIT_OK, EXIT_INVALID, EXIT_DATA = 0, 1, 2

MODEL_PRESETS = ("desk", "tiny", "full")


class UsageError(InvalidArgument):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with status 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _unit_interval(flag: str, open_low: bool = False):
    def parse(value: str) -> float:
        try:
            x = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} must be a number, got {value!r}")
        if not (0 < x <= 1 if open_low else 0 <= x <= 1):
            interval = "(0, 1]" if open_low else "[0, 1]"
            raise argparse.ArgumentTypeError(f"{flag} must be in {interval}, got {value}")
        return x

    return parse


def _positive(value: str) -> int:
    try:
        x = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if x < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return x


def _non_negative(value: str) -> int:
    try:
        x = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if x < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {value}")
    return x


def _labels_dir(path: str) -> str:
    """a suite directory holds its ground truth under labels/"""
    if os.path.exists(os.path.join(path, "manifest.json")):
        return os.path.join(path, "labels")
    return path


def _write_manifest(args, argv: List[str], inputs: dict, out_dir: str, seed: Optional[int] = None):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "from_manifest", "run_id")}
    RunManifest(
        subcommand=args.command,
        argv=list(argv),
        config=config,
        inputs=inputs,
        seed=seed,
        run_id=args.run_id,
    ).write(out_dir)


def run_synth(args, argv):
    synthgen.generate_suite(
        args.kind, args.seed, args.out, scenes=args.scenes, core_w=args.core, core_h=args.core
    )
    _write_manifest(args, argv, {}, args.out, args.seed)


def run_tile(args, argv):
    core_w, core_h = args.core_size or (args.core, args.core)
    parent = Raster(read_png(args.image))
    nepagg.write_tiles(parent, core_w, core_h, args.margin, args.out)
    _write_manifest(args, argv, {"image": args.image}, args.out)


def _train_config(args) -> trainer.TrainConfig:
    config = trainer.TrainConfig.from_dict(read_json(args.config)) if args.config else trainer.TrainConfig()
    overrides = {
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "learning_rate": args.lr,
        "margin": args.margin,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    if args.core is not None:
        overrides["core_w"] = overrides["core_h"] = args.core
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return trainer.TrainConfig.from_dict({**config.to_dict(), **overrides})


def _model_config(args) -> TFNetConfig:
    if args.model in MODEL_PRESETS:
        config = getattr(TFNetConfig, args.model)()
    else:
        config = TFNetConfig.from_dict(read_json(args.model))
    if args.heads is not None:
        config = TFNetConfig.from_dict({**config.to_dict(), "heads": args.heads})
    return config


def run_train(args, argv):
    train_config = _train_config(args)
    model_config = _model_config(args)
    scenes = trainer.load_dataset(args.data)
    train_scenes, val_scenes = trainer.split_dataset(scenes, args.val_fraction, train_config.seed)
    LOG.i("training on %s scenes, %s held out", len(train_scenes), len(val_scenes))

    params = build(model_config, train_config.seed)
    samples = trainer.make_samples(train_scenes, train_config, args.jobs)
    result = trainer.fit(params, samples, train_config, out_dir=args.out, resume_from=args.resume)

    write_json(train_config.to_dict(), os.path.join(args.out, "train_config.json"))
    write_json(model_config.to_dict(), os.path.join(args.out, "model_config.json"))
    if val_scenes:
        report = trainer.evaluate_scenes(result.params, val_scenes, train_config, jobs=args.jobs)
        write_json(report.to_dict(), os.path.join(args.out, "val_report.json"))

    _write_manifest(args, argv, {"data": args.data, "resume": args.resume}, args.out, train_config.seed)


def _model_path(path: str) -> str:
    if os.path.isdir(path):
        return os.path.join(path, "model")
    return path[: -len(".json")] if path.endswith(".json") else path


def run_predict(args, argv):
    params, extra = load_model(_model_path(args.model))
    overrides = {k: v for k, v in {"margin": args.margin}.items() if v is not None}
    if args.core is not None:
        overrides["core_w"] = overrides["core_h"] = args.core
    train_config = trainer.TrainConfig.from_dict({**extra.get("train_config", {}), **overrides})

    if args.image:
        images = [(os.path.splitext(os.path.basename(args.image))[0], Raster(read_png(args.image)))]
    else:
        _, scenes = synthgen.load_suite(args.data)
        images = [(scene_id, raster) for scene_id, raster, _ in scenes]

    for image_id, raster in images:
        building, edge = trainer.predict(params, raster, train_config, args.jobs)
        write_png(prob_to_png_values(building.plane()), os.path.join(args.out, f"{image_id}_building.png"))
        if edge is not None:
            write_png(prob_to_png_values(edge.plane()), os.path.join(args.out, f"{image_id}_edge.png"))

    LOG.i("predicted %s rasters into %s", len(images), args.out)
    _write_manifest(args, argv, {"model": args.model, "data": args.data, "image": args.image}, args.out)


def _polygonize_map(args, prob_path: str, edge_path: Optional[str], geojson_path: str, mask_path: str):
    prob = Raster(png_values_to_prob(read_png(prob_path)))
    edge_prob = None
    if args.edge_split:
        if not edge_path or not os.path.exists(edge_path):
            raise DataError(f"--edge-split needs an edge map for {prob_path}")
        edge_prob = Raster(png_values_to_prob(read_png(edge_path)))

    polygons = polygonize.extract(
        prob,
        args.threshold,
        min_area=args.min_area,
        edge_prob=edge_prob,
        edge_split=args.edge_split,
        edge_threshold=args.edge_threshold,
    )
    write_geojson(
        [p.rings() for p in polygons.polygons],
        geojson_path,
        [{"id": i, "area": region.area} for i, region in enumerate(polygons.regions)],
    )
    if args.masks:
        mask = polygonize.binarize(prob, args.threshold)
        write_png(mask_to_png_values(mask.plane()), mask_path)


def run_polygonize(args, argv):
    if args.in_path:
        # one map to one GeoJSON file, or into the --out directory
        stem = os.path.splitext(os.path.basename(args.in_path))[0]
        if stem.endswith("_building"):
            stem = stem[: -len("_building")]
        if args.out.endswith(".geojson"):
            geojson_path, out_dir = args.out, os.path.dirname(os.path.abspath(args.out))
        else:
            geojson_path, out_dir = os.path.join(args.out, stem + ".geojson"), args.out
        edge_path = args.edge_in
        if edge_path is None and args.in_path.endswith("_building.png"):
            edge_path = args.in_path[: -len("_building.png")] + "_edge.png"
        _polygonize_map(args, args.in_path, edge_path, geojson_path, os.path.join(out_dir, stem + "_mask.png"))
        _write_manifest(args, argv, {"in": args.in_path}, out_dir)
        return

    paths = sorted(glob.glob(os.path.join(args.pred_dir, "*_building.png")))
    if not paths:
        raise DataError(f"no *_building.png probability maps in {args.pred_dir}")
    for path in paths:
        image_id = os.path.basename(path)[: -len("_building.png")]
        _polygonize_map(
            args,
            path,
            os.path.join(args.pred_dir, f"{image_id}_edge.png"),
            os.path.join(args.out, image_id + ".geojson"),
            os.path.join(args.out, image_id + "_mask.png"),
        )
    _write_manifest(args, argv, {"pred_dir": args.pred_dir}, args.out)


def run_evaluate(args, argv):
    if args.out.endswith(".json"):
        report_path, out_dir = args.out, os.path.dirname(os.path.abspath(args.out))
    else:
        report_path, out_dir = os.path.join(args.out, "report.json"), args.out

    groups = read_json(args.groups) if args.groups else None
    boundary_tile = (args.boundary_core, args.boundary_core) if args.boundary_core else None
    report = evaluator.evaluate_dataset(
        args.pred_dir,
        _labels_dir(args.gt_dir),
        iou_threshold=args.iou,
        threshold=args.threshold,
        groups=groups,
        boundary_tile=boundary_tile,
        jobs=args.jobs,
    )
    write_json(report.to_dict(), report_path)
    _write_manifest(args, argv, {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir}, out_dir)


def run_render(args, argv):
    preds = evaluator.load_predictions(args.pred_dir, args.threshold)
    gt_dir = _labels_dir(args.gt_dir)
    image_dir = args.image_dir
    if image_dir is None and os.path.exists(os.path.join(args.gt_dir, "manifest.json")):
        image_dir = os.path.join(args.gt_dir, "images")

    for image_id, pred_set in sorted(preds.items()):
        gt_path = os.path.join(gt_dir, image_id + ".geojson")
        if not os.path.exists(gt_path):
            LOG.w("no ground truth for %s, skip", image_id)
            continue
        gts = evaluator.load_polygon_set(gt_path)
        report = evaluator.match(pred_set, gts, args.iou)

        image = None
        if image_dir and os.path.exists(os.path.join(image_dir, image_id + ".png")):
            image = Raster(read_png(os.path.join(image_dir, image_id + ".png")))
        if image is not None:
            height, width = image.height, image.width
        else:
            boxes = [r.bbox for r in pred_set.regions + gts.regions] or [(0, 0, 1, 1)]
            height, width = max(b[2] for b in boxes), max(b[3] for b in boxes)

        pixels = overlay(pred_set, gts, report, height, width, image)
        write_png(pixels, os.path.join(args.out, image_id + "_overlay.png"))

    _write_manifest(args, argv, {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir}, args.out)


def run_compare(args, argv):
    train = trainer.TrainConfig(
        epochs=args.epochs,
        max_steps=args.max_steps,
        learning_rate=args.lr if args.lr is not None else trainer.TrainConfig().learning_rate,
    )
    config = benchmark.BenchmarkConfig(
        kind=args.kind,
        seeds=tuple(args.seeds),
        variants=tuple(args.variants) if args.variants else None,
        train_scenes=args.train_scenes,
        test_scenes=args.test_scenes,
        model=args.model,
        train=train,
        jobs=args.jobs,
    )
    result = benchmark.compare(config, args.out)
    for name, median in result.medians().items():
        print(f"{name}\tmedian f1 {median:.4f}")
    _write_manifest(args, argv, {}, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cli.py", description="building footprint extraction pipeline")
    parser.add_argument("--from-manifest", help="replay the run recorded in a run_manifest.json")
    parser.add_argument("--jobs", type=_positive, default=JOBS, help="per-tile parallelism")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic scene suite")
    p.add_argument("--kind", choices=synthgen.SUITE_KINDS, required=True)
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--scenes", type=_positive, default=4)
    p.add_argument("--core", type=_positive, default=DEFAULT_CORE_SIZE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("tile", help="split an image into margin-augmented tiles")
    p.add_argument("--in", "--image", dest="image", required=True, help="parent png")
    p.add_argument("--core-size", type=_positive, nargs=2, metavar=("W", "H"))
    p.add_argument("--core", type=_positive, default=DEFAULT_CORE_SIZE, help="square cores, unless --core-size")
    p.add_argument("--margin", type=_non_negative, default=DEFAULT_MARGIN)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_tile)

    p = sub.add_parser("train", help="train a model on a suite")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="train config json")
    p.add_argument("--model", default="desk", help=f"one of {MODEL_PRESETS} or a model config json")
    p.add_argument("--heads", type=int, choices=(1, 2))
    p.add_argument("--epochs", type=_non_negative)
    p.add_argument("--max-steps", type=_non_negative)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=_non_negative)
    p.add_argument("--core", type=_positive)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=run_train)

    p = sub.add_parser("predict", help="probability maps for every image")
    p.add_argument("--model", required=True, help="run directory or checkpoint path")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="suite directory")
    source.add_argument("--image", help="single png")
    p.add_argument("--margin", type=_non_negative)
    p.add_argument("--core", type=_positive)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_predict)

    p = sub.add_parser("polygonize", help="probability maps to GeoJSON polygons")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--in", dest="in_path", help="one building probability png")
    source.add_argument("--pred-dir", help="every *_building.png of a predict run")
    p.add_argument("--edge-in", help="edge probability png for --in with --edge-split")
    p.add_argument("--threshold", type=_unit_interval("--threshold"), default=BINARIZE_THRESHOLD)
    p.add_argument("--min-area", type=_non_negative, default=0)
    p.add_argument("--edge-split", action="store_true")
    p.add_argument("--edge-threshold", type=_unit_interval("--edge-threshold"), default=EDGE_SPLIT_THRESHOLD)
    p.add_argument("--masks", action="store_true", help="also write the binary masks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_polygonize)

    p = sub.add_parser("evaluate", help="polygon-level precision, recall and F1")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--iou", type=_unit_interval("--iou", open_low=True), default=IOU_THRESHOLD)
    p.add_argument("--threshold", type=_unit_interval("--threshold"), default=BINARIZE_THRESHOLD)
    p.add_argument("--groups", help="json mapping raster id to group name")
    p.add_argument("--boundary-core", type=_positive, help="score only buildings crossing tiles of this size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("render", help="TP/FP/FN overlays")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--image-dir")
    p.add_argument("--iou", type=_unit_interval("--iou", open_low=True), default=IOU_THRESHOLD)
    p.add_argument("--threshold", type=_unit_interval("--threshold"), default=BINARIZE_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_render)

    p = sub.add_parser("compare", help="variant comparison on a synthetic suite")
    p.add_argument("--kind", choices=synthgen.SUITE_KINDS, default="dense")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", choices=sorted(benchmark.VARIANTS))
    p.add_argument("--model", choices=benchmark.MODEL_PRESETS, default="desk")
    p.add_argument("--epochs", type=_non_negative, default=20)
    p.add_argument("--max-steps", type=_non_negative)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-scenes", type=_positive, default=4)
    p.add_argument("--test-scenes", type=_positive, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_compare)

    return parser


def dispatch(argv: List[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.from_manifest:
            manifest = RunManifest.load(args.from_manifest)
            LOG.i("replaying %s run from %s", manifest.subcommand, args.from_manifest)
            return dispatch(manifest.argv)
        if not args.command:
            parser.error("a subcommand is required")

        if args.verbose:
            set_level(logging.DEBUG)
        elif args.quiet:
            set_level(logging.WARNING)
        args.run_id = random_string(8, include_digits=True)
        set_run_id(args.run_id)

        args.func(args, argv)
        return EXIT_OK
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except InvalidArgument as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except (DataError, FileNotFoundError) as e:
        print(e, file=sys.stderr)
        return EXIT_DATA
    finally:
        set_run_id("")


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
