"""
Command-line interface: train, eval, predict, overlay, synth, ablation and selftest
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from PIL import Image
from tqdm import tqdm

from .config import RunConfig, parse_and_validate
from .data import (
    SegmentationSample,
    find_mask,
    fixed_split,
    generate_synthetic,
    kfold_split,
    load_pairs,
    ratio_split,
    read_image,
    read_mask,
    save_pairs,
)
from .exceptions import ConfigError, DataError, ScaleFusionError
from .model import ablation_configs, build_model
from .overlay import render_overlay, resize_probability, write_feature_heatmap, write_mask_png, write_rgb_png
from .selftest import run_selftest
from .tensor import make_rng
from .trainer import Trainer, evaluate, load_model, predict_probabilities
from .utils import list_image_files, sanitize_filename, setup_logger, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", choices=["tiny", "paper", "custom"], help="Model preset")
    parser.add_argument("--input-size", dest="input_size", type=int)
    parser.add_argument("--embed-dim", dest="embed_dim", type=int)
    parser.add_argument("--window", type=int)
    parser.add_argument("--no-catm", dest="use_catm", action="store_const", const=False, help="Plain skip connections")
    parser.add_argument("--no-afb", dest="use_afb", action="store_const", const=False, help="3x3 conv instead of AFB")


def build_parser() -> argparse.ArgumentParser:
    """
    Argument parser with one sub-command per workflow

    Returns:
        Parser for synth, train, eval, predict, overlay, ablation and selftest
    """
    parser = argparse.ArgumentParser(prog="scalefusion", description="ScaleFusionNet skin lesion segmentation")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a model")
    train.add_argument("--config", help="YAML configuration file")
    train.add_argument("--images", dest="image_dir")
    train.add_argument("--masks", dest="mask_dir")
    train.add_argument("--val-images", dest="val_image_dir")
    train.add_argument("--val-masks", dest="val_mask_dir")
    train.add_argument("--split", choices=["kfold", "ratio", "fixed", "none"])
    train.add_argument("--fold", type=int)
    train.add_argument("--folds", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--weight-decay", dest="weight_decay", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--max-steps", dest="max_steps", type=int)
    train.add_argument("--run-dir", dest="run_dir")
    train.add_argument("--resume", help="Checkpoint to continue from")
    _add_model_flags(train)

    ev = sub.add_parser("eval", help="Score a checkpoint on an image/mask directory")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--images", required=True)
    ev.add_argument("--masks", required=True)
    ev.add_argument("--out", required=True, help="Report CSV")
    ev.add_argument("--batch-size", type=int, default=8)
    ev.add_argument("--threshold", type=float, default=0.5)

    predict = sub.add_parser("predict", help="Write 0/255 PNG masks for a directory of images")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--images", required=True)
    predict.add_argument("--out", required=True)
    predict.add_argument("--threshold", type=float, default=0.5)
    predict.add_argument("--dump-features", dest="dump_features", help="Directory for intermediate heat maps")

    overlay = sub.add_parser("overlay", help="Render prediction/truth overlays")
    overlay.add_argument("--pred", required=True)
    overlay.add_argument("--truth", required=True)
    overlay.add_argument("--images", required=True)
    overlay.add_argument("--out", required=True)
    overlay.add_argument("--alpha", type=float, default=0.5)

    synth = sub.add_parser("synth", help="Write a synthetic lesion dataset")
    synth.add_argument("--count", type=int, default=64)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)

    ablation = sub.add_parser("ablation", help="Parameter counts of the structural ablation wirings")
    _add_model_flags(ablation)

    sub.add_parser("selftest", help="Run the structural invariant checks")
    return parser


def _select(samples: List[SegmentationSample], ids: Sequence[str]) -> List[SegmentationSample]:
    wanted = set(ids)
    return [s for s in samples if s.id in wanted]


def split_samples(
    run: RunConfig, samples: List[SegmentationSample]
) -> Tuple[List[SegmentationSample], List[SegmentationSample], Dict[str, List[str]]]:
    """Train / validation samples according to the configured split"""
    ids = [s.id for s in samples]
    if run.val_image_dir:
        val = load_pairs(run.val_image_dir, run.val_mask_dir, run.model.input_size, run.workers)
        return samples, val, {"train": ids, "val": [s.id for s in val]}
    if run.split == "kfold":
        folds = kfold_split(ids, run.folds, run.train.seed)
        train_ids, val_ids = folds.train_ids(run.fold), folds.fold(run.fold)
        return _select(samples, train_ids), _select(samples, val_ids), {"train": train_ids, "val": val_ids}
    if run.split == "ratio":
        train_ids, val_ids, test_ids = ratio_split(ids, run.ratios, run.train.seed)
        split = {"train": train_ids, "val": val_ids, "test": test_ids}
        return _select(samples, train_ids), _select(samples, val_ids), split
    if run.split == "fixed":
        train_ids, val_ids = fixed_split(ids, run.n_train)
        return _select(samples, train_ids), _select(samples, val_ids), {"train": train_ids, "val": val_ids}
    return samples, [], {"train": ids}


def cmd_train(args: argparse.Namespace) -> int:
    keys = (
        "profile", "input_size", "embed_dim", "window", "use_catm", "use_afb",
        "image_dir", "mask_dir", "val_image_dir", "val_mask_dir", "split", "fold", "folds",
        "epochs", "batch_size", "lr", "weight_decay", "seed", "max_steps", "run_dir", "resume", "log_level",
    )
    run = parse_and_validate({k: getattr(args, k, None) for k in keys}, args.config, require_data=True)
    setup_logger("src", run.run_dir, "train", run.log_level)
    write_manifest(run.run_dir, run.to_dict(), "train")

    samples = load_pairs(run.image_dir, run.mask_dir, run.model.input_size, run.workers)
    train_samples, val_samples, split = split_samples(run, samples)
    with open(os.path.join(run.run_dir, "split.json"), "w", encoding="utf-8") as f:
        json.dump(split, f, indent=2)
    logger.info(f"Split '{run.split}': {len(train_samples)} train, {len(val_samples)} validation")

    model = build_model(run.model, seed=run.train.seed)
    trainer = Trainer(model, run.train, run_dir=run.run_dir)
    if run.resume:
        trainer.load_checkpoint(run.resume)
    trainer.fit(train_samples, val_samples or None)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, vars(args), "eval")
    model = load_model(args.checkpoint)
    samples = load_pairs(args.images, args.masks, model.cfg.input_size)
    result = evaluate(model, samples, args.batch_size, args.threshold)
    result.frame().to_csv(args.out, index=False)
    logger.info(f"Wrote report for {len(samples)} images to {args.out}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    write_manifest(args.out, vars(args), "predict")
    model = load_model(args.checkpoint)
    size = model.cfg.input_size
    images = list_image_files(args.images)
    if not images:
        raise DataError(f"no images found in {args.images}")

    for path in tqdm(images, desc="predict", leave=False):
        image, original = read_image(path, size)
        stem = sanitize_filename(path.stem)
        if args.dump_features:
            feature_dir = os.path.join(args.dump_features, stem)
            model.set_feature_hook(
                lambda name, x, d=feature_dir: write_feature_heatmap(os.path.join(d, f"{name}.png"), x.data[0])
            )
        prob = predict_probabilities(model, image.transpose(2, 0, 1)[None])[0, 0]
        model.set_feature_hook(None)
        mask = resize_probability(prob, original) >= args.threshold
        write_mask_png(os.path.join(args.out, f"{stem}.png"), mask)
    logger.info(f"Wrote {len(images)} masks to {args.out}")
    return EXIT_OK


def cmd_overlay(args: argparse.Namespace) -> int:
    images = list_image_files(args.images)
    if not images:
        raise DataError(f"no images found in {args.images}")
    written = 0
    for path in images:
        pred_path = find_mask(Path(args.pred), path.stem)
        truth_path = find_mask(Path(args.truth), path.stem)
        if pred_path is None or truth_path is None:
            logger.warning(f"Skipping {path.name}: prediction or ground truth missing")
            continue
        image, (h, w) = read_image(path)
        pred = read_mask(pred_path)
        truth = read_mask(truth_path)
        if pred.shape != (h, w):
            pred = _resize_mask(pred_path, h, w)
        if truth.shape != (h, w):
            truth = _resize_mask(truth_path, h, w)
        write_rgb_png(os.path.join(args.out, f"{sanitize_filename(path.stem)}.png"), render_overlay(image, pred, truth, args.alpha))
        written += 1
    if written == 0:
        raise DataError(f"no image in {args.images} has both a prediction and a ground-truth mask")
    logger.info(f"Wrote {written} overlays to {args.out}")
    return EXIT_OK


def _resize_mask(path: Path, h: int, w: int) -> np.ndarray:
    with Image.open(path) as img:
        resized = img.convert("L").resize((w, h), Image.Resampling.NEAREST)
    return (np.asarray(resized) > 127).astype(np.uint8)


def cmd_synth(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise ConfigError("count", f"must be >= 1, got {args.count}")
    samples = generate_synthetic(args.count, args.size, make_rng(args.seed))
    save_pairs(samples, os.path.join(args.out, "images"), os.path.join(args.out, "masks"))
    return EXIT_OK


def cmd_ablation(args: argparse.Namespace) -> int:
    keys = ("profile", "input_size", "embed_dim", "window")
    run = parse_and_validate({k: getattr(args, k, None) for k in keys})
    for name, cfg in ablation_configs(run.model).items():
        model = build_model(cfg, seed=run.train.seed)
        print(f"{name:18s} catm={str(cfg.use_catm):5s} afb={str(cfg.use_afb):5s} params={model.num_parameters():,}")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftest()
    for name, passed in results.items():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return EXIT_OK if all(results.values()) else EXIT_FAILURE


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "overlay": cmd_overlay,
    "synth": cmd_synth,
    "ablation": cmd_ablation,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one sub-command

    Returns:
        0 on success, 1 for invalid configuration or data, 2 for any other failure
    """
    args = build_parser().parse_args(argv)
    load_dotenv()
    setup_logger("src", level=args.log_level or os.environ.get("SFN_LOG_LEVEL", "INFO"))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INVALID
    except ScaleFusionError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Unexpected failure in '{args.command}': {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
