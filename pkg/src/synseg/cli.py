"""``synseg`` command line: mine, synth, train, segment, eval, sweep, ablate.

Configuration is resolved as defaults <- JSON file (``--config``) <- flags.
The seed additionally honours ``SYNSEG_SEED`` when ``--seed`` is absent.
Exit codes: 0 ok, 1 internal error, 2 bad input, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import captions
from .checkpoint import CheckpointError
from .imageio import load_image, load_label_map, load_palette, save_label_map, save_mask
from .mccl import TERMS, LossWeights

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_NONFINITE = 0, 1, 2, 3
SEED_ENV = "SYNSEG_SEED"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# ----------------------------------------------------------------------
# config resolution
# ----------------------------------------------------------------------

# flag dest -> TrainConfig field (top level)
TRAIN_FLAGS = ("learning_rate", "weight_decay", "batch_size", "epochs", "max_categories_per_image", "decay_bias")


def _parse_weights(text: str) -> LossWeights:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != len(TERMS):
        raise argparse.ArgumentTypeError(f"expected {len(TERMS)} comma-separated weights ({','.join(TERMS)})")
    try:
        return LossWeights(*(float(p) for p in parts))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _cap(text: str) -> int | None:
    if text.strip().lower() in ("none", "inf", "0"):
        return None
    return int(text)


def resolve_train_config(args) -> tuple["TrainConfig", dict]:
    """Merge defaults, the JSON file and flags; return the config and per-field provenance."""
    from .training import TrainConfig

    data = TrainConfig().to_dict()
    prov = {k: "default" for k in data}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(file_cfg, dict):
            raise InputError(f"{path}: config must be a JSON object")
        for k, v in file_cfg.items():
            if k in ("encoder", "model", "loss_weights") and isinstance(v, dict) and isinstance(data.get(k), dict):
                data[k] = {**data[k], **v}
            else:
                data[k] = v
            prov[k] = "file"
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            data[k] = v
            prov[k] = "flag"
    if getattr(args, "loss_weights", None) is not None:
        data["loss_weights"] = args.loss_weights.to_dict()
        prov["loss_weights"] = "flag"
    if getattr(args, "encoder_kind", None) is not None:
        data["encoder"] = {**data["encoder"], "kind": args.encoder_kind}
        prov["encoder"] = "flag"
    if getattr(args, "encoder_weights", None) is not None:
        data["encoder"] = {**data["encoder"], "weights_path": args.encoder_weights}
        prov["encoder"] = "flag"
    if getattr(args, "seed", None) is not None:
        data["seed"], prov["seed"] = args.seed, "flag"
    elif os.environ.get(SEED_ENV, "").strip():
        try:
            data["seed"], prov["seed"] = int(os.environ[SEED_ENV]), "env"
        except ValueError:
            raise InputError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    try:
        cfg = TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None
    return cfg, prov


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_mine(args) -> int:
    inp = Path(args.input)
    if not inp.is_file():
        raise InputError(f"input file not found: {inp}")
    if args.exclusion is not None and not Path(args.exclusion).is_file():
        raise InputError(f"exclusion file not found: {args.exclusion}")
    counts = captions.mine_corpus(inp, args.exclusion, args.output)
    exclusion = (sorted(captions.ExclusionList.from_file(args.exclusion).terms) if args.exclusion
                 else sorted(captions.ExclusionList.default().terms))
    meta = {"command": "mine", "input_sha256": _sha256(inp), "exclusion": exclusion,
            "tagger": "lexicon", "counts": counts}
    Path(str(args.output) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                                     encoding="utf-8")
    _emit({"mined": counts})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_dataset, write_dataset

    paths = write_dataset(args.out, make_dataset(args.n_images, args.image_side, args.data_seed))
    _emit({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def _load_manifest(args):
    from .training import ManifestError, load_manifest

    try:
        return load_manifest(args.manifest, args.data_root)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    except ManifestError as exc:
        raise InputError(str(exc)) from None


def cmd_train(args) -> int:
    from .training import train

    cfg, prov = resolve_train_config(args)
    manifest = _load_manifest(args)
    log = Path(args.log) if args.log else Path(str(args.out) + ".loss.jsonl")
    echo = {"manifest_sha256": _sha256(Path(args.manifest))}
    result = train(cfg, manifest, checkpoint_path=args.out, log_path=log, echo=echo)
    summary = {"steps": result.steps, "checkpoint": str(args.out), "log": str(log),
               "skipped": [p for p, _ in result.skipped], "provenance": prov, "seed": cfg.seed}
    if result.history:
        summary["initial_total"] = result.history[0].total
    if result.final is not None:
        summary["final_total"] = result.final.total
    _emit(summary)
    return EXIT_OK


def _load_model(path):
    from .training import load_model

    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    except CheckpointError as exc:
        raise InputError(str(exc)) from None


def _read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    try:
        return load_image(path)
    except OSError as exc:
        raise InputError(f"unreadable image {path}: {exc}") from None


def _threshold(value: float) -> float:
    if not (0.0 < value < 1.0):
        raise InputError(f"--threshold must lie in (0, 1), got {value}")
    return value


def cmd_segment(args) -> int:
    from .inference import export_overlay, segment

    threshold = _threshold(args.threshold)
    loaded = _load_model(args.ckpt)
    image_path = Path(args.image)
    image = _read_image(image_path)
    cats = [c.strip() for c in args.categories.split(",") if c.strip()]
    if not cats:
        raise InputError("--categories is empty")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = segment(image, cats, loaded.model, loaded.encoders, threshold, args.mode)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    written = {}
    for i, c in enumerate(result.categories):
        p = out_dir / f"{stem}.mask{i}.png"
        save_mask(p, result.masks[c])
        written[c] = str(p)
    save_label_map(out_dir / f"{stem}.labels.png", result.combined.labels)
    echo = {"command": "segment", "config": loaded.config.to_dict(), "threshold": threshold, "mode": args.mode,
            "categories": result.categories, "palette": {str(k): v for k, v in result.combined.palette.items()},
            "masks": {c: Path(p).name for c, p in written.items()}}
    (out_dir / f"{stem}.segment.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n",
                                                  encoding="utf-8")
    if args.overlay:
        try:
            export_overlay(image, result, args.overlay)
        except (FileNotFoundError, OSError) as exc:
            raise InputError(f"cannot write overlay: {exc}") from None
    _emit({"masks": written, "labels": str(out_dir / f"{stem}.labels.png"), "overlay": args.overlay})
    return EXIT_OK


def _pair_dirs(images: Path, gt: Path) -> list[tuple[str, Path, Path]]:
    for d in (images, gt):
        if not d.is_dir():
            raise InputError(f"not a directory: {d}")
    imgs = {p.stem: p for p in sorted(images.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    gts = {p.stem: p for p in sorted(gt.iterdir()) if p.suffix.lower() == ".png"}
    only_img = sorted(set(imgs) - set(gts))
    only_gt = sorted(set(gts) - set(imgs))
    if only_img or only_gt:
        raise InputError(f"image/ground-truth mismatch: without gt {only_img[:5]}, without image {only_gt[:5]}")
    if not imgs:
        raise InputError(f"no images in {images}")
    return [(s, imgs[s], gts[s]) for s in sorted(imgs)]


def _eval_items(args):
    from .inference import EvalItem

    items = []
    for stem, ip, gp in _pair_dirs(Path(args.images), Path(args.gt)):
        try:
            gt = load_label_map(gp)
        except (OSError, ValueError) as exc:
            raise InputError(f"unreadable ground truth {gp}: {exc}") from None
        image = _read_image(ip)
        if image.shape[:2] != gt.shape:
            raise InputError(f"{stem}: image {image.shape[:2]} and ground truth {gt.shape} differ in size")
        items.append(EvalItem(stem, image, gt))
    return items


def _palette(args) -> dict[int, str]:
    p = Path(args.palette)
    if not p.is_file():
        raise InputError(f"palette not found: {p}")
    try:
        return load_palette(p)
    except (ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"bad palette {p}: {exc}") from None


def cmd_eval(args) -> int:
    from .inference import _eval_setup, _prepare_gt, confusion_matrix, evaluate, report_from_confusion

    palette = _palette(args)
    threshold = _threshold(args.threshold)
    if args.pred:
        # precomputed label maps, paired by file stem with the ground truth
        _, _, background, num_classes = _eval_setup(palette, args.mode)
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        for stem, pp, gp in _pair_dirs(Path(args.pred), Path(args.gt)):
            pred, gt = load_label_map(pp), load_label_map(gp)
            if pred.shape != gt.shape:
                raise InputError(f"{stem}: prediction {pred.shape} and ground truth {gt.shape} differ in size")
            try:
                conf += confusion_matrix(pred, _prepare_gt(gt, args.mode, background), num_classes)
            except ValueError as exc:
                raise InputError(f"{stem}: {exc}") from None
        report = report_from_confusion(conf)
        config = None
    else:
        if not args.ckpt:
            raise InputError("eval needs --ckpt or --pred")
        loaded = _load_model(args.ckpt)
        report = evaluate(_eval_items(args), palette, loaded.model, loaded.encoders, threshold, args.mode)
        config = loaded.config.to_dict()
    out = {"command": "eval", "mode": args.mode, "threshold": threshold, "config": config,
           "palette": {str(k): v for k, v in palette.items()}, **report.to_dict(palette)}
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"miou": report.miou, "per_class": out["per_class"]})
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .inference import threshold_sweep

    palette = _palette(args)
    loaded = _load_model(args.ckpt)
    try:
        rows = threshold_sweep(_eval_items(args), palette, loaded.model, loaded.encoders, args.thresholds,
                               args.mode, args.out, echo={"config": loaded.config.to_dict()})
    except ValueError as exc:
        raise InputError(str(exc)) from None
    _emit({"rows": [{"threshold": r.threshold, "miou": r.miou} for r in rows], "csv": args.out})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .inference import ablation_ordering_flag, ablation_table, run_ablation, write_csv

    cfg, prov = resolve_train_config(args)
    manifest = _load_manifest(args)
    palette = _palette(args)
    threshold = _threshold(args.threshold)
    rows = run_ablation(cfg, manifest, _eval_items(args), palette, threshold, args.mode, args.log_dir)
    flag = ablation_ordering_flag(rows)
    write_csv(args.out, ablation_table(rows), echo={"config": cfg.to_dict(), "threshold": threshold,
                                                   "mode": args.mode, "ordering_flag": flag})
    _emit({"rows": [r.name for r in rows], "csv": args.out, "ordering_flag": flag, "provenance": prov})
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (else ${SEED_ENV}, else config, else 42)")
    p.add_argument("--learning-rate", type=float, default=None, help="SGD step size (config default 1e-5)")
    p.add_argument("--weight-decay", type=float, default=None, help="L2 decay on weights (config default 1e-4)")
    p.add_argument("--batch-size", type=int, default=None, help="images per step (config default 128)")
    p.add_argument("--epochs", type=int, default=None, help="passes over the manifest (config default 1)")
    p.add_argument("--max-categories-per-image", type=_cap, default=None,
                   help="category cap per image; 'none' disables (config default 8)")
    p.add_argument("--decay-bias", type=_bool, default=None,
                   help="also decay biases and FiLM beta (config default false)")
    p.add_argument("--loss-weights", type=_parse_weights, default=None,
                   help="align,cont,back,sep weights (config default 1,1,10,1)")
    p.add_argument("--encoder-kind", choices=("seeded_mock", "toy_patch", "pretrained_adapter"), default=None,
                   help="frozen encoder family (config default toy_patch)")
    p.add_argument("--encoder-weights", default=None, help="weights file for pretrained_adapter")
    p.add_argument("--manifest", required=True, help="JSONL of {image_path, categories}")
    p.add_argument("--data-root", default=None, help="base for relative image paths (default: manifest dir)")


def _eval_options(p: argparse.ArgumentParser, ckpt_required: bool = True) -> None:
    if ckpt_required:
        p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--gt", required=True, help="directory of ground-truth label PNGs (same stems)")
    p.add_argument("--palette", required=True, help="JSON mapping label index -> category name")
    p.add_argument("--mode", choices=("with_background", "labeled_only"), default="with_background",
                   help="evaluation regime")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synseg", description=__doc__, formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("mine", help="captions -> noun-phrase category lists", formatter_class=_Formatter)
    p.add_argument("--input", required=True, help="captions as TSV (id<TAB>caption) or JSONL")
    p.add_argument("--exclusion", default=None, help="generic-term list (default: bundled list)")
    p.add_argument("--output", required=True, help="output JSONL; a .meta.json sidecar is written next to it")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("synth", help="write the synthetic colored-shape benchmark", formatter_class=_Formatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-images", type=int, default=8, help="number of images")
    p.add_argument("--image-side", type=int, default=32, help="image side in pixels")
    p.add_argument("--data-seed", type=int, default=0, help="seed for the generator")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train FiLM, decoder and projector", formatter_class=_Formatter)
    _train_options(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="loss log path (default: <out>.loss.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one image", formatter_class=_Formatter)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--categories", required=True, help="comma-separated category names")
    p.add_argument("--threshold", type=float, default=0.4, help="activation threshold in (0, 1)")
    p.add_argument("--mode", choices=("with_background", "labeled_only"), default="with_background",
                   help="how the combined label map is formed")
    p.add_argument("--out-dir", default=".", help="where masks, label map and JSON echo go")
    p.add_argument("--overlay", default=None, help="optional overlay PNG path")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="mIoU over an image set", formatter_class=_Formatter)
    p.add_argument("--ckpt", default=None, help="model checkpoint (or use --pred)")
    p.add_argument("--pred", default=None, help="directory of predicted label PNGs instead of a model")
    _eval_options(p, ckpt_required=False)
    p.add_argument("--threshold", type=float, default=0.4, help="activation threshold in (0, 1)")
    p.add_argument("--report", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="mIoU and mask area across thresholds", formatter_class=_Formatter)
    _eval_options(p)
    p.add_argument("--thresholds", type=_parse_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                   help="ascending comma-separated thresholds")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="full objective plus the four leave-one-out runs",
                       formatter_class=_Formatter)
    _train_options(p)
    _eval_options(p, ckpt_required=False)
    p.add_argument("--threshold", type=float, default=0.4, help="activation threshold in (0, 1)")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--log-dir", default=None, help="keep each run's loss log here")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .training import ManifestError, NonFiniteLossError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FileNotFoundError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
