"""Thresholded segmentation, mIoU, threshold sweeps, loss ablations and overlays."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .encoders import EncoderPair
from .fss import SynSegModel, dedupe_categories, forward_features
from .imageio import IGNORE_INDEX
from .mccl import TERMS, LossWeights

MODES = ("with_background", "labeled_only")
DEFAULT_THRESHOLD = 0.4
DEFAULT_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
BACKGROUND_NAME = "background"
OVERLAY_ALPHA = 0.45
LEGEND_HEIGHT = 12
LEGEND_BLOCK = 10
# tint colors cycle in category order
TINTS = np.array([
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
], dtype=np.float64) / 255.0


class UntrainedModelWarning(UserWarning):
    pass


def _check_threshold(threshold: float) -> float:
    t = float(threshold)
    if not (math.isfinite(t) and 0.0 < t < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return t


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


# ----------------------------------------------------------------------
# segmentation
# ----------------------------------------------------------------------

def upsample(activation: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a patch-grid map to pixel resolution (pixel-centre aligned)."""
    activation = np.asarray(activation, dtype=np.float64)
    h, w = activation.shape
    if (h, w) == tuple(size):
        return activation.copy()
    out = ndimage.zoom(activation, (size[0] / h, size[1] / w), order=1, grid_mode=True, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def activation_maps(image: np.ndarray, categories: Sequence[str], model: SynSegModel,
                    encoders: EncoderPair) -> np.ndarray:
    """(N, H, W) activations at image resolution, one per category."""
    categories = list(categories)
    if not categories:
        raise ValueError("at least one category is required")
    side = encoders.config.image_side
    image = np.asarray(image, dtype=np.float32)
    size = image.shape[:2]
    if size != (side, side):
        pil = Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))
        image = np.asarray(pil.resize((side, side), Image.BILINEAR), dtype=np.float32) / 255.0
    grid = encoders.encode_image(image)
    text = np.stack([encoders.encode_text(c).vector for c in categories])
    out = forward_features(grid, text, model, categories)
    act = out.maps.activation.data
    return np.stack([upsample(a, size) for a in act])


def combine(activations: np.ndarray, threshold: float, mode: str, label_ids: Sequence[int],
            background: int = 0) -> np.ndarray:
    """Collapse (N, H, W) activations to one label map.

    labeled_only: argmax. with_background: ``background`` where the max is
    below ``threshold``, argmax elsewhere. Ties go to the lowest index.
    """
    _check_mode(mode)
    act = np.asarray(activations)
    ids = np.asarray(label_ids, dtype=np.int64)
    if act.ndim != 3 or act.shape[0] != len(ids):
        raise ValueError(f"expected ({len(ids)}, H, W) activations, got {act.shape}")
    labels = ids[np.argmax(act, axis=0)]
    if mode == "with_background":
        labels = np.where(act.max(axis=0) < threshold, background, labels)
    return labels


@dataclass
class LabelMap:
    labels: np.ndarray
    palette: dict[int, str]
    ignore_index: int = IGNORE_INDEX


@dataclass
class SegmentationResult:
    categories: list[str]
    masks: dict[str, np.ndarray]
    combined: LabelMap
    threshold: float
    mode: str
    activations: np.ndarray


def default_palette(categories: Sequence[str], mode: str) -> dict[int, str]:
    if mode == "with_background":
        return {0: BACKGROUND_NAME, **{i + 1: c for i, c in enumerate(categories)}}
    return {i: c for i, c in enumerate(categories)}


def segment(image: np.ndarray, categories: Sequence[str], model: SynSegModel, encoders: EncoderPair,
            threshold: float = DEFAULT_THRESHOLD, mode: str = "with_background",
            palette: dict[int, str] | None = None) -> SegmentationResult:
    """Per-category masks (activation >= threshold, may overlap) plus the combined label map.

    ``palette`` maps label ids to names. Every category needs an entry; in
    ``with_background`` mode a ``"background"`` entry supplies the background id.
    """
    threshold = _check_threshold(threshold)
    _check_mode(mode)
    categories = dedupe_categories(categories)
    if getattr(model, "steps_trained", 0) == 0:
        warnings.warn("segmenting with an untrained (initial) model", UntrainedModelWarning, stacklevel=2)
    palette = palette if palette is not None else default_palette(categories, mode)
    by_name = {v: k for k, v in palette.items()}
    missing = [c for c in categories if c not in by_name]
    if missing:
        raise ValueError(f"palette has no entry for {missing[0]!r}")
    background = by_name.get(BACKGROUND_NAME, 0)
    act = activation_maps(image, categories, model, encoders)
    masks = {c: act[i] >= threshold for i, c in enumerate(categories)}
    labels = combine(act, threshold, mode, [by_name[c] for c in categories], background)
    return SegmentationResult(categories, masks, LabelMap(labels.astype(np.uint8), dict(palette)),
                              threshold, mode, act)


# ----------------------------------------------------------------------
# mIoU
# ----------------------------------------------------------------------

@dataclass
class IoUReport:
    per_class_iou: list[float | None]  # None where union == 0
    miou: float
    intersection: np.ndarray
    union: np.ndarray
    confusion: np.ndarray  # rows gt, cols pred

    @property
    def defined(self) -> list[int]:
        return [i for i, v in enumerate(self.per_class_iou) if v is not None]

    def to_dict(self, names: dict[int, str] | None = None) -> dict:
        names = names or {}
        return {
            "miou": self.miou,
            "per_class": {names.get(i, str(i)): v for i, v in enumerate(self.per_class_iou) if v is not None},
            "intersection": self.intersection.tolist(),
            "union": self.union.tolist(),
        }


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    keep = gt != ignore_index
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    for name, arr in (("ground truth", g), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} label outside [0, {num_classes}): {int(arr.min())}..{int(arr.max())}")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray) -> IoUReport:
    conf = np.asarray(conf, dtype=np.int64)
    inter = np.diag(conf).copy()
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    ious = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    # exact rational mean, rounded once
    defined = [Fraction(int(i), int(u)) for i, u in zip(inter, union) if u > 0]
    miou = float(sum(defined) / len(defined)) if defined else float("nan")
    return IoUReport(ious, miou, inter, union, conf)


def compute_miou(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> IoUReport:
    """Per-class IoU over non-ignored pixels; mean over classes with non-empty union."""
    if isinstance(pred, LabelMap):
        pred = pred.labels
    if isinstance(gt, LabelMap):
        ignore_index, gt = gt.ignore_index, gt.labels
    return report_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index))


# ----------------------------------------------------------------------
# dataset evaluation and sweeps
# ----------------------------------------------------------------------

@dataclass
class EvalItem:
    image_id: str
    image: np.ndarray
    gt: np.ndarray


def _eval_setup(palette: dict[int, str], mode: str):
    _check_mode(mode)
    if IGNORE_INDEX in palette:
        raise ValueError(f"palette index {IGNORE_INDEX} is reserved for ignore")
    by_name = {v: k for k, v in palette.items()}
    background = by_name.get(BACKGROUND_NAME)
    categories = [palette[k] for k in sorted(palette) if k != background]
    ids = [by_name[c] for c in categories]
    num_classes = max(palette) + 1
    return categories, ids, background, num_classes


def _prepare_gt(gt: np.ndarray, mode: str, background: int | None) -> np.ndarray:
    # labeled-only datasets have no background class: unlabeled pixels are ignored
    if mode == "labeled_only" and background is not None:
        gt = np.where(gt == background, IGNORE_INDEX, gt)
    return gt


def _all_activations(items: Sequence[EvalItem], categories, model, encoders) -> list[np.ndarray]:
    return [activation_maps(it.image, categories, model, encoders) for it in items]


def evaluate(items: Sequence[EvalItem], palette: dict[int, str], model: SynSegModel, encoders: EncoderPair,
             threshold: float = DEFAULT_THRESHOLD, mode: str = "with_background") -> IoUReport:
    """mIoU over a labelled image set, querying every palette category on every image."""
    return sweep_reports(items, palette, model, encoders, [threshold], mode)[0][0]


def sweep_reports(items, palette, model, encoders, thresholds, mode):
    """(IoUReport, per-category mask area) for each threshold; activations computed once."""
    thresholds = [_check_threshold(t) for t in thresholds]
    categories, ids, background, num_classes = _eval_setup(palette, mode)
    bg = 0 if background is None else background
    acts = _all_activations(items, categories, model, encoders)
    out = []
    for t in thresholds:
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        area = {c: 0 for c in categories}
        for it, act in zip(items, acts):
            if act.shape[1:] != it.gt.shape:
                raise ValueError(f"{it.image_id}: image {act.shape[1:]} and ground truth {it.gt.shape} differ in size")
            pred = combine(act, t, mode, ids, bg)
            conf += confusion_matrix(pred, _prepare_gt(it.gt, mode, background), num_classes)
            for i, c in enumerate(categories):
                area[c] += int((act[i] >= t).sum())
        out.append((report_from_confusion(conf), area))
    return out


@dataclass
class SweepRow:
    threshold: float
    miou: float
    mask_area: dict[str, int]


def _check_thresholds(thresholds: Sequence[float]) -> list[float]:
    ts = [_check_threshold(t) for t in thresholds]
    if not ts:
        raise ValueError("at least one threshold is required")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("thresholds must be strictly ascending")
    return ts


def threshold_sweep(items: Sequence[EvalItem], palette: dict[int, str], model: SynSegModel,
                    encoders: EncoderPair, thresholds: Sequence[float] = DEFAULT_SWEEP,
                    mode: str = "with_background", csv_path: str | Path | None = None,
                    echo: dict | None = None) -> list[SweepRow]:
    ts = _check_thresholds(thresholds)
    rows = [SweepRow(t, rep.miou, area) for t, (rep, area) in
            zip(ts, sweep_reports(items, palette, model, encoders, ts, mode))]
    if csv_path is not None:
        write_csv(csv_path, sweep_table(rows), echo={"mode": mode, **(echo or {})})
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> list[dict]:
    return [{"threshold": f"{r.threshold:g}", "miou": f"{r.miou:.6f}",
             **{f"area_{c}": a for c, a in r.mask_area.items()}} for r in rows]


def write_csv(path: str | Path, rows: Sequence[dict], echo: dict | None = None) -> None:
    """CSV with a leading ``# config: {...}`` comment line, then a header row."""
    buf = io.StringIO()
    if echo is not None:
        buf.write("# config: " + json.dumps(echo, sort_keys=True) + "\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[dict | None, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    echo = None
    if lines and lines[0].startswith("# config: "):
        echo = json.loads(lines[0][len("# config: "):])
        lines = lines[1:]
    return echo, list(csv.DictReader(lines))


# ----------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------

# row order: full objective, then drop sep, back, cont, align
ABLATION_ROWS = (
    ("all", None),
    ("no_sep", "sep"),
    ("no_back", "back"),
    ("no_cont", "cont"),
    ("no_align", "align"),
)


@dataclass
class AblationRow:
    name: str
    weights: LossWeights
    initial_total: float
    final_total: float
    miou: float
    recombination_error: float
    log: list[dict] = field(default_factory=list, repr=False)

    def enabled(self, term: str) -> bool:
        return getattr(self.weights, term) != 0


def recombination_error(records: Sequence[dict], weights: LossWeights) -> float:
    """Largest |logged total - sum of weighted logged terms| over step records."""
    worst = 0.0
    for r in records:
        if r.get("type") not in ("step", "final"):
            continue
        worst = max(worst, abs(r["total"] - sum(getattr(weights, k) * r[k] for k in TERMS)))
        for p in r.get("per_image", []):
            worst = max(worst, abs(p["total"] - sum(getattr(weights, k) * p[k] for k in TERMS)))
    return worst


def run_ablation(base_config, train_data, eval_items: Sequence[EvalItem], palette: dict[int, str],
                 threshold: float = DEFAULT_THRESHOLD, mode: str = "with_background",
                 out_dir: str | Path | None = None) -> list[AblationRow]:
    """Train and evaluate the full objective and each single-term-off variant.

    ``train_data`` is a manifest or a list of samples (see ``training.train``).
    With ``out_dir`` each run's loss log is kept as ``<row>.loss.jsonl``.
    """
    from .training import train

    rows = []
    for name, dropped in ABLATION_ROWS:
        weights = base_config.loss_weights if dropped is None else replace(base_config.loss_weights, **{dropped: 0.0})
        cfg = replace(base_config, loss_weights=weights)
        log_path = Path(out_dir) / f"{name}.loss.jsonl" if out_dir is not None else None
        result = train(cfg, train_data, log_path=log_path, echo={"ablation": name})
        records = [{"type": "step", "total": r.total, **r.terms(), "per_image": r.per_image} for r in result.history]
        if result.final is not None:
            records.append({"type": "final", "total": result.final.total, **result.final.terms(),
                            "per_image": result.final.per_image})
        if log_path is not None:
            records = [json.loads(x) for x in log_path.read_text(encoding="utf-8").splitlines()]
        rep = evaluate(eval_items, palette, result.model, result.encoders, threshold, mode)
        initial = result.history[0].total if result.history else float("nan")
        final = result.final.total if result.final is not None else float("nan")
        rows.append(AblationRow(name, weights, initial, final, rep.miou, recombination_error(records, weights),
                                records))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> list[dict]:
    return [{"row": r.name, **{t: "yes" if r.enabled(t) else "no" for t in TERMS},
             "initial_total": f"{r.initial_total:.6f}", "final_total": f"{r.final_total:.6f}",
             "miou": f"{r.miou:.6f}", "recombination_error": f"{r.recombination_error:.3g}"} for r in rows]


def ablation_ordering_flag(rows: Sequence[AblationRow]) -> str | None:
    """Message if some leave-one-out row beats the full objective, else None."""
    full = next(r for r in rows if r.name == "all")
    better = [r.name for r in rows if r.name != "all" and r.miou > full.miou]
    if better:
        return f"full objective ({full.miou:.4f}) is outscored by: " + ", ".join(
            f"{r.name} ({r.miou:.4f})" for r in rows if r.name in better)
    return None


# ----------------------------------------------------------------------
# overlays
# ----------------------------------------------------------------------

def render_overlay(image: np.ndarray, result: SegmentationResult, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """uint8 RGB: masks tinted over the image in category order, legend strip below."""
    base = np.asarray(image, dtype=np.float64)
    if base.max() > 1.0:
        base = base / 255.0
    img = np.round(np.clip(base, 0.0, 1.0) * 255.0)
    for i, c in enumerate(result.categories):
        m = result.masks[c]
        tint = TINTS[i % len(TINTS)] * 255.0
        img[m] = np.round((1.0 - alpha) * img[m] + alpha * tint)
    h, w = img.shape[:2]
    legend = np.full((LEGEND_HEIGHT, w, 3), 255.0)
    pad = (LEGEND_HEIGHT - LEGEND_BLOCK) // 2
    for i in range(len(result.categories)):
        x0 = pad + i * (LEGEND_BLOCK + pad)
        if x0 >= w:
            break
        legend[pad:pad + LEGEND_BLOCK, x0:min(x0 + LEGEND_BLOCK, w)] = TINTS[i % len(TINTS)] * 255.0
    return np.concatenate([img, legend], axis=0).astype(np.uint8)


def export_overlay(image: np.ndarray, result: SegmentationResult, path: str | Path,
                   alpha: float = OVERLAY_ALPHA) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    Image.fromarray(render_overlay(image, result, alpha)).save(path, format="PNG")
    return path
