"""Batching, the SGD loop, loss logging and model checkpoints.

Only the FiLM MLP, the decoder and the projector are updated. Encoders are
rebuilt from their config and never touched. Every source of randomness
derives from ``TrainConfig.seed``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoders import EncoderConfig, EncoderPair, build_encoders
from .fss import ModelConfig, SynSegModel, dedupe_categories, forward_features
from .imageio import load_image
from .mccl import TERMS, LossReport, LossWeights, image_losses, weighted_total

CHECKPOINT_KIND = "synseg_model"


class ManifestError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """Raised before any parameter is touched; ``image_ids`` names the culprits."""

    def __init__(self, image_ids: Sequence[str], detail: str = ""):
        self.image_ids = list(image_ids)
        msg = f"non-finite loss for image(s) {', '.join(self.image_ids)}"
        super().__init__(msg + (f": {detail}" if detail else ""))


# ----------------------------------------------------------------------
# config
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 1
    seed: int = 42
    loss_weights: LossWeights = LossWeights()
    encoder: EncoderConfig = EncoderConfig()
    model: ModelConfig = ModelConfig()
    max_categories_per_image: int | None = 8
    decay_bias: bool = False  # True puts biases and FiLM beta under weight decay too

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError(f"weight_decay must be finite and >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_categories_per_image is not None and self.max_categories_per_image < 1:
            raise ValueError("max_categories_per_image must be >= 1 or None")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings for the 8-image synthetic overfit run."""
        base = dict(learning_rate=0.02, batch_size=8, epochs=200)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = self.loss_weights.to_dict()
        d["encoder"] = self.encoder.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        if "loss_weights" in d and isinstance(d["loss_weights"], dict):
            d["loss_weights"] = LossWeights.from_dict(d["loss_weights"])
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# ----------------------------------------------------------------------
# manifest and batches
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    categories: tuple[str, ...]

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path, root: str | Path | None = None) -> DatasetManifest:
    """Read a JSONL manifest of ``{image_path, categories}``.

    ``root`` defaults to the manifest's own directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("image_path"), str):
            raise ManifestError(f"{path}:{lineno}: record needs a string 'image_path'")
        cats = obj.get("categories")
        if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
            raise ManifestError(f"{path}:{lineno}: 'categories' must be a list of strings")
        cats = dedupe_categories(c.strip() for c in cats if c.strip())
        if not cats:
            raise ManifestError(f"{path}:{lineno}: record has no categories")
        records.append(ManifestRecord(obj["image_path"], tuple(cats)))
    return DatasetManifest(records, Path(root) if root is not None else path.parent)


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    categories: list[str]


@dataclass
class BatchPlan:
    batches: list[list[Sample]]
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)

    @property
    def n_samples(self) -> int:
        return sum(len(b) for b in self.batches)


def cap_categories(categories: Sequence[str], cap: int | None, rng: np.random.Generator) -> list[str]:
    """Dedupe, then keep ``cap`` categories chosen by ``rng`` (original order preserved)."""
    cats = dedupe_categories(categories)
    if cap is None or len(cats) <= cap:
        return cats
    keep = np.sort(rng.choice(len(cats), size=cap, replace=False))
    return [cats[i] for i in keep]


def build_batches(manifest: DatasetManifest, config: TrainConfig, seed: int | None = None,
                  loader: Callable[[Path], np.ndarray] | None = None, epoch: int = 0) -> BatchPlan:
    """Seeded shuffle, per-record category cap, fixed-size batches (last may be short).

    Records whose image cannot be read are skipped and listed in ``skipped``.
    """
    if not manifest.records:
        raise ManifestError("manifest is empty")
    seed = config.seed if seed is None else seed
    side = config.encoder.image_side
    loader = loader or (lambda p: load_image(p, side))
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(manifest.records))
    samples, skipped = [], []
    for i in order:
        rec = manifest.records[int(i)]
        cats = cap_categories(rec.categories, config.max_categories_per_image, rng)
        path = manifest.resolve(rec)
        try:
            image = loader(path)
        except (OSError, ValueError) as exc:
            skipped.append((str(path), str(exc) or type(exc).__name__))
            continue
        samples.append(Sample(rec.image_id, image, cats))
    bs = config.batch_size
    return BatchPlan([samples[i:i + bs] for i in range(0, len(samples), bs)], skipped)


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------

def _batch_report(per_image: list[dict], weights: LossWeights, image_ids: list[str],
                  n_cats: list[int]) -> LossReport:
    means = {k: float(np.mean([p[k] for p in per_image])) for k in TERMS}
    return LossReport(**means, total=weights.combine(means), per_image=per_image,
                      n_categories=n_cats, image_ids=image_ids)


def batch_forward(batch: Sequence[Sample], model: SynSegModel, encoders: EncoderPair,
                  weights: LossWeights) -> tuple[list[ad.Tensor], LossReport]:
    """Per-image differentiable totals plus the plain-float report."""
    totals, per_image, ids, n_cats = [], [], [], []
    for s in batch:
        try:
            grid = encoders.encode_image(s.image)
            text = np.stack([encoders.encode_text(c).vector for c in s.categories])
            out = forward_features(grid, text, model, s.categories)
            terms = image_losses(out.pairs.foreground, out.pairs.background, text)
            total = weighted_total(terms, weights)
        except (ad.DegenerateFeatureError, FloatingPointError, ValueError) as exc:
            if isinstance(exc, ad.ShapeError):
                raise
            raise NonFiniteLossError([s.image_id], str(exc)) from exc
        values = {k: terms[k].item() for k in TERMS}
        values["total"] = total.item()
        totals.append(total)
        per_image.append(values)
        ids.append(s.image_id)
        n_cats.append(len(s.categories))
    bad = [i for i, v in zip(ids, per_image) if not all(math.isfinite(x) for x in v.values())]
    if bad:
        raise NonFiniteLossError(bad)
    return totals, _batch_report(per_image, weights, ids, n_cats)


def sgd_update(model: SynSegModel, lr: float, weight_decay: float, decay_bias: bool = False) -> None:
    for p in model.trainable_parameters():
        step = p.grad
        if weight_decay and (p.decay or decay_bias):
            step = step + weight_decay * p.data
        p.data = (p.data - lr * step).astype(p.dtype)


def train_step(batch: Sequence[Sample], model: SynSegModel, encoders: EncoderPair,
               config: TrainConfig) -> LossReport:
    """Forward, backward (batch mean over images) and one SGD update.

    The whole batch is checked for finiteness before anything is updated.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    totals, report = batch_forward(batch, model, encoders, config.loss_weights)
    model.zero_grad()
    for t in totals:
        ad.backward(t, 1.0 / len(totals))
    sgd_update(model, config.learning_rate, config.weight_decay, config.decay_bias)
    return report


def evaluate_loss(batch: Sequence[Sample], model: SynSegModel, encoders: EncoderPair,
                  weights: LossWeights) -> LossReport:
    return batch_forward(batch, model, encoders, weights)[1]


def build_model(config: TrainConfig) -> tuple[SynSegModel, EncoderPair]:
    encoders = build_encoders(config.encoder)
    model = SynSegModel(config.encoder.visual_channels, config.encoder.text_dim, config.model)
    return model, encoders


@dataclass
class TrainResult:
    model: SynSegModel
    encoders: EncoderPair
    config: TrainConfig
    history: list[LossReport]
    final: LossReport | None
    steps: int
    skipped: list[tuple[str, str]]


def _report_record(kind: str, step: int, report: LossReport, epoch: int | None = None) -> dict:
    rec = {"type": kind, "step": step}
    if epoch is not None:
        rec["epoch"] = epoch
    rec.update({k: getattr(report, k) for k in TERMS})
    rec["total"] = report.total
    rec["image_ids"] = report.image_ids
    rec["per_image"] = report.per_image
    return rec


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def train(config: TrainConfig, manifest: DatasetManifest | Iterable[Sample], checkpoint_path: str | Path | None = None,
          log_path: str | Path | None = None, echo: dict | None = None,
          on_step: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Run ``epochs`` passes of SGD; optionally write a checkpoint and a JSONL loss log.

    ``manifest`` may also be an in-memory list of samples (used by the synthetic
    benchmark). After the last update the loss is evaluated once more on the
    first batch and logged as the ``final`` record. Nothing is written until
    training has finished, and both files are replaced atomically.
    """
    model, encoders = build_model(config)
    history: list[LossReport] = []
    skipped: list[tuple[str, str]] = []
    in_memory = not isinstance(manifest, DatasetManifest)
    samples = list(manifest) if in_memory else None
    if in_memory and not samples:
        raise ManifestError("no samples to train on")
    lines = [json.dumps({"type": "config", "config": config.to_dict(), "seed": config.seed, **(echo or {})},
                        sort_keys=True)]
    step = 0
    first_batch = None
    for epoch in range(config.epochs):
        if in_memory:
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(samples))
            shuffled = [Sample(samples[i].image_id, samples[i].image,
                               cap_categories(samples[i].categories, config.max_categories_per_image, rng))
                        for i in order]
            bs = config.batch_size
            batches = [shuffled[i:i + bs] for i in range(0, len(shuffled), bs)]
        else:
            plan = build_batches(manifest, config, epoch=epoch)
            batches = plan.batches
            if epoch == 0:
                skipped = plan.skipped
            if not batches:
                raise ManifestError("no readable images in manifest")
        for batch in batches:
            if first_batch is None:
                first_batch = batch
            report = train_step(batch, model, encoders, config)
            history.append(report)
            lines.append(json.dumps(_report_record("step", step, report, epoch), sort_keys=True))
            if on_step is not None:
                on_step(step, report)
            step += 1
    model.steps_trained = step
    final = None
    if first_batch is not None:
        final = evaluate_loss(first_batch, model, encoders, config.loss_weights)
        lines.append(json.dumps(_report_record("final", step, final), sort_keys=True))
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, config, steps=step, history=history, extra=echo)
    if log_path is not None:
        _atomic_write_text(Path(log_path), "\n".join(lines) + "\n")
    return TrainResult(model, encoders, config, history, final, step, skipped)


# ----------------------------------------------------------------------
# model checkpoints
# ----------------------------------------------------------------------

def save_model(path: str | Path, model: SynSegModel, config: TrainConfig, steps: int = 0,
               history: Sequence[LossReport] = (), extra: dict | None = None, tail: int = 10) -> None:
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": config.to_dict(),
        "steps": steps,
        "loss_tail": [{"total": r.total, **r.terms()} for r in list(history)[-tail:]],
    }
    if extra:
        meta["echo"] = extra
    tensors = {name: p.data for name, p in model.named_parameters() if p.trainable}
    save_checkpoint(path, tensors, meta)


@dataclass
class LoadedModel:
    model: SynSegModel
    encoders: EncoderPair
    config: TrainConfig
    steps: int
    meta: dict


def load_model(path: str | Path) -> LoadedModel:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a model checkpoint (kind={ckpt.meta.get('kind')!r})")
    try:
        config = TrainConfig.from_dict(ckpt.meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config echo ({exc})") from None
    model, encoders = build_model(config)
    try:
        model.load_state_dict(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc.args[0] if exc.args else exc}") from None
    model.steps_trained = int(ckpt.meta.get("steps", 0))
    return LoadedModel(model, encoders, config, model.steps_trained, ckpt.meta)


def with_loss_weights(config: TrainConfig, **weights) -> TrainConfig:
    return replace(config, loss_weights=replace(config.loss_weights, **weights))
