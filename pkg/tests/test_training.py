import json
from pathlib import Path

import numpy as np
import pytest

from synseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from synseg.fss import ModelConfig
from synseg.mccl import TERMS, LossWeights
from synseg.synthetic import make_dataset, training_samples, write_dataset
from synseg.training import (
    DatasetManifest,
    ManifestError,
    ManifestRecord,
    NonFiniteLossError,
    Sample,
    TrainConfig,
    build_batches,
    build_model,
    cap_categories,
    load_manifest,
    load_model,
    save_model,
    sgd_update,
    train,
    train_step,
    with_loss_weights,
)

SMALL = dict(model=ModelConfig(depth=1, heads=2, ffn_mult=2), batch_size=4, learning_rate=0.02)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def samples():
    return training_samples(make_dataset(6, 32, seed=1))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return write_dataset(root, make_dataset(10, 32, seed=2))


def _fake_manifest(n, n_cats=1):
    recs = [ManifestRecord(f"img{i:02d}.png", tuple(f"c{j}" for j in range(n_cats))) for i in range(n)]
    return DatasetManifest(recs, Path("/nonexistent"))


def _loader(path):
    return np.zeros((32, 32, 3), np.float32)


# -- config ---------------------------------------------------------------

def test_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.batch_size, c.epochs, c.seed) == (1e-5, 1e-4, 128, 1, 42)
    assert c.max_categories_per_image == 8
    assert c.loss_weights.as_tuple() == (1.0, 1.0, 10.0, 1.0)
    assert TrainConfig.desk().batch_size == 8


@pytest.mark.parametrize("field,value", [
    ("learning_rate", -1.0), ("weight_decay", float("nan")), ("batch_size", 0), ("epochs", -1),
    ("max_categories_per_image", 0),
])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        TrainConfig(**{field: value})


def test_config_dict_round_trip():
    c = small(loss_weights=LossWeights(1, 2, 3, 4))
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


# -- manifest and batches ---------------------------------------------------

def test_load_manifest(dataset):
    m = load_manifest(dataset["manifest"])
    assert len(m) == 10
    assert m.root == dataset["root"]
    assert m.resolve(m.records[0]).is_file()


@pytest.mark.parametrize("line,msg", [
    ("not json", "invalid JSON"),
    ('{"categories": ["a"]}', "image_path"),
    ('{"image_path": "a.png", "categories": "a"}', "list of strings"),
    ('{"image_path": "a.png", "categories": ["  "]}', "no categories"),
])
def test_manifest_errors_report_line(tmp_path, line, msg):
    p = tmp_path / "m.jsonl"
    p.write_text('{"image_path": "ok.png", "categories": ["a"]}\n' + line + "\n")
    with pytest.raises(ManifestError, match=rf":2: .*{msg}"):
        load_manifest(p)


def test_manifest_dedupes_categories(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"image_path": "a.png", "categories": ["dog", "cat", "dog"]}\n')
    assert load_manifest(p).records[0].categories == ("dog", "cat")


def test_batches_deterministic():
    m = _fake_manifest(10)
    a = build_batches(m, small(), loader=_loader)
    b = build_batches(m, small(), loader=_loader)
    assert [[s.image_id for s in bt] for bt in a.batches] == [[s.image_id for s in bt] for bt in b.batches]
    c = build_batches(m, small(), seed=7, loader=_loader)
    assert [s.image_id for bt in c.batches for s in bt] != [s.image_id for bt in a.batches for s in bt]


def test_batch_sizes():
    plan = build_batches(_fake_manifest(10), small(batch_size=4), loader=_loader)
    assert [len(b) for b in plan.batches] == [4, 4, 2]
    assert sorted(s.image_id for b in plan.batches for s in b) == [f"img{i:02d}" for i in range(10)]


def test_category_cap():
    plan = build_batches(_fake_manifest(3, n_cats=12), small(max_categories_per_image=8), loader=_loader)
    for b in plan.batches:
        for s in b:
            assert len(s.categories) == 8 and len(set(s.categories)) == 8
    uncapped = build_batches(_fake_manifest(1, n_cats=12), small(max_categories_per_image=None), loader=_loader)
    assert len(uncapped.batches[0][0].categories) == 12


def test_cap_preserves_order(rng):
    cats = [f"c{i}" for i in range(12)]
    kept = cap_categories(cats, 5, rng)
    assert kept == sorted(kept, key=cats.index)
    assert cap_categories(["a", "b", "a"], 8, rng) == ["a", "b"]


def test_unreadable_image_skipped(dataset, tmp_path):
    lines = dataset["manifest"].read_text().splitlines()
    lines.append(json.dumps({"image_path": "images/missing.png", "categories": ["red"]}))
    p = dataset["root"] / "with_missing.jsonl"
    p.write_text("\n".join(lines) + "\n")
    plan = build_batches(load_manifest(p), small())
    assert plan.n_samples == 10
    assert len(plan.skipped) == 1 and plan.skipped[0][0].endswith("missing.png")


def test_empty_manifest_rejected():
    with pytest.raises(ManifestError):
        build_batches(DatasetManifest([]), small())


# -- optimisation -----------------------------------------------------------

def _snapshot(module):
    return {k: v.tobytes() for k, v in module.state_dict().items()}


def test_lr_zero_leaves_parameters(samples):
    model, enc = build_model(small(learning_rate=0.0, weight_decay=0.5))
    before = _snapshot(model)
    report = train_step(samples[:4], model, enc, small(learning_rate=0.0, weight_decay=0.5))
    assert np.isfinite(report.total)
    assert _snapshot(model) == before


def test_one_step_changes_every_trainable_module(samples):
    cfg = small()
    model, enc = build_model(cfg)
    enc_before = {k: v.tobytes() for k, v in enc.tensors().items()}
    before = _snapshot(model)
    train_step(samples[:4], model, enc, cfg)
    after = _snapshot(model)
    changed = {k.split(".")[0] for k in before if before[k] != after[k]}
    assert changed == {"film", "decoder", "projector"}
    assert {k: v.tobytes() for k, v in enc.tensors().items()} == enc_before


def test_weight_decay_skips_biases_and_beta():
    model, _ = build_model(small())
    for p in model.parameters():
        p.data = np.ones_like(p.data)
        p.zero_grad()
    sgd_update(model, lr=1.0, weight_decay=0.1)
    for name, p in model.named_parameters():
        exempt = name.endswith(".bias") or name.startswith("film.beta.")
        expected = 1.0 if exempt else 0.9
        assert np.allclose(p.data, expected), name
    sgd_update(model, lr=1.0, weight_decay=0.1, decay_bias=True)
    assert np.allclose(model.film.beta.weight.data, 0.9)


def test_non_finite_loss_names_image(samples):
    cfg = small()
    model, enc = build_model(cfg)
    before = _snapshot(model)
    bad = Sample("poison", np.full((32, 32, 3), np.nan, np.float32), ["red"])
    with pytest.raises(NonFiniteLossError) as info:
        train_step([samples[0], bad], model, enc, cfg)
    assert info.value.image_ids == ["poison"]
    assert _snapshot(model) == before


# -- full runs ----------------------------------------------------------------

def test_train_is_deterministic(dataset, tmp_path):
    m = load_manifest(dataset["manifest"])
    cfg = small(epochs=2)
    for tag in "ab":
        train(cfg, m, tmp_path / f"{tag}.ckpt", tmp_path / f"{tag}.jsonl")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_log_structure_and_recombination(dataset, tmp_path):
    cfg = small(epochs=2, loss_weights=LossWeights(1.0, 0.5, 10.0, 2.0))
    res = train(cfg, load_manifest(dataset["manifest"]), log_path=tmp_path / "log.jsonl", echo={"note": "x"})
    recs = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert recs[0]["type"] == "config" and recs[0]["seed"] == 42 and recs[0]["note"] == "x"
    assert TrainConfig.from_dict(recs[0]["config"]) == cfg
    steps = [r for r in recs if r["type"] == "step"]
    assert len(steps) == res.steps == 2 * 3  # 10 images, batch 4
    assert [r["step"] for r in steps] == list(range(6))
    assert recs[-1]["type"] == "final"
    for r in steps + recs[-1:]:
        assert abs(r["total"] - cfg.loss_weights.combine(r)) <= 1e-6
        for p in r["per_image"]:
            assert abs(p["total"] - cfg.loss_weights.combine(p)) <= 1e-5 * max(1.0, abs(p["total"]))
        assert len(r["per_image"]) == len(r["image_ids"])


def test_epochs_zero_equals_init(tmp_path, samples):
    cfg = small(epochs=0)
    res = train(cfg, samples, tmp_path / "m.ckpt")
    assert res.steps == 0 and res.final is None
    init, _ = build_model(cfg)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert {k: v.tobytes() for k, v in ck.tensors.items()} == _snapshot(init)


def test_checkpoint_round_trip(tmp_path, samples):
    cfg = small(epochs=1)
    res = train(cfg, samples, tmp_path / "m.ckpt")
    loaded = load_model(tmp_path / "m.ckpt")
    assert loaded.config == cfg
    assert loaded.steps == res.steps == loaded.model.steps_trained
    assert _snapshot(loaded.model) == _snapshot(res.model)
    assert set(load_checkpoint(tmp_path / "m.ckpt").tensors) == {n for n, _ in res.model.named_parameters()}
    assert load_checkpoint(tmp_path / "m.ckpt").meta["loss_tail"][-1]["total"] == res.history[-1].total


def test_load_model_rejects_foreign_and_incomplete(tmp_path, samples):
    save_checkpoint(tmp_path / "enc.ckpt", {"x": np.zeros(2)}, {"kind": "encoder_weights"})
    with pytest.raises(CheckpointError, match="kind"):
        load_model(tmp_path / "enc.ckpt")
    cfg = small()
    model, _ = build_model(cfg)
    save_model(tmp_path / "m.ckpt", model, cfg)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    dropped = sorted(ck.tensors)[0]
    del ck.tensors[dropped]
    save_checkpoint(tmp_path / "partial.ckpt", ck.tensors, ck.meta)
    with pytest.raises(CheckpointError, match=dropped):
        load_model(tmp_path / "partial.ckpt")


def test_failed_run_writes_nothing(tmp_path, samples):
    bad = Sample("poison", np.full((32, 32, 3), np.nan, np.float32), ["red"])
    with pytest.raises(NonFiniteLossError):
        train(small(epochs=1), [*samples[:2], bad], tmp_path / "m.ckpt", tmp_path / "m.jsonl")
    assert list(tmp_path.iterdir()) == []


def test_loss_weight_override():
    c = with_loss_weights(small(), back=0.0)
    assert c.loss_weights.as_tuple() == (1.0, 1.0, 0.0, 1.0)
    assert set(TERMS) == {"align", "cont", "back", "sep"}
