import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from synseg.cli import build_parser, main
from synseg.inference import read_csv

FIXTURES = Path(__file__).parent / "fixtures"
FAST = ["--epochs", "2", "--batch-size", "4", "--learning-rate", "0.02"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--n-images", "4"]) == 0
    return root


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck") / "m.ckpt"
    assert main(["train", "--manifest", str(data / "manifest.jsonl"), "--out", str(out), *FAST]) == 0
    return out


def _eval_args(data):
    return ["--images", str(data / "images"), "--gt", str(data / "gt"), "--palette", str(data / "palette.json")]


# -- mine ---------------------------------------------------------------------

def test_mine_golden(tmp_path, capsys):
    out = tmp_path / "o.jsonl"
    assert main(["mine", "--input", str(FIXTURES / "captions20.tsv"), "--output", str(out)]) == 0
    assert out.read_bytes() == (FIXTURES / "captions20.golden.jsonl").read_bytes()
    meta = json.loads(Path(str(out) + ".meta.json").read_text())
    assert meta["counts"]["read"] == 20 and "southwest" in meta["exclusion"]
    assert json.loads(capsys.readouterr().out)["mined"]["read"] == 20


def test_mine_missing_file(tmp_path, capsys):
    missing = tmp_path / "absent.tsv"
    assert main(["mine", "--input", str(missing), "--output", str(tmp_path / "o.jsonl")]) == 2
    assert "absent.tsv" in capsys.readouterr().err


def test_mine_empty_input(tmp_path):
    src = tmp_path / "e.tsv"
    src.write_text("")
    assert main(["mine", "--input", str(src), "--output", str(tmp_path / "o.jsonl")]) == 0
    assert (tmp_path / "o.jsonl").read_text() == ""


# -- train --------------------------------------------------------------------

def test_train_twice_identical(data, tmp_path):
    for tag in "ab":
        assert main(["train", "--manifest", str(data / "manifest.jsonl"), "--out", str(tmp_path / f"{tag}.ckpt"),
                     "--seed", "42", *FAST]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt.loss.jsonl").read_bytes() == (tmp_path / "b.ckpt.loss.jsonl").read_bytes()


def test_train_echoes_config(data, ckpt):
    header = json.loads(Path(str(ckpt) + ".loss.jsonl").read_text().splitlines()[0])
    assert header["type"] == "config"
    assert header["config"]["epochs"] == 2 and header["seed"] == 42
    assert len(header["manifest_sha256"]) == 64


def test_train_epochs_zero(data, tmp_path):
    from synseg.checkpoint import load_checkpoint
    from synseg.training import TrainConfig, build_model

    assert main(["train", "--manifest", str(data / "manifest.jsonl"), "--out", str(tmp_path / "z.ckpt"),
                 "--epochs", "0"]) == 0
    init, _ = build_model(TrainConfig())
    saved = load_checkpoint(tmp_path / "z.ckpt").tensors
    assert all(saved[k].tobytes() == v.tobytes() for k, v in init.state_dict().items())


def test_seed_precedence(data, tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "epochs": 0, "model": {"depth": 1}}))
    base = ["train", "--manifest", str(data / "manifest.jsonl"), "--config", str(cfg)]

    def seed_of(extra):
        out = tmp_path / "s.ckpt"
        assert main(base + ["--out", str(out)] + extra) == 0
        summary = json.loads(capsys.readouterr().out)
        return summary["seed"], summary["provenance"]["seed"]

    monkeypatch.delenv("SYNSEG_SEED", raising=False)
    assert seed_of([]) == (5, "file")
    monkeypatch.setenv("SYNSEG_SEED", "7")
    assert seed_of([]) == (7, "env")
    assert seed_of(["--seed", "9"]) == (9, "flag")
    header = json.loads((tmp_path / "s.ckpt.loss.jsonl").read_text().splitlines()[0])
    assert header["seed"] == 9 and header["config"]["model"]["depth"] == 1


@pytest.mark.parametrize("body", ['{"epochs": -1}', '{"nonsense": 1}', "[1, 2]", "{bad json"])
def test_train_bad_config_exit_2(data, tmp_path, body):
    cfg = tmp_path / "c.json"
    cfg.write_text(body)
    assert main(["train", "--manifest", str(data / "manifest.jsonl"), "--config", str(cfg),
                 "--out", str(tmp_path / "m.ckpt")]) == 2


def test_train_bad_manifest_exit_2(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text("not json\n")
    assert main(["train", "--manifest", str(m), "--out", str(tmp_path / "m.ckpt")]) == 2
    assert main(["train", "--manifest", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "m.ckpt")]) == 2


def test_train_non_finite_exit_3(data, tmp_path):
    with np.errstate(all="ignore"):
        code = main(["train", "--manifest", str(data / "manifest.jsonl"), "--out", str(tmp_path / "m.ckpt"),
                     "--epochs", "3", "--batch-size", "2", "--learning-rate", "1e30"])
    assert code == 3
    assert not (tmp_path / "m.ckpt").exists()


# -- segment --------------------------------------------------------------------

@pytest.mark.parametrize("t", ["0", "1", "1.5", "-0.2"])
def test_segment_threshold_exit_2(ckpt, data, tmp_path, t):
    img = data / "images" / "syn000.png"
    assert main(["segment", "--ckpt", str(ckpt), "--image", str(img), "--categories", "red",
                 "--threshold", t, "--out-dir", str(tmp_path)]) == 2


def test_segment_writes_masks_and_overlay(ckpt, data, tmp_path):
    img = data / "images" / "syn000.png"
    args = ["segment", "--ckpt", str(ckpt), "--image", str(img), "--categories", "red,blue",
            "--out-dir", str(tmp_path)]
    assert main(args + ["--overlay", str(tmp_path / "o1.png")]) == 0
    assert main(args + ["--overlay", str(tmp_path / "o2.png")]) == 0
    assert (tmp_path / "o1.png").read_bytes() == (tmp_path / "o2.png").read_bytes()
    mask = np.asarray(Image.open(tmp_path / "syn000.mask0.png"))
    assert mask.shape == (32, 32)
    echo = json.loads((tmp_path / "syn000.segment.json").read_text())
    assert echo["categories"] == ["red", "blue"] and echo["config"]["seed"] == 42


def test_segment_unreadable_inputs(ckpt, tmp_path):
    bogus = tmp_path / "x.png"
    bogus.write_bytes(b"not a png")
    assert main(["segment", "--ckpt", str(ckpt), "--image", str(bogus), "--categories", "red"]) == 2
    assert main(["segment", "--ckpt", str(bogus), "--image", str(bogus), "--categories", "red"]) == 2


# -- eval / sweep / ablate ------------------------------------------------------

def test_eval_pred_equals_gt(data, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["eval", "--pred", str(data / "gt"), *_eval_args(data), "--report", str(report)]) == 0
    assert json.loads(report.read_text())["miou"] == 1.0
    assert json.loads(capsys.readouterr().out)["miou"] == 1.0


def test_eval_with_model(ckpt, data, tmp_path):
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(ckpt), *_eval_args(data), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert 0.0 <= rep["miou"] <= 1.0 and rep["config"]["epochs"] == 2


def test_eval_mismatched_pairs_exit_2(ckpt, data, tmp_path):
    gt = tmp_path / "gt"
    shutil.copytree(data / "gt", gt)
    (gt / "syn000.png").unlink()
    args = ["--images", str(data / "images"), "--gt", str(gt), "--palette", str(data / "palette.json")]
    assert main(["eval", "--ckpt", str(ckpt), *args]) == 2
    assert main(["eval", *args]) == 2  # neither --ckpt nor --pred


def test_sweep_rows(ckpt, data, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--ckpt", str(ckpt), *_eval_args(data), "--out", str(out)]) == 0
    echo, rows = read_csv(out)
    assert [r["threshold"] for r in rows] == ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6"]
    assert echo["config"]["epochs"] == 2
    assert main(["sweep", "--ckpt", str(ckpt), *_eval_args(data), "--out", str(out),
                 "--thresholds", "0.5,0.2"]) == 2


def test_ablate_five_rows(data, tmp_path):
    out = tmp_path / "a.csv"
    assert main(["ablate", "--manifest", str(data / "manifest.jsonl"), *_eval_args(data), "--out", str(out),
                 "--log-dir", str(tmp_path / "logs"), "--epochs", "1", "--batch-size", "4"]) == 0
    echo, rows = read_csv(out)
    assert [r["row"] for r in rows] == ["all", "no_sep", "no_back", "no_cont", "no_align"]
    assert echo["config"]["epochs"] == 1
    assert len(list((tmp_path / "logs").glob("*.loss.jsonl"))) == 5


# -- help -----------------------------------------------------------------------

def _subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


@pytest.mark.parametrize("cmd", ["mine", "synth", "train", "segment", "eval", "sweep", "ablate"])
def test_help_lists_every_flag_with_default(cmd):
    sub = _subparsers()[cmd]
    text = sub.format_help()
    for action in sub._actions:
        if not action.option_strings or action.dest == "help":
            continue
        assert action.option_strings[-1] in text
        if not action.required:
            assert action.help and "%(default)" not in action.help
    opts = [a for a in sub._actions if a.option_strings and a.dest != "help" and not a.required]
    assert text.count("(default:") >= len(opts)


def test_console_script_help():
    exe = shutil.which("synseg")
    cmd = [exe] if exe else [sys.executable, "-m", "synseg.cli"]
    res = subprocess.run(cmd + ["train", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "--learning-rate" in res.stdout and "default" in res.stdout


def test_unknown_command_exit_2():
    assert main(["frobnicate"]) == 2
