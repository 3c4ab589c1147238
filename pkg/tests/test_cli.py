import json

import numpy as np
import pytest

from shapeletrf.cli import main
from shapeletrf.signal import Dataset, save_dataset

from .conftest import tiny_model_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, **train):
    model = tiny_model_config(class_count=2).to_dict()
    doc = {
        "synth": {"devices": 3, "frames_per_cell": 12, "source_domains": 1, "target_domains": 1, "seed": 4},
        "train": {"lr": 0.01, "max_epochs": 15, "batch_size": 8, "model": model, **train},
        "split": [0.5, 0.25, 0.25],
    }
    path.write_text(json.dumps(doc))
    return path


def test_inspect_bert_base_ratio(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", tmp_path, "inspect", "--preset", "bert-base")
    assert code == 0
    doc = json.loads((tmp_path / "inspect.json").read_text())
    assert 0.005 <= doc["trainable_ratio"] <= 0.012
    assert "attention_weights" in out and "frozen" in out


def test_inspect_all_frozen(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", tmp_path, "inspect", "--preset", "desk", "--trainable", "")
    assert code == 0 and "(0.000%)" in out
    assert json.loads((tmp_path / "inspect.json").read_text())["trainable_ratio"] == 0.0


def test_errors_are_one_line_and_nonzero(capsys, tmp_path):
    code, out, err = run(capsys, "--config", tmp_path / "absent.json", "inspect")
    assert code == 1 and err.count("\n") == 1 and "not found" in err
    (tmp_path / "bad.json").write_text("{not json")
    code, _, err = run(capsys, "--config", tmp_path / "bad.json", "synth")
    assert code == 1 and "invalid JSON" in err
    (tmp_path / "unk.json").write_text(json.dumps({"bogus": 1}))
    code, _, err = run(capsys, "--config", tmp_path / "unk.json", "synth")
    assert code == 1 and err.count("\n") == 1
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--data", tmp_path / "none.json")
    assert code == 1 and err.count("\n") == 1


def test_synth_is_idempotent(capsys, tmp_path):
    cfg = write_config(tmp_path / "c.json")
    for d in ("a", "b"):
        assert run(capsys, "--config", cfg, "--out", tmp_path / d, "synth")[0] == 0
    assert (tmp_path / "a" / "dataset.f32").read_bytes() == (tmp_path / "b" / "dataset.f32").read_bytes()
    doc = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert doc["total_frames"] == 3 * 2 * 12
    run(capsys, "--config", cfg, "--seed", 5, "--out", tmp_path / "c", "synth")
    assert (tmp_path / "c" / "dataset.f32").read_bytes() != (tmp_path / "a" / "dataset.f32").read_bytes()


def test_gradcheck_small(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", tmp_path, "gradcheck", "--preset", "desk", "--repeats", 1,
                       "--max-coords", 2)
    assert code == 0 and "total_loss" in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max"] <= 1e-4


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Constant-amplitude two-class toy trained through the CLI."""
    root = tmp_path_factory.mktemp("toy")
    n = 24
    frames = np.concatenate([np.full((n, 2, 256), 0.5), np.full((n, 2, 256), 2.0)])
    data = Dataset(frames, np.repeat([0, 1], n), np.zeros(2 * n, dtype=int), 2, ["toy"])
    save_dataset(data, root / "toy.json")
    cfg = write_config(root / "c.json")
    assert main(["--config", str(cfg), "--out", str(root / "run"), "train", "--data", str(root / "toy.json")]) == 0
    return root


def test_train_outputs_and_eval_overfits(capsys, toy_run):
    run_dir = toy_run / "run"
    assert {"final.ckpt", "best.ckpt", "train_log.jsonl", "config.json"} <= {p.name for p in run_dir.iterdir()}
    log = [json.loads(line) for line in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert {"epoch", "L_cls", "L_spr", "L_div", "val_acc"} <= set(log[0])
    code, out, _ = run(capsys, "--out", toy_run / "ev", "eval", "--checkpoint", run_dir / "final.ckpt",
                       "--data", toy_run / "toy.json")
    assert code == 0
    assert json.loads((toy_run / "ev" / "eval.json").read_text())["toy"]["accuracy"] >= 0.99


def test_fewshot_explain_faithfulness_inspect(capsys, toy_run):
    ck, data, out = toy_run / "run" / "final.ckpt", toy_run / "toy.json", toy_run / "o"
    code, text, _ = run(capsys, "--out", out, "--seed", 3, "fewshot", "--checkpoint", ck, "--data", data,
                        "--n-shot", 1, "--n-query", 5, "--repeats", 4)
    assert code == 0 and "toy" in text
    assert json.loads((out / "fewshot_1shot.json").read_text())["toy"]["repeats"] == 4
    code, text, _ = run(capsys, "--out", out, "explain", "--checkpoint", ck, "--data", data, "--frame-id", 3,
                        "--top-k", 2, "--format", "svg")
    assert code == 0 and (out / "explain_3.svg").exists()
    code, _, err = run(capsys, "--out", out, "explain", "--checkpoint", ck, "--data", data, "--frame-id", 999)
    assert code == 1 and "frame id" in err
    code, text, _ = run(capsys, "--out", out, "faithfulness", "--checkpoint", ck, "--data", data, "--lengths", "4,8")
    assert code == 0 and set(json.loads((out / "faithfulness.json").read_text())["lengths"]) == {"4", "8"}
    code, text, _ = run(capsys, "--out", out, "inspect", "--checkpoint", ck)
    assert code == 0 and "shapelets.banks.0" in text and "blocks.0.w_qkv" in text
