import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import TINY

from dacvlm import autodiff as ad
from dacvlm.checkpoint import read_checkpoint, write_checkpoint
from dacvlm.cli import RunManifest, main
from dacvlm.model import VLModel, make_batch, save_checkpoint
from dacvlm.optim import AdamW
from dacvlm.synth import make_sample, write_corpus

CFG = {"model": dict(TINY), "base_steps": 10, "base_lr": 1e-2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.json").write_text(json.dumps(CFG))
    mix = json.dumps({"caption": 1, "qa": 1, "text_only": 2})
    assert main(["datagen", "--n", "60", "--seed", "3", "--canvas", "64", "64", "--mix", mix, "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--config", str(root / "run.json"), "--out", str(root / "base")]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_datagen_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert run("datagen", "--n", 100, "--seed", 7, "--canvas", 64, 64, "--out", tmp_path / d) == 0
    assert (tmp_path / "a/corpus.jsonl").read_bytes() == (tmp_path / "b/corpus.jsonl").read_bytes()
    ma = json.loads((tmp_path / "a/manifest.json").read_text())
    mb = json.loads((tmp_path / "b/manifest.json").read_text())
    assert ma["content_hash"] == mb["content_hash"]
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["corpus.jsonl", "images", "manifest.json"]


def test_datagen_zero(tmp_path):
    assert run("datagen", "--n", 0, "--out", tmp_path) == 0
    assert (tmp_path / "corpus.jsonl").read_text() == ""
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "datagen" and man["outputs"] == ["corpus.jsonl"]


def test_usage_errors(tmp_path, capsys):
    assert run("datagen", "--n", 5) == 2
    assert run("datagen", "--n", -1, "--out", tmp_path) == 2
    assert run("datagen", "--n", 1, "--mix", '{"poems": 1}', "--out", tmp_path) == 2
    assert run("bogus") == 2


def test_pretrain_layout(workspace):
    base = workspace / "base"
    assert (base / "checkpoints/base.ckpt").exists()
    rows = (base / "metrics/base.jsonl").read_text().splitlines()
    assert len(rows) == CFG["base_steps"]
    assert read_checkpoint(base / "checkpoints/base.ckpt").variant == "dense"


def test_train_stage_one_keeps_text_layers(workspace, tmp_path):
    base = workspace / "base/checkpoints/base.ckpt"
    code = run("train", "--stage", 1, "--base-ckpt", base, "--data", workspace / "data",
               "--config", workspace / "run.json", "--steps", 3, "--batch-size", 2, "--out", tmp_path)
    assert code == 0
    assert run("drift", "--before", base, "--after", tmp_path / "checkpoints/stage_1.ckpt", "--out", tmp_path / "d") == 0
    with (tmp_path / "d/reports/drift.csv").open() as fh:
        assert all(float(r["mean_abs_delta"]) == 0.0 for r in csv.DictReader(fh))
    rows = [json.loads(x) for x in (tmp_path / "metrics/stage_1.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2]


def test_train_all_stages(workspace, tmp_path):
    code = run("train", "--stage", "all", "--base-ckpt", workspace / "base/checkpoints/base.ckpt",
               "--data", workspace / "data", "--steps", 2, "--batch-size", 2, "--seed", 1, "--out", tmp_path)
    assert code == 0
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert ckpts == ["stage_1.ckpt", "stage_2.1.ckpt", "stage_2.2.ckpt", "stage_3.ckpt"]
    assert len(list((tmp_path / "metrics").iterdir())) == 4
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 1 and set(man["config"]["stages"]) == {"1", "2.1", "2.2", "3"}


def test_train_rerun_same_outputs(workspace, tmp_path):
    args = ["train", "--stage", "2.1", "--base-ckpt", workspace / "base/checkpoints/base.ckpt",
            "--data", workspace / "data", "--steps", 3, "--batch-size", 2]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for rel in ("checkpoints/stage_2.1.ckpt", "metrics/stage_2.1.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    # rerunning into the same directory replaces rather than appends
    assert run(*args, "--out", tmp_path / "a") == 0
    assert (tmp_path / "a/metrics/stage_2.1.jsonl").read_bytes() == (tmp_path / "b/metrics/stage_2.1.jsonl").read_bytes()


def test_train_errors(workspace, tmp_path, capsys):
    base = workspace / "base/checkpoints/base.ckpt"
    data = workspace / "data"
    assert run("train", "--stage", 5, "--base-ckpt", base, "--data", data, "--out", tmp_path) == 2
    assert "stage" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stages": {"1": {"warmup_ratio": 2}}}))
    assert run("train", "--stage", 1, "--base-ckpt", base, "--data", data, "--config", bad, "--out", tmp_path) == 2
    assert "stages.1.warmup_ratio" in capsys.readouterr().err
    assert run("train", "--stage", 1, "--base-ckpt", tmp_path / "nope.ckpt", "--data", data, "--out", tmp_path) == 4
    assert "nope.ckpt" in capsys.readouterr().err


def test_train_nan_exit_code(workspace, tmp_path):
    ck = read_checkpoint(workspace / "base/checkpoints/base.ckpt")
    ck.tensors["final_ln.gain"] = np.full_like(ck.tensors["final_ln.gain"], np.nan)
    bad = write_checkpoint(ck, tmp_path / "nan.ckpt")
    code = run("train", "--stage", 1, "--base-ckpt", bad, "--data", workspace / "data", "--steps", 2, "--out", tmp_path / "o")
    assert code == 3
    assert (tmp_path / "o/checkpoints/last_good.ckpt").exists()


def test_drift_identical_all_zero(workspace, tmp_path):
    a = workspace / "base/checkpoints/base.ckpt"
    assert run("drift", "--before", a, "--after", a, "--grouping", "layer_index", "--out", tmp_path) == 0
    with (tmp_path / "reports/drift.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["mean_abs_delta"]) == 0.0 for r in rows)
    assert (tmp_path / "reports/drift.jsonl").exists()


def test_missing_checkpoint_is_io_error(tmp_path, capsys):
    assert run("drift", "--before", tmp_path / "x.ckpt", "--after", tmp_path / "x.ckpt", "--out", tmp_path) == 4
    assert "x.ckpt" in capsys.readouterr().err
    assert run("eval", "--ckpt", tmp_path / "y.ckpt", "--data", tmp_path, "--out", tmp_path) == 4


def test_compare_three_variants(workspace, tmp_path):
    code = run("compare", "--variants", "dense,moe_ffn,dac", "--base-ckpt", workspace / "base/checkpoints/base.ckpt",
               "--data", workspace / "data", "--stages", "1,2.1", "--steps", 2, "--batch-size", 2,
               "--eval-data", workspace / "data", "--eval-n", 8, "--out", tmp_path)
    assert code == 0
    rows = [json.loads(x) for x in (tmp_path / "reports/comparison.jsonl").read_text().splitlines()]
    assert list(dict.fromkeys(r["variant"] for r in rows)) == ["dense", "moe_ffn", "dac"]
    final = [r for r in rows if r["metric"] == "final_loss"]
    assert len(final) == 3
    for name in ("comparison.csv", "loss_curves.jsonl", "drift.csv", "drift.jsonl"):
        assert (tmp_path / "reports" / name).exists()


def test_eval_overfit_model_scores_one(tmp_path, tok):
    from dacvlm.model import ModelConfig

    sample = make_sample("qa", 5, canvas=(64, 64))
    model = VLModel(ModelConfig(**dict(TINY, d=32, d_ff=64, variant="dac")), seed=0)
    batch = make_batch([sample], tok)
    opt = AdamW(model.parameters())
    for _ in range(100):
        opt.zero_grad()
        ad.backward(model.loss(batch))
        opt.step(3e-3)
    save_checkpoint(model, tmp_path / "m.ckpt")
    write_corpus([sample], tmp_path / "d")
    assert run("eval", "--ckpt", tmp_path / "m.ckpt", "--data", tmp_path / "d", "--out", tmp_path / "e") == 0
    rows = [json.loads(x) for x in (tmp_path / "e/reports/eval.jsonl").read_text().splitlines()]
    assert {r["metric"]: r["value"] for r in rows}["accuracy_qa"] == 1.0


def test_manifest_hash_ignores_timestamps():
    a = RunManifest("x", {"k": 1}, 0, {"f": "h"}, ["o"], "t0", "t1")
    b = RunManifest("x", {"k": 1}, 0, {"f": "h"}, ["o"], "t2", "t3")
    c = RunManifest("x", {"k": 2}, 0, {"f": "h"}, ["o"], "t0", "t1")
    assert a.content_hash == b.content_hash != c.content_hash


def test_console_script_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dacvlm.cli", "datagen", "--n", "3", "--canvas", "64", "64",
                          "--out", str(tmp_path)], capture_output=True, text=True, env={"DAC_VLM_THREADS": "1", "PATH": ""})
    assert out.returncode == 0, out.stderr
    assert len((tmp_path / "corpus.jsonl").read_text().splitlines()) == 3
