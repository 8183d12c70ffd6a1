import configparser
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from unigraph.cli import build_config, main
from unigraph.data import Dataset, load_checkpoint, synth_sparse_vs_dense, write_tu
from unigraph.graph import permute

FAST = ["--encoder.hidden", "8", "--encoder.layers", "2", "--encoder.random_feature_dim=4", "--train.batch_size", "16"]
SYNTH = "synth:cycles_cliques:20"


def run(capsys, out, *args):
    code = main(["--output-dir", str(out), *args])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def pretrained(tmp_path, capsys):
    assert run(capsys, tmp_path, "kernels", SYNTH)[0] == 0
    ckpt = tmp_path / "pre.ckpt"
    code, out, err = run(capsys, tmp_path, "pretrain", SYNTH, "--epochs", "2", "--checkpoint", str(ckpt), *FAST)
    assert code == 0, err
    return ckpt


# config

def test_build_config_layers(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[encoder]\nhidden = 12\n[train]\nseed = 3\n[loss]\nadaptive = no\nlambda_k = 0.5,0.25,0.25\n")
    cfg = build_config(str(ini), [("encoder.hidden", "16")], seed=7)
    assert cfg.encoder.hidden == 16 and cfg.train.seed == 7
    assert cfg.loss.adaptive is False and cfg.loss.lambda_k == (0.5, 0.25, 0.25)
    assert cfg.cache_dir == os.path.join("runs", "kernels")


@pytest.mark.parametrize("override", [("encoder.bogus", "1"), ("nosection.x", "1"), ("encoder.hidden", "abc"),
                                      ("train.warmup_epochs", "5000")])
def test_build_config_rejects_bad_values(override):
    with pytest.raises(Exception):
        build_config(None, [override])


# kernels

def test_kernels_second_run_is_cache_hit(tmp_path, capsys):
    code, out, _ = run(capsys, tmp_path, "kernels", SYNTH)
    assert code == 0 and out.count("computed") == 3
    files = sorted((tmp_path / "kernels").iterdir())
    assert len(files) == 3
    stamps = [f.stat().st_mtime_ns for f in files]
    code, out, _ = run(capsys, tmp_path, "kernels", SYNTH)
    assert code == 0 and out.count("cache hit") == 3
    assert sorted((tmp_path / "kernels").iterdir()) == files
    assert [f.stat().st_mtime_ns for f in files] == stamps
    code, out, _ = run(capsys, tmp_path, "kernels", SYNTH, "--kernel.wl_iterations", "2")
    assert "WL: computed" in out and "SP: cache hit" in out and "FGSD: cache hit" in out
    assert len(list((tmp_path / "kernels").iterdir())) == 4
    assert (tmp_path / "kernels.config.ini").exists()


def test_kernels_unreadable_dataset(tmp_path, capsys):
    code, _, err = run(capsys, tmp_path, "kernels", str(tmp_path / "nope"))
    assert code != 0 and err.startswith("error:") and err.count("\n") == 1


# pretrain

def test_pretrain_requires_kernel_cache(tmp_path, capsys):
    code, _, err = run(capsys, tmp_path, "pretrain", SYNTH, "--epochs", "1")
    assert code == 1 and "unigraph kernels" in err and err.count("\n") == 1


def test_pretrain_smoke_default_config(tmp_path, capsys):
    start = time.perf_counter()
    assert run(capsys, tmp_path, "kernels", "synth:cycles_cliques:40")[0] == 0
    code, out, err = run(capsys, tmp_path, "pretrain", "synth:cycles_cliques:40", "--epochs", "3")
    assert code == 0, err
    assert time.perf_counter() - start < 60
    assert (tmp_path / "pretrain.ckpt").exists()
    records = [json.loads(l) for l in (tmp_path / "pretrain.log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert all({"adjacency", "kernel_unsup", "total"} <= set(r["loss"]) for r in records)
    echo = configparser.ConfigParser()
    echo.optionxform = str
    echo.read(tmp_path / "pretrain.config.ini")
    assert echo["encoder"]["hidden"] == "32" and echo["train"]["seed"] == "0"


def test_pretrain_logs_deterministic(tmp_path, capsys):
    logs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        run(capsys, out, "kernels", SYNTH)
        assert run(capsys, out, "--seed", "4", "pretrain", SYNTH, "--epochs", "2", *FAST)[0] == 0
        logs.append((out / "pretrain.log.jsonl").read_text())
        assert (out / "pretrain.ckpt").exists()
    assert logs[0] == logs[1]
    # the config echo inside differs by output directory, the tensors must not
    a, b = (load_checkpoint(tmp_path / sub / "pretrain.ckpt") for sub in ("a", "b"))
    assert a.tensors.keys() == b.tensors.keys()
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


# finetune

def test_finetune_results_schema(tmp_path, capsys, pretrained):
    code, out, err = run(capsys, tmp_path, "finetune", SYNTH, "--from-checkpoint", str(pretrained),
                         "--compare-fresh", "--folds", "4", "--epochs", "3", *FAST)
    assert code == 0, err
    res = json.loads((tmp_path / "finetune.results.json").read_text())
    assert res["dataset"] == "cycles_cliques" and res["folds"] == 4 and res["seed"] == 0
    assert set(res["runs"]) == {"pretrained", "fresh"}
    for r in res["runs"].values():
        assert len(r["fold_accuracies"]) == 4 and all(0 <= a <= 1 for a in r["fold_accuracies"])
        assert r["mean"] == pytest.approx(np.mean(r["fold_accuracies"]))
        assert r["std"] == pytest.approx(np.std(r["fold_accuracies"]))
        assert [d["fold"] for d in r["details"]] == [0, 1, 2, 3]
    assert "[pretrained]" in out and "[fresh]" in out
    records = [json.loads(l) for l in (tmp_path / "finetune.log.jsonl").read_text().splitlines()]
    assert {r["run"] for r in records} == {"pretrained", "fresh"}
    assert all({"epoch", "lr", "loss", "val_loss", "val_accuracy", "fold"} <= set(r) for r in records)


def test_finetune_rejects_one_fold(tmp_path, capsys):
    run(capsys, tmp_path, "kernels", SYNTH)
    code, _, err = run(capsys, tmp_path, "finetune", SYNTH, "--folds", "1")
    assert code == 1 and "folds" in err


def test_finetune_checkpoint_then_eval(tmp_path, capsys):
    run(capsys, tmp_path, "kernels", SYNTH)
    code, _, err = run(capsys, tmp_path, "finetune", SYNTH, "--folds", "4", "--epochs", "2", "--save-checkpoints",
                       *FAST)
    assert code == 0, err
    ckpt = tmp_path / "checkpoints" / "fresh.fold1.ckpt"
    assert ckpt.exists()
    code, out, err = run(capsys, tmp_path, "eval", SYNTH, "--checkpoint", str(ckpt), "--fold", "1", "--folds", "4",
                         *FAST)
    assert code == 0, err
    res = json.loads((tmp_path / "cycles_cliques.eval.json").read_text())
    assert res["part"] == "test" and res["graphs"] == 5 and 0 <= res["accuracy"] <= 1
    details = json.loads((tmp_path / "finetune.results.json").read_text())["runs"]["fresh"]
    assert res["accuracy"] == details["fold_accuracies"][1]


# embed

def labelled_dir(tmp_path):
    # last graph is a relabelled copy of the first
    ds = synth_sparse_vs_dense(12, seed=2)
    g0 = ds.graphs[0]
    copy = permute(g0, np.random.default_rng(0).permutation(g0.n))
    ds = Dataset("labelled", ds.graphs + [copy], list(ds.labels) + [ds.labels[0]], 2, 3, [0, 1])
    write_tu(tmp_path / "labelled", ds)
    return tmp_path / "labelled"


def test_embed_rows_determinism_and_invariance(tmp_path, capsys):
    data = str(labelled_dir(tmp_path))
    run(capsys, tmp_path, "kernels", data)
    assert run(capsys, tmp_path, "pretrain", data, "--epochs", "2", *FAST)[0] == 0
    ckpt = str(tmp_path / "pretrain.ckpt")
    outs = []
    for name in ("e1.csv", "e2.csv"):
        code, _, err = run(capsys, tmp_path, "embed", data, "--checkpoint", ckpt, "--output", str(tmp_path / name),
                           *FAST)
        assert code == 0, err
        outs.append((tmp_path / name).read_text())
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert lines[0] == "graph," + ",".join(f"z{j}" for j in range(8))
    rows = np.loadtxt(tmp_path / "e1.csv", delimiter=",", skiprows=1)
    assert rows.shape == (13, 9)
    np.testing.assert_array_equal(rows[:, 0], np.arange(13))
    np.testing.assert_allclose(rows[12, 1:], rows[0, 1:], atol=1e-6, rtol=0)


def test_embed_architecture_mismatch(tmp_path, capsys, pretrained):
    code, _, err = run(capsys, tmp_path, "embed", SYNTH, "--checkpoint", str(pretrained), "--encoder.hidden", "16")
    assert code == 1 and "encoder.hidden" in err and err.count("\n") == 1


def test_embed_unknown_dataset_in_checkpoint(tmp_path, capsys, pretrained):
    code, _, err = run(capsys, tmp_path, "embed", "synth:sparse_dense:12", "--checkpoint", str(pretrained), *FAST)
    assert code == 1 and "sparse_dense" in err


# process-level behaviour

def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "unigraph.cli", "--output-dir", str(tmp_path), "--threads", "1",
                         "kernels", "synth:sparse_dense:10"], capture_output=True, text=True)
    assert ok.returncode == 0 and ok.stdout.count("computed") == 3
    bad = subprocess.run([sys.executable, "-m", "unigraph.cli", "--output-dir", str(tmp_path), "embed",
                          SYNTH, "--checkpoint", str(tmp_path / "missing.ckpt")], capture_output=True, text=True)
    assert bad.returncode == 1
    assert bad.stderr.strip().startswith("error: checkpoint not found") and bad.stderr.count("\n") == 1
