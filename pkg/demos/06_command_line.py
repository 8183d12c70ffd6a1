"""
The command-line pipeline
=========================

Runs every subcommand once on a small synthetic dataset: kernel
precomputation, pretraining, fine-tuning from the checkpoint, evaluation of
one fold and embedding export. Everything lands in a temporary directory.
"""
import json
import os
import tempfile

from unigraph.cli import main

small = ["--encoder.hidden", "16", "--encoder.layers", "3"]

with tempfile.TemporaryDirectory() as out:
    def run(*args):
        print("$ unigraph", " ".join(args))
        code = main(["--output-dir", out, "--seed", "0", *args])
        assert code == 0

    data = "synth:cycles_cliques:40"
    run("kernels", data)
    run("kernels", data)  # second call hits the cache
    run("pretrain", data, "--epochs", "5", *small)
    ckpt = os.path.join(out, "pretrain.ckpt")
    run("finetune", data, "--from-checkpoint", ckpt, "--compare-fresh", "--folds", "4", "--epochs", "10",
        "--save-checkpoints", *small)
    run("eval", data, "--checkpoint", os.path.join(out, "checkpoints", "pretrained.fold0.ckpt"), "--fold", "0",
        "--folds", "4", *small)
    run("embed", data, "--checkpoint", ckpt, *small)

    with open(os.path.join(out, "finetune.results.json")) as fh:
        results = json.load(fh)
    print({tag: round(r["mean"], 3) for tag, r in results["runs"].items()})
    print(sorted(os.listdir(out)))
