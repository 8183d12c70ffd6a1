"""Command-line pipeline: kernel precompute, pretraining, fine-tuning, evaluation and embedding export.

Usage::

    unigraph [--config run.ini] [--seed 0] [--threads 4] [--output-dir out] COMMAND ...
             [--section.key value ...]

Datasets are given as a TU directory (``path/to/MUTAG`` holding ``MUTAG_A.txt``
and friends) or as ``synth:cycles_cliques[:count]`` / ``synth:sparse_dense[:count]``.
Any config field can be overridden with ``--section.key value``; sections are
``encoder``, ``train``, ``loss``, ``kernel`` and ``run``.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from .data import Dataset, load_checkpoint, load_tu, model_from_checkpoint, save_checkpoint, \
    synth_cycles_vs_cliques, synth_sparse_vs_dense
from .encoder import embed_dataset
from .kernels import KINDS, KernelConfig, cache_path, dataset_kernels, graphs_fingerprint, load_kernel
from .losses import FINETUNE, LossWeights
from .model import EncoderConfig, Model
from .training import (DatasetBundle, TrainConfig, cross_validate, evaluate, finetune, fold_splits,
                       prepare_dataset, pretrain, stratified_folds)


class CliError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class RunSettings:
    output_dir: str = "runs"
    cache_dir: str = ""  # defaults to <output_dir>/kernels
    epochs: int = 0  # 0 runs the full train.max_epoch schedule
    synth_seed: int = 0


SECTIONS = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "kernel": KernelConfig,
    "run": RunSettings,
}

# architecture fields that must agree between a checkpoint and the run config
ARCH_FIELDS = ("hidden", "layers", "moments", "mlp_depth", "random_feature_dim", "input_filter")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    loss: LossWeights = LossWeights()
    kernel: KernelConfig = KernelConfig()
    run: RunSettings = RunSettings()

    @property
    def cache_dir(self) -> str:
        return self.run.cache_dir or os.path.join(self.run.output_dir, "kernels")

    @property
    def epochs(self) -> Optional[int]:
        return self.run.epochs or None

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _coerce(cls, key: str, text: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise CliError(f"unknown config key {key!r} for section of {cls.__name__}")
    default = fields[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in configparser.RawConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.RawConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if key == "lambda_k":
            return None if text.lower() in ("", "none") else tuple(float(v) for v in text.split(","))
        return text
    except ValueError:
        raise CliError(f"bad value {text!r} for {cls.__name__}.{key}") from None


def _ini() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # lambda_K and lambda_k are different keys
    return parser


def build_config(path: Optional[str] = None, overrides=(), seed: Optional[int] = None,
                 output_dir: Optional[str] = None) -> RunConfig:
    """Defaults, then the INI file, then ``(section.key, value)`` overrides, then ``--seed``."""
    values = {name: {} for name in SECTIONS}
    if path:
        if not os.path.isfile(path):
            raise CliError(f"config file not found: {path}")
        parser = _ini()
        parser.read(path)
        for section in parser.sections():
            if section not in SECTIONS:
                raise CliError(f"unknown config section [{section}] in {path}")
            for key, text in parser.items(section):
                values[section][key] = _coerce(SECTIONS[section], key, text)
    for dotted, text in overrides:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise CliError(f"override --{dotted} must look like --section.key")
        values[section][key] = _coerce(SECTIONS[section], key, text)
    if seed is not None:
        values["train"]["seed"] = seed
    if output_dir is not None:
        values["run"]["output_dir"] = output_dir
    try:
        return RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None


def write_config_echo(cfg: RunConfig, directory: str, command: str) -> str:
    parser = _ini()
    for name, fields in cfg.to_dict().items():
        parser[name] = {k: ("none" if v is None else ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v))
                        for k, v in fields.items()}
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{command}.config.ini")
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def load_dataset(spec: str, cfg: RunConfig) -> Dataset:
    if spec.startswith("synth:"):
        parts = spec.split(":")
        kind = parts[1] if len(parts) > 1 else ""
        try:
            count = int(parts[2]) if len(parts) > 2 else 200
        except ValueError:
            raise CliError(f"bad graph count in {spec!r}") from None
        if kind == "cycles_cliques":
            return synth_cycles_vs_cliques(count, seed=cfg.run.synth_seed)
        if kind == "sparse_dense":
            return synth_sparse_vs_dense(count, seed=cfg.run.synth_seed)
        raise CliError(f"unknown synthetic dataset {kind!r} (use cycles_cliques or sparse_dense)")
    path = os.path.normpath(spec)
    if not os.path.isdir(path):
        raise CliError(f"dataset directory not found: {spec}")
    return load_tu(path, os.path.basename(path))


def cached_kernels(ds: Dataset, cfg: RunConfig) -> dict:
    """Kernel matrices from the cache; missing or stale files are an error."""
    fp = graphs_fingerprint(ds.graphs)
    out = {}
    for kind in KINDS:
        path = cache_path(cfg.cache_dir, ds.name, kind, cfg.kernel)
        if not os.path.exists(path):
            raise CliError(f"no {kind} kernel cache for {ds.name} in {cfg.cache_dir}; run `unigraph kernels` first")
        km = load_kernel(path)
        if km.fingerprint != fp or km.size != len(ds):
            raise CliError(f"stale {kind} kernel cache for {ds.name}; rerun `unigraph kernels`")
        out[kind] = km
    return out


def check_architecture(ck_cfg: dict, enc: EncoderConfig, source: str):
    for key in ARCH_FIELDS:
        if ck_cfg.get(key) != getattr(enc, key):
            raise CliError(f"{source}: checkpoint has encoder.{key}={ck_cfg.get(key)!r}, "
                           f"config has {getattr(enc, key)!r}")


def load_model(path: str, cfg: RunConfig) -> Model:
    if not os.path.isfile(path):
        raise CliError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    check_architecture(ck.config["encoder"], cfg.encoder, path)
    model = model_from_checkpoint(ck)
    model.cfg = cfg.encoder  # dropout and resampling settings follow the run config
    return model


def check_dataset_fits(model: Model, bundle: DatasetBundle, source: str):
    info = model.datasets.get(bundle.name)
    if info is None:
        return
    if info["in_dim"] != bundle.in_dim:
        raise CliError(f"{source}: dataset {bundle.name} has input width {bundle.in_dim}, "
                       f"checkpoint expects {info['in_dim']}")


class JsonLog:
    def __init__(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.fh = open(path, "w")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _out(cfg: RunConfig, *parts) -> str:
    return os.path.join(cfg.run.output_dir, *parts)


# commands

def cmd_kernels(args, cfg: RunConfig) -> int:
    write_config_echo(cfg, cfg.run.output_dir, "kernels")
    for spec in args.datasets:
        ds = load_dataset(spec, cfg)
        report = {}
        dataset_kernels(ds.graphs, cfg.kernel, cfg.cache_dir, ds.name, report)
        for kind in KINDS:
            path, status = report[kind]
            print(f"{ds.name} {kind}: {'cache hit' if status == 'hit' else 'computed'} "
                  f"({len(ds)}x{len(ds)}) {path}")
    return 0


def _bundle(spec: str, cfg: RunConfig, kernels: bool = True) -> DatasetBundle:
    ds = load_dataset(spec, cfg)
    kms = cached_kernels(ds, cfg) if kernels else None
    return prepare_dataset(ds, cfg.encoder, None, cfg.train.seed, kernels=kms)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    bundles = [_bundle(spec, cfg) for spec in args.datasets]
    names = [b.name for b in bundles]
    if len(set(names)) != len(names):
        raise CliError(f"duplicate dataset names: {names}")
    write_config_echo(cfg, cfg.run.output_dir, "pretrain")
    model = Model(cfg.encoder, cfg.train.seed)
    logger = JsonLog(_out(cfg, "pretrain.log.jsonl"))
    try:
        history = pretrain(bundles, model, cfg.train, cfg.loss, args.epochs or cfg.epochs, logger)
    finally:
        logger.close()
    path = args.checkpoint or _out(cfg, "pretrain.ckpt")
    save_checkpoint(path, model, {"command": "pretrain", "datasets": names, **cfg.to_dict()})
    print(f"pretrained on {', '.join(names)} for {len(history)} epochs; final loss {history[-1]:.4f}")
    print(f"checkpoint: {path}")
    return 0


def _cross_validate(bundle, cfg, pretrained, logger, folds, epochs, ckpt_dir, tag):
    train_cfg = dataclasses.replace(cfg.train, folds=folds)

    def log_fn(rec):
        logger({**rec, "run": tag})

    details = []

    def fit(i, tr, va, te):
        model = pretrained.clone() if pretrained is not None else Model(cfg.encoder, cfg.train.seed)
        res = finetune(model, bundle, (tr, va, te), train_cfg, cfg.loss, epochs, log_fn, fold=i)
        details.append({"fold": i, "test_accuracy": res.test_accuracy, "train_accuracy": res.train_accuracy,
                        "best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
                        "best_val_loss": res.best_val_loss})
        if ckpt_dir:
            save_checkpoint(os.path.join(ckpt_dir, f"{tag}.fold{i}.ckpt"), model,
                            {"command": "finetune", "fold": i, "folds": folds, **cfg.to_dict()})
        return res.test_accuracy

    result = cross_validate(bundle, train_cfg, cfg.encoder, cfg.loss, fit=fit)
    result.details = details
    return result


def cmd_finetune(args, cfg: RunConfig) -> int:
    folds = args.folds or cfg.train.folds
    if folds < 2:
        raise CliError(f"--folds must be at least 2, got {folds}")
    bundle = _bundle(args.dataset, cfg)
    pretrained = None
    if args.from_checkpoint:
        pretrained = load_model(args.from_checkpoint, cfg)
        check_dataset_fits(pretrained, bundle, args.from_checkpoint)
    write_config_echo(cfg, cfg.run.output_dir, "finetune")
    epochs = args.epochs or cfg.epochs
    ckpt_dir = _out(cfg, "checkpoints") if args.save_checkpoints else None
    logger = JsonLog(_out(cfg, "finetune.log.jsonl"))
    runs = {}
    try:
        tag = "pretrained" if pretrained is not None else "fresh"
        runs[tag] = _cross_validate(bundle, cfg, pretrained, logger, folds, epochs, ckpt_dir, tag)
        if pretrained is not None and args.compare_fresh:
            runs["fresh"] = _cross_validate(bundle, cfg, None, logger, folds, epochs, ckpt_dir, "fresh")
    finally:
        logger.close()
    out = {"dataset": bundle.name, "folds": folds, "seed": cfg.train.seed,
           "from_checkpoint": args.from_checkpoint or None,
           "runs": {tag: r.to_dict() for tag, r in runs.items()}}
    path = args.results or _out(cfg, "finetune.results.json")
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    for tag, r in runs.items():
        print(f"{bundle.name} [{tag}] {folds}-fold accuracy {r.mean:.4f} +- {r.std:.4f}")
    print(f"results: {path}")
    return 0


def cmd_embed(args, cfg: RunConfig) -> int:
    model = load_model(args.checkpoint, cfg)
    bundle = _bundle(args.dataset, cfg, kernels=False)
    if bundle.name not in model.datasets:
        raise CliError(f"checkpoint has no input transformer for dataset {bundle.name}; "
                       f"pretrain or fine-tune on it first")
    check_dataset_fits(model, bundle, args.checkpoint)
    write_config_echo(cfg, cfg.run.output_dir, "embed")
    z = embed_dataset(model, bundle.name, bundle.prepared)
    path = args.output or _out(cfg, f"{bundle.name}.embeddings.csv")
    header = ",".join(["graph"] + [f"z{j}" for j in range(z.shape[1])])
    rows = np.column_stack([np.arange(len(z)), z])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=["%d"] + ["%.17g"] * z.shape[1])
    print(f"wrote {len(z)} embeddings of width {z.shape[1]} to {path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_model(args.checkpoint, cfg)
    bundle = _bundle(args.dataset, cfg)
    info = model.datasets.get(bundle.name)
    if info is None or info["num_classes"] == 0:
        raise CliError(f"checkpoint has no classifier for dataset {bundle.name}")
    check_dataset_fits(model, bundle, args.checkpoint)
    write_config_echo(cfg, cfg.run.output_dir, "eval")
    if args.fold is None:
        idx = np.arange(len(bundle.dataset))
        part = "all"
    else:
        folds = args.folds or cfg.train.folds
        if not 0 <= args.fold < folds:
            raise CliError(f"--fold must lie in 0..{folds - 1}")
        split = fold_splits(stratified_folds(bundle.dataset.labels, folds, cfg.train.seed))[args.fold]
        idx = split[("train", "val", "test").index(args.part)]
        part = args.part
    res = evaluate(model, bundle, idx, FINETUNE, cfg.loss)
    out = {"dataset": bundle.name, "checkpoint": args.checkpoint, "fold": args.fold, "part": part,
           "graphs": int(len(idx)), "accuracy": res["accuracy"], "loss": res["loss"], "loss_parts": res["parts"]}
    path = args.results or _out(cfg, f"{bundle.name}.eval.json")
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    print(f"{bundle.name} [{part}] accuracy {res['accuracy']:.4f} loss {res['loss']:.4f} on {len(idx)} graphs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unigraph", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="INI file with [encoder], [train], [loss], [kernel], [run] sections")
    p.add_argument("--seed", type=int, help="seed for every random choice (overrides train.seed)")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    p.add_argument("--output-dir", help="where logs, results and config echoes go (run.output_dir)")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kernels", help="precompute and cache the WL, SP and FGSD kernel matrices")
    k.add_argument("datasets", nargs="+")

    pt = sub.add_parser("pretrain", help="unsupervised training on one or more datasets")
    pt.add_argument("datasets", nargs="+")
    pt.add_argument("--epochs", type=int, help="stop after this many epochs (run.epochs)")
    pt.add_argument("--checkpoint", help="output path (default <output-dir>/pretrain.ckpt)")

    ft = sub.add_parser("finetune", help="k-fold supervised training and evaluation")
    ft.add_argument("dataset")
    ft.add_argument("--from-checkpoint", help="start every fold from this pretrained checkpoint")
    ft.add_argument("--compare-fresh", action="store_true",
                    help="with --from-checkpoint, also train from scratch on the same splits")
    ft.add_argument("--folds", type=int)
    ft.add_argument("--epochs", type=int)
    ft.add_argument("--results", help="results path (default <output-dir>/finetune.results.json)")
    ft.add_argument("--save-checkpoints", action="store_true", help="write one checkpoint per fold")

    em = sub.add_parser("embed", help="export graph embeddings as CSV")
    em.add_argument("dataset")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--output")

    ev = sub.add_parser("eval", help="accuracy and loss of a fine-tuned checkpoint")
    ev.add_argument("dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--fold", type=int, help="evaluate one part of this fold's split instead of every graph")
    ev.add_argument("--folds", type=int)
    ev.add_argument("--part", choices=("train", "val", "test"), default="test")
    ev.add_argument("--results")
    return p


COMMANDS = {"kernels": cmd_kernels, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "embed": cmd_embed, "eval": cmd_eval}


def _split_overrides(extra) -> list:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise CliError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise CliError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = build_config(args.config, _split_overrides(extra), args.seed, args.output_dir)
        if args.threads is not None and args.threads < 1:
            raise CliError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
