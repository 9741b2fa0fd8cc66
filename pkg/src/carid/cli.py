"""Command-line entry point: one binary, subcommands per pipeline stage.

Exit codes: 0 success, 1 operational error, 2 usage error. Every run
writes its fully resolved configuration into the run directory before any
work starts, so a job can be reproduced from that file alone via
``--resolved-config``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import yaml

from . import augment, config as config_mod, dataset as dataset_mod, hpo, trainer
from .backbones import BackboneSpec, PretrainedWeightsUnavailable, build_model, freeze_report


class CliError(Exception):
    """Operational failure; message goes to stderr, exit code 1."""


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config-root", default="configs",
                        help="directory with defaults.yaml and group files")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="PATH=VALUE", help="dotted config override (repeatable)")
    parser.add_argument("--with", dest="groups", action="append", default=[],
                        metavar="GROUP=NAME", help="swap a defaults group file (repeatable)")
    parser.add_argument("--run-dir", default=None, help="run directory (default runs/<cmd>-<time>)")
    parser.add_argument("--seed", type=int, default=None, help="override trainer and data seeds")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest, dedup and split the corpus")
    _add_common(p)
    p.add_argument("--synthetic", action="store_true",
                   help="generate the toy shape corpus into data.root first")

    p = sub.add_parser("train", help="fine-tune a backbone")
    _add_common(p)
    p.add_argument("--model", default=None, help="model group name (e.g. resnet50)")
    p.add_argument("--resolved-config", default=None,
                   help="re-run from a previously written resolved config")

    p = sub.add_parser("tune", help="hyperparameter search")
    _add_common(p)
    p.add_argument("--model", default=None, help="model group name")
    p.add_argument("--n-trials", type=int, default=None, help="number of trials (default 30)")
    p.add_argument("--epochs", type=int, default=None, help="epochs per trial (default 10)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("serve", help="start the inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--max-upload-mb", type=int, default=10)

    p = sub.add_parser("export", help="validate and copy a checkpoint artifact")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dump-augmented", help="write augmented samples for inspection")
    _add_common(p)
    p.add_argument("--image", required=True, help="input image file")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", default="augmented_samples")

    return parser


def _compose(args) -> dict:
    defaults = config_mod.read_defaults(args.config_root)
    swaps = {}
    for entry in args.groups:
        group, _, name = entry.partition("=")
        if not name:
            raise CliError(f"--with expects GROUP=NAME, got {entry!r}")
        swaps[group] = name
    if getattr(args, "model", None):
        swaps["model"] = args.model
    unknown = set(swaps) - {g for g, _ in defaults}
    if unknown:
        raise CliError(f"--with names unknown groups: {sorted(unknown)}")
    defaults = [(g, swaps.get(g, n)) for g, n in defaults]
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"trainer.seed={args.seed}", f"data.seed={args.seed}"]
    return config_mod.compose(args.config_root, defaults, overrides)


def _validated_node(args) -> dict:
    if getattr(args, "resolved_config", None):
        node = yaml.safe_load(Path(args.resolved_config).read_text())
    else:
        node = _compose(args)
    violations = config_mod.validate(node)
    if violations:
        lines = "\n".join(f"  {v}" for v in violations)
        raise CliError(f"configuration is invalid:\n{lines}")
    return node


def _make_run_dir(args, node: dict) -> Path:
    run_dir = Path(args.run_dir) if args.run_dir else (
        Path("runs") / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config_mod.serialize(node))
    return run_dir


def _load_manifest(node: dict) -> dataset_mod.DatasetManifest:
    root = Path(node["data"]["root"])
    manifest_path = root / "manifest.csv"
    if not manifest_path.exists():
        raise CliError(f"{manifest_path} not found; run `carid prepare-data` first")
    return dataset_mod.load_prepared_manifest(manifest_path)


def _train_config(node: dict, epochs: int | None = None) -> trainer.TrainConfig:
    model, data = node["model"], node["data"]
    return trainer.TrainConfig(
        optimizer=model["optimizer"]["name"],
        lr=float(model["optimizer"]["lr"]),
        weight_decay=float(model["optimizer"]["weight_decay"]),
        batch_size=int(data["batch_size"]),
        epochs=int(epochs if epochs is not None else node["trainer"]["epochs"]),
        scheduler_patience=int(model["scheduler"]["patience"]),
        scheduler_factor=float(model["scheduler"]["factor"]),
        dropout_rate=float(model["net"]["dropout_value"]),
        seed=int(node["trainer"]["seed"]),
        num_workers=int(data.get("num_workers", 0)),
    )


def _backbone_spec(node: dict) -> BackboneSpec:
    model = node["model"]
    return BackboneSpec(
        name=model["name"],
        pretrained=bool(model.get("pretrained", False)),
        unfreeze_last_block=bool(model.get("unfreeze_last_block", False)),
    )


def _cmd_prepare_data(args) -> int:
    node = _validated_node(args)
    data = node["data"]
    root = Path(data["root"])
    if args.synthetic:
        from .synthetic import generate_synthetic_corpus

        synth = data.get("synthetic", {})
        generate_synthetic_corpus(
            root,
            n_classes=int(synth.get("n_classes", 3)),
            per_class=int(synth.get("per_class", 30)),
            seed=int(data.get("seed", 0)),
        )
        print(f"generated synthetic corpus under {root}")
    manifest, report = dataset_mod.load_manifest(root)
    dedup_cfg = data.get("dedup", {})
    if dedup_cfg.get("enabled", True) and manifest.records:
        kept, dropped = dataset_mod.dedup_by_perceptual_hash(
            manifest.records,
            hash_size=int(dedup_cfg.get("hash_size", 8)),
            threshold=int(dedup_cfg.get("threshold", 10)),
            report=report,
        )
        manifest.records = kept
        print(f"dedup: kept {len(kept)}, dropped {len(dropped)}")
    split = data.get("split", {})
    ratios = (float(split.get("train", 0.7)), float(split.get("val", 0.15)),
              float(split.get("test", 0.15)))
    manifest = dataset_mod.stratified_split(manifest, ratios, seed=int(data.get("seed", 0)))
    dataset_mod.save_manifest(manifest, root / "manifest.csv")
    report.write_jsonl(root / "load_report.jsonl")
    counts = {s.value: len(manifest.by_split(s)) for s in dataset_mod.Split}
    print(f"manifest: {len(manifest.records)} records, {manifest.num_classes} classes, "
          f"splits {counts}; {len(report.issues)} issues reported")
    return 0


def _cmd_train(args) -> int:
    node = _validated_node(args)
    run_dir = _make_run_dir(args, node)
    manifest = _load_manifest(node)
    policy = augment.build_policy(node["augmentation"])
    spec = _backbone_spec(node)
    cfg = _train_config(node)
    model = build_model(spec, manifest.num_classes, cfg.dropout_rate, seed=cfg.seed)
    report = freeze_report(model)
    print(f"run dir: {run_dir}")
    print(f"model {spec.name}: {report['trainable_params']:,} trainable / "
          f"{report['frozen_params']:,} frozen parameters")
    _, history = trainer.train(model, manifest, policy, cfg, run_dir=run_dir)
    best = max(history, key=lambda m: m.val_accuracy)
    print(f"best epoch {best.epoch}: val_accuracy {best.val_accuracy:.4f} "
          f"(checkpoint {run_dir / 'best.ckpt'})")
    return 0


def _cmd_tune(args) -> int:
    node = _validated_node(args)
    run_dir = _make_run_dir(args, node)
    manifest = _load_manifest(node)
    policy = augment.build_policy(node["augmentation"])
    base_spec = _backbone_spec(node)
    hpo_cfg = node.get("hpo", {})
    n_trials = args.n_trials if args.n_trials is not None else int(hpo_cfg.get("n_trials", 30))
    epochs = args.epochs if args.epochs is not None else int(hpo_cfg.get("epochs", 10))
    seed = int(hpo_cfg.get("seed", node["trainer"]["seed"]))
    settings = hpo.TpeSettings(
        gamma=float(hpo_cfg.get("gamma", 0.25)),
        n_startup=int(hpo_cfg.get("n_startup", 10)),
        n_candidates=int(hpo_cfg.get("n_candidates", 24)),
    )

    def objective(params: dict) -> float:
        cfg = _train_config(node, epochs=epochs)
        cfg.optimizer = params["optimizer"]
        cfg.lr = params["lr"]
        cfg.weight_decay = params["weight_decay"]
        cfg.batch_size = params["batch_size"]
        cfg.scheduler_patience = params["scheduler_patience"]
        cfg.scheduler_factor = params["scheduler_factor"]
        cfg.dropout_rate = params["dropout"]
        model = build_model(base_spec, manifest.num_classes, cfg.dropout_rate, seed=cfg.seed)
        _, history = trainer.train(model, manifest, policy, cfg)
        return max(m.val_accuracy for m in history)

    print(f"run dir: {run_dir}; study at {run_dir / 'study.json'}")
    study = hpo.run_study(objective, hpo.define_space(), n_trials, seed,
                          path=run_dir / "study.json", settings=settings)
    best = study.best_trial()
    print(f"best trial {best.id}: objective {best.objective:.4f}")
    print(json.dumps(best.params, indent=2))
    return 0


def _cmd_eval(args) -> int:
    node = _validated_node(args)
    manifest = _load_manifest(node)
    model, meta = trainer.load_checkpoint(args.checkpoint)
    policy = trainer.policy_from_checkpoint(meta)
    result = trainer.evaluate(model, manifest, args.split, policy,
                              batch_size=int(node["data"]["batch_size"]))
    if args.json:
        print(json.dumps(result))
    else:
        print(f"{args.split}: accuracy {result['accuracy']:.4f}, loss {result['loss']:.4f}")
    return 0


def _cmd_serve(args) -> int:
    from . import serve as serve_mod

    serve_mod.main(args.checkpoint, port=args.port, host=args.host,
                   max_upload_mb=args.max_upload_mb)
    return 0


def _cmd_export(args) -> int:
    out = Path(args.out)
    model, meta = trainer.load_checkpoint(args.checkpoint)  # validates integrity
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(Path(args.checkpoint).read_bytes())
    print(f"exported {meta['backbone']['name']} checkpoint "
          f"({meta['num_classes']} classes) to {out}")
    return 0


def _cmd_dump_augmented(args) -> int:
    node = _validated_node(args)
    policy = augment.build_policy(node["augmentation"])
    image = dataset_mod.decode_image(args.image)
    seed = args.seed if args.seed is not None else 0
    paths = augment.dump_samples(policy, image, args.out, n=args.n, seed=seed)
    print(f"wrote {len(paths)} samples to {args.out}")
    return 0


_HANDLERS = {
    "prepare-data": _cmd_prepare_data,
    "train": _cmd_train,
    "tune": _cmd_tune,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
    "export": _cmd_export,
    "dump-augmented": _cmd_dump_augmented,
}

_OPERATIONAL_ERRORS = (
    CliError,
    config_mod.ConfigError,
    dataset_mod.DatasetError,
    hpo.HpoError,
    trainer.EmptySplit,
    trainer.NaNLoss,
    trainer.CorruptCheckpoint,
    trainer.VersionMismatch,
    PretrainedWeightsUnavailable,
    FileNotFoundError,
)


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except _OPERATIONAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
