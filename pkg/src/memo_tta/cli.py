"""Command-line entry point: ``memo-tta {train,eval,sweep,corrupt} --config PATH``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench, data, nn
from .config import ConfigError, RunConfig, dump_config, load_config

logger = logging.getLogger("memo_tta")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "run_manifest.json"


def write_manifest(out: Path, cfg: RunConfig, command: str, outputs: list) -> Path:
    """Sidecar recording the resolved config, seed and produced files."""
    path = out / MANIFEST
    doc = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(),
           "outputs": [str(Path(p).name) for p in outputs]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def build_train_set(cfg: RunConfig) -> data.Dataset:
    d = cfg.data
    if d.source == "synthetic":
        return data.generate_synthetic(d.num_classes, d.n_train_per_class, d.image_size, d.train_seed,
                                       "train", shading=d.shading, grain=d.grain)
    return _load_external(cfg, "train")


def build_test_set(cfg: RunConfig) -> data.Dataset:
    d = cfg.data
    if d.source == "synthetic":
        ds = data.generate_synthetic(d.num_classes, d.n_test_per_class, d.image_size, d.test_seed,
                                     "test_clean", shading=d.shading, grain=d.grain)
    else:
        ds = _load_external(cfg, "test_clean")
    if cfg.eval.n_points is not None:
        ds = ds.subset(min(cfg.eval.n_points, len(ds)))
    return ds


def _load_external(cfg: RunConfig, split: str) -> data.Dataset:
    d = cfg.data
    if not d.images_path:
        raise ConfigError(f"data.images_path is required for source {d.source!r}")
    if d.source == "idx":
        if not d.labels_path:
            raise ConfigError("data.labels_path is required for source 'idx'")
        return data.load_idx(d.images_path, d.labels_path, d.num_classes, split)
    return data.load_cifar_binary(d.images_path, d.num_classes, split)


def shifted_sets(cfg: RunConfig, clean: data.Dataset):
    for kind in cfg.eval.corruptions:
        for sev in cfg.eval.severities:
            try:
                spec = data.CorruptionSpec(kind, int(sev), cfg.seed)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            yield data.corrupt(clean, spec)


def load_model(cfg: RunConfig) -> nn.Model:
    if not cfg.eval.checkpoint:
        raise ConfigError("eval.checkpoint is required")
    try:
        model, _ = nn.load_checkpoint(cfg.eval.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {cfg.eval.checkpoint}") from exc
    return model


def cmd_train(cfg: RunConfig, out: Path) -> list:
    train = build_train_set(cfg)
    arch = cfg.model.to_arch(train.input_shape, train.num_classes)
    model = nn.build_model(arch, cfg.seed)
    t = cfg.train
    if t.augment not in nn.TRAIN_AUGMENTS:
        raise ConfigError(f"train.augment must be one of {nn.TRAIN_AUGMENTS}")
    model, history = nn.train_supervised(model, train, t.epochs, t.lr, cfg.seed, t.batch_size, t.momentum,
                                         t.weight_decay, t.augment)
    ckpt = out / "model.ckpt"
    # the output location is not part of the model, so reruns elsewhere stay byte-identical
    snapshot = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    nn.save_checkpoint(model, ckpt, meta={"seed": cfg.seed, "epochs": t.epochs,
                                          "final_train_acc": history[-1]["train_acc"],
                                          "config": snapshot})
    hist = out / "history.csv"
    with hist.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)
    logger.info("final train accuracy %.3f", history[-1]["train_acc"])
    return [ckpt, hist]


def cmd_eval(cfg: RunConfig, out: Path) -> list:
    model = load_model(cfg)
    if not cfg.eval.strategies:
        raise ConfigError("eval.strategies must be non-empty")
    clean = build_test_set(cfg)
    results = []
    for ds in shifted_sets(cfg, clean):
        for strategy in cfg.eval.strategies:
            res = bench.evaluate(model, ds, cfg.adaptation_for(strategy), cfg.seed, cfg.parallelism,
                                 cfg.augment)
            logger.info("%s %s: error %.2f%% (%.4f s/point)", strategy, ds.split, res.error_pct,
                        res.sec_per_point)
            results.append(res)
    return [bench.write_results(results, out / "results.csv")]


def cmd_sweep(cfg: RunConfig, out: Path) -> list:
    model = load_model(cfg)
    clean = build_test_set(cfg)
    adapt_cfg = cfg.adaptation_for(cfg.adapt.strategy)
    results = []
    for ds in shifted_sets(cfg, clean):
        results += bench.sweep_B(model, ds, adapt_cfg, cfg.eval.B_values, cfg.seed, cfg.parallelism,
                                 cfg.augment)
    return [bench.write_results(results, out / "sweep.csv"),
            bench.write_plot_data(results, out / "sweep_plot.csv")]


def cmd_corrupt(cfg: RunConfig, out: Path) -> list:
    clean = build_test_set(cfg)
    written = []
    labels = out / "labels.idx"
    data.write_idx(labels, clean.labels.astype("uint8"))
    for ds in shifted_sets(cfg, clean):
        kind, sev = bench.split_corruption(ds.split)
        img, lab = data.export_idx(ds, out / f"{kind}-s{sev}")
        lab.unlink()  # labels are shared by every cell
        written.append(img)
    return [labels] + written


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "corrupt": cmd_corrupt}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memo-tta", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path, help="YAML run config")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--parallelism", type=int, help="worker processes for evaluation")
        s.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {k: v for k, v in (("seed", args.seed), ("parallelism", args.parallelism)) if v is not None}
        if args.out is not None:
            overrides["out_dir"] = str(args.out)
        cfg = dataclasses.replace(cfg, **overrides)
        if cfg.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, out)
        write_manifest(out, cfg, args.command, outputs)
        (out / "resolved_config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    except (ConfigError, nn.CheckpointError, data.DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (nn.TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
