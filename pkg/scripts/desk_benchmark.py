"""Desk-scale comparison of test-time strategies on the synthetic shapes set.

Trains ConvSmall with the given run config (or loads --checkpoint), tunes the
learning rate and step count of each adaptive strategy on the held-out
validation corruption, then evaluates every strategy on every requested
(corruption, severity) cell.  Writes results.csv and summary.json to --out.

    python scripts/desk_benchmark.py --config configs/default.yaml --out runs/bench
"""
from __future__ import annotations

import argparse
import json
import logging
import math
from pathlib import Path

from memo_tta import bench, cli, data, nn
from memo_tta.config import load_config

TUNED = ("memo", "ce_single_point", "pce")


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path("configs/default.yaml"))
    p.add_argument("--checkpoint", type=Path, help="skip training and load this model")
    p.add_argument("--out", type=Path, default=Path("runs/bench"))
    p.add_argument("--validation-points", type=int, default=160)
    p.add_argument("--parallelism", type=int, default=1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        model, _ = nn.load_checkpoint(args.checkpoint)
    else:
        train = cli.build_train_set(cfg)
        model = nn.build_model(cfg.model.to_arch(train.input_shape, train.num_classes), cfg.seed)
        t = cfg.train
        model, _ = nn.train_supervised(model, train, t.epochs, t.lr, cfg.seed, t.batch_size, t.momentum,
                                       t.weight_decay, t.augment)
        nn.save_checkpoint(model, args.out / "model.ckpt", meta={"seed": cfg.seed})

    d = cfg.data
    per_class = max(1, args.validation_points // d.num_classes)
    val_clean = data.generate_synthetic(d.num_classes, per_class, d.image_size, d.test_seed + 1, "validation",
                                        shading=d.shading, grain=d.grain)
    validation = data.corrupt(val_clean, data.CorruptionSpec(data.VALIDATION_KINDS[0], 4, cfg.seed))

    configs, tuning = {}, {}
    for strategy in cfg.eval.strategies:
        configs[strategy] = cfg.adaptation_for(strategy)
        if strategy in TUNED:
            res = bench.tune_learning_rate(model, validation, configs[strategy], seed=cfg.seed,
                                           parallelism=args.parallelism, policy=cfg.augment)
            configs[strategy] = res.best
            tuning[strategy] = {"lr": res.best.lr, "steps": res.best.steps, "validation_error": res.best_error,
                                "trials": res.trials}

    clean = cli.build_test_set(cfg)
    results = {s: [] for s in configs}
    for ds in cli.shifted_sets(cfg, clean):
        for strategy, ac in configs.items():
            r = bench.evaluate(model, ds, ac, cfg.seed, args.parallelism, cfg.augment)
            logging.info("%-16s %-32s error %6.2f%%  %.4f s/point", strategy, ds.split, r.error_pct,
                         r.sec_per_point)
            results[strategy].append(r)
    bench.write_results([r for rs in results.values() for r in rs], args.out / "results.csv")

    summary = {"tuning": tuning, "strategies": {}}
    reference = results.get("none")
    for strategy, rs in results.items():
        s = bench.corruption_error_summary(rs, reference)
        if "mce" in s and math.isnan(s["mce"]):
            s["mce"] = None
        summary["strategies"][strategy] = s
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
