"""Error versus cost as the augmentation budget B grows.

    python scripts/b_sweep.py --config configs/default.yaml --checkpoint runs/train/model.ckpt \
        --lr 0.005 --steps 1 --out runs/sweep
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from memo_tta import bench, cli, nn
from memo_tta.config import load_config


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path("configs/default.yaml"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--lr", type=float, help="override adapt.lr")
    p.add_argument("--steps", type=int, help="override adapt.steps")
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))
    p.add_argument("--parallelism", type=int, default=1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    model, _ = nn.load_checkpoint(args.checkpoint)
    ac = cfg.adaptation_for(cfg.adapt.strategy)
    ac = ac.with_(**{k: v for k, v in (("lr", args.lr), ("steps", args.steps)) if v is not None})
    results = []
    for ds in cli.shifted_sets(cfg, cli.build_test_set(cfg)):
        for r in bench.sweep_B(model, ds, ac, cfg.eval.B_values, cfg.seed, args.parallelism, cfg.augment):
            logging.info("%s B=%-3d error %6.2f%%  %.4f s/point", ds.split, r.config.B, r.error_pct,
                         r.sec_per_point)
            results.append(r)
    args.out.mkdir(parents=True, exist_ok=True)
    bench.write_results(results, args.out / "sweep.csv")
    bench.write_plot_data(results, args.out / "sweep_plot.csv")


if __name__ == "__main__":
    main()
