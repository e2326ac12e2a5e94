"""Paired ann-mode and snn-mode tickets across pruning ratios on the same data.

    python scripts/reward_table.py [--config scripts/configs/cnn_mini.yaml] [--epochs 30]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from spiketicket import experiment, trends

HERE = Path(__file__).parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=HERE / "configs" / "cnn_mini.yaml")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pa", default="0.2,0.3,0.4,0.5,0.6,0.7,0.8")
    p.add_argument("--out", default="runs/reward")
    args = p.parse_args()
    cfg = replace(experiment.load_config(args.config), out=args.out)
    if args.epochs:
        cfg = replace(cfg, epochs_na=args.epochs)
    table, _ = trends.reward_table(cfg, tuple(float(v) for v in args.pa.split(",")), write=True)
    print(table)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "reward_table.txt").write_text(table + "\n")


if __name__ == "__main__":
    main()
