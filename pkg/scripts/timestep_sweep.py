"""Accuracy and energy of the snn ticket for T in {1, 2, 4, 8}.

    python scripts/timestep_sweep.py [--config scripts/configs/cnn_mini.yaml]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from spiketicket import experiment, trends

HERE = Path(__file__).parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=HERE / "configs" / "cnn_mini.yaml")
    p.add_argument("--T", default="1,2,4,8")
    p.add_argument("--out", default="runs/timesteps")
    args = p.parse_args()
    cfg = replace(experiment.load_config(args.config), out=args.out)
    table, _ = trends.timestep_table(cfg, tuple(int(v) for v in args.T.split(",")), write=True)
    print(table)
    (Path(args.out) / "timestep_table.txt").write_text(table + "\n")


if __name__ == "__main__":
    main()
