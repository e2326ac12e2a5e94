"""Dense baseline, then the two-stage MultiSp ticket, then a P_b sweep on the same ticket.

    python scripts/multisp.py [--config scripts/configs/multisp.yaml]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from spiketicket import experiment, pruner

HERE = Path(__file__).parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=HERE / "configs" / "multisp.yaml")
    p.add_argument("--pb", default="0.1,0.2,0.3,0.4,0.5,0.6")
    args = p.parse_args()
    cfg = experiment.load_config(args.config)
    dense = experiment.run(cfg, dense=True)
    print(f"dense snn baseline: train {dense.train_acc:.4f} test {dense.test_acc:.4f}")
    rec = experiment.run(cfg)
    print(f"MultiSp pa={cfg.pa} pb={cfg.pb}: train {rec.train_acc:.4f} test {rec.test_acc:.4f} "
          f"kept {rec.kept_patches}/{rec.n_patches}")
    # stage 2 only reads the stage-1 ticket, so one search serves every P_b
    s = experiment.load_checkpoint(cfg.run_dir())
    print(" P_b | kept | test")
    for pb in (float(v) for v in args.pb.split(",")):
        s.config = replace(s.config, pb=pb)
        experiment.stage_patches(s)
        acc = pruner.evaluate(s.evaluated, s.test.x, s.test.y, cfg.T)
        print(f"{pb:4.2f} | {s.evaluated.tokens:4d} | {acc:.4f}")


if __name__ == "__main__":
    main()
