"""Command-line entry point: ``spiketicket <verb> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import energy, experiment, pruner
from .data import gen_synthetic
from .experiment import ConfigError, ExperimentConfig, StageError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = experiment.load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _say(args, *parts) -> None:
    if not args.quiet:
        print(*parts)


def _run_dir(args, cfg) -> Path:
    return Path(args.run) if getattr(args, "run", None) else cfg.run_dir()


def _summary(rec) -> str:
    kept = f" kept {rec.kept_patches}/{rec.n_patches}" if rec.kept_patches is not None else ""
    sp = f" sparsity {rec.sparsity:.3f}" if rec.sparsity is not None else ""
    return f"{rec.config_hash}: train {rec.train_acc:.4f} test {rec.test_acc:.4f}{sp}{kept}"


def cmd_gen_data(args, cfg):
    d = cfg.data
    ds = gen_synthetic(cfg.seed, d.n_per_class, d.classes, cfg.model.input_shape, d.contrast, d.noise)
    path = Path(cfg.out) / f"synthetic_seed{cfg.seed}.sltt"
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    _say(args, f"wrote {len(ds)} samples to {path}")


def _finish(args, s):
    rec = experiment.make_record(s)
    path = experiment.write_outputs(s, rec, _run_dir(args, s.config))  # new hash when the config changed
    _say(args, _summary(rec))
    _say(args, f"run directory {path}")


def cmd_train(args, cfg):
    rec = experiment.run(cfg, dense=True)
    _say(args, _summary(rec))


def cmd_prune(args, cfg):
    s = experiment.prepare(cfg)
    s.init_hash = experiment._init_digest(s)
    experiment.stage_prune(s)
    _finish(args, s)


def cmd_patch_prune(args, cfg):
    s = experiment.load_checkpoint(_run_dir(args, cfg))
    if args.pb is not None:
        s.config = replace(s.config, pb=args.pb)
    experiment.stage_patches(s)
    _finish(args, s)


def cmd_finetune(args, cfg):
    s = experiment.load_checkpoint(_run_dir(args, cfg))
    experiment.stage_finetune(s)
    _finish(args, s)


def cmd_run(args, cfg):
    rec = experiment.run(cfg)
    _say(args, _summary(rec))


def cmd_energy(args, cfg):
    s = experiment.load_checkpoint(_run_dir(args, cfg))
    if s.config.model.mode != "snn":
        _say(args, f"ann energy {energy.ann_energy(s.evaluated):.6e} J")
        return
    rep = energy.model_energy(s.evaluated, [s.train.x[:64]], s.config.T)
    out = _run_dir(args, cfg)
    (out / "energy.csv").write_text(rep.to_csv())
    (out / "energy.json").write_text(rep.to_json())
    _say(args, rep.to_csv().rstrip())
    _say(args, f"total snn {rep.total_snn:.6e} J  ann {rep.total_ann:.6e} J  "
               f"attention {rep.attention_snn:.6e} J  savings {rep.savings:.2f}x")


def _parse_grid(specs) -> dict:
    grid = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ConfigError(f"grid axis must look like name=v1,v2,...; got {spec!r}")
        axis, values = spec.split("=", 1)
        try:
            grid[axis] = [float(v) if axis != "T" else int(v) for v in values.split(",") if v]
        except ValueError as e:
            raise ConfigError(f"bad value in grid axis {axis!r}: {e}") from e
    return grid


def cmd_sweep(args, cfg):
    records, summary, _ = experiment.sweep(cfg, _parse_grid(args.grid), dense=args.dense)
    _say(args, summary.rstrip())


def cmd_report(args, cfg):
    root = Path(args.run) if args.run else Path(cfg.out)
    paths = [root / "record.json"] if (root / "record.json").exists() else sorted(root.glob("*/record.json"))
    if not paths:
        raise ConfigError(f"no run records under {root}")
    for p in paths:
        rec = experiment.RunRecord.from_json(p.read_text())
        if args.verify:
            s = experiment.load_checkpoint(p.parent)
            acc = pruner.evaluate(s.evaluated, s.test.x, s.test.y, s.config.T)
            status = "ok" if acc == rec.test_acc else f"MISMATCH {acc}"
            _say(args, _summary(rec), f"reload {status}")
            if acc != rec.test_acc:
                raise RuntimeError(f"re-evaluated accuracy {acc} differs from recorded {rec.test_acc}")
        else:
            _say(args, _summary(rec))
        if args.json:
            _say(args, json.dumps(rec.metrics(), indent=2))


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "prune": cmd_prune, "patch-prune": cmd_patch_prune,
         "finetune": cmd_finetune, "energy": cmd_energy, "sweep": cmd_sweep, "report": cmd_report,
         "run": cmd_run}


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # flags may go before or after the verb; the subcommand copy must not clobber the first
        g = argparse.ArgumentParser(add_help=False, argument_default=default)
        g.add_argument("--config", help="YAML or JSON experiment config")
        g.add_argument("--seed", type=int, help="override the config seed")
        g.add_argument("--out", help="output directory")
        g.add_argument("--quiet", action="store_true", default=default if default is not None else False)
        return g

    common = global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="spiketicket", parents=[global_flags(None)],
                                description="Spiking lottery ticket experiments")
    sub = p.add_subparsers(dest="verb", required=True)
    helps = {"gen-data": "write the synthetic dataset", "train": "train the dense baseline",
             "prune": "stage 1 ticket search", "patch-prune": "stage 2 patch selection on a pruned run",
             "finetune": "fine-tune a pruned run", "energy": "energy report for a run",
             "sweep": "grid over pa, pb, T or lambda", "report": "summarise run records",
             "run": "all stages end to end"}
    for verb, text in helps.items():
        sp = sub.add_parser(verb, help=text, parents=[common])
        if verb in ("patch-prune", "finetune", "energy", "report"):
            sp.add_argument("--run", help="run directory (default: derived from the config hash)")
        if verb == "patch-prune":
            sp.add_argument("--pb", type=float)
        if verb == "sweep":
            sp.add_argument("--grid", action="append", metavar="AXIS=V1,V2",
                            help="axis to vary; give once or twice")
            sp.add_argument("--dense", action="store_true", help="sweep the dense baseline instead")
        if verb == "report":
            sp.add_argument("--verify", action="store_true", help="reload checkpoints and re-evaluate")
            sp.add_argument("--json", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = _config(args)
        VERBS[args.verb](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, RuntimeError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
